"""Generator optimization: L2-matching pretraining, the bilevel main loop (outer
teacher resampling, inner batch steps on the combined objective), and
fine-tuning pinned to an unseen teacher tuple.

Runs are exactly resumable: batch order is stateless in the step index, all
other randomness lives in named rng streams whose states are checkpointed, and
the optimizer state round-trips through RunState bit-for-bit.
"""
from __future__ import annotations

import copy
import math
from dataclasses import dataclass, asdict
from pathlib import Path
from typing import Mapping, Sequence

import torch

from .arch import Batch, WeightSet
from .data import DatasetSplits, batch_indices, steps_per_epoch
from .errors import ConfigurationError
from .fitting import accuracy, predict_logits
from .generator import WeightGenerator, save_generator
from .losses import LossConfig, combined_loss, l2_match_loss
from .rng import RngHub, stream_seed
from .zoo import TeacherPool, load_weightset, sample_manifests, save_weightset


@dataclass
class TrainConfig:
    batch_size: int = 32
    max_steps: int = 2000
    pretrain_lr: float = 1e-3      # plain SGD
    main_lr: float = 3e-5          # adaptive-moment optimizer
    lr_decay: float = 0.9
    lr_decay_epochs: int = 5
    reload_interval: int = 5000    # resample the teacher tuple every this many steps
    eval_every: int = 500
    patience: int = 10             # evaluations without held-in improvement
    held_out_tuples: int = 2
    pretrain_tuples: int = 2
    pretrain_steps: int = 2000
    pretrain_eval_every: int = 100
    pretrain_plateau_tol: float = 1e-3
    pretrain_plateau_evals: int = 5
    pretrain_optimizer: str = "sgd"  # "sgd" | "adam"
    kd_steps: int = 1500
    kd_lr: float = 2e-3
    seed: int = 0

    def validate(self) -> None:
        for name in ("batch_size", "reload_interval", "eval_every", "patience",
                     "lr_decay_epochs"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be >= 1")
        for name in ("pretrain_lr", "main_lr", "lr_decay", "kd_lr"):
            if getattr(self, name) <= 0:
                raise ConfigurationError(f"{name} must be > 0")
        if self.pretrain_optimizer not in ("sgd", "adam"):
            raise ConfigurationError("pretrain_optimizer must be 'sgd' or 'adam'")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, payload: Mapping) -> "TrainConfig":
        return cls(**{k: payload[k] for k in cls.__dataclass_fields__ if k in payload})


def lr_at_epoch(config: TrainConfig, epoch: int, halvings: int = 0) -> float:
    return config.main_lr * config.lr_decay ** (epoch // config.lr_decay_epochs) \
        * 0.5**halvings


@dataclass
class RunState:
    """Everything needed to continue a run bit-for-bit."""

    step: int
    tuple_ids: list[str]
    held_out_ids: list[list[str]]
    best_val_acc: float
    evals_since_improve: int
    lr_halvings: int
    model_state: dict
    optimizer_state: dict
    best_model_state: dict
    stable_model_state: dict
    stable_optimizer_state: dict
    rng_states: dict
    stopped_early: bool = False

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        torch.save(self.__dict__, path)
        return path

    @classmethod
    def load(cls, path: str | Path) -> "RunState":
        return cls(**torch.load(Path(path), weights_only=False))


@dataclass
class TrainResult:
    best_val_acc: float
    metrics_rows: list[tuple]
    validation_rows: list[tuple]
    state: RunState
    best_path: Path | None = None
    last_path: Path | None = None


def _write_rows(path: Path, header: str, rows: list[tuple], append: bool) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    mode = "a" if append and path.exists() else "w"
    with path.open(mode) as fh:
        if mode == "w":
            fh.write(header + "\n")
        for row in rows:
            fh.write(",".join(_fmt(v) for v in row) + "\n")


def _fmt(value) -> str:
    if isinstance(value, float):
        return f"{value:.10e}"
    return str(value)


def _held_in_val_acc(generator: WeightGenerator, teachers: Sequence[WeightSet],
                     data: DatasetSplits) -> float:
    student = generator.generate_student(list(teachers))
    return accuracy(predict_logits(generator.arch, student, data.x_val), data.y_val)


def train(
    generator: WeightGenerator,
    pool: TeacherPool,
    data: DatasetSplits,
    config: TrainConfig,
    loss_config: LossConfig,
    workdir: str | Path | None = None,
    pinned_ids: Sequence[str] | None = None,
    resume: RunState | None = None,
    max_steps: int | None = None,
) -> TrainResult:
    """Bilevel main loop.

    Outer: resample the teacher tuple from the train split every
    reload_interval steps (or keep it pinned). Inner: minibatch steps on the
    combined objective. Held-in validation accuracy (the current tuple's
    generated student) drives early stopping and the best checkpoint;
    held-out tuples from the train split are tracked alongside.
    """
    config.validate()
    loss_config.validate()
    if max_steps is None:
        max_steps = config.max_steps
    n_teachers = generator.config.n_teachers
    rngs = RngHub(config.seed, ("sampler", "cutoff_a", "cutoff_b", "heldout"))
    opt = torch.optim.Adam(generator.parameters(), lr=config.main_lr)
    spe = steps_per_epoch(data.n_train, config.batch_size)
    batch_seed = stream_seed(config.seed, "train-batches")

    if resume is None:
        if pinned_ids is not None:
            tuple_ids = list(pinned_ids)
        else:
            tuple_ids = [m.id for m in sample_manifests(pool, n_teachers, "train",
                                                        rngs["sampler"])]
        held_out_ids = [
            [m.id for m in sample_manifests(pool, n_teachers, "train", rngs["heldout"])]
            for _ in range(config.held_out_tuples)
        ] if pinned_ids is None else []
        teachers = [pool.load_weights(i) for i in tuple_ids]
        init_acc = _held_in_val_acc(generator, teachers, data)
        state = RunState(
            step=0,
            tuple_ids=tuple_ids,
            held_out_ids=held_out_ids,
            best_val_acc=init_acc,
            evals_since_improve=0,
            lr_halvings=0,
            model_state=copy.deepcopy(generator.state_dict()),
            optimizer_state=copy.deepcopy(opt.state_dict()),
            best_model_state=copy.deepcopy(generator.state_dict()),
            stable_model_state=copy.deepcopy(generator.state_dict()),
            stable_optimizer_state=copy.deepcopy(opt.state_dict()),
            rng_states=rngs.state_dict(),
        )
    else:
        state = resume
        generator.load_state_dict(copy.deepcopy(state.model_state))
        opt.load_state_dict(copy.deepcopy(state.optimizer_state))
        rngs.load_state_dict(state.rng_states)
        tuple_ids = list(state.tuple_ids)
        teachers = [pool.load_weights(i) for i in tuple_ids]

    held_out_teachers = [
        [pool.load_weights(i) for i in ids] for ids in state.held_out_ids
    ]
    metrics_rows: list[tuple] = []
    validation_rows: list[tuple] = []
    stopped = state.stopped_early

    step = state.step
    while step < max_steps and not stopped:
        if pinned_ids is None and step > 0 and step % config.reload_interval == 0:
            tuple_ids = [m.id for m in sample_manifests(pool, n_teachers, "train",
                                                        rngs["sampler"])]
            teachers = [pool.load_weights(i) for i in tuple_ids]
        lr = lr_at_epoch(config, step // spe, state.lr_halvings)
        for group in opt.param_groups:
            group["lr"] = lr
        idx = batch_indices(data.n_train, config.batch_size, step, batch_seed)
        batch = Batch(data.x_train[idx], data.y_train[idx])
        total, comps = combined_loss(batch, teachers, generator, loss_config,
                                     rng_primary=rngs["cutoff_a"],
                                     rng_shift=rngs["cutoff_b"])
        if not math.isfinite(comps["total"]):
            state.lr_halvings += 1
            if state.lr_halvings > 3:
                raise RuntimeError(
                    f"loss non-finite at step {step} after 3 recoveries: {comps}"
                )
            generator.load_state_dict(copy.deepcopy(state.stable_model_state))
            opt.load_state_dict(copy.deepcopy(state.stable_optimizer_state))
            continue
        opt.zero_grad()
        total.backward()
        opt.step()
        metrics_rows.append((step, comps["ce"], comps["consist"], comps["total"], lr))
        step += 1
        if step % config.eval_every == 0:
            held_in = _held_in_val_acc(generator, teachers, data)
            held_out = (
                sum(_held_in_val_acc(generator, ts, data) for ts in held_out_teachers)
                / len(held_out_teachers)
            ) if held_out_teachers else float("nan")
            validation_rows.append((step, held_in, held_out))
            state.stable_model_state = copy.deepcopy(generator.state_dict())
            state.stable_optimizer_state = copy.deepcopy(opt.state_dict())
            if held_in > state.best_val_acc:
                state.best_val_acc = held_in
                state.best_model_state = copy.deepcopy(generator.state_dict())
                state.evals_since_improve = 0
            else:
                state.evals_since_improve += 1
                if state.evals_since_improve >= config.patience:
                    stopped = True

    state.step = step
    state.tuple_ids = tuple_ids
    state.stopped_early = stopped
    state.model_state = copy.deepcopy(generator.state_dict())
    state.optimizer_state = copy.deepcopy(opt.state_dict())
    state.rng_states = rngs.state_dict()

    result = TrainResult(
        best_val_acc=state.best_val_acc,
        metrics_rows=metrics_rows,
        validation_rows=validation_rows,
        state=state,
    )
    if workdir is not None:
        workdir = Path(workdir)
        append = resume is not None
        _write_rows(workdir / "metrics.csv", "step,ce,consist,total,lr",
                    metrics_rows, append)
        _write_rows(workdir / "validation.csv", "step,held_in_acc,held_out_acc",
                    validation_rows, append)
        last_state = copy.deepcopy(generator.state_dict())
        generator.load_state_dict(state.best_model_state)
        result.best_path = save_generator(
            generator, workdir / "checkpoints" / "best.ckpt",
            {"stage": "train", "best_val_acc": state.best_val_acc, "steps": step},
        )
        generator.load_state_dict(last_state)
        result.last_path = save_generator(
            generator, workdir / "checkpoints" / "last.ckpt",
            {"stage": "train", "steps": step},
        )
        state.save(workdir / "state.pt")
    return result


def restore_best(generator: WeightGenerator, result: TrainResult) -> WeightGenerator:
    generator.load_state_dict(copy.deepcopy(result.state.best_model_state))
    return generator


# ---------------------------------------------------------------------------
# pretraining on distilled weight targets
# ---------------------------------------------------------------------------


@dataclass
class PretrainState:
    step: int
    tuple_ids: list[list[str]]
    best_eval: float
    stalls: int
    model_state: dict
    optimizer_state: dict
    rng_states: dict
    stopped_early: bool = False


@dataclass
class PretrainResult:
    metrics_rows: list[tuple]  # (step, match_loss, lr)
    eval_rows: list[tuple]     # (step, eval_match_loss)
    state: PretrainState


def kd_target_key(ids: Sequence[str]) -> str:
    return "-".join(sorted(ids))


def get_kd_target(
    cache_dir: str | Path,
    ids: Sequence[str],
    pool: TeacherPool,
    data: DatasetSplits,
    config: TrainConfig,
    loss_config: LossConfig,
) -> WeightSet:
    """Load the distilled student for a teacher tuple, training it on demand.

    Cached by the sorted id tuple so no tuple is ever distilled twice.
    """
    from .baselines import train_kd_student

    cache_dir = Path(cache_dir)
    cache_dir.mkdir(parents=True, exist_ok=True)
    path = cache_dir / f"{kd_target_key(ids)}.pt"
    if path.exists():
        return load_weightset(path)
    teachers = [pool.load_weights(i) for i in ids]
    # one shared seed: distilled students start from one init and stay in one
    # basin, so the tuple -> weights mapping is smooth enough to learn
    student, _ = train_kd_student(
        teachers, data, loss_config.kd_temperature, config.kd_steps, lr=config.kd_lr,
        batch_size=config.batch_size, seed=stream_seed(config.seed, "kd-shared-init"),
    )
    save_weightset(student, path)
    return student


def pretrain(
    generator: WeightGenerator,
    pool: TeacherPool,
    data: DatasetSplits,
    config: TrainConfig,
    loss_config: LossConfig,
    kd_cache_dir: str | Path,
    workdir: str | Path | None = None,
    resume: PretrainState | None = None,
    max_steps: int | None = None,
) -> PretrainResult:
    """SGD on the L2 matching loss between generated students and cached
    distilled targets; stops when the evaluation-mode matching loss plateaus
    (relative improvement below the tolerance for several evaluations)."""
    config.validate()
    if max_steps is None:
        max_steps = config.pretrain_steps
    n_teachers = generator.config.n_teachers
    rngs = RngHub(config.seed, ("pretrain-sampler", "pretrain-cutoff"))
    if config.pretrain_optimizer == "adam":
        opt = torch.optim.Adam(generator.parameters(), lr=config.pretrain_lr)
    else:
        opt = torch.optim.SGD(generator.parameters(), lr=config.pretrain_lr)

    if resume is None:
        tuple_ids = [
            [m.id for m in sample_manifests(pool, n_teachers, "train",
                                            rngs["pretrain-sampler"])]
            for _ in range(config.pretrain_tuples)
        ]
        state = PretrainState(
            step=0, tuple_ids=tuple_ids, best_eval=float("inf"), stalls=0,
            model_state=copy.deepcopy(generator.state_dict()),
            optimizer_state=copy.deepcopy(opt.state_dict()),
            rng_states=rngs.state_dict(),
        )
    else:
        state = resume
        generator.load_state_dict(copy.deepcopy(state.model_state))
        opt.load_state_dict(copy.deepcopy(state.optimizer_state))
        rngs.load_state_dict(state.rng_states)
        tuple_ids = state.tuple_ids

    tuples = [[pool.load_weights(i) for i in ids] for ids in tuple_ids]
    targets = [
        get_kd_target(kd_cache_dir, ids, pool, data, config, loss_config)
        for ids in tuple_ids
    ]

    def eval_match() -> float:
        with torch.no_grad():
            losses = [
                float(l2_match_loss(generator.generate_student(ts), tgt))
                for ts, tgt in zip(tuples, targets)
            ]
        return sum(losses) / len(losses)

    metrics_rows: list[tuple] = []
    eval_rows: list[tuple] = []
    step = state.step
    stopped = state.stopped_early
    while step < max_steps and not stopped:
        t_idx = step % len(tuples)
        student = generator.generate_student(
            tuples[t_idx], train_mode=True, rng=rngs["pretrain-cutoff"]
        )
        loss = l2_match_loss(student, targets[t_idx])
        opt.zero_grad()
        loss.backward()
        opt.step()
        metrics_rows.append((step, float(loss.detach()), config.pretrain_lr))
        step += 1
        if step % config.pretrain_eval_every == 0:
            cur = eval_match()
            eval_rows.append((step, cur))
            rel_gain = (state.best_eval - cur) / max(state.best_eval, 1e-12)
            if cur < state.best_eval:
                state.best_eval = cur
            if rel_gain < config.pretrain_plateau_tol:
                state.stalls += 1
                if state.stalls >= config.pretrain_plateau_evals:
                    stopped = True
            else:
                state.stalls = 0

    state.step = step
    state.stopped_early = stopped
    state.model_state = copy.deepcopy(generator.state_dict())
    state.optimizer_state = copy.deepcopy(opt.state_dict())
    state.rng_states = rngs.state_dict()

    if workdir is not None:
        workdir = Path(workdir)
        append = resume is not None
        _write_rows(workdir / "pretrain_metrics.csv", "step,match_loss,lr",
                    metrics_rows, append)
        _write_rows(workdir / "pretrain_eval.csv", "step,eval_match_loss",
                    eval_rows, append)
        save_generator(generator, workdir / "checkpoints" / "pretrained.ckpt",
                       {"stage": "pretrain", "steps": step})
    return PretrainResult(metrics_rows, eval_rows, state)


def finetune_unseen(
    generator: WeightGenerator,
    unseen_ids: Sequence[str],
    pool: TeacherPool,
    data: DatasetSplits,
    config: TrainConfig,
    loss_config: LossConfig,
    workdir: str | Path | None = None,
    max_steps: int | None = None,
) -> TrainResult:
    """Continue training with the teacher tuple pinned to unseen checkpoints
    (drawn from the eval split); early-stops on pinned-tuple val accuracy.

    The returned best state is never worse on val accuracy than the incoming
    generator, because the pre-loop evaluation seeds the best checkpoint.
    """
    for cp_id in unseen_ids:
        if pool.manifest(cp_id).split != "eval":
            raise ConfigurationError(f"checkpoint '{cp_id}' is not in the eval split")
    return train(generator, pool, data, config, loss_config, workdir,
                 pinned_ids=list(unseen_ids), max_steps=max_steps)
