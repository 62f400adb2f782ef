"""Reference methods: single model, logit-averaging ensemble, distilled
student, per-layer MLP weight predictor, and the two teacher-count scaling
modes (pairwise reduction vs direct concatenation)."""
from __future__ import annotations

import math
from dataclasses import dataclass, asdict
from typing import Mapping, Sequence

import torch
from torch import nn

from .arch import ArchSpec, Batch, WeightSet, functional_forward
from .codec import (
    NormStats,
    TokenMatrix,
    apply_norm,
    detokenize_weightset,
    invert_norm,
    tokenize_layer,
)
from .data import DatasetSplits, batch_indices
from .errors import ConfigurationError, StructuralError
from .fitting import accuracy, fit_weightset
from .generator import WeightGenerator
from .losses import ce_loss, kd_loss
from .rng import make_stream, stream_seed
from .zoo import TeacherPool, sample_manifests


def ensemble_predict(teachers: Sequence[WeightSet], batch: Batch) -> torch.Tensor:
    """Mean of the member logits."""
    if not teachers:
        raise ConfigurationError("ensemble needs at least one member")
    arch = teachers[0].arch
    fp = arch.fingerprint()
    for ws in teachers[1:]:
        if ws.arch.fingerprint() != fp:
            raise StructuralError("ensemble members disagree in architecture")
    logits = [functional_forward(arch, ws, batch) for ws in teachers]
    return torch.stack(logits).mean(dim=0)


def train_kd_student(
    teachers: Sequence[WeightSet],
    data: DatasetSplits,
    temperature: float,
    steps: int,
    lr: float = 2e-3,
    batch_size: int = 32,
    seed: int = 0,
) -> tuple[WeightSet, float]:
    """Distill the teacher ensemble into one same-architecture student.

    Returns the best-val checkpoint; a run that cannot clear chance accuracy
    is retried once at half the learning rate.
    """
    arch = teachers[0].arch

    def loss_fn(logits: torch.Tensor, batch: Batch) -> torch.Tensor:
        with torch.no_grad():
            teacher_logits = [functional_forward(arch, ws, batch) for ws in teachers]
        return kd_loss(logits, teacher_logits, temperature)

    ws, val_acc = fit_weightset(arch, data, loss_fn, steps=steps, lr=lr,
                                batch_size=batch_size, seed=seed)
    if val_acc <= data.chance_accuracy + 0.02 and steps > 0:
        ws, val_acc = fit_weightset(arch, data, loss_fn, steps=steps, lr=lr / 2,
                                    batch_size=batch_size, seed=stream_seed(seed, "retry"))
        if val_acc <= data.chance_accuracy + 0.02:
            raise ConfigurationError("distillation diverged twice; aborting")
    return ws, val_acc


# ---------------------------------------------------------------------------
# per-layer MLP weight predictor
# ---------------------------------------------------------------------------


@dataclass
class MLPPredictorConfig:
    n_teachers: int = 3
    hidden_mult: int = 4     # hidden width = min(hidden_mult * d_layer, hidden_cap)
    hidden_cap: int = 1024
    lr: float = 1e-4
    steps: int = 1000
    batch_size: int = 32
    reload_interval: int = 200
    seed: int = 0

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, payload: Mapping) -> "MLPPredictorConfig":
        return cls(**{k: payload[k] for k in cls.__dataclass_fields__ if k in payload})


class MLPWeightPredictor(nn.Module):
    """One independent two-layer MLP per student layer.

    Each predictor maps the N teachers' standardized, flattened token matrices
    (N * seq * d_layer inputs) to the student layer's flattened token matrix.
    No information crosses layers.
    """

    def __init__(self, arch: ArchSpec, config: MLPPredictorConfig,
                 norm_stats: NormStats | None = None):
        super().__init__()
        config_hidden = {}
        self.arch = arch
        self.config = config
        self.norm_stats = norm_stats if norm_stats is not None else NormStats.identity(arch)
        nets = {}
        for ls in arch.layers:
            seq, d_layer = ls.token_shape()
            flat = seq * d_layer
            hidden = min(config.hidden_mult * d_layer, config.hidden_cap)
            nets[ls.name] = nn.Sequential(
                nn.Linear(config.n_teachers * flat, hidden),
                nn.ReLU(),
                nn.Linear(hidden, flat),
            )
            config_hidden[ls.name] = hidden
        self.nets = nn.ModuleDict(nets)
        self.hidden_widths = config_hidden
        self._reset_parameters(make_stream(config.seed, "mlp-init"))

    def _reset_parameters(self, rng: torch.Generator) -> None:
        for module in self.modules():
            if isinstance(module, nn.Linear):
                bound = 1.0 / math.sqrt(module.in_features)
                module.weight.data.uniform_(-bound, bound, generator=rng)
                module.bias.data.uniform_(-bound, bound, generator=rng)

    def generate(self, teachers: Sequence[WeightSet]) -> WeightSet:
        if len(teachers) != self.config.n_teachers:
            raise ConfigurationError(
                f"predictor was built for {self.config.n_teachers} teachers, got {len(teachers)}"
            )
        token_map = {}
        for ls in self.arch.layers:
            seq, d_layer = ls.token_shape()
            cols = []
            for ws in teachers:
                tm = apply_norm(tokenize_layer(ws.layer_tensors(ls.name), ls), self.norm_stats)
                cols.append(tm.tokens.reshape(-1))
            flat_out = self.nets[ls.name](torch.cat(cols))
            tm_out = TokenMatrix(flat_out.reshape(seq, d_layer), ls.kind, ls.name)
            token_map[ls.name] = invert_norm(tm_out, self.norm_stats)
        return detokenize_weightset(self.arch, token_map)

    def num_parameters(self) -> int:
        return sum(p.numel() for p in self.parameters())


def mlp_generate(predictor: MLPWeightPredictor, teachers: Sequence[WeightSet]) -> WeightSet:
    return predictor.generate(teachers)


def train_mlp_predictor(
    pool: TeacherPool,
    data: DatasetSplits,
    config: MLPPredictorConfig,
    norm_stats: NormStats | None = None,
) -> MLPWeightPredictor:
    """Train the per-layer predictors on classification CE through the
    generated student (no cross-layer flow, no consistency term)."""
    arch = pool.arch()
    predictor = MLPWeightPredictor(arch, config, norm_stats)
    opt = torch.optim.Adam(predictor.parameters(), lr=config.lr)
    sampler = make_stream(config.seed, "mlp-sampler")
    batch_seed = stream_seed(config.seed, "mlp-batches")
    teachers: list[WeightSet] = []
    for step in range(config.steps):
        if step % config.reload_interval == 0:
            manifests = sample_manifests(pool, config.n_teachers, "train", sampler)
            teachers = [pool.load_weights(m.id) for m in manifests]
        idx = batch_indices(data.n_train, config.batch_size, step, batch_seed)
        batch = Batch(data.x_train[idx], data.y_train[idx])
        student = predictor.generate(teachers)
        loss = ce_loss(functional_forward(arch, student, batch), batch.labels)
        opt.zero_grad()
        loss.backward()
        opt.step()
    return predictor


# ---------------------------------------------------------------------------
# teacher-count scaling
# ---------------------------------------------------------------------------


def scale_teachers(
    pool_sample: Sequence[WeightSet],
    mode: str,
    generator: WeightGenerator,
    m: int | None = None,
) -> tuple[WeightSet, list[str]]:
    """Collapse m teachers into one student.

    "heuristic" folds pairs left-to-right in sampled order (the freshly
    generated student re-enters the teacher set), needing a generator trained
    with two input slots and m-1 generator calls. "concatenate" feeds all m
    teacher blocks in one pass and fails with a capacity error when the
    sequence or the model-id table cannot hold them.
    """
    if m is None:
        m = len(pool_sample)
    if m != len(pool_sample):
        raise ConfigurationError(f"m={m} does not match the {len(pool_sample)} sampled teachers")
    if m < 2:
        raise ConfigurationError("teacher scaling needs m >= 2")
    if mode == "heuristic":
        if generator.config.n_teachers != 2:
            raise ConfigurationError("heuristic mode needs a generator trained with 2 slots")
        log = []
        current = pool_sample[0]
        for i, nxt in enumerate(pool_sample[1:], start=1):
            current = generator.generate_student([current, nxt])
            log.append(f"reduce({'gen' if i > 1 else 'teacher0'}, teacher{i})")
        return current, log
    if mode == "concatenate":
        return generator.generate_student(list(pool_sample)), [f"concatenate({m})"]
    raise ConfigurationError(f"unknown scaling mode '{mode}'")
