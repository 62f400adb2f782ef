"""Teacher checkpoint pool: training, persistence, splits and sampling.

Layout on disk:

    <root>/<dataset>/<arch fingerprint[:12]>/pool.json
    <root>/<dataset>/<arch fingerprint[:12]>/<id>/manifest.json
    <root>/<dataset>/<arch fingerprint[:12]>/<id>/weights.pt

Manifest writes are atomic (write-temp-then-rename). Every load is recorded in
the pool's access log so generator training can prove it never touched the
eval split.
"""
from __future__ import annotations

import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Mapping, Sequence

import torch

from .arch import ArchSpec, WeightSet
from .data import DatasetSplits, load_dataset
from .errors import ConfigurationError, StructuralError
from .fitting import fit_weightset
from .losses import ce_loss
from .rng import make_stream, stream_seed

DEFAULT_GRID = (
    {"lr": 5e-3, "epochs": 30, "weight_decay": 0.0, "augment": False},
    {"lr": 5e-3, "epochs": 30, "weight_decay": 0.0, "augment": True},
    {"lr": 2e-3, "epochs": 30, "weight_decay": 0.0, "augment": False},
    {"lr": 2e-3, "epochs": 30, "weight_decay": 0.0, "augment": True},
)


@dataclass
class CheckpointManifest:
    id: str
    arch_fingerprint: str
    seed: int
    hyperparameters: dict
    val_accuracy: float
    path: str
    split: str  # "train" | "eval"
    arch_text: str = ""  # human-readable layer-by-layer rendering

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, payload: Mapping) -> "CheckpointManifest":
        return cls(**{k: payload[k] for k in cls.__dataclass_fields__ if k in payload})


def save_weightset(ws: WeightSet, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tensors = {f"{name}|{role}": t.detach().clone() for (name, role), t in ws.tensors.items()}
    tmp = path.with_suffix(".tmp")
    torch.save({"arch": ws.arch.to_dict(), "tensors": tensors}, tmp)
    os.replace(tmp, path)
    return path


def load_weightset(path: str | Path) -> WeightSet:
    payload = torch.load(Path(path), weights_only=False)
    arch = ArchSpec.from_dict(payload["arch"])
    tensors = {}
    for key, t in payload["tensors"].items():
        name, role = key.split("|")
        tensors[(name, role)] = t
    ws = WeightSet(arch, tensors)
    ws.validate()
    return ws


def _atomic_write_json(path: Path, payload: dict) -> None:
    tmp = path.with_suffix(".tmp")
    tmp.write_text(json.dumps(payload, indent=2, sort_keys=True))
    os.replace(tmp, path)


@dataclass
class TeacherPool:
    root: Path
    dataset_id: str
    manifests: list[CheckpointManifest]
    access_log: list[tuple[str, str]] = field(default_factory=list)

    @property
    def train_manifests(self) -> list[CheckpointManifest]:
        return [m for m in self.manifests if m.split == "train"]

    @property
    def eval_manifests(self) -> list[CheckpointManifest]:
        return [m for m in self.manifests if m.split == "eval"]

    def validate(self) -> None:
        ids = [m.id for m in self.manifests]
        if len(set(ids)) != len(ids):
            raise StructuralError("duplicate checkpoint ids in pool")
        fps = {m.arch_fingerprint for m in self.manifests}
        if len(fps) > 1:
            raise StructuralError("pool mixes architectures")
        if not self.eval_manifests:
            raise ConfigurationError("pool eval split is empty")

    def manifest(self, cp_id: str) -> CheckpointManifest:
        for m in self.manifests:
            if m.id == cp_id:
                return m
        raise ConfigurationError(f"no checkpoint '{cp_id}' in pool")

    def load_weights(self, cp_id: str) -> WeightSet:
        m = self.manifest(cp_id)
        self.access_log.append((m.id, m.split))
        return load_weightset(m.path)

    def accessed_eval_ids(self) -> set[str]:
        return {cp_id for cp_id, split in self.access_log if split == "eval"}

    def reset_access_log(self) -> None:
        self.access_log.clear()

    def arch(self) -> ArchSpec:
        return load_weightset(self.manifests[0].path).arch


def _pool_dir(root: str | Path, dataset_id: str, arch: ArchSpec) -> Path:
    return Path(root) / dataset_id / arch.fingerprint()[:12]


def _train_one_teacher(args: tuple) -> dict:
    """Worker: train a single checkpoint; retries divergent seeds."""
    (arch_dict, dataset_kwargs, cp_id, hparams, seed, out_dir) = args
    arch = ArchSpec.from_dict(arch_dict)
    data = load_dataset(**dataset_kwargs)
    chance = data.chance_accuracy
    spe = max(1, -(-data.n_train // 32))
    val_acc, ws, used_seed = 0.0, None, seed
    for attempt in range(4):
        used_seed = stream_seed(seed, f"attempt{attempt}") if attempt else seed
        ws, val_acc = fit_weightset(
            arch, data, lambda logits, batch: ce_loss(logits, batch.labels),
            steps=hparams["epochs"] * spe, lr=hparams["lr"],
            weight_decay=hparams.get("weight_decay", 0.0),
            augment=hparams.get("augment", False), seed=used_seed,
        )
        if val_acc > chance + 0.02:
            break
    else:
        raise ConfigurationError(
            f"checkpoint '{cp_id}' failed to clear chance accuracy after 4 seeds"
        )
    cp_dir = Path(out_dir) / cp_id
    weights_path = save_weightset(ws, cp_dir / "weights.pt")
    return {
        "id": cp_id,
        "arch_fingerprint": arch.fingerprint(),
        "seed": used_seed,
        "hyperparameters": dict(hparams),
        "val_accuracy": val_acc,
        "path": str(weights_path),
        "arch_text": arch.to_text(),
    }


def build_pool(
    dataset: DatasetSplits,
    arch: ArchSpec,
    pool_size: int,
    split: tuple[int, int],
    hparam_grid: Sequence[Mapping] | None = None,
    seed: int = 0,
    root: str | Path = "zoo",
    dataset_kwargs: Mapping | None = None,
    jobs: int = 1,
) -> TeacherPool:
    """Train `pool_size` checkpoints and assign a disjoint train/eval split."""
    n_train, n_eval = split
    if n_train + n_eval != pool_size:
        raise ConfigurationError(f"split {split} does not sum to pool_size {pool_size}")
    if n_eval < 1:
        raise ConfigurationError("eval split must be non-empty")
    grid = list(hparam_grid) if hparam_grid else list(DEFAULT_GRID)
    out_dir = _pool_dir(root, dataset.name, arch)
    out_dir.mkdir(parents=True, exist_ok=True)
    dataset_kwargs = dict(dataset_kwargs or dataset.load_spec or {"name": dataset.name})

    tasks = []
    for i in range(pool_size):
        cp_id = f"t{i:03d}"
        hparams = grid[i % len(grid)]
        cp_seed = stream_seed(seed, f"teacher{i}")
        tasks.append((arch.to_dict(), dataset_kwargs, cp_id, dict(hparams), cp_seed,
                      str(out_dir)))

    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool_exec:
            results = list(pool_exec.map(_train_one_teacher, tasks))
    else:
        results = [_train_one_teacher(t) for t in tasks]

    order = torch.randperm(pool_size, generator=make_stream(seed, "split")).tolist()
    split_of = {}
    for rank, idx in enumerate(order):
        split_of[results[idx]["id"]] = "train" if rank < n_train else "eval"

    manifests = []
    for res in results:
        res["split"] = split_of[res["id"]]
        manifest = CheckpointManifest.from_dict(res)
        _atomic_write_json(out_dir / manifest.id / "manifest.json", manifest.to_dict())
        manifests.append(manifest)
    manifests.sort(key=lambda m: m.id)
    _atomic_write_json(out_dir / "pool.json", {
        "dataset": dataset.name,
        "pool_size": pool_size,
        "split": {"train": n_train, "eval": n_eval},
        "ids": [m.id for m in manifests],
    })
    pool = TeacherPool(out_dir, dataset.name, manifests)
    pool.validate()
    return pool


def load_pool(pool_dir: str | Path) -> TeacherPool:
    pool_dir = Path(pool_dir)
    index = json.loads((pool_dir / "pool.json").read_text())
    manifests = [
        CheckpointManifest.from_dict(
            json.loads((pool_dir / cp_id / "manifest.json").read_text())
        )
        for cp_id in index["ids"]
    ]
    pool = TeacherPool(pool_dir, index["dataset"], manifests)
    pool.validate()
    return pool


def sample_manifests(
    pool: TeacherPool, n: int, split: str, rng: torch.Generator
) -> list[CheckpointManifest]:
    members = pool.train_manifests if split == "train" else pool.eval_manifests
    if len(members) < n:
        raise ConfigurationError(
            f"cannot sample {n} checkpoints from a {len(members)}-member {split} split"
        )
    picks = torch.randperm(len(members), generator=rng)[:n].tolist()
    return [members[i] for i in picks]


def sample_teachers(
    pool: TeacherPool, n: int, split: str, rng: torch.Generator
) -> list[WeightSet]:
    """n distinct checkpoints from the split, loaded; deterministic given rng state."""
    return [pool.load_weights(m.id) for m in sample_manifests(pool, n, split, rng)]
