"""Desk datasets and stateless minibatch indexing.

Two datasets are available: "digits" (the 8x8 sklearn digit images, no
downloads required) and "blobs" (a synthetic class-prototype image set that
trains in seconds, used where many cheap teacher pools are needed). Splits are
fixed by a dedicated split seed so every method evaluates on one shared test
split.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch

from .errors import ConfigurationError
from .rng import make_stream, stream_seed


@dataclass
class DatasetSplits:
    name: str
    x_train: torch.Tensor
    y_train: torch.Tensor
    x_val: torch.Tensor
    y_val: torch.Tensor
    x_test: torch.Tensor
    y_test: torch.Tensor
    num_classes: int
    input_shape: tuple[int, int, int]
    load_spec: dict = None  # kwargs that rebuild this exact object via load_dataset

    @property
    def n_train(self) -> int:
        return int(self.x_train.shape[0])

    @property
    def chance_accuracy(self) -> float:
        return 1.0 / self.num_classes


def load_dataset(
    name: str = "digits",
    split_seed: int = 12345,
    subsample_train: int | None = None,
    blob_classes: int = 10,
    blob_size: int = 8,
    blob_train: int = 600,
    blob_val: int = 200,
    blob_test: int = 200,
    blob_noise: float = 0.6,
) -> DatasetSplits:
    if name == "digits":
        splits = _load_digits(split_seed)
    elif name == "blobs":
        splits = _make_blobs(
            split_seed, blob_classes, blob_size, blob_train, blob_val, blob_test, blob_noise
        )
    else:
        raise ConfigurationError(f"unknown dataset '{name}' (expected 'digits' or 'blobs')")
    if subsample_train is not None:
        if subsample_train < 1:
            raise ConfigurationError("subsample_train must be >= 1")
        splits.x_train = splits.x_train[:subsample_train]
        splits.y_train = splits.y_train[:subsample_train]
    splits.load_spec = {
        "name": name,
        "split_seed": split_seed,
        "subsample_train": subsample_train,
        "blob_classes": blob_classes,
        "blob_size": blob_size,
        "blob_train": blob_train,
        "blob_val": blob_val,
        "blob_test": blob_test,
        "blob_noise": blob_noise,
    }
    return splits


def _load_digits(split_seed: int) -> DatasetSplits:
    from sklearn.datasets import load_digits

    bunch = load_digits()
    x = torch.tensor(bunch.images, dtype=torch.float32).unsqueeze(1) / 16.0
    y = torch.tensor(bunch.target, dtype=torch.long)
    n = x.shape[0]
    order = torch.randperm(n, generator=make_stream(split_seed, "digits-split"))
    x, y = x[order], y[order]
    n_train, n_val = 1200, 240
    return DatasetSplits(
        name="digits",
        x_train=x[:n_train],
        y_train=y[:n_train],
        x_val=x[n_train : n_train + n_val],
        y_val=y[n_train : n_train + n_val],
        x_test=x[n_train + n_val :],
        y_test=y[n_train + n_val :],
        num_classes=10,
        input_shape=(1, 8, 8),
    )


def _make_blobs(
    split_seed: int, classes: int, size: int, n_train: int, n_val: int, n_test: int, noise: float
) -> DatasetSplits:
    proto_gen = make_stream(split_seed, "blob-protos")
    protos = torch.randn(classes, 1, size, size, generator=proto_gen)

    def draw(count: int, tag: str) -> tuple[torch.Tensor, torch.Tensor]:
        gen = make_stream(split_seed, f"blob-{tag}")
        labels = torch.randint(0, classes, (count,), generator=gen)
        x = protos[labels] + noise * torch.randn(count, 1, size, size, generator=gen)
        return x, labels

    x_train, y_train = draw(n_train, "train")
    x_val, y_val = draw(n_val, "val")
    x_test, y_test = draw(n_test, "test")
    return DatasetSplits(
        name="blobs",
        x_train=x_train,
        y_train=y_train,
        x_val=x_val,
        y_val=y_val,
        x_test=x_test,
        y_test=y_test,
        num_classes=classes,
        input_shape=(1, size, size),
    )


def steps_per_epoch(n_examples: int, batch_size: int) -> int:
    return max(1, math.ceil(n_examples / batch_size))


def batch_indices(n_examples: int, batch_size: int, step: int, seed: int) -> torch.Tensor:
    """Indices for the minibatch at `step`, as a slice of a per-epoch permutation.

    Stateless: the permutation is derived from (seed, epoch), so a resumed run
    sees exactly the batches the uninterrupted run would have seen.
    """
    spe = steps_per_epoch(n_examples, batch_size)
    epoch, pos = divmod(step, spe)
    perm = torch.randperm(n_examples, generator=make_stream(seed, f"epoch{epoch}"))
    return perm[pos * batch_size : min(n_examples, (pos + 1) * batch_size)]


def augment_inputs(x: torch.Tensor, step: int, seed: int, scale: float = 0.05) -> torch.Tensor:
    """Additive gaussian pixel noise, deterministic per (seed, step)."""
    gen = make_stream(seed, f"aug{step}")
    return x + scale * torch.randn(x.shape, generator=gen, dtype=x.dtype)


__all__ = [
    "DatasetSplits",
    "load_dataset",
    "steps_per_epoch",
    "batch_indices",
    "augment_inputs",
    "stream_seed",
]
