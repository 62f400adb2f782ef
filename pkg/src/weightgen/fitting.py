"""Shared gradient-descent loop for training a WeightSet directly.

Used for zoo teachers (cross-entropy) and distillation students (KL to the
mean teacher soft label). Deterministic given the seed.
"""
from __future__ import annotations

from typing import Callable

import torch

from .arch import ArchSpec, Batch, WeightSet, forward_inputs, functional_forward, init_weightset
from .data import DatasetSplits, augment_inputs, batch_indices, steps_per_epoch
from .rng import make_stream, stream_seed


def predict_logits(arch: ArchSpec, ws: WeightSet, x: torch.Tensor,
                   chunk: int = 512) -> torch.Tensor:
    outs = []
    with torch.no_grad():
        for start in range(0, x.shape[0], chunk):
            outs.append(forward_inputs(arch, ws, x[start : start + chunk]))
    return torch.cat(outs)


def accuracy(logits: torch.Tensor, labels: torch.Tensor) -> float:
    return float((logits.argmax(dim=-1) == labels).float().mean())


def fit_weightset(
    arch: ArchSpec,
    data: DatasetSplits,
    loss_fn: Callable[[torch.Tensor, Batch], torch.Tensor],
    *,
    steps: int,
    lr: float,
    seed: int,
    batch_size: int = 32,
    weight_decay: float = 0.0,
    augment: bool = False,
    eval_every: int | None = None,
) -> tuple[WeightSet, float]:
    """Adam on the tensors of a fresh WeightSet; returns the best-val-acc state."""
    ws = init_weightset(arch, make_stream(seed, "init")).requires_grad_()
    params = ws.parameters()
    opt = torch.optim.Adam(params, lr=lr, weight_decay=weight_decay)
    batch_seed = stream_seed(seed, "batches")
    if eval_every is None:
        eval_every = max(1, steps_per_epoch(data.n_train, batch_size))

    def val_acc() -> float:
        return accuracy(predict_logits(arch, ws, data.x_val), data.y_val)

    best_acc = val_acc()
    best = ws.detach().clone()
    for step in range(steps):
        idx = batch_indices(data.n_train, batch_size, step, batch_seed)
        x = data.x_train[idx]
        if augment:
            x = augment_inputs(x, step, seed)
        batch = Batch(x, data.y_train[idx])
        loss = loss_fn(functional_forward(arch, ws, batch), batch)
        opt.zero_grad()
        loss.backward()
        opt.step()
        if (step + 1) % eval_every == 0 or step == steps - 1:
            acc = val_acc()
            if acc > best_acc:
                best_acc = acc
                best = ws.detach().clone()
    return best, best_acc
