"""Training objectives: distillation KL, classification CE, shift consistency,
the combined objective, and the L2 weight-matching pretraining loss."""
from __future__ import annotations

from dataclasses import dataclass, asdict
from typing import Mapping, Sequence

import torch
import torch.nn.functional as F

from .arch import Batch, WeightSet, functional_forward
from .errors import ConfigurationError, StructuralError
from .generator import WeightGenerator


@dataclass
class LossConfig:
    alpha: float = 1.0            # consistency weight
    kd_temperature: float = 2.0   # softening temperature, T^2-scaled
    reduction: str = "mean"
    kd_student_first: bool = True  # KL(student || mean-teacher) as written
    consistency_sum: bool = False  # True: unnormalized squared norm

    def validate(self) -> None:
        if self.alpha < 0:
            raise ConfigurationError("alpha must be >= 0")
        if self.kd_temperature <= 0:
            raise ConfigurationError("kd_temperature must be > 0")
        if self.reduction != "mean":
            raise ConfigurationError("only mean reduction is supported")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, payload: Mapping) -> "LossConfig":
        return cls(**{k: payload[k] for k in cls.__dataclass_fields__ if k in payload})


def kd_loss(
    student_logits: torch.Tensor,
    teacher_logits_list: Sequence[torch.Tensor],
    temperature: float,
    student_first: bool = True,
) -> torch.Tensor:
    """Batch-mean KL between the student distribution and the mean teacher
    soft label, both at `temperature`, scaled by T^2."""
    if not teacher_logits_list:
        raise StructuralError("need at least one teacher logits tensor")
    for t in teacher_logits_list:
        if t.shape != student_logits.shape:
            raise StructuralError(
                f"teacher logits {tuple(t.shape)} do not match student logits "
                f"{tuple(student_logits.shape)}"
            )
    log_p_student = F.log_softmax(student_logits / temperature, dim=-1)
    teacher_mean = torch.stack(
        [F.softmax(t / temperature, dim=-1) for t in teacher_logits_list]
    ).mean(dim=0)
    log_p_teacher = torch.log(teacher_mean.clamp_min(1e-30))
    if student_first:
        p = log_p_student.exp()
        kl = (p * (log_p_student - log_p_teacher)).sum(dim=-1)
    else:
        kl = (teacher_mean * (log_p_teacher - log_p_student)).sum(dim=-1)
    return kl.mean() * temperature**2


def ce_loss(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Standard mean cross-entropy."""
    if labels.numel() and (
        int(labels.min()) < 0 or int(labels.max()) >= logits.shape[-1]
    ):
        raise StructuralError("labels out of range for the logit width")
    return F.cross_entropy(logits, labels)


def weight_mse(a: WeightSet, b: WeightSet, sum_mode: bool = False) -> torch.Tensor:
    if a.arch.fingerprint() != b.arch.fingerprint():
        raise StructuralError("weight sets belong to different architectures")
    diff = a.flatten() - b.flatten()
    return (diff**2).sum() if sum_mode else (diff**2).mean()


def l2_match_loss(generated: WeightSet, target: WeightSet) -> torch.Tensor:
    """Mean squared error over all aligned scalars."""
    return weight_mse(generated, target)


def _rotated(teachers: Sequence[WeightSet]) -> list[WeightSet]:
    return list(teachers[1:]) + [teachers[0]]


def shift_consistency(
    teachers: Sequence[WeightSet],
    generator: WeightGenerator,
    config: LossConfig,
    rng: torch.Generator | None = None,
) -> torch.Tensor:
    """Squared difference between students generated from the original and the
    one-rotated teacher order, each pass with its own cutoff mask."""
    if len(teachers) < 2:
        raise ConfigurationError("shift consistency needs at least two teachers")
    train_mode = generator.config.cutoff_rate > 0.0 and rng is not None
    plain = generator.generate_student(list(teachers), train_mode=train_mode, rng=rng)
    shifted = generator.generate_student(_rotated(teachers), train_mode=train_mode, rng=rng)
    return weight_mse(plain, shifted, sum_mode=config.consistency_sum)


def combined_loss(
    batch: Batch,
    teachers: Sequence[WeightSet],
    generator: WeightGenerator,
    config: LossConfig,
    rng_primary: torch.Generator | None = None,
    rng_shift: torch.Generator | None = None,
    train_mode: bool = True,
) -> tuple[torch.Tensor, dict[str, float]]:
    """Classification CE of the generated student plus alpha * consistency.

    The primary (unshifted, cutoff-on) student serves both the CE term and the
    unshifted arm of the consistency term; the shifted pass shares the batch
    and differs only in teacher order and cutoff mask.
    """
    config.validate()
    student = generator.generate_student(list(teachers), train_mode=train_mode,
                                         rng=rng_primary)
    ce = ce_loss(functional_forward(generator.arch, student, batch), batch.labels)
    if config.alpha > 0.0 and len(teachers) >= 2:
        shifted = generator.generate_student(_rotated(teachers), train_mode=train_mode,
                                             rng=rng_shift)
        consist = weight_mse(student, shifted, sum_mode=config.consistency_sum)
    else:
        consist = torch.zeros((), dtype=ce.dtype)
    total = ce + config.alpha * consist
    ce_val = float(ce.detach())
    consist_val = float(consist.detach())
    components = {
        "ce": ce_val,
        "consist": consist_val,
        "total": ce_val + config.alpha * consist_val,
    }
    return total, components
