"""Transformer weight generator: N teacher weight sets in, one student out.

Per layer, the N teachers' token matrices are standardized, embedded to the
generator width, tagged with per-slot model-id embeddings and within-block
relative position embeddings, prefixed with a carried context token, and run
through an encoder stack. The positions right after the context token become
the student's tokens; the context token's output state seeds the next layer's
generation, so information flows across layers. Layers are generated in
architecture order, first to last.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, asdict, field
from pathlib import Path
from typing import Mapping, Sequence

import torch
from torch import nn

import yaml

from .arch import ArchSpec, WeightSet
from .codec import (
    NormStats,
    TokenMatrix,
    WeightDictionary,
    apply_norm,
    detokenize_weightset,
    embed_tokens,
    invert_norm,
    project_tokens,
    tokenize_layer,
)
from .errors import CapacityError, ConfigurationError, StructuralError
from .rng import make_stream


@dataclass
class GeneratorConfig:
    """Encoder and composition settings.

    Defaults are desk-scale. The full-scale setting this scales down from is
    24 blocks, 1280 hidden, 20 heads, 4096 ffn; all four are plain config
    fields, so that configuration remains expressible.
    """

    d_model: int = 128
    num_blocks: int = 4
    num_heads: int = 4
    ffn_dim: int = 256
    n_teachers: int = 3
    max_seq_len: int = 384
    cutoff_rate: float = 0.1
    seed: int = 0
    max_teachers: int = 8       # model-id slots available (>= n_teachers)
    tie_model_ids: bool = False  # all slots share slot-0's embedding
    use_cross_layer: bool = True  # False: carried context is zeroed between layers

    def validate(self) -> None:
        if self.d_model % self.num_heads:
            raise ConfigurationError("d_model must be divisible by num_heads")
        if not (0.0 <= self.cutoff_rate < 1.0):
            raise ConfigurationError("cutoff_rate must be in [0, 1)")
        if self.n_teachers < 1 or self.max_teachers < self.n_teachers:
            raise ConfigurationError("need 1 <= n_teachers <= max_teachers")
        if self.max_seq_len < 2:
            raise ConfigurationError("max_seq_len must be >= 2")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, payload: Mapping) -> "GeneratorConfig":
        return cls(**{k: payload[k] for k in cls.__dataclass_fields__ if k in payload})


@dataclass
class CrossState:
    """The carried cross-layer context vector."""

    vector: torch.Tensor  # (d_model,)
    origin: str  # "learned_init" | "carried"


@dataclass
class LayerTrace:
    layer_name: str
    input_seq_len: int
    cross_in_norm: float
    cross_out_norm: float
    token_mean: float
    token_std: float


@dataclass
class GenerationTrace:
    records: list[LayerTrace] = field(default_factory=list)


def apply_cutoff(seq: torch.Tensor, rate: float, rng: torch.Generator) -> torch.Tensor:
    """Zero a random floor(rate * d_model) subset of feature dims at every position."""
    d_model = seq.shape[-1]
    n_drop = int(rate * d_model)
    if n_drop == 0:
        return seq
    dims = torch.randperm(d_model, generator=rng)[:n_drop]
    mask = torch.ones(d_model, dtype=seq.dtype)
    mask[dims] = 0.0
    return seq * mask


class SelfAttention(nn.Module):
    def __init__(self, d_model: int, num_heads: int):
        super().__init__()
        self.num_heads = num_heads
        self.head_dim = d_model // num_heads
        self.q_proj = nn.Linear(d_model, d_model)
        self.k_proj = nn.Linear(d_model, d_model)
        self.v_proj = nn.Linear(d_model, d_model)
        self.out_proj = nn.Linear(d_model, d_model)

    def forward(self, x: torch.Tensor) -> torch.Tensor:  # (seq, d_model)
        seq = x.shape[0]
        def split(t: torch.Tensor) -> torch.Tensor:
            return t.reshape(seq, self.num_heads, self.head_dim).transpose(0, 1)
        q, k, v = split(self.q_proj(x)), split(self.k_proj(x)), split(self.v_proj(x))
        scores = q @ k.transpose(1, 2) / math.sqrt(self.head_dim)
        ctx = torch.softmax(scores, dim=-1) @ v
        return self.out_proj(ctx.transpose(0, 1).reshape(seq, -1))


class EncoderBlock(nn.Module):
    """Post-norm encoder block: LN(x + attn(x)), then LN(x + ffn(x))."""

    def __init__(self, d_model: int, num_heads: int, ffn_dim: int):
        super().__init__()
        self.attn = SelfAttention(d_model, num_heads)
        self.norm1 = nn.LayerNorm(d_model)
        self.ffn_in = nn.Linear(d_model, ffn_dim)
        self.ffn_out = nn.Linear(ffn_dim, d_model)
        self.norm2 = nn.LayerNorm(d_model)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = self.norm1(x + self.attn(x))
        return self.norm2(x + self.ffn_out(torch.relu(self.ffn_in(x))))


class WeightGenerator(nn.Module):
    """The trainable weight generator for one architecture."""

    def __init__(self, arch: ArchSpec, config: GeneratorConfig,
                 norm_stats: NormStats | None = None):
        super().__init__()
        config.validate()
        arch.validate()
        needed = 1 + config.n_teachers * arch.max_token_seq_len()
        if config.max_seq_len < needed:
            raise ConfigurationError(
                f"max_seq_len {config.max_seq_len} < required {needed} for this architecture"
            )
        self.arch = arch
        self.config = config
        self.norm_stats = norm_stats if norm_stats is not None else NormStats.identity(arch)
        self.dictionary = WeightDictionary(arch, config.d_model)
        self.blocks = nn.ModuleList(
            EncoderBlock(config.d_model, config.num_heads, config.ffn_dim)
            for _ in range(config.num_blocks)
        )
        self.model_id_embedding = nn.Embedding(config.max_teachers, config.d_model)
        self.position_embedding = nn.Embedding(config.max_seq_len, config.d_model)
        self.cross_init = nn.Parameter(torch.empty(config.d_model))
        self._reset_parameters(make_stream(config.seed, "init"))

    def _reset_parameters(self, rng: torch.Generator) -> None:
        for module in self.modules():
            if isinstance(module, nn.Linear):
                bound = 1.0 / math.sqrt(module.in_features)
                module.weight.data.uniform_(-bound, bound, generator=rng)
                module.bias.data.uniform_(-bound, bound, generator=rng)
            elif isinstance(module, nn.Embedding):
                module.weight.data.normal_(0.0, 0.02, generator=rng)
            elif isinstance(module, nn.LayerNorm):
                module.weight.data.fill_(1.0)
                module.bias.data.zero_()
        self.cross_init.data.normal_(0.0, 0.02, generator=rng)

    # -- composition ------------------------------------------------------

    def initial_cross(self) -> CrossState:
        return CrossState(self.cross_init, "learned_init")

    def _model_id(self, slot: int) -> torch.Tensor:
        if slot >= self.config.max_teachers:
            raise CapacityError(
                f"teacher slot {slot} exceeds the {self.config.max_teachers} model-id slots"
            )
        idx = 0 if self.config.tie_model_ids else slot
        return self.model_id_embedding.weight[idx]

    def compose_input(self, teacher_tokens: Sequence[TokenMatrix],
                      cross_vector: torch.Tensor) -> torch.Tensor:
        """Embed N same-layer token matrices into one (1 + N*seq, d_model) sequence.

        Position embeddings restart at 0 for every teacher block; model-id
        embedding i is added to block i; the context token at position 0 gets
        neither.
        """
        if not teacher_tokens:
            raise StructuralError("need at least one teacher token matrix")
        first = teacher_tokens[0]
        for tm in teacher_tokens[1:]:
            if tm.layer_key() != first.layer_key() or tm.seq_len != first.seq_len:
                raise StructuralError(
                    "teacher token matrices disagree in shape; heterogeneous "
                    "teacher sets are unsupported"
                )
        positions = self.position_embedding.weight[: first.seq_len]
        pieces = [cross_vector.unsqueeze(0)]
        for slot, tm in enumerate(teacher_tokens):
            emb = embed_tokens(apply_norm(tm, self.norm_stats), self.dictionary)
            pieces.append(emb + positions + self._model_id(slot))
        return torch.cat(pieces, dim=0)

    def encode(self, seq: torch.Tensor) -> torch.Tensor:
        if seq.shape[0] > self.config.max_seq_len:
            raise CapacityError(
                f"sequence length {seq.shape[0]} exceeds max_seq_len "
                f"{self.config.max_seq_len}"
            )
        x = seq
        for block in self.blocks:
            x = block(x)
        return x

    # -- generation -------------------------------------------------------

    def generate_layer(
        self,
        teacher_tokens: Sequence[TokenMatrix],
        cross: CrossState,
        train_mode: bool = False,
        rng: torch.Generator | None = None,
    ) -> tuple[TokenMatrix, CrossState]:
        seq = self.compose_input(teacher_tokens, cross.vector)
        if train_mode and self.config.cutoff_rate > 0.0:
            if rng is None:
                raise ConfigurationError("training-mode generation needs an rng for cutoff")
            seq = apply_cutoff(seq, self.config.cutoff_rate, rng)
        hidden = self.encode(seq)
        n_out = teacher_tokens[0].seq_len
        student = project_tokens(
            hidden[1 : 1 + n_out], self.dictionary, teacher_tokens[0].layer_key(),
            teacher_tokens[0].layer_name,
        )
        student = invert_norm(student, self.norm_stats)
        carried = hidden[0]
        if not self.config.use_cross_layer:
            carried = torch.zeros_like(carried)
        return student, CrossState(carried, "carried")

    def generate_student(
        self,
        teachers: Sequence[WeightSet],
        train_mode: bool = False,
        rng: torch.Generator | None = None,
        trace: GenerationTrace | None = None,
    ) -> WeightSet:
        """One forward pass over all layers; differentiable w.r.t. this module."""
        if not teachers:
            raise StructuralError("need at least one teacher")
        fp = self.arch.fingerprint()
        for ws in teachers:
            if ws.arch.fingerprint() != fp:
                raise StructuralError("teacher weight set does not match the generator's arch")
        if len(teachers) > self.config.max_teachers:
            raise CapacityError(
                f"{len(teachers)} teachers exceed the {self.config.max_teachers} model-id slots"
            )
        needed = 1 + len(teachers) * self.arch.max_token_seq_len()
        if needed > self.config.max_seq_len:
            raise CapacityError(
                f"{len(teachers)} teachers need sequence length {needed} > "
                f"max_seq_len {self.config.max_seq_len}"
            )
        cross = self.initial_cross()
        token_map: dict[str, TokenMatrix] = {}
        for ls in self.arch.layers:
            teacher_tokens = [
                tokenize_layer(ws.layer_tensors(ls.name), ls) for ws in teachers
            ]
            cross_in = cross
            student_tm, cross = self.generate_layer(teacher_tokens, cross, train_mode, rng)
            token_map[ls.name] = student_tm
            if trace is not None:
                trace.records.append(LayerTrace(
                    layer_name=ls.name,
                    input_seq_len=1 + len(teachers) * teacher_tokens[0].seq_len,
                    cross_in_norm=float(cross_in.vector.detach().norm()),
                    cross_out_norm=float(cross.vector.detach().norm()),
                    token_mean=float(student_tm.tokens.detach().mean()),
                    token_std=float(student_tm.tokens.detach().std()),
                ))
        return detokenize_weightset(self.arch, token_map)

    def num_parameters(self) -> int:
        return sum(p.numel() for p in self.parameters())


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def save_generator(gen: WeightGenerator, path: str | Path,
                   provenance: Mapping | None = None) -> Path:
    """Serialized tensor container plus a structured-text sidecar manifest."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(
        {
            "config": gen.config.to_dict(),
            "arch": gen.arch.to_dict(),
            "norm_stats": gen.norm_stats.to_payload(),
            "state_dict": gen.state_dict(),
        },
        path,
    )
    manifest = {
        "config": gen.config.to_dict(),
        "arch_fingerprint": gen.arch.fingerprint(),
        "arch_text": gen.arch.to_text(),
        "provenance": dict(provenance or {}),
    }
    sidecar = path.with_suffix(path.suffix + ".manifest.yaml")
    sidecar.write_text(yaml.safe_dump(manifest, sort_keys=True))
    return path


def load_generator(path: str | Path) -> WeightGenerator:
    payload = torch.load(Path(path), weights_only=False)
    arch = ArchSpec.from_dict(payload["arch"])
    config = GeneratorConfig.from_dict(payload["config"])
    gen = WeightGenerator(arch, config, NormStats.from_payload(payload["norm_stats"]))
    gen.load_state_dict(payload["state_dict"])
    return gen
