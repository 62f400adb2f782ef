"""Layer weights <-> token sequences, and the shared dimension dictionary.

Each layer kind has one fixed tokenization rule (documented bit-exactly in
docs/formats.md):

  conv       n_output tokens, token r = flattened (n_input, k, k) slice of
             output channel r, in-channel-major order, bias folded as a
             trailing column when present.
  fc         n_output tokens, token r = weight row r (+ bias column).
  attention  2*d_k + 2*d_v tokens of width heads*model_width: per-head
             columns of Q, K, V then per-head rows of the output-concat
             matrix, concatenated across heads, in that fixed order.
  norm       n_output tokens of width 2: (scale, shift) per feature.

Two layers with the same (kind, d_layer) share one dictionary entry, so one
generator serves every layer shape it has seen.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Mapping

import torch
from torch import nn

from .arch import ArchSpec, LayerSpec, WeightSet
from .errors import ConfigurationError, StructuralError

STD_FLOOR = 1e-6

LayerKey = tuple[str, int]


@dataclass
class TokenMatrix:
    tokens: torch.Tensor  # (seq_len, d_layer)
    layer_kind: str
    layer_name: str

    @property
    def seq_len(self) -> int:
        return int(self.tokens.shape[0])

    @property
    def d_layer(self) -> int:
        return int(self.tokens.shape[1])

    def layer_key(self) -> LayerKey:
        return self.layer_kind, self.d_layer


def _check_shape(t: torch.Tensor, shape: tuple[int, ...], name: str, role: str) -> None:
    if tuple(t.shape) != shape:
        raise StructuralError(
            f"layer '{name}': tensor '{role}' has shape {tuple(t.shape)}, expected {shape}"
        )


def tokenize_layer(tensors: Mapping[str, torch.Tensor], spec: LayerSpec) -> TokenMatrix:
    """Reshape one layer's weights into its token matrix (see module docs)."""
    shapes = spec.param_shapes()
    if spec.kind == "conv":
        w = tensors["weight"]
        _check_shape(w, shapes["weight"], spec.name, "weight")
        rows = w.reshape(spec.n_output, -1)
        if spec.has_bias:
            b = tensors["bias"]
            _check_shape(b, shapes["bias"], spec.name, "bias")
            rows = torch.cat([rows, b.unsqueeze(1)], dim=1)
    elif spec.kind == "fc":
        w = tensors["weight"]
        _check_shape(w, shapes["weight"], spec.name, "weight")
        rows = w
        if spec.has_bias:
            b = tensors["bias"]
            _check_shape(b, shapes["bias"], spec.name, "bias")
            rows = torch.cat([rows, b.unsqueeze(1)], dim=1)
    elif spec.kind == "attention":
        packed = tensors["weight"]
        _check_shape(packed, shapes["weight"], spec.name, "weight")
        seq = 2 * spec.key_dim + 2 * spec.value_dim
        rows = packed.permute(2, 0, 1).reshape(seq, spec.heads * spec.model_width)
    elif spec.kind == "norm":
        scale, shift = tensors["scale"], tensors["shift"]
        _check_shape(scale, shapes["scale"], spec.name, "scale")
        _check_shape(shift, shapes["shift"], spec.name, "shift")
        rows = torch.stack([scale, shift], dim=1)
    else:
        raise StructuralError(f"layer '{spec.name}': unknown kind '{spec.kind}'")
    return TokenMatrix(rows, spec.kind, spec.name)


def detokenize_layer(tm: TokenMatrix, spec: LayerSpec) -> dict[str, torch.Tensor]:
    """Exact inverse of tokenize_layer."""
    seq, d = spec.token_shape()
    if tm.tokens.shape != (seq, d):
        raise StructuralError(
            f"layer '{spec.name}': token matrix {tuple(tm.tokens.shape)} does not match "
            f"expected ({seq}, {d})"
        )
    rows = tm.tokens
    if spec.kind == "conv":
        if spec.has_bias:
            w, b = rows[:, :-1], rows[:, -1]
            return {
                "weight": w.reshape(spec.n_output, spec.n_input, spec.kernel_size,
                                    spec.kernel_size),
                "bias": b,
            }
        return {"weight": rows.reshape(spec.n_output, spec.n_input, spec.kernel_size,
                                       spec.kernel_size)}
    if spec.kind == "fc":
        if spec.has_bias:
            return {"weight": rows[:, :-1], "bias": rows[:, -1]}
        return {"weight": rows}
    if spec.kind == "attention":
        packed = rows.reshape(seq, spec.heads, spec.model_width).permute(1, 2, 0)
        return {"weight": packed.contiguous()}
    if spec.kind == "norm":
        return {"scale": rows[:, 0], "shift": rows[:, 1]}
    raise StructuralError(f"layer '{spec.name}': unknown kind '{spec.kind}'")


def tokenize_weightset(ws: WeightSet) -> dict[str, TokenMatrix]:
    return {ls.name: tokenize_layer(ws.layer_tensors(ls.name), ls) for ls in ws.arch.layers}


def detokenize_weightset(arch: ArchSpec, token_map: Mapping[str, TokenMatrix]) -> WeightSet:
    tensors: dict[tuple[str, str], torch.Tensor] = {}
    for ls in arch.layers:
        for role, t in detokenize_layer(token_map[ls.name], ls).items():
            tensors[(ls.name, role)] = t
    return WeightSet(arch, tensors)


# ---------------------------------------------------------------------------
# token standardization
# ---------------------------------------------------------------------------


@dataclass
class NormStats:
    """Per layer-key mean/std of token entries over the training teacher pool."""

    stats: dict[LayerKey, tuple[float, float]]

    def lookup(self, key: LayerKey) -> tuple[float, float]:
        if key not in self.stats:
            raise ConfigurationError(f"no normalization stats for layer key {key}")
        return self.stats[key]

    def to_payload(self) -> dict:
        return {f"{kind}:{d}": [m, s] for (kind, d), (m, s) in self.stats.items()}

    @classmethod
    def from_payload(cls, payload: Mapping) -> "NormStats":
        stats = {}
        for key, (m, s) in payload.items():
            kind, d = key.split(":")
            stats[(kind, int(d))] = (float(m), float(s))
        return cls(stats)

    @classmethod
    def identity(cls, arch: ArchSpec) -> "NormStats":
        return cls({ls.layer_key(): (0.0, 1.0) for ls in arch.layers})


def fit_norm_stats_from_weightsets(weightsets: Iterable[WeightSet]) -> NormStats:
    """Mean/std of token entries per (kind, d_layer), std floored at 1e-6."""
    buckets: dict[LayerKey, list[torch.Tensor]] = {}
    count = 0
    for ws in weightsets:
        count += 1
        for ls in ws.arch.layers:
            tm = tokenize_layer(ws.layer_tensors(ls.name), ls)
            buckets.setdefault(tm.layer_key(), []).append(tm.tokens.reshape(-1))
    if count == 0:
        raise ConfigurationError("cannot fit normalization stats on an empty pool")
    stats = {}
    for key, chunks in buckets.items():
        flat = torch.cat(chunks).to(torch.float64)
        mean = float(flat.mean())
        std = max(float(flat.std(unbiased=False)), STD_FLOOR)
        stats[key] = (mean, std)
    return NormStats(stats)


def fit_norm_stats(pool) -> NormStats:
    """Fit stats over the pool's TRAIN split (the eval split is never read)."""
    manifests = pool.train_manifests
    if not manifests:
        raise ConfigurationError("pool has no training checkpoints")
    return fit_norm_stats_from_weightsets(pool.load_weights(m.id) for m in manifests)


def apply_norm(tm: TokenMatrix, stats: NormStats) -> TokenMatrix:
    mean, std = stats.lookup(tm.layer_key())
    return TokenMatrix((tm.tokens - mean) / std, tm.layer_kind, tm.layer_name)


def invert_norm(tm: TokenMatrix, stats: NormStats) -> TokenMatrix:
    mean, std = stats.lookup(tm.layer_key())
    return TokenMatrix(tm.tokens * std + mean, tm.layer_kind, tm.layer_name)


# ---------------------------------------------------------------------------
# the dimension-adjustment dictionary
# ---------------------------------------------------------------------------


class DictionaryEntry(nn.Module):
    """Trainable affine maps d_layer -> d_model and back, for one layer key."""

    def __init__(self, d_layer: int, d_model: int):
        super().__init__()
        self.d_layer = d_layer
        self.in_map = nn.Linear(d_layer, d_model)
        self.out_map = nn.Linear(d_model, d_layer)


def _key_str(key: LayerKey) -> str:
    return f"{key[0]}:{key[1]}"


class WeightDictionary(nn.Module):
    """One DictionaryEntry per distinct (kind, d_layer) in an architecture."""

    def __init__(self, arch: ArchSpec, d_model: int):
        super().__init__()
        self.d_model = d_model
        keys = []
        for ls in arch.layers:
            key = ls.layer_key()
            if key not in keys:
                keys.append(key)
        self.entries = nn.ModuleDict(
            {_key_str(key): DictionaryEntry(key[1], d_model) for key in keys}
        )

    def entry(self, key: LayerKey) -> DictionaryEntry:
        name = _key_str(key)
        if name not in self.entries:
            raise ConfigurationError(f"no dictionary entry for layer key {key}")
        return self.entries[name]


def embed_tokens(tm: TokenMatrix, dictionary: WeightDictionary) -> torch.Tensor:
    """Map a token matrix into the generator width: (seq_len, d_model)."""
    return dictionary.entry(tm.layer_key()).in_map(tm.tokens)


def project_tokens(
    hidden: torch.Tensor, dictionary: WeightDictionary, key: LayerKey, layer_name: str = ""
) -> TokenMatrix:
    """Map generator-width hidden states back to a token matrix: (n, d_layer)."""
    return TokenMatrix(dictionary.entry(key).out_map(hidden), key[0], layer_name)
