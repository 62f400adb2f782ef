"""Symbolic desk-scale architectures and a weight-explicit forward pass.

Parameters live outside the network in a WeightSet, so any scalar of the
logits differentiates back to the supplied tensors. Three families exist:
"cnn" (conv / channel-affine norm / fc stacks), "vit" (patchify conv +
pre-norm attention blocks + mean-pool head) and "mlp" (fc stack). Structure
that carries no parameters (activations, pooling, patch grid, sinusoidal
positions) is fixed by the ArchSpec, never generated.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass
from typing import Iterator, Mapping

import torch
import torch.nn.functional as F

from .errors import ConfigurationError, StructuralError

KINDS = ("conv", "fc", "attention", "norm")
ROLE_ORDER = ("weight", "bias", "scale", "shift")


@dataclass(frozen=True)
class LayerSpec:
    """One parameterized layer. `kind` selects both forward rule and token rule."""

    name: str
    kind: str
    n_input: int = 0
    n_output: int = 0
    kernel_size: int = 0
    stride: int = 1
    padding: int = 0
    pool: int = 0  # max-pool window applied after the activation, 0 = none
    heads: int = 0
    model_width: int = 0
    key_dim: int = 0
    value_dim: int = 0
    norm_mode: str = ""  # "channel" (per-channel affine) or "layer" (LayerNorm)
    has_bias: bool = True

    def validate(self) -> None:
        if self.kind not in KINDS:
            raise StructuralError(f"layer '{self.name}': unknown kind '{self.kind}'")
        if self.kind == "conv":
            if self.kernel_size < 1 or self.n_input < 1 or self.n_output < 1:
                raise StructuralError(f"layer '{self.name}': conv dims must be >= 1")
        elif self.kind == "fc":
            if self.n_input < 1 or self.n_output < 1:
                raise StructuralError(f"layer '{self.name}': fc dims must be >= 1")
        elif self.kind == "attention":
            if min(self.heads, self.model_width, self.key_dim, self.value_dim) < 1:
                raise StructuralError(f"layer '{self.name}': attention dims must be >= 1")
            if self.heads * self.value_dim != self.model_width:
                raise StructuralError(
                    f"layer '{self.name}': heads*value_dim must equal model_width "
                    f"({self.heads}*{self.value_dim} != {self.model_width})"
                )
            if self.has_bias:
                raise StructuralError(
                    f"layer '{self.name}': attention layers carry no bias terms"
                )
        elif self.kind == "norm":
            if self.n_output < 1:
                raise StructuralError(f"layer '{self.name}': norm needs n_output >= 1")
            if self.norm_mode not in ("channel", "layer"):
                raise StructuralError(
                    f"layer '{self.name}': norm_mode must be 'channel' or 'layer'"
                )

    def token_shape(self) -> tuple[int, int]:
        """(seq_len, d_layer) of this layer's token matrix."""
        if self.kind == "conv":
            d = self.kernel_size**2 * self.n_input + (1 if self.has_bias else 0)
            return self.n_output, d
        if self.kind == "fc":
            return self.n_output, self.n_input + (1 if self.has_bias else 0)
        if self.kind == "attention":
            return 2 * self.key_dim + 2 * self.value_dim, self.heads * self.model_width
        if self.kind == "norm":
            return self.n_output, 2
        raise StructuralError(f"layer '{self.name}': unknown kind '{self.kind}'")

    def layer_key(self) -> tuple[str, int]:
        return self.kind, self.token_shape()[1]

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        if self.kind == "conv":
            shapes = {"weight": (self.n_output, self.n_input, self.kernel_size, self.kernel_size)}
            if self.has_bias:
                shapes["bias"] = (self.n_output,)
            return shapes
        if self.kind == "fc":
            shapes = {"weight": (self.n_output, self.n_input)}
            if self.has_bias:
                shapes["bias"] = (self.n_output,)
            return shapes
        if self.kind == "attention":
            # packed per-head columns [Q | K | V | O^T]; see docs/formats.md
            width = 2 * self.key_dim + 2 * self.value_dim
            return {"weight": (self.heads, self.model_width, width)}
        if self.kind == "norm":
            return {"scale": (self.n_output,), "shift": (self.n_output,)}
        raise StructuralError(f"layer '{self.name}': unknown kind '{self.kind}'")

    def param_count(self) -> int:
        return sum(math.prod(shape) for shape in self.param_shapes().values())

    def describe(self) -> str:
        if self.kind == "conv":
            core = (
                f"conv k={self.kernel_size} {self.n_input}->{self.n_output} "
                f"stride={self.stride} pad={self.padding} pool={self.pool} bias={self.has_bias}"
            )
        elif self.kind == "fc":
            core = f"fc {self.n_input}->{self.n_output} bias={self.has_bias}"
        elif self.kind == "attention":
            core = (
                f"attention heads={self.heads} width={self.model_width} "
                f"d_k={self.key_dim} d_v={self.value_dim}"
            )
        else:
            core = f"norm({self.norm_mode}) features={self.n_output}"
        shapes = ", ".join(f"{r}{list(s)}" for r, s in self.param_shapes().items())
        return f"{self.name}: {core} | params: {shapes}"

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "kind": self.kind,
            "n_input": self.n_input,
            "n_output": self.n_output,
            "kernel_size": self.kernel_size,
            "stride": self.stride,
            "padding": self.padding,
            "pool": self.pool,
            "heads": self.heads,
            "model_width": self.model_width,
            "key_dim": self.key_dim,
            "value_dim": self.value_dim,
            "norm_mode": self.norm_mode,
            "has_bias": self.has_bias,
        }

    @classmethod
    def from_dict(cls, payload: Mapping) -> "LayerSpec":
        return cls(**{k: payload[k] for k in cls.__dataclass_fields__ if k in payload})


@dataclass(frozen=True)
class ArchSpec:
    layers: tuple[LayerSpec, ...]
    num_classes: int
    input_shape: tuple[int, int, int]
    family: str  # "cnn" | "vit" | "mlp"

    def validate(self) -> None:
        if self.family not in ("cnn", "vit", "mlp"):
            raise StructuralError(f"unknown family '{self.family}'")
        if not self.layers:
            raise StructuralError("architecture has no layers")
        names = [ls.name for ls in self.layers]
        if len(set(names)) != len(names):
            raise StructuralError("layer names must be unique")
        for ls in self.layers:
            ls.validate()
        last = self.layers[-1]
        if last.kind != "fc" or last.n_output != self.num_classes:
            raise StructuralError(
                "last layer must be an fc layer with n_output == num_classes"
            )
        _trace_shapes(self)

    def layer(self, name: str) -> LayerSpec:
        for ls in self.layers:
            if ls.name == name:
                return ls
        raise StructuralError(f"no layer named '{name}'")

    def max_token_seq_len(self) -> int:
        return max(ls.token_shape()[0] for ls in self.layers)

    def fingerprint(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()

    def to_text(self) -> str:
        head = (
            f"family: {self.family}  classes: {self.num_classes}  "
            f"input: {list(self.input_shape)}  params: {param_count(self)}"
        )
        return "\n".join([head] + [ls.describe() for ls in self.layers])

    def to_dict(self) -> dict:
        return {
            "family": self.family,
            "num_classes": self.num_classes,
            "input_shape": list(self.input_shape),
            "layers": [ls.to_dict() for ls in self.layers],
        }

    @classmethod
    def from_dict(cls, payload: Mapping) -> "ArchSpec":
        return cls(
            layers=tuple(LayerSpec.from_dict(d) for d in payload["layers"]),
            num_classes=payload["num_classes"],
            input_shape=tuple(payload["input_shape"]),
            family=payload["family"],
        )


def build_arch(preset: str, num_classes: int, input_shape: tuple[int, int, int]) -> ArchSpec:
    """Construct one of the desk presets: cnn_tiny, vit_tiny or mlp_tiny."""
    if num_classes < 2:
        raise ConfigurationError("num_classes must be >= 2")
    c, h, w = input_shape
    if preset == "cnn_tiny":
        if h % 4 or w % 4:
            raise ConfigurationError("cnn_tiny needs height/width divisible by 4")
        flat = 16 * (h // 4) * (w // 4)
        layers = (
            LayerSpec("conv1", "conv", n_input=c, n_output=8, kernel_size=3, padding=1, pool=2),
            LayerSpec("norm1", "norm", n_output=8, norm_mode="channel"),
            LayerSpec("conv2", "conv", n_input=8, n_output=16, kernel_size=3, padding=1, pool=2),
            LayerSpec("norm2", "norm", n_output=16, norm_mode="channel"),
            LayerSpec("fc1", "fc", n_input=flat, n_output=32),
            LayerSpec("fc2", "fc", n_input=32, n_output=num_classes),
        )
        arch = ArchSpec(layers, num_classes, tuple(input_shape), "cnn")
    elif preset == "vit_tiny":
        patch, width, heads, head_dim, ffn = 4, 32, 4, 8, 64
        if h % patch or w % patch:
            raise ConfigurationError(f"vit_tiny needs height/width divisible by {patch}")
        layers = (
            LayerSpec("patch_proj", "conv", n_input=c, n_output=width, kernel_size=patch,
                      stride=patch),
            LayerSpec("norm_attn", "norm", n_output=width, norm_mode="layer"),
            LayerSpec("attn", "attention", heads=heads, model_width=width, key_dim=head_dim,
                      value_dim=head_dim, has_bias=False),
            LayerSpec("norm_mlp", "norm", n_output=width, norm_mode="layer"),
            LayerSpec("mlp_in", "fc", n_input=width, n_output=ffn),
            LayerSpec("mlp_out", "fc", n_input=ffn, n_output=width),
            LayerSpec("norm_head", "norm", n_output=width, norm_mode="layer"),
            LayerSpec("head", "fc", n_input=width, n_output=num_classes),
        )
        arch = ArchSpec(layers, num_classes, tuple(input_shape), "vit")
    elif preset == "mlp_tiny":
        flat = c * h * w
        layers = (
            LayerSpec("fc1", "fc", n_input=flat, n_output=32),
            LayerSpec("fc2", "fc", n_input=32, n_output=num_classes),
        )
        arch = ArchSpec(layers, num_classes, tuple(input_shape), "mlp")
    else:
        raise ConfigurationError(f"unknown preset '{preset}'")
    arch.validate()
    return arch


def param_count(arch: ArchSpec) -> int:
    """Exact number of scalar parameters, biases and norm affine terms included."""
    return sum(ls.param_count() for ls in arch.layers)


# ---------------------------------------------------------------------------
# shape tracing / forward plans
# ---------------------------------------------------------------------------


def _trace_shapes(arch: ArchSpec) -> None:
    if arch.family == "cnn":
        _plan_cnn(arch)
    elif arch.family == "vit":
        _plan_vit(arch)
    else:
        _plan_mlp(arch)


def _plan_cnn(arch: ArchSpec) -> list[tuple]:
    """Plan ops for the cnn family; raises StructuralError on any mismatch."""
    c, h, w = arch.input_shape
    plan: list[tuple] = []
    layers = list(arch.layers)
    i = 0
    flat_dim = None
    while i < len(layers):
        ls = layers[i]
        if ls.kind == "conv":
            if flat_dim is not None:
                raise StructuralError(f"layer '{ls.name}': conv after flatten")
            if ls.n_input != c:
                raise StructuralError(
                    f"layer '{ls.name}': expects {ls.n_input} input channels, got {c}"
                )
            h = (h + 2 * ls.padding - ls.kernel_size) // ls.stride + 1
            w = (w + 2 * ls.padding - ls.kernel_size) // ls.stride + 1
            if h < 1 or w < 1:
                raise StructuralError(f"layer '{ls.name}': feature map collapsed to zero")
            c = ls.n_output
            norm = None
            if i + 1 < len(layers) and layers[i + 1].kind == "norm":
                norm = layers[i + 1]
                if norm.norm_mode != "channel" or norm.n_output != c:
                    raise StructuralError(
                        f"layer '{norm.name}': channel norm must match {c} channels"
                    )
                i += 1
            if ls.pool:
                if h % ls.pool or w % ls.pool:
                    raise StructuralError(
                        f"layer '{ls.name}': pool {ls.pool} does not divide {h}x{w}"
                    )
                h //= ls.pool
                w //= ls.pool
            plan.append(("conv", ls, norm))
        elif ls.kind == "fc":
            if flat_dim is None:
                flat_dim = c * h * w
                plan.append(("flatten", flat_dim))
            if ls.n_input != flat_dim:
                raise StructuralError(
                    f"layer '{ls.name}': expects {ls.n_input} inputs, got {flat_dim}"
                )
            flat_dim = ls.n_output
            plan.append(("fc", ls, i == len(layers) - 1))
        else:
            raise StructuralError(f"layer '{ls.name}': kind '{ls.kind}' not valid here")
        i += 1
    if flat_dim is None:
        raise StructuralError("cnn family needs at least one fc layer")
    return plan


def _plan_vit(arch: ArchSpec) -> dict:
    c, h, w = arch.input_shape
    layers = list(arch.layers)
    patch = layers[0]
    if patch.kind != "conv" or patch.stride != patch.kernel_size or patch.padding != 0:
        raise StructuralError("vit family starts with a patchify conv (stride == kernel)")
    if patch.n_input != c or h % patch.kernel_size or w % patch.kernel_size:
        raise StructuralError("patchify conv does not tile the input image")
    width = patch.n_output
    tokens = (h // patch.kernel_size) * (w // patch.kernel_size)
    blocks: list[tuple] = []
    i = 1
    while i < len(layers) - 2:
        ls = layers[i]
        if ls.kind != "norm" or ls.norm_mode != "layer" or ls.n_output != width:
            raise StructuralError(f"layer '{ls.name}': expected a width-{width} layer norm")
        nxt = layers[i + 1]
        if nxt.kind == "attention":
            if nxt.model_width != width:
                raise StructuralError(f"layer '{nxt.name}': attention width mismatch")
            blocks.append(("attn", ls, nxt))
            i += 2
        elif nxt.kind == "fc":
            if i + 2 >= len(layers) - 2:
                raise StructuralError("vit mlp sub-block must precede the head")
            out = layers[i + 2]
            if out.kind != "fc" or nxt.n_input != width or out.n_output != width \
                    or out.n_input != nxt.n_output:
                raise StructuralError(f"layer '{nxt.name}': mlp sub-block shape mismatch")
            blocks.append(("mlp", ls, nxt, out))
            i += 3
        else:
            raise StructuralError(f"layer '{nxt.name}': unexpected kind in vit block")
    head_norm, head = layers[-2], layers[-1]
    if head_norm.kind != "norm" or head_norm.norm_mode != "layer" \
            or head_norm.n_output != width:
        raise StructuralError("vit family ends with [layer norm, fc head]")
    if head.n_input != width:
        raise StructuralError(f"layer '{head.name}': head expects width {width}")
    return {"patch": patch, "blocks": blocks, "head_norm": head_norm, "head": head,
            "tokens": tokens, "width": width}


def _plan_mlp(arch: ArchSpec) -> None:
    c, h, w = arch.input_shape
    dim = c * h * w
    for ls in arch.layers:
        if ls.kind != "fc":
            raise StructuralError(f"layer '{ls.name}': mlp family is fc-only")
        if ls.n_input != dim:
            raise StructuralError(f"layer '{ls.name}': expects {ls.n_input} inputs, got {dim}")
        dim = ls.n_output


# ---------------------------------------------------------------------------
# weight sets
# ---------------------------------------------------------------------------


@dataclass
class WeightSet:
    """A named map of parameter tensors for one ArchSpec."""

    arch: ArchSpec
    tensors: dict[tuple[str, str], torch.Tensor]

    def layer_tensors(self, name: str) -> dict[str, torch.Tensor]:
        return {role: t for (n, role), t in self.tensors.items() if n == name}

    def items_in_order(self) -> Iterator[tuple[str, str, torch.Tensor]]:
        for ls in self.arch.layers:
            for role in ROLE_ORDER:
                key = (ls.name, role)
                if key in self.tensors:
                    yield ls.name, role, self.tensors[key]

    def validate(self) -> None:
        seen = set()
        for ls in self.arch.layers:
            for role, shape in ls.param_shapes().items():
                key = (ls.name, role)
                if key not in self.tensors:
                    raise StructuralError(f"layer '{ls.name}': missing tensor '{role}'")
                t = self.tensors[key]
                if tuple(t.shape) != shape:
                    raise StructuralError(
                        f"layer '{ls.name}': tensor '{role}' has shape {tuple(t.shape)}, "
                        f"expected {shape}"
                    )
                if not torch.isfinite(t).all():
                    raise StructuralError(f"layer '{ls.name}': tensor '{role}' has non-finite values")
                seen.add(key)
        extra = set(self.tensors) - seen
        if extra:
            raise StructuralError(f"unexpected tensors: {sorted(extra)}")

    def flatten(self) -> torch.Tensor:
        """All scalars in canonical (layer order, role order) concatenation."""
        return torch.cat([t.reshape(-1) for _, _, t in self.items_in_order()])

    @property
    def num_scalars(self) -> int:
        return sum(t.numel() for t in self.tensors.values())

    def clone(self) -> "WeightSet":
        return WeightSet(self.arch, {k: t.clone() for k, t in self.tensors.items()})

    def detach(self) -> "WeightSet":
        return WeightSet(self.arch, {k: t.detach() for k, t in self.tensors.items()})

    def to(self, dtype: torch.dtype) -> "WeightSet":
        return WeightSet(self.arch, {k: t.to(dtype) for k, t in self.tensors.items()})

    def requires_grad_(self, flag: bool = True) -> "WeightSet":
        for t in self.tensors.values():
            t.requires_grad_(flag)
        return self

    def parameters(self) -> list[torch.Tensor]:
        return [t for _, _, t in self.items_in_order()]


def init_weightset(
    arch: ArchSpec, rng: torch.Generator, dtype: torch.dtype = torch.float32
) -> WeightSet:
    """Random init: fan-in uniform for conv/fc/attention, identity for norms."""
    tensors: dict[tuple[str, str], torch.Tensor] = {}
    for ls in arch.layers:
        shapes = ls.param_shapes()
        if ls.kind in ("conv", "fc"):
            fan_in = ls.n_input * (ls.kernel_size**2 if ls.kind == "conv" else 1)
            bound = 1.0 / math.sqrt(fan_in)
            for role, shape in shapes.items():
                t = torch.empty(shape, dtype=dtype)
                t.uniform_(-bound, bound, generator=rng)
                tensors[(ls.name, role)] = t
        elif ls.kind == "attention":
            bound = 1.0 / math.sqrt(ls.model_width)
            t = torch.empty(shapes["weight"], dtype=dtype)
            t.uniform_(-bound, bound, generator=rng)
            tensors[(ls.name, "weight")] = t
        else:  # norm
            tensors[(ls.name, "scale")] = torch.ones(shapes["scale"], dtype=dtype)
            tensors[(ls.name, "shift")] = torch.zeros(shapes["shift"], dtype=dtype)
    ws = WeightSet(arch, tensors)
    ws.validate()
    return ws


# ---------------------------------------------------------------------------
# batches and the functional forward pass
# ---------------------------------------------------------------------------


@dataclass
class Batch:
    inputs: torch.Tensor  # (batch, channels, height, width)
    labels: torch.Tensor  # (batch,)

    def validate(self, arch: ArchSpec) -> None:
        if self.inputs.ndim != 4 or tuple(self.inputs.shape[1:]) != tuple(arch.input_shape):
            raise StructuralError(
                f"batch inputs {tuple(self.inputs.shape)} do not match input shape "
                f"{arch.input_shape}"
            )
        if self.inputs.shape[0] < 1 or self.labels.shape != self.inputs.shape[:1]:
            raise StructuralError("batch labels must be one integer per input row")
        if self.labels.numel() and (
            int(self.labels.min()) < 0 or int(self.labels.max()) >= arch.num_classes
        ):
            raise StructuralError("batch labels out of class range")


def _get(weights: WeightSet, name: str, role: str, shape: tuple[int, ...]) -> torch.Tensor:
    t = weights.tensors.get((name, role))
    if t is None:
        raise StructuralError(f"layer '{name}': missing tensor '{role}'")
    if tuple(t.shape) != shape:
        raise StructuralError(
            f"layer '{name}': tensor '{role}' has shape {tuple(t.shape)}, expected {shape}"
        )
    return t


def functional_forward(arch: ArchSpec, weights: WeightSet, batch: Batch) -> torch.Tensor:
    """Logits of the network described by `arch` under the supplied weights.

    Pure and deterministic; differentiable with respect to every tensor in
    `weights`.
    """
    if weights.arch.fingerprint() != arch.fingerprint():
        raise StructuralError("weight set was built for a different architecture")
    batch.validate(arch)
    x = batch.inputs
    if arch.family == "cnn":
        return _forward_cnn(arch, weights, x)
    if arch.family == "vit":
        return _forward_vit(arch, weights, x)
    return _forward_mlp(arch, weights, x)


def forward_inputs(arch: ArchSpec, weights: WeightSet, inputs: torch.Tensor) -> torch.Tensor:
    dummy = torch.zeros(inputs.shape[0], dtype=torch.long)
    return functional_forward(arch, weights, Batch(inputs, dummy))


def _affine_channels(x: torch.Tensor, scale: torch.Tensor, shift: torch.Tensor) -> torch.Tensor:
    # frozen normalization constants are the canonical (0, 1); see ArchSpec docs
    return x * scale.view(1, -1, 1, 1) + shift.view(1, -1, 1, 1)


def _forward_cnn(arch: ArchSpec, weights: WeightSet, x: torch.Tensor) -> torch.Tensor:
    for op in _plan_cnn(arch):
        if op[0] == "conv":
            _, ls, norm = op
            w = _get(weights, ls.name, "weight", ls.param_shapes()["weight"])
            b = _get(weights, ls.name, "bias", (ls.n_output,)) if ls.has_bias else None
            x = F.conv2d(x, w, b, stride=ls.stride, padding=ls.padding)
            if norm is not None:
                scale = _get(weights, norm.name, "scale", (norm.n_output,))
                shift = _get(weights, norm.name, "shift", (norm.n_output,))
                x = _affine_channels(x, scale, shift)
            x = F.relu(x)
            if ls.pool:
                x = F.max_pool2d(x, ls.pool)
        elif op[0] == "flatten":
            x = x.flatten(1)
        else:
            _, ls, is_last = op
            w = _get(weights, ls.name, "weight", (ls.n_output, ls.n_input))
            b = _get(weights, ls.name, "bias", (ls.n_output,)) if ls.has_bias else None
            x = F.linear(x, w, b)
            if not is_last:
                x = F.relu(x)
    return x


def sinusoidal_positions(n_tokens: int, width: int, dtype: torch.dtype) -> torch.Tensor:
    """Fixed sinusoidal token-position constants (not parameters)."""
    pos = torch.arange(n_tokens, dtype=torch.float64).unsqueeze(1)
    idx = torch.arange(0, width, 2, dtype=torch.float64)
    angle = pos / torch.pow(10000.0, idx / width)
    pe = torch.zeros(n_tokens, width, dtype=torch.float64)
    pe[:, 0::2] = torch.sin(angle)
    pe[:, 1::2] = torch.cos(angle[:, : width // 2])
    return pe.to(dtype)


def _layer_norm(x: torch.Tensor, ls: LayerSpec, weights: WeightSet) -> torch.Tensor:
    scale = _get(weights, ls.name, "scale", (ls.n_output,))
    shift = _get(weights, ls.name, "shift", (ls.n_output,))
    return F.layer_norm(x, (ls.n_output,), scale, shift)


def _attention(x: torch.Tensor, ls: LayerSpec, weights: WeightSet) -> torch.Tensor:
    packed = _get(weights, ls.name, "weight", ls.param_shapes()["weight"])
    dk, dv = ls.key_dim, ls.value_dim
    q_w = packed[:, :, :dk]
    k_w = packed[:, :, dk : 2 * dk]
    v_w = packed[:, :, 2 * dk : 2 * dk + dv]
    o_t = packed[:, :, 2 * dk + dv :]  # per-head transpose of the output-concat matrix
    q = torch.einsum("btd,hde->bhte", x, q_w)
    k = torch.einsum("btd,hde->bhte", x, k_w)
    v = torch.einsum("btd,hde->bhte", x, v_w)
    scores = torch.einsum("bhqe,bhke->bhqk", q, k) / math.sqrt(dk)
    ctx = torch.einsum("bhqk,bhke->bhqe", torch.softmax(scores, dim=-1), v)
    return torch.einsum("bhtv,hdv->btd", ctx, o_t)


def _forward_vit(arch: ArchSpec, weights: WeightSet, x: torch.Tensor) -> torch.Tensor:
    plan = _plan_vit(arch)
    patch = plan["patch"]
    w = _get(weights, patch.name, "weight", patch.param_shapes()["weight"])
    b = _get(weights, patch.name, "bias", (patch.n_output,)) if patch.has_bias else None
    x = F.conv2d(x, w, b, stride=patch.stride)
    x = x.flatten(2).transpose(1, 2)  # (batch, tokens, width)
    x = x + sinusoidal_positions(plan["tokens"], plan["width"], x.dtype)
    for block in plan["blocks"]:
        if block[0] == "attn":
            _, norm, attn = block
            x = x + _attention(_layer_norm(x, norm, weights), attn, weights)
        else:
            _, norm, fc_in, fc_out = block
            h = _layer_norm(x, norm, weights)
            h = F.gelu(F.linear(h, _get(weights, fc_in.name, "weight",
                                        (fc_in.n_output, fc_in.n_input)),
                                _get(weights, fc_in.name, "bias", (fc_in.n_output,))
                                if fc_in.has_bias else None))
            h = F.linear(h, _get(weights, fc_out.name, "weight",
                                 (fc_out.n_output, fc_out.n_input)),
                         _get(weights, fc_out.name, "bias", (fc_out.n_output,))
                         if fc_out.has_bias else None)
            x = x + h
    x = _layer_norm(x, plan["head_norm"], weights).mean(dim=1)
    head = plan["head"]
    return F.linear(x, _get(weights, head.name, "weight", (head.n_output, head.n_input)),
                    _get(weights, head.name, "bias", (head.n_output,))
                    if head.has_bias else None)


def _forward_mlp(arch: ArchSpec, weights: WeightSet, x: torch.Tensor) -> torch.Tensor:
    x = x.flatten(1)
    for i, ls in enumerate(arch.layers):
        w = _get(weights, ls.name, "weight", (ls.n_output, ls.n_input))
        b = _get(weights, ls.name, "bias", (ls.n_output,)) if ls.has_bias else None
        x = F.linear(x, w, b)
        if i < len(arch.layers) - 1:
            x = F.relu(x)
    return x
