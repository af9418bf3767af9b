"""Parameterized layers: conv, batch norm, MLP, activations, the residual MCFF layer and GAM"""

from __future__ import annotations

import logging
from collections.abc import Iterator, Mapping
from dataclasses import dataclass
from typing import Any, Literal

import numpy as np

import tensorcore as tc
from errors import ConfigError, DimensionError
from tensorcore import Array, Tensor

logger = logging.getLogger(__name__)
logger.addHandler(logging.NullHandler())

BUFFER_SUFFIXES = (".running_mean", ".running_var")


class ParamStore(Mapping[str, Tensor]):
    """Ordered, seeded collection of named parameter tensors.

    Paths are unique and iteration follows insertion order. Every
    initializer draws from one generator seeded at construction, so building
    the same model twice with the same seed reproduces all values bitwise.
    Batch-norm running statistics live here too, as non-trainable buffers.
    """

    def __init__(self, seed: int = 0) -> None:
        self.seed = seed
        self.rng = np.random.default_rng(seed)
        self._params: dict[str, Tensor] = {}

    def __getitem__(self, path: str) -> Tensor:
        return self._params[path]

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def add(self, path: str, data: Array, trainable: bool = True) -> Tensor:
        if path in self._params:
            raise ConfigError(f"Duplicate parameter path: {path}")
        tensor = Tensor(np.array(data, dtype=tc.get_default_dtype()), name=path, requires_grad=trainable)
        self._params[path] = tensor
        return tensor

    def normal(self, path: str, shape: tuple[int, ...], std: float) -> Tensor:
        return self.add(path, self.rng.normal(0.0, std, size=shape))

    def zeros(self, path: str, shape: tuple[int, ...], trainable: bool = True) -> Tensor:
        return self.add(path, np.zeros(shape), trainable)

    def ones(self, path: str, shape: tuple[int, ...], trainable: bool = True) -> Tensor:
        return self.add(path, np.ones(shape), trainable)

    def trainable(self) -> list[tuple[str, Tensor]]:
        return [(k, t) for k, t in self._params.items() if t.requires_grad]

    def num_parameters(self, trainable_only: bool = True) -> int:
        tensors = [t for _, t in self.trainable()] if trainable_only else list(self._params.values())
        return int(sum(t.size for t in tensors))

    def zero_(self, prefix: str = "") -> None:
        for path, tensor in self._params.items():
            if path.startswith(prefix) and tensor.requires_grad:
                tensor.data[...] = 0.0

    def state(self) -> dict[str, Array]:
        return {k: t.data.copy() for k, t in self._params.items()}

    def load_state(self, state: Mapping[str, Array], strict: bool = True) -> list[str]:
        """Copy values in by path; returns the paths that were skipped"""
        skipped: list[str] = []
        for path, tensor in self._params.items():
            value = state.get(path)
            if value is None or tuple(value.shape) != tensor.shape:
                skipped.append(path)
                continue
            tensor.data[...] = value
        if strict and skipped:
            raise DimensionError(f"State does not cover parameters: {', '.join(skipped)}")
        return skipped

    def copy_from(self, other: ParamStore, prefix_map: Mapping[str, str] | None = None) -> list[str]:
        """Transfer every path/shape match from ``other``; used for fine-tuning.

        ``prefix_map`` renames source prefixes before matching, e.g.
        ``{"backbone.": "backbone."}``; unmapped source paths keep their names.
        """
        source = other.state()
        for old, new in (prefix_map or {}).items():
            source = {(new + k[len(old) :] if k.startswith(old) else k): v for k, v in source.items()}
        skipped = self.load_state(source, strict=False)
        if skipped:
            logger.info("copy_from skipped %d parameter(s) without a match", len(skipped))
        return skipped

    def equals(self, other: ParamStore) -> bool:
        if list(self) != list(other):
            return False
        return all(np.array_equal(self[k].data, other[k].data) for k in self)


# ---------------------------------------------------------------------------
# primitive layers
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class Conv2dSpec:
    in_channels: int
    out_channels: int
    kernel: int
    stride: int = 1
    pad: int = 0
    bias: bool = True


@dataclass(frozen=True)
class BatchNormSpec:
    channels: int
    eps: float = 1e-5
    momentum: float = 0.1


@dataclass(frozen=True)
class MlpSpec:
    in_features: int
    hidden: int
    out_features: int


@dataclass(frozen=True)
class ActivationSpec:
    kind: Literal["relu", "leaky_relu", "sigmoid", "tanh", "silu"]
    slope: float = 0.2


LayerSpec = Conv2dSpec | BatchNormSpec | MlpSpec | ActivationSpec


def init_conv(store: ParamStore, prefix: str, spec: Conv2dSpec, std: float | None = None) -> None:
    fan_in = spec.in_channels * spec.kernel * spec.kernel
    scale = std if std is not None else float(np.sqrt(2.0 / fan_in))
    store.normal(f"{prefix}.weight", (spec.out_channels, spec.in_channels, spec.kernel, spec.kernel), scale)
    if spec.bias:
        store.zeros(f"{prefix}.bias", (spec.out_channels,))


def init_batchnorm(store: ParamStore, prefix: str, spec: BatchNormSpec) -> None:
    store.ones(f"{prefix}.gamma", (spec.channels,))
    store.zeros(f"{prefix}.beta", (spec.channels,))
    store.zeros(f"{prefix}.running_mean", (spec.channels,), trainable=False)
    store.ones(f"{prefix}.running_var", (spec.channels,), trainable=False)


def init_mlp(store: ParamStore, prefix: str, spec: MlpSpec, std: float | None = None) -> None:
    s1 = std if std is not None else float(np.sqrt(2.0 / spec.in_features))
    s2 = std if std is not None else float(np.sqrt(1.0 / spec.hidden))
    store.normal(f"{prefix}.fc1.weight", (spec.in_features, spec.hidden), s1)
    store.zeros(f"{prefix}.fc1.bias", (spec.hidden,))
    store.normal(f"{prefix}.fc2.weight", (spec.hidden, spec.out_features), s2)
    store.zeros(f"{prefix}.fc2.bias", (spec.out_features,))


def activation(x: Tensor, spec: ActivationSpec) -> Tensor:
    match spec.kind:
        case "relu":
            return tc.relu(x)
        case "leaky_relu":
            return tc.leaky_relu(x, spec.slope)
        case "sigmoid":
            return tc.sigmoid(x)
        case "tanh":
            return tc.tanh(x)
        case "silu":
            return tc.silu(x)
    raise ConfigError(f"Unknown activation: {spec.kind}")


def conv(x: Tensor, params: Mapping[str, Tensor], prefix: str, spec: Conv2dSpec) -> Tensor:
    bias = params[f"{prefix}.bias"] if spec.bias else None
    return tc.conv2d(x, params[f"{prefix}.weight"], bias, stride=spec.stride, pad=spec.pad)


def batch_norm(
    x: Tensor, params: Mapping[str, Tensor], prefix: str, spec: BatchNormSpec, training: bool = True
) -> Tensor:
    """Per-channel normalization over the batch and spatial axes, then scale and shift"""
    if x.ndim not in (2, 4) or x.shape[1] != spec.channels:
        raise DimensionError(f"batch_norm over {spec.channels} channels got input {x.shape}")
    axes = (0, 2, 3) if x.ndim == 4 else (0,)
    bshape = (1, spec.channels, 1, 1) if x.ndim == 4 else (1, spec.channels)
    gamma = params[f"{prefix}.gamma"].reshape(*bshape)
    beta = params[f"{prefix}.beta"].reshape(*bshape)
    running_mean = params[f"{prefix}.running_mean"]
    running_var = params[f"{prefix}.running_var"]

    if training:
        mu = x.mean(axes, keepdims=True)
        centered = x - mu
        var = (centered * centered).mean(axes, keepdims=True)
        xhat = centered / tc.sqrt(var + spec.eps)
        m = spec.momentum
        running_mean.data[...] = (1.0 - m) * running_mean.data + m * mu.data.reshape(-1)
        running_var.data[...] = (1.0 - m) * running_var.data + m * var.data.reshape(-1)
    else:
        scale = 1.0 / np.sqrt(running_var.data + spec.eps)
        xhat = (x - running_mean.data.reshape(bshape)) * scale.reshape(bshape)
    return xhat * gamma + beta


def mlp(x: Tensor, params: Mapping[str, Tensor], prefix: str, spec: MlpSpec) -> Tensor:
    """Two-layer perceptron applied to the rows of a 2-D input"""
    if x.ndim != 2 or x.shape[1] != spec.in_features:
        raise DimensionError(f"mlp expects (M, {spec.in_features}) input, got {x.shape}")
    hidden = tc.relu(x @ params[f"{prefix}.fc1.weight"] + params[f"{prefix}.fc1.bias"])
    return hidden @ params[f"{prefix}.fc2.weight"] + params[f"{prefix}.fc2.bias"]


def primitive_forward(
    layer: LayerSpec,
    x: Tensor,
    params: Mapping[str, Tensor] | None = None,
    prefix: str = "",
    training: bool = True,
) -> Tensor:
    """Forward one primitive layer; activations need no parameters"""
    if isinstance(layer, ActivationSpec):
        return activation(x, layer)
    if params is None:
        raise ConfigError(f"{type(layer).__name__} needs parameters")
    if isinstance(layer, Conv2dSpec):
        if x.ndim != 4 or x.shape[1] != layer.in_channels:
            raise DimensionError(f"conv expects {layer.in_channels} input channels, got input {x.shape}")
        return conv(x, params, prefix, layer)
    if isinstance(layer, BatchNormSpec):
        return batch_norm(x, params, prefix, layer, training)
    return mlp(x, params, prefix, layer)


# ---------------------------------------------------------------------------
# MCFF
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class McffSpec:
    """Chain fusion over (channel, height, width) modes.

    ``ranks`` defaults to ``dims``; the residual form requires them equal.
    """

    dims: tuple[int, int, int]
    residual: bool = True
    init_std: float = 0.02
    ranks: tuple[int, int, int] | None = None

    @property
    def out_dims(self) -> tuple[int, int, int]:
        return self.ranks if self.ranks is not None else self.dims

    def validate(self) -> None:
        if any(d < 1 for d in self.dims) or any(r < 1 for r in self.out_dims):
            raise ConfigError(f"MCFF extents must be positive: dims={self.dims} ranks={self.out_dims}")
        if self.residual and self.out_dims != self.dims:
            raise ConfigError(f"Residual MCFF requires ranks equal to dims, got {self.out_dims} vs {self.dims}")
        if self.init_std < 0:
            raise ConfigError(f"init_std must be non-negative, got {self.init_std}")


def mcff_param_count(spec: McffSpec) -> int:
    return sum(d * r for d, r in zip(spec.dims, spec.out_dims))


def init_mcff(store: ParamStore, prefix: str, spec: McffSpec) -> None:
    spec.validate()
    for index, (d, r) in enumerate(zip(spec.dims, spec.out_dims), start=1):
        store.normal(f"{prefix}.w{index}", (d, r), spec.init_std)


def mcff_layer(x: Tensor, params: Mapping[str, Tensor], prefix: str, spec: McffSpec) -> Tensor:
    """X + X x1 W1 x2 W2 x3 W3 for (C, H, W) maps, or per sample for (N, C, H, W)"""
    batched = x.ndim == 4
    extents = x.shape[1:] if batched else x.shape
    for mode, (have, want) in enumerate(zip(extents, spec.dims), start=1):
        if have != want:
            raise DimensionError(f"MCFF mode-{mode} extent is {have}, layer was built for {want}")
    fused = tc.mcff_chain(
        x, params[f"{prefix}.w1"], params[f"{prefix}.w2"], params[f"{prefix}.w3"], batched=batched
    )
    return x + fused if spec.residual else fused


# ---------------------------------------------------------------------------
# GAM
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class GamSpec:
    channels: int
    reduction: int = 4
    spatial_kernel: int = 7

    @property
    def hidden(self) -> int:
        return self.channels // self.reduction

    def validate(self) -> None:
        if self.channels < 1 or self.reduction < 1:
            raise ConfigError(f"GAM channels and reduction must be positive: {self.channels}, {self.reduction}")
        if self.channels % self.reduction:
            raise ConfigError(f"GAM channels {self.channels} not divisible by reduction {self.reduction}")
        if self.spatial_kernel < 1 or self.spatial_kernel % 2 == 0:
            raise ConfigError(f"GAM spatial kernel must be odd, got {self.spatial_kernel}")


def _gam_layers(spec: GamSpec) -> tuple[MlpSpec, Conv2dSpec, BatchNormSpec, Conv2dSpec]:
    k, pad = spec.spatial_kernel, spec.spatial_kernel // 2
    return (
        MlpSpec(spec.channels, spec.hidden, spec.channels),
        Conv2dSpec(spec.channels, spec.hidden, k, pad=pad, bias=False),
        BatchNormSpec(spec.hidden),
        Conv2dSpec(spec.hidden, spec.channels, k, pad=pad),
    )


def init_gam(store: ParamStore, prefix: str, spec: GamSpec) -> None:
    spec.validate()
    channel_mlp, conv1, bn, conv2 = _gam_layers(spec)
    init_mlp(store, f"{prefix}.channel", channel_mlp)
    init_conv(store, f"{prefix}.spatial.conv1", conv1)
    init_batchnorm(store, f"{prefix}.spatial.bn", bn)
    init_conv(store, f"{prefix}.spatial.conv2", conv2)


def gam_attention(
    f: Tensor, params: Mapping[str, Tensor], prefix: str, spec: GamSpec, training: bool = True
) -> tuple[Tensor, Tensor, Tensor]:
    """GAM output together with its channel and spatial gates"""
    squeeze = f.ndim == 3
    x = f.reshape(1, *f.shape) if squeeze else f
    if x.ndim != 4 or x.shape[1] != spec.channels:
        raise DimensionError(f"GAM built for {spec.channels} channels got input {f.shape}")
    n, c, h, w = x.shape
    channel_mlp, conv1, bn, conv2 = _gam_layers(spec)

    # channel stage: channel-last permutation, per-site MLP, permute back
    per_site = x.transpose(0, 2, 3, 1).reshape(n * h * w, c)
    att = mlp(per_site, params, f"{prefix}.channel", channel_mlp)
    gate_c = tc.sigmoid(att.reshape(n, h, w, c).transpose(0, 3, 1, 2))
    x2 = x * gate_c

    s = conv(x2, params, f"{prefix}.spatial.conv1", conv1)
    s = tc.relu(batch_norm(s, params, f"{prefix}.spatial.bn", bn, training))
    gate_s = tc.sigmoid(conv(s, params, f"{prefix}.spatial.conv2", conv2))
    out = x2 * gate_s

    if squeeze:
        return out.reshape(c, h, w), gate_c.reshape(c, h, w), gate_s.reshape(c, h, w)
    return out, gate_c, gate_s


def gam_forward(
    f: Tensor, params: Mapping[str, Tensor], prefix: str, spec: GamSpec, training: bool = True
) -> Tensor:
    return gam_attention(f, params, prefix, spec, training)[0]


def describe(store: ParamStore) -> dict[str, Any]:
    return {
        "seed": store.seed,
        "parameters": store.num_parameters(),
        "tensors": {k: list(t.shape) for k, t in store.items()},
    }
