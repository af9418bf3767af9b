"""Dense tensors with reverse-mode differentiation, mode-n products and gradient checking"""

from __future__ import annotations

import itertools
import logging
from collections.abc import Callable, Iterable, Mapping, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, TypeVar

import numpy as np
import numpy.typing as npt
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from errors import ContractError, DimensionError, NumericError

logger = logging.getLogger(__name__)
logger.addHandler(logging.NullHandler())

Array = npt.NDArray[np.floating[Any]]
GradFn = Callable[[Array], Sequence["Array | None"]]
T = TypeVar("T")
R = TypeVar("R")

_default_dtype: type[np.floating[Any]] = np.float64
_creation_order = itertools.count()


def set_default_dtype(dtype: type[np.floating[Any]]) -> None:
    """Switch new tensors between 64-bit (default) and 32-bit storage"""
    global _default_dtype
    if dtype not in (np.float64, np.float32):
        raise ContractError(f"Unsupported dtype: {dtype}")
    _default_dtype = dtype


def get_default_dtype() -> type[np.floating[Any]]:
    return _default_dtype


class Tensor:
    """A dense row-major array that records how it was computed.

    Leaves created by the user carry ``requires_grad`` when they are
    parameters; every operation whose inputs require gradients records its
    parents and a local derivative rule so that ``backward`` can push
    gradients back to the leaves.
    """

    __slots__ = ("data", "grad", "name", "requires_grad", "op", "_parents", "_grad_fn", "_order")

    def __init__(
        self,
        data: Any,
        *,
        name: str | None = None,
        requires_grad: bool = False,
        dtype: Any = None,
    ) -> None:
        self.data: Array = np.asarray(data, dtype=dtype or _default_dtype)
        self.grad: Array | None = None
        self.name = name
        self.requires_grad = requires_grad
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._grad_fn: GradFn | None = None
        self._order = next(_creation_order)

    # -- introspection -----------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(self.data.shape)

    @property
    def ndim(self) -> int:
        return int(self.data.ndim)

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def is_leaf(self) -> bool:
        return self._grad_fn is None

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single element, tensor has shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> Array:
        return self.data

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self.op}{label})"

    # -- operators ---------------------------------------------------------
    def __add__(self, other: TensorLike) -> Tensor:
        return add(self, other)

    def __radd__(self, other: TensorLike) -> Tensor:
        return add(other, self)

    def __sub__(self, other: TensorLike) -> Tensor:
        return sub(self, other)

    def __rsub__(self, other: TensorLike) -> Tensor:
        return sub(other, self)

    def __mul__(self, other: TensorLike) -> Tensor:
        return mul(self, other)

    def __rmul__(self, other: TensorLike) -> Tensor:
        return mul(other, self)

    def __truediv__(self, other: TensorLike) -> Tensor:
        return div(self, other)

    def __rtruediv__(self, other: TensorLike) -> Tensor:
        return div(other, self)

    def __neg__(self) -> Tensor:
        return neg(self)

    def __pow__(self, exponent: float) -> Tensor:
        return power(self, exponent)

    def __matmul__(self, other: Tensor) -> Tensor:
        return matmul(self, other)

    def __getitem__(self, key: Any) -> Tensor:
        return getitem(self, key)

    # -- method forms ------------------------------------------------------
    def sum(self, axis: int | tuple[int, ...] | None = None, keepdims: bool = False) -> Tensor:
        return tsum(self, axis, keepdims)

    def mean(self, axis: int | tuple[int, ...] | None = None, keepdims: bool = False) -> Tensor:
        return mean(self, axis, keepdims)

    def reshape(self, *shape: int) -> Tensor:
        return reshape(self, shape)

    def transpose(self, *axes: int) -> Tensor:
        return transpose(self, axes)


TensorLike = Tensor | float | int | Array


def as_tensor(value: TensorLike) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _make(data: Array, parents: Sequence[Tensor], grad_fn: GradFn, op: str) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NumericError(f"Operation '{op}' produced non-finite values")
    out = Tensor(data, dtype=data.dtype)
    out.op = op
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._grad_fn = grad_fn
    return out


def _unbroadcast(grad: Array, shape: tuple[int, ...]) -> Array:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------
def add(a: TensorLike, b: TensorLike) -> Tensor:
    ta, tb = as_tensor(a), as_tensor(b)
    return _make(
        ta.data + tb.data,
        (ta, tb),
        lambda g: (_unbroadcast(g, ta.shape), _unbroadcast(g, tb.shape)),
        "add",
    )


def sub(a: TensorLike, b: TensorLike) -> Tensor:
    ta, tb = as_tensor(a), as_tensor(b)
    return _make(
        ta.data - tb.data,
        (ta, tb),
        lambda g: (_unbroadcast(g, ta.shape), _unbroadcast(-g, tb.shape)),
        "sub",
    )


def mul(a: TensorLike, b: TensorLike) -> Tensor:
    ta, tb = as_tensor(a), as_tensor(b)
    return _make(
        ta.data * tb.data,
        (ta, tb),
        lambda g: (_unbroadcast(g * tb.data, ta.shape), _unbroadcast(g * ta.data, tb.shape)),
        "mul",
    )


def div(a: TensorLike, b: TensorLike) -> Tensor:
    ta, tb = as_tensor(a), as_tensor(b)
    return _make(
        ta.data / tb.data,
        (ta, tb),
        lambda g: (
            _unbroadcast(g / tb.data, ta.shape),
            _unbroadcast(-g * ta.data / (tb.data * tb.data), tb.shape),
        ),
        "div",
    )


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def power(a: Tensor, exponent: float) -> Tensor:
    out = a.data**exponent
    return _make(out, (a,), lambda g: (g * exponent * a.data ** (exponent - 1),), "pow")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def arctan(a: Tensor) -> Tensor:
    return _make(np.arctan(a.data), (a,), lambda g: (g / (1.0 + a.data * a.data),), "arctan")


def maximum(a: TensorLike, b: TensorLike) -> Tensor:
    ta, tb = as_tensor(a), as_tensor(b)
    mask = ta.data >= tb.data
    return _make(
        np.where(mask, ta.data, tb.data),
        (ta, tb),
        lambda g: (_unbroadcast(g * mask, ta.shape), _unbroadcast(g * ~mask, tb.shape)),
        "maximum",
    )


def minimum(a: TensorLike, b: TensorLike) -> Tensor:
    ta, tb = as_tensor(a), as_tensor(b)
    mask = ta.data <= tb.data
    return _make(
        np.where(mask, ta.data, tb.data),
        (ta, tb),
        lambda g: (_unbroadcast(g * mask, ta.shape), _unbroadcast(g * ~mask, tb.shape)),
        "minimum",
    )


def where(mask: npt.ArrayLike, a: TensorLike, b: TensorLike) -> Tensor:
    """Pick ``a`` where the constant ``mask`` holds, else ``b``"""
    m = np.asarray(mask, dtype=bool)
    ta, tb = as_tensor(a), as_tensor(b)
    return _make(
        np.where(m, ta.data, tb.data),
        (ta, tb),
        lambda g: (_unbroadcast(np.where(m, g, 0.0), ta.shape), _unbroadcast(np.where(m, 0.0, g), tb.shape)),
        "where",
    )


# ---------------------------------------------------------------------------
# activations
# ---------------------------------------------------------------------------
def sigmoid(a: Tensor) -> Tensor:
    out = expit(a.data)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make(a.data * mask, (a,), lambda g: (g * mask,), "relu")


def leaky_relu(a: Tensor, slope: float = 0.2) -> Tensor:
    scale = np.where(a.data > 0, 1.0, slope)
    return _make(a.data * scale, (a,), lambda g: (g * scale,), "leaky_relu")


def silu(a: Tensor) -> Tensor:
    s = expit(a.data)
    return _make(a.data * s, (a,), lambda g: (g * (s + a.data * s * (1.0 - s)),), "silu")


def softplus(a: Tensor) -> Tensor:
    return _make(np.logaddexp(0.0, a.data), (a,), lambda g: (g * expit(a.data),), "softplus")


def bce_with_logits(logits: Tensor, targets: TensorLike) -> Tensor:
    """Elementwise binary cross-entropy of sigmoid(logits) against targets in [0, 1]"""
    return softplus(logits) - logits * targets


# ---------------------------------------------------------------------------
# reductions and structure
# ---------------------------------------------------------------------------
def _normalize_axes(axis: int | tuple[int, ...] | None, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    axes = (axis,) if isinstance(axis, int) else axis
    return tuple(sorted(a % ndim for a in axes))


def tsum(a: Tensor, axis: int | tuple[int, ...] | None = None, keepdims: bool = False) -> Tensor:
    axes = _normalize_axes(axis, a.ndim)
    out = np.sum(a.data, axis=axes, keepdims=keepdims)

    def grad_fn(g: Array) -> tuple[Array]:
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(np.asarray(out), (a,), grad_fn, "sum")


def mean(a: Tensor, axis: int | tuple[int, ...] | None = None, keepdims: bool = False) -> Tensor:
    axes = _normalize_axes(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    return tsum(a, axis, keepdims) / float(count)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    return _make(a.data.reshape(tuple(shape)), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    inverse = tuple(int(i) for i in np.argsort(axes))
    return _make(a.data.transpose(tuple(axes)), (a,), lambda g: (g.transpose(inverse),), "transpose")


def getitem(a: Tensor, key: Any) -> Tensor:
    def grad_fn(g: Array) -> tuple[Array]:
        full = np.zeros_like(a.data)
        np.add.at(full, key, g)
        return (full,)

    return _make(np.array(a.data[key]), (a,), grad_fn, "getitem")


def concatenate(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]
    return _make(
        np.concatenate([t.data for t in tensors], axis=axis),
        tuple(tensors),
        lambda g: tuple(np.split(g, cuts, axis=axis)),
        "concatenate",
    )


def flip(a: Tensor, axis: int) -> Tensor:
    return _make(np.flip(a.data, axis=axis).copy(), (a,), lambda g: (np.flip(g, axis=axis).copy(),), "flip")


def upsample_nearest(a: Tensor, factor: int = 2) -> Tensor:
    """Nearest-neighbour upsampling of the last two axes of an (N, C, H, W) tensor"""
    n, c, h, w = a.shape
    out = a.data.repeat(factor, axis=2).repeat(factor, axis=3)
    return _make(
        out,
        (a,),
        lambda g: (g.reshape(n, c, h, factor, w, factor).sum(axis=(3, 5)),),
        "upsample_nearest",
    )


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul inner extents differ: {a.shape[1]} vs {b.shape[0]}")
    return _make(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g), "matmul")


# ---------------------------------------------------------------------------
# mode-n (Einstein) products
# ---------------------------------------------------------------------------
def mode_product(x: Tensor, w: Tensor, mode: int, *, batched: bool = False) -> Tensor:
    """Contract ``x`` with ``w`` along ``mode`` (1-based).

    For a rank-3 ``x`` of shape (I, J, K) and mode 1 the result is
    Y[r, j, k] = sum_i X[i, j, k] * W[i, r]. With ``batched`` the leading axis
    of a rank-4 ``x`` is a sample axis and modes count from the next one.
    """
    expected_rank = 4 if batched else 3
    if x.ndim != expected_rank:
        raise DimensionError(f"mode_product expects a rank-{expected_rank} tensor, got shape {x.shape}")
    if mode not in (1, 2, 3):
        raise DimensionError(f"mode must be 1, 2 or 3, got {mode}")
    if w.ndim != 2:
        raise DimensionError(f"mode_product weight must be a matrix, got shape {w.shape}")
    axis = mode - 1 + (1 if batched else 0)
    extent = x.shape[axis]
    if extent != w.shape[0]:
        raise DimensionError(
            f"mode-{mode} extent of X is {extent} but W has first extent {w.shape[0]}"
        )

    moved = np.moveaxis(x.data, axis, 0)
    rest = moved.shape[1:]
    xm = moved.reshape(extent, -1)
    out = np.moveaxis((w.data.T @ xm).reshape((w.shape[1], *rest)), 0, axis)

    def grad_fn(g: Array) -> tuple[Array, Array]:
        gm = np.moveaxis(g, axis, 0).reshape(w.shape[1], -1)
        gx = np.moveaxis((w.data @ gm).reshape((extent, *rest)), 0, axis)
        gw = xm @ gm.T
        return gx, gw

    return _make(np.ascontiguousarray(out), (x, w), grad_fn, f"mode_product{mode}")


def mcff_chain(x: Tensor, w1: Tensor, w2: Tensor, w3: Tensor, *, batched: bool = False) -> Tensor:
    """Sequential mode-1, mode-2, mode-3 products, evaluated left to right"""
    offset = 1 if batched else 0
    if x.ndim != 3 + offset:
        raise DimensionError(f"mcff_chain expects a rank-{3 + offset} tensor, got shape {x.shape}")
    for index, w in enumerate((w1, w2, w3), start=1):
        extent = x.shape[index - 1 + offset]
        if w.ndim != 2 or w.shape[0] != extent:
            raise DimensionError(
                f"W{index} has shape {w.shape} but mode-{index} extent of X is {extent}"
            )
    y = mode_product(x, w1, 1, batched=batched)
    y = mode_product(y, w2, 2, batched=batched)
    return mode_product(y, w3, 3, batched=batched)


# ---------------------------------------------------------------------------
# convolutions
# ---------------------------------------------------------------------------
def conv_output_extent(extent: int, kernel: int, stride: int, pad: int) -> int:
    return (extent + 2 * pad - kernel) // stride + 1


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, *, stride: int = 1, pad: int = 0) -> Tensor:
    """2-D cross-correlation of (N, C, H, W) input with (O, C, k, k) kernels"""
    if x.ndim != 4 or w.ndim != 4:
        raise DimensionError(f"conv2d expects rank-4 input and kernel, got {x.shape} and {w.shape}")
    n, c, h, wd = x.shape
    o, c_w, k, k2 = w.shape
    if c != c_w or k != k2:
        raise DimensionError(f"conv2d kernel {w.shape} does not fit input channels {c}")
    if stride < 1 or pad < 0:
        raise DimensionError(f"conv2d stride must be >= 1 and pad >= 0, got stride={stride} pad={pad}")
    ho, wo = conv_output_extent(h, k, stride, pad), conv_output_extent(wd, k, stride, pad)
    if ho < 1 or wo < 1:
        raise DimensionError(f"conv2d kernel {k} with pad {pad} exceeds input extent {h}x{wd}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    windows = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * k * k)
    wm = w.data.reshape(o, -1)
    out = (cols @ wm.T).reshape(n, ho, wo, o).transpose(0, 3, 1, 2)
    if b is not None:
        out = out + b.data.reshape(1, o, 1, 1)

    def grad_fn(g: Array) -> list[Array | None]:
        gm = g.transpose(0, 2, 3, 1).reshape(-1, o)
        gw = (gm.T @ cols).reshape(w.shape)
        dcols = (gm @ wm).reshape(n, ho, wo, c, k, k)
        dxp = np.zeros_like(xp)
        for i in range(k):
            for j in range(k):
                dxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += dcols[
                    :, :, :, :, i, j
                ].transpose(0, 3, 1, 2)
        gx = dxp[:, :, pad : pad + h, pad : pad + wd]
        grads: list[Array | None] = [gx, gw]
        if b is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    parents = (x, w) if b is None else (x, w, b)
    return _make(np.ascontiguousarray(out), parents, grad_fn, "conv2d")


def conv_transpose2d(
    x: Tensor, w: Tensor, b: Tensor | None = None, *, stride: int = 1, pad: int = 0
) -> Tensor:
    """Transposed convolution of (N, Cin, H, W) input with (Cin, Cout, k, k) kernels.

    Output extent is (H - 1) * stride - 2 * pad + k, the adjoint of conv2d.
    """
    if x.ndim != 4 or w.ndim != 4:
        raise DimensionError(
            f"conv_transpose2d expects rank-4 input and kernel, got {x.shape} and {w.shape}"
        )
    n, cin, h, wd = x.shape
    cin_w, cout, k, _ = w.shape
    if cin != cin_w:
        raise DimensionError(f"conv_transpose2d kernel {w.shape} does not fit input channels {cin}")
    hf, wf = (h - 1) * stride + k, (wd - 1) * stride + k
    if hf - 2 * pad < 1 or wf - 2 * pad < 1:
        raise DimensionError(f"conv_transpose2d padding {pad} removes the whole output")

    xm = x.data.transpose(0, 2, 3, 1).reshape(-1, cin)
    wm = w.data.reshape(cin, -1)
    cols = (xm @ wm).reshape(n, h, wd, cout, k, k)
    full = np.zeros((n, cout, hf, wf), dtype=x.data.dtype)
    for i in range(k):
        for j in range(k):
            full[:, :, i : i + stride * h : stride, j : j + stride * wd : stride] += cols[
                :, :, :, :, i, j
            ].transpose(0, 3, 1, 2)
    out = full[:, :, pad : hf - pad, pad : wf - pad]
    if b is not None:
        out = out + b.data.reshape(1, cout, 1, 1)

    def grad_fn(g: Array) -> list[Array | None]:
        gfull = np.zeros((n, cout, hf, wf), dtype=g.dtype)
        gfull[:, :, pad : hf - pad, pad : wf - pad] = g
        windows = sliding_window_view(gfull, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
        gcols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(n * h * wd, cout * k * k)
        gx = (gcols @ wm.T).reshape(n, h, wd, cin).transpose(0, 3, 1, 2)
        gw = (xm.T @ gcols).reshape(w.shape)
        grads: list[Array | None] = [np.ascontiguousarray(gx), gw]
        if b is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    parents = (x, w) if b is None else (x, w, b)
    return _make(np.ascontiguousarray(out), parents, grad_fn, "conv_transpose2d")


# ---------------------------------------------------------------------------
# graph traversal
# ---------------------------------------------------------------------------
@dataclass
class DiffGraph:
    """Nodes reachable from a loss, in creation (topological) order"""

    nodes: list[Tensor] = field(default_factory=list)

    @classmethod
    def trace(cls, loss: Tensor) -> DiffGraph:
        seen: dict[int, Tensor] = {}
        stack = [loss]
        while stack:
            node = stack.pop()
            if id(node) in seen:
                continue
            seen[id(node)] = node
            stack.extend(p for p in node._parents if p.requires_grad)
        return cls(sorted(seen.values(), key=lambda t: t._order))

    def parameters(self) -> list[Tensor]:
        return [n for n in self.nodes if n.is_leaf and n.requires_grad]


def backward(loss: Tensor, graph: DiffGraph | None = None) -> dict[str, Array]:
    """Propagate d(loss)/d(node) through the graph.

    Every named leaf that requires gradients receives a fresh ``grad`` and
    appears in the returned map; leaves without ``requires_grad`` are left
    untouched.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    graph = graph or DiffGraph.trace(loss)
    pending: dict[int, Array] = {id(loss): np.ones_like(loss.data)}
    gradients: dict[str, Array] = {}

    for node in reversed(graph.nodes):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        if g.shape != node.shape:
            raise DimensionError(f"gradient shape {g.shape} differs from value shape {node.shape} at {node!r}")
        if node.is_leaf:
            if node.requires_grad:
                node.grad = g
                if node.name is not None:
                    gradients[node.name] = g
            continue
        assert node._grad_fn is not None
        for parent, pg in zip(node._parents, node._grad_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            prior = pending.get(id(parent))
            pending[id(parent)] = pg if prior is None else prior + pg
    return gradients


def finite_diff_check(
    f: Callable[[Mapping[str, Tensor]], Tensor],
    params: Mapping[str, Tensor],
    step: float = 1e-5,
    names: Iterable[str] | None = None,
) -> float:
    """Largest relative error between analytic and central-difference gradients.

    The error of one entry is |analytic - numeric| / max(1e-12, |numeric|);
    the maximum over every entry of every trainable parameter is returned.
    """
    if step <= 0:
        raise ContractError(f"finite-difference step must be positive, got {step}")
    loss = f(params)
    analytic = backward(loss)
    selected = list(names) if names is not None else [k for k, t in params.items() if t.requires_grad]

    def evaluate() -> float:
        value = f(params).item()
        if not np.isfinite(value):
            raise NumericError("finite_diff_check: objective returned a non-finite value")
        return value

    worst = 0.0
    for name in selected:
        tensor = params[name]
        grad = analytic.get(name, np.zeros_like(tensor.data))
        for index in np.ndindex(*tensor.shape):
            original = tensor.data[index]
            tensor.data[index] = original + step
            plus = evaluate()
            tensor.data[index] = original - step
            minus = evaluate()
            tensor.data[index] = original
            numeric = (plus - minus) / (2.0 * step)
            err = abs(float(grad[index]) - numeric) / max(1e-12, abs(numeric))
            worst = max(worst, err)
    logger.debug("finite_diff_check over %d parameter(s): max rel err %.3e", len(selected), worst)
    return worst


def parallel_map(fn: Callable[[T], R], items: Iterable[T], threads: int = 1) -> list[R]:
    """Apply ``fn`` to every item, results in input order; threads=1 is a plain loop"""
    if threads <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))
