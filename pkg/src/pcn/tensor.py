"""Dense float tensors with a reverse-mode autodiff tape.

Only the operations the predictive-coding graph needs are provided.  Every
op takes :class:`Tensor` inputs, computes its value eagerly with numpy, and
(when gradients are enabled) records a closure that maps the output
gradient to input gradients.  :func:`backward` walks the recorded graph in
reverse topological order and accumulates into :class:`Parameter.grad`.

Values are treated as immutable once produced.  Any op yielding NaN/Inf
raises :class:`NonFiniteError` instead of propagating it.
"""

from __future__ import annotations

import contextlib
from functools import lru_cache
from typing import Callable, Iterable, Sequence

import numpy as np

from pcn import kernels

_DEFAULT_DTYPE = np.dtype(np.float32)
_grad_enabled = True


class NonFiniteError(ArithmeticError):
    """An operation produced NaN or Inf."""


def default_dtype() -> np.dtype:
    return _DEFAULT_DTYPE


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}")
    _DEFAULT_DTYPE = dtype


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the default dtype (``float64`` for gradient checks)."""
    old = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(old)


@contextlib.contextmanager
def no_grad():
    global _grad_enabled
    old = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = old


def is_grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    """An immutable n-d float array plus its position on the tape."""

    __slots__ = ("data", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype or _DEFAULT_DTYPE)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, dtype={self.dtype})"

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        return mul(self, other)


class Parameter(Tensor):
    """A learnable leaf.  ``grad`` always mirrors ``data`` in shape."""

    __slots__ = ("grad", "decay", "name")

    def __init__(self, data, decay: bool = True, name: str = "", dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)
        self.data = np.array(self.data)  # own the buffer; optimizers write in place
        self.grad = np.zeros_like(self.data)
        self.decay = decay
        self.name = name

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape}, decay={self.decay})"


def _check_finite(arr: np.ndarray, op: str) -> np.ndarray:
    # a single reduction catches any NaN/Inf in the buffer
    if not np.isfinite(arr.sum()):
        if not np.isfinite(arr).all():
            raise NonFiniteError(f"{op} produced non-finite values")
    return arr


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    _check_finite(data, op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.op = op
    out._parents = ()
    out._backward = None
    out.requires_grad = False
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _need_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def _channel_rate(rate: Tensor, r: Tensor, op: str) -> np.ndarray:
    if r.ndim != 4:
        raise ValueError(f"{op}: expected a 4-D (B,C,H,W) tensor, got {r.shape}")
    if rate.shape != (r.shape[1],):
        raise ValueError(
            f"{op}: rate length {rate.shape} does not match channel dimension {r.shape[1]}")
    return rate.data[None, :, None, None]


# ----------------------------------------------------------- elementwise ops


def add(a: Tensor, b: Tensor) -> Tensor:
    _need_same_shape(a, b, "add")
    return _make(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _need_same_shape(a, b, "sub")
    return _make(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _need_same_shape(a, b, "mul")
    x, y = a.data, b.data
    return _make(x * y, (a, b), lambda g: (g * y, g * x), "mul")


def sum(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    shape, dtype = x.shape, x.dtype
    return _make(np.asarray(x.data.sum(), dtype=dtype), (x,),
                 lambda g: (np.full(shape, g, dtype=dtype),), "sum")


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0)
    # out > 0 exactly where x > 0, so the mask is rebuilt lazily from the output
    return _make(out, (x,), lambda g: (g * (out > 0),), "relu")


def axpy_relu(r: Tensor, rate: Tensor, delta: Tensor, rectify: bool = True) -> Tensor:
    """``relu(r + rate * delta)`` with a per-channel ``rate``.

    ``rectify=False`` drops the final ReLU (linear test mode).
    """
    _need_same_shape(r, delta, "axpy_relu")
    a = _channel_rate(rate, r, "axpy_relu")
    d = delta.data
    z = r.data + a * d
    if not rectify:
        def back(g):
            return g, (g * d).sum(axis=(0, 2, 3)), g * a
        return _make(z, (r, rate, delta), back, "axpy")
    np.maximum(z, 0, out=z)

    def back(g):
        g = g * (z > 0)
        return g, (g * d).sum(axis=(0, 2, 3)), g * a

    return _make(z, (r, rate, delta), back, "axpy_relu")


def convex_mix_relu(r: Tensor, rate: Tensor, p: Tensor, rectify: bool = True) -> Tensor:
    """``relu((1 - rate) * r + rate * p)`` with a per-channel ``rate``."""
    _need_same_shape(r, p, "convex_mix_relu")
    b = _channel_rate(rate, r, "convex_mix_relu")
    x, y = r.data, p.data
    z = (1 - b) * x + b * y
    if rectify:
        np.maximum(z, 0, out=z)

    def back(g):
        if rectify:
            g = g * (z > 0)
        return g * (1 - b), (g * (y - x)).sum(axis=(0, 2, 3)), g * b

    return _make(z, (r, rate, p), back, "convex_mix_relu" if rectify else "convex_mix")


# ------------------------------------------------------------ spatial ops


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """3x3, stride 1, zero-padding 1 cross-correlation plus per-channel bias."""
    kernels.check_conv_shapes(x.data, weight.data, "conv2d")
    if x.shape[1] != weight.shape[1]:
        raise ValueError(
            f"conv2d: input channels {x.shape[1]} do not match weight inC {weight.shape[1]}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ValueError(f"conv2d: bias shape {bias.shape} does not match outC {weight.shape[0]}")
    xd, wd = x.data, weight.data
    out = kernels.conv2d(xd, wd, None if bias is None else bias.data)

    def back(g):
        gx = kernels.conv_transpose2d(g, wd) if x.requires_grad else None
        gw = kernels.conv2d_grad_weight(xd, g) if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(out, parents, back, "conv2d")


def conv_transpose2d(y: Tensor, weight: Tensor) -> Tensor:
    """Adjoint of :func:`conv2d` for the same ``[outC,inC,3,3]`` weight."""
    kernels.check_conv_shapes(y.data, weight.data, "conv_transpose2d")
    if y.shape[1] != weight.shape[0]:
        raise ValueError(
            f"conv_transpose2d: input channels {y.shape[1]} do not match weight outC "
            f"{weight.shape[0]}")
    yd, wd = y.data, weight.data
    out = kernels.conv_transpose2d(yd, wd)

    def back(g):
        gy = kernels.conv2d(g, wd) if y.requires_grad else None
        gw = kernels.conv2d_grad_weight(g, yd) if weight.requires_grad else None
        return gy, gw

    return _make(out, (y, weight), back, "conv_transpose2d")


def maxpool2x2(x: Tensor) -> Tensor:
    """2x2 max-pooling, stride 2.  Ties go to the first element in scan order."""
    if x.ndim != 4:
        raise ValueError(f"maxpool2x2: expected 4-D input, got {x.shape}")
    B, C, H, W = x.shape
    if H % 2 or W % 2:
        raise ValueError(f"maxpool2x2: H and W must be even, got H={H} W={W}")
    # pick within each row pair first, then between rows: with strict
    # comparisons this selects the first maximum in row-major scan order
    pairs = x.data.reshape(B * C * H, W // 2, 2)
    pick_right = pairs[..., 1] > pairs[..., 0]
    row_max = np.maximum(pairs[..., 0], pairs[..., 1]).reshape(B * C * H // 2, 2, W // 2)
    pick_bottom = row_max[:, 1] > row_max[:, 0]
    out = np.maximum(row_max[:, 0], row_max[:, 1]).reshape(B, C, H // 2, W // 2)

    def back(g):
        g = g.reshape(B * C * H // 2, W // 2)
        rows = np.empty((B * C * H // 2, 2, W // 2), dtype=g.dtype)
        rows[:, 1] = g * pick_bottom
        rows[:, 0] = g - rows[:, 1]
        rows = rows.reshape(B * C * H, W // 2)
        gx = np.empty((B * C * H, W // 2, 2), dtype=g.dtype)
        gx[..., 1] = rows * pick_right
        gx[..., 0] = rows - gx[..., 1]
        return (gx.reshape(B, C, H, W),)

    return _make(out, (x,), back, "maxpool2x2")


@lru_cache(maxsize=None)
def upsample_matrix(n: int, dtype: str = "float32") -> np.ndarray:
    """(2n, n) bilinear interpolation matrix, scale 2, align_corners=False."""
    u = np.zeros((2 * n, n), dtype=np.float64)
    for i in range(n):
        u[2 * i, i] += 0.75
        u[2 * i, max(i - 1, 0)] += 0.25
        u[2 * i + 1, i] += 0.75
        u[2 * i + 1, min(i + 1, n - 1)] += 0.25
    u = u.astype(dtype)
    u.flags.writeable = False
    return u


def bilinear_upsample2x(x: Tensor) -> Tensor:
    if x.ndim != 4:
        raise ValueError(f"bilinear_upsample2x: expected 4-D input, got {x.shape}")
    _, _, H, W = x.shape
    uh = upsample_matrix(H, x.dtype.name)
    uw = upsample_matrix(W, x.dtype.name)
    out = uh @ x.data @ uw.T
    return _make(out, (x,), lambda g: (uh.T @ g @ uw,), "bilinear_upsample2x")


def global_avg_pool(x: Tensor) -> Tensor:
    if x.ndim != 4:
        raise ValueError(f"global_avg_pool: expected 4-D input, got {x.shape}")
    B, C, H, W = x.shape
    out = x.data.mean(axis=(2, 3))

    def back(g):
        return (np.broadcast_to((g / (H * W))[:, :, None, None], (B, C, H, W)).copy(),)

    return _make(out, (x,), back, "global_avg_pool")


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ValueError(f"linear: incompatible shapes input {x.shape}, weight {weight.shape}")
    if bias.shape != (weight.shape[0],):
        raise ValueError(f"linear: bias shape {bias.shape} does not match {weight.shape[0]}")
    xd, wd = x.data, weight.data
    out = xd @ wd.T + bias.data
    return _make(out, (x, weight, bias),
                 lambda g: (g @ wd, g.T @ xd, g.sum(axis=0)), "linear")


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    ez = np.exp(z)
    return ez / ez.sum(axis=1, keepdims=True)


def softmax_cross_entropy(logits: Tensor, labels) -> tuple[Tensor, np.ndarray]:
    """Mean negative log-likelihood and the softmax probabilities."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ValueError(f"softmax_cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    K = logits.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= K):
        raise ValueError(f"softmax_cross_entropy: labels must lie in [0, {K})")
    B = logits.shape[0]
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(B)
    loss = np.asarray((logsum - z[rows, labels]).mean(), dtype=logits.dtype)
    probs = np.exp(z - logsum[:, None])

    def back(g):
        d = probs.copy()
        d[rows, labels] -= 1
        return (d * (g / B),)

    return _make(loss, (logits,), back, "softmax_cross_entropy"), probs


# ------------------------------------------------------------------ tape


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(param) into every reachable :class:`Parameter`."""
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topo_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if isinstance(node, Parameter):
            node.grad += g
            continue
        if node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


def zero_grad(params: Iterable[Parameter]) -> None:
    for p in params:
        p.zero_grad()


def finite_diff_grad(fn: Callable[[float], float], x: float, h: float = 1e-4) -> float:
    """Central difference ``(fn(x+h) - fn(x-h)) / 2h``."""
    if not h > 0:
        raise ValueError("finite_diff_grad: step h must be positive")
    return (fn(x + h) - fn(x - h)) / (2 * h)
