"""Array-level kernels for 3x3 / stride-1 / pad-1 convolution.

Two interchangeable implementations are provided:

* ``numpy``: im2col + GEMM, always available, the reference path.
* ``torch``: delegates the convolution arithmetic to torch's CPU kernels.
  Only raw ndarray -> ndarray arithmetic is delegated; the autodiff tape in
  :mod:`pcn.tensor` never touches torch autograd.

The backend is picked with :func:`set_backend` or the ``PCN_KERNELS``
environment variable (``auto`` | ``numpy`` | ``torch``).  ``auto`` prefers
torch when it is importable.
"""

from __future__ import annotations

import os

import numpy as np

try:  # optional accelerator
    import torch
    import torch.nn.functional as _F
except ImportError:  # pragma: no cover - exercised only without torch
    torch = None

_BACKENDS = ("numpy", "torch")
_backend = "numpy"


def available_backends() -> list[str]:
    return [b for b in _BACKENDS if b == "numpy" or torch is not None]


def set_backend(name: str) -> None:
    global _backend
    if name == "auto":
        name = "torch" if torch is not None else "numpy"
    if name not in _BACKENDS:
        raise ValueError(f"unknown kernel backend {name!r}; expected one of {_BACKENDS}")
    if name == "torch" and torch is None:
        raise RuntimeError("kernel backend 'torch' requested but torch is not installed")
    _backend = name


def get_backend() -> str:
    return _backend


def set_deterministic(flag: bool = True) -> None:
    """Force sequential, reproducible reductions inside the kernels."""
    if torch is not None:
        torch.use_deterministic_algorithms(flag)
        if flag:
            torch.set_num_threads(1)
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:
        return
    if flag:
        threadpool_limits(1)


set_backend(os.environ.get("PCN_KERNELS", "auto"))


def check_conv_shapes(x: np.ndarray, w: np.ndarray, where: str) -> None:
    if x.ndim != 4:
        raise ValueError(f"{where}: input must be 4-D (B,C,H,W), got shape {x.shape}")
    if w.ndim != 4 or w.shape[2:] != (3, 3):
        raise ValueError(f"{where}: weight must have shape [outC,inC,3,3], got {w.shape}")


# ---------------------------------------------------------------- numpy path


def _im2col(x: np.ndarray) -> np.ndarray:
    """(B,C,H,W) -> (C*9, B*H*W) patch matrix, row order (c, ky, kx)."""
    B, C, H, W = x.shape
    xp = np.zeros((C, B, H + 2, W + 2), dtype=x.dtype)
    xp[:, :, 1:-1, 1:-1] = x.transpose(1, 0, 2, 3)
    cols = np.empty((C, 3, 3, B, H, W), dtype=x.dtype)
    for ky in range(3):
        for kx in range(3):
            cols[:, ky, kx] = xp[:, :, ky:ky + H, kx:kx + W]
    return cols.reshape(C * 9, B * H * W)


def _np_conv2d(x, w, b):
    B, C, H, W = x.shape
    O = w.shape[0]
    out = w.reshape(O, C * 9) @ _im2col(x)
    if b is not None:
        out += b[:, None]
    return np.ascontiguousarray(out.reshape(O, B, H, W).transpose(1, 0, 2, 3))


def _np_conv2d_grad_weight(x, gy):
    B, C, H, W = x.shape
    O = gy.shape[1]
    g = gy.transpose(1, 0, 2, 3).reshape(O, B * H * W)
    return (g @ _im2col(x).T).reshape(O, C, 3, 3)


def _flip_swap(w: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))


# ---------------------------------------------------------------- public API


def conv2d(x: np.ndarray, w: np.ndarray, b: np.ndarray | None = None) -> np.ndarray:
    """Cross-correlation with zero padding 1; output keeps H and W."""
    if _backend == "torch":
        out = _F.conv2d(torch.from_numpy(x), torch.from_numpy(w),
                        None if b is None else torch.from_numpy(b), padding=1)
        return out.numpy()
    return _np_conv2d(x, w, b)


def conv_transpose2d(y: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Exact adjoint of :func:`conv2d` (bias excluded) for the same ``w``."""
    if _backend == "torch":
        return _F.conv_transpose2d(torch.from_numpy(y), torch.from_numpy(w), padding=1).numpy()
    return _np_conv2d(y, _flip_swap(w), None)


def conv2d_grad_weight(x: np.ndarray, gy: np.ndarray) -> np.ndarray:
    """d<conv2d(x, w), gy>/dw."""
    if _backend == "torch":
        xt = torch.from_numpy(x)
        gt = torch.from_numpy(gy)
        shape = (gy.shape[1], x.shape[1], 3, 3)
        _, gw, _ = torch.ops.aten.convolution_backward(
            gt, xt, torch.empty(shape, dtype=xt.dtype), None,
            [1, 1], [1, 1], [1, 1], False, [0, 0], 1, [False, True, False])
        return gw.numpy()
    return _np_conv2d_grad_weight(x, gy)
