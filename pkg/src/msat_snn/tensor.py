"""Dense float64 kernels used by the ANN forward pass and the SNN simulator.

Tensors are plain row-major (C-order) ``numpy.ndarray`` objects of dtype
float64.  The functions here only add the shape contracts and the error
messages the rest of the package relies on; arithmetic is numpy's.

``conv2d`` and ``avgpool2d`` accept either a single ``c x h x w`` sample or a
batch ``n x c x h x w``.  No broadcasting beyond that is supported.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DimensionError

DTYPE = np.float64


def as_tensor(x) -> np.ndarray:
    """Return ``x`` as a C-contiguous float64 array (copying only if needed)."""
    return np.ascontiguousarray(x, dtype=DTYPE)


def matmul(a, b) -> np.ndarray:
    a = as_tensor(a)
    b = as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    return a @ b


def rowwise_matmul(x, w_t) -> np.ndarray:
    """``x @ w_t`` for ``x`` of shape ``(n, ..., k)`` computed one sample at a time.

    A single BLAS GEMM over the whole batch may round a row differently
    depending on how many rows it shares the call with; stacking one product
    per sample makes every sample's result independent of batch size and
    order.
    """
    x = as_tensor(x)
    w_t = as_tensor(w_t)
    if x.shape[-1] != w_t.shape[0]:
        raise DimensionError(f"matmul: incompatible shapes {x.shape} and {w_t.shape}")
    if x.ndim == 2:
        return np.matmul(x[:, None, :], w_t)[:, 0, :]
    return np.matmul(x, w_t)


def relu(x) -> np.ndarray:
    return np.maximum(as_tensor(x), 0.0)


def _as_batch(x: np.ndarray, what: str) -> tuple[np.ndarray, bool]:
    if x.ndim == 3:
        return x[None], True
    if x.ndim == 4:
        return x, False
    raise DimensionError(f"{what}: expected c x h x w or n x c x h x w input, got shape {x.shape}")


def conv2d(inputs, kernels, stride: int = 1, padding: int = 0) -> np.ndarray:
    """Valid cross-correlation with zero padding.

    Output spatial size is ``(h + 2*padding - kh) // stride + 1``.
    """
    x, single = _as_batch(as_tensor(inputs), "conv2d")
    k = as_tensor(kernels)
    if k.ndim != 4:
        raise DimensionError(f"conv2d: kernels must be c_out x c_in x kh x kw, got {k.shape}")
    if stride < 1 or padding < 0:
        raise DimensionError(f"conv2d: bad stride={stride} / padding={padding}")
    n, c_in, h, w = x.shape
    c_out, kc, kh, kw = k.shape
    if kc != c_in:
        raise DimensionError(f"conv2d: input has {c_in} channels, kernels expect {kc} (input {x.shape}, kernels {k.shape})")
    if h + 2 * padding < kh or w + 2 * padding < kw:
        raise DimensionError(f"conv2d: kernel {kh}x{kw} larger than padded input {h + 2 * padding}x{w + 2 * padding}")
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    # windows: n, c_in, h', w', kh, kw
    windows = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    h_out, w_out = windows.shape[2:4]
    cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(n, h_out * w_out, c_in * kh * kw)
    out = rowwise_matmul(cols, k.reshape(c_out, -1).T)
    out = np.ascontiguousarray(out.transpose(0, 2, 1).reshape(n, c_out, h_out, w_out))
    return out[0] if single else out


def conv2d_output_shape(in_shape, kernel_shape, stride: int, padding: int) -> tuple[int, int, int]:
    c_in, h, w = in_shape
    c_out, _, kh, kw = kernel_shape
    return c_out, (h + 2 * padding - kh) // stride + 1, (w + 2 * padding - kw) // stride + 1


def avgpool2d(inputs, window: int) -> np.ndarray:
    """Mean over non-overlapping ``window x window`` blocks."""
    x, single = _as_batch(as_tensor(inputs), "avgpool2d")
    if window < 1:
        raise DimensionError(f"avgpool2d: window must be positive, got {window}")
    n, c, h, w = x.shape
    if h % window or w % window:
        raise DimensionError(f"avgpool2d: spatial dims {h}x{w} not divisible by window {window}")
    out = x.reshape(n, c, h // window, window, w // window, window).mean(axis=(3, 5))
    return out[0] if single else out
