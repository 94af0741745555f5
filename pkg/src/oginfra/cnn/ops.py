"""Forward and backward kernels for the layer kinds, in float64 numpy.

Every ``*_forward`` returns ``(output, cache)``; the matching ``*_backward``
takes the upstream gradient and that cache.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from oginfra.errors import ShapeError, UsageError


def _require_cache(cache, op: str) -> None:
    if cache is None:
        raise UsageError(f"{op}_backward called without a cached forward pass")


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def conv2d_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray, stride: int = 1, padding: int = 0):
    """Cross-correlate NCHW input with an (out, in, kh, kw) kernel."""
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d: input {x.shape} incompatible with kernel {w.shape}")
    if b.shape != (w.shape[0],):
        raise ShapeError(f"conv2d: bias {b.shape} incompatible with kernel {w.shape}")
    if stride < 1 or padding < 0:
        raise ShapeError(f"conv2d: invalid stride {stride} / padding {padding}")
    n, c, h, wd = x.shape
    f, _, kh, kw = w.shape
    ho, wo = conv_output_size(h, kh, stride, padding), conv_output_size(wd, kw, stride, padding)
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: kernel {w.shape} larger than padded input {x.shape}")
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x
    windows = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, : stride * ho : stride, : stride * wo : stride]
    cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    out = cols @ w.reshape(f, -1).T + b
    out = out.reshape(n, ho, wo, f).transpose(0, 3, 1, 2)
    return np.ascontiguousarray(out), (x.shape, cols, w, stride, padding)


def conv2d_backward(dout: np.ndarray, cache):
    """Returns ``(dx, dw, db)``."""
    _require_cache(cache, "conv2d")
    x_shape, cols, w, stride, padding = cache
    n, c, h, wd = x_shape
    f, _, kh, kw = w.shape
    _, _, ho, wo = dout.shape
    dmat = dout.transpose(0, 2, 3, 1).reshape(n * ho * wo, f)
    dw = (dmat.T @ cols).reshape(w.shape)
    db = dmat.sum(axis=0)
    dcols = (dmat @ w.reshape(f, -1)).reshape(n, ho, wo, c, kh, kw)
    dxp = np.zeros((n, c, h + 2 * padding, wd + 2 * padding))
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += dcols[:, :, :, :, i, j].transpose(
                0, 3, 1, 2
            )
    dx = dxp[:, :, padding : padding + h, padding : padding + wd] if padding else dxp
    return np.ascontiguousarray(dx), dw, db


def maxpool2d_forward(x: np.ndarray, kernel: int = 2, stride: int | None = None):
    stride = stride or kernel
    if x.ndim != 4:
        raise ShapeError(f"maxpool2d expects NCHW input, got {x.shape}")
    n, c, h, w = x.shape
    ho, wo = conv_output_size(h, kernel, stride, 0), conv_output_size(w, kernel, stride, 0)
    if ho < 1 or wo < 1:
        raise ShapeError(f"maxpool2d: window {kernel} larger than input {x.shape}")
    windows = sliding_window_view(x, (kernel, kernel), axis=(2, 3))[:, :, : stride * ho : stride, : stride * wo : stride]
    flat = windows.reshape(n, c, ho, wo, kernel * kernel)
    idx = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
    return out, (x.shape, idx, kernel, stride)


def maxpool2d_backward(dout: np.ndarray, cache) -> np.ndarray:
    _require_cache(cache, "maxpool2d")
    x_shape, idx, kernel, stride = cache
    _, _, ho, wo = dout.shape
    dx = np.zeros(x_shape)
    for i in range(kernel):
        for j in range(kernel):
            mask = idx == i * kernel + j
            dx[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += dout * mask
    return dx


def relu_forward(x: np.ndarray):
    mask = x > 0
    return x * mask, mask


def relu_backward(dout: np.ndarray, cache) -> np.ndarray:
    _require_cache(cache, "relu")
    return dout * cache


def dense_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray):
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0] or b.shape != (w.shape[1],):
        raise ShapeError(f"dense: input {x.shape} incompatible with weights {w.shape} / bias {b.shape}")
    return x @ w + b, (x, w)


def dense_backward(dout: np.ndarray, cache):
    """Returns ``(dx, dw, db)``."""
    _require_cache(cache, "dense")
    x, w = cache
    return dout @ w.T, x.T @ dout, dout.sum(axis=0)


def flatten_forward(x: np.ndarray):
    return x.reshape(x.shape[0], -1), x.shape


def flatten_backward(dout: np.ndarray, cache) -> np.ndarray:
    _require_cache(cache, "flatten")
    return dout.reshape(cache)


def sigmoid_forward(x: np.ndarray):
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out, out


def sigmoid_backward(dout: np.ndarray, cache) -> np.ndarray:
    _require_cache(cache, "sigmoid")
    return dout * cache * (1.0 - cache)


def residual_forward(a: np.ndarray, b: np.ndarray):
    if a.shape != b.shape:
        raise ShapeError(f"residual_add: shapes {a.shape} and {b.shape} differ")
    return a + b, a.shape


def residual_backward(dout: np.ndarray, cache):
    """The sum rule: both inputs receive the upstream gradient unchanged."""
    _require_cache(cache, "residual")
    return dout, dout.copy()
