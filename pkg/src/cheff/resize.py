"""Bicubic resampling with the Catmull-Rom kernel.

Resizing is separable: for each axis a dense ``[out, in]`` weight matrix is
built and applied with two matrix products.  Sample positions use
half-pixel centres; taps falling outside the image are clamped to the
nearest edge pixel.  When shrinking, the kernel is stretched by the scale
factor so every input pixel contributes (the usual antialiased
"bicubic downsampling" of imaging libraries).  Each row of weights is
normalized to sum to one, so constant images stay constant.
"""

from __future__ import annotations

import functools

import numpy as np

from cheff.errors import ShapeError
from cheff.tensor import Tensor, as_tensor, matmul, reshape

CUBIC_A = -0.5


def cubic_kernel(x, a: float = CUBIC_A):
    x = np.abs(np.asarray(x, dtype=np.float64))
    x2, x3 = x * x, x * x * x
    near = (a + 2) * x3 - (a + 3) * x2 + 1
    far = a * x3 - 5 * a * x2 + 8 * a * x - 4 * a
    return np.where(x <= 1, near, np.where(x < 2, far, 0.0))


@functools.lru_cache(maxsize=64)
def resize_weights(in_size: int, out_size: int) -> np.ndarray:
    """``[out_size, in_size]`` interpolation matrix (float64, rows sum to 1)."""
    if in_size < 1 or out_size < 1:
        raise ShapeError(f"resize extents must be >= 1, got {in_size} -> {out_size}")
    scale = in_size / out_size
    stretch = max(scale, 1.0)
    support = 2.0 * stretch
    weights = np.zeros((out_size, in_size))
    for i in range(out_size):
        centre = (i + 0.5) * scale - 0.5
        lo = int(np.floor(centre - support)) + 1
        hi = int(np.ceil(centre + support)) - 1
        taps = np.arange(lo, hi + 1)
        w = cubic_kernel((taps - centre) / stretch)
        np.add.at(weights[i], np.clip(taps, 0, in_size - 1), w)
        weights[i] /= weights[i].sum()
    weights.setflags(write=False)
    return weights


def bicubic_resize(x, out_h: int, out_w: int) -> Tensor:
    """Resize the two trailing axes of ``x`` (e.g. ``[N,C,H,W]``); differentiable."""
    x = as_tensor(x)
    if x.ndim < 2:
        raise ShapeError(f"bicubic_resize needs at least 2 axes, got {x.shape}")
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"output size must be >= 1, got {out_h}x{out_w}")
    *lead, h, w = x.shape
    if (h, w) == (out_h, out_w):
        return x
    wh = Tensor(resize_weights(h, out_h), dtype=x.dtype)
    ww = Tensor(resize_weights(w, out_w).T, dtype=x.dtype)
    flat = reshape(x, (-1, h, w))
    y = matmul(matmul(reshape(wh, (1, out_h, h)), flat), reshape(ww, (1, w, out_w)))
    return reshape(y, tuple(lead) + (out_h, out_w))


def resize_array(x: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Numpy convenience wrapper around :func:`bicubic_resize`."""
    return bicubic_resize(Tensor(x), out_h, out_w).data
