"""Reconstruction metrics (MSE, PSNR, SSIM) and distribution metrics."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from cheff.errors import ShapeError
from cheff.resize import resize_array

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1, SSIM_K2 = 0.01, 0.03


@dataclass(frozen=True)
class ImagePair:
    reference: np.ndarray
    candidate: np.ndarray

    def __post_init__(self):
        ref = np.asarray(self.reference, dtype=np.float64)
        cand = np.asarray(self.candidate, dtype=np.float64)
        if ref.shape != cand.shape:
            raise ShapeError(f"image shapes differ: {ref.shape} vs {cand.shape}")
        if ref.size == 0:
            raise ShapeError("empty image pair")
        for name, arr in (("reference", ref), ("candidate", cand)):
            if not np.all(np.isfinite(arr)) or arr.min() < 0.0 or arr.max() > 1.0:
                raise ValueError(f"{name} values must lie in [0, 1]")
        object.__setattr__(self, "reference", ref)
        object.__setattr__(self, "candidate", cand)


def mse(p: ImagePair) -> float:
    d = p.reference - p.candidate
    return float(np.mean(d * d))


def psnr(p: ImagePair, peak: float = 1.0) -> float:
    """10·log10(peak²/mse); identical images give ``math.inf``."""
    m = mse(p)
    if m == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / m)


def psnr_from_mse(m: float, peak: float = 1.0) -> float:
    return math.inf if m == 0.0 else 10.0 * math.log10(peak * peak / m)


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return g / g.sum()


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    rows = sliding_window_view(img, g.size, axis=-2) @ g
    return sliding_window_view(rows, g.size, axis=-1) @ g


def _as_planes(a: np.ndarray) -> np.ndarray:
    if a.ndim == 2:
        return a[None]
    if a.ndim == 3:
        return a
    raise ShapeError(f"ssim expects [H,W] or [C,H,W], got {a.shape}")


def ssim(p: ImagePair) -> float:
    """Mean SSIM over all valid 11×11 Gaussian-window positions (peak 1)."""
    x, y = _as_planes(p.reference), _as_planes(p.candidate)
    if min(x.shape[-2:]) < SSIM_WINDOW:
        raise ShapeError(f"ssim needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {x.shape[-2:]}")
    g = gaussian_window()
    c1, c2 = SSIM_K1 ** 2, SSIM_K2 ** 2
    mx, my = _filter_valid(x, g), _filter_valid(y, g)
    sxx = _filter_valid(x * x, g) - mx * mx
    syy = _filter_valid(y * y, g) - my * my
    sxy = _filter_valid(x * y, g) - mx * my
    num = (2 * mx * my + c1) * (2 * sxy + c2)
    den = (mx * mx + my * my + c1) * (sxx + syy + c2)
    return float(np.mean(num / den))


@dataclass(frozen=True)
class PairMetrics:
    mse: float
    psnr_db: float
    ssim: float


def pair_metrics(p: ImagePair) -> PairMetrics:
    return PairMetrics(mse(p), psnr(p), ssim(p))


def aggregate(per_image: Sequence[PairMetrics]) -> PairMetrics:
    """Arithmetic mean of per-image metrics (PSNR averaged in dB)."""
    if not per_image:
        raise ValueError("nothing to aggregate")
    return PairMetrics(
        float(np.mean([m.mse for m in per_image])),
        float(np.mean([m.psnr_db for m in per_image])),
        float(np.mean([m.ssim for m in per_image])),
    )


# -- distribution metrics ----------------------------------------------
@dataclass(frozen=True)
class FeatureStats:
    mean: np.ndarray
    cov: np.ndarray
    n: int

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64).reshape(-1)
        cov = np.atleast_2d(np.asarray(self.cov, dtype=np.float64))
        if cov.shape != (mean.size, mean.size):
            raise ShapeError(f"covariance {cov.shape} does not match mean of length {mean.size}")
        if not np.allclose(cov, cov.T, rtol=0.0, atol=1e-10):
            raise ValueError("covariance must be symmetric")
        if self.n < 2:
            raise ValueError("feature statistics need at least two samples")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)

    @property
    def dim(self) -> int:
        return self.mean.size


def _features(features, name: str = "features") -> np.ndarray:
    f = np.asarray(features, dtype=np.float64)
    if f.ndim == 1:
        f = f[:, None]
    if f.ndim != 2:
        raise ShapeError(f"{name} must be a list of vectors, got shape {f.shape}")
    return f


def feature_stats(features) -> FeatureStats:
    f = _features(features)
    if f.shape[0] < 2:
        raise ValueError("feature_stats needs at least two vectors")
    mu = f.mean(axis=0)
    d = f - mu
    cov = d.T @ d / (f.shape[0] - 1)
    return FeatureStats(mu, (cov + cov.T) / 2.0, f.shape[0])


def psd_sqrt(m: np.ndarray) -> np.ndarray:
    """Square root of a symmetric PSD matrix with negative eigenvalues clipped."""
    w, v = np.linalg.eigh((m + m.T) / 2.0)
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def frechet_distance(a: FeatureStats, b: FeatureStats) -> float:
    """‖μa−μb‖² + Tr(Σa + Σb − 2(ΣaΣb)^½).

    The cross term uses Tr((ΣaΣb)^½) = Tr((Σa^½ Σb Σa^½)^½), which keeps
    the square root on a symmetric PSD matrix.
    """
    if a.dim != b.dim:
        raise ShapeError(f"feature dims differ: {a.dim} vs {b.dim}")
    diff = a.mean - b.mean
    ra = psd_sqrt(a.cov)
    cross = np.trace(psd_sqrt(ra @ b.cov @ ra))
    val = float(diff @ diff + np.trace(a.cov) + np.trace(b.cov) - 2.0 * cross)
    return max(val, 0.0)


def polynomial_kernel(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    return (x @ y.T / x.shape[1] + 1.0) ** 3


def kernel_mmd(feat_a, feat_b) -> float:
    """Unbiased MMD² with the cubic polynomial kernel.

    Within-set terms exclude the diagonal.  With equal set sizes the
    cross term also drops its diagonal (the U-statistic), so two identical
    lists give exactly zero; otherwise the full cross mean is used.
    """
    x, y = _features(feat_a, "feat_a"), _features(feat_b, "feat_b")
    if x.shape[1] != y.shape[1]:
        raise ShapeError(f"feature dims differ: {x.shape[1]} vs {y.shape[1]}")
    m, n = x.shape[0], y.shape[0]
    if m < 2 or n < 2:
        raise ValueError("kernel_mmd needs at least two vectors per side")
    kxx, kyy, kxy = polynomial_kernel(x, x), polynomial_kernel(y, y), polynomial_kernel(x, y)
    txx = (kxx.sum() - np.trace(kxx)) / (m * (m - 1))
    tyy = (kyy.sum() - np.trace(kyy)) / (n * (n - 1))
    if m == n:
        txy = (kxy.sum() - np.trace(kxy)) / (m * (m - 1))
    else:
        txy = kxy.mean()
    return float(txx + tyy - 2.0 * txy)


def pixel_features(images, size: int = 8) -> np.ndarray:
    """Downsampled raw pixels as a stand-in feature map, ``[N, size*size]``."""
    out = [resize_array(np.asarray(im, dtype=np.float64).reshape(im.shape[-2:]), size, size).ravel()
           for im in images]
    return np.stack(out)
