"""Image-quality metrics: MAE, MSE, PSNR, 3D SSIM and realization-ensemble statistics.

All computations run in float64. Inputs may be arrays or :class:`Volume3D`.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import correlate1d

from .errors import ShapeError


def _arr(v) -> np.ndarray:
    return np.asarray(getattr(v, "voxels", v), dtype=np.float64)


def _pair(a, b):
    a, b = _arr(a), _arr(b)
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def _select(x, mask):
    return x if mask is None else x[np.asarray(mask, dtype=bool)]


def mae(a, b, mask=None) -> float:
    a, b = _pair(a, b)
    return float(np.mean(np.abs(_select(a - b, mask))))


def mse(a, b, mask=None) -> float:
    a, b = _pair(a, b)
    return float(np.mean(_select(a - b, mask) ** 2))


def _data_range(ref: np.ndarray, data_range) -> float:
    if data_range is None:
        data_range = float(ref.max())
        if data_range <= 0:
            raise ValueError("reference maximum is not positive; pass an explicit data_range")
    elif not data_range > 0:
        raise ValueError(f"data_range must be positive, got {data_range}")
    return float(data_range)


def psnr(pred, ref, data_range: float | None = None, mask=None) -> float:
    """``10 log10(L^2 / MSE)`` with ``L = max(ref)`` by default; ``inf`` when MSE is 0."""
    pred, ref = _pair(pred, ref)
    L = _data_range(ref, data_range)
    err = mse(pred, ref, mask)
    if err == 0:
        return float("inf")
    return float(10.0 * np.log10(L * L / err))


@dataclass
class SSIMConfig:
    k1: float = 0.01
    k2: float = 0.03
    window_size: int = 5
    sigma: float = 1.5
    data_range: float | None = None

    def __post_init__(self):
        if self.window_size < 1 or self.window_size % 2 == 0:
            raise ValueError("SSIM window size must be odd")
        if not self.sigma > 0:
            raise ValueError("SSIM sigma must be positive")


def gaussian_window_1d(size: int, sigma: float) -> np.ndarray:
    x = np.arange(size) - size // 2
    g = np.exp(-(x**2) / (2.0 * sigma**2))
    return g / g.sum()


def gaussian_window(size: int = 5, sigma: float = 1.5) -> np.ndarray:
    """Normalized 3D Gaussian window (outer product of the 1D window)."""
    g = gaussian_window_1d(size, sigma)
    return np.einsum("i,j,k->ijk", g, g, g)


def _filter_valid(x: np.ndarray, g: np.ndarray) -> np.ndarray:
    for axis in range(3):
        x = correlate1d(x, g, axis=axis, mode="constant")
    r = len(g) // 2
    return x[r:-r or None, r:-r or None, r:-r or None]


def ssim_map(pred, ref, cfg: SSIMConfig | None = None) -> np.ndarray:
    """Local SSIM at every window position that fits entirely inside the volume."""
    cfg = cfg or SSIMConfig()
    x, y = _pair(pred, ref)
    if x.ndim != 3:
        raise ShapeError("ssim3d expects 3D volumes")
    if min(x.shape) < cfg.window_size:
        raise ValueError(f"volume {x.shape} is smaller than the {cfg.window_size}^3 SSIM window")
    L = _data_range(y, cfg.data_range)
    c1 = (cfg.k1 * L) ** 2
    c2 = (cfg.k2 * L) ** 2
    g = gaussian_window_1d(cfg.window_size, cfg.sigma)

    mu_x = _filter_valid(x, g)
    mu_y = _filter_valid(y, g)
    # second moments on globally centred data limit cancellation
    xc = x - x.mean()
    yc = y - y.mean()
    mxc = _filter_valid(xc, g)
    myc = _filter_valid(yc, g)
    var_x = _filter_valid(xc * xc, g) - mxc**2
    var_y = _filter_valid(yc * yc, g) - myc**2
    cov = _filter_valid(xc * yc, g) - mxc * myc
    return ((2 * mu_x * mu_y + c1) * (2 * cov + c2)) / ((mu_x**2 + mu_y**2 + c1) * (var_x + var_y + c2))


def ssim3d(pred, ref, cfg: SSIMConfig | None = None) -> float:
    """Mean local SSIM with a Gaussian window, no padding at the borders."""
    return float(ssim_map(pred, ref, cfg).mean())


@dataclass
class EnsembleStats:
    """Voxel-wise bias / std / RMSE of K realizations against one reference."""

    bias_map: np.ndarray
    std_map: np.ndarray
    rmse_map: np.ndarray
    k: int
    mean_abs_bias: float
    mean_std: float
    mean_rmse: float

    def summary(self) -> dict:
        return {"k": self.k, "mean_abs_bias": self.mean_abs_bias, "mean_std": self.mean_std, "mean_rmse": self.mean_rmse}


def ensemble_stats(denoised, reference, mask=None) -> EnsembleStats:
    """Per-voxel mean error, Bessel-corrected std of the error, and their RMS combination.

    The std is taken over the errors ``x_k - y``, so ``rmse^2 == bias^2 + std^2``.
    """
    xs = [_arr(v) for v in denoised]
    y = _arr(reference)
    if len(xs) < 2:
        raise ValueError(f"need at least two realizations, got {len(xs)}")
    for x in xs:
        if x.shape != y.shape:
            raise ShapeError(f"realization shape {x.shape} does not match reference {y.shape}")
    err = np.stack(xs) - y
    bias = err.mean(axis=0)
    std = np.sqrt(((err - bias) ** 2).sum(axis=0) / (len(xs) - 1))
    rmse = np.sqrt(bias**2 + std**2)
    return EnsembleStats(
        bias,
        std,
        rmse,
        len(xs),
        float(np.mean(np.abs(_select(bias, mask)))),
        float(np.mean(_select(std, mask))),
        float(np.mean(_select(rmse, mask))),
    )
