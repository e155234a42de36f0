"""Image quality metrics: RMSE, Gaussian-window SSIM, measurable/null RMSE split."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import correlate1d

from .linops import SpaceProjectors


@dataclass(frozen=True)
class EvalResult:
    rmse: float
    ssim: float
    rmse_meas: float
    rmse_null: float


def _check_pair(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def rmse(a: np.ndarray, b: np.ndarray) -> float:
    a, b = _check_pair(a, b)
    return float(np.sqrt(np.mean((a - b) ** 2)))


def _gaussian_kernel(size: int, sigma: float) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def _filter_valid(x: np.ndarray, k: np.ndarray) -> np.ndarray:
    pad = (k.size - 1) // 2
    out = correlate1d(correlate1d(x, k, axis=0, mode="reflect"), k, axis=1, mode="reflect")
    return out[pad:-pad, pad:-pad] if pad else out


def ssim(a: np.ndarray, b: np.ndarray, data_range: float | None = None, window: int = 11,
         sigma: float = 1.5, k1: float = 0.01, k2: float = 0.03) -> float:
    """Mean structural similarity over all fully-supported 11x11 Gaussian windows.

    ``data_range`` defaults to the joint range of both images so the metric
    is symmetric; evaluation code passes the reference image's range.
    """
    a, b = _check_pair(a, b)
    if a.ndim != 2 or min(a.shape) < window:
        raise ValueError(f"SSIM needs 2-D images of side >= {window}")
    if data_range is None:
        data_range = max(a.max(), b.max()) - min(a.min(), b.min())
    if data_range <= 0:
        data_range = 1.0
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    k = _gaussian_kernel(window, sigma)
    mu_a, mu_b = _filter_valid(a, k), _filter_valid(b, k)
    var_a = _filter_valid(a * a, k) - mu_a**2
    var_b = _filter_valid(b * b, k) - mu_b**2
    cov = _filter_valid(a * b, k) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    # den vanishes only where both windows are flat and zero at underflow scale
    return float(np.mean(np.divide(num, den, out=np.ones_like(num), where=den > 0)))


def decomposed_rmse(estimate: np.ndarray, truth: np.ndarray, projectors: SpaceProjectors,
                    data_range: float | None = None) -> EvalResult:
    """RMSE, SSIM and the RMSE of the measurable and null-space components of the error."""
    estimate, truth = _check_pair(estimate, truth)
    err = estimate - truth
    meas = projectors.project_measurable(err)
    null = err - meas
    n = err.size
    if data_range is None:
        data_range = float(truth.max() - truth.min())
    return EvalResult(
        rmse=rmse(estimate, truth),
        ssim=ssim(estimate, truth, data_range=data_range),
        rmse_meas=float(np.linalg.norm(meas) / np.sqrt(n)),
        rmse_null=float(np.linalg.norm(null) / np.sqrt(n)),
    )
