"""Density-map quality metrics: SSIM variants, counting, MAE and RMSE."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import FragdiffError
from .patchkit import Raster

GAMMA1 = 0.0001
GAMMA2 = 0.0009

DEFAULT_HEAD_WINDOW = 16


@dataclass(frozen=True)
class LossWeights:
    theta: float = 1.0
    eta: float = 1.0
    gamma1: float = GAMMA1
    gamma2: float = GAMMA2

    def __post_init__(self):
        if min(self.theta, self.eta, self.gamma1, self.gamma2) < 0:
            raise FragdiffError("bad-params", "loss weights must be >= 0")


def _as_array(raster: Raster | np.ndarray) -> np.ndarray:
    values = raster.values if isinstance(raster, Raster) else np.asarray(raster, dtype=np.float64)
    return values.astype(np.float64, copy=False)


def ssim(estimated, reference, gamma1: float = GAMMA1, gamma2: float = GAMMA2) -> float:
    """Global structural similarity over a whole fragment.

    Plain single-window form: means, variances and covariance are computed
    over every pixel at once, with small stabilizers in both factors.
    """
    e = _as_array(estimated)
    g = _as_array(reference)
    if e.shape != g.shape:
        raise FragdiffError("dim-mismatch", f"fragment shapes differ: {e.shape} vs {g.shape}")
    mu_e = e.mean()
    mu_g = g.mean()
    var_e = e.var()
    var_g = g.var()
    cov = ((e - mu_e) * (g - mu_g)).mean()
    numerator = (2 * mu_e * mu_g + gamma1) * (2 * cov + gamma2)
    denominator = (mu_e**2 + mu_g**2 + gamma1) * (var_e + var_g + gamma2)
    return float(numerator / denominator)


def _head_window(values: np.ndarray, row: int, col: int, size: int) -> np.ndarray:
    h, w = values.shape
    r0 = max(0, row - size // 2)
    c0 = max(0, col - size // 2)
    r1 = min(h, r0 + size)
    c1 = min(w, c0 + size)
    return values[r0:r1, c0:c1]


def issim_loss(
    estimated,
    reference,
    heads: Sequence[tuple[int, int]],
    head_window: int = DEFAULT_HEAD_WINDOW,
    gamma1: float = GAMMA1,
    gamma2: float = GAMMA2,
) -> float:
    """Mean head-centered dissimilarity: average of 1 - SSIM over per-head windows.

    Windows are clipped at fragment borders; with no heads the loss is zero.
    """
    e = _as_array(estimated)
    g = _as_array(reference)
    if e.shape != g.shape:
        raise FragdiffError("dim-mismatch", f"fragment shapes differ: {e.shape} vs {g.shape}")
    if not heads:
        return 0.0
    losses = []
    for row, col in heads:
        if not (0 <= row < e.shape[0] and 0 <= col < e.shape[1]):
            raise FragdiffError("bad-params", f"head ({row}, {col}) outside fragment {e.shape}")
        ew = _head_window(e, row, col, head_window)
        gw = _head_window(g, row, col, head_window)
        losses.append(1.0 - ssim(ew, gw, gamma1, gamma2))
    return float(np.mean(losses))


def combined_loss(
    estimated,
    reference,
    heads: Sequence[tuple[int, int]] = (),
    weights: LossWeights = LossWeights(),
    head_window: int = DEFAULT_HEAD_WINDOW,
) -> float:
    """theta * MSE + eta * head-centered dissimilarity."""
    e = _as_array(estimated)
    g = _as_array(reference)
    if e.shape != g.shape:
        raise FragdiffError("dim-mismatch", f"fragment shapes differ: {e.shape} vs {g.shape}")
    mse = float(((e - g) ** 2).mean())
    structural = issim_loss(e, g, heads, head_window, weights.gamma1, weights.gamma2)
    return weights.theta * mse + weights.eta * structural


def count(density) -> float:
    """Total mass of a density map: the sum of all pixels."""
    values = _as_array(density)
    if np.any(values < 0):
        raise FragdiffError("bad-raster", "density values must be >= 0")
    return float(values.sum())


def mae(predictions: Sequence[float], ground_truths: Sequence[float]) -> float:
    p = np.asarray(predictions, dtype=np.float64)
    g = np.asarray(ground_truths, dtype=np.float64)
    if p.shape != g.shape or p.ndim != 1 or len(p) == 0:
        raise FragdiffError("length-mismatch", f"need equal non-empty lists, got {p.shape} vs {g.shape}")
    return float(np.mean(np.abs(p - g)))


def rmse(predictions: Sequence[float], ground_truths: Sequence[float]) -> float:
    p = np.asarray(predictions, dtype=np.float64)
    g = np.asarray(ground_truths, dtype=np.float64)
    if p.shape != g.shape or p.ndim != 1 or len(p) == 0:
        raise FragdiffError("length-mismatch", f"need equal non-empty lists, got {p.shape} vs {g.shape}")
    return float(np.sqrt(np.mean((p - g) ** 2)))
