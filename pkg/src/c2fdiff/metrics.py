"""Compute accounting and distribution metrics."""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from ._validation import check_same_shape


@dataclass(frozen=True)
class CostModel:
    """Per-evaluation MACs, scaled by pixel count relative to the base resolution."""

    base_resolution: tuple[int, int]
    base_macs_per_step: float = 1.0

    def __post_init__(self):
        h, w = self.base_resolution
        if h < 1 or w < 1 or not self.base_macs_per_step > 0:
            raise ValueError("cost model needs a positive base resolution and MACs")

    def _exact(self, resolution) -> Fraction:
        h, w = resolution
        h0, w0 = self.base_resolution
        return Fraction(self.base_macs_per_step) * Fraction(int(h) * int(w), int(h0) * int(w0))

    def cost(self, resolution) -> float:
        return float(self._exact(resolution))


@dataclass(frozen=True)
class SamplingPlan:
    """Ordered ``(step_count, (H, W))`` stages."""

    stages: tuple

    def __post_init__(self):
        stages = tuple((int(c), (int(r[0]), int(r[1]))) for c, r in self.stages)
        for count, (h, w) in stages:
            if count < 0 or h < 1 or w < 1:
                raise ValueError(f"invalid stage {(count, (h, w))}")
        object.__setattr__(self, "stages", stages)

    @classmethod
    def c2f(cls, base_resolution, low_factor: int, t_c_steps: int, t_f_steps: int):
        h, w = base_resolution
        return cls(((t_c_steps, (h // low_factor, w // low_factor)), (t_f_steps, (h, w))))


@dataclass(frozen=True)
class CostReport:
    total_macs: float
    relative_to_reference: float
    reduction_percent: float

    def as_row(self) -> dict:
        return {
            "total_macs": self.total_macs,
            "relative_macs": self.relative_to_reference,
            "reduction_percent": self.reduction_percent,
        }


def relative_macs(plan: SamplingPlan, reference_steps: int, model: CostModel) -> CostReport:
    """Cost of ``plan`` relative to ``reference_steps`` evaluations at base resolution.

    Totals are accumulated as exact fractions and rounded once.
    """
    if not plan.stages:
        raise ValueError("sampling plan is empty")
    if reference_steps < 1:
        raise ValueError("reference_steps must be >= 1")
    total = sum((count * model._exact(res) for count, res in plan.stages), Fraction(0))
    ref = reference_steps * model._exact(model.base_resolution)
    rel = total / ref
    return CostReport(float(total), float(rel), float(100 * (1 - rel)))


def frechet_gaussian_distance(mean_a, cov_diag_a, mean_b, cov_diag_b) -> float:
    """Frechet distance between two diagonal Gaussians."""
    mean_a, mean_b = np.asarray(mean_a, float).ravel(), np.asarray(mean_b, float).ravel()
    va, vb = np.asarray(cov_diag_a, float).ravel(), np.asarray(cov_diag_b, float).ravel()
    if not (mean_a.shape == mean_b.shape == va.shape == vb.shape):
        raise ValueError("dimension mismatch between Gaussian parameters")
    if np.any(va < 0) or np.any(vb < 0):
        raise ValueError("variances must be non-negative")
    return float(np.sum((mean_a - mean_b) ** 2) + np.sum((np.sqrt(va) - np.sqrt(vb)) ** 2))


def _psd_sqrt(m: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh(0.5 * (m + m.T))
    return (vecs * np.sqrt(np.clip(vals, 0.0, None))) @ vecs.T


def frechet_gaussian_distance_full(mean_a, cov_a, mean_b, cov_b) -> float:
    """Full-covariance Frechet distance, for dimensions up to 256.

    Uses ``tr(sqrt(sqrt(A) B sqrt(A)))`` so every square root is of a
    symmetric PSD matrix.
    """
    mean_a, mean_b = np.asarray(mean_a, float).ravel(), np.asarray(mean_b, float).ravel()
    cov_a, cov_b = np.asarray(cov_a, float), np.asarray(cov_b, float)
    d = mean_a.size
    if d > 256:
        raise ValueError("full-covariance distance is limited to d <= 256")
    if mean_b.size != d or cov_a.shape != (d, d) or cov_b.shape != (d, d):
        raise ValueError("dimension mismatch between Gaussian parameters")
    root_a = _psd_sqrt(cov_a)
    cross = _psd_sqrt(root_a @ cov_b @ root_a)
    value = np.sum((mean_a - mean_b) ** 2) + np.trace(cov_a) + np.trace(cov_b) - 2 * np.trace(cross)
    return float(max(value, 0.0))


def fit_gaussian(batch) -> tuple[np.ndarray, np.ndarray]:
    """Per-coordinate sample mean and unbiased variance of a batch."""
    x = np.asarray(batch, dtype=np.float64)
    if x.ndim < 1 or x.shape[0] < 2:
        raise ValueError("fit_gaussian needs at least two samples")
    x = x.reshape(x.shape[0], -1)
    return x.mean(axis=0), x.var(axis=0, ddof=1)


def l2_batch(a, b) -> float:
    """Per-element mean squared difference over the whole batch."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    check_same_shape(a, b)
    return float(np.mean((a - b) ** 2))


def frechet_to_target(samples, target) -> float:
    """Diagonal Frechet distance between sample moments and a mixture's exact moments."""
    mean, var = fit_gaussian(samples)
    tmean, tvar = target.moments()
    return frechet_gaussian_distance(mean, var, tmean, tvar)
