"""Landmark accuracy metrics: NME, cumulative error curve, AUC, failure rate.

NME is the mean point-to-point error normalized by the geometric mean of
the ground-truth bounding box sides. The cumulative error distribution
(CED) counts, for each threshold on a uniform grid, the fraction of
samples at or below it; AUC is the trapezoidal area under the CED up to a
threshold, divided by that threshold so a perfect predictor scores 1.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "DEFAULT_FAILURE_THRESHOLD",
    "DEFAULT_CED_STEPS",
    "CedCurve",
    "EvalReport",
    "nme",
    "ced",
    "auc",
    "failure_rate",
    "build_report",
]

DEFAULT_FAILURE_THRESHOLD = 0.07
DEFAULT_CED_STEPS = 701


def nme(pred: np.ndarray, gt: np.ndarray, bbox_w: float, bbox_h: float) -> float:
    """Mean landmark error normalized by ``sqrt(bbox_w * bbox_h)``."""
    if not (bbox_w > 0 and bbox_h > 0):
        raise ValueError(f"bbox sides must be positive, got {bbox_w} x {bbox_h}")
    p = np.asarray(pred, dtype=float).reshape(-1, 2)
    g = np.asarray(gt, dtype=float).reshape(-1, 2)
    if p.shape != g.shape or p.shape[0] < 1:
        raise ValueError(f"prediction {p.shape} and ground truth {g.shape} mismatch")
    d = math.sqrt(bbox_w * bbox_h)
    return float(np.mean(np.linalg.norm(p - g, axis=1)) / d)


@dataclass(frozen=True)
class CedCurve:
    thresholds: np.ndarray
    fractions: np.ndarray

    def pairs(self) -> list[tuple[float, float]]:
        return [(float(t), float(f)) for t, f in zip(self.thresholds, self.fractions)]


def ced(nmes, grid_max: float, grid_steps: int) -> CedCurve:
    """Cumulative error distribution on a uniform threshold grid.

    ``fractions[k]`` is the fraction of samples with error at or below
    ``thresholds[k]``; ties count as success.
    """
    errors = np.asarray(nmes, dtype=float).reshape(-1)
    if errors.size == 0:
        raise ValueError("ced needs at least one error value")
    if not np.all(np.isfinite(errors)):
        raise ValueError("error values must be finite")
    if grid_steps < 2:
        raise ValueError("grid_steps must be at least 2")
    if grid_max <= 0:
        raise ValueError("grid_max must be positive")
    thresholds = np.linspace(0.0, grid_max, grid_steps)
    fractions = (errors[None, :] <= thresholds[:, None]).mean(axis=1)
    return CedCurve(thresholds=thresholds, fractions=fractions)


def auc(curve: CedCurve, threshold: float) -> float:
    """Trapezoidal area under the CED up to ``threshold``, normalized by it.

    ``threshold`` must lie inside the curve's grid (and be positive). When
    it coincides with a grid point the uniform-grid trapezoid weights are
    used directly, which makes an all-ones curve score exactly 1.0.
    """
    t = np.asarray(curve.thresholds, dtype=float)
    f = np.asarray(curve.fractions, dtype=float)
    if not threshold > 0:
        raise ValueError("threshold must be positive")
    span = t[-1] - t[0]
    if threshold < t[0] - 1e-12 * span or threshold > t[-1] + 1e-12 * span:
        raise ValueError(
            f"threshold {threshold} outside the curve grid [{t[0]}, {t[-1]}]"
        )
    k = int(np.searchsorted(t, threshold + 1e-12 * span) - 1)
    k = max(0, min(k, t.size - 1))
    on_grid = abs(t[k] - threshold) <= 1e-12 * span
    steps = np.diff(t)
    uniform = np.all(np.abs(steps - steps[0]) <= 1e-12 * span)
    if on_grid and uniform and k >= 1:
        weight = 0.5 * (f[0] + f[k]) + float(f[1:k].sum())
        return float(weight / k)
    area = float(np.trapz(f[: k + 1], t[: k + 1]))
    if threshold > t[k]:
        frac_at = float(np.interp(threshold, t, f))
        area += 0.5 * (f[k] + frac_at) * (threshold - t[k])
    return area / threshold


def failure_rate(nmes, threshold: float = DEFAULT_FAILURE_THRESHOLD) -> float:
    """Fraction of samples with error strictly above ``threshold``."""
    errors = np.asarray(nmes, dtype=float).reshape(-1)
    if errors.size == 0:
        raise ValueError("failure_rate needs at least one error value")
    return float(np.mean(errors > threshold))


@dataclass(frozen=True)
class EvalReport:
    per_sample_nme: list[float]
    auc: float
    failure_rate: float
    ced: CedCurve
    threshold: float


def build_report(
    nmes,
    grid_max: float = DEFAULT_FAILURE_THRESHOLD,
    grid_steps: int = DEFAULT_CED_STEPS,
    threshold: float = DEFAULT_FAILURE_THRESHOLD,
) -> EvalReport:
    """Bundle the metrics; AUC is computed from the report's own CED."""
    curve = ced(nmes, grid_max, grid_steps)
    return EvalReport(
        per_sample_nme=[float(v) for v in np.asarray(nmes, dtype=float).reshape(-1)],
        auc=auc(curve, threshold),
        failure_rate=failure_rate(nmes, threshold),
        ced=curve,
        threshold=float(threshold),
    )
