"""Sources of per-landmark predictions.

Two producers live here: moment extraction from non-negative heatmaps
(mean and covariance of the normalized map, in crop coordinates with a
pixel-center convention), and a synthetic-data generator that projects a
shape model at random poses and perturbs the resulting ground truth into
noisy, optionally corrupted, unary predictions. The generator is the test
bed standing in for a learned predictor and real datasets.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .crf import COV_EIG_FLOOR, UnaryPrediction
from .model import DeformParams, ShapeModel3D, project_points, shape_instance
from .training import TrainSample

__all__ = [
    "Heatmap",
    "SynthSpec",
    "GeneratedSample",
    "moments_from_heatmap",
    "synth_generate",
]

_PLACEMENT_RETRIES = 100


@dataclass(frozen=True)
class Heatmap:
    """Non-negative W x H map; ``values[k, l]`` covers the pixel whose
    center is at ``((k + 0.5) / W, (l + 0.5) / H)`` in crop coordinates."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim != 2 or v.shape[0] < 1 or v.shape[1] < 1:
            raise ValueError(f"values must be a 2-D map, got shape {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("heatmap has non-finite values")
        if np.any(v < 0):
            raise ValueError("heatmap values must be non-negative")
        if not np.any(v > 0):
            raise ValueError("heatmap must contain a strictly positive value")
        v = v.copy()
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def width(self) -> int:
        return self.values.shape[0]

    @property
    def height(self) -> int:
        return self.values.shape[1]


def moments_from_heatmap(
    heatmap: Heatmap, floor: float = COV_EIG_FLOOR
) -> tuple[np.ndarray, np.ndarray]:
    """Mean and covariance of the heatmap treated as a density.

    The map is normalized to sum 1 and first/second moments are taken over
    pixel centers; ``floor * I`` is added to the covariance so it is always
    safely positive definite. Invariant to positive rescaling of the map.
    """
    if floor < 0:
        raise ValueError("floor must be non-negative")
    w = heatmap.values / heatmap.values.sum()
    xs = (np.arange(heatmap.width) + 0.5) / heatmap.width
    ys = (np.arange(heatmap.height) + 0.5) / heatmap.height
    wx = w.sum(axis=1)
    wy = w.sum(axis=0)
    mu = np.array([wx @ xs, wy @ ys])
    dx = xs - mu[0]
    dy = ys - mu[1]
    sxx = wx @ (dx * dx)
    syy = wy @ (dy * dy)
    sxy = dx @ w @ dy
    sigma = np.array([[sxx, sxy], [sxy, syy]]) + floor * np.eye(2)
    return mu, sigma


@dataclass(frozen=True)
class SynthSpec:
    """Configuration of the synthetic sample generator.

    Poses are drawn uniformly from the given ranges, shape coefficients
    from a zero-mean Gaussian with ``q_sigma`` scale, and the drawn scales
    are multiplied by ``base_scale`` so the projected shape fits the unit
    crop. A ``corrupt_fraction`` subset of landmarks per sample gets a bias
    of magnitude ``corrupt_bias`` in a random direction and a covariance
    inflated by ``corrupt_cov_scale``.
    """

    num_samples: int
    seed: int
    noise_sigma: float = 0.02
    corrupt_fraction: float = 0.0
    corrupt_bias: float = 0.15
    corrupt_cov_scale: float = 100.0
    pitch_range: tuple[float, float] = (-0.3, 0.3)
    yaw_range: tuple[float, float] = (-0.5, 0.5)
    roll_range: tuple[float, float] = (-0.3, 0.3)
    scale_range: tuple[float, float] = (0.8, 1.3)
    q_sigma: float = 0.1
    base_scale: float = 0.2

    def __post_init__(self):
        if self.num_samples < 0:
            raise ValueError("num_samples must be non-negative")
        if self.noise_sigma < 0 or self.q_sigma < 0:
            raise ValueError("noise_sigma and q_sigma must be non-negative")
        if not 0.0 <= self.corrupt_fraction <= 1.0:
            raise ValueError("corrupt_fraction must be in [0, 1]")
        if self.corrupt_cov_scale < 1.0:
            raise ValueError("corrupt_cov_scale must be >= 1")
        for name in ("pitch_range", "yaw_range", "roll_range", "scale_range"):
            lo, hi = getattr(self, name)
            if not (math.isfinite(lo) and math.isfinite(hi) and lo <= hi):
                raise ValueError(f"{name} must be a well-ordered finite interval")
        if self.scale_range[0] <= 0:
            raise ValueError("scales must be positive")
        if self.base_scale <= 0:
            raise ValueError("base_scale must be positive")


@dataclass(frozen=True)
class GeneratedSample:
    sample: TrainSample
    true_params: DeformParams
    bbox: tuple[float, float]


def _draw_params(rng: np.random.Generator, spec: SynthSpec, num_bases: int) -> DeformParams:
    sx = spec.base_scale * rng.uniform(*spec.scale_range)
    sy = spec.base_scale * rng.uniform(*spec.scale_range)
    pitch = rng.uniform(*spec.pitch_range)
    yaw = rng.uniform(*spec.yaw_range)
    roll = rng.uniform(*spec.roll_range)
    q = spec.q_sigma * rng.standard_normal(num_bases)
    return DeformParams(sx, sy, pitch, yaw, roll, q)


def synth_generate(model: ShapeModel3D, spec: SynthSpec) -> list[GeneratedSample]:
    """Generate synthetic training samples from the shape model.

    Each sample projects the model at a random pose, centers the landmarks
    at (0.5, 0.5) in the unit crop (rejecting and redrawing poses whose
    landmarks escape it), then forms the unary prediction by adding
    isotropic Gaussian noise to the ground truth. Deterministic given the
    seed; every sample has its own generator stream derived from
    ``(seed, sample index)``.
    """
    n = model.num_landmarks
    out: list[GeneratedSample] = []
    var = max(spec.noise_sigma**2, COV_EIG_FLOOR)
    for index in range(spec.num_samples):
        rng = np.random.default_rng([spec.seed, index])
        for attempt in range(_PLACEMENT_RETRIES + 1):
            if attempt == _PLACEMENT_RETRIES:
                raise RuntimeError(
                    f"sample {index}: landmarks escaped the unit crop "
                    f"{_PLACEMENT_RETRIES} times; lower base_scale or the ranges"
                )
            params = _draw_params(rng, spec, model.num_bases)
            projected = project_points(
                shape_instance(model, params.shape_coeffs), params
            )
            gt = projected - projected.mean(axis=0) + 0.5
            if np.all((gt >= 0.0) & (gt <= 1.0)):
                break

        means = gt + spec.noise_sigma * rng.standard_normal((n, 2))
        covs = np.tile(var * np.eye(2), (n, 1, 1))
        num_corrupt = int(round(spec.corrupt_fraction * n))
        if num_corrupt > 0:
            chosen = rng.choice(n, size=num_corrupt, replace=False)
            angles = rng.uniform(0.0, 2.0 * math.pi, size=num_corrupt)
            means[chosen] += spec.corrupt_bias * np.column_stack(
                [np.cos(angles), np.sin(angles)]
            )
            covs[chosen] *= spec.corrupt_cov_scale
        unaries = UnaryPrediction(means=means, covariances=covs)
        sample = TrainSample(
            unaries=unaries, y_gt=gt.reshape(-1), id=f"synth-{index:04d}"
        )
        width = float(gt[:, 0].max() - gt[:, 0].min())
        height = float(gt[:, 1].max() - gt[:, 1].min())
        out.append(
            GeneratedSample(sample=sample, true_params=params, bbox=(width, height))
        )
    return out
