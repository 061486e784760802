"""3D deformable landmark model and its weak-perspective projection.

The model is a centered mean 3D shape plus K linear deformation bases.
A rigid pose (anisotropic scale, three Euler angles) together with the
non-rigid basis coefficients determines the expected 2D offset between any
two landmarks. Translation cancels when taking offsets, so it is not part
of the pose parameters.

Conventions fixed here and relied on everywhere else:

* image frame is x-right / y-down, axes right-handed;
* rotations compose as ``R = R_roll @ R_yaw @ R_pitch`` (z, then y, then x);
* the projection is weak perspective: scale ``diag(s_x, s_y, 1)`` applied
  after rotation, then the first two coordinates are kept.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "ShapeModel3D",
    "DeformParams",
    "rotation_from_euler",
    "shape_instance",
    "expected_offset",
    "pair_offsets",
    "offset_matrix",
    "project_points",
    "synthetic_model",
]

_TWO_PI = 2.0 * math.pi


def _wrap_angle(a: float) -> float:
    """Map an angle to the canonical range (-pi, pi]."""
    w = math.fmod(a + math.pi, _TWO_PI)
    if w <= 0.0:
        w += _TWO_PI
    return w - math.pi


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class ShapeModel3D:
    """Mean 3D shape with linear deformation bases.

    Parameters
    ----------
    mean_shape : (N, 3) array
        Mean landmark positions. Centered on construction (the column-wise
        mean is subtracted; translation is unobservable to the offsets).
    bases : (K, N, 3) array
        Deformation bases. Each basis is rescaled to unit Frobenius norm on
        construction so the coefficients carry the magnitude.
    """

    mean_shape: np.ndarray
    bases: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean_shape, dtype=float)
        if mean.ndim != 2 or mean.shape[1] != 3 or mean.shape[0] < 2:
            raise ValueError(f"mean_shape must be (N>=2, 3), got {mean.shape}")
        if not np.all(np.isfinite(mean)):
            raise ValueError("mean_shape has non-finite entries")
        mean = mean - mean.mean(axis=0)

        bases = np.asarray(self.bases, dtype=float)
        if bases.size == 0:
            bases = np.zeros((0, mean.shape[0], 3))
        if bases.ndim != 3 or bases.shape[1:] != mean.shape:
            raise ValueError(
                f"bases must be (K, {mean.shape[0]}, 3), got {bases.shape}"
            )
        if not np.all(np.isfinite(bases)):
            raise ValueError("bases have non-finite entries")
        norms = np.sqrt(np.einsum("knd,knd->k", bases, bases))
        if np.any(norms == 0.0):
            raise ValueError("bases must be nonzero")
        bases = bases / norms[:, None, None]

        object.__setattr__(self, "mean_shape", _readonly(mean))
        object.__setattr__(self, "bases", _readonly(bases))

    @property
    def num_landmarks(self) -> int:
        return self.mean_shape.shape[0]

    @property
    def num_bases(self) -> int:
        return self.bases.shape[0]


@dataclass(frozen=True)
class DeformParams:
    """Rigid pose plus non-rigid coefficients.

    ``scale_x``/``scale_y`` are the per-axis weak-perspective scales (both
    strictly positive), ``pitch``/``yaw``/``roll`` the Euler angles in
    radians (wrapped to (-pi, pi] on construction), and ``shape_coeffs``
    the K basis coefficients.
    """

    scale_x: float = 1.0
    scale_y: float = 1.0
    pitch: float = 0.0
    yaw: float = 0.0
    roll: float = 0.0
    shape_coeffs: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        sx, sy = float(self.scale_x), float(self.scale_y)
        if not (math.isfinite(sx) and sx > 0.0) or not (math.isfinite(sy) and sy > 0.0):
            raise ValueError(f"scales must be finite and positive, got {sx}, {sy}")
        angles = (float(self.pitch), float(self.yaw), float(self.roll))
        if not all(math.isfinite(a) for a in angles):
            raise ValueError(f"angles must be finite, got {angles}")
        q = np.atleast_1d(np.asarray(self.shape_coeffs, dtype=float))
        if q.ndim != 1 or not np.all(np.isfinite(q)):
            raise ValueError("shape_coeffs must be a finite 1-D vector")
        object.__setattr__(self, "scale_x", sx)
        object.__setattr__(self, "scale_y", sy)
        object.__setattr__(self, "pitch", _wrap_angle(angles[0]))
        object.__setattr__(self, "yaw", _wrap_angle(angles[1]))
        object.__setattr__(self, "roll", _wrap_angle(angles[2]))
        object.__setattr__(self, "shape_coeffs", _readonly(q))

    @classmethod
    def identity(cls, num_coeffs: int = 0) -> "DeformParams":
        return cls(1.0, 1.0, 0.0, 0.0, 0.0, np.zeros(num_coeffs))


def rotation_from_euler(pitch: float, yaw: float, roll: float) -> np.ndarray:
    """Rotation matrix for the given Euler angles.

    Composition order: roll about z, applied after yaw about y, applied
    after pitch about x, i.e. ``R = R_z(roll) @ R_y(yaw) @ R_x(pitch)``.

    Returns
    -------
    (3, 3) array
        Orthonormal with determinant +1.
    """
    angles = (float(pitch), float(yaw), float(roll))
    if not all(math.isfinite(a) for a in angles):
        raise ValueError(f"angles must be finite, got {angles}")
    cp, sp = math.cos(angles[0]), math.sin(angles[0])
    cy, sy = math.cos(angles[1]), math.sin(angles[1])
    cr, sr = math.cos(angles[2]), math.sin(angles[2])
    rx = np.array([[1.0, 0.0, 0.0], [0.0, cp, -sp], [0.0, sp, cp]])
    ry = np.array([[cy, 0.0, sy], [0.0, 1.0, 0.0], [-sy, 0.0, cy]])
    rz = np.array([[cr, -sr, 0.0], [sr, cr, 0.0], [0.0, 0.0, 1.0]])
    return rz @ ry @ rx


def shape_instance(model: ShapeModel3D, coeffs: np.ndarray) -> np.ndarray:
    """3D landmark positions for the given basis coefficients.

    Row ``i`` is ``mean_shape[i] + sum_k coeffs[k] * bases[k][i]``.
    """
    q = np.atleast_1d(np.asarray(coeffs, dtype=float))
    if q.shape != (model.num_bases,):
        raise ValueError(
            f"expected {model.num_bases} coefficients, got shape {q.shape}"
        )
    if model.num_bases == 0:
        return model.mean_shape.copy()
    return model.mean_shape + np.einsum("k,knd->nd", q, model.bases)


def project_points(points: np.ndarray, params: DeformParams) -> np.ndarray:
    """Weak-perspective image of 3D points: rotate, scale per axis, keep xy."""
    rot = rotation_from_euler(params.pitch, params.yaw, params.roll)
    rotated = points @ rot.T
    return rotated[:, :2] * np.array([params.scale_x, params.scale_y])


def expected_offset(
    model: ShapeModel3D, params: DeformParams, i: int, j: int
) -> np.ndarray:
    """Expected 2D offset between landmarks ``i`` and ``j`` under ``params``.

    Computes the 3D difference of the deformed shape rows and projects it:
    ``v = diag(s_x, s_y, 1) R (x_i - x_j)``, returning ``(v_1, v_2)``.
    Antisymmetric exactly: swapping ``i`` and ``j`` negates the result.
    """
    n = model.num_landmarks
    if not (0 <= i < n and 0 <= j < n):
        raise ValueError(f"landmark indices out of range: ({i}, {j}) for N={n}")
    if i == j:
        raise ValueError("expected_offset requires two distinct landmarks")
    instance = shape_instance(model, params.shape_coeffs)
    delta = instance[i] - instance[j]
    rot = rotation_from_euler(params.pitch, params.yaw, params.roll)
    v = rot @ delta
    return np.array([params.scale_x * v[0], params.scale_y * v[1]])


def pair_offsets(
    model: ShapeModel3D, params: DeformParams, indices: np.ndarray
) -> np.ndarray:
    """Expected offsets for the (i, j) rows of ``indices``, shape (P, 2).

    Same arithmetic as :func:`expected_offset` (difference first, projection
    second), evaluated for all pairs at once.
    """
    idx = np.asarray(indices, dtype=int)
    instance = shape_instance(model, params.shape_coeffs)
    deltas = instance[idx[:, 0]] - instance[idx[:, 1]]
    rot = rotation_from_euler(params.pitch, params.yaw, params.roll)
    v = deltas @ rot.T
    return v[:, :2] * np.array([params.scale_x, params.scale_y])


def offset_matrix(model: ShapeModel3D, params: DeformParams) -> np.ndarray:
    """Full (N, N, 2) antisymmetric table of expected offsets.

    Entry ``[i, j]`` equals :func:`expected_offset` for that pair; entry
    ``[j, i]`` is the exact negation, and the diagonal is zero.
    """
    n = model.num_landmarks
    iu, ju = np.triu_indices(n, k=1)
    vals = pair_offsets(model, params, np.column_stack([iu, ju]))
    out = np.zeros((n, n, 2))
    out[iu, ju] = vals
    out[ju, iu] = -vals
    return out


def synthetic_model(num_landmarks: int, num_bases: int, seed: int) -> ShapeModel3D:
    """Random deterministic shape model for tests and experiments.

    The mean shape is centered and scaled so the RMS inter-landmark distance
    is 1; bases are orthonormalized Gaussian draws with the per-axis mean
    projected out (a translation component would be unobservable).
    """
    if num_landmarks < 2:
        raise ValueError("need at least 2 landmarks")
    if num_bases < 0:
        raise ValueError("num_bases must be >= 0")
    rng = np.random.default_rng(seed)
    mean = rng.standard_normal((num_landmarks, 3))
    mean -= mean.mean(axis=0)
    diffs = mean[:, None, :] - mean[None, :, :]
    sq = np.einsum("ijd,ijd->ij", diffs, diffs)
    msd = sq.sum() / (num_landmarks * (num_landmarks - 1))
    mean /= math.sqrt(msd)

    if num_bases > 0:
        raw = rng.standard_normal((num_bases, num_landmarks, 3))
        raw -= raw.mean(axis=1, keepdims=True)
        flat = raw.reshape(num_bases, -1).T
        q, _ = np.linalg.qr(flat)
        bases = q.T.reshape(num_bases, num_landmarks, 3)
    else:
        bases = np.zeros((0, num_landmarks, 3))
    return ShapeModel3D(mean_shape=mean, bases=bases)
