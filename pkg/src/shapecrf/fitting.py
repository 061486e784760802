"""Deformable-parameter estimation from fixed landmark positions.

Minimizes the coupling energy

    sum_{i<j} (y_i - y_j - mu_ij(params))^T C_ij (y_i - y_j - mu_ij(params))
    + lambda_q * ||q||^2

over pose and shape coefficients with a damped (Levenberg-Marquardt) least
squares iteration on the whitened residuals ``rho_ij = L_ij^T (y_i - y_j -
mu_ij)``. Scales are optimized in log space so they stay positive, and a
step is only ever accepted if it lowers the regularized objective.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import UnderdeterminedProblemError
from .model import DeformParams, ShapeModel3D, rotation_from_euler, shape_instance
from .crf import PairwiseSet

__all__ = ["FitOptions", "FitDiagnostics", "fit_deform_params", "cold_start"]

_MAX_DAMPING = 1e14
# Log-scale bounds; keeps degenerate fits (scale marching to 0 on wild
# inputs) representable instead of underflowing exp() to an invalid 0.
_LOG_SCALE_LIMIT = 30.0


@dataclass(frozen=True)
class FitOptions:
    """Tuning knobs for :func:`fit_deform_params`.

    ``lambda_q`` is the quadratic shape-coefficient regularizer (0 allowed);
    convergence is declared on a relative objective decrease below
    ``rel_obj_tol`` or a step norm below ``step_tol``, within ``max_iters``
    iterations. Jacobians are forward finite differences with step
    ``fd_step``.
    """

    lambda_q: float = 1e-3
    max_iters: int = 200
    rel_obj_tol: float = 1e-10
    step_tol: float = 1e-10
    grad_tol: float = 1e-6
    fd_step: float = 1e-7
    init_damping: float = 1e-3


@dataclass(frozen=True)
class FitDiagnostics:
    iterations: int
    objective: float
    grad_norm: float
    converged: bool


def _rms_pairwise_distance(points: np.ndarray) -> float:
    diffs = points[:, None, :] - points[None, :, :]
    sq = np.einsum("ijd,ijd->ij", diffs, diffs)
    n = points.shape[0]
    return math.sqrt(sq.sum() / (n * (n - 1)))


def cold_start(y: np.ndarray, model: ShapeModel3D) -> DeformParams:
    """Default initialization: zero angles and coefficients, isotropic scale
    matched to the RMS pairwise spread of ``y`` against the mean shape's
    identity projection."""
    pts = np.asarray(y, dtype=float).reshape(-1, 2)
    data_spread = _rms_pairwise_distance(pts)
    ref_spread = _rms_pairwise_distance(model.mean_shape[:, :2])
    scale = data_spread / ref_spread if ref_spread > 0 and data_spread > 0 else 1.0
    return DeformParams(scale, scale, 0.0, 0.0, 0.0, np.zeros(model.num_bases))


def _params_to_vector(params: DeformParams) -> np.ndarray:
    return np.concatenate(
        [
            [math.log(params.scale_x), math.log(params.scale_y)],
            [params.pitch, params.yaw, params.roll],
            params.shape_coeffs,
        ]
    )


def _vector_to_params(theta: np.ndarray) -> DeformParams:
    return DeformParams(
        math.exp(theta[0]),
        math.exp(theta[1]),
        theta[2],
        theta[3],
        theta[4],
        theta[5:].copy(),
    )


class _Residuals:
    """Whitened pairwise residuals plus the shape regularizer tail."""

    def __init__(self, y, model, pairs, active, lambda_q):
        self.pts = np.asarray(y, dtype=float).reshape(-1, 2)
        self.model = model
        self.idx = pairs.indices[active]
        self.factors = pairs.factors[active]
        self.dy = self.pts[self.idx[:, 0]] - self.pts[self.idx[:, 1]]
        self.sqrt_lambda = math.sqrt(lambda_q)
        self.num_coeffs = model.num_bases

    def __call__(self, theta: np.ndarray) -> np.ndarray:
        sx, sy = math.exp(theta[0]), math.exp(theta[1])
        rot = rotation_from_euler(theta[2], theta[3], theta[4])
        q = theta[5:]
        instance = self.model.mean_shape
        if self.num_coeffs:
            instance = instance + np.einsum("k,knd->nd", q, self.model.bases)
        deltas = instance[self.idx[:, 0]] - instance[self.idx[:, 1]]
        proj = (deltas @ rot.T)[:, :2] * np.array([sx, sy])
        d = self.dy - proj
        rho = np.einsum("pab,pa->pb", self.factors, d)
        if self.sqrt_lambda > 0.0 and self.num_coeffs:
            return np.concatenate([rho.reshape(-1), self.sqrt_lambda * q])
        return rho.reshape(-1)


def _fd_jacobian(fun, theta: np.ndarray, r0: np.ndarray, step: float) -> np.ndarray:
    jac = np.empty((r0.size, theta.size))
    for k in range(theta.size):
        probe = theta.copy()
        probe[k] += step
        jac[:, k] = (fun(probe) - r0) / step
    return jac


def fit_deform_params(
    y: np.ndarray,
    pairs: PairwiseSet,
    model: ShapeModel3D,
    init: DeformParams | None = None,
    opts: FitOptions | None = None,
) -> tuple[DeformParams, FitDiagnostics]:
    """Fit pose and shape coefficients to fixed landmark positions.

    Parameters
    ----------
    y : (2N,) or (N, 2) array
        Landmark positions the offsets should explain.
    pairs : PairwiseSet
        Coupling weights; pairs with a zero factor contribute nothing.
    init : DeformParams, optional
        Starting point; :func:`cold_start` when omitted.

    Returns
    -------
    (DeformParams, FitDiagnostics)
        The best parameters found and the iteration diagnostics. Failing to
        converge within the iteration budget is not an error; the best
        iterate is returned with ``converged=False``.
    """
    opts = opts or FitOptions()
    pts = np.asarray(y, dtype=float).reshape(-1)
    n = model.num_landmarks
    if pts.size != 2 * n:
        raise ValueError(f"y must have length {2 * n}, got {pts.size}")
    if not np.all(np.isfinite(pts)):
        raise ValueError("y has non-finite entries")
    if pairs.num_landmarks != n:
        raise ValueError("pairs and model disagree on the landmark count")
    if n < 3:
        raise UnderdeterminedProblemError(
            f"fitting needs at least 3 landmarks, got {n}"
        )
    active = np.flatnonzero(np.any(pairs.factors, axis=(1, 2)))
    if active.size == 0:
        raise UnderdeterminedProblemError("all pairwise couplings are zero")
    if opts.lambda_q < 0:
        raise ValueError("lambda_q must be non-negative")

    if init is None:
        init = cold_start(pts, model)
    elif init.shape_coeffs.size != model.num_bases:
        raise ValueError("init has the wrong number of shape coefficients")

    residuals = _Residuals(pts, model, pairs, active, opts.lambda_q)
    theta = _params_to_vector(init)
    r = residuals(theta)
    obj = float(r @ r)
    damping = opts.init_damping
    iterations = 0
    stop = False

    for iterations in range(1, opts.max_iters + 1):
        jac = _fd_jacobian(residuals, theta, r, opts.fd_step)
        grad = 2.0 * (jac.T @ r)
        hess = jac.T @ jac
        diag = np.diag(hess).copy()
        diag[diag < 1e-12] = 1e-12

        stop = False
        while True:
            try:
                step = np.linalg.solve(hess + damping * np.diag(diag), -0.5 * grad)
            except np.linalg.LinAlgError:
                step = None
            if step is not None:
                cand = theta + step
                cand[:2] = np.clip(cand[:2], -_LOG_SCALE_LIMIT, _LOG_SCALE_LIMIT)
                r_cand = residuals(cand)
                obj_cand = float(r_cand @ r_cand)
                if np.isfinite(obj_cand) and obj_cand < obj:
                    rel_drop = (obj - obj_cand) / max(obj, 1e-300)
                    theta, r, obj = cand, r_cand, obj_cand
                    damping = max(damping / 3.0, 1e-12)
                    if rel_drop < opts.rel_obj_tol or np.linalg.norm(step) < opts.step_tol:
                        stop = True
                    break
            damping *= 2.0
            if damping > _MAX_DAMPING:
                # No improving step exists at any damping: stationary point
                # (or numerically flat); keep the current iterate.
                stop = True
                break
        if stop:
            break

    jac = _fd_jacobian(residuals, theta, r, opts.fd_step)
    grad = 2.0 * (jac.T @ r)
    grad_norm = float(np.linalg.norm(grad))
    hit_budget = iterations >= opts.max_iters and not stop
    converged = (not hit_budget) and grad_norm <= opts.grad_tol

    return _vector_to_params(theta), FitDiagnostics(
        iterations=iterations,
        objective=obj,
        grad_norm=grad_norm,
        converged=converged,
    )
