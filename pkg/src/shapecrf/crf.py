"""Gaussian CRF over stacked 2D landmarks: energies, exact inference, NLL.

The distribution over the 2N-vector of landmark coordinates conditioned on
per-landmark predictions and a deformable-model pose is an exact
multivariate Gaussian. Its precision matrix has 2x2 block structure:

* diagonal block ``i``:   ``inv(Sigma_i) + sum_{j != i} C_ij``
* off-diagonal block ij:  ``-C_ij``

and the information vector is ``b_i = inv(Sigma_i) mu_i + sum_j C_ij mu_ij``
where ``mu_ij`` is the expected offset between landmarks ``i`` and ``j``.
The conditional mean solves ``Lambda E = b`` via a dense Cholesky
factorization, and the log-determinant is read off the factor diagonal
(``log det = 2 sum log diag(L)``).

Pairwise couplings ``C_ij`` are stored through lower-triangular factors
``L_ij`` with ``C_ij = L_ij L_ij^T``, which keeps them positive
semidefinite under unconstrained gradient updates.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from functools import cached_property

import numpy as np
import scipy.linalg

from .errors import NumericalDomainError
from .model import DeformParams, ShapeModel3D, pair_offsets

__all__ = [
    "COV_EIG_FLOOR",
    "UnaryPrediction",
    "PairwiseSet",
    "ConditionalGaussian",
    "NllGradients",
    "unary_energy",
    "pairwise_energy",
    "assemble_precision",
    "assemble_rhs",
    "conditional_gaussian",
    "conditional_gaussian_from_offsets",
    "total_energy",
    "nll",
    "nll_gradients",
    "nll_gradients_from_offsets",
]

logger = logging.getLogger(__name__)

# Smallest admissible eigenvalue of a unary covariance; near-singular
# covariances are lifted to this floor on ingestion.
COV_EIG_FLOOR = 1e-8

_SYM_TOL = 1e-12


def _min_eig_2x2(m: np.ndarray) -> np.ndarray:
    """Smallest eigenvalue of each symmetric 2x2 matrix in a (..., 2, 2) stack."""
    a, b, c = m[..., 0, 0], m[..., 0, 1], m[..., 1, 1]
    half_tr = 0.5 * (a + c)
    rad = np.sqrt((0.5 * (a - c)) ** 2 + b**2)
    return half_tr - rad


def _inv_2x2_spd(m: np.ndarray) -> np.ndarray:
    """Inverse of each symmetric 2x2 matrix in a (..., 2, 2) stack."""
    a, b, c = m[..., 0, 0], m[..., 0, 1], m[..., 1, 1]
    det = a * c - b * b
    out = np.empty_like(m)
    out[..., 0, 0] = c / det
    out[..., 1, 1] = a / det
    out[..., 0, 1] = -b / det
    out[..., 1, 0] = -b / det
    return out


@dataclass(frozen=True)
class UnaryPrediction:
    """Per-landmark mean and covariance in normalized crop coordinates.

    Covariances must be symmetric (within 1e-12); eigenvalues below the
    floor are lifted by adding a multiple of the identity (logged), so the
    stored matrices are always safely invertible.
    """

    means: np.ndarray
    covariances: np.ndarray

    def __post_init__(self):
        means = np.asarray(self.means, dtype=float)
        covs = np.asarray(self.covariances, dtype=float)
        if means.ndim != 2 or means.shape[1] != 2 or means.shape[0] < 1:
            raise ValueError(f"means must be (N, 2), got {means.shape}")
        n = means.shape[0]
        if covs.shape != (n, 2, 2):
            raise ValueError(f"covariances must be ({n}, 2, 2), got {covs.shape}")
        if not np.all(np.isfinite(means)) or not np.all(np.isfinite(covs)):
            raise ValueError("unary prediction has non-finite entries")
        asym = np.abs(covs[:, 0, 1] - covs[:, 1, 0])
        if np.any(asym > _SYM_TOL):
            raise ValueError(
                f"covariances must be symmetric within {_SYM_TOL}, "
                f"max asymmetry {asym.max():g}"
            )
        covs = covs.copy()
        covs[:, 1, 0] = covs[:, 0, 1]
        lo = _min_eig_2x2(covs)
        bad = lo < -COV_EIG_FLOOR
        if np.any(bad):
            raise ValueError(
                f"covariance for landmark(s) {np.flatnonzero(bad).tolist()} "
                "has a significantly negative eigenvalue"
            )
        deficient = lo < COV_EIG_FLOOR
        if np.any(deficient):
            shift = COV_EIG_FLOOR - lo[deficient]
            covs[deficient] += shift[:, None, None] * np.eye(2)
            logger.warning(
                "lifted %d near-singular unary covariance(s) to the %g eigenvalue floor",
                int(deficient.sum()),
                COV_EIG_FLOOR,
            )
        means = means.copy()
        means.setflags(write=False)
        covs.setflags(write=False)
        object.__setattr__(self, "means", means)
        object.__setattr__(self, "covariances", covs)

    @property
    def num_landmarks(self) -> int:
        return self.means.shape[0]

    @cached_property
    def inverse_covariances(self) -> np.ndarray:
        inv = _inv_2x2_spd(self.covariances)
        inv.setflags(write=False)
        return inv


@dataclass(frozen=True)
class PairwiseSet:
    """Coupling factors for every unordered landmark pair.

    ``indices[p] = (i, j)`` with ``i < j`` and ``factors[p]`` the 2x2
    lower-triangular factor of ``C_ij``. Pairs may be stored in any order
    but must cover all N(N-1)/2 pairs exactly once; lookups accept either
    orientation of a pair.
    """

    num_landmarks: int
    indices: np.ndarray
    factors: np.ndarray

    def __post_init__(self):
        n = int(self.num_landmarks)
        idx = np.asarray(self.indices, dtype=int)
        fac = np.asarray(self.factors, dtype=float)
        if n < 1:
            raise ValueError("need at least 1 landmark")
        expected = n * (n - 1) // 2
        if idx.shape != (expected, 2):
            raise ValueError(
                f"indices must be ({expected}, 2) for N={n}, got {idx.shape}"
            )
        if fac.shape != (expected, 2, 2):
            raise ValueError(f"factors must be ({expected}, 2, 2), got {fac.shape}")
        if not np.all(np.isfinite(fac)):
            raise ValueError("factors have non-finite entries")
        if np.any(idx[:, 0] >= idx[:, 1]) or np.any(idx < 0) or np.any(idx >= n):
            raise ValueError("pair indices must satisfy 0 <= i < j < N")
        seen = set(map(tuple, idx))
        if len(seen) != expected:
            raise ValueError("pair indices must cover every i<j exactly once")
        if np.any(fac[:, 0, 1] != 0.0):
            raise ValueError("factors must be lower triangular")
        if np.any(fac[:, 0, 0] < 0.0) or np.any(fac[:, 1, 1] < 0.0):
            raise ValueError("factor diagonals must be non-negative")
        idx = idx.copy()
        fac = fac.copy()
        idx.setflags(write=False)
        fac.setflags(write=False)
        object.__setattr__(self, "num_landmarks", n)
        object.__setattr__(self, "indices", idx)
        object.__setattr__(self, "factors", fac)
        object.__setattr__(
            self, "_pos", {(int(i), int(j)): p for p, (i, j) in enumerate(idx)}
        )

    @classmethod
    def zeros(cls, num_landmarks: int) -> "PairwiseSet":
        iu, ju = np.triu_indices(num_landmarks, k=1)
        p = iu.size
        return cls(num_landmarks, np.column_stack([iu, ju]), np.zeros((p, 2, 2)))

    @classmethod
    def uniform_isotropic(cls, num_landmarks: int, coupling: float) -> "PairwiseSet":
        """All couplings set to ``coupling * I`` (factor ``sqrt(coupling) * I``)."""
        if coupling < 0:
            raise ValueError("coupling must be non-negative")
        iu, ju = np.triu_indices(num_landmarks, k=1)
        p = iu.size
        fac = np.zeros((p, 2, 2))
        fac[:, 0, 0] = fac[:, 1, 1] = np.sqrt(coupling)
        return cls(num_landmarks, np.column_stack([iu, ju]), fac)

    @property
    def num_pairs(self) -> int:
        return self.indices.shape[0]

    def position(self, i: int, j: int) -> int:
        """Storage row of the unordered pair {i, j}."""
        key = (i, j) if i < j else (j, i)
        try:
            return self._pos[key]
        except KeyError:
            raise ValueError(f"no pair ({i}, {j}) for N={self.num_landmarks}") from None

    def factor(self, i: int, j: int) -> np.ndarray:
        return self.factors[self.position(i, j)]

    def matrix(self, i: int, j: int) -> np.ndarray:
        f = self.factor(i, j)
        return f @ f.T

    def matrices(self) -> np.ndarray:
        """All couplings ``C_ij = L_ij L_ij^T`` as a (P, 2, 2) stack."""
        return np.einsum("pab,pcb->pac", self.factors, self.factors)

    def is_zero(self) -> bool:
        return not np.any(self.factors)


@dataclass(frozen=True)
class ConditionalGaussian:
    """Exact conditional over the stacked landmark vector.

    ``mean`` is the 2N conditional mean, ``precision_factor`` the lower
    Cholesky factor L with ``L L^T`` equal to the precision matrix, and
    ``log_det_precision`` its log-determinant.
    """

    mean: np.ndarray
    precision_factor: np.ndarray
    log_det_precision: float

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=float)
        fac = np.asarray(self.precision_factor, dtype=float)
        if mean.ndim != 1 or fac.shape != (mean.size, mean.size):
            raise ValueError("inconsistent mean / factor shapes")
        if np.any(np.diag(fac) <= 0.0):
            raise ValueError("precision factor must have positive diagonal")
        mean = mean.copy()
        fac = fac.copy()
        mean.setflags(write=False)
        fac.setflags(write=False)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "precision_factor", fac)
        object.__setattr__(self, "log_det_precision", float(self.log_det_precision))

    @property
    def dim(self) -> int:
        return self.mean.size

    def precision(self) -> np.ndarray:
        return self.precision_factor @ self.precision_factor.T

    def covariance(self) -> np.ndarray:
        return scipy.linalg.cho_solve(
            (self.precision_factor, True), np.eye(self.dim), check_finite=False
        )


@dataclass(frozen=True)
class NllGradients:
    """Analytic NLL gradients for every parameter block.

    ``d_means``/``d_inv_covariances`` are the per-landmark gradients that an
    external trainer would backpropagate into the unary predictor;
    ``d_pair_factors`` drives the coupling updates; ``d_offsets`` enables
    the chain rule into pose parameters. Pair arrays follow the storage
    order of the ``PairwiseSet`` they were computed from.
    """

    d_means: np.ndarray
    d_inv_covariances: np.ndarray
    d_pair_factors: np.ndarray
    d_offsets: np.ndarray


def _check_point(y: np.ndarray, name: str) -> np.ndarray:
    y = np.asarray(y, dtype=float).reshape(-1)
    if y.size != 2 or not np.all(np.isfinite(y)):
        raise ValueError(f"{name} must be a finite 2-vector")
    return y


def unary_energy(y_i: np.ndarray, mu_i: np.ndarray, sigma_i: np.ndarray) -> float:
    """Quadratic appearance energy ``0.5 (y - mu)^T inv(Sigma) (y - mu)``."""
    y = _check_point(y_i, "y_i")
    mu = _check_point(mu_i, "mu_i")
    sigma = np.asarray(sigma_i, dtype=float)
    if sigma.shape != (2, 2) or not np.all(np.isfinite(sigma)):
        raise ValueError("sigma_i must be a finite 2x2 matrix")
    if abs(sigma[0, 1] - sigma[1, 0]) > _SYM_TOL:
        raise ValueError("sigma_i must be symmetric")
    if _min_eig_2x2(sigma) < COV_EIG_FLOOR:
        raise NumericalDomainError(
            f"sigma_i eigenvalue below the {COV_EIG_FLOOR:g} floor"
        )
    r = y - mu
    return float(0.5 * r @ _inv_2x2_spd(sigma) @ r)


def pairwise_energy(
    y_i: np.ndarray, y_j: np.ndarray, mu_ij: np.ndarray, c_ij: np.ndarray
) -> float:
    """Coupling energy ``d^T C d`` with ``d = y_i - y_j - mu_ij``.

    Invariant under translating both landmarks by the same vector.
    """
    yi = _check_point(y_i, "y_i")
    yj = _check_point(y_j, "y_j")
    mu = _check_point(mu_ij, "mu_ij")
    c = np.asarray(c_ij, dtype=float)
    if c.shape != (2, 2) or not np.all(np.isfinite(c)):
        raise ValueError("c_ij must be a finite 2x2 matrix")
    d = yi - yj - mu
    return float(d @ c @ d)


def _assemble_precision_core(
    inv_covs: np.ndarray, indices: np.ndarray, couplings: np.ndarray
) -> np.ndarray:
    n = inv_covs.shape[0]
    blocks = np.zeros((n, n, 2, 2))
    diag = np.arange(n)
    blocks[diag, diag] = inv_covs
    if indices.size:
        ii, jj = indices[:, 0], indices[:, 1]
        np.add.at(blocks, (ii, ii), couplings)
        np.add.at(blocks, (jj, jj), couplings)
        np.subtract.at(blocks, (ii, jj), couplings)
        np.subtract.at(blocks, (jj, ii), couplings)
    return blocks.transpose(0, 2, 1, 3).reshape(2 * n, 2 * n)


def _assemble_rhs_core(
    inv_covs: np.ndarray,
    means: np.ndarray,
    indices: np.ndarray,
    couplings: np.ndarray,
    offsets: np.ndarray,
) -> np.ndarray:
    b = np.einsum("nab,nb->na", inv_covs, means)
    pulls = np.einsum("pab,pb->pa", couplings, offsets)
    np.add.at(b, indices[:, 0], pulls)
    np.subtract.at(b, indices[:, 1], pulls)
    return b.reshape(-1)


def _validate_offset_matrix(offsets: np.ndarray, n: int) -> np.ndarray:
    off = np.asarray(offsets, dtype=float)
    if off.shape != (n, n, 2):
        raise ValueError(f"offsets must be ({n}, {n}, 2), got {off.shape}")
    if not np.all(np.isfinite(off)):
        raise ValueError("offsets have non-finite entries")
    if not np.array_equal(off, -off.transpose(1, 0, 2)):
        raise ValueError("offsets must be antisymmetric: offsets[j,i] == -offsets[i,j]")
    return off


def assemble_precision(unaries: UnaryPrediction, pairs: PairwiseSet) -> np.ndarray:
    """Dense 2N x 2N precision matrix of the conditional Gaussian."""
    if pairs.num_landmarks != unaries.num_landmarks:
        raise ValueError("unaries and pairs disagree on the landmark count")
    return _assemble_precision_core(
        unaries.inverse_covariances, pairs.indices, pairs.matrices()
    )


def assemble_rhs(
    unaries: UnaryPrediction, pairs: PairwiseSet, offsets: np.ndarray
) -> np.ndarray:
    """Information vector ``b`` of the conditional Gaussian.

    ``offsets`` is the full (N, N, 2) antisymmetric table of expected
    offsets; a violation of antisymmetry is rejected.
    """
    n = unaries.num_landmarks
    if pairs.num_landmarks != n:
        raise ValueError("unaries and pairs disagree on the landmark count")
    off = _validate_offset_matrix(offsets, n)
    per_pair = off[pairs.indices[:, 0], pairs.indices[:, 1]]
    return _assemble_rhs_core(
        unaries.inverse_covariances,
        unaries.means,
        pairs.indices,
        pairs.matrices(),
        per_pair,
    )


def _cholesky_lower(matrix: np.ndarray) -> np.ndarray:
    try:
        return scipy.linalg.cholesky(matrix, lower=True, check_finite=False)
    except scipy.linalg.LinAlgError:
        # Locate the first failing pivot for the error report.
        pivot = matrix.shape[0]
        for k in range(1, matrix.shape[0] + 1):
            try:
                np.linalg.cholesky(matrix[:k, :k])
            except np.linalg.LinAlgError:
                pivot = k
                break
        raise NumericalDomainError(
            f"precision matrix is not positive definite (pivot {pivot})",
            pivot_index=pivot,
        ) from None


def _gaussian_core(
    inv_covs: np.ndarray,
    means: np.ndarray,
    indices: np.ndarray,
    factors: np.ndarray,
    offsets_per_pair: np.ndarray,
) -> ConditionalGaussian:
    couplings = np.einsum("pab,pcb->pac", factors, factors)
    lam = _assemble_precision_core(inv_covs, indices, couplings)
    chol = _cholesky_lower(lam)
    if not np.any(factors):
        # Pure unary model: the mean is exactly the stacked predictions.
        mean = means.reshape(-1).copy()
    else:
        b = _assemble_rhs_core(inv_covs, means, indices, couplings, offsets_per_pair)
        mean = scipy.linalg.cho_solve((chol, True), b, check_finite=False)
    log_det = 2.0 * float(np.sum(np.log(np.diag(chol))))
    return ConditionalGaussian(mean=mean, precision_factor=chol, log_det_precision=log_det)


def conditional_gaussian_from_offsets(
    unaries: UnaryPrediction, pairs: PairwiseSet, offsets: np.ndarray
) -> ConditionalGaussian:
    """Conditional Gaussian from an explicit (N, N, 2) offset table."""
    n = unaries.num_landmarks
    if pairs.num_landmarks != n:
        raise ValueError("unaries and pairs disagree on the landmark count")
    off = _validate_offset_matrix(offsets, n)
    per_pair = off[pairs.indices[:, 0], pairs.indices[:, 1]]
    return _gaussian_core(
        unaries.inverse_covariances, unaries.means, pairs.indices, pairs.factors, per_pair
    )


def conditional_gaussian(
    unaries: UnaryPrediction,
    pairs: PairwiseSet,
    model: ShapeModel3D,
    params: DeformParams,
) -> ConditionalGaussian:
    """Exact conditional Gaussian over landmarks given pose parameters.

    Assembles the block precision and information vector, factorizes with a
    dense Cholesky, solves for the mean by forward/back substitution and
    reads the log-determinant off the factor diagonal.
    """
    n = unaries.num_landmarks
    if pairs.num_landmarks != n or model.num_landmarks != n:
        raise ValueError("inputs disagree on the landmark count")
    per_pair = pair_offsets(model, params, pairs.indices)
    return _gaussian_core(
        unaries.inverse_covariances, unaries.means, pairs.indices, pairs.factors, per_pair
    )


def total_energy(
    y: np.ndarray,
    unaries: UnaryPrediction,
    pairs: PairwiseSet,
    model: ShapeModel3D,
    params: DeformParams,
) -> float:
    """Sum of all unary and pairwise energies at configuration ``y``."""
    n = unaries.num_landmarks
    pts = np.asarray(y, dtype=float).reshape(-1)
    if pts.size != 2 * n:
        raise ValueError(f"y must have length {2 * n}, got {pts.size}")
    pts = pts.reshape(n, 2)
    r = pts - unaries.means
    unary = 0.5 * float(
        np.einsum("na,nab,nb->", r, unaries.inverse_covariances, r)
    )
    if pairs.is_zero():
        return unary
    off = pair_offsets(model, params, pairs.indices)
    d = pts[pairs.indices[:, 0]] - pts[pairs.indices[:, 1]] - off
    pair = float(np.einsum("pa,pab,pb->", d, pairs.matrices(), d))
    return unary + pair


def nll(y_gt: np.ndarray, cg: ConditionalGaussian) -> float:
    """Negative log-likelihood of ``y_gt`` under the conditional Gaussian.

    ``-0.5 log det(Lambda) + 0.5 (y - E)^T Lambda (y - E)``, evaluated
    through the stored Cholesky factor. The constant ``N log(2 pi)`` term
    is omitted throughout; add ``N * log(2 pi)`` for externally comparable
    values.
    """
    y = np.asarray(y_gt, dtype=float).reshape(-1)
    if y.size != cg.dim:
        raise ValueError(f"y_gt must have length {cg.dim}, got {y.size}")
    r = y - cg.mean
    z = cg.precision_factor.T @ r
    return float(-0.5 * cg.log_det_precision + 0.5 * (z @ z))


def _sym(m: np.ndarray) -> np.ndarray:
    return 0.5 * (m + np.swapaxes(m, -1, -2))


def _nll_gradients_core(
    y: np.ndarray,
    inv_covs: np.ndarray,
    means: np.ndarray,
    indices: np.ndarray,
    factors: np.ndarray,
    offsets_per_pair: np.ndarray,
) -> NllGradients:
    n = means.shape[0]
    cg = _gaussian_core(inv_covs, means, indices, factors, offsets_per_pair)
    e = cg.mean.reshape(n, 2)
    r = y.reshape(n, 2) - e
    cov = cg.covariance().reshape(n, 2, n, 2)

    d_means = -np.einsum("nab,nb->na", inv_covs, r)

    diag_cov = cov[np.arange(n), :, np.arange(n), :]
    k_unary = (
        0.5 * np.einsum("na,nb->nab", r, r)
        + np.einsum("na,nb->nab", e - means, r)
        - 0.5 * diag_cov
    )
    d_inv_covs = _sym(k_unary)

    ii, jj = indices[:, 0], indices[:, 1]
    couplings = np.einsum("pab,pcb->pac", factors, factors)
    dr = r[ii] - r[jj]
    de = e[ii] - e[jj]
    d_offsets = -np.einsum("pab,pb->pa", couplings, dr)

    t_blocks = cov[ii, :, ii, :] + cov[jj, :, jj, :] - cov[ii, :, jj, :] - cov[jj, :, ii, :]
    k_pair = (
        0.5 * np.einsum("pa,pb->pab", dr, dr)
        + np.einsum("pa,pb->pab", de - offsets_per_pair, dr)
        - 0.5 * t_blocks
    )
    d_factors = 2.0 * np.einsum("pab,pbc->pac", _sym(k_pair), factors)
    d_factors[:, 0, 1] = 0.0  # structural zero of the lower-triangular factor

    return NllGradients(
        d_means=d_means,
        d_inv_covariances=d_inv_covs,
        d_pair_factors=d_factors,
        d_offsets=d_offsets,
    )


def nll_gradients_from_offsets(
    y_gt: np.ndarray,
    unaries: UnaryPrediction,
    pairs: PairwiseSet,
    offsets: np.ndarray,
) -> NllGradients:
    """NLL gradients with the offset table supplied explicitly."""
    n = unaries.num_landmarks
    if pairs.num_landmarks != n:
        raise ValueError("unaries and pairs disagree on the landmark count")
    y = np.asarray(y_gt, dtype=float).reshape(-1)
    if y.size != 2 * n:
        raise ValueError(f"y_gt must have length {2 * n}, got {y.size}")
    off = _validate_offset_matrix(offsets, n)
    per_pair = off[pairs.indices[:, 0], pairs.indices[:, 1]]
    return _nll_gradients_core(
        y, unaries.inverse_covariances, unaries.means, pairs.indices, pairs.factors, per_pair
    )


def nll_gradients(
    y_gt: np.ndarray,
    unaries: UnaryPrediction,
    pairs: PairwiseSet,
    model: ShapeModel3D,
    params: DeformParams,
) -> NllGradients:
    """Analytic gradients of :func:`nll` for every parameter block.

    Differentiates through the mean solve and the log-determinant; see
    :class:`NllGradients` for the meaning of each block. Matches central
    finite differences blockwise (symmetric matrix blocks follow the
    convention ``dLoss = trace(dA G)`` for symmetric perturbations ``dA``).
    """
    n = unaries.num_landmarks
    if pairs.num_landmarks != n or model.num_landmarks != n:
        raise ValueError("inputs disagree on the landmark count")
    y = np.asarray(y_gt, dtype=float).reshape(-1)
    if y.size != 2 * n:
        raise ValueError(f"y_gt must have length {2 * n}, got {y.size}")
    per_pair = pair_offsets(model, params, pairs.indices)
    return _nll_gradients_core(
        y, unaries.inverse_covariances, unaries.means, pairs.indices, pairs.factors, per_pair
    )
