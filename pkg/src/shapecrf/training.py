"""Learning the pairwise structure from predicted unaries and ground truth.

Alternates two stages over the training set:

* a pose stage that re-estimates each sample's deformable parameters by
  fitting them to the current conditional mean of that sample (a candidate
  update is kept only if it does not raise the sample's NLL, which keeps
  the reported objective monotone);
* a coupling stage that runs full-batch gradient descent on all pairwise
  factors against the summed exact NLL, with the step size halved whenever
  a step would increase the objective.

Gradients w.r.t. the unary means and inverse covariances are exposed via
``crf.nll_gradients`` for an external predictor trainer; this module only
updates the couplings.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .crf import (
    PairwiseSet,
    UnaryPrediction,
    _gaussian_core,
    _nll_gradients_core,
    nll,
)
from .errors import TrainingDivergedError
from .fitting import FitOptions, fit_deform_params
from .model import DeformParams, ShapeModel3D, pair_offsets

__all__ = [
    "TrainSample",
    "TrainOptions",
    "TrainReport",
    "train_crf",
    "dataset_nll",
    "DEFAULT_INIT_COUPLING",
]

# Isotropic coupling used when no initial pairwise set is supplied.
DEFAULT_INIT_COUPLING = 0.01


@dataclass(frozen=True)
class TrainSample:
    """One training case: predicted unaries plus ground-truth landmarks."""

    unaries: UnaryPrediction
    y_gt: np.ndarray
    id: str

    def __post_init__(self):
        y = np.asarray(self.y_gt, dtype=float).reshape(-1)
        if y.size != 2 * self.unaries.num_landmarks:
            raise ValueError(
                f"sample {self.id!r}: y_gt length {y.size} does not match "
                f"{self.unaries.num_landmarks} landmarks"
            )
        if not np.all(np.isfinite(y)):
            raise ValueError(f"sample {self.id!r}: y_gt has non-finite entries")
        y = y.copy()
        y.setflags(write=False)
        object.__setattr__(self, "y_gt", y)


@dataclass(frozen=True)
class TrainOptions:
    """Budgets and step-size control for :func:`train_crf`.

    One epoch is one outer iteration (pose stage followed by coupling
    stage). Training stops when the relative epoch NLL improvement stays
    below ``outer_rel_tol`` for ``outer_patience`` consecutive epochs, or
    at ``max_outer`` epochs.
    """

    step_size: float = 1e-3
    max_outer: int = 100
    outer_rel_tol: float = 1e-6
    outer_patience: int = 3
    pose_rounds: int = 2
    coupling_steps: int = 50
    coupling_rel_tol: float = 1e-9
    max_halvings: int = 40
    fit: FitOptions = field(default_factory=FitOptions)


@dataclass(frozen=True)
class TrainReport:
    """Objective bookkeeping. ``nll_per_epoch[0]`` is the value before any
    coupling update; later entries follow each completed epoch and are
    non-increasing."""

    nll_per_epoch: list[float]
    coupling_step_nlls: list[float]
    final_nll: float
    epochs: int
    converged: bool
    final_step_size: float


def _canonicalize_factors(factors: np.ndarray) -> np.ndarray:
    """Flip factor signs so diagonals are non-negative; leaves C unchanged."""
    out = factors.copy()
    flip0 = out[:, 0, 0] < 0
    out[flip0, 0, 0] *= -1.0
    out[flip0, 1, 0] *= -1.0
    out[out[:, 1, 1] < 0, 1, 1] *= -1.0
    out[:, 0, 1] = 0.0
    return out


class _Objective:
    """Summed NLL and factor gradients over the dataset at fixed poses."""

    def __init__(self, data, indices):
        self.data = data
        self.indices = indices

    def sample_nll(self, sample, factors, offsets_per_pair) -> float:
        cg = _gaussian_core(
            sample.unaries.inverse_covariances,
            sample.unaries.means,
            self.indices,
            factors,
            offsets_per_pair,
        )
        return nll(sample.y_gt, cg)

    def total_nll(self, factors, all_offsets) -> float:
        return sum(
            self.sample_nll(s, factors, off) for s, off in zip(self.data, all_offsets)
        )

    def factor_gradient(self, factors, all_offsets) -> np.ndarray:
        grad = np.zeros_like(factors)
        for sample, off in zip(self.data, all_offsets):
            g = _nll_gradients_core(
                sample.y_gt,
                sample.unaries.inverse_covariances,
                sample.unaries.means,
                self.indices,
                factors,
                off,
            )
            grad += g.d_pair_factors
        return grad


def _check_psd_sample(factors: np.ndarray) -> None:
    couplings = np.einsum("pab,pcb->pac", factors, factors)
    probe = couplings[:: max(1, couplings.shape[0] // 8)]
    lo = np.linalg.eigvalsh(probe)[:, 0]
    if np.any(lo < -1e-12):
        raise AssertionError("coupling lost positive semidefiniteness")


def train_crf(
    data: list[TrainSample],
    model: ShapeModel3D,
    init_pairs: PairwiseSet | None = None,
    opts: TrainOptions | None = None,
) -> tuple[PairwiseSet, list[DeformParams], TrainReport]:
    """Learn pairwise couplings by exact maximum likelihood.

    Parameters
    ----------
    data : list of TrainSample
        Samples sharing one landmark count. Processed full batch, in order;
        the result is deterministic.
    init_pairs : PairwiseSet, optional
        Starting couplings; a uniform isotropic set at
        ``DEFAULT_INIT_COUPLING`` when omitted.

    Returns
    -------
    (PairwiseSet, list[DeformParams], TrainReport)
        Trained couplings, the per-sample fitted poses, and the objective
        history.

    Raises
    ------
    TrainingDivergedError
        If the objective becomes non-finite; the exception carries the last
        finite state.
    """
    opts = opts or TrainOptions()
    if not data:
        raise ValueError("training needs at least one sample")
    n = data[0].unaries.num_landmarks
    for s in data:
        if s.unaries.num_landmarks != n:
            raise ValueError(f"sample {s.id!r} has a different landmark count")
    if model.num_landmarks != n:
        raise ValueError("model and data disagree on the landmark count")
    pairs = init_pairs or PairwiseSet.uniform_isotropic(n, DEFAULT_INIT_COUPLING)
    if pairs.num_landmarks != n:
        raise ValueError("init_pairs has the wrong landmark count")

    indices = pairs.indices
    factors = pairs.factors.copy()
    objective = _Objective(data, indices)

    def wrap(f: np.ndarray) -> PairwiseSet:
        return PairwiseSet(n, indices, _canonicalize_factors(f))

    def predicted_mean(sample: TrainSample, f, params) -> np.ndarray:
        off = pair_offsets(model, params, indices)
        cg = _gaussian_core(
            sample.unaries.inverse_covariances,
            sample.unaries.means,
            indices,
            f,
            off,
        )
        return cg.mean

    # Initial poses: fit to the plain predicted means (couplings were zero
    # while the predictor was trained, so the initial estimate is the mean).
    poses: list[DeformParams] = []
    offsets: list[np.ndarray] = []
    for sample in data:
        params, _ = fit_deform_params(
            sample.unaries.means, pairs, model, init=None, opts=opts.fit
        )
        poses.append(params)
        offsets.append(pair_offsets(model, params, indices))

    step = opts.step_size
    epoch_nlls = [objective.total_nll(factors, offsets)]
    step_nlls: list[float] = []
    if not np.isfinite(epoch_nlls[0]):
        raise TrainingDivergedError("initial NLL is not finite")
    flat_epochs = 0
    converged = False
    epoch = 0

    for epoch in range(1, opts.max_outer + 1):
        current = wrap(factors)
        # Pose stage: refit each sample's parameters to its conditional
        # mean, keeping the update only if the sample NLL does not rise.
        for m, sample in enumerate(data):
            for _ in range(opts.pose_rounds):
                estimate = predicted_mean(sample, factors, poses[m])
                cand, _ = fit_deform_params(
                    estimate, current, model, init=poses[m], opts=opts.fit
                )
                cand_off = pair_offsets(model, cand, indices)
                before = objective.sample_nll(sample, factors, offsets[m])
                after = objective.sample_nll(sample, factors, cand_off)
                if np.isfinite(after) and after <= before:
                    poses[m] = cand
                    offsets[m] = cand_off
                else:
                    break

        # Coupling stage: monotone full-batch gradient descent. The step
        # halves whenever a move would raise the objective and recovers
        # after accepted moves, never exceeding the configured size.
        current_nll = objective.total_nll(factors, offsets)
        for _ in range(opts.coupling_steps):
            grad = objective.factor_gradient(factors, offsets)
            step = min(2.0 * step, opts.step_size)
            accepted = False
            for _ in range(opts.max_halvings):
                cand = _canonicalize_factors(factors - step * grad)
                cand_nll = objective.total_nll(cand, offsets)
                if np.isfinite(cand_nll) and cand_nll <= current_nll:
                    accepted = True
                    break
                step *= 0.5
            if not accepted:
                break
            drop = current_nll - cand_nll
            factors, current_nll = cand, cand_nll
            step_nlls.append(current_nll)
            if drop <= opts.coupling_rel_tol * max(abs(current_nll), 1.0):
                break
        _check_psd_sample(factors)

        if not np.isfinite(current_nll):
            report = TrainReport(
                nll_per_epoch=epoch_nlls,
                coupling_step_nlls=step_nlls,
                final_nll=epoch_nlls[-1],
                epochs=epoch - 1,
                converged=False,
                final_step_size=step,
            )
            raise TrainingDivergedError(
                "objective became non-finite",
                last_pairs=wrap(factors),
                last_zetas=list(poses),
                report=report,
            )

        previous = epoch_nlls[-1]
        epoch_nlls.append(current_nll)
        rel = (previous - current_nll) / max(abs(previous), 1.0)
        flat_epochs = flat_epochs + 1 if rel < opts.outer_rel_tol else 0
        if flat_epochs >= opts.outer_patience:
            converged = True
            break

    report = TrainReport(
        nll_per_epoch=epoch_nlls,
        coupling_step_nlls=step_nlls,
        final_nll=epoch_nlls[-1],
        epochs=epoch,
        converged=converged,
        final_step_size=step,
    )
    return wrap(factors), list(poses), report


def dataset_nll(
    data: list[TrainSample],
    model: ShapeModel3D,
    pairs: PairwiseSet,
    poses: list[DeformParams],
) -> float:
    """Summed NLL of the dataset under per-sample poses. Empty data sums to 0."""
    if len(data) != len(poses):
        raise ValueError(f"{len(data)} samples but {len(poses)} pose entries")
    total = 0.0
    for sample, params in zip(data, poses):
        off = pair_offsets(model, params, pairs.indices)
        cg = _gaussian_core(
            sample.unaries.inverse_covariances,
            sample.unaries.means,
            pairs.indices,
            pairs.factors,
            off,
        )
        total += nll(sample.y_gt, cg)
    return total
