"""Exception types shared across the package.

Plain ``ValueError`` is used for ordinary argument validation; the classes
here mark failures that callers may want to handle separately.
"""

from __future__ import annotations


class NumericalDomainError(ArithmeticError):
    """A numerically required property does not hold (e.g. a matrix that
    must be positive definite fails its Cholesky factorization).

    ``pivot_index`` is the first failing pivot when the error comes from a
    factorization, otherwise ``None``.
    """

    def __init__(self, message: str, pivot_index: int | None = None):
        super().__init__(message)
        self.pivot_index = pivot_index


class UnderdeterminedProblemError(ValueError):
    """An optimization problem has fewer effective constraints than
    unknowns and no meaningful solution."""


class TrainingDivergedError(RuntimeError):
    """Training produced a non-finite objective.

    Carries the last finite state so callers can inspect or resume:
    ``last_pairs``, ``last_zetas`` and ``report`` mirror the normal return
    values of ``train_crf`` up to the point of failure.
    """

    def __init__(self, message: str, last_pairs=None, last_zetas=None, report=None):
        super().__init__(message)
        self.last_pairs = last_pairs
        self.last_zetas = last_zetas
        self.report = report
