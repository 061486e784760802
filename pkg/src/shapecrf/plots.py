"""Figure rendering for evaluation reports.

Uses the Agg backend so figures render headless; written PNGs carry fixed
metadata to keep repeated runs byte-identical.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .evaluation import EvalReport

__all__ = ["save_ced_figure", "save_nme_histogram"]

_PNG_METADATA = {"Software": "shapecrf"}


def save_ced_figure(report: EvalReport, path) -> None:
    fig, ax = plt.subplots(figsize=(5.0, 3.75))
    ax.plot(report.ced.thresholds, report.ced.fractions, lw=1.8)
    ax.axvline(report.threshold, color="0.6", ls="--", lw=0.9)
    ax.set_xlim(0.0, float(report.ced.thresholds[-1]))
    ax.set_ylim(0.0, 1.02)
    ax.set_xlabel("NME threshold")
    ax.set_ylabel("fraction of samples")
    ax.set_title(
        f"CED  (AUC@{report.threshold:g} = {report.auc:.3f}, "
        f"FR = {report.failure_rate:.3f})"
    )
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=150, metadata=_PNG_METADATA)
    plt.close(fig)


def save_nme_histogram(report: EvalReport, path, bins: int = 40) -> None:
    errors = np.asarray(report.per_sample_nme)
    fig, ax = plt.subplots(figsize=(5.0, 3.75))
    upper = max(float(errors.max()), report.threshold) * 1.05
    ax.hist(errors, bins=np.linspace(0.0, upper, bins + 1), color="#4878d0")
    ax.axvline(report.threshold, color="0.4", ls="--", lw=0.9)
    ax.set_xlabel("per-sample NME")
    ax.set_ylabel("count")
    ax.set_title(f"NME distribution (mean = {errors.mean():.4f})")
    fig.tight_layout()
    fig.savefig(path, dpi=150, metadata=_PNG_METADATA)
    plt.close(fig)
