"""Collapse diagnostics: covariance spectra and alignment/uniformity metrics."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import UndefinedMetricError
from .objectives import alignment_loss, uniformity_loss

__all__ = [
    "SpectrumReport",
    "covariance",
    "spectrum",
    "embedding_metrics",
    "DEFAULT_THRESHOLDS",
]

DEFAULT_THRESHOLDS = (1e-3, 1e-2, 1e-1)


@dataclass
class SpectrumReport:
    """Covariance singular values scaled so the largest equals 1."""

    scaled_values: np.ndarray      # descending, in [0, 1]
    raw_max: float
    effective_rank: float
    threshold_counts: dict         # threshold -> count of scaled values below it
    degenerate: bool = False

    def write_csv(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("index,scaled_singular_value\n")
            for idx, val in enumerate(self.scaled_values):
                fh.write(f"{idx},{val:.12g}\n")

    def write_summary(self, path):
        summary = {
            "effective_rank": self.effective_rank,
            "raw_max": self.raw_max,
            "degenerate": self.degenerate,
            "threshold_counts": {str(t): c for t, c in self.threshold_counts.items()},
        }
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(summary, fh, indent=2, sort_keys=True)
            fh.write("\n")


def covariance(E) -> np.ndarray:
    """Mean-centered covariance (1/n) sum (e - mean)(e - mean)^T."""
    E = np.asarray(E, dtype=np.float64)
    n = E.shape[0]
    if n < 2:
        raise UndefinedMetricError("covariance needs at least 2 rows")
    centered = E - E.mean(axis=0)
    return centered.T @ centered / n


def spectrum(C, thresholds=DEFAULT_THRESHOLDS) -> SpectrumReport:
    """Sorted, max-scaled singular values of a PSD covariance.

    For PSD C the singular values coincide with the eigenvalues, so a
    symmetric eigensolver is used. Effective rank is the exponential of
    the entropy of the normalized spectrum.
    """
    C = np.asarray(C, dtype=np.float64)
    scale = max(1.0, float(np.abs(C).max()) if C.size else 1.0)
    if np.abs(C - C.T).max() > 1e-8 * scale:
        raise UndefinedMetricError("covariance must be symmetric")
    vals = np.linalg.eigvalsh(C)[::-1]
    vals = np.clip(vals, 0.0, None)
    raw_max = float(vals[0]) if vals.size else 0.0
    if raw_max <= 0.0:
        return SpectrumReport(
            scaled_values=np.zeros_like(vals),
            raw_max=0.0,
            effective_rank=0.0,
            threshold_counts={t: len(vals) for t in thresholds},
            degenerate=True,
        )
    scaled = vals / raw_max
    p = vals / vals.sum()
    nonzero = p[p > 0]
    erank = float(np.exp(-(nonzero * np.log(nonzero)).sum()))
    counts = {t: int((scaled < t).sum()) for t in thresholds}
    return SpectrumReport(
        scaled_values=scaled,
        raw_max=raw_max,
        effective_rank=erank,
        threshold_counts=counts,
    )


def embedding_metrics(E_u, E_i, pairs):
    """(alignment, uniformity_user, uniformity_item) on unit-row embeddings.

    ``pairs`` is an (n, 2) array of positive (user, item) indices. The
    definitions are shared with the training objectives so diagnostic and
    loss values agree exactly.
    """
    pairs = np.asarray(pairs)
    align = alignment_loss(E_u[pairs[:, 0]], E_i[pairs[:, 1]]).value
    unif_u = uniformity_loss(E_u).value
    unif_i = uniformity_loss(E_i).value
    return align, unif_u, unif_i
