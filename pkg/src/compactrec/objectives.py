"""Loss functions and their analytic gradients.

Every function takes already-gathered embedding rows (or a d x n matrix of
unit columns for the coding-rate family) and returns a :class:`LossResult`
whose ``grads`` dict is keyed by input name. Scatter back into full tables
is the caller's job. All gradients here are validated against central
finite differences in the test suite.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .errors import NumericalDomainError, UndefinedMetricError

__all__ = [
    "LossResult",
    "RateParams",
    "bpr_loss",
    "infonce_loss",
    "alignment_loss",
    "uniformity_loss",
    "logdet_psd",
    "coding_rate",
    "per_cluster_coding_rate",
    "compactness_loss",
    "ncl_total",
]

_TRACE_TOL = 1e-12


@dataclass
class LossResult:
    """Scalar loss value plus gradients keyed by input name."""

    value: float
    grads: dict = field(default_factory=dict)


@dataclass(frozen=True)
class RateParams:
    """Hyperparameters shared by the rate/contrastive objectives."""

    epsilon_sq: float = 0.05   # squared distortion of the rate term
    alpha: float = 0.5         # compactness weight in the total loss
    tau: float = 0.2           # contrastive temperature
    lam: float = 1.0           # baseline alignment/uniformity trade-off

    def __post_init__(self):
        if self.epsilon_sq <= 0:
            raise ValueError("epsilon_sq must be positive")
        if self.alpha < 0:
            raise ValueError("alpha must be non-negative")
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if self.lam < 0:
            raise ValueError("lam must be non-negative")


def bpr_loss(e_u, e_pos, e_neg) -> LossResult:
    """Pairwise ranking loss: sum of -log sigmoid(s_pos - s_neg).

    Inputs are parallel (n, d) row matrices; grads use keys
    ``user``/``pos``/``neg``.
    """
    s = np.sum(e_u * (e_pos - e_neg), axis=1)
    value = float(np.logaddexp(0.0, -s).sum())
    coef = (_sigmoid(s) - 1.0)[:, None]  # d/ds of -log sigmoid(s)
    return LossResult(
        value=value,
        grads={
            "user": coef * (e_pos - e_neg),
            "pos": coef * e_u,
            "neg": -coef * e_u,
        },
    )


def _sigmoid(x):
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def infonce_loss(view_a, view_b, tau) -> LossResult:
    """Contrastive loss with in-batch denominator over rows of view_b.

    Row u of view_a is positive with row u of view_b; all other rows of
    view_b act as negatives. A single-row batch gives exactly zero.
    """
    if tau <= 0:
        raise ValueError("tau must be positive")
    a = np.asarray(view_a, dtype=np.float64)
    b = np.asarray(view_b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError("views must have identical shapes")
    n = a.shape[0]
    logits = a @ b.T / tau
    m = logits.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(logits - m).sum(axis=1))
    value = float((lse - np.diag(logits)).sum())
    soft = np.exp(logits - lse[:, None])
    dlogits = soft - np.eye(n)
    return LossResult(
        value=value,
        grads={"a": dlogits @ b / tau, "b": dlogits.T @ a / tau},
    )


def alignment_loss(e_u, e_i) -> LossResult:
    """Mean squared distance over positive pairs (parallel row matrices)."""
    e_u = np.atleast_2d(e_u)
    e_i = np.atleast_2d(e_i)
    n = e_u.shape[0]
    if n == 0:
        return LossResult(0.0, {"user": np.zeros_like(e_u), "item": np.zeros_like(e_i)})
    diff = e_u - e_i
    value = float(np.sum(diff * diff) / n)
    g = 2.0 * diff / n
    return LossResult(value, {"user": g, "item": -g})


def uniformity_loss(E) -> LossResult:
    """log mean over distinct pairs of exp(-2 ||e_u - e_v||^2)."""
    E = np.asarray(E, dtype=np.float64)
    n = E.shape[0]
    if n < 2:
        raise UndefinedMetricError("uniformity needs at least 2 rows")
    sq = np.sum(E * E, axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * E @ E.T
    ker = np.exp(-2.0 * d2)
    np.fill_diagonal(ker, 0.0)
    total = ker.sum()
    value = float(np.log(total / (n * (n - 1))))
    # d value / d e_u = (1/total) sum_v 2*ker_uv * (-2) * 2 (e_u - e_v)
    row = ker.sum(axis=1)
    grad = (-8.0 / total) * (row[:, None] * E - ker @ E)
    return LossResult(value, {"E": grad})


def _cholesky_lower(M):
    try:
        return scipy.linalg.cholesky(M, lower=True)
    except scipy.linalg.LinAlgError as exc:
        match = re.search(r"(\d+)-th leading minor", str(exc))
        pivot = int(match.group(1)) - 1 if match else None
        raise NumericalDomainError(str(exc), pivot_index=pivot) from exc


def logdet_psd(M) -> float:
    """log-determinant of a symmetric positive-definite matrix via Cholesky."""
    M = np.asarray(M, dtype=np.float64)
    scale = max(1.0, float(np.abs(M).max()) if M.size else 1.0)
    if np.abs(M - M.T).max() > 1e-10 * scale:
        raise NumericalDomainError("matrix is not symmetric within tolerance")
    L = _cholesky_lower(M)
    return float(2.0 * np.log(np.diag(L)).sum())


def coding_rate(E, epsilon_sq) -> LossResult:
    """0.5 logdet(I + t E E^T) with t = d / (n * epsilon_sq).

    ``E`` is d x n with samples as columns; the gradient (key ``E``) is
    t (I + t E E^T)^{-1} E, reusing the logdet factorization.
    """
    E = np.asarray(E, dtype=np.float64)
    d, n = E.shape
    if n < 1:
        raise ValueError("need at least one column")
    if epsilon_sq <= 0:
        raise ValueError("epsilon_sq must be positive")
    t = d / (n * epsilon_sq)
    M = np.eye(d) + t * (E @ E.T)
    L = _cholesky_lower(M)
    value = float(np.log(np.diag(L)).sum())  # 0.5 * logdet
    grad = t * scipy.linalg.cho_solve((L, True), E)
    return LossResult(value, {"E": grad})


def _membership_weights(memberships):
    W = getattr(memberships, "weights", memberships)
    return np.asarray(W, dtype=np.float64)


def per_cluster_coding_rate(E, epsilon_sq, memberships) -> LossResult:
    """Membership-weighted sum of cluster-restricted coding rates.

    ``memberships`` is an (n, K) weight array or an object with a
    ``weights`` attribute. Clusters whose batch trace is ~0 are skipped;
    the skip count is reported as ``skipped_clusters`` on the result.
    """
    E = np.asarray(E, dtype=np.float64)
    d, n = E.shape
    if epsilon_sq <= 0:
        raise ValueError("epsilon_sq must be positive")
    W = _membership_weights(memberships)
    if W.shape[0] != n:
        raise ValueError(f"memberships cover {W.shape[0]} entities, E has {n} columns")
    value = 0.0
    grad = np.zeros_like(E)
    skipped = 0
    for k in range(W.shape[1]):
        pi = W[:, k]
        tr = float(pi.sum())
        if tr <= _TRACE_TOL:
            skipped += 1
            continue
        c = d / (tr * epsilon_sq)
        Epi = E * pi[None, :]
        M = np.eye(d) + c * (Epi @ E.T)
        M = 0.5 * (M + M.T)  # guard against asymmetric rounding
        L = _cholesky_lower(M)
        value += (tr / n) * float(np.log(np.diag(L)).sum())
        # d/dE of (tr/2n) logdet(I + c E Pi E^T) = (d/(n eps^2)) M^{-1} E Pi
        grad += (d / (n * epsilon_sq)) * scipy.linalg.cho_solve((L, True), Epi)
    result = LossResult(value, {"E": grad})
    result.skipped_clusters = skipped
    return result


def compactness_loss(E, epsilon_sq, memberships) -> LossResult:
    """Per-cluster rate minus total rate; compresses clusters, expands the whole."""
    clustered = per_cluster_coding_rate(E, epsilon_sq, memberships)
    total = coding_rate(E, epsilon_sq)
    result = LossResult(
        clustered.value - total.value,
        {"E": clustered.grads["E"] - total.grads["E"]},
    )
    result.skipped_clusters = clustered.skipped_clusters
    return result


def ncl_total(align: LossResult, compact_user: LossResult,
              compact_item: LossResult, alpha: float) -> LossResult:
    """Total objective: alignment + alpha * (user + item compactness).

    All three results must carry grads under matching ``user``/``item``
    keys with identical shapes (the trainer scatters per-entity gradients
    into full batch shape before combining).
    """
    if alpha < 0:
        raise ValueError("alpha must be non-negative")
    value = align.value + alpha * (compact_user.value + compact_item.value)
    grads = {}
    for key in set(align.grads) | set(compact_user.grads) | set(compact_item.grads):
        parts = []
        if key in align.grads:
            parts.append(align.grads[key])
        if key in compact_user.grads:
            parts.append(alpha * compact_user.grads[key])
        if key in compact_item.grads:
            parts.append(alpha * compact_item.grads[key])
        grads[key] = sum(parts)
    return LossResult(value, grads)
