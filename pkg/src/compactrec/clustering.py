"""Cluster-membership construction.

Two routes produce :class:`MembershipSet` objects for the compactness
objective: thresholding the interaction co-occurrence graph, and
self-labeling with a small classifier head whose targets come from a
balanced optimal-transport assignment.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .errors import SizingError
from .rng import generator

__all__ = [
    "CooccurrenceGraph",
    "MembershipSet",
    "ClassifierHead",
    "AssignmentMatrix",
    "build_cooccurrence",
    "thresholded_memberships",
    "sample_memberships",
    "init_head",
    "classifier_forward",
    "ipot_assign",
    "memberships_from_assignments",
    "update_classifier",
    "full_cluster_memberships",
]

_P_FLOOR = 1e-30


@dataclass(frozen=True)
class CooccurrenceGraph:
    """Symmetric shared-interaction counts A = R R^T (or the item analogue)."""

    matrix: sp.csr_matrix
    side: str  # "user" | "item"

    @property
    def num_entities(self):
        return self.matrix.shape[0]


@dataclass
class MembershipSet:
    """K per-cluster weight vectors over entities.

    ``mode`` is "soft" (rows sum to 1), "hard" (one-hot rows), or
    "indicator" (overlapping 0/1 sets from co-occurrence thresholding,
    rows need not sum to 1).
    """

    weights: np.ndarray  # (num_entities, K)
    mode: str

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.mode not in ("soft", "hard", "indicator"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if np.any(self.weights < 0) or np.any(self.weights > 1):
            raise ValueError("membership weights must lie in [0, 1]")
        if self.mode in ("soft", "hard"):
            sums = self.weights.sum(axis=1)
            if np.abs(sums - 1.0).max() > 1e-8:
                raise ValueError("soft/hard membership rows must sum to 1")
        if self.mode == "hard":
            if not np.all(np.isin(self.weights, (0.0, 1.0))):
                raise ValueError("hard membership rows must be one-hot")

    @property
    def num_entities(self):
        return self.weights.shape[0]

    @property
    def K(self):
        return self.weights.shape[1]

    def restrict(self, rows) -> np.ndarray:
        """Batch-row slice of the weight matrix (for per-batch rate terms)."""
        return self.weights[rows]

    def export_text(self, path):
        """Write (entity, cluster, weight) triples for nonzero weights."""
        with open(path, "w", encoding="utf-8") as fh:
            ent, cl = np.nonzero(self.weights)
            for e, k in zip(ent, cl):
                fh.write(f"{e} {k} {self.weights[e, k]:.10g}\n")


@dataclass
class ClassifierHead:
    """One-hidden-layer rectifier network mapping embeddings to K logits."""

    W1: np.ndarray  # (d, h)
    b1: np.ndarray  # (h,)
    W2: np.ndarray  # (h, K)
    b2: np.ndarray  # (K,)

    @property
    def K(self):
        return self.W2.shape[1]


@dataclass
class AssignmentMatrix:
    """Balanced transport plan: rows ~ clusters, columns ~ entities."""

    Q: np.ndarray  # (K, n), row marginals 1/K, column marginals 1/n
    converged: bool
    iterations: int
    marginal_error: float


def full_cluster_memberships(n) -> MembershipSet:
    """Single cluster containing every entity (warm-up memberships)."""
    return MembershipSet(np.ones((n, 1)), mode="soft")


def build_cooccurrence(train, side="user", nnz_cap=50_000_000) -> CooccurrenceGraph:
    """Shared-interaction counts between entities on one side of the graph."""
    if len(train) == 0:
        raise ValueError("train set is empty")
    R = train.to_csr()
    if side == "item":
        R = R.T.tocsr()
    elif side != "user":
        raise ValueError("side must be 'user' or 'item'")
    # upper bound on nnz(R R^T): sum over items of (users-per-item)^2
    other_deg = np.diff(R.tocsc().indptr)
    if float(np.sum(other_deg.astype(np.float64) ** 2)) > nnz_cap:
        raise SizingError(
            f"co-occurrence graph may exceed {nnz_cap} nonzeros; raise nnz_cap "
            "or use self-labeling memberships instead"
        )
    A = (R @ R.T).tocsr()
    if A.nnz > nnz_cap:
        raise SizingError(f"co-occurrence graph has {A.nnz} nonzeros > cap {nnz_cap}")
    return CooccurrenceGraph(matrix=A, side=side)


def thresholded_memberships(graph: CooccurrenceGraph, eta=None, quantile=0.9) -> MembershipSet:
    """One indicator cluster per entity column: members share >= eta interactions.

    With ``eta=None`` the threshold is the per-column ``quantile`` of the
    nonzero co-occurrence counts (absolute thresholds are dataset-scale
    dependent). All-zero columns are dropped.
    """
    if eta is not None and eta <= 0:
        raise ValueError("eta must be positive")
    A = graph.matrix.tocsc()
    n = graph.num_entities
    columns = []
    for k in range(n):
        start, end = A.indptr[k], A.indptr[k + 1]
        rows = A.indices[start:end]
        vals = A.data[start:end]
        if len(vals) == 0:
            continue
        thr = eta if eta is not None else float(np.quantile(vals, quantile))
        members = rows[vals >= thr]
        if len(members) == 0:
            continue
        col = np.zeros(n)
        col[members] = 1.0
        columns.append(col)
    if not columns:
        raise ValueError("no clusters survive thresholding")
    return MembershipSet(np.stack(columns, axis=1), mode="indicator")


def sample_memberships(memberships: MembershipSet, m, seed) -> MembershipSet:
    """Uniform sample of m clusters without replacement, deterministic per seed."""
    if m < 1:
        raise ValueError("m must be >= 1")
    K = memberships.K
    if m >= K:
        return memberships
    rng = generator(seed)
    chosen = np.sort(rng.choice(K, size=m, replace=False))
    # a strict subset of a partition no longer covers every entity, so the
    # result is indicator-style regardless of the input mode
    mode = memberships.mode if memberships.mode == "soft" else "indicator"
    weights = memberships.weights[:, chosen]
    if mode == "soft":
        sums = weights.sum(axis=1, keepdims=True)
        weights = np.divide(weights, sums, out=np.zeros_like(weights),
                            where=sums > 0)
        zero = (sums.ravel() == 0)
        if zero.any():
            weights[zero] = 1.0 / m
    return MembershipSet(weights, mode=mode)


def init_head(d, K, hidden=None, seed=0) -> ClassifierHead:
    """He-style initialization; hidden width defaults to 2*d."""
    if K < 2:
        raise ValueError("K must be >= 2")
    h = hidden if hidden is not None else 2 * d
    rng = generator(seed)
    return ClassifierHead(
        W1=rng.normal(0.0, np.sqrt(2.0 / d), size=(d, h)),
        b1=np.zeros(h),
        W2=rng.normal(0.0, np.sqrt(2.0 / h), size=(h, K)),
        b2=np.zeros(K),
    )


def _head_logits(E, head: ClassifierHead):
    pre = E @ head.W1 + head.b1
    hidden = np.maximum(pre, 0.0)
    return pre, hidden, hidden @ head.W2 + head.b2


def _softmax_rows(logits):
    shifted = logits - logits.max(axis=1, keepdims=True)
    ex = np.exp(shifted)
    return ex / ex.sum(axis=1, keepdims=True)


def classifier_forward(E, head: ClassifierHead) -> np.ndarray:
    """Scaled class posteriors P (K x n): column u is softmax(logits_u)/n."""
    E = np.atleast_2d(np.asarray(E, dtype=np.float64))
    n = E.shape[0]
    _, _, logits = _head_logits(E, head)
    return _softmax_rows(logits).T / n


def ipot_assign(P, iterations=50, beta=1.0, tol=1e-6) -> AssignmentMatrix:
    """Balanced assignment by inexact proximal point iterations.

    Minimizes <Q, -log P> over plans with uniform marginals (1/K, 1/n).
    Each outer iteration applies the proximal kernel and one marginal
    scaling sweep; iterating drives the plan to the unregularized optimum.
    """
    P = np.asarray(P, dtype=np.float64)
    K, n = P.shape
    cost = -np.log(np.maximum(P, _P_FLOOR))
    # a constant cost shift is absorbed by the scaling vectors and keeps
    # the proximal kernel away from the denormal range
    cost -= cost.min()
    a = np.full(K, 1.0 / K)
    b = np.full(n, 1.0 / n)
    G = np.exp(-cost / beta)
    Q = np.outer(a, b)
    v = np.ones(n)
    converged = False
    it = 0
    err = np.inf
    for it in range(1, iterations + 1):
        T = G * Q
        u = a / np.maximum(T @ v, _P_FLOOR)
        v = b / np.maximum(T.T @ u, _P_FLOOR)
        prev = Q
        Q = u[:, None] * T * v[None, :]
        # repeated kernel products drive hopeless cells toward the
        # denormal range, which slows dense arithmetic to a crawl
        Q[Q < 1e-250] = 0.0
        err = float(np.abs(Q.sum(axis=1) - a).sum() + np.abs(Q.sum(axis=0) - b).sum())
        # marginal feasibility alone can hold long before the proximal
        # iteration reaches the optimum; require the plan to stabilize too
        if err <= tol and np.abs(Q - prev).max() <= tol:
            converged = True
            break
    return AssignmentMatrix(Q=Q, converged=converged, iterations=it, marginal_error=err)


def memberships_from_assignments(assignment: AssignmentMatrix, mode="soft") -> MembershipSet:
    """Turn a transport plan into per-entity cluster weights.

    Soft: pi_uk = n * Q_ku (rows sum to 1 by the column marginal).
    Hard: one-hot argmax per entity, ties to the lowest cluster index.
    """
    Q = assignment.Q
    K, n = Q.shape
    if mode == "soft":
        W = np.clip(n * Q.T, 0.0, 1.0)
        # weights this small carry no signal but drag dense products
        # into denormal arithmetic downstream
        W[W < 1e-12] = 0.0
        W = W / W.sum(axis=1, keepdims=True)  # absorb solver tolerance
        return MembershipSet(W, mode="soft")
    if mode == "hard":
        picks = np.argmax(Q, axis=0)
        W = np.zeros((n, K))
        W[np.arange(n), picks] = 1.0
        return MembershipSet(W, mode="hard")
    raise ValueError(f"unknown mode {mode!r}")


def update_classifier(E, Q, head: ClassifierHead, step_size):
    """One gradient step on the self-labeling cross-entropy with Q frozen.

    Targets are q(y|e_u) = n * Q_yu; returns (updated head, loss value).
    Gradients never flow into E.
    """
    E = np.atleast_2d(np.asarray(E, dtype=np.float64))
    n = E.shape[0]
    q = np.asarray(Q, dtype=np.float64).T * n  # (n, K) target distributions
    pre, hidden, logits = _head_logits(E, head)
    p = _softmax_rows(logits)
    loss = float(-(q * np.log(np.maximum(p, _P_FLOOR))).sum() / n)
    # softmax cross-entropy with distribution targets; the q-row sums are
    # kept explicit so the gradient stays exact under solver tolerance
    dlogits = (p * q.sum(axis=1, keepdims=True) - q) / n
    dW2 = hidden.T @ dlogits
    db2 = dlogits.sum(axis=0)
    dhidden = dlogits @ head.W2.T
    dpre = dhidden * (pre > 0)
    dW1 = E.T @ dpre
    db1 = dpre.sum(axis=0)
    new_head = ClassifierHead(
        W1=head.W1 - step_size * dW1,
        b1=head.b1 - step_size * db1,
        W2=head.W2 - step_size * dW2,
        b2=head.b2 - step_size * db2,
    )
    return new_head, loss
