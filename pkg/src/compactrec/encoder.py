"""Linear graph propagation with layer pooling, row normalization, and the
exact reverse-mode gradient of the whole forward pipeline.

The encoder has no nonlinearities and no feature transforms: each layer
averages neighbor embeddings under the symmetric-normalized bipartite
operator, layers are pooled with fixed weights, and the pooled rows are
projected onto the unit sphere before any loss sees them.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .rng import generator

__all__ = [
    "EmbeddingTable",
    "ForwardCache",
    "init_embeddings",
    "propagate",
    "normalize_rows",
    "forward",
    "backprop",
    "score",
]


@dataclass
class EmbeddingTable:
    """Trainable layer-0 user and item embedding matrices."""

    user: np.ndarray  # (num_users, d)
    item: np.ndarray  # (num_items, d)

    @property
    def d(self):
        return self.user.shape[1]

    def copy(self):
        return EmbeddingTable(self.user.copy(), self.item.copy())


@dataclass
class ForwardCache:
    """Everything the backward pass needs from one forward evaluation."""

    user_layers: list        # L+1 matrices (num_users, d)
    item_layers: list
    layer_weights: np.ndarray
    pooled_user: np.ndarray
    pooled_item: np.ndarray
    user_norms: np.ndarray   # pooled row norms, zeros where the row is zero
    item_norms: np.ndarray
    user_out: np.ndarray     # unit rows (zero rows left as zero)
    item_out: np.ndarray
    user_zero_rows: np.ndarray
    item_zero_rows: np.ndarray


def init_embeddings(num_users, num_items, d, seed, scale=0.1) -> EmbeddingTable:
    """IID normal(0, scale^2) tables, deterministic per seed."""
    if scale <= 0:
        raise ValueError("scale must be positive")
    rng = generator(seed)
    return EmbeddingTable(
        user=rng.normal(0.0, scale, size=(num_users, d)),
        item=rng.normal(0.0, scale, size=(num_items, d)),
    )


def _pool_weights(L, layer_weights):
    if layer_weights is None:
        return np.full(L + 1, 1.0 / (L + 1))
    w = np.asarray(layer_weights, dtype=np.float64)
    if w.shape != (L + 1,):
        raise ValueError(f"expected {L + 1} layer weights, got shape {w.shape}")
    return w


def propagate(adj, table: EmbeddingTable, L: int, layer_weights=None):
    """Run L propagation layers and pool.

    Returns (user_layers, item_layers, pooled_user, pooled_item).
    """
    if L < 0:
        raise ValueError("L must be >= 0")
    weights = _pool_weights(L, layer_weights)
    A = adj.matrix
    user_layers = [table.user]
    item_layers = [table.item]
    for _ in range(L):
        user_layers.append(A @ item_layers[-1])
        item_layers.append(A.T @ user_layers[-2])
    pooled_user = sum(w * m for w, m in zip(weights, user_layers))
    pooled_item = sum(w * m for w, m in zip(weights, item_layers))
    return user_layers, item_layers, pooled_user, pooled_item


def normalize_rows(M):
    """Divide each row by its Euclidean norm; zero rows are left as zero.

    Returns (normalized, norms, zero_row_mask); ``norms`` is zero exactly
    where ``zero_row_mask`` is set.
    """
    norms = np.linalg.norm(M, axis=1)
    zero = norms == 0.0
    safe = np.where(zero, 1.0, norms)
    out = M / safe[:, None]
    return out, np.where(zero, 0.0, norms), zero


def forward(adj, table: EmbeddingTable, L: int, layer_weights=None) -> ForwardCache:
    """Propagate, pool, and unit-normalize; cache intermediates."""
    user_layers, item_layers, pooled_user, pooled_item = propagate(
        adj, table, L, layer_weights
    )
    user_out, user_norms, user_zero = normalize_rows(pooled_user)
    item_out, item_norms, item_zero = normalize_rows(pooled_item)
    return ForwardCache(
        user_layers=user_layers,
        item_layers=item_layers,
        layer_weights=_pool_weights(L, layer_weights),
        pooled_user=pooled_user,
        pooled_item=pooled_item,
        user_norms=user_norms,
        item_norms=item_norms,
        user_out=user_out,
        item_out=item_out,
        user_zero_rows=user_zero,
        item_zero_rows=item_zero,
    )


def _normalization_adjoint(grad_out, out, norms, zero_rows):
    # rows map e -> e/|e|; Jacobian (I - ee^T/|e|^2)/|e| applied to grad_out
    proj = grad_out - out * np.sum(grad_out * out, axis=1, keepdims=True)
    safe = np.where(zero_rows, 1.0, norms)
    proj = proj / safe[:, None]
    proj[zero_rows] = 0.0
    return proj


def backprop(adj, cache: ForwardCache, grad_user_out, grad_item_out):
    """Exact adjoint of forward(); gradients are w.r.t. the layer-0 tables.

    ``grad_user_out``/``grad_item_out`` are gradients w.r.t. the
    unit-normalized pooled outputs.
    """
    g_pooled_u = _normalization_adjoint(
        grad_user_out, cache.user_out, cache.user_norms, cache.user_zero_rows
    )
    g_pooled_i = _normalization_adjoint(
        grad_item_out, cache.item_out, cache.item_norms, cache.item_zero_rows
    )
    L = len(cache.user_layers) - 1
    w = cache.layer_weights
    gu = [w[l] * g_pooled_u for l in range(L + 1)]
    gi = [w[l] * g_pooled_i for l in range(L + 1)]
    A = adj.matrix
    # e_u^(l) = A e_i^(l-1), e_i^(l) = A^T e_u^(l-1)
    for l in range(L, 0, -1):
        gi[l - 1] = gi[l - 1] + A.T @ gu[l]
        gu[l - 1] = gu[l - 1] + A @ gi[l]
    return gu[0], gi[0]


def score(e_u, e_i):
    """Preference score: inner product of two embedding vectors."""
    return float(np.dot(e_u, e_i))
