"""Full-catalog top-n ranking metrics with train-item masking."""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

__all__ = [
    "RankingMetrics",
    "rank_and_score",
    "degree_bucket_eval",
    "groups_from_interactions",
]

_CHUNK = 512


@dataclass
class RankingMetrics:
    """Macro-averaged Recall/NDCG per cutoff over users with ground truth."""

    recall: dict   # cutoff -> value
    ndcg: dict
    num_users: int
    cutoffs: tuple

    def to_json(self) -> str:
        payload = {
            str(n): {"recall": self.recall[n], "ndcg": self.ndcg[n]}
            for n in self.cutoffs
        }
        payload["num_users"] = self.num_users
        return json.dumps(payload, indent=2, sort_keys=True)


def groups_from_interactions(iset):
    """Per-user item lists from an interaction set, as a list of arrays."""
    groups = [[] for _ in range(iset.num_users)]
    for u, i in zip(iset.users, iset.items):
        groups[u].append(i)
    return [np.asarray(g, dtype=np.int64) for g in groups]


def _idcg_table(max_n):
    gains = 1.0 / np.log2(np.arange(2, max_n + 2))
    return np.concatenate([[0.0], np.cumsum(gains)])


def rank_and_score(E_u, E_i, ground_truth, mask, cutoffs, users=None) -> RankingMetrics:
    """Score every item per user, mask train items, and average Recall/NDCG.

    ``ground_truth`` and ``mask`` are per-user item-index sequences, one
    entry per user row of ``E_u``. Ties are broken toward the lower item
    index; users with empty ground truth are skipped. ``users`` optionally
    restricts evaluation to a subset of user indices.
    """
    cutoffs = tuple(cutoffs)
    if list(cutoffs) != sorted(cutoffs):
        raise ValueError("cutoffs must be sorted ascending")
    num_items = E_i.shape[0]
    if cutoffs[-1] > num_items:
        raise ValueError("largest cutoff exceeds catalog size")
    if users is None:
        users = np.arange(E_u.shape[0])
    users = np.asarray(users)
    max_n = cutoffs[-1]
    idcg = _idcg_table(max_n)
    discounts = 1.0 / np.log2(np.arange(2, max_n + 2))

    recall_sums = {n: 0.0 for n in cutoffs}
    ndcg_sums = {n: 0.0 for n in cutoffs}
    counted = 0
    for start in range(0, len(users), _CHUNK):
        chunk = users[start:start + _CHUNK]
        scores = E_u[chunk] @ E_i.T
        for row, u in enumerate(chunk):
            gt = np.asarray(ground_truth[u])
            if gt.size == 0:
                continue
            s = scores[row].copy()
            masked = np.asarray(mask[u])
            if masked.size:
                s[masked] = -np.inf
            # stable sort on -s keeps the lower item index first among ties
            top = np.argsort(-s, kind="stable")[:max_n]
            hits = np.isin(top, gt)
            counted += 1
            for n in cutoffs:
                h = int(hits[:n].sum())
                recall_sums[n] += h / gt.size
                dcg = float((hits[:n] * discounts[:n]).sum())
                ndcg_sums[n] += dcg / idcg[min(n, gt.size)]
    if counted == 0:
        return RankingMetrics(
            recall={n: 0.0 for n in cutoffs},
            ndcg={n: 0.0 for n in cutoffs},
            num_users=0,
            cutoffs=cutoffs,
        )
    return RankingMetrics(
        recall={n: recall_sums[n] / counted for n in cutoffs},
        ndcg={n: ndcg_sums[n] / counted for n in cutoffs},
        num_users=counted,
        cutoffs=cutoffs,
    )


def degree_bucket_eval(E_u, E_i, ground_truth, mask, cutoffs, edges, item_degrees):
    """Metrics per item-popularity bucket.

    ``edges`` are ascending degree boundaries; bucket j covers train
    degrees [edges[j], edges[j+1]). Ground truth is restricted to the
    bucket's items; buckets with no test items report ``None``.
    """
    edges = list(edges)
    if edges != sorted(edges):
        raise ValueError("bucket edges must be ascending")
    item_degrees = np.asarray(item_degrees)
    results = {}
    for j in range(len(edges) - 1):
        lo, hi = edges[j], edges[j + 1]
        in_bucket = (item_degrees >= lo) & (item_degrees < hi)
        restricted = [gt[in_bucket[gt]] if len(gt) else gt for gt in map(np.asarray, ground_truth)]
        label = f"[{lo},{hi})"
        if sum(len(g) for g in restricted) == 0:
            results[label] = None
            continue
        results[label] = rank_and_score(E_u, E_i, restricted, mask, cutoffs)
    return results
