"""Interaction ingestion, k-core filtering, per-user splitting, and the
normalized bipartite adjacency.

All structures produced here are immutable once built and safe to share
across threads.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .errors import EmptyDatasetError, ParseError
from .rng import generator

__all__ = [
    "InteractionSet",
    "SplitDataset",
    "NormalizedAdjacency",
    "load_interactions",
    "apply_k_core",
    "split_per_user",
    "build_adjacency",
    "save_snapshot",
    "load_snapshot",
]


@dataclass(frozen=True)
class InteractionSet:
    """Deduplicated implicit-feedback records over contiguous id spaces.

    ``users`` and ``items`` are parallel int arrays, one entry per record.
    ``user_ids``/``item_ids`` map each contiguous index back to the raw
    identifier found in the input file.
    """

    num_users: int
    num_items: int
    users: np.ndarray
    items: np.ndarray
    user_ids: tuple = ()
    item_ids: tuple = ()

    def __post_init__(self):
        if len(self.users) != len(self.items):
            raise ValueError("users/items record arrays must be parallel")
        if len(self.users) and (
            self.users.max() >= self.num_users or self.items.max() >= self.num_items
        ):
            raise ValueError("record index out of range")

    def __len__(self):
        return len(self.users)

    def user_degrees(self) -> np.ndarray:
        return np.bincount(self.users, minlength=self.num_users)

    def item_degrees(self) -> np.ndarray:
        return np.bincount(self.items, minlength=self.num_items)

    def to_csr(self) -> sp.csr_matrix:
        """Binary interaction matrix R (num_users x num_items)."""
        data = np.ones(len(self.users), dtype=np.float64)
        return sp.csr_matrix(
            (data, (self.users, self.items)),
            shape=(self.num_users, self.num_items),
        )

    def pairs(self) -> np.ndarray:
        """Records as an (n, 2) array of (user, item)."""
        return np.stack([self.users, self.items], axis=1)


@dataclass(frozen=True)
class SplitDataset:
    """Train/valid/test interaction sets sharing one id space."""

    train: InteractionSet
    valid: InteractionSet
    test: InteractionSet
    split_seed: int


@dataclass(frozen=True)
class NormalizedAdjacency:
    """Sparse symmetric-normalized bipartite operator over train edges.

    ``matrix`` holds w_ui = 1/sqrt(|N_u| |N_i|) in CSR layout
    (num_users x num_items); propagation toward items uses its transpose.
    """

    matrix: sp.csr_matrix
    user_degrees: np.ndarray
    item_degrees: np.ndarray
    num_isolated_users: int = 0
    num_isolated_items: int = 0

    @property
    def num_users(self):
        return self.matrix.shape[0]

    @property
    def num_items(self):
        return self.matrix.shape[1]


def load_interactions(path, format="tsv") -> InteractionSet:
    """Read whitespace/tab-delimited ``user item [timestamp]`` lines.

    Raw ids are reindexed contiguously in order of first appearance and
    duplicate (user, item) records collapse to one.
    """
    if format not in ("tsv", "txt", "whitespace"):
        raise ValueError(f"unknown format tag: {format!r}")
    user_index = {}
    item_index = {}
    record_set = set()
    users = []
    items = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            fields = line.split("\t") if format == "tsv" and "\t" in line else line.split()
            if len(fields) < 2:
                raise ParseError(path, lineno, f"expected at least 2 fields, got {len(fields)}")
            raw_u, raw_i = fields[0], fields[1]
            if len(fields) >= 3:
                try:
                    int(float(fields[2]))  # timestamp is parsed but unused
                except ValueError:
                    raise ParseError(path, lineno, f"bad timestamp {fields[2]!r}") from None
            u = user_index.setdefault(raw_u, len(user_index))
            i = item_index.setdefault(raw_i, len(item_index))
            if (u, i) in record_set:
                continue
            record_set.add((u, i))
            users.append(u)
            items.append(i)
    if not users:
        raise EmptyDatasetError(f"no interactions found in {path}")
    return InteractionSet(
        num_users=len(user_index),
        num_items=len(item_index),
        users=np.asarray(users, dtype=np.int64),
        items=np.asarray(items, dtype=np.int64),
        user_ids=tuple(user_index),
        item_ids=tuple(item_index),
    )


def _compact(iset: InteractionSet, keep_mask: np.ndarray) -> InteractionSet:
    """Drop masked records and re-compact both id spaces."""
    users = iset.users[keep_mask]
    items = iset.items[keep_mask]
    u_keep = np.unique(users)
    i_keep = np.unique(items)
    u_map = np.full(iset.num_users, -1, dtype=np.int64)
    i_map = np.full(iset.num_items, -1, dtype=np.int64)
    u_map[u_keep] = np.arange(len(u_keep))
    i_map[i_keep] = np.arange(len(i_keep))
    user_ids = tuple(iset.user_ids[u] for u in u_keep) if iset.user_ids else ()
    item_ids = tuple(iset.item_ids[i] for i in i_keep) if iset.item_ids else ()
    return InteractionSet(
        num_users=len(u_keep),
        num_items=len(i_keep),
        users=u_map[users],
        items=i_map[items],
        user_ids=user_ids,
        item_ids=item_ids,
    )


def apply_k_core(iset: InteractionSet, k: int) -> InteractionSet:
    """Iteratively remove users and items with degree < k until fixed point."""
    if k < 1:
        raise ValueError("k must be >= 1")
    keep = np.ones(len(iset), dtype=bool)
    users, items = iset.users, iset.items
    while True:
        u_deg = np.bincount(users[keep], minlength=iset.num_users)
        i_deg = np.bincount(items[keep], minlength=iset.num_items)
        bad = keep & ((u_deg[users] < k) | (i_deg[items] < k))
        if not bad.any():
            break
        keep &= ~bad
    if not keep.any():
        raise EmptyDatasetError(f"no interactions survive {k}-core filtering")
    return _compact(iset, keep)


def _user_rng(seed: int, user: int) -> np.random.Generator:
    # Counter-based generator keyed per (seed, user) keeps splits stable
    # regardless of ingestion order.
    return generator(seed, user)


def split_per_user(iset: InteractionSet, ratios, seed: int) -> SplitDataset:
    """Random per-user partition into train/valid/test.

    Valid/test counts are floored, remainders go to train; users with
    fewer than 3 interactions keep everything in train.
    """
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or any(r <= 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError("ratios must be three positive fractions summing to 1")
    _, r_valid, r_test = ratios

    order = np.argsort(iset.users, kind="stable")
    sorted_users = iset.users[order]
    boundaries = np.searchsorted(sorted_users, np.arange(iset.num_users + 1))

    assign = np.zeros(len(iset), dtype=np.int8)  # 0 train, 1 valid, 2 test
    for u in range(iset.num_users):
        rows = order[boundaries[u]:boundaries[u + 1]]
        c = len(rows)
        if c == 0:
            continue
        if c < 3:
            continue  # all train
        n_valid = int(np.floor(c * r_valid))
        n_test = int(np.floor(c * r_test))
        # keep at least one train record per user
        while c - n_valid - n_test < 1:
            if n_valid >= n_test and n_valid > 0:
                n_valid -= 1
            elif n_test > 0:
                n_test -= 1
        perm = _user_rng(seed, u).permutation(c)
        shuffled = rows[perm]
        assign[shuffled[c - n_test:]] = 2
        assign[shuffled[c - n_test - n_valid:c - n_test]] = 1

    def subset(tag):
        mask = assign == tag
        return InteractionSet(
            num_users=iset.num_users,
            num_items=iset.num_items,
            users=iset.users[mask],
            items=iset.items[mask],
            user_ids=iset.user_ids,
            item_ids=iset.item_ids,
        )

    return SplitDataset(train=subset(0), valid=subset(1), test=subset(2), split_seed=seed)


def build_adjacency(train: InteractionSet) -> NormalizedAdjacency:
    """Edge weights 1/sqrt(|N_u| |N_i|) from train degrees only."""
    if len(train) == 0:
        raise EmptyDatasetError("cannot build adjacency from an empty train set")
    u_deg = train.user_degrees()
    i_deg = train.item_degrees()
    w = 1.0 / np.sqrt(u_deg[train.users] * i_deg[train.items])
    matrix = sp.csr_matrix(
        (w, (train.users, train.items)),
        shape=(train.num_users, train.num_items),
    )
    return NormalizedAdjacency(
        matrix=matrix,
        user_degrees=u_deg,
        item_degrees=i_deg,
        num_isolated_users=int((u_deg == 0).sum()),
        num_isolated_items=int((i_deg == 0).sum()),
    )


# --- snapshot directory layout -------------------------------------------
#
# interactions.txt : one record per line, "user item split" with split in
#                    {train, valid, test}, contiguous indices
# split.json       : counts, seed, ratios, k-core, raw-id tables

_SPLIT_TAGS = ("train", "valid", "test")


def save_snapshot(split: SplitDataset, out_dir, k_core=None, ratios=None):
    """Write a prepared dataset to ``out_dir`` (created if missing)."""
    os.makedirs(out_dir, exist_ok=True)
    any_set = split.train
    with open(os.path.join(out_dir, "interactions.txt"), "w", encoding="utf-8") as fh:
        for tag, iset in zip(_SPLIT_TAGS, (split.train, split.valid, split.test)):
            for u, i in zip(iset.users, iset.items):
                fh.write(f"{u} {i} {tag}\n")
    manifest = {
        "num_users": any_set.num_users,
        "num_items": any_set.num_items,
        "counts": {
            tag: len(iset)
            for tag, iset in zip(_SPLIT_TAGS, (split.train, split.valid, split.test))
        },
        "seed": split.split_seed,
        "k_core": k_core,
        "ratios": list(ratios) if ratios is not None else None,
        "user_ids": list(any_set.user_ids),
        "item_ids": list(any_set.item_ids),
    }
    with open(os.path.join(out_dir, "split.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_snapshot(snapshot_dir) -> SplitDataset:
    """Read a snapshot written by :func:`save_snapshot`."""
    with open(os.path.join(snapshot_dir, "split.json"), "r", encoding="utf-8") as fh:
        manifest = json.load(fh)
    num_users = manifest["num_users"]
    num_items = manifest["num_items"]
    user_ids = tuple(manifest.get("user_ids") or ())
    item_ids = tuple(manifest.get("item_ids") or ())
    buckets = {tag: ([], []) for tag in _SPLIT_TAGS}
    with open(os.path.join(snapshot_dir, "interactions.txt"), "r", encoding="utf-8") as fh:
        for line in fh:
            u, i, tag = line.split()
            buckets[tag][0].append(int(u))
            buckets[tag][1].append(int(i))

    def iset(tag):
        us, its = buckets[tag]
        return InteractionSet(
            num_users=num_users,
            num_items=num_items,
            users=np.asarray(us, dtype=np.int64),
            items=np.asarray(its, dtype=np.int64),
            user_ids=user_ids,
            item_ids=item_ids,
        )

    return SplitDataset(
        train=iset("train"),
        valid=iset("valid"),
        test=iset("test"),
        split_seed=manifest["seed"],
    )
