"""Dataset ingestion, k-core filtering, splitting, and adjacency tests."""

import numpy as np
import pytest
import scipy.sparse as sp

from compactrec.data import (
    InteractionSet,
    apply_k_core,
    build_adjacency,
    load_interactions,
    load_snapshot,
    save_snapshot,
    split_per_user,
)
from compactrec.errors import EmptyDatasetError, ParseError


def make_set(pairs, num_users=None, num_items=None):
    users = np.asarray([p[0] for p in pairs], dtype=np.int64)
    items = np.asarray([p[1] for p in pairs], dtype=np.int64)
    return InteractionSet(
        num_users=num_users if num_users is not None else int(users.max()) + 1,
        num_items=num_items if num_items is not None else int(items.max()) + 1,
        users=users,
        items=items,
    )


def random_set(rng, num_users, num_items, num_edges):
    edges = set()
    while len(edges) < num_edges:
        edges.add((int(rng.integers(num_users)), int(rng.integers(num_items))))
    return make_set(sorted(edges), num_users, num_items)


class TestLoadInteractions:
    def test_three_lines(self, tmp_path):
        p = tmp_path / "log.txt"
        p.write_text("u1 i1\nu1 i2\nu2 i1\n")
        iset = load_interactions(p)
        assert iset.num_users == 2
        assert iset.num_items == 2
        assert len(iset) == 3

    def test_duplicate_dropped(self, tmp_path):
        p = tmp_path / "log.txt"
        p.write_text("u1 i1\nu1 i2\nu2 i1\nu1 i1\n")
        iset = load_interactions(p)
        assert len(iset) == 3

    def test_tab_delimited_with_timestamp(self, tmp_path):
        p = tmp_path / "log.tsv"
        p.write_text("a\tx\t100\nb\ty\t200\n")
        iset = load_interactions(p, format="tsv")
        assert len(iset) == 2
        assert iset.user_ids == ("a", "b")

    def test_malformed_line_names_number(self, tmp_path):
        p = tmp_path / "log.txt"
        p.write_text("u1 i1\nbroken\n")
        with pytest.raises(ParseError) as err:
            load_interactions(p)
        assert err.value.line_number == 2

    def test_empty_file(self, tmp_path):
        p = tmp_path / "log.txt"
        p.write_text("")
        with pytest.raises(EmptyDatasetError):
            load_interactions(p)

    def test_first_appearance_reindexing(self, tmp_path):
        p = tmp_path / "log.txt"
        p.write_text("z i9\na i1\nz i1\n")
        iset = load_interactions(p)
        assert iset.user_ids == ("z", "a")
        assert iset.item_ids == ("i9", "i1")
        assert iset.users.tolist() == [0, 1, 0]


class TestKCore:
    def test_star_graph_emptied(self):
        star = make_set([(0, i) for i in range(5)])
        with pytest.raises(EmptyDatasetError):
            apply_k_core(star, 2)

    def test_complete_bipartite_unchanged(self):
        full = make_set([(u, i) for u in range(3) for i in range(3)])
        out = apply_k_core(full, 3)
        assert len(out) == 9
        assert out.num_users == 3 and out.num_items == 3

    def test_matches_peeling_oracle(self):
        rng = np.random.default_rng(7)
        iset = random_set(rng, 50, 50, 400)
        out = apply_k_core(iset, 5)

        # independent oracle: peel one offender at a time on raw pairs
        pairs = set(zip(iset.users.tolist(), iset.items.tolist()))
        while True:
            u_deg = {}
            i_deg = {}
            for u, i in pairs:
                u_deg[u] = u_deg.get(u, 0) + 1
                i_deg[i] = i_deg.get(i, 0) + 1
            drop = {(u, i) for u, i in pairs if u_deg[u] < 5 or i_deg[i] < 5}
            if not drop:
                break
            pairs -= drop
        # compare surviving raw edges through the compaction maps
        survivors = {
            (iset.user_ids[u] if iset.user_ids else u,
             iset.item_ids[i] if iset.item_ids else i)
            for u, i in pairs
        } if iset.user_ids else pairs
        assert len(out) == len(pairs)
        u_deg = out.user_degrees()
        i_deg = out.item_degrees()
        assert (u_deg >= 5).all() and (i_deg >= 5).all()

    def test_all_degrees_at_least_k(self):
        rng = np.random.default_rng(3)
        iset = random_set(rng, 40, 30, 350)
        for k in (2, 3, 4):
            out = apply_k_core(iset, k)
            assert (out.user_degrees() >= k).all()
            assert (out.item_degrees() >= k).all()


class TestSplitPerUser:
    def test_exact_ratio(self):
        iset = make_set([(0, i) for i in range(10)], num_users=1, num_items=10)
        split = split_per_user(iset, (0.8, 0.1, 0.1), seed=0)
        assert len(split.train) == 8
        assert len(split.valid) == 1
        assert len(split.test) == 1

    def test_two_interactions_all_train(self):
        iset = make_set([(0, 0), (0, 1)], num_users=1, num_items=2)
        split = split_per_user(iset, (0.8, 0.1, 0.1), seed=0)
        assert len(split.train) == 2
        assert len(split.valid) == 0 and len(split.test) == 0

    def test_deterministic(self):
        rng = np.random.default_rng(11)
        iset = random_set(rng, 100, 60, 2000)
        a = split_per_user(iset, (0.8, 0.1, 0.1), seed=5)
        b = split_per_user(iset, (0.8, 0.1, 0.1), seed=5)
        for x, y in zip((a.train, a.valid, a.test), (b.train, b.valid, b.test)):
            assert np.array_equal(x.users, y.users)
            assert np.array_equal(x.items, y.items)

    def test_disjoint_and_covering(self):
        rng = np.random.default_rng(2)
        iset = random_set(rng, 30, 30, 500)
        split = split_per_user(iset, (0.8, 0.1, 0.1), seed=1)
        parts = [set(zip(s.users.tolist(), s.items.tolist()))
                 for s in (split.train, split.valid, split.test)]
        assert sum(len(p) for p in parts) == len(iset)
        assert parts[0] | parts[1] | parts[2] == set(
            zip(iset.users.tolist(), iset.items.tolist()))
        assert not (parts[0] & parts[1]) and not (parts[0] & parts[2])
        assert not (parts[1] & parts[2])

    def test_every_eval_user_in_train(self):
        rng = np.random.default_rng(9)
        iset = random_set(rng, 25, 25, 300)
        split = split_per_user(iset, (0.8, 0.1, 0.1), seed=4)
        train_users = set(split.train.users.tolist())
        assert set(split.valid.users.tolist()) <= train_users
        assert set(split.test.users.tolist()) <= train_users

    def test_bad_ratios_rejected(self):
        iset = make_set([(0, 0)], num_users=1, num_items=1)
        with pytest.raises(ValueError):
            split_per_user(iset, (0.5, 0.5), seed=0)
        with pytest.raises(ValueError):
            split_per_user(iset, (0.9, 0.2, 0.1), seed=0)


class TestBuildAdjacency:
    def test_formula_weight(self):
        # u0 has degree 2, i0 degree 3 -> w = 1/sqrt(6)
        iset = make_set([(0, 0), (0, 1), (1, 0), (2, 0)])
        adj = build_adjacency(iset)
        assert adj.matrix[0, 0] == pytest.approx(1.0 / np.sqrt(6))

    def test_single_edge_weight_one(self):
        iset = make_set([(0, 0)], num_users=1, num_items=1)
        adj = build_adjacency(iset)
        assert adj.matrix[0, 0] == 1.0

    def test_matches_dense_oracle(self):
        rng = np.random.default_rng(5)
        iset = random_set(rng, 20, 20, 150)
        adj = build_adjacency(iset)
        R = iset.to_csr().toarray()
        du = R.sum(axis=1)
        di = R.sum(axis=0)
        with np.errstate(divide="ignore"):
            dense = np.diag(np.where(du > 0, du, 1.0) ** -0.5) @ R \
                @ np.diag(np.where(di > 0, di, 1.0) ** -0.5)
        assert np.abs(adj.matrix.toarray() - dense).max() < 1e-12

    def test_isolated_counts(self):
        iset = make_set([(0, 0)], num_users=3, num_items=2)
        adj = build_adjacency(iset)
        assert adj.num_isolated_users == 2
        assert adj.num_isolated_items == 1

    def test_operator_transpose_consistency(self):
        # one-hot user then one-hot item reads the same weight either way
        rng = np.random.default_rng(8)
        iset = random_set(rng, 10, 12, 60)
        adj = build_adjacency(iset)
        A = adj.matrix
        for u, i in [(0, 0), (3, 7), (9, 11)]:
            assert A[u, i] == A.T[i, u]


class TestSnapshotRoundtrip:
    def test_roundtrip(self, tmp_path):
        rng = np.random.default_rng(6)
        iset = random_set(rng, 15, 15, 120)
        split = split_per_user(iset, (0.8, 0.1, 0.1), seed=3)
        save_snapshot(split, tmp_path / "snap", k_core=1, ratios=(0.8, 0.1, 0.1))
        loaded = load_snapshot(tmp_path / "snap")
        assert loaded.split_seed == 3
        for a, b in zip((split.train, split.valid, split.test),
                        (loaded.train, loaded.valid, loaded.test)):
            assert sorted(zip(a.users.tolist(), a.items.tolist())) == \
                sorted(zip(b.users.tolist(), b.items.tolist()))
