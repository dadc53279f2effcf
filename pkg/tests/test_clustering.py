"""Co-occurrence memberships, transport-based self-labeling, classifier head."""

import numpy as np
import pytest
from scipy.optimize import linprog

from compactrec.clustering import (
    MembershipSet,
    build_cooccurrence,
    classifier_forward,
    full_cluster_memberships,
    init_head,
    ipot_assign,
    memberships_from_assignments,
    sample_memberships,
    thresholded_memberships,
    update_classifier,
)
from compactrec.data import InteractionSet
from compactrec.errors import SizingError


def head_params(head):
    return [head.W1, head.b1, head.W2, head.b2]


def make_set(pairs, num_users, num_items):
    users = np.asarray([p[0] for p in pairs], dtype=np.int64)
    items = np.asarray([p[1] for p in pairs], dtype=np.int64)
    return InteractionSet(num_users=num_users, num_items=num_items,
                          users=users, items=items)


class TestBuildCooccurrence:
    def test_shared_item_counts(self):
        # u0 holds {i0, i1}, u1 holds {i0}: one shared item, degree 2 diag
        iset = make_set([(0, 0), (0, 1), (1, 0)], 2, 2)
        A = build_cooccurrence(iset, side="user").matrix.toarray()
        assert A[0, 1] == 1 and A[1, 0] == 1
        assert A[0, 0] == 2 and A[1, 1] == 1

    def test_disjoint_users_off_diagonal_zero(self):
        iset = make_set([(0, 0), (1, 1)], 2, 2)
        A = build_cooccurrence(iset, side="user").matrix.toarray()
        assert A[0, 1] == 0 and A[1, 0] == 0

    def test_matches_dense_oracle(self):
        rng = np.random.default_rng(0)
        pairs = sorted({(int(rng.integers(30)), int(rng.integers(30)))
                        for _ in range(260)})
        iset = make_set(pairs, 30, 30)
        A = build_cooccurrence(iset, side="user").matrix.toarray()
        R = iset.to_csr().toarray()
        assert np.array_equal(A, R @ R.T)
        B = build_cooccurrence(iset, side="item").matrix.toarray()
        assert np.array_equal(B, R.T @ R)

    def test_symmetric_with_degree_diagonal(self):
        rng = np.random.default_rng(1)
        pairs = sorted({(int(rng.integers(12)), int(rng.integers(15)))
                        for _ in range(70)})
        iset = make_set(pairs, 12, 15)
        g = build_cooccurrence(iset, side="user")
        A = g.matrix.toarray()
        assert np.array_equal(A, A.T)
        assert np.array_equal(np.diag(A), iset.user_degrees())

    def test_nnz_cap(self):
        iset = make_set([(u, i) for u in range(6) for i in range(6)], 6, 6)
        with pytest.raises(SizingError):
            build_cooccurrence(iset, side="user", nnz_cap=10)


class TestThresholdedMemberships:
    def test_pair_shares_indicator(self):
        iset = make_set([(0, 0), (0, 1), (1, 0), (1, 1)], 2, 2)
        g = build_cooccurrence(iset, side="user")
        members = thresholded_memberships(g, eta=1)
        assert members.mode == "indicator"
        # both users exceed the threshold against both columns
        assert members.weights.min() == 1.0

    def test_eta_above_off_diagonal_keeps_self_loops_only(self):
        # u0 holds two items (diagonal 2), the overlap with u1 is 1
        iset = make_set([(0, 0), (0, 1), (1, 0)], 2, 2)
        g = build_cooccurrence(iset, side="user")
        members = thresholded_memberships(g, eta=2)
        # only u0's self-loop survives; u1's column is dropped entirely
        assert members.weights.shape == (2, 1)
        assert members.weights[:, 0].tolist() == [1.0, 0.0]

    def test_eta_above_everything_raises(self):
        iset = make_set([(0, 0), (1, 0)], 2, 1)
        g = build_cooccurrence(iset, side="user")
        with pytest.raises(ValueError):
            thresholded_memberships(g, eta=2)

    def test_matches_brute_force(self):
        rng = np.random.default_rng(2)
        pairs = sorted({(int(rng.integers(20)), int(rng.integers(25)))
                        for _ in range(160)})
        iset = make_set(pairs, 20, 25)
        g = build_cooccurrence(iset, side="user")
        A = g.matrix.toarray()
        members = thresholded_memberships(g, eta=2)
        brute = (A >= 2).astype(float)
        kept = brute[:, brute.any(axis=0)]
        assert np.array_equal(members.weights, kept)

    def test_monotone_in_eta(self):
        rng = np.random.default_rng(3)
        pairs = sorted({(int(rng.integers(15)), int(rng.integers(15)))
                        for _ in range(120)})
        iset = make_set(pairs, 15, 15)
        g = build_cooccurrence(iset, side="user")
        lo = thresholded_memberships(g, eta=1).weights.sum()
        hi = thresholded_memberships(g, eta=3).weights.sum()
        assert hi <= lo

    def test_quantile_default(self):
        rng = np.random.default_rng(4)
        pairs = sorted({(int(rng.integers(15)), int(rng.integers(15)))
                        for _ in range(120)})
        iset = make_set(pairs, 15, 15)
        g = build_cooccurrence(iset, side="user")
        members = thresholded_memberships(g, quantile=0.9)
        assert members.mode == "indicator"
        assert set(np.unique(members.weights)) <= {0.0, 1.0}


class TestSampleMemberships:
    def _members(self, K):
        n = 10
        W = np.zeros((n, K))
        W[np.arange(n), np.arange(n) % K] = 1.0
        return MembershipSet(W, "indicator")

    def test_m_equals_k_identity(self):
        m = self._members(5)
        out = sample_memberships(m, 5, seed=0)
        assert np.array_equal(np.sort(out.weights, axis=1),
                              np.sort(m.weights, axis=1))
        assert out.K == 5

    def test_m_greater_than_k_returns_all(self):
        m = self._members(4)
        out = sample_memberships(m, 10, seed=0)
        assert out.K == 4

    def test_single_cluster(self):
        m = self._members(5)
        out = sample_memberships(m, 1, seed=1)
        assert out.K == 1

    def test_seed_determinism(self):
        m = self._members(8)
        a = sample_memberships(m, 3, seed=7)
        b = sample_memberships(m, 3, seed=7)
        assert np.array_equal(a.weights, b.weights)


class TestClassifierForward:
    def test_zero_logits_uniform(self):
        head = init_head(4, 3, seed=0)
        for w in head_params(head):
            w[:] = 0.0
        E = np.ones((5, 4))
        P = classifier_forward(E, head)
        assert P.shape == (3, 5)
        assert np.allclose(P, 1.0 / 15.0, atol=1e-15)

    def test_column_sums(self):
        rng = np.random.default_rng(5)
        head = init_head(6, 4, seed=1)
        E = rng.normal(size=(12, 6))
        P = classifier_forward(E, head)
        assert np.abs(P.sum(axis=0) - 1.0 / 12).max() < 1e-12

    def test_dominant_logit_saturates(self):
        head = init_head(2, 3, seed=2)
        for w in head_params(head):
            w[:] = 0.0
        head.b2[0] = 30.0
        P = classifier_forward(np.zeros((4, 2)), head)
        assert np.all(P[0] > (1.0 / 4) * (1 - 1e-9))
        assert P[1:].max() < 1e-12


class TestIpotAssign:
    def test_uniform_p_uniform_q(self):
        P = np.full((3, 6), 1.0 / 18)
        res = ipot_assign(P, iterations=200)
        assert np.abs(res.Q - 1.0 / 18).max() < 1e-9

    def test_matches_2x2_linear_program(self):
        # strongly diagonal preference; compare against scipy's LP solution
        P = np.array([[0.49, 0.01], [0.01, 0.49]])
        res = ipot_assign(P, iterations=5000, beta=1.0, tol=1e-8)
        cost = -np.log(P)
        # transport polytope: row sums 1/2, column sums 1/2
        A_eq = np.array([
            [1, 1, 0, 0],
            [0, 0, 1, 1],
            [1, 0, 1, 0],
            [0, 1, 0, 1],
        ], dtype=float)
        b_eq = np.array([0.5, 0.5, 0.5, 0.5])
        lp = linprog(cost.ravel(), A_eq=A_eq, b_eq=b_eq, bounds=(0, None))
        assert lp.success
        assert np.abs(res.Q.ravel() - lp.x).max() < 1e-3
        assert res.Q[0, 1] < 1e-3 and res.Q[1, 0] < 1e-3

    def test_marginals_on_random_instance(self):
        rng = np.random.default_rng(6)
        logits = rng.normal(size=(10, 64))
        P = np.exp(logits)
        P /= P.sum()
        res = ipot_assign(P, iterations=20000, tol=1e-7)
        K, n = P.shape
        assert res.converged
        assert np.abs(res.Q.sum(axis=1) - 1.0 / K).max() <= 1e-6
        assert np.abs(res.Q.sum(axis=0) - 1.0 / n).max() <= 1e-6
        assert res.Q.min() >= 0.0

    def test_beats_uniform_plan(self):
        rng = np.random.default_rng(7)
        P = rng.random((4, 16)) + 0.05
        P /= P.sum()
        res = ipot_assign(P, iterations=20000, tol=1e-7)
        cost = -np.log(np.maximum(P, 1e-30))
        uniform = np.full_like(P, 1.0 / P.size)
        assert (res.Q * cost).sum() <= (uniform * cost).sum() + 1e-6

    def test_nonconvergence_flag(self):
        rng = np.random.default_rng(8)
        P = rng.random((5, 20))
        P /= P.sum()
        res = ipot_assign(P, iterations=1, tol=1e-12)
        assert not res.converged


class TestMembershipsFromAssignments:
    def test_uniform_q_soft(self):
        from compactrec.clustering import AssignmentMatrix
        K, n = 4, 10
        Q = np.full((K, n), 1.0 / (K * n))
        res = ipot_assign(np.full((K, n), 1.0 / (K * n)), iterations=100)
        members = memberships_from_assignments(res, mode="soft")
        assert np.abs(members.weights - 1.0 / K).max() < 1e-8

    def test_hard_recovers_permutation(self):
        P = np.eye(4) * 0.24 + 0.0025
        P = P[:, ::-1]  # anti-diagonal preference
        res = ipot_assign(P / P.sum(), iterations=5000, tol=1e-8)
        members = memberships_from_assignments(res, mode="hard")
        assert np.array_equal(members.weights, np.eye(4)[:, ::-1].T)

    def test_soft_rows_sum_to_one(self):
        rng = np.random.default_rng(9)
        P = rng.random((6, 40)) + 0.01
        P /= P.sum()
        res = ipot_assign(P, iterations=20000, tol=1e-7)
        members = memberships_from_assignments(res, mode="soft")
        assert np.abs(members.weights.sum(axis=1) - 1.0).max() < 1e-8
        assert members.weights.min() >= 0.0


class TestUpdateClassifier:
    def test_stationary_when_q_equals_p(self):
        rng = np.random.default_rng(10)
        head = init_head(4, 3, seed=3)
        E = rng.normal(size=(8, 4))
        P = classifier_forward(E, head)  # K x n, columns sum to 1/n
        # targets equal to predictions: cross-entropy gradient wrt logits is 0
        from compactrec.clustering import AssignmentMatrix
        Q = AssignmentMatrix(Q=P / P.shape[1] * P.shape[1], converged=True,
                             iterations=0, marginal_error=0.0)
        before = [w.copy() for w in head_params(head)]
        new_head, _ = update_classifier(E, Q, head, step_size=0.5)
        for old, new in zip(before, new_head_params(head)):
            assert np.abs(new - old).max() < 1e-10

    def test_one_hot_loss_is_log_pmax(self):
        rng = np.random.default_rng(11)
        head = init_head(3, 4, seed=4)
        E = rng.normal(size=(6, 3))
        P = classifier_forward(E, head)
        p = P * 6  # per-entity softmax probabilities
        arg = p.argmax(axis=0)
        onehot = np.zeros_like(P)
        onehot[arg, np.arange(6)] = 1.0 / 6
        from compactrec.clustering import AssignmentMatrix
        Q = AssignmentMatrix(Q=onehot, converged=True, iterations=0,
                             marginal_error=0.0)
        _, loss = update_classifier(E, Q, head, step_size=0.0)
        expected = -np.log(p[arg, np.arange(6)]).mean()
        assert loss == pytest.approx(expected, abs=1e-10)

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(12)
        d, K, n = 4, 3, 10
        head = init_head(d, K, seed=5)
        E = rng.normal(size=(n, d))
        W = rng.random((K, n))
        W /= W.sum()
        from compactrec.clustering import AssignmentMatrix
        Q = AssignmentMatrix(Q=W / W.sum(axis=0, keepdims=True) / n,
                             converged=True, iterations=0, marginal_error=0.0)

        def loss_at(params):
            trial = init_head(d, K, seed=5)
            for dst, src in zip(head_params(trial), params):
                dst[:] = src
            _, val = update_classifier(E, Q, trial, step_size=0.0)
            return val

        base = [w.copy() for w in head_params(head)]
        stepped, _ = update_classifier(E, Q, head, step_size=1.0)
        grads = [old - new for old, new in zip(base, head_params(stepped))]

        h = 1e-6
        for p_idx in range(len(base)):
            fd = np.zeros_like(base[p_idx])
            for idx in np.ndindex(base[p_idx].shape):
                up = [w.copy() for w in base]
                dn = [w.copy() for w in base]
                up[p_idx][idx] += h
                dn[p_idx][idx] -= h
                fd[idx] = (loss_at(up) - loss_at(dn)) / (2 * h)
            denom = max(np.abs(fd).max(), 1e-12)
            assert np.abs(grads[p_idx] - fd).max() / denom <= 1e-5


class TestFullClusterMemberships:
    def test_single_soft_cluster(self):
        m = full_cluster_memberships(7)
        assert m.K == 1
        assert m.mode == "soft"
        assert np.array_equal(m.weights, np.ones((7, 1)))

    def test_restrict(self):
        W = np.eye(4)
        m = MembershipSet(W, "hard")
        sub = m.restrict(np.array([1, 3]))
        assert np.array_equal(sub, W[[1, 3]])
