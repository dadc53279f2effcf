"""End-to-end training loop: mini-batch iteration, loss assembly, Adam
updates, epoch-boundary membership refresh, and early stopping on
validation NDCG@10.
"""

from __future__ import annotations

import json
import os
import time
from dataclasses import dataclass, field, asdict

import numpy as np

from . import clustering, objectives
from .data import build_adjacency
from .encoder import EmbeddingTable, backprop, forward, init_embeddings
from .errors import TrainingDivergedError
from .rng import generator
from .evaluation import groups_from_interactions, rank_and_score

__all__ = [
    "TrainConfig",
    "AdamState",
    "EpochReport",
    "TrainResult",
    "Trainer",
    "adam_step",
    "minibatch_iter",
    "train",
]

OBJECTIVES = ("bpr", "infonce", "directau", "nclg", "ncl")


@dataclass
class TrainConfig:
    """All knobs for one training run. Defaults follow the reference
    hyperparameter grids: lr 1e-3, batch 2048, d 64, eps^2 0.05, K 300,
    alpha 0.5, patience 10."""

    objective: str = "ncl"
    d: int = 64
    L: int = 2
    batch_size: int = 2048
    learning_rate: float = 1e-3
    alpha: float = 0.5
    epsilon_sq: float = 0.05
    K_user: int = 300
    K_item: int = 300
    eta: float | None = None          # absolute co-occurrence threshold (nclg)
    eta_quantile: float = 0.9         # per-column quantile threshold (nclg)
    membership_sample: int = 50       # clusters sampled per batch
    membership_mode: str = "soft"     # soft | hard (ncl assignments)
    tau: float = 0.2                  # infonce temperature
    lam: float = 1.0                  # directau uniformity weight
    max_epochs: int = 200
    patience: int = 10
    seed_init: int = 0
    seed_batch: int = 0
    eval_cutoffs: tuple = (10, 20, 50)
    init_scale: float = 0.1
    layer_weights: tuple | None = None
    valid_user_cap: int = 5000
    classifier_steps: int = 30        # self-labeling refresh iterations
    classifier_lr: float = 0.1
    classifier_hidden: int | None = None
    ipot_iterations: int = 100
    ipot_beta: float = 1.0
    ipot_tol: float = 1e-6
    # ablation toggles for the two rate terms, per side
    use_global_rate_user: bool = True
    use_global_rate_item: bool = True
    use_cluster_rate_user: bool = True
    use_cluster_rate_item: bool = True

    def __post_init__(self):
        if self.objective not in OBJECTIVES:
            raise ValueError(f"objective must be one of {OBJECTIVES}")
        for name in ("d", "L", "batch_size", "max_epochs", "patience",
                     "membership_sample", "K_user", "K_item"):
            if getattr(self, name) < 0 or (name != "L" and getattr(self, name) == 0):
                raise ValueError(f"{name} must be positive")
        if 10 not in tuple(self.eval_cutoffs):
            raise ValueError("eval_cutoffs must include 10 (early stopping uses NDCG@10)")
        self.eval_cutoffs = tuple(int(c) for c in self.eval_cutoffs)
        if self.layer_weights is not None:
            self.layer_weights = tuple(float(w) for w in self.layer_weights)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, payload):
        known = cls.__dataclass_fields__
        unknown = set(payload) - set(known)
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**payload)


@dataclass
class AdamState:
    """First/second moment accumulators for one parameter tensor."""

    m: np.ndarray
    v: np.ndarray
    step: int = 0

    @classmethod
    def like(cls, param):
        return cls(m=np.zeros_like(param), v=np.zeros_like(param))


def adam_step(param, grad, state: AdamState, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """Standard bias-corrected Adam update, in place."""
    state.step += 1
    state.m = beta1 * state.m + (1.0 - beta1) * grad
    state.v = beta2 * state.v + (1.0 - beta2) * grad * grad
    m_hat = state.m / (1.0 - beta1 ** state.step)
    v_hat = state.v / (1.0 - beta2 ** state.step)
    param -= lr * m_hat / (np.sqrt(v_hat) + eps)
    return param, state


@dataclass
class EpochReport:
    epoch: int
    mean_loss: float
    recall: dict
    ndcg: dict
    seconds: float
    membership_stats: dict = field(default_factory=dict)


@dataclass
class TrainResult:
    table: EmbeddingTable      # best-validation snapshot (layer-0 tables)
    history: list
    best_epoch: int
    best_valid_ndcg: float
    config: TrainConfig


def _epoch_rng(seed, epoch, *tags):
    return generator(seed, epoch, *tags)


def minibatch_iter(pairs, batch_size, epoch, seed, num_items=None, user_pos=None,
                   sample_negatives=False):
    """Shuffled mini-batches of positive pairs, optionally with uniform
    negatives rejected against each user's train positives.

    Every pair appears exactly once per epoch; the final short batch is
    kept. Deterministic for fixed (seed, epoch).
    """
    pairs = np.asarray(pairs)
    rng = _epoch_rng(seed, epoch)
    order = rng.permutation(len(pairs))
    for start in range(0, len(pairs), batch_size):
        batch = pairs[order[start:start + batch_size]]
        u, i = batch[:, 0], batch[:, 1]
        if not sample_negatives:
            yield u, i
            continue
        j = rng.integers(0, num_items, size=len(u))
        for row in range(len(u)):
            while j[row] in user_pos[u[row]]:
                j[row] = rng.integers(0, num_items)
        yield u, i, j


class Trainer:
    """Owns the training state so runs can be checkpointed and resumed."""

    def __init__(self, config: TrainConfig, split):
        self.config = config
        self.split = split
        self.adj = build_adjacency(split.train)
        nU, nI = split.train.num_users, split.train.num_items
        self.table = init_embeddings(nU, nI, config.d, config.seed_init, config.init_scale)
        self.opt_user = AdamState.like(self.table.user)
        self.opt_item = AdamState.like(self.table.item)
        self.pairs = split.train.pairs()
        self.user_pos = [set() for _ in range(nU)]
        for u, i in self.pairs:
            self.user_pos[u].add(i)
        self.train_mask = [np.fromiter(s, dtype=np.int64) for s in self.user_pos]
        self.valid_gt = groups_from_interactions(split.valid)
        self.epoch = 0
        self.history = []
        self.best_ndcg = -np.inf
        self.best_epoch = 0
        self.best_table = self.table.copy()
        self.memberships_user = None
        self.memberships_item = None
        self.head_user = None
        self.head_item = None
        self._init_memberships()

    # -- membership machinery ------------------------------------------

    def _init_memberships(self):
        cfg = self.config
        nU, nI = self.table.user.shape[0], self.table.item.shape[0]
        if cfg.objective == "nclg":
            graph_u = clustering.build_cooccurrence(self.split.train, side="user")
            graph_i = clustering.build_cooccurrence(self.split.train, side="item")
            self.memberships_user = clustering.thresholded_memberships(
                graph_u, eta=cfg.eta, quantile=cfg.eta_quantile
            )
            self.memberships_item = clustering.thresholded_memberships(
                graph_i, eta=cfg.eta, quantile=cfg.eta_quantile
            )
        elif cfg.objective == "ncl":
            # warm up with one full cluster until the first refresh so the
            # solver never clusters random initial embeddings
            self.memberships_user = clustering.full_cluster_memberships(nU)
            self.memberships_item = clustering.full_cluster_memberships(nI)
            self.head_user = clustering.init_head(
                cfg.d, cfg.K_user, hidden=cfg.classifier_hidden, seed=cfg.seed_init + 1
            )
            self.head_item = clustering.init_head(
                cfg.d, cfg.K_item, hidden=cfg.classifier_hidden, seed=cfg.seed_init + 2
            )

    def _refresh_memberships(self):
        """Epoch-boundary refresh. Returns a stats dict for the report."""
        cfg = self.config
        if cfg.objective == "nclg":
            return {
                "clusters_user": self.memberships_user.K,
                "clusters_item": self.memberships_item.K,
            }
        if cfg.objective != "ncl" or cfg.classifier_steps == 0:
            return {}
        cache = forward(self.adj, self.table, cfg.L, cfg.layer_weights)
        stats = {}
        for side, E, head_attr, mem_attr in (
            ("user", cache.user_out, "head_user", "memberships_user"),
            ("item", cache.item_out, "head_item", "memberships_item"),
        ):
            head = getattr(self, head_attr)
            assignment = None
            ce = np.nan
            for _ in range(cfg.classifier_steps):
                P = clustering.classifier_forward(E, head)
                assignment = clustering.ipot_assign(
                    P, iterations=cfg.ipot_iterations,
                    beta=cfg.ipot_beta, tol=cfg.ipot_tol,
                )
                head, ce = clustering.update_classifier(
                    E, assignment.Q, head, cfg.classifier_lr
                )
            setattr(self, head_attr, head)
            setattr(self, mem_attr, clustering.memberships_from_assignments(
                assignment, mode=cfg.membership_mode
            ))
            stats[f"classifier_ce_{side}"] = ce
            stats[f"ipot_converged_{side}"] = assignment.converged
        return stats

    def _batch_memberships(self, memberships, rows, epoch, batch_index, side_tag):
        """Restrict memberships to batch rows and sample m clusters."""
        cfg = self.config
        W = memberships.restrict(rows)
        K = W.shape[1]
        m = cfg.membership_sample
        if m < K:
            rng = _epoch_rng(cfg.seed_batch, epoch, batch_index, side_tag)
            W = W[:, np.sort(rng.choice(K, size=m, replace=False))]
        return W

    # -- loss assembly ---------------------------------------------------

    def _compact_side(self, out, idx, memberships, toggles, epoch, b_idx, side_tag,
                      grad_out):
        """Compactness contribution for one side; returns the loss value."""
        cfg = self.config
        uniq, inv = np.unique(idx, return_inverse=True)
        E = out[uniq].T  # coding-rate layout: columns are entities
        W = self._batch_memberships(memberships, uniq, epoch, b_idx, side_tag)
        use_cluster, use_global = toggles
        value = 0.0
        grad = np.zeros_like(E)
        if use_cluster:
            clustered = objectives.per_cluster_coding_rate(E, cfg.epsilon_sq, W)
            value += clustered.value
            grad += clustered.grads["E"]
        if use_global:
            total = objectives.coding_rate(E, cfg.epsilon_sq)
            value -= total.value
            grad -= total.grads["E"]
        grad_out[uniq] += cfg.alpha * grad.T
        return value

    def _batch_loss(self, cache, batch, epoch, b_idx, grad_u_out, grad_i_out):
        cfg = self.config
        user_out, item_out = cache.user_out, cache.item_out
        if cfg.objective == "bpr":
            u, i, j = batch
            res = objectives.bpr_loss(user_out[u], item_out[i], item_out[j])
            np.add.at(grad_u_out, u, res.grads["user"])
            np.add.at(grad_i_out, i, res.grads["pos"])
            np.add.at(grad_i_out, j, res.grads["neg"])
            return res.value
        u, i = batch
        if cfg.objective == "infonce":
            res = objectives.infonce_loss(user_out[u], item_out[i], cfg.tau)
            np.add.at(grad_u_out, u, res.grads["a"])
            np.add.at(grad_i_out, i, res.grads["b"])
            return res.value
        align = objectives.alignment_loss(user_out[u], item_out[i])
        np.add.at(grad_u_out, u, align.grads["user"])
        np.add.at(grad_i_out, i, align.grads["item"])
        if cfg.objective == "directau":
            uniq_u = np.unique(u)
            uniq_i = np.unique(i)
            unif_u = objectives.uniformity_loss(user_out[uniq_u])
            unif_i = objectives.uniformity_loss(item_out[uniq_i])
            grad_u_out[uniq_u] += cfg.lam * unif_u.grads["E"]
            grad_i_out[uniq_i] += cfg.lam * unif_i.grads["E"]
            return align.value + cfg.lam * (unif_u.value + unif_i.value)
        # nclg / ncl; the first ncl epoch predates any membership refresh
        # and runs with a single full cluster, whose compactness is
        # identically zero, so it trains on alignment alone
        value = align.value
        value += cfg.alpha * self._compact_side(
            user_out, u, self.memberships_user,
            (cfg.use_cluster_rate_user, cfg.use_global_rate_user),
            epoch, b_idx, 0, grad_u_out,
        )
        value += cfg.alpha * self._compact_side(
            item_out, i, self.memberships_item,
            (cfg.use_cluster_rate_item, cfg.use_global_rate_item),
            epoch, b_idx, 1, grad_i_out,
        )
        return value

    # -- epoch loop --------------------------------------------------------

    def _evaluate_valid(self):
        cfg = self.config
        cache = forward(self.adj, self.table, cfg.L, cfg.layer_weights)
        eligible = np.flatnonzero([len(g) > 0 for g in self.valid_gt])
        users = eligible
        if len(eligible) > cfg.valid_user_cap:
            rng = _epoch_rng(cfg.seed_batch, 0, 2)
            users = np.sort(rng.choice(eligible, size=cfg.valid_user_cap, replace=False))
        return rank_and_score(
            cache.user_out, cache.item_out, self.valid_gt, self.train_mask,
            cfg.eval_cutoffs, users=users,
        )

    def step_epoch(self) -> EpochReport:
        cfg = self.config
        self.epoch += 1
        started = time.perf_counter()
        needs_neg = cfg.objective == "bpr"
        batches = minibatch_iter(
            self.pairs, cfg.batch_size, self.epoch, cfg.seed_batch,
            num_items=self.table.item.shape[0],
            user_pos=self.user_pos, sample_negatives=needs_neg,
        )
        losses = []
        for b_idx, batch in enumerate(batches):
            cache = forward(self.adj, self.table, cfg.L, cfg.layer_weights)
            grad_u_out = np.zeros_like(cache.user_out)
            grad_i_out = np.zeros_like(cache.item_out)
            value = self._batch_loss(cache, batch, self.epoch, b_idx,
                                     grad_u_out, grad_i_out)
            if not np.isfinite(value):
                raise TrainingDivergedError(self.epoch, b_idx, value)
            g_user, g_item = backprop(self.adj, cache, grad_u_out, grad_i_out)
            adam_step(self.table.user, g_user, self.opt_user, cfg.learning_rate)
            adam_step(self.table.item, g_item, self.opt_item, cfg.learning_rate)
            losses.append(value)
        stats = self._refresh_memberships()
        metrics = self._evaluate_valid()
        report = EpochReport(
            epoch=self.epoch,
            mean_loss=float(np.mean(losses)) if losses else 0.0,
            recall=metrics.recall,
            ndcg=metrics.ndcg,
            seconds=time.perf_counter() - started,
            membership_stats=stats,
        )
        self.history.append(report)
        if metrics.ndcg[10] > self.best_ndcg:
            self.best_ndcg = metrics.ndcg[10]
            self.best_epoch = self.epoch
            self.best_table = self.table.copy()
        return report

    def should_stop(self) -> bool:
        if self.epoch >= self.config.max_epochs:
            return True
        return self.epoch - self.best_epoch >= self.config.patience

    def run(self, on_epoch=None) -> TrainResult:
        while not self.should_stop():
            report = self.step_epoch()
            if on_epoch is not None:
                on_epoch(report)
            if self.should_stop():
                break
        return TrainResult(
            table=self.best_table,
            history=self.history,
            best_epoch=self.best_epoch,
            best_valid_ndcg=self.best_ndcg,
            config=self.config,
        )

    # -- checkpointing ------------------------------------------------------

    def save_state(self, directory):
        os.makedirs(directory, exist_ok=True)
        arrays = {
            "e0_user": self.table.user,
            "e0_item": self.table.item,
            "best_user": self.best_table.user,
            "best_item": self.best_table.item,
            "adam_user_m": self.opt_user.m,
            "adam_user_v": self.opt_user.v,
            "adam_item_m": self.opt_item.m,
            "adam_item_v": self.opt_item.v,
        }
        if self.memberships_user is not None:
            arrays["memberships_user"] = self.memberships_user.weights
            arrays["memberships_item"] = self.memberships_item.weights
        for tag, head in (("user", self.head_user), ("item", self.head_item)):
            if head is not None:
                arrays[f"head_{tag}_W1"] = head.W1
                arrays[f"head_{tag}_b1"] = head.b1
                arrays[f"head_{tag}_W2"] = head.W2
                arrays[f"head_{tag}_b2"] = head.b2
        np.savez(os.path.join(directory, "state.npz"), **arrays)
        meta = {
            "epoch": self.epoch,
            "best_epoch": self.best_epoch,
            "best_ndcg": self.best_ndcg,
            "adam_user_step": self.opt_user.step,
            "adam_item_step": self.opt_item.step,
            "memberships_mode_user": getattr(self.memberships_user, "mode", None),
            "memberships_mode_item": getattr(self.memberships_item, "mode", None),
            "history": [asdict(r) for r in self.history],
            "config": self.config.to_dict(),
        }
        with open(os.path.join(directory, "trainer.json"), "w", encoding="utf-8") as fh:
            json.dump(meta, fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load_state(cls, directory, split):
        with open(os.path.join(directory, "trainer.json"), "r", encoding="utf-8") as fh:
            meta = json.load(fh)
        config = TrainConfig.from_dict(meta["config"])
        trainer = cls(config, split)
        arrays = np.load(os.path.join(directory, "state.npz"))
        trainer.table = EmbeddingTable(arrays["e0_user"].copy(), arrays["e0_item"].copy())
        trainer.best_table = EmbeddingTable(arrays["best_user"].copy(), arrays["best_item"].copy())
        trainer.opt_user = AdamState(arrays["adam_user_m"].copy(), arrays["adam_user_v"].copy(),
                                     meta["adam_user_step"])
        trainer.opt_item = AdamState(arrays["adam_item_m"].copy(), arrays["adam_item_v"].copy(),
                                     meta["adam_item_step"])
        if "memberships_user" in arrays:
            trainer.memberships_user = clustering.MembershipSet(
                arrays["memberships_user"].copy(), meta["memberships_mode_user"])
            trainer.memberships_item = clustering.MembershipSet(
                arrays["memberships_item"].copy(), meta["memberships_mode_item"])
        for tag in ("user", "item"):
            if f"head_{tag}_W1" in arrays:
                head = clustering.ClassifierHead(
                    W1=arrays[f"head_{tag}_W1"].copy(),
                    b1=arrays[f"head_{tag}_b1"].copy(),
                    W2=arrays[f"head_{tag}_W2"].copy(),
                    b2=arrays[f"head_{tag}_b2"].copy(),
                )
                setattr(trainer, f"head_{tag}", head)
        trainer.epoch = meta["epoch"]
        trainer.best_epoch = meta["best_epoch"]
        trainer.best_ndcg = meta["best_ndcg"]
        trainer.history = [
            EpochReport(
                epoch=r["epoch"], mean_loss=r["mean_loss"],
                recall={int(k): v for k, v in r["recall"].items()},
                ndcg={int(k): v for k, v in r["ndcg"].items()},
                seconds=r["seconds"], membership_stats=r["membership_stats"],
            )
            for r in meta["history"]
        ]
        return trainer


def train(config: TrainConfig, split, on_epoch=None) -> TrainResult:
    """Train from scratch; convenience wrapper around :class:`Trainer`."""
    return Trainer(config, split).run(on_epoch=on_epoch)
