"""Command-line entry points: dataset preparation, training, spectrum
reports, and evaluation.

Exit codes: 0 success, 1 runtime/numerical failure, 2 usage/input error.
Config precedence: ``--set key=value`` > config file > built-in defaults.
The ``COMPACTREC_SEED`` environment variable, when set, overrides every
seed in the run config.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import diagnostics
from .data import (apply_k_core, build_adjacency, load_interactions,
                   load_snapshot, save_snapshot, split_per_user)
from .encoder import EmbeddingTable, forward
from .errors import CompactRecError
from .evaluation import degree_bucket_eval, groups_from_interactions, rank_and_score
from .trainer import TrainConfig, Trainer

USAGE_ERROR = 2
RUNTIME_ERROR = 1


def _fail(code, message):
    print(f"error: {message}", file=sys.stderr)
    raise SystemExit(code)


def _parse_floats(text):
    return tuple(float(x) for x in text.split(","))


def _parse_ints(text):
    return tuple(int(x) for x in text.split(","))


def _coerce(value):
    try:
        return json.loads(value)
    except json.JSONDecodeError:
        return value


def _load_config(path, overrides):
    payload = {}
    if path is not None:
        if not os.path.exists(path):
            _fail(USAGE_ERROR, f"config file not found: {path}")
        with open(path, "r", encoding="utf-8") as fh:
            payload = json.load(fh)
    for item in overrides or ():
        if "=" not in item:
            _fail(USAGE_ERROR, f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        payload[key.strip()] = _coerce(value.strip())
    env_seed = os.environ.get("COMPACTREC_SEED")
    if env_seed is not None:
        payload["seed_init"] = int(env_seed)
        payload["seed_batch"] = int(env_seed)
    try:
        return TrainConfig.from_dict(payload)
    except (TypeError, ValueError) as exc:
        _fail(USAGE_ERROR, f"bad config: {exc}")


def _fmt(x):
    return repr(float(x))


def _write_history_csv(path, history, cutoffs):
    # wall-clock seconds live in trainer.json, not here, so reruns with
    # identical inputs produce byte-identical files
    columns = ["epoch", "loss"]
    columns += [f"recall@{n}" for n in cutoffs] + [f"ndcg@{n}" for n in cutoffs]
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(columns) + "\n")
        for r in history:
            row = [str(r.epoch), _fmt(r.mean_loss)]
            row += [_fmt(r.recall[n]) for n in cutoffs]
            row += [_fmt(r.ndcg[n]) for n in cutoffs]
            fh.write(",".join(row) + "\n")


def cmd_prepare(args):
    if not os.path.exists(args.input):
        _fail(USAGE_ERROR, f"input file not found: {args.input}")
    ratios = _parse_floats(args.split)
    iset = load_interactions(args.input, format=args.format)
    if args.k_core > 1:
        iset = apply_k_core(iset, args.k_core)
    split = split_per_user(iset, ratios, args.seed)
    save_snapshot(split, args.out, k_core=args.k_core, ratios=ratios)
    print(f"wrote snapshot to {args.out}: {iset.num_users} users, "
          f"{iset.num_items} items, {len(iset)} interactions")
    return 0


def cmd_train(args):
    if not os.path.isdir(args.snapshot):
        _fail(USAGE_ERROR, f"snapshot directory not found: {args.snapshot}")
    split = load_snapshot(args.snapshot)
    if args.resume:
        if not os.path.exists(os.path.join(args.out, "trainer.json")):
            _fail(USAGE_ERROR, f"no resumable state in {args.out}")
        trainer = Trainer.load_state(args.out, split)
    else:
        config = _load_config(args.config, args.set)
        if args.max_epochs is not None:
            config.max_epochs = args.max_epochs
        trainer = Trainer(config, split)
    if args.max_epochs is not None:
        trainer.config.max_epochs = args.max_epochs
    result = trainer.run(on_epoch=lambda r: print(
        f"epoch {r.epoch}: loss {r.mean_loss:.6f} "
        f"ndcg@10 {r.ndcg[10]:.4f} ({r.seconds:.1f}s)"))
    os.makedirs(args.out, exist_ok=True)
    trainer.save_state(args.out)
    cache = forward(trainer.adj, result.table, trainer.config.L,
                    trainer.config.layer_weights)
    np.savez(
        os.path.join(args.out, "embeddings.npz"),
        e0_user=result.table.user,
        e0_item=result.table.item,
        user_out=cache.user_out,
        item_out=cache.item_out,
    )
    with open(os.path.join(args.out, "config.json"), "w", encoding="utf-8") as fh:
        json.dump(trainer.config.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    _write_history_csv(os.path.join(args.out, "history.csv"),
                       result.history, trainer.config.eval_cutoffs)
    print(f"best epoch {result.best_epoch}, "
          f"validation ndcg@10 {result.best_valid_ndcg:.4f}")
    return 0


def _load_checkpoint_embeddings(path):
    npz_path = os.path.join(path, "embeddings.npz")
    if not os.path.exists(npz_path):
        _fail(USAGE_ERROR, f"checkpoint not found: {npz_path}")
    return np.load(npz_path)


def cmd_spectrum(args):
    arrays = _load_checkpoint_embeddings(args.checkpoint)
    key = "user_out" if args.side == "user" else "item_out"
    E = arrays[key]
    report = diagnostics.spectrum(diagnostics.covariance(E))
    report.write_csv(args.out + ".csv")
    report.write_summary(args.out + ".json")
    print(f"effective rank {report.effective_rank:.2f} "
          f"({len(report.scaled_values)} values); wrote {args.out}.csv/.json")
    return 0


def cmd_evaluate(args):
    arrays = _load_checkpoint_embeddings(args.checkpoint)
    if not os.path.isdir(args.snapshot):
        _fail(USAGE_ERROR, f"snapshot directory not found: {args.snapshot}")
    split = load_snapshot(args.snapshot)
    cutoffs = _parse_ints(args.cutoffs)
    gt = groups_from_interactions(split.test)
    mask = groups_from_interactions(split.train)
    metrics = rank_and_score(arrays["user_out"], arrays["item_out"], gt, mask, cutoffs)
    payload = {
        str(n): {"recall": metrics.recall[n], "ndcg": metrics.ndcg[n]}
        for n in cutoffs
    }
    payload["num_users"] = metrics.num_users
    if args.degree_buckets:
        edges = _parse_ints(args.degree_buckets)
        item_deg = split.train.item_degrees()
        buckets = degree_bucket_eval(arrays["user_out"], arrays["item_out"],
                                     gt, mask, cutoffs, edges, item_deg)
        payload["buckets"] = {
            label: (None if m is None else {
                str(n): {"recall": m.recall[n], "ndcg": m.ndcg[n]} for n in cutoffs
            })
            for label, m in buckets.items()
        }
    text = json.dumps(payload, indent=2, sort_keys=True) + "\n"
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text)
    print(text, end="")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="compactrec",
        description=__doc__,
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", help="filter, split, and snapshot a dataset")
    p.add_argument("--input", required=True)
    p.add_argument("--format", default="tsv", choices=["tsv", "txt", "whitespace"])
    p.add_argument("--k-core", type=int, default=5, dest="k_core")
    p.add_argument("--split", default="0.8,0.1,0.1")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("train", help="train a model on a prepared snapshot")
    p.add_argument("--snapshot", required=True)
    p.add_argument("--config", default=None, help="JSON run config")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override a config key (repeatable)")
    p.add_argument("--max-epochs", type=int, default=None, dest="max_epochs")
    p.add_argument("--out", required=True, help="checkpoint directory")
    p.add_argument("--resume", action="store_true",
                   help="continue a previous run from --out")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("spectrum", help="covariance singular-value report")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--side", default="user", choices=["user", "item"])
    p.add_argument("--out", required=True, help="output path prefix")
    p.set_defaults(func=cmd_spectrum)

    p = sub.add_parser("evaluate", help="test-set ranking metrics")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--snapshot", required=True)
    p.add_argument("--cutoffs", default="10,20,50")
    p.add_argument("--degree-buckets", default=None, dest="degree_buckets",
                   help="ascending item-degree bucket edges, e.g. 0,100,200")
    p.add_argument("--out", default=None, help="write the metrics JSON here")
    p.set_defaults(func=cmd_evaluate)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except SystemExit:
        raise
    except CompactRecError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return RUNTIME_ERROR
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return USAGE_ERROR


if __name__ == "__main__":
    sys.exit(main())
