"""Command-line entry point: ``merl-maze <command> ...``.

Relative output paths are resolved under ``$MERL_MAZE_OUT`` (default
``runs``).  ``--config`` takes a flat ``key = value`` file; see
:mod:`merl_maze.config`.
"""
from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from . import config as cfgmod
from .borl import BorlConfig, borl_run
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .env import Dataset, generate_dataset, load_dataset, save_dataset
from .features import PARAM_NAMES
from .harness import (
    RERANK_VARIANTS,
    ExperimentSpec,
    analyze_buffers,
    build_fixed_buffers,
    evaluate,
    load_results,
    report,
    rerank_baseline,
    run_experiment,
    train_setting,
)
from .merl import merl_train
from .objectives import ExperienceBuffer


def _out(path: str | None, default: str) -> Path:
    p = Path(path or default)
    return p if p.is_absolute() else cfgmod.output_root() / p


def _spec(args) -> ExperimentSpec:
    return ExperimentSpec.from_dict(cfgmod.load_config(getattr(args, "config", None)))


def _split(ds: Dataset, name: str):
    return {"train": ds.train, "val": ds.val, "test": ds.test}[name]


def cmd_gen_data(args) -> int:
    ds = generate_dataset(args.seed, args.n, args.k, args.n_train_val, args.n_test)
    out = _out(args.out, "data.jsonl")
    out.parent.mkdir(parents=True, exist_ok=True)
    save_dataset(ds, out)
    print(f"wrote {len(ds.train)}/{len(ds.val)}/{len(ds.test)} contexts to {out}")
    return 0


def cmd_train(args) -> int:
    spec = _spec(args)
    ds = load_dataset(args.data)
    theta, phi, info = train_setting(spec, ds, args.setting, args.seed)
    policy = spec.make_policy()
    out = _out(args.out, f"{args.setting}-seed{args.seed}.json")
    save_checkpoint(out, Checkpoint(policy, theta, phi, meta={"setting": args.setting, "seed": args.seed,
                                                               "config_hash": spec.config_hash()}))
    tb, _ = build_fixed_buffers(ds, "oracle" if args.setting == "oracle" else "underspecified",
                                spec.n_spurious, args.seed)
    tb.to_jsonl(out.with_suffix(".buffer.jsonl"))
    print(f"{args.setting} seed {args.seed}: train {evaluate(policy, theta, ds.train):.3f} "
          f"val {evaluate(policy, theta, ds.val):.3f} -> {out}")
    return 0


def cmd_meta_train(args) -> int:
    spec = _spec(args)
    ds = load_dataset(args.data)
    warm = load_checkpoint(args.warm_start)
    policy = warm.policy
    tb, vb = build_fixed_buffers(ds, "underspecified", spec.n_spurious, args.seed)
    metrics = _out(args.metrics, f"merl-seed{args.seed}.csv")
    metrics.parent.mkdir(parents=True, exist_ok=True)
    with open(metrics, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["epoch", "train_acc", "val_acc", "o_val", "meta_grad_norm"])

        def cb(epoch, theta, phi, value, gnorm):
            if epoch % args.eval_every == 0 or epoch == spec.merl.epochs - 1:
                w.writerow([epoch, f"{evaluate(policy, theta, ds.train):.4f}", f"{evaluate(policy, theta, ds.val):.4f}",
                            f"{value:.6g}", f"{gnorm:.6g}"])

        rng = np.random.default_rng([args.seed, 2])
        theta, phi, _ = merl_train(policy, ds.train, ds.val, tb, vb, spec.merl, rng, theta=warm.theta, callback=cb)
    out = _out(args.out, f"merl-seed{args.seed}.json")
    save_checkpoint(out, Checkpoint(policy, theta, phi, epoch=spec.merl.epochs,
                                    meta={"setting": "merl", "seed": args.seed, "config_hash": spec.config_hash()}))
    print(f"merl seed {args.seed}: val {evaluate(policy, theta, ds.val):.3f} -> {out}, metrics {metrics}")
    return 0


def cmd_borl(args) -> int:
    spec = _spec(args)
    ds = load_dataset(args.data)
    policy = spec.make_policy()
    if args.buffer:
        base = ExperienceBuffer.from_jsonl(args.buffer)
    else:
        base, _ = build_fixed_buffers(ds, "underspecified", spec.n_spurious, args.seed)
    cfg: BorlConfig = spec.borl
    if args.trials:
        cfg = BorlConfig(**{**cfg.to_dict(), "trials": args.trials})
    res = borl_run(policy, ds.train, ds.val, base, cfg, args.seed)
    out_dir = _out(args.out_dir, f"borl-seed{args.seed}")
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "trials.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["k", *PARAM_NAMES, "v", "best_so_far", "error"])
        for t in res.trials:
            w.writerow([t.k, *(f"{x:.6g}" for x in t.phi), f"{t.value:.4f}", f"{t.best_so_far:.4f}", t.error])
    save_checkpoint(out_dir / "best.json", Checkpoint(policy, res.best_theta, res.best_phi,
                                                      meta={"setting": "borl", "seed": args.seed}))
    print(f"borl seed {args.seed}: best val {max(t.value for t in res.trials):.3f} -> {out_dir}")
    return 0


def cmd_eval(args) -> int:
    ds = load_dataset(args.data)
    ck = load_checkpoint(args.checkpoint)
    acc = evaluate(ck.policy, ck.theta, _split(ds, args.split))
    print(f"{args.split} accuracy {acc:.4f}")
    return 0


def cmd_rerank(args) -> int:
    ds = load_dataset(args.data)
    ck = load_checkpoint(args.checkpoint)
    greedy = evaluate(ck.policy, ck.theta, ds.test)
    variants = RERANK_VARIANTS if args.variant == "all" else (args.variant,)
    for v in variants:
        r = rerank_baseline(ck.policy, ck.theta, ds, v, args.n_samples, args.seed, args.budget)
        print(f"{v}: val {r.val_accuracy:.4f} test {r.test_accuracy:.4f} (greedy {greedy:.4f}, "
              f"change {r.test_accuracy - greedy:+.4f})")
    return 0


def cmd_analyze_buffers(args) -> int:
    ds = load_dataset(args.data)
    contexts = _split(ds, args.split)
    buffers = {Path(p).name.split(".")[0]: ExperienceBuffer.from_jsonl(p) for p in args.buffers}
    paths = analyze_buffers(buffers, contexts, _out(args.out_dir, "buffers"), figures=not args.no_figures)
    for name, p in paths.items():
        print(f"{name}: {p}")
    return 0


def cmd_report(args) -> int:
    out_dir = _out(args.out_dir, "report")
    if args.results:
        rows = load_results(args.results)
        spec = None
    else:
        spec = _spec(args)
        if args.n_seeds:
            spec = ExperimentSpec.from_dict({**spec.to_dict(), "n_seeds": args.n_seeds})
        ds = load_dataset(args.data)
        rows, _ = run_experiment(spec, ds, log=print)
    paths = report(rows, out_dir, spec, figures=not args.no_figures)
    print(paths["summary"].read_text(), end="")
    for name, p in paths.items():
        print(f"{name}: {p}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="merl-maze", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a blind-maze dataset (JSONL)")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--n", type=int, default=7, help="grid side")
    g.add_argument("--k", type=int, default=14, help="number of traps")
    g.add_argument("--n-train-val", type=int, default=300)
    g.add_argument("--n-test", type=int, default=300)
    g.add_argument("--out")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a policy in one reward setting")
    t.add_argument("--setting", required=True, choices=("oracle", "underspecified", "borl"))
    t.add_argument("--data", required=True)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--config")
    t.add_argument("--out")
    t.set_defaults(func=cmd_train)

    m = sub.add_parser("meta-train", help="meta-learn the auxiliary reward from a warm start")
    m.add_argument("--data", required=True)
    m.add_argument("--warm-start", required=True, help="underspecified checkpoint")
    m.add_argument("--seed", type=int, default=0)
    m.add_argument("--config")
    m.add_argument("--out")
    m.add_argument("--metrics")
    m.add_argument("--eval-every", type=int, default=10)
    m.set_defaults(func=cmd_meta_train)

    b = sub.add_parser("borl", help="search the auxiliary reward with GP bandits")
    b.add_argument("--data", required=True)
    b.add_argument("--buffer", help="buffer snapshot (JSONL); default builds the fixed buffers")
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--trials", type=int)
    b.add_argument("--config")
    b.add_argument("--out-dir")
    b.set_defaults(func=cmd_borl)

    e = sub.add_parser("eval", help="greedy accuracy of a checkpoint")
    e.add_argument("--data", required=True)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--split", default="test", choices=("train", "val", "test"))
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("rerank", help="linear reranking baselines")
    r.add_argument("--data", required=True)
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--variant", default="all", choices=("all", *RERANK_VARIANTS))
    r.add_argument("--n-samples", type=int, default=8)
    r.add_argument("--budget", type=int, default=200)
    r.add_argument("--seed", type=int, default=0)
    r.set_defaults(func=cmd_rerank)

    a = sub.add_parser("analyze-buffers", help="buffer diversity curves (CSV + figure)")
    a.add_argument("--data", required=True)
    a.add_argument("buffers", nargs="+", help="buffer snapshots (JSONL)")
    a.add_argument("--split", default="train", choices=("train", "val", "test"))
    a.add_argument("--out-dir")
    a.add_argument("--no-figures", action="store_true")
    a.set_defaults(func=cmd_analyze_buffers)

    rp = sub.add_parser("report", help="run the settings sweep (or reload results) and write tables and figures")
    rp.add_argument("--data")
    rp.add_argument("--results", help="existing results.json to re-render")
    rp.add_argument("--config")
    rp.add_argument("--n-seeds", type=int)
    rp.add_argument("--out-dir")
    rp.add_argument("--no-figures", action="store_true")
    rp.set_defaults(func=cmd_report)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "report" and not (args.results or args.data):
        build_parser().error("report needs --data or --results")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
