"""Command-line entry point.

Subcommands: gen-data, train, eval, gradcheck, export-heatmap.
Exit codes: 0 success, 1 compute failure, 2 usage/config error.
Every run echoes its fully resolved configuration beside its outputs.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import tasks
from .config import ConfigError, RunConfig, echo_lines, parse_config_file, parse_kv_lines, resolve
from .model import CheckpointError, TransformerModel
from .training import evaluate, gradcheck_report, run_training
from .heatmap import relevance_maps, write_maps

USAGE_ERROR = 2
COMPUTE_ERROR = 1


def _load_run_config(args) -> RunConfig:
    kv = {}
    if args.config:
        if not os.path.exists(args.config):
            raise ConfigError(f"config file not found: {args.config}")
        kv.update(parse_config_file(args.config))
    overrides = parse_kv_lines(args.set or [], origin="--set")
    kv.update(overrides)
    return resolve(kv)


def _write_echo(run: RunConfig, out_dir: str, name: str = "resolved.cfg") -> None:
    with open(os.path.join(out_dir, name), "w") as fh:
        fh.write("\n".join(echo_lines(run)))
        fh.write("\n")


def cmd_gen_data(args) -> int:
    run = _load_run_config(args)
    os.makedirs(args.out, exist_ok=True)
    train, test = tasks.generate(run.dataset)
    tasks.save(train, os.path.join(args.out, "train.jsonl"))
    tasks.save(test, os.path.join(args.out, "test.jsonl"))
    _write_echo(run, args.out, "dataset.cfg")
    print(f"wrote {len(train)} train / {len(test)} test trajectories to {args.out}")
    return 0


def cmd_train(args) -> int:
    run = _load_run_config(args)
    train_path = os.path.join(args.data, "train.jsonl")
    test_path = os.path.join(args.data, "test.jsonl")
    if not os.path.exists(train_path) or not os.path.exists(test_path):
        print(f"error: dataset not found under {args.data}", file=sys.stderr)
        return USAGE_ERROR
    train_trajs = tasks.load(train_path)
    test_trajs = tasks.load(test_path)
    os.makedirs(args.out, exist_ok=True)
    _write_echo(run, args.out)
    metrics_path = os.path.join(args.out, "metrics.jsonl")
    try:
        model, metrics = run_training(run.model, run.train, train_trajs, test_trajs)
    except Exception as exc:  # metrics file still written on early stop
        with open(metrics_path, "w") as fh:
            fh.write(json.dumps({"kind": "aborted", "error": str(exc)}, sort_keys=True) + "\n")
        print(f"training failed: {exc}", file=sys.stderr)
        return COMPUTE_ERROR
    with open(metrics_path, "w") as fh:
        for record in metrics:
            fh.write(json.dumps(record, sort_keys=True))
            fh.write("\n")
    model.save(os.path.join(args.out, "checkpoint.npz"))
    final = [m for m in metrics if m["kind"] == "final"]
    if final:
        print(f"final eval accuracy: {final[-1]['eval_accuracy']:.3f}")
    return 0


def cmd_eval(args) -> int:
    if not os.path.exists(args.data):
        print(f"error: dataset file not found: {args.data}", file=sys.stderr)
        return USAGE_ERROR
    trajs = tasks.load(args.data)
    if not trajs:
        print("error: empty test set", file=sys.stderr)
        return USAGE_ERROR
    model = TransformerModel.load(args.checkpoint, trainable=False)
    report = evaluate(model, trajs, max_gen_tokens=args.max_gen_tokens)
    lines = [f"overall {report['accuracy']:.4f} ({report['n']} examples)"]
    for fam, acc in sorted(report["per_family"].items()):
        lines.append(f"family {fam}: {acc:.4f}")
    print("\n".join(lines))
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "eval_report.json"), "w") as fh:
            json.dump(report, fh, sort_keys=True, indent=2)
    return 0


def cmd_gradcheck(args) -> int:
    report = gradcheck_report(seed=args.seed)
    print(f"stage-1 max relative error: {report['stage1_max_rel_error']:.3e}")
    print(f"stage-2 max relative error: {report['stage2_max_rel_error']:.3e}")
    print(f"worst parameter: {report['worst_parameter']} (stage {report['worst_stage']})")
    print(f"elapsed: {report['elapsed_seconds']:.1f}s")
    print("PASS" if report["passed"] else "FAIL")
    return 0 if report["passed"] else COMPUTE_ERROR


def cmd_export_heatmap(args) -> int:
    if not os.path.exists(args.data):
        print(f"error: dataset file not found: {args.data}", file=sys.stderr)
        return USAGE_ERROR
    trajs = tasks.load(args.data)
    if not 0 <= args.index < len(trajs):
        print(f"error: trajectory index {args.index} out of range", file=sys.stderr)
        return USAGE_ERROR
    traj = trajs[args.index]
    if not traj.steps:
        print("error: trajectory has no latent segments", file=sys.stderr)
        return USAGE_ERROR
    model = TransformerModel.load(args.checkpoint, trainable=False)
    os.makedirs(args.out, exist_ok=True)
    maps = relevance_maps(model, traj, sigma=args.sigma)
    paths = write_maps(maps, args.out)
    print(f"wrote {len(paths)} relevance maps to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="latentweave",
        description="Interleaved latent-text reasoning at desk scale: data "
                    "generation, two-stage training, evaluation, gradient "
                    "checking, and relevance-map export.")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_config_args(p):
        p.add_argument("--config", help="key=value config file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="config override (repeatable)")

    p = sub.add_parser("gen-data", help="generate a synthetic dataset")
    add_config_args(p)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="run the two-stage training pipeline")
    add_config_args(p)
    p.add_argument("--data", required=True, help="dataset directory (train.jsonl/test.jsonl)")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="greedy-decode accuracy of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="trajectory jsonl file")
    p.add_argument("--out", help="optional report directory")
    p.add_argument("--max-gen-tokens", type=int, default=160)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference audit of both losses")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("export-heatmap", help="write per-step relevance maps")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="trajectory jsonl file")
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--sigma", type=float, default=1.0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export_heatmap)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return USAGE_ERROR
    except CheckpointError as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return USAGE_ERROR
    except tasks.DatasetFormatError as exc:
        print(f"dataset error: {exc}", file=sys.stderr)
        return USAGE_ERROR
    except Exception as exc:
        print(f"error: {exc}", file=sys.stderr)
        return COMPUTE_ERROR


if __name__ == "__main__":
    sys.exit(main())
