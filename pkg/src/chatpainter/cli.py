"""Command-line entry point: datagen, train, generate, evaluate, score.

Exit codes: 0 success, 1 configuration/usage error, 2 runtime error.
"""
from __future__ import annotations

import argparse
import json
import sys
import traceback
from pathlib import Path

import numpy as np

from .config import ConfigError, RunConfig, configured_threads


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


def build_parser() -> _Parser:
    parser = _Parser(prog="chatpainter", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add_config_flags(p):
        p.add_argument("--config", help="flat key = value config file")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="config override; repeatable")
        p.add_argument("--seed", type=int, help="overrides the config seed")

    p = sub.add_parser("datagen", help="generate a synthetic dataset directory")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--resolutions", default="16,32", help="comma-separated, e.g. 16,32")
    add_config_flags(p)

    p = sub.add_parser("train", help="train one stage")
    p.add_argument("--stage", type=int, choices=(1, 2), required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--stage1-ckpt", help="Stage-I checkpoint (required for --stage 2)")
    add_config_flags(p)

    p = sub.add_parser("generate", help="generate one image per dataset pair")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    add_config_flags(p)

    p = sub.add_parser("evaluate", help="score a generated set against its test pairs")
    p.add_argument("--images", required=True, help="generated set directory (from generate)")
    p.add_argument("--data", required=True, help="test dataset directory")
    p.add_argument("--judge-data", help="real-render dataset for judge training (default: --data)")
    p.add_argument("--out", required=True)
    p.add_argument("--split-size", type=int, help="default: floor(eval.split_fraction * n)")
    add_config_flags(p)

    p = sub.add_parser("score", help="inception-style score from a posterior CSV")
    p.add_argument("--posteriors", required=True)
    p.add_argument("--splits", type=int, default=10)
    p.add_argument("--split-size", type=int, required=True)
    p.add_argument("--out", help="optional JSON report path")
    add_config_flags(p)

    return parser


def _resolve_config(args) -> RunConfig:
    cfg = RunConfig.from_file(getattr(args, "config", None), getattr(args, "set", []))
    if getattr(args, "seed", None) is not None:
        cfg.set("seed", args.seed)
    return cfg


def _cmd_datagen(args, cfg: RunConfig) -> None:
    from .scenes import RESOLUTIONS, generate_dataset
    from .training import write_run_manifest

    try:
        resolutions = [int(r) for r in str(args.resolutions).split(",") if r.strip()]
    except ValueError as exc:
        raise ConfigError(f"bad --resolutions value {args.resolutions!r}") from exc
    unsupported = [r for r in resolutions if r not in RESOLUTIONS]
    if unsupported:
        raise ConfigError(f"unsupported resolutions {unsupported}; choose from {sorted(RESOLUTIONS)}")
    if args.n < 1:
        raise ConfigError("--n must be >= 1")
    manifest = generate_dataset(args.n, cfg["seed"], resolutions, args.out)
    write_run_manifest(Path(args.out), "datagen", cfg.as_dict(),
                       {"n": manifest.n, "resolutions": list(manifest.resolutions),
                        "digest": manifest.digest})
    print(f"wrote {manifest.n} samples at {sorted(manifest.resolutions)} to {args.out}")
    print(f"digest {manifest.digest}")


def _cmd_train(args, cfg: RunConfig) -> None:
    from .training import train_stage

    if args.stage == 2 and not args.stage1_ckpt:
        raise ConfigError("--stage 2 requires --stage1-ckpt")
    final = train_stage(cfg, args.data, args.out, stage=args.stage, stage1_ckpt=args.stage1_ckpt)
    print(f"final checkpoint: {final}")


def _load_any_stage(path):
    from . import checkpoint as ckpt
    from .training import Stage1Gan, Stage2Gan

    _, meta = ckpt.load_checkpoint(path)
    stage = meta.get("stage")
    if stage == 1:
        return Stage1Gan.load(path)
    if stage == 2:
        return Stage2Gan.load(path)
    raise ckpt.CheckpointError(f"{path}: unrecognized stage {stage!r}")


def _cmd_generate(args, cfg: RunConfig) -> None:
    from .corpus import load_dataset
    from .evaluation import generate_eval_set
    from .training import write_run_manifest

    model = _load_any_stage(args.ckpt)
    samples = load_dataset(args.data)
    manifest = generate_eval_set(model, samples, args.out, seed=cfg["seed"])
    write_run_manifest(Path(args.out), "generate", cfg.as_dict(), manifest)
    print(f"generated {manifest['n']} images to {args.out}")
    print(f"digest {manifest['digest']}")


def _cmd_evaluate(args, cfg: RunConfig) -> None:
    from .corpus import load_dataset
    from .evaluation import evaluate_run
    from .training import write_run_manifest

    test_samples = load_dataset(args.data)
    judge_samples = test_samples if args.judge_data in (None, args.data) else load_dataset(args.judge_data)
    result = evaluate_run(
        args.images, test_samples, judge_samples, args.out,
        n_splits=cfg["eval.n_splits"], split_fraction=cfg["eval.split_fraction"],
        judge_epochs=cfg["eval.judge_epochs"], judge_batch_size=cfg["eval.judge_batch_size"],
        judge_lr=cfg["eval.judge_lr"], val_fraction=cfg["eval.val_fraction"],
        accuracy_floor=cfg["eval.accuracy_floor"], seed=cfg["seed"],
        split_size=args.split_size,
    )
    write_run_manifest(Path(args.out), "evaluate", cfg.as_dict(),
                       {"score": result["score"], "n": result["fidelity"]["n"]})
    score = result["score"]
    print(f"score mean {score['mean']:.4f} std {score['std']:.4f} "
          f"(n_splits {score['n_splits']}, split_size {score['split_size']})")
    for name, acc in result["fidelity"]["attributes"].items():
        print(f"fidelity {name}: {acc:.4f}")


def _cmd_score(args, cfg: RunConfig) -> None:
    from .evaluation import inception_style_score, validate_posteriors

    try:
        p = np.loadtxt(args.posteriors, delimiter=",", ndmin=2)
    except OSError:
        raise
    except ValueError as exc:
        raise ConfigError(f"cannot parse posteriors file {args.posteriors!r}: {exc}") from exc
    p = validate_posteriors(p)
    split_size = args.split_size
    if split_size > p.shape[0]:
        print(f"warning: split-size {split_size} exceeds {p.shape[0]} rows; clamping",
              file=sys.stderr)
        split_size = p.shape[0]
    report = inception_style_score(p, n_splits=args.splits, split_size=split_size, seed=cfg["seed"])
    payload = report.to_json()
    if args.out:
        with open(args.out, "w") as f:
            json.dump(payload, f, indent=2)
            f.write("\n")
    print(f"score mean {report.mean:.6f} std {report.std:.6f} "
          f"(n_splits {report.n_splits}, split_size {report.split_size}, seed {report.seed})")


_COMMANDS = {
    "datagen": _cmd_datagen,
    "train": _cmd_train,
    "generate": _cmd_generate,
    "evaluate": _cmd_evaluate,
    "score": _cmd_score,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return 1
    try:
        import torch

        torch.set_num_threads(configured_threads())
        cfg = _resolve_config(args)
        _COMMANDS[args.command](args, cfg)
        return 0
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # runtime failure: report and exit 2
        print(f"error: {exc}", file=sys.stderr)
        traceback.print_exc()
        return 2


if __name__ == "__main__":
    sys.exit(main())
