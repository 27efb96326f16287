from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path
from typing import Any, Optional, Sequence

from .config import ConfigError, RunConfig, apply_overrides, dump_run_config, load_run_config, parse_overrides
from .harness import (
    EvalReport,
    compare,
    evaluate_fix_seq,
    evaluate_policy,
    format_trace,
    load_fix_seq_params,
    rollout,
    train,
    write_json,
    write_trace_csv,
)
from .policy import Policy
from .ppo import TrainingAborted
from .workers import WorkerPool


def _log(debug: bool, message: str) -> None:
    if debug:
        sys.stderr.write(f"[mp-insertion] {message}\n")
        sys.stderr.flush()


def _find_run_config(checkpoint: Path) -> Path:
    for parent in list(checkpoint.resolve().parents)[:3]:
        candidate = parent / "config.json"
        if candidate.exists():
            return candidate
    raise ConfigError([f"<file>: no config.json found above {checkpoint}; pass --config"])


def _load_config(args: argparse.Namespace, checkpoint: Optional[Path] = None) -> RunConfig:
    path = Path(args.config) if args.config else _find_run_config(checkpoint) if checkpoint else None
    if path is None:
        raise ConfigError(["<file>: --config is required"])
    cfg = load_run_config(path)
    changes: dict[str, Any] = parse_overrides(getattr(args, "set", None))
    if getattr(args, "task", None):
        changes.setdefault("task", {})["preset"] = args.task
    return apply_overrides(cfg, changes)


def _print_report(report: EvalReport) -> None:
    print(
        f"{report.method} on {report.task}: success {report.success_rate:.3f} over {report.trials} trials, "
        f"time {report.mean_time:.3f} ± {report.std_time:.3f} s"
    )


def _cmd_train(args: argparse.Namespace) -> int:
    cfg = _load_config(args)
    seeds = args.seed or list(cfg.seeds)
    if any(s < 0 for s in seeds):
        raise ConfigError([f"seeds: expected non-negative integers, got {seeds}"])
    cfg = cfg.with_overrides(seeds=tuple(seeds))
    out = Path(args.out) if args.out else Path(cfg.output_dir) / f"{cfg.method}-{cfg.task.preset}"
    _log(args.debug, f"config hash {cfg.config_hash()}, writing to {out}")
    train(cfg, out, debug=args.debug, progress=print)
    print(f"run directory: {out}")
    return 0


def _cmd_eval(args: argparse.Namespace) -> int:
    checkpoint = Path(args.checkpoint)
    if not checkpoint.exists():
        raise ValueError(f"checkpoint {checkpoint} does not exist")
    cfg = _load_config(args, checkpoint)
    trials = args.trials if args.trials is not None else cfg.eval.trials
    seed = args.seed if args.seed is not None else 0
    pool = None
    if cfg.trainer.workers > 1:
        out_dir = Path(args.out).parent if args.out else checkpoint.parent
        pool = WorkerPool(dump_run_config(cfg, out_dir / "eval-config.json"), cfg.trainer.workers, seed, debug=args.debug)
    try:
        if checkpoint.suffix == ".json":
            report = evaluate_fix_seq(load_fix_seq_params(checkpoint), cfg, trials, seed, pool=pool)
        else:
            report = evaluate_policy(Policy.load(checkpoint), cfg, trials, seed, pool=pool)
    finally:
        if pool is not None:
            pool.close()
    out = Path(args.out) if args.out else checkpoint.parent / "eval.json"
    write_json(out, {**report.to_dict(), "checkpoint": str(checkpoint), "seed": seed})
    _print_report(report)
    print(f"report: {out}")
    return 0


def _cmd_compare(args: argparse.Namespace) -> int:
    out = Path(args.out) if args.out else Path("compare")
    summary = compare([Path(r) for r in args.runs], out, threshold=args.threshold)
    for row in summary["steps_to_success"]:
        median = "not reached" if row["median_steps"] is None else f"{row['median_steps']:.0f} sim steps"
        print(f"{row['run']} ({row['method']}): {args.threshold:.0%} success at {median} ({row['seeds_reached']}/{row['seeds']} seeds)")
    for row in summary["performance"]:
        print(f"{row['run']} ({row['method']}): success {row['success_rate_mean']:.3f}, time {row['time_mean']:.3f} s")
    print(f"tables: {out}")
    return 0


def _cmd_rollout(args: argparse.Namespace) -> int:
    checkpoint = Path(args.checkpoint)
    if not checkpoint.exists():
        raise ValueError(f"checkpoint {checkpoint} does not exist")
    cfg = _load_config(args, checkpoint)
    record = rollout(Policy.load(checkpoint), cfg, args.seed if args.seed is not None else 0)
    for line in format_trace(record):
        print(line)
    if args.out:
        write_trace_csv(Path(args.out), record, cfg.config_hash())
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mp-insertion", description="Learn and compare manipulation-primitive policies for peg insertion")
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--debug", action="store_true", help="Enable verbose logging to stderr")

    p = sub.add_parser("train", parents=[common], help="Train one run per seed")
    p.add_argument("--config", required=True, help="Run configuration JSON")
    p.add_argument("--seed", type=int, action="append", help="Seed to train (repeatable); defaults to the config's seeds")
    p.add_argument("--out", help="Run directory (default <output_dir>/<method>-<task>)")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="Override a config field, e.g. trainer.workers=4")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", parents=[common], help="Evaluate a checkpoint over deterministic trials")
    p.add_argument("--checkpoint", required=True, help="Policy .npz or fix-seq parameter .json")
    p.add_argument("--config", help="Run configuration (default: config.json of the checkpoint's run)")
    p.add_argument("--task", help="Evaluate on another task preset")
    p.add_argument("--trials", type=int, help="Number of trials (default eval.trials)")
    p.add_argument("--seed", type=int, help="Base seed of the trial seeds (default 0)")
    p.add_argument("--out", help="Report path (default eval.json next to the checkpoint)")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="Override a config field")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("compare", parents=[common], help="Aggregate curves and evaluations of several runs")
    p.add_argument("runs", nargs="+", help="Run directories")
    p.add_argument("--out", help="Output directory for the tables (default ./compare)")
    p.add_argument("--threshold", type=float, default=0.6, help="Success rate milestone (default 0.6)")
    p.set_defaults(func=_cmd_compare)

    p = sub.add_parser("rollout", parents=[common], help="Print the MP trace of one episode")
    p.add_argument("--checkpoint", required=True, help="Policy .npz")
    p.add_argument("--config", help="Run configuration (default: config.json of the checkpoint's run)")
    p.add_argument("--task", help="Roll out on another task preset")
    p.add_argument("--seed", type=int, help="Episode seed (default 0)")
    p.add_argument("--out", help="Also write the trace as CSV")
    p.set_defaults(func=_cmd_rollout)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        for err in exc.errors:
            print(f"config error: {err}", file=sys.stderr)
        return 2
    except TrainingAborted as exc:
        print(f"training aborted: {exc}", file=sys.stderr)
        print(json.dumps(exc.diagnostics, indent=2, default=str), file=sys.stderr)
        return 1
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except RuntimeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
