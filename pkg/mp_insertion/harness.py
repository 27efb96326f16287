from __future__ import annotations

import csv
import json
import math
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Callable, Optional, Sequence

import numpy as np

from .baselines import (
    EePoseEnv,
    FixSeqParams,
    discretize_catalog,
    evaluate_fix_seq_trials,
    optimize_fix_seq,
    trial_seeds,
)
from .cmaes import write_trace
from .config import RunConfig, dump_run_config
from .env import PegInsertionEnv, hybrid_action_set
from .policy import Policy
from .ppo import CurvePoint, Trainer, read_curve
from .primitives import build_catalog, catalog_table
from .workers import WorkerPool, policy_to_payload

SUCCESS_MILESTONE = 0.6
FIX_SEQ_PARAMS_FILE = "fix_seq_params.json"


def _log(debug: bool, message: str) -> None:
    if debug:
        sys.stderr.write(f"[mp-insertion] {message}\n")
        sys.stderr.flush()


def write_json(path: Path, payload: dict) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


# ---- factories ------------------------------------------------------------------------


def make_actions(cfg: RunConfig):
    catalog = build_catalog(cfg.catalog_config())
    if cfg.method == "discrete":
        return discretize_catalog(catalog, cfg.catalog.discrete_values_per_param).actions
    return hybrid_action_set(catalog)


def make_env(cfg: RunConfig):
    """The environment a method trains and evaluates in; ``None`` for fix-seq."""
    if cfg.method == "fix-seq":
        return None
    if cfg.method == "ee-pose":
        return EePoseEnv(cfg.sim_config(), cfg.episode_config(), cfg.ee_pose_config())
    return PegInsertionEnv(cfg.sim_config(), cfg.episode_config(), make_actions(cfg))


def make_policy(cfg: RunConfig, env, seed: int) -> Policy:
    p = cfg.policy
    policy = Policy(env.layout, discrete_hidden=p.discrete_hidden, head_hidden=p.head_hidden, log_std_init=p.log_std_init, seed=seed)
    policy.meta = {"method": cfg.method, "config_hash": cfg.config_hash(), "physics_hash": cfg.physics_hash()}
    return policy


def check_compatible(policy: Policy, env) -> None:
    if policy.layout.dims != env.layout.dims or policy.layout.groups != env.layout.groups:
        raise ValueError(
            f"checkpoint action layout ({policy.layout.n_actions} actions) does not match the "
            f"configured environment ({env.layout.n_actions} actions)"
        )


# ---- episodes and evaluation ----------------------------------------------------------


@dataclass(frozen=True)
class StepRecord:
    index: int
    mp: str
    theta: list[float]
    status: str
    duration: float
    reward: float
    goal_distance: float


@dataclass(frozen=True)
class TrialRecord:
    seed: int
    success: bool
    time: float
    sequence: list[str]
    steps: list[StepRecord] = field(default_factory=list)

    def to_dict(self, with_steps: bool = False) -> dict[str, Any]:
        out = {"seed": self.seed, "success": self.success, "time": self.time, "sequence": self.sequence}
        if with_steps:
            out["steps"] = [asdict(s) for s in self.steps]
        return out


def run_episode(policy: Policy, env, seed: int, *, deterministic: bool = True) -> TrialRecord:
    """Roll one episode; inference mode picks the argmax MP and the mean parameters."""
    obs, _ = env.reset(seed=seed)
    rng = np.random.default_rng(seed)
    steps: list[StepRecord] = []
    success = False
    duration = 0.0
    while True:
        group = env.action_group(obs)
        action = policy.act(obs, group, rng=rng, deterministic=deterministic)
        obs, reward, terminated, truncated, info = env.step(action)
        duration += float(info.get("duration", 0.0))
        steps.append(
            StepRecord(
                index=len(steps),
                mp=str(info.get("mp", "")),
                theta=[float(v) for v in info.get("theta", list(action.params))],
                status=str(info.get("status", "")),
                duration=float(info.get("duration", 0.0)),
                reward=float(reward),
                goal_distance=float(info.get("goal_distance", math.nan)),
            )
        )
        if terminated or truncated:
            success = bool(info.get("is_success", False))
            break
    return TrialRecord(seed=seed, success=success, time=duration, sequence=[s.mp for s in steps], steps=steps)


def run_fix_seq_trials(params: FixSeqParams, cfg: RunConfig, seeds: Sequence[int]) -> list[TrialRecord]:
    outcomes = evaluate_fix_seq_trials(params, cfg.sim_config(), cfg.episode_config(), seeds, catalog_cfg=cfg.catalog_config())
    return [
        TrialRecord(seed=int(s), success=o.success, time=o.execution_time, sequence=list(o.sequence))
        for s, o in zip(seeds, outcomes)
    ]


@dataclass(frozen=True)
class EvalReport:
    method: str
    task: str
    trials: int
    success_rate: float
    mean_time: float
    std_time: float
    records: list[TrialRecord]
    config_hash: str
    physics_hash: str
    extra: dict = field(default_factory=dict)

    @classmethod
    def from_records(cls, cfg: RunConfig, records: Sequence[TrialRecord], **extra: Any) -> "EvalReport":
        if not records:
            raise ValueError("an evaluation needs at least one trial")
        times = np.array([r.time for r in records], dtype=float)
        successes = sum(1 for r in records if r.success)
        return cls(
            method=cfg.method,
            task=cfg.task.preset,
            trials=len(records),
            success_rate=successes / len(records),
            mean_time=float(times.mean()),
            std_time=float(times.std()),
            records=list(records),
            config_hash=cfg.config_hash(),
            physics_hash=cfg.physics_hash(),
            extra=dict(extra),
        )

    def to_dict(self) -> dict[str, Any]:
        return {
            "method": self.method,
            "task": self.task,
            "trials": self.trials,
            "success_rate": self.success_rate,
            "mean_time": self.mean_time,
            "std_time": self.std_time,
            "config_hash": self.config_hash,
            "physics_hash": self.physics_hash,
            "records": [r.to_dict() for r in self.records],
            **self.extra,
        }


def _records_from_dicts(rows: Sequence[dict]) -> list[TrialRecord]:
    return [TrialRecord(seed=int(r["seed"]), success=bool(r["success"]), time=float(r["time"]), sequence=list(r["sequence"])) for r in rows]


def evaluate_policy(policy: Policy, cfg: RunConfig, trials: int, seed: int, *, pool: Optional[WorkerPool] = None) -> EvalReport:
    if trials < 1:
        raise ValueError(f"trials must be >= 1, got {trials}")
    seeds = trial_seeds(seed, trials)
    if pool is not None:
        rows = pool.evaluate({"kind": "policy", "policy": policy_to_payload(policy)}, seeds)
        records = _records_from_dicts(rows)
    else:
        env = make_env(cfg)
        check_compatible(policy, env)
        records = [run_episode(policy, env, s) for s in seeds]
    return EvalReport.from_records(cfg, records)


def evaluate_fix_seq(params: FixSeqParams, cfg: RunConfig, trials: int, seed: int, *, pool: Optional[WorkerPool] = None) -> EvalReport:
    if trials < 1:
        raise ValueError(f"trials must be >= 1, got {trials}")
    seeds = trial_seeds(seed, trials)
    if pool is not None:
        records = _records_from_dicts(pool.evaluate({"kind": "fix_seq", "params": params.values.tolist()}, seeds))
    else:
        records = run_fix_seq_trials(params, cfg, seeds)
    post_approach = [max(len(r.sequence) - 1, 0) for r in records]
    return EvalReport.from_records(
        cfg,
        records,
        params=params.as_dict(),
        mean_mps_attempted=float(np.mean([len(r.sequence) for r in records])),
        mean_post_approach=float(np.mean(post_approach)),
    )


# ---- training -------------------------------------------------------------------------


def run_metadata(cfg: RunConfig) -> dict[str, Any]:
    meta = cfg.metadata()
    catalog = build_catalog(cfg.catalog_config())
    meta["catalog_table"] = catalog_table(catalog)
    if cfg.method == "discrete":
        meta["discrete_actions"] = len(discretize_catalog(catalog, cfg.catalog.discrete_values_per_param))
    return meta


def _fix_seq_evaluator(pool: Optional[WorkerPool], seeds: Sequence[int], time_weight: float):
    if pool is None:
        return None

    def evaluate(candidates: np.ndarray) -> list[float]:
        values = []
        for u in candidates:
            rows = pool.evaluate({"kind": "fix_seq", "params": FixSeqParams.from_normalized(u).values.tolist()}, seeds)
            records = _records_from_dicts(rows)
            rate = sum(r.success for r in records) / len(records)
            values.append((1.0 - rate) + time_weight * float(np.mean([r.time for r in records])))
        return values

    return evaluate


def train_seed(
    cfg: RunConfig,
    seed: int,
    run_dir: Path,
    *,
    config_path: Optional[Path] = None,
    debug: bool = False,
    progress: Optional[Callable[[str], None]] = None,
) -> Path:
    """Train one seed into ``run_dir/seed_<seed>``."""
    seed_dir = Path(run_dir) / f"seed_{seed}"
    seed_dir.mkdir(parents=True, exist_ok=True)
    pool = None
    if cfg.trainer.workers > 1:
        if config_path is None:
            config_path = dump_run_config(cfg, Path(run_dir) / "config.json")
        pool = WorkerPool(config_path, cfg.trainer.workers, seed, debug=debug)
    try:
        if cfg.method == "fix-seq":
            fs = cfg.fix_seq
            evaluator = _fix_seq_evaluator(pool, trial_seeds(seed, fs.trials_per_eval), fs.time_weight)

            def on_generation(rec):
                if progress:
                    progress(f"seed {seed} generation {rec.generation}: best_f={rec.best_f:.4f} sigma={rec.sigma:.4f}")

            params, result = optimize_fix_seq(
                cfg.sim_config(),
                cfg.episode_config(),
                trials_per_eval=fs.trials_per_eval,
                generations=fs.generations,
                sigma0=fs.sigma0,
                seed=seed,
                time_weight=fs.time_weight,
                catalog_cfg=cfg.catalog_config(),
                evaluate=evaluator,
                on_generation=on_generation,
            )
            write_trace(seed_dir / "trace.csv", result.history, cfg.config_hash())
            write_json(
                seed_dir / FIX_SEQ_PARAMS_FILE,
                {"config_hash": cfg.config_hash(), "params": params.as_dict(), "values": params.values.tolist(), "best_f": result.best_f},
            )
            return seed_dir

        env = make_env(cfg)
        policy = make_policy(cfg, env, seed)

        def on_update(point: CurvePoint, stats) -> None:
            if progress:
                progress(
                    f"seed {seed} update {point.updates}: steps={point.cum_sim_steps} "
                    f"success={point.success_rate:.3f} return={point.mean_return:.3f}"
                )

        trainer = Trainer(
            policy,
            cfg.trainer.ppo(seed),
            env=env,
            collector=pool.collect if pool is not None else None,
            out_dir=seed_dir,
            budget=cfg.budget_sim_steps,
            config_hash=cfg.config_hash(),
            meta={"seed": seed, "method": cfg.method},
            debug=debug,
            on_update=on_update,
        )
        trainer.train()
        return seed_dir
    finally:
        if pool is not None:
            pool.close()


def train(
    cfg: RunConfig,
    out_dir: Path,
    *,
    seeds: Optional[Sequence[int]] = None,
    debug: bool = False,
    progress: Optional[Callable[[str], None]] = None,
) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    config_path = dump_run_config(cfg, out_dir / "config.json")
    write_json(out_dir / "metadata.json", run_metadata(cfg))
    for seed in seeds if seeds is not None else cfg.seeds:
        _log(debug, f"training {cfg.method} seed {seed} into {out_dir}")
        train_seed(cfg, seed, out_dir, config_path=config_path, debug=debug, progress=progress)
    return out_dir


# ---- comparison -----------------------------------------------------------------------


@dataclass(frozen=True)
class RunSummary:
    path: Path
    method: str
    config_hash: str
    physics_hash: str
    curves: dict[int, list[CurvePoint]]
    evals: list[dict]


def load_run(run_dir: Path) -> RunSummary:
    run_dir = Path(run_dir)
    meta_path = run_dir / "metadata.json"
    if not meta_path.exists():
        raise ValueError(f"run {run_dir}: missing metadata.json")
    meta = json.loads(meta_path.read_text(encoding="utf-8"))
    curves: dict[int, list[CurvePoint]] = {}
    evals: list[dict] = []
    seed_dirs = sorted(p for p in run_dir.glob("seed_*") if p.is_dir())
    if not seed_dirs:
        raise ValueError(f"run {run_dir}: no seed directories")
    for seed_dir in seed_dirs:
        seed = int(seed_dir.name.split("_", 1)[1])
        curve_path = seed_dir / "curve.csv"
        if meta["method"] != "fix-seq":
            if not curve_path.exists():
                raise ValueError(f"run {run_dir}: missing curve file {curve_path}")
            curve_hash, points = read_curve(curve_path)
            if curve_hash != meta["config_hash"]:
                raise ValueError(f"run {run_dir}: {curve_path} has config hash {curve_hash}, metadata says {meta['config_hash']}")
            curves[seed] = points
        eval_path = seed_dir / "eval.json"
        if eval_path.exists():
            evals.append(json.loads(eval_path.read_text(encoding="utf-8")))
    return RunSummary(run_dir, meta["method"], meta["config_hash"], meta["physics_hash"], curves, evals)


def steps_to_success(points: Sequence[CurvePoint], threshold: float = SUCCESS_MILESTONE) -> Optional[int]:
    for p in points:
        if p.success_rate >= threshold:
            return p.cum_sim_steps
    return None


def align_curves(curves: Sequence[Sequence[CurvePoint]], grid: np.ndarray) -> np.ndarray:
    """Step-hold each curve's success rate onto ``grid`` → array (n_curves, len(grid))."""
    out = np.zeros((len(curves), len(grid)))
    for i, points in enumerate(curves):
        xs = np.array([p.cum_sim_steps for p in points], dtype=float)
        ys = np.array([p.success_rate for p in points], dtype=float)
        if xs.size == 0:
            continue
        idx = np.searchsorted(xs, grid, side="right") - 1
        out[i] = np.where(idx >= 0, ys[np.clip(idx, 0, None)], 0.0)
    return out


def compare(run_dirs: Sequence[Path], out_dir: Path, *, threshold: float = SUCCESS_MILESTONE, grid_points: int = 100) -> dict[str, Any]:
    if len(run_dirs) < 2:
        raise ValueError("compare needs at least two runs")
    runs = [load_run(Path(d)) for d in run_dirs]
    physics = {r.physics_hash for r in runs}
    if len(physics) > 1:
        raise ValueError("runs use incompatible simulation configs: " + ", ".join(f"{r.path}={r.physics_hash}" for r in runs))
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    physics_hash = runs[0].physics_hash

    curve_runs = [r for r in runs if r.curves]
    max_steps = max((p.cum_sim_steps for r in curve_runs for pts in r.curves.values() for p in pts), default=0)
    grid = np.linspace(0, max_steps, grid_points) if max_steps > 0 else np.zeros(1)
    with (out_dir / "curves.csv").open("w", newline="") as fh:
        fh.write(f"# config_hash={physics_hash}\n")
        writer = csv.writer(fh)
        writer.writerow(["run", "method", "cum_sim_steps", "success_mean", "success_std", "seeds"])
        for r in curve_runs:
            aligned = align_curves(list(r.curves.values()), grid)
            for x, mean, std in zip(grid, aligned.mean(axis=0), aligned.std(axis=0)):
                writer.writerow([r.path.name, r.method, int(x), f"{mean:.6f}", f"{std:.6f}", len(r.curves)])

    milestones = []
    for r in curve_runs:
        per_seed = {seed: steps_to_success(pts, threshold) for seed, pts in sorted(r.curves.items())}
        reached = [v for v in per_seed.values() if v is not None]
        milestones.append(
            {
                "run": r.path.name,
                "method": r.method,
                "config_hash": r.config_hash,
                "per_seed": per_seed,
                "median_steps": float(np.median(reached)) if reached else None,
                "seeds_reached": len(reached),
                "seeds": len(per_seed),
            }
        )
    with (out_dir / "steps_to_success.csv").open("w", newline="") as fh:
        fh.write(f"# config_hash={physics_hash}\n")
        writer = csv.writer(fh)
        writer.writerow(["run", "method", "threshold", "median_steps", "seeds_reached", "seeds"])
        for m in milestones:
            median = "" if m["median_steps"] is None else f"{m['median_steps']:.0f}"
            writer.writerow([m["run"], m["method"], threshold, median, m["seeds_reached"], m["seeds"]])

    performance = []
    for r in runs:
        if not r.evals:
            continue
        rates = [e["success_rate"] for e in r.evals]
        times = [e["mean_time"] for e in r.evals]
        performance.append(
            {
                "run": r.path.name,
                "method": r.method,
                "success_rate_mean": float(np.mean(rates)),
                "success_rate_std": float(np.std(rates)),
                "time_mean": float(np.mean(times)),
                "time_std": float(np.std(times)),
                "evaluations": len(r.evals),
            }
        )
    with (out_dir / "performance.csv").open("w", newline="") as fh:
        fh.write(f"# config_hash={physics_hash}\n")
        writer = csv.writer(fh)
        writer.writerow(["run", "method", "success_rate_mean", "success_rate_std", "time_mean", "time_std", "evaluations"])
        for p in performance:
            writer.writerow([p["run"], p["method"], f"{p['success_rate_mean']:.4f}", f"{p['success_rate_std']:.4f}", f"{p['time_mean']:.4f}", f"{p['time_std']:.4f}", p["evaluations"]])

    summary = {"config_hash": physics_hash, "threshold": threshold, "steps_to_success": milestones, "performance": performance}
    write_json(out_dir / "summary.json", summary)
    return summary


# ---- rollout traces -------------------------------------------------------------------


def format_trace(record: TrialRecord) -> list[str]:
    lines = []
    for s in record.steps:
        theta = ", ".join(f"{v:.4g}" for v in s.theta)
        lines.append(
            f"{s.index:2d}  {s.mp:<28} θ=[{theta}]  {s.status:<7} {s.duration:6.3f}s  "
            f"goal_err={s.goal_distance * 1000.0:7.3f}mm  r={s.reward:+.4f}"
        )
    lines.append(f"result: {'SUCCESS' if record.success else 'FAILURE'} after {len(record.steps)} MPs, {record.time:.3f}s")
    return lines


def rollout(policy: Policy, cfg: RunConfig, seed: int) -> TrialRecord:
    env = make_env(cfg)
    if env is None:
        raise ValueError("rollout needs a policy method (hybrid, discrete or ee-pose)")
    check_compatible(policy, env)
    return run_episode(policy, env, seed)


def write_trace_csv(path: Path, record: TrialRecord, config_hash: str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        fh.write(f"# config_hash={config_hash}\n")
        writer = csv.writer(fh)
        writer.writerow(["index", "mp", "theta", "status", "duration", "reward", "goal_distance"])
        for s in record.steps:
            writer.writerow([s.index, s.mp, " ".join(repr(v) for v in s.theta), s.status, repr(s.duration), repr(s.reward), repr(s.goal_distance)])
    return path


def load_fix_seq_params(path: Path) -> FixSeqParams:
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    try:
        return FixSeqParams(np.array(data["values"], dtype=float))
    except KeyError:
        raise ValueError(f"{path}: not a fix-seq parameter file") from None
