from __future__ import annotations

import csv
import sys
from collections import deque
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Callable, Mapping, Optional, Sequence

import numpy as np

from .policy import Adam, Policy, clip_grads


class TrainingAborted(RuntimeError):
    """A loss or weight went non-finite; ``checkpoint`` is the last good checkpoint on disk."""

    def __init__(self, message: str, diagnostics: Mapping[str, Any], checkpoint: Optional[Path]) -> None:
        super().__init__(f"{message}; last good checkpoint: {checkpoint}")
        self.diagnostics = dict(diagnostics)
        self.checkpoint = checkpoint


@dataclass(frozen=True)
class PpoConfig:
    clip_ratio: float = 0.1
    minibatch_size: int = 64
    gamma: float = 0.99
    learning_rate: float = 5e-4
    entropy_coef: float = 0.001
    samples_per_update: int = 2048
    gae_lambda: float = 0.95
    epochs: int = 10
    value_coef: float = 0.5
    max_grad_norm: float = 0.5
    rolling_window: int = 50
    checkpoint_every: int = 10
    seed: int = 0

    def __post_init__(self) -> None:
        for f in fields(self):
            if f.name in ("seed", "entropy_coef"):
                continue
            if not getattr(self, f.name) > 0:
                raise ValueError(f"{f.name} must be > 0, got {getattr(self, f.name)}")
        if self.entropy_coef < 0:
            raise ValueError(f"entropy_coef must be >= 0, got {self.entropy_coef}")
        if not self.clip_ratio < 1:
            raise ValueError(f"clip_ratio must be < 1, got {self.clip_ratio}")
        if not self.gamma <= 1 or not self.gae_lambda <= 1:
            raise ValueError("gamma and gae_lambda must be <= 1")


_TRANSITION_FIELDS = (
    "obs", "groups", "actions", "params", "log_probs", "rewards", "values",
    "boundaries", "next_values", "sim_steps",
)
_EPISODE_FIELDS = ("episode_returns", "episode_successes", "episode_lengths", "episode_sim_steps")


@dataclass(eq=False)
class RolloutBatch:
    """Transitions of sequential episodes. ``boundaries`` marks the last transition of an episode or
    of a collection segment; ``next_values`` holds the bootstrap value there (0 when terminated)."""

    obs: np.ndarray
    groups: np.ndarray
    actions: np.ndarray
    params: np.ndarray
    log_probs: np.ndarray
    rewards: np.ndarray
    values: np.ndarray
    boundaries: np.ndarray
    next_values: np.ndarray
    sim_steps: np.ndarray
    episode_returns: np.ndarray = field(default_factory=lambda: np.zeros(0))
    episode_successes: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))
    episode_lengths: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))
    episode_sim_steps: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))

    def __len__(self) -> int:
        return int(self.rewards.shape[0])

    @property
    def total_sim_steps(self) -> int:
        return int(self.sim_steps.sum())

    def arrays(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in _TRANSITION_FIELDS + _EPISODE_FIELDS}

    @classmethod
    def from_arrays(cls, arrays: Mapping[str, np.ndarray]) -> "RolloutBatch":
        missing = [name for name in _TRANSITION_FIELDS + _EPISODE_FIELDS if name not in arrays]
        if missing:
            raise ValueError(f"rollout payload is missing {missing}")
        return cls(**{name: np.asarray(arrays[name]) for name in _TRANSITION_FIELDS + _EPISODE_FIELDS})

    @classmethod
    def concatenate(cls, batches: Sequence["RolloutBatch"]) -> "RolloutBatch":
        if not batches:
            raise ValueError("nothing to concatenate")
        width = max(b.params.shape[1] for b in batches)
        merged: dict[str, np.ndarray] = {}
        for name in _TRANSITION_FIELDS + _EPISODE_FIELDS:
            parts = [getattr(b, name) for b in batches]
            if name == "params":
                parts = [np.pad(p, ((0, 0), (0, width - p.shape[1]))) for p in parts]
            merged[name] = np.concatenate(parts)
        return cls(**merged)


def collect(policy: Policy, env, n: int, rng: np.random.Generator) -> RolloutBatch:
    """Run ``n`` MP decisions from fresh sequential episodes. Episodes are seeded from ``rng``."""
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    width = max(policy.layout.max_dim, 1)
    obs_buf = np.zeros((n, policy.obs_dim))
    groups = np.zeros(n, dtype=int)
    actions = np.zeros(n, dtype=int)
    params = np.zeros((n, width))
    log_probs = np.zeros(n)
    rewards = np.zeros(n)
    values = np.zeros(n)
    boundaries = np.zeros(n, dtype=bool)
    next_values = np.zeros(n)
    sim_steps = np.zeros(n, dtype=int)
    ep_returns: list[float] = []
    ep_successes: list[bool] = []
    ep_lengths: list[int] = []
    ep_steps: list[int] = []

    obs, _ = env.reset(seed=int(rng.integers(2**31 - 1)))
    ep_return, ep_len, ep_sim = 0.0, 0, 0
    for t in range(n):
        group = env.action_group(obs)
        dist = policy.forward(obs, group)
        action, logp = policy.sample(dist, rng)
        obs_buf[t] = obs
        groups[t] = group
        actions[t] = action.mp_index
        params[t, : action.params.shape[0]] = action.params
        log_probs[t] = logp
        values[t] = policy.value(obs)
        obs, reward, terminated, truncated, info = env.step(action)
        rewards[t] = reward
        sim_steps[t] = int(info.get("control_steps", 0))
        ep_return += reward
        ep_len += 1
        ep_sim += sim_steps[t]
        if terminated or truncated:
            boundaries[t] = True
            next_values[t] = 0.0 if terminated else policy.value(obs)
            ep_returns.append(ep_return)
            ep_successes.append(bool(info.get("is_success", False)))
            ep_lengths.append(ep_len)
            ep_steps.append(ep_sim)
            ep_return, ep_len, ep_sim = 0.0, 0, 0
            if t + 1 < n:
                obs, _ = env.reset(seed=int(rng.integers(2**31 - 1)))
    if not boundaries[-1]:
        boundaries[-1] = True
        next_values[-1] = policy.value(obs)
    return RolloutBatch(
        obs=obs_buf,
        groups=groups,
        actions=actions,
        params=params,
        log_probs=log_probs,
        rewards=rewards,
        values=values,
        boundaries=boundaries,
        next_values=next_values,
        sim_steps=sim_steps,
        episode_returns=np.array(ep_returns, dtype=float),
        episode_successes=np.array(ep_successes, dtype=bool),
        episode_lengths=np.array(ep_lengths, dtype=int),
        episode_sim_steps=np.array(ep_steps, dtype=int),
    )


def advantages(batch: RolloutBatch, gamma: float, lam: float) -> tuple[np.ndarray, np.ndarray]:
    """GAE(γ, λ) per MP decision; the recursion restarts at every boundary."""
    n = len(batch)
    adv = np.zeros(n)
    running = 0.0
    for t in reversed(range(n)):
        if batch.boundaries[t]:
            next_value = batch.next_values[t]
            running = 0.0
        else:
            next_value = batch.values[t + 1]
        delta = batch.rewards[t] + gamma * next_value - batch.values[t]
        running = delta + gamma * lam * running
        adv[t] = running
    return adv, adv + batch.values


def normalize_advantages(adv: np.ndarray) -> np.ndarray:
    centered = adv - adv.mean()
    std = centered.std()
    if std < 1e-12:
        return centered
    return centered / std


@dataclass(frozen=True)
class UpdateStats:
    policy_loss: float
    value_loss: float
    entropy: float
    approx_kl: float
    clip_fraction: float
    grad_norm: float
    first_ratio_deviation: float


def update(
    policy: Policy,
    batch: RolloutBatch,
    cfg: PpoConfig,
    optimizer: Adam,
    rng: np.random.Generator,
    *,
    checkpoint: Optional[Path] = None,
) -> UpdateStats:
    """``cfg.epochs`` passes of shuffled minibatch PPO steps, then a normalizer refresh."""
    adv, returns = advantages(batch, cfg.gamma, cfg.gae_lambda)
    adv = normalize_advantages(adv)
    n = len(batch)
    common = dict(clip_ratio=cfg.clip_ratio, entropy_coef=cfg.entropy_coef, value_coef=cfg.value_coef)

    first_pass = policy.batch_log_prob(batch.obs, batch.groups, batch.actions, batch.params)
    first_dev = float(np.max(np.abs(np.exp(first_pass - batch.log_probs) - 1.0)))

    totals = np.zeros(5)
    count = 0
    grad_norm = 0.0
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.minibatch_size):
            idx = order[start : start + cfg.minibatch_size]
            info, grads = policy.loss_and_grad(
                batch.obs[idx], batch.groups[idx], batch.actions[idx], batch.params[idx],
                batch.log_probs[idx], adv[idx], returns[idx], **common,
            )
            if not np.isfinite(info.loss) or not all(np.all(np.isfinite(g)) for g in grads.values()):
                raise TrainingAborted(
                    "non-finite PPO loss",
                    {"loss": info.loss, "policy_loss": info.policy_loss, "value_loss": info.value_loss, "entropy": info.entropy},
                    checkpoint,
                )
            grad_norm = clip_grads(grads, cfg.max_grad_norm)
            optimizer.step(grads)
            if not policy.is_finite():
                raise TrainingAborted("non-finite policy weights after step", {"grad_norm": grad_norm}, checkpoint)
            totals += (info.policy_loss, info.value_loss, info.entropy, info.approx_kl, info.clip_fraction)
            count += 1
    policy.update_normalizer(batch.obs)
    means = totals / max(count, 1)
    return UpdateStats(
        policy_loss=float(means[0]),
        value_loss=float(means[1]),
        entropy=float(means[2]),
        approx_kl=float(means[3]),
        clip_fraction=float(means[4]),
        grad_norm=grad_norm,
        first_ratio_deviation=first_dev,
    )


def segment_rng(seed: int, update_index: int, worker: int = 0) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, update_index, worker]))


CURVE_COLUMNS = ("cum_sim_steps", "updates", "success_rate", "mean_return", "mean_ep_len")


@dataclass(frozen=True)
class CurvePoint:
    cum_sim_steps: int
    updates: int
    success_rate: float
    mean_return: float
    mean_ep_len: float

    def row(self) -> list[str]:
        return [str(self.cum_sim_steps), str(self.updates), f"{self.success_rate:.6f}", f"{self.mean_return:.6f}", f"{self.mean_ep_len:.4f}"]


def write_curve(path: Path, points: Sequence[CurvePoint], config_hash: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        fh.write(f"# config_hash={config_hash}\n")
        writer = csv.writer(fh)
        writer.writerow(CURVE_COLUMNS)
        for point in points:
            writer.writerow(point.row())


def read_curve(path: Path) -> tuple[str, list[CurvePoint]]:
    """Return (config_hash, points) from a curve CSV."""
    with Path(path).open(newline="") as fh:
        first = fh.readline()
        if not first.startswith("# config_hash="):
            raise ValueError(f"{path}: missing '# config_hash=' header line")
        config_hash = first.strip().split("=", 1)[1]
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != CURVE_COLUMNS:
            raise ValueError(f"{path}: unexpected curve columns {reader.fieldnames}")
        points = [
            CurvePoint(
                cum_sim_steps=int(row["cum_sim_steps"]),
                updates=int(row["updates"]),
                success_rate=float(row["success_rate"]),
                mean_return=float(row["mean_return"]),
                mean_ep_len=float(row["mean_ep_len"]),
            )
            for row in reader
        ]
    return config_hash, points


Collector = Callable[[Policy, int, int], RolloutBatch]


class Trainer:
    """Alternates collection and PPO updates until the simulation-step budget is spent."""

    def __init__(
        self,
        policy: Policy,
        cfg: PpoConfig,
        *,
        env=None,
        collector: Optional[Collector] = None,
        out_dir: Path,
        budget: int,
        config_hash: str = "",
        meta: Optional[Mapping[str, Any]] = None,
        debug: bool = False,
        on_update: Optional[Callable[[CurvePoint, UpdateStats], None]] = None,
    ) -> None:
        if env is None and collector is None:
            raise ValueError("Trainer needs an env or a collector")
        if budget < 0:
            raise ValueError(f"budget must be >= 0, got {budget}")
        self.policy = policy
        self.cfg = cfg
        self.env = env
        self.collector = collector
        self.out_dir = Path(out_dir)
        self.budget = budget
        self.config_hash = config_hash
        self.meta = dict(meta or {})
        self.debug = debug
        self.on_update = on_update
        self.optimizer = Adam(policy.params, lr=cfg.learning_rate)
        self.curve: list[CurvePoint] = []
        self.last_checkpoint: Optional[Path] = None

    def _log(self, message: str) -> None:
        if not self.debug:
            return
        sys.stderr.write(f"[mp-insertion] {message}\n")
        sys.stderr.flush()

    @property
    def curve_path(self) -> Path:
        return self.out_dir / "curve.csv"

    def _collect(self, update_index: int) -> RolloutBatch:
        if self.collector is not None:
            return self.collector(self.policy, self.cfg.samples_per_update, update_index)
        return collect(self.policy, self.env, self.cfg.samples_per_update, segment_rng(self.cfg.seed, update_index))

    def checkpoint(self, updates: int, cum_steps: int) -> Path:
        path = self.out_dir / "checkpoints" / f"update_{updates:05d}.npz"
        meta = {"config_hash": self.config_hash, "updates": updates, "cum_sim_steps": cum_steps, **self.meta}
        self.policy.save(path, meta)
        self.policy.save(self.out_dir / "policy.npz", meta)
        self.last_checkpoint = path
        self._log(f"checkpoint written: {path}")
        return path

    def train(self) -> list[CurvePoint]:
        successes: deque[bool] = deque(maxlen=self.cfg.rolling_window)
        returns: deque[float] = deque(maxlen=self.cfg.rolling_window)
        lengths: deque[int] = deque(maxlen=self.cfg.rolling_window)
        cum_steps = 0
        updates = 0
        self.checkpoint(updates, cum_steps)
        # minibatch shuffling draws from its own stream, independent of the collection seeds
        update_rng = np.random.default_rng(np.random.SeedSequence(self.cfg.seed).spawn(1)[0])
        while cum_steps < self.budget:
            batch = self._collect(updates)
            cum_steps += batch.total_sim_steps
            stats = update(self.policy, batch, self.cfg, self.optimizer, update_rng, checkpoint=self.last_checkpoint)
            updates += 1
            successes.extend(bool(s) for s in batch.episode_successes)
            returns.extend(float(r) for r in batch.episode_returns)
            lengths.extend(int(n) for n in batch.episode_lengths)
            point = CurvePoint(
                cum_sim_steps=cum_steps,
                updates=updates,
                success_rate=float(np.mean(successes)) if successes else 0.0,
                mean_return=float(np.mean(returns)) if returns else 0.0,
                mean_ep_len=float(np.mean(lengths)) if lengths else 0.0,
            )
            self.curve.append(point)
            write_curve(self.curve_path, self.curve, self.config_hash)
            self._log(
                f"update {updates}: steps={cum_steps} success={point.success_rate:.3f} "
                f"return={point.mean_return:.3f} kl={stats.approx_kl:.5f} first_ratio_dev={stats.first_ratio_deviation:.2e}"
            )
            if self.on_update is not None:
                self.on_update(point, stats)
            if updates % self.cfg.checkpoint_every == 0 or cum_steps >= self.budget:
                self.checkpoint(updates, cum_steps)
        if not self.curve:
            write_curve(self.curve_path, self.curve, self.config_hash)
        return self.curve
