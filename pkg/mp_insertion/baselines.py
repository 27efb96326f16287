from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import gymnasium as gym
import numpy as np
from gymnasium import spaces

from .cmaes import CmaEsResult, GenerationRecord, cma_es_minimize
from .contact import SimConfig, SimState, hybrid_control_step
from .env import ActionSpec, EpisodeConfig, InsertionTask, distance_reward
from .policy import OBS_DIM, ActionLayout, HybridAction
from .primitives import (
    CatalogConfig,
    Family,
    ManipulationPrimitive,
    MpContext,
    MpKind,
    MpStatus,
    ParamBound,
    build_catalog,
    execute,
)
from .se3 import Pose, Twist, Wrench, axis_angle_rotation, compose


# ---- discrete -------------------------------------------------------------------------


@dataclass(frozen=True)
class DiscreteCatalog:
    actions: tuple[ActionSpec, ...]
    provenance: tuple[tuple[int, dict], ...]

    def __len__(self) -> int:
        return len(self.actions)


def grid_fractions(values_per_param: int) -> np.ndarray:
    """Evenly spaced interior points of [0, 1]: 2 → (0.25, 0.75), 1 → (0.5,)."""
    return (np.arange(values_per_param) + 0.5) / values_per_param


def discretize_catalog(catalog: Sequence[ManipulationPrimitive], values_per_param: int = 2) -> DiscreteCatalog:
    """Cartesian product of fixed values per learnable parameter, one action per combination."""
    if values_per_param < 1:
        raise ValueError(f"values_per_param must be >= 1, got {values_per_param}")
    fractions = grid_fractions(values_per_param)
    actions: list[ActionSpec] = []
    provenance: list[tuple[int, dict]] = []
    for mp in catalog:
        if mp.dim == 0:
            actions.append(ActionSpec(mp, theta=(), label=mp.name))
            provenance.append((mp.id, {}))
            continue
        axes = [b.low + fractions * (b.high - b.low) for b in mp.learnable]
        for combo in itertools.product(*axes):
            theta = tuple(float(v) for v in combo)
            values = {b.name: v for b, v in zip(mp.learnable, theta)}
            label = mp.name + "[" + ", ".join(f"{k}={v:g}" for k, v in values.items()) + "]"
            actions.append(ActionSpec(mp, theta=theta, label=label))
            provenance.append((mp.id, values))
    return DiscreteCatalog(actions=tuple(actions), provenance=tuple(provenance))


# ---- ee-pose --------------------------------------------------------------------------


@dataclass(frozen=True)
class EePoseConfig:
    policy_rate_hz: float = 40.0
    max_translation: float = 0.001
    max_rotation: float = 0.02
    max_steps: int = 600

    def __post_init__(self) -> None:
        if not self.policy_rate_hz > 0 or not self.max_translation > 0 or not self.max_rotation > 0:
            raise ValueError("ee-pose rate and displacement limits must be > 0")
        if self.max_steps < 1:
            raise ValueError(f"max_steps must be >= 1, got {self.max_steps}")


def tick_schedule(step: int, dt: float, rate_hz: float) -> int:
    """Control ticks in policy step ``step``; 500 Hz / 40 Hz alternates 12 and 13."""
    ratio = round(1.0 / (dt * rate_hz), 9)
    return math.floor((step + 1) * ratio + 1e-9) - math.floor(step * ratio + 1e-9)


class EePoseEnv(gym.Env):
    """Continuous end-effector displacement control at the policy rate, same task and reward shape."""

    metadata = {"render_modes": []}

    def __init__(
        self,
        sim_cfg: Optional[SimConfig] = None,
        episode_cfg: Optional[EpisodeConfig] = None,
        ee_cfg: Optional[EePoseConfig] = None,
    ) -> None:
        super().__init__()
        self.task = InsertionTask(sim_cfg, episode_cfg)
        self.ee_cfg = ee_cfg or EePoseConfig()
        self.layout = ActionLayout(dims=(6,), groups=((0,), (0,)), names=("ee-displacement",))
        self.observation_space = spaces.Box(-np.inf, np.inf, shape=(OBS_DIM,), dtype=np.float64)
        self.action_space = spaces.Box(-1.0, 1.0, shape=(6,), dtype=np.float64)
        self._obs: Optional[np.ndarray] = None
        self._steps = 0
        self._done = True

    @property
    def state(self) -> SimState:
        if self.task.state is None:
            raise RuntimeError("environment has not been reset")
        return self.task.state

    def reset(self, *, seed: Optional[int] = None, options: Optional[dict] = None):
        super().reset(seed=seed)
        state = self.task.begin(self.np_random)
        self._obs = self.task.observe(state)
        self._steps = 0
        self._done = False
        return self._obs.copy(), self.task.true_pose_info(state)

    def action_group(self, obs=None) -> int:
        obs = self._obs if obs is None else obs
        return int(self.task.in_contact(obs))

    def feasible_set(self, obs=None) -> tuple[int, ...]:
        return (0,)

    def displacement(self, action) -> np.ndarray:
        """Task-frame displacement (m, rad) for a normalized action, clipped to the per-step limits."""
        a = np.clip(np.asarray(action, dtype=float).reshape(6), -1.0, 1.0)
        limits = np.array([self.ee_cfg.max_translation] * 3 + [self.ee_cfg.max_rotation] * 3)
        return a * limits

    def step(self, action):
        if self._done:
            raise RuntimeError("episode is over; call reset()")
        if isinstance(action, HybridAction):
            action = action.params
        disp = self.displacement(action)
        cfg = self.task.sim_cfg
        ticks = tick_schedule(self._steps, cfg.dt, self.ee_cfg.policy_rate_hz)
        rotation = self.task.frame.rotation
        # the reference moves linearly from 0 to the displacement over the step
        v_des = Twist.from_vector(disp / (ticks * cfg.dt)).rotated(rotation)
        state = self.state
        for _ in range(ticks):
            state = hybrid_control_step(state, v_des, Wrench.zero(), cfg, rng=self.np_random)
            if state.clamped:
                break
        self.task.state = state
        self._steps += 1
        self._obs = self.task.observe(state)
        success = self.task.is_success(state)
        reward = distance_reward(self.task.goal_error(state), self.task.episode_cfg)
        if success:
            reward += self.task.episode_cfg.termination_bonus
        terminated = success
        truncated = not success and self._steps >= self.ee_cfg.max_steps
        self._done = terminated or truncated
        info = {
            "control_steps": ticks,
            "duration": ticks * cfg.dt,
            "is_success": success,
            "mp": "ee-displacement",
            "status": MpStatus.SUCCESS.value,
            "clamped": state.clamped,
        }
        info.update(self.task.true_pose_info(state))
        return self._obs.copy(), float(reward), terminated, truncated, info


# ---- fix-seq --------------------------------------------------------------------------

FIX_SEQ_NAMES = ("lateral_speed", "lateral_distance", "align_angle", "insert_force")
FIX_SEQ_LOWER = np.array([0.003, 0.0005, -0.1, 6.0])
FIX_SEQ_UPPER = np.array([0.010, 0.0020, 0.1, 15.0])
FIX_SEQ_DEFAULT = np.array([0.005, 0.0015, 0.0, 10.0])

_APPROACH, _ALIGN_Y, _INSERT = 0, 10, 12
_PRESS_ID, _SEARCH_ID = 13, 14
# lateral distance from the estimated axis at which the tilted approach lands (m)
APPROACH_OFFSET = 0.002
_PRESS_SPEED = 0.001
_PRESS_RATIO = 0.9
_PRESS_TIMEOUT = 1.0
# spiral pitch in units of the radial clearance; the path then passes within 0.75 clearance of any point
_SEARCH_PITCH = 1.5
_SEARCH_LEAD = 0.003
_SEARCH_DROP = 0.001
_INSERT_GAIN = 0.1
_INSERT_TIMEOUT = 2.0


@dataclass(frozen=True, eq=False)
class FixSeqParams:
    """Lateral search speed (m/s), lateral search radius (m), align angle (rad), insert force (N)."""

    values: np.ndarray = field(default_factory=lambda: FIX_SEQ_DEFAULT.copy())

    def __post_init__(self) -> None:
        values = np.asarray(self.values, dtype=float).reshape(-1)
        if values.shape != (4,):
            raise ValueError(f"fix-seq needs 4 parameters, got {values.shape[0]}")
        bad = [n for n, v, lo, hi in zip(FIX_SEQ_NAMES, values, FIX_SEQ_LOWER, FIX_SEQ_UPPER) if not lo - 1e-12 <= v <= hi + 1e-12]
        if bad:
            raise ValueError(f"fix-seq parameters out of bounds: {bad}")
        object.__setattr__(self, "values", values)

    @classmethod
    def from_normalized(cls, u: Sequence[float]) -> "FixSeqParams":
        u = np.clip(np.asarray(u, dtype=float), -1.0, 1.0)
        return cls(FIX_SEQ_LOWER + 0.5 * (u + 1.0) * (FIX_SEQ_UPPER - FIX_SEQ_LOWER))

    def normalized(self) -> np.ndarray:
        return 2.0 * (self.values - FIX_SEQ_LOWER) / (FIX_SEQ_UPPER - FIX_SEQ_LOWER) - 1.0

    def as_dict(self) -> dict[str, float]:
        return {n: float(v) for n, v in zip(FIX_SEQ_NAMES, self.values)}

    def steps(self) -> list[tuple[str, tuple[float, ...]]]:
        v, d, angle, f_d = (float(x) for x in self.values)
        return [
            ("approach", ()),
            ("contact", ()),
            ("fit", (v, d)),
            ("align", (angle,)),
            ("insert", (_INSERT_GAIN, f_d, _INSERT_TIMEOUT)),
        ]


def fix_seq_primitives(
    sim_cfg: SimConfig, catalog_cfg: Optional[CatalogConfig] = None
) -> dict[str, ManipulationPrimitive]:
    """The five primitives of the fixed sequence, keyed by step name.

    Contact is an in-contact press along -z that ends once the plate pushes back; fit is a spiral
    search that ends when the peg drops into the hole.
    """
    catalog_cfg = catalog_cfg or CatalogConfig()
    catalog = build_catalog(catalog_cfg)
    f_d = ("f_d", catalog_cfg.contact_force)
    clearance = sim_cfg.hole.inradius - sim_cfg.peg.inradius
    if not clearance > 0:
        raise ValueError(f"peg does not fit the hole (radial clearance {clearance:.3g} m)")
    press = ManipulationPrimitive(
        id=_PRESS_ID,
        family=Family.IN_CONTACT,
        kind=MpKind.TRANSLATE_UNTIL_CONTACT,
        axis="-z",
        fixed=(("v", _PRESS_SPEED), ("f_thr", _PRESS_RATIO * catalog_cfg.contact_force), ("T", _PRESS_TIMEOUT), f_d),
    )
    search = ManipulationPrimitive(
        id=_SEARCH_ID,
        family=Family.IN_CONTACT,
        kind=MpKind.LATERAL_SEARCH,
        axis="-z",
        fixed=(("pitch", _SEARCH_PITCH * clearance), ("lead", _SEARCH_LEAD), ("drop", _SEARCH_DROP), f_d),
        learnable=(
            ParamBound("v", float(FIX_SEQ_LOWER[0]), float(FIX_SEQ_UPPER[0]), "m/s"),
            ParamBound("d", float(FIX_SEQ_LOWER[1]), float(FIX_SEQ_UPPER[1]), "m"),
        ),
    )
    return {
        "approach": catalog[_APPROACH],
        "contact": press,
        "fit": search,
        "align": catalog[_ALIGN_Y],
        "insert": catalog[_INSERT],
    }


def approach_context(task: InsertionTask) -> MpContext:
    """Task context tilted about y so the straight approach lands APPROACH_OFFSET beside the estimated axis."""
    beta = math.atan2(APPROACH_OFFSET, task.episode_cfg.start_height)
    tilt = Pose(orientation=axis_angle_rotation((0.0, 1.0, 0.0), beta))
    return MpContext(frame=compose(task.frame, tilt), goal=task.goal.position)


@dataclass(frozen=True)
class FixSeqOutcome:
    success: bool
    execution_time: float
    mps_attempted: int
    post_approach: int
    sequence: tuple[str, ...]
    statuses: tuple[str, ...]


def fix_seq_execute(
    params: FixSeqParams,
    task: InsertionTask,
    rng: np.random.Generator,
    catalog_cfg: Optional[CatalogConfig] = None,
) -> FixSeqOutcome:
    """Run the five-step sequence from a fresh reset of ``task``.

    The first FAILURE ends the trial as a failure; otherwise all five steps run and the trial succeeds
    when the final state meets the true success condition.
    """
    if not isinstance(params, FixSeqParams):
        params = FixSeqParams(params)
    primitives = fix_seq_primitives(task.sim_cfg, catalog_cfg)
    state = task.begin(rng)
    elapsed = 0.0
    names: list[str] = []
    statuses: list[str] = []
    failed = False
    for step_name, theta in params.steps():
        ctx = approach_context(task) if step_name == "approach" else task.context()
        outcome = execute(primitives[step_name], theta, state, task.sim_cfg, ctx=ctx, rng=rng)
        state = outcome.end_state
        task.state = state
        elapsed += outcome.duration
        names.append(step_name)
        statuses.append(outcome.status.value)
        if outcome.status is MpStatus.FAILURE:
            failed = True
            break
    return FixSeqOutcome(
        success=not failed and task.is_success(state),
        execution_time=elapsed,
        mps_attempted=len(names),
        post_approach=max(len(names) - 1, 0),
        sequence=tuple(names),
        statuses=tuple(statuses),
    )


def trial_seeds(seed: int, trials: int) -> list[int]:
    rng = np.random.default_rng(np.random.SeedSequence([seed, trials]))
    return [int(s) for s in rng.integers(0, 2**31 - 1, size=trials)]


def evaluate_fix_seq_trials(
    params: FixSeqParams,
    sim_cfg: SimConfig,
    episode_cfg: EpisodeConfig,
    seeds: Sequence[int],
    catalog_cfg: Optional[CatalogConfig] = None,
) -> list[FixSeqOutcome]:
    task = InsertionTask(sim_cfg, episode_cfg)
    return [fix_seq_execute(params, task, np.random.default_rng(s), catalog_cfg) for s in seeds]


def fix_seq_objective(outcomes: Sequence[FixSeqOutcome], time_weight: float = 0.01) -> float:
    """(1 − success rate) + time_weight · mean execution time (s)."""
    if not outcomes:
        raise ValueError("no trials to score")
    rate = sum(o.success for o in outcomes) / len(outcomes)
    return (1.0 - rate) + time_weight * float(np.mean([o.execution_time for o in outcomes]))


def optimize_fix_seq(
    sim_cfg: SimConfig,
    episode_cfg: EpisodeConfig,
    *,
    trials_per_eval: int = 10,
    generations: int = 30,
    sigma0: float = 0.3,
    seed: int = 0,
    time_weight: float = 0.01,
    x0: Optional[FixSeqParams] = None,
    catalog_cfg: Optional[CatalogConfig] = None,
    evaluate: Optional[Callable[[np.ndarray], Sequence[float]]] = None,
    on_generation: Optional[Callable[[GenerationRecord], None]] = None,
) -> tuple[FixSeqParams, CmaEsResult]:
    """CMA-ES over the four fix-seq parameters in normalized [-1, 1] coordinates.

    Every candidate is scored on the same trial seeds, so the objective is deterministic.
    """
    if trials_per_eval < 1:
        raise ValueError(f"trials_per_eval must be >= 1, got {trials_per_eval}")
    seeds = trial_seeds(seed, trials_per_eval)
    start = x0 or FixSeqParams()

    def objective(u: np.ndarray) -> float:
        outcomes = evaluate_fix_seq_trials(FixSeqParams.from_normalized(u), sim_cfg, episode_cfg, seeds, catalog_cfg)
        return fix_seq_objective(outcomes, time_weight)

    result = cma_es_minimize(
        objective,
        start.normalized(),
        sigma0,
        bounds=(-np.ones(4), np.ones(4)),
        budget=generations,
        seed=seed,
        evaluate=evaluate,
        on_generation=on_generation,
    )
    return FixSeqParams.from_normalized(result.best_x), result
