from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Optional, Sequence

import gymnasium as gym
import numpy as np
from gymnasium import spaces

from .contact import SimConfig, SimState, reset_sim
from .policy import OBS_DIM, ActionLayout, HybridAction
from .primitives import (
    Family,
    ManipulationPrimitive,
    MpContext,
    MpStatus,
    build_catalog,
    execute,
)
from .se3 import Pose, compose, pose_error, random_axis_angle, relative


@dataclass(frozen=True)
class EpisodeConfig:
    max_mps: int = 15
    termination_bonus: float = 5.0
    success_tol: float = 0.002
    goal_depth: float = 0.010
    start_height: float = 0.010
    c1: float = 1.0
    c2: float = 0.2
    k1: float = 1e-4
    rotation_weight: float = 1.0
    noise_position: float = 0.001
    noise_rotation: float = math.radians(1.0)
    contact_threshold: float = 0.5

    def __post_init__(self) -> None:
        for name in ("c1", "c2", "k1"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be > 0, got {getattr(self, name)}")
        if self.max_mps < 1:
            raise ValueError(f"max_mps must be >= 1, got {self.max_mps}")
        if self.noise_position < 0 or self.noise_rotation < 0:
            raise ValueError("perception noise ranges must be >= 0")
        if not self.success_tol > 0 or not self.contact_threshold > 0:
            raise ValueError("success_tol and contact_threshold must be > 0")
        if not self.start_height > 0:
            raise ValueError(f"start_height must be > 0, got {self.start_height}")


@dataclass(frozen=True)
class ActionSpec:
    """A discrete action: a catalog primitive with either learnable parameters or a fixed θ."""

    primitive: ManipulationPrimitive
    theta: Optional[tuple[float, ...]] = None
    label: str = ""

    def __post_init__(self) -> None:
        if self.theta is not None:
            self.primitive.check(self.theta)

    @property
    def name(self) -> str:
        return self.label or self.primitive.name

    @property
    def dim(self) -> int:
        return 0 if self.theta is not None else self.primitive.dim

    @property
    def family(self) -> Family:
        return self.primitive.family

    def resolve(self, params: Sequence[float] = ()) -> np.ndarray:
        """Physical θ for this action; ``params`` are normalized and clipped to [-1, 1]."""
        if self.theta is not None:
            return np.asarray(self.theta, dtype=float)
        params = np.asarray(params, dtype=float).reshape(-1)
        if params.shape[0] < self.dim:
            raise ValueError(f"{self.name}: expected {self.dim} parameters, got {params.shape[0]}")
        return self.primitive.denormalize(params[: self.dim])


def hybrid_action_set(catalog: Optional[Sequence[ManipulationPrimitive]] = None) -> tuple[ActionSpec, ...]:
    catalog = catalog if catalog is not None else build_catalog()
    return tuple(ActionSpec(mp) for mp in catalog)


def action_layout(actions: Sequence[ActionSpec]) -> ActionLayout:
    free = tuple(i for i, a in enumerate(actions) if a.family is Family.FREE_SPACE)
    contact = tuple(i for i, a in enumerate(actions) if a.family is Family.IN_CONTACT)
    return ActionLayout(dims=tuple(a.dim for a in actions), groups=(free, contact), names=tuple(a.name for a in actions))


def distance_reward(error: np.ndarray, cfg: EpisodeConfig) -> float:
    e = np.asarray(error, dtype=float).reshape(6).copy()
    e[3:] *= cfg.rotation_weight
    return cfg.c1 * (math.exp(-float(e @ e) / cfg.k1) - 1.0)


def step_reward(error: np.ndarray, status: MpStatus, cfg: EpisodeConfig) -> float:
    """c1·(exp(−‖p − p_goal‖²/k1) − 1) + c2·s, with s = 0 on SUCCESS and −1 on FAILURE."""
    s = 0.0 if status is MpStatus.SUCCESS else -1.0
    return distance_reward(error, cfg) + cfg.c2 * s


class InsertionTask:
    """Perception-error sampling, observations and goal checks shared by the insertion envs.

    The true hole frame is the simulator's world frame; the estimated task frame is the true frame
    composed with the sampled perception error.
    """

    def __init__(self, sim_cfg: Optional[SimConfig] = None, episode_cfg: Optional[EpisodeConfig] = None) -> None:
        self.sim_cfg = sim_cfg or SimConfig()
        self.episode_cfg = episode_cfg or EpisodeConfig()
        self.frame = Pose.identity()
        self.state: Optional[SimState] = None

    @property
    def goal(self) -> Pose:
        return Pose.from_translation(0.0, 0.0, -self.episode_cfg.goal_depth)

    def sample_perception_error(self, rng: np.random.Generator) -> Pose:
        cfg = self.episode_cfg
        offset = rng.uniform(-cfg.noise_position, cfg.noise_position, size=3) if cfg.noise_position > 0 else np.zeros(3)
        return Pose(position=offset, orientation=random_axis_angle(rng, cfg.noise_rotation))

    def begin(self, rng: np.random.Generator) -> SimState:
        self.frame = self.sample_perception_error(rng)
        start = compose(self.frame, Pose.from_translation(0.0, 0.0, self.episode_cfg.start_height))
        self.state = reset_sim(self.sim_cfg, start)
        return self.state

    def task_pose(self, state: SimState) -> Pose:
        return relative(self.frame, state.ee_pose)

    def observe(self, state: SimState) -> np.ndarray:
        pose = self.task_pose(state)
        wrench = state.f_ext.rotated(self.frame.rotation.inv())
        return np.concatenate([pose.position, pose.rotvec(), wrench.vector()])

    def goal_error(self, state: SimState) -> np.ndarray:
        return pose_error(self.task_pose(state), self.goal)

    def is_success(self, state: SimState) -> bool:
        """True positional distance to the goal, measured in the true hole frame."""
        return bool(np.linalg.norm(state.ee_pose.position - self.goal.position) <= self.episode_cfg.success_tol)

    def in_contact(self, obs: np.ndarray) -> bool:
        return bool(abs(float(obs[8])) >= self.episode_cfg.contact_threshold)

    def context(self) -> MpContext:
        return MpContext(frame=self.frame, goal=self.goal.position)

    def true_pose_info(self, state: SimState) -> dict[str, Any]:
        return {
            "true_position": state.ee_pose.position.tolist(),
            "true_orientation": state.ee_pose.orientation.tolist(),
            "goal_distance": float(np.linalg.norm(state.ee_pose.position - self.goal.position)),
        }


class PegInsertionEnv(gym.Env):
    """One step executes one manipulation primitive to termination.

    Actions are :class:`HybridAction` (or ``(index, params)`` pairs) with normalized parameters.
    """

    metadata = {"render_modes": []}

    def __init__(
        self,
        sim_cfg: Optional[SimConfig] = None,
        episode_cfg: Optional[EpisodeConfig] = None,
        actions: Optional[Sequence[ActionSpec]] = None,
    ) -> None:
        super().__init__()
        self.task = InsertionTask(sim_cfg, episode_cfg)
        self.actions = tuple(actions) if actions is not None else hybrid_action_set()
        self.layout = action_layout(self.actions)
        self.observation_space = spaces.Box(-np.inf, np.inf, shape=(OBS_DIM,), dtype=np.float64)
        self.action_space = spaces.Tuple(
            (
                spaces.Discrete(len(self.actions)),
                spaces.Box(-1.0, 1.0, shape=(max(self.layout.max_dim, 1),), dtype=np.float64),
            )
        )
        self._obs: Optional[np.ndarray] = None
        self._mp_count = 0
        self._done = True

    @property
    def sim_cfg(self) -> SimConfig:
        return self.task.sim_cfg

    @property
    def episode_cfg(self) -> EpisodeConfig:
        return self.task.episode_cfg

    @property
    def state(self) -> SimState:
        if self.task.state is None:
            raise RuntimeError("environment has not been reset")
        return self.task.state

    def reset(self, *, seed: Optional[int] = None, options: Optional[dict] = None):
        super().reset(seed=seed)
        state = self.task.begin(self.np_random)
        self._obs = self.task.observe(state)
        self._mp_count = 0
        self._done = False
        info = {"frame_position": self.task.frame.position.tolist(), "frame_orientation": self.task.frame.orientation.tolist()}
        info.update(self.task.true_pose_info(state))
        return self._obs.copy(), info

    def action_group(self, obs: Optional[np.ndarray] = None) -> int:
        obs = self._obs if obs is None else obs
        if obs is None:
            raise RuntimeError("environment has not been reset")
        return int(self.task.in_contact(obs))

    def feasible_set(self, obs: Optional[np.ndarray] = None) -> tuple[int, ...]:
        return self.layout.groups[self.action_group(obs)]

    def compute_reward(self, error: np.ndarray, status: MpStatus) -> float:
        return step_reward(error, status, self.episode_cfg)

    def is_success(self, state: Optional[SimState] = None) -> bool:
        return self.task.is_success(self.state if state is None else state)

    def step(self, action):
        if self._done:
            raise RuntimeError("episode is over; call reset()")
        if not isinstance(action, HybridAction):
            index, params = action
            action = HybridAction(index, params)
        feasible = self.feasible_set()
        if action.mp_index not in feasible:
            raise ValueError(f"action {action.mp_index} is infeasible; feasible set is {feasible}")
        spec = self.actions[action.mp_index]
        theta = spec.resolve(action.params)
        outcome = execute(spec.primitive, theta, self.state, self.sim_cfg, ctx=self.task.context(), rng=self.np_random)
        self.task.state = outcome.end_state
        self._mp_count += 1
        self._obs = self.task.observe(outcome.end_state)

        success = self.task.is_success(outcome.end_state)
        reward = self.compute_reward(self.task.goal_error(outcome.end_state), outcome.status)
        if success:
            reward += self.episode_cfg.termination_bonus
        terminated = success
        truncated = not success and self._mp_count >= self.episode_cfg.max_mps
        self._done = terminated or truncated
        info = {
            "mp": spec.name,
            "mp_index": action.mp_index,
            "theta": theta.tolist(),
            "status": outcome.status.value,
            "duration": outcome.duration,
            "control_steps": outcome.control_steps,
            "mp_count": self._mp_count,
            "is_success": success,
        }
        info.update(self.task.true_pose_info(outcome.end_state))
        return self._obs.copy(), float(reward), terminated, truncated, info
