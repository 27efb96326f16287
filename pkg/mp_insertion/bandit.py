from __future__ import annotations

from typing import Optional

import gymnasium as gym
import numpy as np
from gymnasium import spaces

from .policy import OBS_DIM, ActionLayout, HybridAction


class HybridBandit(gym.Env):
    """One state, two discrete actions with one parameter each.

    reward = −(x − target)² plus ``bonus`` for ``best``; the optimum is (best, x = target).
    """

    metadata = {"render_modes": []}

    def __init__(self, target: float = 0.5, bonus: float = 0.3, best: int = 1, success_tol: float = 0.1) -> None:
        super().__init__()
        if best not in (0, 1):
            raise ValueError(f"best must be 0 or 1, got {best}")
        self.target = target
        self.bonus = bonus
        self.best = best
        self.success_tol = success_tol
        self.layout = ActionLayout(dims=(1, 1), groups=((0, 1), (0, 1)), names=("a0", "a1"))
        self.observation_space = spaces.Box(-np.inf, np.inf, shape=(OBS_DIM,), dtype=np.float64)
        self.action_space = spaces.Tuple((spaces.Discrete(2), spaces.Box(-1.0, 1.0, shape=(1,), dtype=np.float64)))
        self._obs = np.zeros(OBS_DIM)

    def reset(self, *, seed: Optional[int] = None, options: Optional[dict] = None):
        super().reset(seed=seed)
        return self._obs.copy(), {}

    def action_group(self, obs=None) -> int:
        return 0

    def feasible_set(self, obs=None) -> tuple[int, ...]:
        return self.layout.groups[0]

    def reward(self, index: int, x: float) -> float:
        return -((x - self.target) ** 2) + (self.bonus if index == self.best else 0.0)

    def step(self, action):
        if not isinstance(action, HybridAction):
            action = HybridAction(*action)
        if action.mp_index not in (0, 1):
            raise ValueError(f"action {action.mp_index} is infeasible")
        x = float(np.clip(action.params[0], -1.0, 1.0))
        success = action.mp_index == self.best and abs(x - self.target) <= self.success_tol
        info = {"is_success": success, "control_steps": 1, "mp": self.layout.names[action.mp_index], "status": "SUCCESS"}
        return self._obs.copy(), self.reward(action.mp_index, x), True, False, info
