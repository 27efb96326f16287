from __future__ import annotations

import math

import numpy as np
import pytest
from scipy import stats

from mp_insertion.contact import SimState
from mp_insertion.env import (
    ActionSpec,
    EpisodeConfig,
    InsertionTask,
    PegInsertionEnv,
    distance_reward,
    hybrid_action_set,
    step_reward,
)
from mp_insertion.policy import HybridAction
from mp_insertion.primitives import Family, MpStatus, build_catalog, stopping
from mp_insertion.se3 import Pose, Wrench


@pytest.fixture
def env():
    return PegInsertionEnv()


@pytest.fixture
def quiet_env():
    return PegInsertionEnv(episode_cfg=EpisodeConfig(noise_position=0.0, noise_rotation=0.0))


def _expected_reward(error, status, c1=1.0, c2=0.2, k1=1e-4):
    squared = sum(float(e) ** 2 for e in error)
    s = 0.0 if status is MpStatus.SUCCESS else -1.0
    return c1 * (math.exp(-squared / k1) - 1.0) + c2 * s


def test_reward_law_on_hand_built_cases():
    cfg = EpisodeConfig()
    rng = np.random.default_rng(11)
    cases = [(np.zeros(6), MpStatus.SUCCESS), (np.zeros(6), MpStatus.FAILURE)]
    cases += [(np.array([0.01, 0.0, 0.0, 0.0, 0.0, 0.0]), MpStatus.SUCCESS), (np.full(6, 1.0), MpStatus.FAILURE)]
    while len(cases) < 20:
        scale = rng.choice([1e-4, 1e-3, 1e-2])
        status = MpStatus.SUCCESS if len(cases) % 2 else MpStatus.FAILURE
        cases.append((rng.normal(size=6) * scale, status))
    for error, status in cases:
        r = step_reward(error, status, cfg)
        assert abs(r - _expected_reward(error, status)) < 1e-12
        assert -cfg.c1 - cfg.c2 <= r <= 0.0
    assert step_reward(np.zeros(6), MpStatus.SUCCESS, cfg) == 0.0
    assert step_reward(np.full(6, 1.0), MpStatus.FAILURE, cfg) == pytest.approx(-1.2)


def test_rotation_weight_scales_orientation_error():
    cfg = EpisodeConfig(rotation_weight=0.0)
    assert distance_reward(np.array([0, 0, 0, 0.5, 0.5, 0.5]), cfg) == 0.0


def test_episode_config_validation():
    with pytest.raises(ValueError):
        EpisodeConfig(k1=0.0)
    with pytest.raises(ValueError):
        EpisodeConfig(max_mps=0)
    with pytest.raises(ValueError):
        EpisodeConfig(noise_position=-1.0)


def test_reset_observation(env):
    obs, info = env.reset(seed=3)
    assert obs.shape == (12,)
    assert np.all(np.isfinite(obs))
    assert obs[:3] == pytest.approx([0.0, 0.0, 0.010], abs=1e-12)
    assert np.allclose(obs[6:], 0.0)
    assert env.action_group(obs) == 0
    assert "goal_distance" in info


def test_reset_is_seeded(env):
    a, _ = env.reset(seed=21)
    frame_a = env.task.frame
    b, _ = env.reset(seed=21)
    assert np.array_equal(a, b)
    assert np.array_equal(frame_a.position, env.task.frame.position)
    assert np.all(np.abs(frame_a.position) <= 0.001)


def test_perception_offsets_are_uniform():
    task = InsertionTask()
    rng = np.random.default_rng(2024)
    frames = [task.sample_perception_error(rng) for _ in range(10_000)]
    offsets = np.array([f.position for f in frames])
    for axis in range(3):
        assert stats.kstest(offsets[:, axis], "uniform", args=(-0.001, 0.002)).pvalue > 0.01
    angles = np.array([np.linalg.norm(f.rotvec()) for f in frames])
    assert angles.max() <= math.radians(1.0) + 1e-12


def test_feasible_sets_partition_the_catalog(env):
    free, contact = env.layout.groups
    assert set(free) | set(contact) == set(range(13))
    assert not set(free) & set(contact)
    assert all(env.actions[i].family is Family.FREE_SPACE for i in free)
    assert len(free) == 5 and len(contact) == 8


def test_infeasible_action_is_rejected(env):
    env.reset(seed=0)
    with pytest.raises(ValueError):
        env.step(HybridAction(12, np.zeros(3)))


def test_approach_then_truncation(env):
    env = PegInsertionEnv(episode_cfg=EpisodeConfig(max_mps=1))
    env.reset(seed=4)
    obs, reward, terminated, truncated, info = env.step((0, []))
    assert info["mp"] == "free Tc(-z)"
    assert info["status"] in ("SUCCESS", "FAILURE")
    assert info["mp_count"] == 1
    assert info["duration"] == pytest.approx(info["control_steps"] * env.sim_cfg.dt)
    assert not terminated and truncated
    assert -1.2 <= reward <= 0.0
    with pytest.raises(RuntimeError):
        env.step((0, []))


def test_approach_makes_contact(env):
    env.reset(seed=8)
    obs, _, _, _, info = env.step(HybridAction(0))
    assert info["status"] == "SUCCESS"
    assert obs[8] < -0.5
    assert env.action_group(obs) == 1
    assert env.feasible_set(obs) == env.layout.groups[1]


def test_success_adds_termination_bonus(quiet_env):
    quiet_env.reset(seed=0)
    task = quiet_env.task
    state = SimState(ee_pose=Pose.from_translation(0.0, 0.0, -0.0095), f_ext=Wrench(force=[0.0, 0.0, -8.0]))
    task.state = state
    quiet_env._obs = task.observe(state)
    assert quiet_env.action_group() == 1
    # contact T(x) with d at the middle of its range (0 mm) ends immediately
    obs, reward, terminated, truncated, info = quiet_env.step((7, [0.0, 0.0]))
    assert info["status"] == "SUCCESS"
    assert info["is_success"]
    assert terminated and not truncated
    expected = distance_reward(task.goal_error(state), quiet_env.episode_cfg) + 5.0
    assert reward == pytest.approx(expected, abs=1e-12)


def test_success_uses_true_hole_frame():
    task = InsertionTask()
    task.begin(np.random.default_rng(2))
    at_goal = SimState(ee_pose=Pose.from_translation(0.0, 0.0, -0.010))
    assert task.is_success(at_goal)
    near = SimState(ee_pose=Pose.from_translation(0.0015, 0.0, -0.010))
    assert task.is_success(near)
    assert not task.is_success(SimState(ee_pose=Pose.from_translation(0.0, 0.0, -0.0075)))


def test_insert_stops_on_the_estimated_goal():
    # the estimate sits 1 mm high: 1.9 mm from the estimated goal is 2.9 mm from the true one
    task = InsertionTask()
    task.frame = Pose.from_translation(0.0, 0.0, 0.001)
    short = SimState(ee_pose=Pose.from_translation(0.0, 0.0, -0.0071))
    insert = build_catalog()[12]
    assert stopping(insert, (0.1, 10.0, 1.0), 0.2, short, task.context()) is MpStatus.SUCCESS
    assert not task.is_success(short)


def test_same_seed_same_episode():
    def run(seed):
        env = PegInsertionEnv(episode_cfg=EpisodeConfig(max_mps=2))
        obs, _ = env.reset(seed=seed)
        trace = [obs]
        for action in ((0, []), (9, [0.5])):
            if env.action_group() == 0 and action[0] == 9:
                action = (1, [0.5])
            obs, reward, *_ = env.step(action)
            trace += [obs, np.array([reward])]
        return np.concatenate(trace)

    assert np.array_equal(run(5), run(5))


def test_fixed_theta_actions():
    catalog = build_catalog()
    spec = ActionSpec(catalog[1], theta=(0.0025,))
    assert spec.dim == 0
    assert np.allclose(spec.resolve(), [0.0025])
    with pytest.raises(ValueError):
        ActionSpec(catalog[1], theta=(0.5,))
    learnable = hybrid_action_set(catalog)[12]
    assert np.allclose(learnable.resolve([-1.0, 1.0, 0.0]), [0.01, 15.0, 1.05])
