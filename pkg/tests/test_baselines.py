from __future__ import annotations

import numpy as np
import pytest

from mp_insertion.baselines import (
    APPROACH_OFFSET,
    FIX_SEQ_LOWER,
    FIX_SEQ_UPPER,
    EePoseConfig,
    EePoseEnv,
    FixSeqOutcome,
    FixSeqParams,
    approach_context,
    discretize_catalog,
    evaluate_fix_seq_trials,
    fix_seq_execute,
    fix_seq_objective,
    fix_seq_primitives,
    grid_fractions,
    optimize_fix_seq,
    tick_schedule,
    trial_seeds,
)
from mp_insertion.contact import CrossSection, SimConfig
from mp_insertion.env import EpisodeConfig, InsertionTask, PegInsertionEnv, action_layout
from mp_insertion.primitives import CatalogConfig, Family, MpKind, MpStatus, build_catalog, execute
from mp_insertion.se3 import Pose

NOMINAL = EpisodeConfig(noise_position=0.0, noise_rotation=0.0)


@pytest.fixture(scope="module")
def catalog():
    return build_catalog()


def test_grid_fractions():
    assert grid_fractions(2) == pytest.approx([0.25, 0.75])
    assert grid_fractions(1) == pytest.approx([0.5])


def test_discrete_catalog_has_47_actions(catalog):
    discrete = discretize_catalog(catalog)
    assert len(discrete) == 47
    assert all(a.dim == 0 for a in discrete.actions)
    for action, (mp_id, values) in zip(discrete.actions, discrete.provenance):
        assert action.primitive.id == mp_id
        assert len(values) == action.primitive.dim
        for bound in action.primitive.learnable:
            assert bound.low <= values[bound.name] <= bound.high
    per_mp = [sum(1 for mp_id, _ in discrete.provenance if mp_id == mp.id) for mp in catalog]
    assert per_mp == [2 ** mp.dim for mp in catalog]
    layout = action_layout(discrete.actions)
    assert layout.max_dim == 0
    assert len(layout.groups[0]) == 9 and len(layout.groups[1]) == 38


def test_discrete_values_sit_at_quarter_points(catalog):
    discrete = discretize_catalog(catalog)
    approach_x = [a for a in discrete.actions if a.primitive.id == 1]
    bound = catalog[1].learnable[0]
    assert [a.theta[0] for a in approach_x] == pytest.approx(
        [bound.low + 0.25 * (bound.high - bound.low), bound.low + 0.75 * (bound.high - bound.low)]
    )
    assert len(discretize_catalog(catalog, 1)) == 13
    with pytest.raises(ValueError):
        discretize_catalog(catalog, 0)


def test_discrete_env_runs(catalog):
    env = PegInsertionEnv(actions=discretize_catalog(catalog).actions, episode_cfg=EpisodeConfig(max_mps=2))
    env.reset(seed=0)
    obs, reward, terminated, truncated, info = env.step((0, []))
    assert info["mp"] == catalog[0].name
    assert np.all(np.isfinite(obs))


def test_tick_schedule_alternates():
    ticks = [tick_schedule(k, 0.002, 40.0) for k in range(8)]
    assert ticks == [12, 13] * 4
    assert sum(tick_schedule(k, 0.002, 40.0) for k in range(40)) == 500
    assert tick_schedule(3, 0.002, 50.0) == 10


def test_ee_pose_displacement_is_clipped():
    env = EePoseEnv()
    disp = env.displacement([2.0, -0.5, 0.0, 0.0, -3.0, 1.0])
    assert disp == pytest.approx([0.001, -0.0005, 0.0, 0.0, -0.02, 0.02])
    assert env.layout.dims == (6,)


def test_ee_pose_episode_truncates():
    env = EePoseEnv(ee_cfg=EePoseConfig(max_steps=2))
    obs, _ = env.reset(seed=1)
    total_ticks = 0
    for k in range(2):
        obs, reward, terminated, truncated, info = env.step(np.zeros(6))
        total_ticks += info["control_steps"]
        assert -1.0 <= reward <= 0.0
        assert not terminated
    assert truncated
    assert total_ticks == 25
    with pytest.raises(RuntimeError):
        env.step(np.zeros(6))


def test_ee_pose_moves_down():
    env = EePoseEnv()
    obs, _ = env.reset(seed=2)
    z0 = obs[2]
    obs, *_ = env.step(np.array([0.0, 0.0, -1.0, 0.0, 0.0, 0.0]))
    assert obs[2] == pytest.approx(z0 - 0.001, abs=2e-4)


def test_ee_pose_config_validation():
    with pytest.raises(ValueError):
        EePoseConfig(policy_rate_hz=0.0)
    with pytest.raises(ValueError):
        EePoseConfig(max_steps=0)


def test_fix_seq_params():
    default = FixSeqParams()
    assert default.as_dict() == pytest.approx({"lateral_speed": 0.005, "lateral_distance": 0.0015, "align_angle": 0.0, "insert_force": 10.0})
    assert np.array_equal(FixSeqParams.from_normalized(-np.ones(4)).values, FIX_SEQ_LOWER)
    assert FixSeqParams.from_normalized(np.full(4, 5.0)).values == pytest.approx(FIX_SEQ_UPPER)
    assert default.normalized() == pytest.approx([-3.0 / 7.0, 1.0 / 3.0, 0.0, 2.0 * 4.0 / 9.0 - 1.0])
    steps = default.steps()
    assert [name for name, _ in steps] == ["approach", "contact", "fit", "align", "insert"]
    assert dict(steps)["fit"] == pytest.approx((0.005, 0.0015))
    assert dict(steps)["insert"][1] == 10.0
    with pytest.raises(ValueError):
        FixSeqParams([0.02, 0.0015, 0.0, 10.0])
    with pytest.raises(ValueError):
        FixSeqParams([0.005, 0.0, 0.0, 10.0])
    with pytest.raises(ValueError):
        FixSeqParams([0.005, 0.0015, 0.0])


def test_fix_seq_primitives():
    sim_cfg = SimConfig()
    prims = fix_seq_primitives(sim_cfg)
    assert list(prims) == ["approach", "contact", "fit", "align", "insert"]
    catalog = build_catalog()
    assert prims["approach"] == catalog[0]
    assert prims["align"].id == 10 and prims["insert"].id == 12
    press, search = prims["contact"], prims["fit"]
    assert press.family is Family.IN_CONTACT and press.kind is MpKind.TRANSLATE_UNTIL_CONTACT and press.axis == "-z"
    assert press.fixed_params["f_thr"] == pytest.approx(0.9 * press.fixed_params["f_d"])
    assert search.kind is MpKind.LATERAL_SEARCH and search.dim == 2
    clearance = sim_cfg.hole.inradius - sim_cfg.peg.inradius
    assert search.fixed_params["pitch"] == pytest.approx(1.5 * clearance)


def test_approach_lands_beside_the_estimated_axis():
    task = InsertionTask(episode_cfg=NOMINAL)
    state = task.begin(np.random.default_rng(0))
    outcome = execute(build_catalog()[0], (), state, task.sim_cfg, ctx=approach_context(task))
    assert outcome.status is MpStatus.SUCCESS
    tip = task.task_pose(outcome.end_state).position
    assert tip[0] == pytest.approx(-APPROACH_OFFSET, abs=2e-4)
    assert tip[2] == pytest.approx(0.0, abs=2e-4)


def test_fix_seq_press_reaches_the_threshold():
    task = InsertionTask(episode_cfg=NOMINAL)
    prims = fix_seq_primitives(task.sim_cfg)
    state = task.begin(np.random.default_rng(0))
    landed = execute(prims["approach"], (), state, task.sim_cfg, ctx=approach_context(task)).end_state
    outcome = execute(prims["contact"], (), landed, task.sim_cfg, ctx=task.context())
    assert outcome.status is MpStatus.SUCCESS
    assert -outcome.end_state.f_ext.force[2] > prims["contact"].fixed_params["f_thr"]
    assert outcome.duration < prims["contact"].fixed_params["T"]


def test_fix_seq_nominal_task_runs_all_five_steps():
    outcome = fix_seq_execute(FixSeqParams(), InsertionTask(episode_cfg=NOMINAL), np.random.default_rng(0))
    assert outcome.success
    assert outcome.mps_attempted == 5
    assert outcome.post_approach == 4
    assert outcome.sequence == ("approach", "contact", "fit", "align", "insert")
    assert outcome.statuses == ("SUCCESS",) * 5


def test_fix_seq_failure_ends_the_trial():
    class OffsetTask(InsertionTask):
        def sample_perception_error(self, rng):
            return Pose.from_translation(0.0012, 0.0012, 0.0)

    # a 0.5 mm search around the estimate never reaches a hole 1.7 mm away
    params = FixSeqParams([0.005, 0.0005, 0.0, 10.0])
    outcome = fix_seq_execute(params, OffsetTask(episode_cfg=NOMINAL), np.random.default_rng(0))
    assert not outcome.success
    assert outcome.sequence == ("approach", "contact", "fit")
    assert outcome.statuses == ("SUCCESS", "SUCCESS", "FAILURE")
    assert outcome.mps_attempted == 3 and outcome.post_approach == 2


def test_fix_seq_execute_reports_a_trial():
    task = InsertionTask()
    outcome = fix_seq_execute(FixSeqParams(), task, np.random.default_rng(0))
    assert 1 <= outcome.mps_attempted <= 5
    assert outcome.post_approach == outcome.mps_attempted - 1
    assert outcome.sequence == ("approach", "contact", "fit", "align", "insert")[: outcome.mps_attempted]
    assert len(outcome.statuses) == outcome.mps_attempted
    assert outcome.execution_time > 0.0
    if outcome.mps_attempted < 5:
        assert not outcome.success
        assert outcome.statuses[-1] == "FAILURE"
    if outcome.success:
        assert "FAILURE" not in outcome.statuses
    again = fix_seq_execute(FixSeqParams(), InsertionTask(), np.random.default_rng(0), CatalogConfig())
    assert again == outcome


def test_optimized_fix_seq_solves_the_nominal_task():
    params, result = optimize_fix_seq(SimConfig(), NOMINAL, trials_per_eval=1, generations=2, sigma0=0.05, seed=0)
    assert result.best_f < 1.0
    outcomes = evaluate_fix_seq_trials(params, SimConfig(), NOMINAL, trial_seeds(7, 20))
    assert sum(o.success for o in outcomes) == 20
    assert all(o.mps_attempted == 5 for o in outcomes)


def test_optimized_fix_seq_succeeds_under_perception_noise():
    sim_cfg = SimConfig(peg=CrossSection.from_table("round", 29.9))
    params, _ = optimize_fix_seq(sim_cfg, EpisodeConfig(), trials_per_eval=2, generations=1, sigma0=0.05, seed=0)
    outcomes = evaluate_fix_seq_trials(params, sim_cfg, EpisodeConfig(), trial_seeds(11, 20))
    assert sum(o.success for o in outcomes) >= 1


def test_fix_seq_objective():
    def outcome(success, time):
        return FixSeqOutcome(success, time, 5, 4, (), ())

    trials = [outcome(True, 2.0), outcome(False, 4.0), outcome(True, 3.0), outcome(True, 3.0)]
    assert fix_seq_objective(trials, 0.01) == pytest.approx(0.25 + 0.01 * 3.0)
    assert fix_seq_objective(trials, 0.0) == pytest.approx(0.25)
    with pytest.raises(ValueError):
        fix_seq_objective([])


def test_trial_seeds_are_deterministic():
    assert trial_seeds(3, 5) == trial_seeds(3, 5)
    assert len(set(trial_seeds(3, 50))) == 50
    assert trial_seeds(3, 5) != trial_seeds(4, 5)


def test_optimize_fix_seq_with_population_evaluator():
    target = np.array([0.2, -0.4, 0.1, 0.5])
    seen = []

    def evaluate(population):
        seen.append(population.copy())
        return [float(np.sum((u - target) ** 2)) for u in population]

    params, result = optimize_fix_seq(SimConfig(), EpisodeConfig(), generations=60, seed=1, evaluate=evaluate)
    assert len(result.history) == 60
    assert all(np.all(np.abs(p) <= 1.0) for p in seen)
    assert params.normalized() == pytest.approx(target, abs=0.05)
    with pytest.raises(ValueError):
        optimize_fix_seq(SimConfig(), EpisodeConfig(), trials_per_eval=0)
