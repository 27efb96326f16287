from __future__ import annotations

import math

import numpy as np
import pytest

from mp_insertion.contact import SimConfig, SimState
from mp_insertion.primitives import (
    DEBOUNCE_STEPS,
    SEARCH_SETTLE,
    Family,
    ManipulationPrimitive,
    MpContext,
    MpKind,
    MpStatus,
    ParamBound,
    build_catalog,
    catalog_table,
    desired_commands,
    execute,
    search_waypoint,
    spiral_length,
    stopping,
    time_limit,
)
from mp_insertion.se3 import Pose, Wrench

FREE, CONTACT = Family.FREE_SPACE, Family.IN_CONTACT
TC, T, R, I = MpKind.TRANSLATE_UNTIL_CONTACT, MpKind.TRANSLATE_FIXED, MpKind.ROTATE_FIXED, MpKind.INSERT

# (family, kind, axis, fixed values, learnable (name, low, high))
TABLE = [
    (FREE, TC, "-z", {"v": 0.010, "f_thr": 5.0, "T": 2.0}, []),
    (FREE, T, "x", {"v": 0.010, "f_thr": 20.0}, [("d", -0.010, 0.010)]),
    (FREE, T, "y", {"v": 0.010, "f_thr": 20.0}, [("d", -0.010, 0.010)]),
    (FREE, R, "x", {"v": 0.1, "f_thr": 2.0}, [("d", -0.1, 0.1)]),
    (FREE, R, "y", {"v": 0.1, "f_thr": 2.0}, [("d", -0.1, 0.1)]),
    (CONTACT, TC, "x", {"f_d": 8.0}, [("v", -0.010, 0.010), ("f_thr", 5.0, 12.0), ("T", 0.1, 2.0)]),
    (CONTACT, TC, "y", {"f_d": 8.0}, [("v", -0.010, 0.010), ("f_thr", 5.0, 12.0), ("T", 0.1, 2.0)]),
    (CONTACT, T, "x", {"f_thr": 20.0, "f_d": 8.0}, [("v", 0.005, 0.010), ("d", -0.010, 0.010)]),
    (CONTACT, T, "y", {"f_thr": 20.0, "f_d": 8.0}, [("v", 0.005, 0.010), ("d", -0.010, 0.010)]),
    (CONTACT, R, "x", {"v": 0.1, "f_thr": 2.0, "f_d": 8.0}, [("d", -0.1, 0.1)]),
    (CONTACT, R, "y", {"v": 0.1, "f_thr": 2.0, "f_d": 8.0}, [("d", -0.1, 0.1)]),
    (CONTACT, R, "z", {"v": 0.1, "f_thr": 2.0, "f_d": 8.0}, [("d", -0.1, 0.1)]),
    (CONTACT, I, "-z", {"epsilon": 0.002}, [("k", 0.01, 0.2), ("f_d", 6.0, 15.0), ("T", 0.1, 2.0)]),
]


@pytest.fixture(scope="module")
def catalog():
    return build_catalog()


@pytest.fixture
def cfg():
    return SimConfig()


def _above_plate(height: float) -> SimState:
    # laterally clear of the hole, so the peg lands on the top face
    return SimState(ee_pose=Pose.from_translation(0.04, 0.0, height))


def test_catalog_matches_table(catalog):
    assert len(catalog) == 13
    for mp, (family, kind, axis, fixed, learnable) in zip(catalog, TABLE):
        assert (mp.family, mp.kind, mp.axis) == (family, kind, axis)
        assert mp.fixed_params == fixed
        assert [(b.name, b.low, b.high) for b in mp.learnable] == learnable
    assert [mp.id for mp in catalog] == list(range(13))


def test_catalog_dimensions(catalog):
    assert [mp.dim for mp in catalog] == [0, 1, 1, 1, 1, 3, 3, 2, 2, 1, 1, 1, 3]
    assert sum(mp.dim for mp in catalog) == 20
    assert sum(mp.family is FREE for mp in catalog) == 5
    assert sum(mp.family is CONTACT for mp in catalog) == 8


def test_catalog_table_lists_every_primitive(catalog):
    text = catalog_table(catalog)
    lines = text.splitlines()
    assert len(lines) == 14
    assert "contact I(-z)" in text
    assert "k∈[0.01, 0.2]" in text


def test_primitive_validation():
    with pytest.raises(ValueError):
        ManipulationPrimitive(0, FREE, T, "x", fixed=(("v", 0.01), ("f_d", 8.0)))
    with pytest.raises(ValueError):
        ManipulationPrimitive(0, CONTACT, T, "x", fixed=(("v", 0.01),))
    with pytest.raises(ValueError):
        ManipulationPrimitive(0, FREE, T, "w", fixed=(("v", 0.01),))
    with pytest.raises(ValueError):
        ParamBound("d", 0.1, -0.1, "m")


def test_theta_outside_bounds_is_rejected(catalog, cfg):
    with pytest.raises(ValueError):
        catalog[1].check([0.02])
    with pytest.raises(ValueError):
        execute(catalog[12], [0.5, 10.0, 1.0], _above_plate(0.01), cfg)
    with pytest.raises(ValueError):
        catalog[5].params([0.01, 6.0])


def test_normalization_maps_onto_bounds(catalog):
    mp = catalog[12]
    assert np.allclose(mp.denormalize([-1.0, -1.0, -1.0]), mp.lows)
    assert np.allclose(mp.denormalize([1.0, 1.0, 1.0]), mp.highs)
    assert np.allclose(mp.denormalize([5.0, -5.0, 0.0]), [0.2, 6.0, 1.05])
    theta = np.array([0.05, 9.0, 0.5])
    assert np.allclose(mp.denormalize(mp.normalize(theta)), theta)


def test_free_approach_commands(catalog):
    twist, wrench = desired_commands(catalog[0], (), 0.0, _above_plate(0.01))
    assert np.allclose(twist.vector(), [0.0, 0.0, -0.010, 0.0, 0.0, 0.0])
    assert wrench.is_zero()


def test_free_space_primitives_never_command_force(catalog):
    rng = np.random.default_rng(1)
    for mp in catalog:
        if mp.family is not FREE:
            continue
        for _ in range(20):
            theta = mp.denormalize(rng.uniform(-1.0, 1.0, mp.dim))
            state = SimState(
                ee_pose=Pose.from_translation(*rng.uniform(-0.02, 0.02, 3)),
                f_ext=Wrench(force=rng.normal(size=3) * 5.0, torque=rng.normal(size=3)),
            )
            _, wrench = desired_commands(mp, theta, rng.uniform(0.0, 2.0), state)
            assert wrench.is_zero()


def test_in_contact_primitives_press_down(catalog):
    for mp in catalog:
        if mp.family is not CONTACT:
            continue
        theta = mp.denormalize(np.zeros(mp.dim))
        _, wrench = desired_commands(mp, theta, 0.0, _above_plate(0.0))
        assert wrench.force[2] == pytest.approx(-mp.params(theta)["f_d"])
        assert np.allclose(wrench.force[:2], 0.0)


def test_velocity_commands_stay_within_table_limits(catalog):
    state = _above_plate(0.01)
    for mp in catalog:
        for corner in (mp.lows, mp.highs):
            twist, _ = desired_commands(mp, corner, 0.0, state)
            assert np.linalg.norm(twist.linear) <= 0.010 + 1e-12
            assert np.linalg.norm(twist.angular) <= 0.1 + 1e-12


def test_until_contact_success_on_opposing_force(catalog):
    pressed = SimState(ee_pose=Pose.identity(), f_ext=Wrench(force=[0.0, 0.0, -6.0]))
    assert stopping(catalog[0], (), 0.5, pressed) is MpStatus.SUCCESS
    light = SimState(ee_pose=Pose.identity(), f_ext=Wrench(force=[0.0, 0.0, -4.0]))
    assert stopping(catalog[0], (), 0.5, light) is MpStatus.CONTINUE
    assert stopping(catalog[0], (), 2.0, light) is MpStatus.FAILURE


def test_in_contact_until_contact_ignores_pressing_force(catalog):
    mp = catalog[5]
    theta = (0.01, 5.0, 1.0)
    pressing = SimState(ee_pose=Pose.identity(), f_ext=Wrench(force=[0.0, 0.0, -8.0]))
    assert stopping(mp, theta, 0.1, pressing) is MpStatus.CONTINUE
    hit = SimState(ee_pose=Pose.identity(), f_ext=Wrench(force=[6.0, 0.0, -8.0]))
    assert stopping(mp, theta, 0.1, hit) is MpStatus.SUCCESS
    backwards = (-0.01, 5.0, 1.0)
    assert stopping(mp, backwards, 0.1, hit) is MpStatus.CONTINUE


def test_translate_fixed_stopping(catalog):
    mp = catalog[1]
    start = Pose.from_translation(0.04, 0.0, 0.01)
    ctx = MpContext(start=start)
    arrived = SimState(ee_pose=Pose.from_translation(0.045, 0.0, 0.01))
    assert stopping(mp, (0.005,), 0.5, arrived, ctx) is MpStatus.SUCCESS
    halfway = SimState(ee_pose=Pose.from_translation(0.0425, 0.0, 0.01))
    assert stopping(mp, (0.005,), 0.25, halfway, ctx) is MpStatus.CONTINUE
    blocked = SimState(ee_pose=halfway.ee_pose, f_ext=Wrench(force=[25.0, 0.0, 0.0]))
    assert stopping(mp, (0.005,), 0.25, blocked, ctx) is MpStatus.FAILURE
    assert stopping(mp, (0.005,), 1.0, halfway, ctx) is MpStatus.FAILURE
    assert time_limit(mp, (0.005,)) == pytest.approx(1.0)


def test_rotate_until_contact_kind():
    mp = ManipulationPrimitive(
        99, FREE, MpKind.ROTATE_UNTIL_CONTACT, "z", fixed=(("v", 0.1), ("f_thr", 0.5), ("T", 1.0))
    )
    twist, _ = desired_commands(mp, (), 0.0, _above_plate(0.01))
    assert np.allclose(twist.angular, [0.0, 0.0, 0.1])
    twisted = SimState(ee_pose=Pose.identity(), f_ext=Wrench(torque=[0.0, 0.0, 1.0]))
    assert stopping(mp, (), 0.1, twisted) is MpStatus.SUCCESS
    assert stopping(mp, (), 1.0, _above_plate(0.01)) is MpStatus.FAILURE


def _search(pitch: float = 5e-5) -> ManipulationPrimitive:
    return ManipulationPrimitive(
        14,
        CONTACT,
        MpKind.LATERAL_SEARCH,
        "-z",
        fixed=(("pitch", pitch), ("lead", 0.003), ("drop", 0.001), ("f_d", 8.0)),
        learnable=(ParamBound("v", 0.003, 0.010, "m/s"), ParamBound("d", 0.0005, 0.002, "m")),
    )


def test_lateral_search_validation():
    with pytest.raises(ValueError):
        ManipulationPrimitive(14, CONTACT, MpKind.LATERAL_SEARCH, "-z", fixed=(("lead", 0.003), ("drop", 0.001), ("f_d", 8.0)),
                              learnable=(ParamBound("v", 0.003, 0.010, "m/s"), ParamBound("d", 0.0005, 0.002, "m")))
    with pytest.raises(ValueError):
        ManipulationPrimitive(14, FREE, MpKind.LATERAL_SEARCH, "-z", fixed=(("pitch", 5e-5), ("lead", 0.003), ("drop", 0.001)),
                              learnable=(ParamBound("v", 0.003, 0.010, "m/s"), ParamBound("d", 0.0005, 0.002, "m")))
    assert _search().name == "contact S(-z)"


def test_search_path_leads_in_then_spirals_out():
    start = np.array([-0.002, 0.0])
    point, tangent = search_waypoint(start, 5e-5, 0.0015, 0.0)
    assert np.allclose(point, start) and np.allclose(tangent, [1.0, 0.0])
    point, _ = search_waypoint(start, 5e-5, 0.0015, 0.001)
    assert np.allclose(point, [-0.001, 0.0])
    point, _ = search_waypoint(start, 5e-5, 0.0015, 0.002)
    assert np.allclose(point, 0.0, atol=1e-12)
    length = spiral_length(5e-5, 0.0015)
    assert length == pytest.approx(math.pi * 0.0015**2 / 5e-5, rel=0.01)
    radii = [np.linalg.norm(search_waypoint(start, 5e-5, 0.0015, 0.002 + s)[0]) for s in np.linspace(0.0, length, 400)]
    assert np.all(np.diff(radii) >= -5e-6)
    assert radii[-1] == pytest.approx(0.0015, rel=1e-6)
    end, still = search_waypoint(start, 5e-5, 0.0015, 0.002 + length + 0.001)
    assert np.linalg.norm(end) == pytest.approx(0.0015) and np.allclose(still, 0.0)
    _, unit = search_waypoint(start, 5e-5, 0.0015, 0.002 + 0.5 * length)
    assert np.linalg.norm(unit) == pytest.approx(1.0)


def test_lateral_search_commands():
    mp = _search()
    ctx = MpContext(start=Pose.from_translation(-0.002, 0.0, 0.0))
    on_path = SimState(ee_pose=Pose.from_translation(-0.002, 0.0, 0.0))
    twist, wrench = desired_commands(mp, (0.005, 0.0015), 0.0, on_path, ctx)
    assert twist.linear == pytest.approx([0.005, 0.0, 0.0])
    assert np.allclose(twist.angular, 0.0)
    assert wrench.force == pytest.approx([0.0, 0.0, -8.0])
    off_path = SimState(ee_pose=Pose.from_translation(-0.002, 0.001, 0.0))
    twist, _ = desired_commands(mp, (0.005, 0.0015), 0.0, off_path, ctx)
    assert twist.linear == pytest.approx([0.005, -0.005, 0.0])


def test_lateral_search_stops_on_drop():
    mp = _search()
    theta = (0.005, 0.0015)
    ctx = MpContext(start=Pose.identity())
    assert stopping(mp, theta, 0.1, SimState(ee_pose=Pose.from_translation(0.0, 0.0, -0.0011)), ctx) is MpStatus.SUCCESS
    shallow = SimState(ee_pose=Pose.from_translation(0.0, 0.0, -0.0005))
    assert stopping(mp, theta, 0.1, shallow, ctx) is MpStatus.CONTINUE
    limit = time_limit(mp, theta)
    assert limit == pytest.approx((0.003 + spiral_length(5e-5, 0.0015)) / 0.005 + SEARCH_SETTLE)
    assert stopping(mp, theta, limit, shallow, ctx) is MpStatus.FAILURE


def test_press_along_z_counts_pressing_force():
    press = ManipulationPrimitive(
        13, CONTACT, TC, "-z", fixed=(("v", 0.001), ("f_thr", 7.2), ("T", 1.0), ("f_d", 8.0))
    )
    pressed = SimState(ee_pose=Pose.identity(), f_ext=Wrench(force=[0.0, 0.0, -9.0]))
    assert stopping(press, (), 0.1, pressed) is MpStatus.SUCCESS
    resting = SimState(ee_pose=Pose.identity(), f_ext=Wrench(force=[0.0, 0.0, -5.0]))
    assert stopping(press, (), 0.1, resting) is MpStatus.CONTINUE
    assert stopping(press, (), 1.0, resting) is MpStatus.FAILURE
    twist, wrench = desired_commands(press, (), 0.0, resting)
    assert twist.linear == pytest.approx([0.0, 0.0, -0.001])
    assert wrench.force == pytest.approx([0.0, 0.0, -8.0])


def test_insert_success_near_goal(catalog):
    mp = catalog[12]
    ctx = MpContext(goal=np.array([0.0, 0.0, -0.010]))
    near = SimState(ee_pose=Pose.from_translation(0.0, 0.0, -0.0085))
    assert stopping(mp, (0.1, 10.0, 1.0), 0.2, near, ctx) is MpStatus.SUCCESS
    far = SimState(ee_pose=Pose.from_translation(0.0, 0.0, -0.005))
    assert stopping(mp, (0.1, 10.0, 1.0), 0.2, far, ctx) is MpStatus.CONTINUE
    assert stopping(mp, (0.1, 10.0, 1.0), 1.0, far, ctx) is MpStatus.FAILURE


def test_insert_turns_against_measured_torque(catalog):
    state = SimState(ee_pose=Pose.identity(), f_ext=Wrench(torque=[0.2, -0.1, 0.0]))
    twist, _ = desired_commands(catalog[12], (0.1, 10.0, 1.0), 0.0, state)
    assert np.allclose(twist.angular, [-0.02, 0.01, 0.0])
    assert np.allclose(twist.linear, 0.0)


def test_approach_times_out_far_above_plate(catalog, cfg):
    outcome = execute(catalog[0], (), _above_plate(0.030), cfg)
    assert outcome.status is MpStatus.FAILURE
    assert outcome.duration == pytest.approx(2.0)
    assert outcome.end_state.ee_pose.position[2] == pytest.approx(0.010, abs=1e-6)


def test_approach_lands_on_plate(catalog, cfg):
    outcome = execute(catalog[0], (), _above_plate(0.005), cfg)
    assert outcome.status is MpStatus.SUCCESS
    assert 0.5 <= outcome.duration < 0.7
    assert outcome.end_state.f_ext.force[2] < -5.0
    assert outcome.control_steps >= DEBOUNCE_STEPS


def test_approach_time_of_flight(catalog, cfg):
    # 10 mm at 10 mm/s, then a few ticks to build the threshold force and debounce it
    outcome = execute(catalog[0], (), _above_plate(0.010), cfg)
    assert outcome.status is MpStatus.SUCCESS
    assert outcome.duration == pytest.approx(1.006, abs=0.005)
    assert outcome.end_state.f_ext.force[2] <= -5.0


def test_translate_fixed_reaches_distance(catalog, cfg):
    start = _above_plate(0.01)
    outcome = execute(catalog[1], (0.005,), start, cfg)
    assert outcome.status is MpStatus.SUCCESS
    moved = outcome.end_state.ee_pose.position - start.ee_pose.position
    assert moved[0] == pytest.approx(0.005, abs=3e-5)
    assert abs(moved[1]) < 1e-12


def test_zero_distance_succeeds_immediately(catalog, cfg):
    outcome = execute(catalog[3], (0.0,), _above_plate(0.01), cfg)
    assert outcome.status is MpStatus.SUCCESS
    assert outcome.duration == 0.0
    assert outcome.control_steps == 0


def test_commands_follow_the_task_frame(catalog, cfg):
    frame = Pose(orientation=[0.0, 0.0, math.sin(math.pi / 4), math.cos(math.pi / 4)])
    start = _above_plate(0.01)
    outcome = execute(catalog[1], (0.004,), start, cfg, ctx=MpContext(frame=frame))
    moved = outcome.end_state.ee_pose.position - start.ee_pose.position
    assert outcome.status is MpStatus.SUCCESS
    assert moved[1] == pytest.approx(0.004, abs=3e-5)
    assert abs(moved[0]) < 1e-9


def test_statuses_are_terminal(catalog, cfg):
    rng = np.random.default_rng(5)
    state = _above_plate(0.002)
    for mp in (catalog[0], catalog[2], catalog[4]):
        theta = mp.denormalize(rng.uniform(-1.0, 1.0, mp.dim))
        outcome = execute(mp, theta, state, cfg, rng=rng)
        assert outcome.status in (MpStatus.SUCCESS, MpStatus.FAILURE)
        state = outcome.end_state
