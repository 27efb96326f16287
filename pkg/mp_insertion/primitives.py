from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from enum import Enum
from functools import lru_cache
from typing import Mapping, Optional, Sequence

import numpy as np

from .contact import SimConfig, SimState, hybrid_control_step
from .se3 import Pose, Twist, Wrench, relative

# until-contact SUCCESS must hold on this many consecutive ticks
DEBOUNCE_STEPS = 3
_TIME_EPS = 1e-9
_BOUND_EPS = 1e-12


class MpStatus(str, Enum):
    SUCCESS = "SUCCESS"
    FAILURE = "FAILURE"
    CONTINUE = "CONTINUE"


class Family(str, Enum):
    FREE_SPACE = "free_space"
    IN_CONTACT = "in_contact"


class MpKind(str, Enum):
    TRANSLATE_UNTIL_CONTACT = "translate_until_contact"
    TRANSLATE_FIXED = "translate_fixed"
    ROTATE_FIXED = "rotate_fixed"
    ROTATE_UNTIL_CONTACT = "rotate_until_contact"
    INSERT = "insert"
    LATERAL_SEARCH = "lateral_search"


_UNTIL_CONTACT = (MpKind.TRANSLATE_UNTIL_CONTACT, MpKind.ROTATE_UNTIL_CONTACT)
_ROTATIONS = (MpKind.ROTATE_FIXED, MpKind.ROTATE_UNTIL_CONTACT)
_SYMBOLS = {
    MpKind.TRANSLATE_UNTIL_CONTACT: "Tc",
    MpKind.TRANSLATE_FIXED: "T",
    MpKind.ROTATE_FIXED: "R",
    MpKind.ROTATE_UNTIL_CONTACT: "Rc",
    MpKind.INSERT: "I",
    MpKind.LATERAL_SEARCH: "S",
}
# lateral search: position gain (1/s) pulling the tip back onto the path, and slack after the path ends (s)
SEARCH_GAIN = 20.0
SEARCH_SETTLE = 0.25
_AXES = {
    "x": (1.0, 0.0, 0.0),
    "-x": (-1.0, 0.0, 0.0),
    "y": (0.0, 1.0, 0.0),
    "-y": (0.0, -1.0, 0.0),
    "z": (0.0, 0.0, 1.0),
    "-z": (0.0, 0.0, -1.0),
}


@dataclass(frozen=True)
class ParamBound:
    name: str
    low: float
    high: float
    unit: str

    def __post_init__(self) -> None:
        if not self.low < self.high:
            raise ValueError(f"bound {self.name}: low {self.low} must be < high {self.high}")


@dataclass(frozen=True)
class ManipulationPrimitive:
    """A velocity command, a force command and a stopping rule acting along one task-frame axis."""

    id: int
    family: Family
    kind: MpKind
    axis: str
    fixed: tuple[tuple[str, float], ...] = ()
    learnable: tuple[ParamBound, ...] = ()

    def __post_init__(self) -> None:
        if self.axis not in _AXES:
            raise ValueError(f"unknown axis {self.axis!r}")
        names = [name for name, _ in self.fixed] + [b.name for b in self.learnable]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate parameter names in MP {self.id}: {names}")
        if self.family is Family.FREE_SPACE and "f_d" in names:
            raise ValueError(f"free-space MP {self.id} cannot carry a desired force")
        if self.kind is MpKind.LATERAL_SEARCH:
            missing = {"v", "d", "pitch", "lead", "drop"} - set(names)
            if self.family is not Family.IN_CONTACT or missing:
                raise ValueError(f"lateral search MP {self.id} must be in-contact with v, d, pitch, lead, drop (missing {sorted(missing)})")
        if self.family is Family.IN_CONTACT:
            if "f_d" not in names:
                raise ValueError(f"in-contact MP {self.id} needs a desired force f_d")
            if "f_d" in self.fixed_params and not self.fixed_params["f_d"] > 0:
                raise ValueError(f"in-contact MP {self.id}: f_d must be > 0")
            if any(b.name == "f_d" and b.low <= 0 for b in self.learnable):
                raise ValueError(f"in-contact MP {self.id}: f_d bounds must be > 0")

    @property
    def name(self) -> str:
        prefix = "free" if self.family is Family.FREE_SPACE else "contact"
        return f"{prefix} {_SYMBOLS[self.kind]}({self.axis})"

    @property
    def dim(self) -> int:
        return len(self.learnable)

    @property
    def fixed_params(self) -> dict[str, float]:
        return dict(self.fixed)

    @property
    def axis_vector(self) -> np.ndarray:
        return np.array(_AXES[self.axis])

    @property
    def lows(self) -> np.ndarray:
        return np.array([b.low for b in self.learnable], dtype=float)

    @property
    def highs(self) -> np.ndarray:
        return np.array([b.high for b in self.learnable], dtype=float)

    def check(self, theta: Sequence[float]) -> np.ndarray:
        theta = np.asarray(theta, dtype=float).reshape(-1)
        if theta.shape != (self.dim,):
            raise ValueError(f"{self.name}: expected {self.dim} parameters, got {theta.shape[0]}")
        for value, bound in zip(theta, self.learnable):
            if not (bound.low - _BOUND_EPS <= value <= bound.high + _BOUND_EPS):
                raise ValueError(f"{self.name}: {bound.name}={value!r} outside [{bound.low}, {bound.high}] {bound.unit}")
        return theta

    def params(self, theta: Sequence[float]) -> dict[str, float]:
        theta = self.check(theta)
        merged = self.fixed_params
        merged.update({b.name: float(v) for b, v in zip(self.learnable, theta)})
        return merged

    def denormalize(self, u: Sequence[float]) -> np.ndarray:
        """Map normalized [-1, 1] parameters onto the learnable bounds, clipping first."""
        u = np.clip(np.asarray(u, dtype=float).reshape(-1)[: self.dim], -1.0, 1.0)
        return self.lows + 0.5 * (u + 1.0) * (self.highs - self.lows)

    def normalize(self, theta: Sequence[float]) -> np.ndarray:
        theta = np.asarray(theta, dtype=float).reshape(-1)
        return 2.0 * (theta - self.lows) / (self.highs - self.lows) - 1.0


@dataclass(frozen=True, eq=False)
class MpContext:
    """Where an MP runs: the (estimated) task frame in simulator coordinates, its start pose and the
    insertion goal position expressed in the task frame."""

    frame: Pose = field(default_factory=Pose.identity)
    start: Optional[Pose] = None
    goal: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, -0.010]))

    def task_pose(self, state: SimState) -> Pose:
        return relative(self.frame, state.ee_pose)

    def task_wrench(self, state: SimState) -> np.ndarray:
        inv = self.frame.rotation.inv()
        return state.f_ext.rotated(inv).vector()


@dataclass(frozen=True, eq=False)
class MpOutcome:
    status: MpStatus
    duration: float
    end_state: SimState
    control_steps: int


@lru_cache(maxsize=32)
def _spiral(pitch: float, radius: float) -> tuple[np.ndarray, np.ndarray]:
    # Archimedean spiral r = pitch·φ/2π from the axis out to ``radius``; cumulative arc length and points
    turns = radius / pitch
    phi = np.linspace(0.0, 2.0 * np.pi * turns, max(int(math.ceil(turns * 64)), 64) + 1)
    r = pitch * phi / (2.0 * np.pi)
    xy = np.column_stack([r * np.cos(phi), r * np.sin(phi)])
    s = np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(xy, axis=0), axis=1))])
    xy.setflags(write=False)
    s.setflags(write=False)
    return s, xy


def spiral_length(pitch: float, radius: float) -> float:
    return float(_spiral(float(pitch), float(radius))[0][-1])


def search_waypoint(start_xy: np.ndarray, pitch: float, radius: float, s: float) -> tuple[np.ndarray, np.ndarray]:
    """Point and unit tangent at arc length ``s`` of the search path: a straight lead-in from
    ``start_xy`` to the task axis, then the outward spiral. The tangent is zero past the end."""
    start_xy = np.asarray(start_xy, dtype=float)
    lead = float(np.linalg.norm(start_xy))
    if s < lead:
        direction = -start_xy / lead
        return start_xy + s * direction, direction
    arc, xy = _spiral(float(pitch), float(radius))
    rest = s - lead
    if rest >= arc[-1]:
        return xy[-1].copy(), np.zeros(2)
    k = int(np.searchsorted(arc, rest, side="right")) - 1
    seg = xy[k + 1] - xy[k]
    length = arc[k + 1] - arc[k]
    return xy[k] + (rest - arc[k]) / length * seg, seg / length


def desired_commands(
    mp: ManipulationPrimitive,
    theta: Sequence[float],
    t: float,
    state: SimState,
    ctx: Optional[MpContext] = None,
) -> tuple[Twist, Wrench]:
    """Task-frame velocity and force commands at time ``t``."""
    p = mp.params(theta)
    ctx = ctx or MpContext()
    u = mp.axis_vector
    f_des = Wrench.zero() if mp.family is Family.FREE_SPACE else Wrench(force=np.array([0.0, 0.0, -p["f_d"]]))
    if mp.kind is MpKind.LATERAL_SEARCH:
        origin = relative(ctx.frame, ctx.start or state.ee_pose).position[:2]
        target, tangent = search_waypoint(origin, p["pitch"], p["d"], p["v"] * t)
        correction = SEARCH_GAIN * (target - ctx.task_pose(state).position[:2])
        norm = float(np.linalg.norm(correction))
        if norm > p["v"]:
            correction *= p["v"] / norm
        lateral = p["v"] * tangent + correction
        return Twist(linear=np.array([lateral[0], lateral[1], 0.0])), f_des
    if mp.kind is MpKind.INSERT:
        torque = ctx.task_wrench(state)[3:]
        return Twist(angular=-p["k"] * torque), f_des
    if mp.kind in _UNTIL_CONTACT:
        rate = p["v"]
    else:
        rate = math.copysign(p["v"], p["d"]) if p["d"] != 0.0 else 0.0
    if mp.kind in _ROTATIONS:
        return Twist(angular=rate * u), f_des
    return Twist(linear=rate * u), f_des


def _travelled(mp: ManipulationPrimitive, direction: np.ndarray, state: SimState, ctx: MpContext) -> float:
    start = ctx.start or state.ee_pose
    axis = ctx.frame.rotation.apply(direction)
    if mp.kind in _ROTATIONS:
        delta = (state.ee_pose.rotation * start.rotation.inv()).as_rotvec()
    else:
        delta = state.ee_pose.position - start.position
    return float(delta @ axis)


def stopping(
    mp: ManipulationPrimitive,
    theta: Sequence[float],
    t: float,
    state: SimState,
    ctx: Optional[MpContext] = None,
) -> MpStatus:
    """Instantaneous stopping rule; debouncing of contact detection lives in :func:`execute`."""
    p = mp.params(theta)
    ctx = ctx or MpContext()
    wrench = ctx.task_wrench(state)
    u = mp.axis_vector

    if mp.kind in _UNTIL_CONTACT:
        direction = math.copysign(1.0, p["v"]) * u if p["v"] != 0.0 else np.zeros(3)
        component = wrench[3:].copy() if mp.kind in _ROTATIONS else wrench[:3].copy()
        if mp.family is Family.IN_CONTACT and not (mp.kind is MpKind.TRANSLATE_UNTIL_CONTACT and mp.axis in ("z", "-z")):
            # the maintained pressing force along z is not a "next" contact, unless the MP presses along z
            component[2] = 0.0
        if float(component @ direction) > p["f_thr"]:
            return MpStatus.SUCCESS
        if t >= p["T"] - _TIME_EPS:
            return MpStatus.FAILURE
        return MpStatus.CONTINUE

    if mp.kind is MpKind.INSERT:
        position = ctx.task_pose(state).position
        if np.linalg.norm(position - ctx.goal) <= p["epsilon"]:
            return MpStatus.SUCCESS
        if t >= p["T"] - _TIME_EPS:
            return MpStatus.FAILURE
        return MpStatus.CONTINUE

    if mp.kind is MpKind.LATERAL_SEARCH:
        start_z = relative(ctx.frame, ctx.start or state.ee_pose).position[2]
        if start_z - ctx.task_pose(state).position[2] >= p["drop"] - _BOUND_EPS:
            return MpStatus.SUCCESS
        if t >= time_limit(mp, theta) - _TIME_EPS:
            return MpStatus.FAILURE
        return MpStatus.CONTINUE

    d = p["d"]
    direction = math.copysign(1.0, d) * u
    if _travelled(mp, direction, state, ctx) >= abs(d) - _BOUND_EPS:
        return MpStatus.SUCCESS
    load = wrench[3:] if mp.kind in _ROTATIONS else wrench[:3]
    if np.linalg.norm(load) > p["f_thr"]:
        return MpStatus.FAILURE
    if t >= 2.0 * abs(d) / p["v"] - _TIME_EPS:
        return MpStatus.FAILURE
    return MpStatus.CONTINUE


def time_limit(mp: ManipulationPrimitive, theta: Sequence[float]) -> float:
    p = mp.params(theta)
    if mp.kind in _UNTIL_CONTACT or mp.kind is MpKind.INSERT:
        return p["T"]
    if mp.kind is MpKind.LATERAL_SEARCH:
        return (p["lead"] + spiral_length(p["pitch"], p["d"])) / p["v"] + SEARCH_SETTLE
    return 2.0 * abs(p["d"]) / p["v"]


def execute(
    mp: ManipulationPrimitive,
    theta: Sequence[float],
    sim: SimState,
    cfg: SimConfig,
    *,
    ctx: Optional[MpContext] = None,
    rng: Optional[np.random.Generator] = None,
) -> MpOutcome:
    """Run desired_commands → hybrid_control_step → stopping at the control rate until λ fires."""
    theta = mp.check(theta)
    ctx = replace(ctx or MpContext(), start=sim.ee_pose)
    rotation = ctx.frame.rotation
    max_steps = int(math.ceil(time_limit(mp, theta) / cfg.dt)) + DEBOUNCE_STEPS + 1
    debounced = mp.kind in _UNTIL_CONTACT
    state = sim
    steps = 0
    streak = 0
    while True:
        t = steps * cfg.dt
        status = stopping(mp, theta, t, state, ctx)
        if debounced:
            streak = streak + 1 if status is MpStatus.SUCCESS else 0
            if status is MpStatus.SUCCESS and streak < DEBOUNCE_STEPS:
                status = MpStatus.CONTINUE
        if status is not MpStatus.CONTINUE:
            break
        if steps >= max_steps:
            status = MpStatus.FAILURE
            break
        twist, wrench = desired_commands(mp, theta, t, state, ctx)
        state = hybrid_control_step(state, twist.rotated(rotation), wrench.rotated(rotation), cfg, rng=rng)
        steps += 1
        if state.clamped:
            status = MpStatus.FAILURE
            break
    return MpOutcome(status=status, duration=steps * cfg.dt, end_state=state, control_steps=steps)


@dataclass(frozen=True)
class CatalogConfig:
    """Catalog speeds, thresholds and parameter ranges in SI units."""

    free_speed: float = 0.010
    rotation_speed: float = 0.1
    approach_threshold: float = 5.0
    approach_timeout: float = 2.0
    force_limit: float = 20.0
    torque_limit: float = 2.0
    contact_force: float = 8.0
    insert_tolerance: float = 0.002
    translate_range: float = 0.010
    rotate_range: float = 0.1


def build_catalog(cfg: Optional[CatalogConfig] = None) -> tuple[ManipulationPrimitive, ...]:
    """The 13 manipulation primitives in catalog order."""
    cfg = cfg or CatalogConfig()
    free, contact = Family.FREE_SPACE, Family.IN_CONTACT
    d_trans = ParamBound("d", -cfg.translate_range, cfg.translate_range, "m")
    d_rot = ParamBound("d", -cfg.rotate_range, cfg.rotate_range, "rad")
    timeout = ParamBound("T", 0.1, 2.0, "s")
    f_d = ("f_d", cfg.contact_force)

    rows: list[tuple[Family, MpKind, str, tuple[tuple[str, float], ...], tuple[ParamBound, ...]]] = [
        (free, MpKind.TRANSLATE_UNTIL_CONTACT, "-z",
         (("v", cfg.free_speed), ("f_thr", cfg.approach_threshold), ("T", cfg.approach_timeout)), ()),
    ]
    for axis in ("x", "y"):
        rows.append((free, MpKind.TRANSLATE_FIXED, axis, (("v", cfg.free_speed), ("f_thr", cfg.force_limit)), (d_trans,)))
    for axis in ("x", "y"):
        rows.append((free, MpKind.ROTATE_FIXED, axis, (("v", cfg.rotation_speed), ("f_thr", cfg.torque_limit)), (d_rot,)))
    for axis in ("x", "y"):
        rows.append((contact, MpKind.TRANSLATE_UNTIL_CONTACT, axis, (f_d,), (
            ParamBound("v", -cfg.free_speed, cfg.free_speed, "m/s"),
            ParamBound("f_thr", 5.0, 12.0, "N"),
            timeout,
        )))
    for axis in ("x", "y"):
        rows.append((contact, MpKind.TRANSLATE_FIXED, axis, (("f_thr", cfg.force_limit), f_d), (
            ParamBound("v", 0.005, cfg.free_speed, "m/s"),
            d_trans,
        )))
    for axis in ("x", "y", "z"):
        rows.append((contact, MpKind.ROTATE_FIXED, axis, (("v", cfg.rotation_speed), ("f_thr", cfg.torque_limit), f_d), (d_rot,)))
    rows.append((contact, MpKind.INSERT, "-z", (("epsilon", cfg.insert_tolerance),), (
        ParamBound("k", 0.01, 0.2, "rad/(s*N*m)"),
        ParamBound("f_d", 6.0, 15.0, "N"),
        timeout,
    )))
    return tuple(
        ManipulationPrimitive(id=i, family=fam, kind=kind, axis=axis, fixed=fixed, learnable=learnable)
        for i, (fam, kind, axis, fixed, learnable) in enumerate(rows)
    )


def catalog_table(catalog: Sequence[ManipulationPrimitive]) -> str:
    """Human-readable catalog listing for run metadata."""
    lines = ["id | name | family | kind | fixed | learnable"]
    for mp in catalog:
        fixed = ", ".join(f"{k}={v:g}" for k, v in mp.fixed) or "-"
        learn = ", ".join(f"{b.name}∈[{b.low:g}, {b.high:g}] {b.unit}" for b in mp.learnable) or "-"
        lines.append(f"{mp.id} | {mp.name} | {mp.family.value} | {mp.kind.value} | {fixed} | {learn}")
    return "\n".join(lines)


def describe_params(mp: ManipulationPrimitive, theta: Sequence[float]) -> Mapping[str, float]:
    return {b.name: float(v) for b, v in zip(mp.learnable, np.asarray(theta, dtype=float).reshape(-1))}
