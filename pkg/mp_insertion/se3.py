from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.transform import Rotation

AXIS_TOLERANCE = 1e-9

_IDENTITY_QUAT = (0.0, 0.0, 0.0, 1.0)


def _vec3(value) -> np.ndarray:
    arr = np.asarray(value, dtype=float).reshape(3)
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"non-finite vector: {arr!r}")
    return arr


def _unit_quat(value) -> np.ndarray:
    q = np.asarray(value, dtype=float).reshape(4)
    norm = np.linalg.norm(q)
    if not np.isfinite(norm) or norm == 0.0:
        raise ValueError(f"invalid quaternion: {q!r}")
    return q / norm


@dataclass(frozen=True, eq=False)
class Pose:
    """Rigid transform. Quaternions are scalar-last (x, y, z, w) like scipy."""

    position: np.ndarray = field(default_factory=lambda: np.zeros(3))
    orientation: np.ndarray = field(default_factory=lambda: np.array(_IDENTITY_QUAT))

    def __post_init__(self) -> None:
        object.__setattr__(self, "position", _vec3(self.position))
        object.__setattr__(self, "orientation", _unit_quat(self.orientation))

    @classmethod
    def identity(cls) -> "Pose":
        return cls()

    @classmethod
    def from_translation(cls, x: float, y: float, z: float) -> "Pose":
        return cls(position=np.array([x, y, z], dtype=float))

    @property
    def rotation(self) -> Rotation:
        return Rotation.from_quat(self.orientation)

    def matrix(self) -> np.ndarray:
        """4x4 homogeneous matrix."""
        out = np.eye(4)
        out[:3, :3] = self.rotation.as_matrix()
        out[:3, 3] = self.position
        return out

    def transform_point(self, point) -> np.ndarray:
        return self.rotation.apply(np.asarray(point, dtype=float)) + self.position

    def rotvec(self) -> np.ndarray:
        return self.rotation.as_rotvec()

    def __repr__(self) -> str:
        return f"Pose(position={self.position.tolist()}, orientation={self.orientation.tolist()})"


@dataclass(frozen=True, eq=False)
class Wrench:
    force: np.ndarray = field(default_factory=lambda: np.zeros(3))
    torque: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self) -> None:
        object.__setattr__(self, "force", _vec3(self.force))
        object.__setattr__(self, "torque", _vec3(self.torque))

    @classmethod
    def zero(cls) -> "Wrench":
        return cls()

    @classmethod
    def from_vector(cls, vec) -> "Wrench":
        arr = np.asarray(vec, dtype=float).reshape(6)
        return cls(force=arr[:3], torque=arr[3:])

    def vector(self) -> np.ndarray:
        return np.concatenate([self.force, self.torque])

    def is_zero(self) -> bool:
        return not (np.any(self.force) or np.any(self.torque))

    def rotated(self, rotation: Rotation) -> "Wrench":
        return Wrench(rotation.apply(self.force), rotation.apply(self.torque))

    def __add__(self, other: "Wrench") -> "Wrench":
        return Wrench(self.force + other.force, self.torque + other.torque)

    def __neg__(self) -> "Wrench":
        return Wrench(-self.force, -self.torque)


@dataclass(frozen=True, eq=False)
class Twist:
    linear: np.ndarray = field(default_factory=lambda: np.zeros(3))
    angular: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self) -> None:
        object.__setattr__(self, "linear", _vec3(self.linear))
        object.__setattr__(self, "angular", _vec3(self.angular))

    @classmethod
    def zero(cls) -> "Twist":
        return cls()

    @classmethod
    def from_vector(cls, vec) -> "Twist":
        arr = np.asarray(vec, dtype=float).reshape(6)
        return cls(linear=arr[:3], angular=arr[3:])

    def vector(self) -> np.ndarray:
        return np.concatenate([self.linear, self.angular])

    def rotated(self, rotation: Rotation) -> "Twist":
        return Twist(rotation.apply(self.linear), rotation.apply(self.angular))


def compose(a: Pose, b: Pose) -> Pose:
    """Return a∘b (apply b, then a)."""
    rot_a = a.rotation
    return Pose(
        position=a.position + rot_a.apply(b.position),
        orientation=(rot_a * b.rotation).as_quat(),
    )


def inverse(a: Pose) -> Pose:
    inv = a.rotation.inv()
    return Pose(position=-inv.apply(a.position), orientation=inv.as_quat())


def relative(frame: Pose, pose: Pose) -> Pose:
    """Express ``pose`` in ``frame``: frame⁻¹∘pose."""
    return compose(inverse(frame), pose)


def axis_angle_rotation(axis, angle: float) -> np.ndarray:
    """Unit quaternion (x, y, z, w) rotating by ``angle`` radians about a unit ``axis``."""
    axis = np.asarray(axis, dtype=float).reshape(3)
    if abs(np.linalg.norm(axis) - 1.0) > AXIS_TOLERANCE:
        raise ValueError(f"axis must be a unit vector, got norm {np.linalg.norm(axis):.12g}")
    return Rotation.from_rotvec(axis * float(angle)).as_quat()


def pose_error(current: Pose, goal: Pose) -> np.ndarray:
    """Position difference followed by the rotation vector of goal⁻¹·current."""
    dp = current.position - goal.position
    dr = (goal.rotation.inv() * current.rotation).as_rotvec()
    return np.concatenate([dp, dr])


def integrate(pose: Pose, twist: Twist, dt: float) -> Pose:
    """Advance ``pose`` by a world-frame twist about the pose origin."""
    step = Rotation.from_rotvec(twist.angular * dt)
    return Pose(
        position=pose.position + twist.linear * dt,
        orientation=(step * pose.rotation).as_quat(),
    )


def random_axis_angle(rng: np.random.Generator, max_angle: float) -> np.ndarray:
    """Quaternion about a uniformly random unit axis, angle uniform in [-max, max]."""
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    angle = rng.uniform(-max_angle, max_angle) if max_angle > 0 else 0.0
    return axis_angle_rotation(axis, angle)


def skew(v) -> np.ndarray:
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])
