from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Iterator, Optional

import numpy as np

from .se3 import Pose, Twist, Wrench, integrate

SHAPES = ("round", "square", "triangle")

DEFAULT_RIM_SAMPLES = 128
DEFAULT_FACE_SAMPLES = 64
DEFAULT_WALL_RINGS = 4
DEFAULT_WALL_RING_SPACING = 0.005
DEFAULT_PLATE_THICKNESS = 0.03

# face samples are scaled copies of the outline at these fractions of its size
_FACE_SCALES = (0.2, 0.45, 0.7, 0.9)


@dataclass(frozen=True)
class CrossSection:
    """Peg or hole profile centred on the axis. ``size`` is the radius for round, side length otherwise."""

    shape: str
    size: float

    def __post_init__(self) -> None:
        if self.shape not in SHAPES:
            raise ValueError(f"unknown cross-section shape: {self.shape!r}")
        if not (math.isfinite(self.size) and self.size > 0):
            raise ValueError(f"cross-section size must be > 0, got {self.size!r}")

    @classmethod
    def round(cls, radius: float) -> "CrossSection":
        return cls("round", float(radius))

    @classmethod
    def square(cls, side: float) -> "CrossSection":
        return cls("square", float(side))

    @classmethod
    def triangle(cls, side: float) -> "CrossSection":
        return cls("triangle", float(side))

    @classmethod
    def from_table(cls, shape: str, size_mm: float) -> "CrossSection":
        """Nominal size in mm: diameter for round profiles, side length otherwise."""
        size = size_mm * 1e-3
        return cls(shape, size / 2.0 if shape == "round" else size)

    @property
    def inradius(self) -> float:
        if self.shape == "round":
            return self.size
        if self.shape == "square":
            return self.size / 2.0
        return self.size / (2.0 * math.sqrt(3.0))

    def _edges(self) -> tuple[np.ndarray, np.ndarray]:
        # outward edge normals; the triangle has a vertex on +x so its edge normals sit between vertices
        if self.shape == "square":
            angles = np.deg2rad([0.0, 90.0, 180.0, 270.0])
        else:
            angles = np.deg2rad([60.0, 180.0, 300.0])
        normals = np.stack([np.cos(angles), np.sin(angles)], axis=1)
        return normals, np.full(len(angles), self.inradius)

    def vertices(self) -> np.ndarray:
        if self.shape == "round":
            raise ValueError("round cross-sections have no vertices")
        if self.shape == "square":
            angles = np.deg2rad([45.0, 135.0, 225.0, 315.0])
            radius = self.size / math.sqrt(2.0)
        else:
            angles = np.deg2rad([0.0, 120.0, 240.0])
            radius = self.size / math.sqrt(3.0)
        return radius * np.stack([np.cos(angles), np.sin(angles)], axis=1)

    def perimeter(self, n: int) -> np.ndarray:
        """``n`` outline points, evenly spaced by arc length, counter-clockwise."""
        if self.shape == "round":
            theta = 2.0 * np.pi * np.arange(n) / n
            return self.size * np.stack([np.cos(theta), np.sin(theta)], axis=1)
        verts = self.vertices()
        closed = np.vstack([verts, verts[:1]])
        seg = np.diff(closed, axis=0)
        lengths = np.linalg.norm(seg, axis=1)
        cum = np.concatenate([[0.0], np.cumsum(lengths)])
        s = np.arange(n) * cum[-1] / n
        idx = np.searchsorted(cum, s, side="right") - 1
        t = (s - cum[idx]) / lengths[idx]
        return closed[idx] + t[:, None] * seg[idx]

    def signed_distance(self, xy: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Signed distance to the outline (positive outside) and the outward normal."""
        xy = np.atleast_2d(np.asarray(xy, dtype=float))
        if self.shape == "round":
            rho = np.linalg.norm(xy, axis=1)
            safe = np.where(rho > 0.0, rho, 1.0)
            normal = np.where(rho[:, None] > 0.0, xy / safe[:, None], np.array([1.0, 0.0]))
            return rho - self.size, normal
        normals, offsets = self._edges()
        vals = xy @ normals.T - offsets
        j = np.argmax(vals, axis=1)
        return vals[np.arange(len(xy)), j], normals[j]

    def fits_inside(self, other: "CrossSection") -> bool:
        """True when this profile, centred and unrotated, clears ``other`` everywhere."""
        dist, _ = other.signed_distance(self.perimeter(720))
        return bool(dist.max() < 0.0)


@dataclass(frozen=True)
class SimConfig:
    hole: CrossSection = CrossSection.from_table("round", 30.03)
    peg: CrossSection = CrossSection.from_table("round", 29.96)
    dt: float = 0.002
    peg_length: float = 0.05
    plate_thickness: float = DEFAULT_PLATE_THICKNESS
    k_pen: float = 5e4
    damping: float = 20.0
    friction: float = 0.3
    friction_damping: float = 500.0
    rim_samples: int = DEFAULT_RIM_SAMPLES
    face_samples: int = DEFAULT_FACE_SAMPLES
    wall_rings: int = DEFAULT_WALL_RINGS
    wall_ring_spacing: float = DEFAULT_WALL_RING_SPACING
    force_noise_std: float = 0.0
    torque_noise_std: float = 0.0
    compliance_linear: float = 1e-3
    compliance_angular: float = 1e-2

    def __post_init__(self) -> None:
        if not self.dt > 0:
            raise ValueError(f"dt must be > 0, got {self.dt}")
        if not self.k_pen > 0:
            raise ValueError(f"k_pen must be > 0, got {self.k_pen}")
        if self.rim_samples < 64:
            raise ValueError(f"rim_samples must be >= 64, got {self.rim_samples}")
        if self.damping < 0 or self.friction < 0 or self.friction_damping < 0:
            raise ValueError("damping and friction parameters must be >= 0")
        if self.force_noise_std < 0 or self.torque_noise_std < 0:
            raise ValueError("sensor noise std must be >= 0")
        if not self.peg.fits_inside(self.hole):
            raise ValueError(f"peg {self.peg} does not fit inside hole {self.hole} (no positive clearance)")

    @property
    def compliance(self) -> np.ndarray:
        return np.array([self.compliance_linear] * 3 + [self.compliance_angular] * 3)


@dataclass(frozen=True, eq=False)
class ContactSet:
    """Penetrating peg samples: world points, unit normals (pointing into the peg) and depths."""

    points: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    normals: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    depths: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __len__(self) -> int:
        return len(self.depths)

    def __iter__(self) -> Iterator[tuple[np.ndarray, np.ndarray, float]]:
        for point, normal, depth in zip(self.points, self.normals, self.depths):
            yield point, normal, float(depth)


@dataclass(frozen=True, eq=False)
class SimState:
    """Simulator state. ``f_ext`` is what the sensor reports: the wrench the peg applies to the
    environment, measured at the peg tip E. ``true_wrench`` is the same without sensor noise."""

    ee_pose: Pose
    f_ext: Wrench = field(default_factory=Wrench.zero)
    sim_time: float = 0.0
    ee_twist: Twist = field(default_factory=Twist.zero)
    true_wrench: Wrench = field(default_factory=Wrench.zero)
    steps: int = 0
    clamped: bool = False


@lru_cache(maxsize=64)
def _peg_samples(peg: CrossSection, rim: int, face: int, rings: int, spacing: float) -> np.ndarray:
    outline = peg.perimeter(rim)
    layers = [np.column_stack([outline, np.zeros(rim)])]
    per_ring = max(face // len(_FACE_SCALES), 1)
    coarse = peg.perimeter(per_ring)
    for scale in _FACE_SCALES:
        layers.append(np.column_stack([scale * coarse, np.zeros(per_ring)]))
    for k in range(1, rings + 1):
        layers.append(np.column_stack([outline, np.full(rim, k * spacing)]))
    points = np.vstack(layers)
    points.setflags(write=False)
    return points


def peg_samples(peg: CrossSection, cfg: Optional[SimConfig] = None) -> np.ndarray:
    """Surface samples of the peg in the tip frame E (z runs up the peg from the tip)."""
    if cfg is None:
        return _peg_samples(peg, DEFAULT_RIM_SAMPLES, DEFAULT_FACE_SAMPLES, DEFAULT_WALL_RINGS, DEFAULT_WALL_RING_SPACING)
    return _peg_samples(peg, cfg.rim_samples, cfg.face_samples, cfg.wall_rings, cfg.wall_ring_spacing)


def contact_set(
    peg: CrossSection,
    peg_pose: Pose,
    hole: CrossSection,
    cfg: Optional[SimConfig] = None,
) -> ContactSet:
    """Contacts between the sampled peg surface and the plate (top face z=0, hole walls below)."""
    local = peg_samples(peg, cfg)
    world = peg_pose.rotation.apply(local) + peg_pose.position
    thickness = cfg.plate_thickness if cfg is not None else DEFAULT_PLATE_THICKNESS
    z = world[:, 2]
    below = (z < 0.0) & (z > -thickness)
    if not below.any():
        return ContactSet()
    pts = world[below]
    dist, outward = hole.signed_distance(pts[:, :2])
    in_plate = dist > 0.0
    if not in_plate.any():
        return ContactSet()
    pts, dist, outward = pts[in_plate], dist[in_plate], outward[in_plate]
    top_depth = -pts[:, 2]
    # resolve along the shallower direction: up out of the top face, or sideways back into the hole
    use_top = top_depth <= dist
    normals = np.zeros_like(pts)
    normals[use_top, 2] = 1.0
    normals[~use_top, :2] = -outward[~use_top]
    depths = np.where(use_top, top_depth, dist)
    return ContactSet(points=pts, normals=normals, depths=depths)


def _wrench_basis(contacts: ContactSet, origin: np.ndarray) -> np.ndarray:
    # row i maps a unit normal force at contact i to a wrench about ``origin``
    r = contacts.points - origin
    return np.hstack([contacts.normals, np.cross(r, contacts.normals)])


def _friction_matrix(contacts: ContactSet, origin: np.ndarray, previous: Twist, cfg: SimConfig) -> np.ndarray:
    """Viscous stand-in for Coulomb friction, 6x6 in twist space.

    Each contact gets coefficient c_t while sticking, or μ·f_n/|v_slip| once the previous tick's slip
    would exceed the Coulomb cap, so the sliding force stays at μ·f_n.
    """
    if cfg.friction <= 0.0:
        return np.zeros((6, 6))
    n = contacts.normals
    r = contacts.points - origin
    v_pt = previous.linear + np.cross(previous.angular, r)
    v_t = v_pt - np.einsum("ij,ij->i", v_pt, n)[:, None] * n
    slip = np.linalg.norm(v_t, axis=1)
    f_normal = cfg.k_pen * contacts.depths
    coeff = np.full(len(contacts), cfg.friction_damping)
    sliding = cfg.friction_damping * slip > cfg.friction * f_normal
    coeff[sliding] = cfg.friction * f_normal[sliding] / slip[sliding]
    # point velocity = H ξ with H = [I, -[r]x]; tangential projector P = I - n nᵀ
    m = len(contacts)
    h = np.zeros((m, 3, 6))
    h[:, :, :3] = np.eye(3)
    h[:, 0, 4], h[:, 0, 5] = r[:, 2], -r[:, 1]
    h[:, 1, 3], h[:, 1, 5] = -r[:, 2], r[:, 0]
    h[:, 2, 3], h[:, 2, 4] = r[:, 1], -r[:, 0]
    proj = np.eye(3)[None, :, :] - n[:, :, None] * n[:, None, :]
    # P is a symmetric idempotent, so Hᵀ P H = (P H)ᵀ (P H)
    weighted = (np.sqrt(coeff)[:, None, None] * np.matmul(proj, h)).reshape(3 * m, 6)
    return weighted.T @ weighted


def contact_wrench(
    contacts: ContactSet,
    ee_twist: Twist,
    *,
    origin=None,
    cfg: Optional[SimConfig] = None,
) -> Wrench:
    """Wrench the environment applies to the peg, about ``origin`` (the peg tip E)."""
    if len(contacts) == 0:
        return Wrench.zero()
    cfg = cfg or SimConfig()
    origin = np.zeros(3) if origin is None else np.asarray(origin, dtype=float)
    n = contacts.normals
    r = contacts.points - origin
    v_pt = ee_twist.linear + np.cross(ee_twist.angular, r)
    vn = np.einsum("ij,ij->i", v_pt, n)
    f_normal = np.maximum(cfg.k_pen * contacts.depths - cfg.damping * vn, 0.0)
    forces = f_normal[:, None] * n
    if cfg.friction > 0.0:
        v_t = v_pt - vn[:, None] * n
        slip = np.linalg.norm(v_t, axis=1)
        moving = slip > 0.0
        if moving.any():
            cap = np.minimum(cfg.friction_damping * slip[moving], cfg.friction * f_normal[moving])
            forces[moving] -= (cap / slip[moving])[:, None] * v_t[moving]
    return Wrench(force=forces.sum(axis=0), torque=np.cross(r, forces).sum(axis=0))


def reset_sim(cfg: SimConfig, start_pose: Pose) -> SimState:
    if len(contact_set(cfg.peg, start_pose, cfg.hole, cfg)) > 0:
        raise ValueError(f"start pose is in collision with the plate: {start_pose!r}")
    return SimState(ee_pose=start_pose)


def hybrid_control_step(
    state: SimState,
    v_des: Twist,
    f_des: Wrench,
    cfg: SimConfig,
    *,
    rng: Optional[np.random.Generator] = None,
) -> SimState:
    """One control tick of compliant velocity tracking with force feedforward (world frame).

    Achieved twist = v_des + C·(f_des − f_ext). The contact stiffness enters linearly-implicitly so
    that stiff multi-point contacts stay stable at the control period.
    """
    pose = state.ee_pose
    comp = cfg.compliance
    contacts = contact_set(cfg.peg, pose, cfg.hole, cfg)
    rhs = v_des.vector() + comp * f_des.vector()
    if len(contacts) > 0:
        g = _wrench_basis(contacts, pose.position)
        # f_ext(ξ) ≈ f_static + (K·dt + D + F)·ξ, solved for ξ in one linear step
        f_static = -g.T @ (cfg.k_pen * contacts.depths)
        gram = g.T @ g
        resist = (cfg.k_pen * cfg.dt + cfg.damping) * gram + _friction_matrix(contacts, pose.position, state.ee_twist, cfg)
        system = np.eye(6) + comp[:, None] * resist
        xi = np.linalg.solve(system, rhs - comp * f_static)
    else:
        xi = rhs
    twist = Twist.from_vector(xi)
    new_pose = integrate(pose, twist, cfg.dt)
    clamped = False
    if new_pose.position[2] < -cfg.peg_length:
        clamped = True
        position = new_pose.position.copy()
        position[2] = -cfg.peg_length
        new_pose = Pose(position=position, orientation=new_pose.orientation)
    new_contacts = contact_set(cfg.peg, new_pose, cfg.hole, cfg)
    true_wrench = -contact_wrench(new_contacts, twist, origin=new_pose.position, cfg=cfg)
    measured = true_wrench
    if rng is not None and (cfg.force_noise_std > 0.0 or cfg.torque_noise_std > 0.0):
        measured = true_wrench + Wrench(
            force=rng.normal(0.0, cfg.force_noise_std, 3),
            torque=rng.normal(0.0, cfg.torque_noise_std, 3),
        )
    return SimState(
        ee_pose=new_pose,
        f_ext=measured,
        sim_time=state.sim_time + cfg.dt,
        ee_twist=twist,
        true_wrench=true_wrench,
        steps=state.steps + 1,
        clamped=clamped,
    )
