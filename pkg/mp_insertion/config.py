from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Optional

from .baselines import EePoseConfig
from .contact import CrossSection, SimConfig
from .env import EpisodeConfig
from .ppo import PpoConfig
from .primitives import CatalogConfig

METHODS = ("hybrid", "discrete", "ee-pose", "fix-seq")
FRICTION = {"aluminum": 0.3, "plastic": 0.2}


@dataclass(frozen=True)
class TaskPreset:
    shape: str
    hole_mm: float
    peg_mm: float
    material: str


PRESETS: dict[str, TaskPreset] = {
    "round": TaskPreset("round", 30.03, 29.9, "aluminum"),
    "round-hard": TaskPreset("round", 30.03, 29.96, "aluminum"),
    "square": TaskPreset("square", 19.98, 19.72, "plastic"),
    "square-hard": TaskPreset("square", 19.98, 19.96, "aluminum"),
    "triangle": TaskPreset("triangle", 25.0, 24.2, "plastic"),
    "triangle-hard": TaskPreset("triangle", 25.0, 24.9, "aluminum"),
}


class ConfigError(ValueError):
    """Invalid run configuration; ``errors`` lists every ``<dotted.field>: <problem>``."""

    def __init__(self, errors: list[str]) -> None:
        super().__init__("invalid configuration:\n" + "\n".join(f"  {e}" for e in errors))
        self.errors = list(errors)


@dataclass(frozen=True)
class TaskSection:
    preset: str = "round"
    clearance_scale: float = 1.0

    def problems(self) -> list[str]:
        out = []
        if self.preset not in PRESETS:
            out.append(f"preset: unknown preset {self.preset!r} (expected one of {', '.join(PRESETS)})")
        if not self.clearance_scale > 0:
            out.append(f"clearance_scale: must be > 0, got {self.clearance_scale}")
        return out

    def geometry(self) -> tuple[CrossSection, CrossSection, float]:
        preset = PRESETS[self.preset]
        peg_mm = preset.hole_mm - self.clearance_scale * (preset.hole_mm - preset.peg_mm)
        if not peg_mm > 0:
            raise ConfigError([f"task.clearance_scale: {self.clearance_scale} leaves no peg ({peg_mm:.3f} mm)"])
        hole = CrossSection.from_table(preset.shape, preset.hole_mm)
        peg = CrossSection.from_table(preset.shape, peg_mm)
        return hole, peg, FRICTION[preset.material]


@dataclass(frozen=True)
class SimSection:
    dt_s: float = 0.002
    peg_length_mm: float = 50.0
    plate_thickness_mm: float = 30.0
    k_pen_n_per_m: float = 5e4
    damping_n_s_per_m: float = 20.0
    friction_damping_n_s_per_m: float = 500.0
    rim_samples: int = 128
    face_samples: int = 64
    wall_rings: int = 4
    wall_ring_spacing_mm: float = 5.0
    force_noise_std_n: float = 0.0
    torque_noise_std_nm: float = 0.0
    compliance_linear_m_per_s_per_n: float = 1e-3
    compliance_angular_rad_per_s_per_nm: float = 1e-2

    def problems(self) -> list[str]:
        out = []
        for name in ("dt_s", "peg_length_mm", "plate_thickness_mm", "k_pen_n_per_m", "wall_ring_spacing_mm",
                     "compliance_linear_m_per_s_per_n", "compliance_angular_rad_per_s_per_nm"):
            if not getattr(self, name) > 0:
                out.append(f"{name}: must be > 0, got {getattr(self, name)}")
        for name in ("damping_n_s_per_m", "friction_damping_n_s_per_m", "force_noise_std_n", "torque_noise_std_nm", "wall_rings"):
            if getattr(self, name) < 0:
                out.append(f"{name}: must be >= 0, got {getattr(self, name)}")
        if self.rim_samples < 64:
            out.append(f"rim_samples: must be >= 64, got {self.rim_samples}")
        if self.face_samples < 4:
            out.append(f"face_samples: must be >= 4, got {self.face_samples}")
        return out


@dataclass(frozen=True)
class EpisodeSection:
    max_mps: int = 15
    termination_bonus: float = 5.0
    success_tol_mm: float = 2.0
    goal_depth_mm: float = 10.0
    start_height_mm: float = 10.0
    c1: float = 1.0
    c2: float = 0.2
    k1_m2: float = 1e-4
    rotation_weight: float = 1.0
    noise_position_mm: float = 1.0
    noise_rotation_deg: float = 1.0
    contact_threshold_n: float = 0.5

    def problems(self) -> list[str]:
        out = []
        for name in ("c1", "c2", "k1_m2", "success_tol_mm", "start_height_mm", "contact_threshold_n"):
            if not getattr(self, name) > 0:
                out.append(f"{name}: must be > 0, got {getattr(self, name)}")
        for name in ("noise_position_mm", "noise_rotation_deg", "goal_depth_mm", "rotation_weight", "termination_bonus"):
            if getattr(self, name) < 0:
                out.append(f"{name}: must be >= 0, got {getattr(self, name)}")
        if self.max_mps < 1:
            out.append(f"max_mps: must be >= 1, got {self.max_mps}")
        return out


@dataclass(frozen=True)
class CatalogSection:
    free_speed_mm_per_s: float = 10.0
    rotation_speed_rad_per_s: float = 0.1
    approach_threshold_n: float = 5.0
    approach_timeout_s: float = 2.0
    force_limit_n: float = 20.0
    torque_limit_nm: float = 2.0
    contact_force_n: float = 8.0
    insert_tolerance_mm: float = 2.0
    translate_range_mm: float = 10.0
    rotate_range_rad: float = 0.1
    discrete_values_per_param: int = 2

    def problems(self) -> list[str]:
        out = []
        for f in dataclasses.fields(self):
            if not getattr(self, f.name) > 0:
                out.append(f"{f.name}: must be > 0, got {getattr(self, f.name)}")
        if self.free_speed_mm_per_s <= 5.0:
            out.append("free_speed_mm_per_s: must be > 5 (in-contact translate speeds start at 5 mm/s)")
        return out


@dataclass(frozen=True)
class PolicySection:
    discrete_hidden: int = 128
    head_hidden: int = 24
    log_std_init: float = math.log(0.5)

    def problems(self) -> list[str]:
        out = []
        if self.discrete_hidden < 1:
            out.append(f"discrete_hidden: must be >= 1, got {self.discrete_hidden}")
        if self.head_hidden < 1:
            out.append(f"head_hidden: must be >= 1, got {self.head_hidden}")
        return out


@dataclass(frozen=True)
class TrainerSection:
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
    workers: int = 1

    def problems(self) -> list[str]:
        out = []
        for f in dataclasses.fields(self):
            if f.name != "entropy_coef" and not getattr(self, f.name) > 0:
                out.append(f"{f.name}: must be > 0, got {getattr(self, f.name)}")
        if self.entropy_coef < 0:
            out.append(f"entropy_coef: must be >= 0, got {self.entropy_coef}")
        if not self.clip_ratio < 1:
            out.append(f"clip_ratio: must be < 1, got {self.clip_ratio}")
        for name in ("gamma", "gae_lambda"):
            if getattr(self, name) > 1:
                out.append(f"{name}: must be <= 1, got {getattr(self, name)}")
        return out

    def ppo(self, seed: int) -> PpoConfig:
        values = {f.name: getattr(self, f.name) for f in dataclasses.fields(self) if f.name != "workers"}
        return PpoConfig(seed=seed, **values)


@dataclass(frozen=True)
class EePoseSection:
    policy_rate_hz: float = 40.0
    max_translation_mm: float = 1.0
    max_rotation_rad: float = 0.02
    max_steps: int = 600

    def problems(self) -> list[str]:
        out = [f"{f.name}: must be > 0, got {getattr(self, f.name)}" for f in dataclasses.fields(self) if not getattr(self, f.name) > 0]
        return out


@dataclass(frozen=True)
class FixSeqSection:
    trials_per_eval: int = 10
    generations: int = 30
    sigma0: float = 0.3
    time_weight: float = 0.01

    def problems(self) -> list[str]:
        out = []
        if self.trials_per_eval < 1:
            out.append(f"trials_per_eval: must be >= 1, got {self.trials_per_eval}")
        if self.generations < 1:
            out.append(f"generations: must be >= 1, got {self.generations}")
        if not self.sigma0 > 0:
            out.append(f"sigma0: must be > 0, got {self.sigma0}")
        if self.time_weight < 0:
            out.append(f"time_weight: must be >= 0, got {self.time_weight}")
        return out


@dataclass(frozen=True)
class EvalSection:
    trials: int = 100

    def problems(self) -> list[str]:
        return [] if self.trials >= 1 else [f"trials: must be >= 1, got {self.trials}"]


_SECTIONS: dict[str, type] = {
    "task": TaskSection,
    "sim": SimSection,
    "episode": EpisodeSection,
    "catalog": CatalogSection,
    "policy": PolicySection,
    "trainer": TrainerSection,
    "ee_pose": EePoseSection,
    "fix_seq": FixSeqSection,
    "eval": EvalSection,
}
_PHYSICS = ("task", "sim", "episode", "catalog")


def _coerce(section: str, name: str, expected: Any, value: Any, errors: list[str]) -> Any:
    where = f"{section}.{name}"
    if isinstance(expected, bool):
        if not isinstance(value, bool):
            errors.append(f"{where}: expected true/false, got {value!r}")
        return value
    if isinstance(expected, int):
        if isinstance(value, bool) or not isinstance(value, int):
            errors.append(f"{where}: expected an integer, got {value!r}")
        return value
    if isinstance(expected, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            errors.append(f"{where}: expected a number, got {value!r}")
            return value
        if not math.isfinite(value):
            errors.append(f"{where}: must be finite, got {value!r}")
        return float(value)
    if isinstance(expected, str):
        if not isinstance(value, str):
            errors.append(f"{where}: expected a string, got {value!r}")
        return value
    return value


def _build_section(name: str, cls: type, data: Any, errors: list[str]):
    if data is None:
        data = {}
    if not isinstance(data, Mapping):
        errors.append(f"{name}: expected an object, got {type(data).__name__}")
        return cls()
    defaults = cls()
    before = len(errors)
    known = {f.name for f in dataclasses.fields(cls)}
    for key in data:
        if key not in known:
            errors.append(f"{name}.{key}: unknown key")
    kwargs = {}
    for key in sorted(known & set(data)):
        kwargs[key] = _coerce(name, key, getattr(defaults, key), data[key], errors)
    if len(errors) > before:
        return defaults
    section = cls(**kwargs)
    errors.extend(f"{name}.{p}" for p in section.problems())
    return section


@dataclass(frozen=True)
class RunConfig:
    method: str = "hybrid"
    seeds: tuple[int, ...] = (0,)
    budget_sim_steps: int = 2_000_000
    output_dir: str = "runs"
    task: TaskSection = field(default_factory=TaskSection)
    sim: SimSection = field(default_factory=SimSection)
    episode: EpisodeSection = field(default_factory=EpisodeSection)
    catalog: CatalogSection = field(default_factory=CatalogSection)
    policy: PolicySection = field(default_factory=PolicySection)
    trainer: TrainerSection = field(default_factory=TrainerSection)
    ee_pose: EePoseSection = field(default_factory=EePoseSection)
    fix_seq: FixSeqSection = field(default_factory=FixSeqSection)
    eval: EvalSection = field(default_factory=EvalSection)

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "RunConfig":
        """Validate a parsed JSON document, reporting every problem at once."""
        if not isinstance(data, Mapping):
            raise ConfigError([f"<root>: expected an object, got {type(data).__name__}"])
        errors: list[str] = []
        top = {"method", "seeds", "budget_sim_steps", "output_dir"} | set(_SECTIONS)
        for key in data:
            if key not in top:
                errors.append(f"{key}: unknown key")
        method = data.get("method", "hybrid")
        if method not in METHODS:
            errors.append(f"method: unknown method {method!r} (expected one of {', '.join(METHODS)})")
        seeds = data.get("seeds", [0])
        if not isinstance(seeds, list) or not seeds or not all(isinstance(s, int) and not isinstance(s, bool) and s >= 0 for s in seeds):
            errors.append(f"seeds: expected a non-empty list of non-negative integers, got {seeds!r}")
            seeds = [0]
        budget = data.get("budget_sim_steps", 2_000_000)
        if isinstance(budget, bool) or not isinstance(budget, int) or budget < 0:
            errors.append(f"budget_sim_steps: expected a non-negative integer, got {budget!r}")
            budget = 0
        output_dir = data.get("output_dir", "runs")
        if not isinstance(output_dir, str) or not output_dir:
            errors.append(f"output_dir: expected a non-empty string, got {output_dir!r}")
            output_dir = "runs"
        sections = {name: _build_section(name, sec_cls, data.get(name), errors) for name, sec_cls in _SECTIONS.items()}
        if not errors:
            try:
                hole, peg, _ = sections["task"].geometry()
                if not peg.fits_inside(hole):
                    errors.append("task.clearance_scale: peg does not fit inside the hole")
            except ConfigError as exc:
                errors.extend(exc.errors)
        if errors:
            raise ConfigError(errors)
        return cls(method=method, seeds=tuple(seeds), budget_sim_steps=budget, output_dir=output_dir, **sections)

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {
            "method": self.method,
            "seeds": list(self.seeds),
            "budget_sim_steps": self.budget_sim_steps,
            "output_dir": self.output_dir,
        }
        for name in _SECTIONS:
            out[name] = dataclasses.asdict(getattr(self, name))
        return out

    def with_overrides(self, **changes: Any) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def config_hash(self) -> str:
        return _hash(self.to_dict())

    def physics_hash(self) -> str:
        full = self.to_dict()
        return _hash({k: full[k] for k in _PHYSICS})

    # ---- runtime objects in SI units --------------------------------------------------

    def sim_config(self) -> SimConfig:
        hole, peg, friction = self.task.geometry()
        s = self.sim
        return SimConfig(
            hole=hole,
            peg=peg,
            dt=s.dt_s,
            peg_length=s.peg_length_mm / 1000.0,
            plate_thickness=s.plate_thickness_mm / 1000.0,
            k_pen=s.k_pen_n_per_m,
            damping=s.damping_n_s_per_m,
            friction=friction,
            friction_damping=s.friction_damping_n_s_per_m,
            rim_samples=s.rim_samples,
            face_samples=s.face_samples,
            wall_rings=s.wall_rings,
            wall_ring_spacing=s.wall_ring_spacing_mm / 1000.0,
            force_noise_std=s.force_noise_std_n,
            torque_noise_std=s.torque_noise_std_nm,
            compliance_linear=s.compliance_linear_m_per_s_per_n,
            compliance_angular=s.compliance_angular_rad_per_s_per_nm,
        )

    def episode_config(self) -> EpisodeConfig:
        e = self.episode
        return EpisodeConfig(
            max_mps=e.max_mps,
            termination_bonus=e.termination_bonus,
            success_tol=e.success_tol_mm / 1000.0,
            goal_depth=e.goal_depth_mm / 1000.0,
            start_height=e.start_height_mm / 1000.0,
            c1=e.c1,
            c2=e.c2,
            k1=e.k1_m2,
            rotation_weight=e.rotation_weight,
            noise_position=e.noise_position_mm / 1000.0,
            noise_rotation=math.radians(e.noise_rotation_deg),
            contact_threshold=e.contact_threshold_n,
        )

    def catalog_config(self) -> CatalogConfig:
        c = self.catalog
        return CatalogConfig(
            free_speed=c.free_speed_mm_per_s / 1000.0,
            rotation_speed=c.rotation_speed_rad_per_s,
            approach_threshold=c.approach_threshold_n,
            approach_timeout=c.approach_timeout_s,
            force_limit=c.force_limit_n,
            torque_limit=c.torque_limit_nm,
            contact_force=c.contact_force_n,
            insert_tolerance=c.insert_tolerance_mm / 1000.0,
            translate_range=c.translate_range_mm / 1000.0,
            rotate_range=c.rotate_range_rad,
        )

    def ee_pose_config(self) -> EePoseConfig:
        e = self.ee_pose
        return EePoseConfig(
            policy_rate_hz=e.policy_rate_hz,
            max_translation=e.max_translation_mm / 1000.0,
            max_rotation=e.max_rotation_rad,
            max_steps=e.max_steps,
        )

    def metadata(self) -> dict[str, Any]:
        preset = PRESETS[self.task.preset]
        hole, peg, friction = self.task.geometry()
        return {
            "config_hash": self.config_hash(),
            "physics_hash": self.physics_hash(),
            "method": self.method,
            "task": {
                "preset": self.task.preset,
                "shape": preset.shape,
                "material": preset.material,
                "friction": friction,
                "hole_mm": preset.hole_mm,
                "peg_mm": round(preset.hole_mm - self.task.clearance_scale * (preset.hole_mm - preset.peg_mm), 6),
                "clearance_scale": self.task.clearance_scale,
            },
        }


def _hash(payload: Mapping[str, Any]) -> str:
    canonical = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:16]


def load_run_config(path: str | Path) -> RunConfig:
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError([f"<file>: {path} does not exist"]) from None
    except json.JSONDecodeError as exc:
        raise ConfigError([f"<file>: {path} is not valid JSON ({exc.msg} at line {exc.lineno})"]) from None
    return RunConfig.from_dict(data)


def dump_run_config(cfg: RunConfig, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def default_config_dict() -> dict[str, Any]:
    return RunConfig().to_dict()


def parse_overrides(pairs: Optional[list[str]]) -> dict[str, Any]:
    """``section.key=value`` strings → nested dict, values parsed as JSON where possible."""
    out: dict[str, Any] = {}
    for pair in pairs or []:
        key, sep, raw = pair.partition("=")
        if not sep:
            raise ConfigError([f"{pair}: expected <key>=<value>"])
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = out
        parts = key.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
        node[parts[-1]] = value
    return out


def _merge(base: dict[str, Any], changes: Mapping[str, Any]) -> dict[str, Any]:
    out = dict(base)
    for key, value in changes.items():
        if isinstance(value, Mapping) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = value
    return out


def apply_overrides(cfg: RunConfig, changes: Mapping[str, Any]) -> RunConfig:
    """Deep-merge ``changes`` into ``cfg`` and re-validate the result."""
    if not changes:
        return cfg
    return RunConfig.from_dict(_merge(cfg.to_dict(), changes))
