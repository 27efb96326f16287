from .config import ConfigError, RunConfig, load_run_config
from .env import InsertionTask, PegInsertionEnv, hybrid_action_set
from .policy import HybridAction, Policy
from .ppo import PpoConfig, Trainer, TrainingAborted
from .primitives import ManipulationPrimitive, MpStatus, build_catalog, execute
from .workers import RolloutWorker, WorkerPool

__all__ = [
    "ConfigError",
    "RunConfig",
    "load_run_config",
    "InsertionTask",
    "PegInsertionEnv",
    "hybrid_action_set",
    "HybridAction",
    "Policy",
    "PpoConfig",
    "Trainer",
    "TrainingAborted",
    "ManipulationPrimitive",
    "MpStatus",
    "build_catalog",
    "execute",
    "RolloutWorker",
    "WorkerPool",
]
