"""Mask-progressive reinforcement-learning distillation for small decoder-only models."""

from .config import RunConfig, load_config
from .errors import (ConfigError, DomainError, MaskDistillError, MissingArtifactError, NumericError,
                     StructuralError)
from .masking import MaskPlan, apply_mask, build_mask, masked_fraction
from .model import Model, ModelConfig, ParameterView
from .objectives import advantages, distill_reward, final_objective, jsd
from .rollout import ResponseRecord, RolloutStore
from .schedule import StageSchedule, stage_plan
from .tasks import evaluate, generate_tasks
from .trainer import Trainer, TrainState

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "DomainError", "MaskDistillError", "MaskPlan", "MissingArtifactError", "Model",
    "ModelConfig", "NumericError", "ParameterView", "ResponseRecord", "RolloutStore", "RunConfig",
    "StageSchedule", "StructuralError", "TrainState", "Trainer", "advantages", "apply_mask",
    "build_mask", "distill_reward", "evaluate", "final_objective", "generate_tasks", "jsd",
    "load_config", "masked_fraction", "stage_plan",
]
