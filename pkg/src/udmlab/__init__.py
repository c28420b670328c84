"""Uniform discrete diffusion with group-relative policy optimization, at desk scale."""

from .core import (
    CosineSchedule,
    LinearSchedule,
    SpaceSpec,
    TimeGrid,
    euler_step,
    forward_corrupt,
    forward_marginal_prob,
    jump_probability,
    make_schedule,
    sequence_log_prob,
)
from .denoiser import Arch, ModelParams, init_params, load_checkpoint, save_checkpoint
from .errors import (
    CheckpointMismatch,
    ConfigError,
    DomainError,
    NumericError,
    ShapeError,
    StatisticsError,
    UDMError,
)
from .rng import stream
from .tasks import RewardSpec, SyntheticTask, reward, sample_clean

__version__ = "0.1.0"

__all__ = [
    "Arch",
    "CheckpointMismatch",
    "ConfigError",
    "CosineSchedule",
    "DomainError",
    "LinearSchedule",
    "ModelParams",
    "NumericError",
    "RewardSpec",
    "ShapeError",
    "SpaceSpec",
    "StatisticsError",
    "SyntheticTask",
    "TimeGrid",
    "UDMError",
    "euler_step",
    "forward_corrupt",
    "forward_marginal_prob",
    "init_params",
    "jump_probability",
    "load_checkpoint",
    "make_schedule",
    "reward",
    "sample_clean",
    "save_checkpoint",
    "sequence_log_prob",
    "stream",
]
