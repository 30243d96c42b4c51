"""Balanced multi-modal regression: Shapley contribution scores and a
Fisher-weighted adaptive weight constraint, on a small numpy autodiff engine.
"""

from .autodiff import Tape, Tensor, backward, no_tape
from .balance import AwcConfig, awc_loss, compute_fim, partition_modalities
from .config import ExperimentConfig
from .data import DataConfig, generate
from .errors import ConfigError, NonFiniteLossError
from .metrics import mpjpe, mpjpe_loss, pa_mpjpe
from .models import MODALITIES, ModelConfig, MultiModalModel, forward
from .shapley import shapley_oracle, shapley_scores
from .trainer import evaluate, profile_overhead, train

__all__ = [
    "AwcConfig", "ConfigError", "DataConfig", "ExperimentConfig", "MODALITIES", "ModelConfig",
    "MultiModalModel", "NonFiniteLossError", "Tape", "Tensor", "awc_loss", "backward", "compute_fim",
    "evaluate", "forward", "generate", "mpjpe", "mpjpe_loss", "no_tape", "pa_mpjpe",
    "partition_modalities", "profile_overhead", "shapley_oracle", "shapley_scores", "train",
]
__version__ = "0.1.0"
