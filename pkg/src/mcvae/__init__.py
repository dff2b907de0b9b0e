"""Multimodal contrastive variational autoencoder for survival prediction with
missing modalities."""

from .autodiff import Tensor, backward
from .config import ExperimentConfig, TrainConfig, profile_config
from .data import Cohort, SyntheticSpec, generate_cohort, load_cohort, save_cohort
from .model import McvaeModel, load_checkpoint, save_checkpoint
from .survival import c_index
from .training import evaluate, train

__all__ = [
    "Tensor", "backward", "ExperimentConfig", "TrainConfig", "profile_config", "Cohort",
    "SyntheticSpec", "generate_cohort", "load_cohort", "save_cohort", "McvaeModel",
    "load_checkpoint", "save_checkpoint", "c_index", "evaluate", "train",
]

__version__ = "0.1.0"
