"""Adversarial regularization with cached perturbations, at desk scale."""

from .cache import PerturbationCache, ema_update, should_refresh
from .config import ExperimentConfig, load_config
from .data import Dataset, SyntheticSpec, generate_synthetic, load_tsv
from .model import Batch, Model, Sample
from .trainer import (PassCounter, TrainingConfig, count_passes_expected, evaluate,
                      grad_norm_variance, sgd_step, train)

__version__ = "0.1.0"

__all__ = [
    "Batch", "Dataset", "ExperimentConfig", "Model", "PassCounter", "PerturbationCache",
    "Sample", "SyntheticSpec", "TrainingConfig", "count_passes_expected", "ema_update",
    "evaluate", "generate_synthetic", "grad_norm_variance", "load_config", "load_tsv",
    "sgd_step", "should_refresh", "train",
]
