"""Gradient attacks on (classifier, detector) pairs, with the defenses and metrics to evaluate them."""

from .attacks import AttackConfig, AttackOutcome, orthogonal_component, project, run_attack, run_attack_batch
from .data import Dataset, SyntheticSpec, generate
from .metrics import calibrate_phi, roc, success_rate_at
from .nn import ClassifierModel, TrainConfig, train
from .tensor import GradTape, Tensor

__all__ = [
    "AttackConfig",
    "AttackOutcome",
    "ClassifierModel",
    "Dataset",
    "GradTape",
    "SyntheticSpec",
    "Tensor",
    "TrainConfig",
    "calibrate_phi",
    "generate",
    "orthogonal_component",
    "project",
    "roc",
    "run_attack",
    "run_attack_batch",
    "success_rate_at",
    "train",
]
