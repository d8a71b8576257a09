from .base import Detector, Standardizer, ZeroDetector, two_class_score
from .dla import ActivationDataset, DenseLayerDetector, dla_build_dataset, hidden_features
from .sid import SensitivityDetector, haar_dual_transform, sid_features
from .spam import (
    SpamDetector,
    SpamFeatures,
    feature_width,
    spam_features_differentiable,
    spam_features_exact,
)
from .trapdoor import PatchSpec, TrapdoorDetector, TrapdoorResult, compute_signatures, poison, train_with_trapdoor

__all__ = [
    "ActivationDataset",
    "DenseLayerDetector",
    "Detector",
    "PatchSpec",
    "SensitivityDetector",
    "SpamDetector",
    "SpamFeatures",
    "Standardizer",
    "TrapdoorDetector",
    "TrapdoorResult",
    "ZeroDetector",
    "compute_signatures",
    "dla_build_dataset",
    "feature_width",
    "haar_dual_transform",
    "hidden_features",
    "poison",
    "sid_features",
    "spam_features_differentiable",
    "spam_features_exact",
    "train_with_trapdoor",
    "two_class_score",
]
