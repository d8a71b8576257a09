"""Dense-layer analysis: a binary classifier over hidden activations."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from ..nn import ClassifierModel
from ..tensor import Tensor, as_tensor, concat
from .base import Detector, Standardizer, two_class_score

# An attack oracle maps a batch of benign inputs (and their labels) to
# adversarial inputs and a mask of which rows it produced successfully.
AttackOracle = Callable[[np.ndarray, np.ndarray], tuple[np.ndarray, np.ndarray]]


@dataclass
class ActivationDataset:
    features: np.ndarray
    labels: np.ndarray  # 0 benign, 1 adversarial
    skipped: int = 0


def hidden_features(model: ClassifierModel, x) -> Tensor:
    """Concatenated post-activation outputs of every hidden layer."""
    acts = model.activations(as_tensor(x))[:-1]
    if not acts:
        raise ValueError("model has no hidden layers")
    return concat(acts, axis=1) if len(acts) > 1 else acts[0]


def dla_build_dataset(model: ClassifierModel, x: np.ndarray, y: np.ndarray, oracle: AttackOracle) -> ActivationDataset:
    x_adv, ok = oracle(np.asarray(x), np.asarray(y))
    ok = np.asarray(ok, dtype=bool)
    benign = hidden_features(model, Tensor(x[ok])).data
    adv = hidden_features(model, Tensor(x_adv[ok])).data
    features = np.concatenate([benign, adv])
    labels = np.concatenate([np.zeros(len(benign), np.intp), np.ones(len(adv), np.intp)])
    return ActivationDataset(features, labels, int((~ok).sum()))


class DenseLayerDetector(Detector):
    kind = "dla"

    def __init__(self, model: ClassifierModel, net: ClassifierModel, scaler: Standardizer | None = None):
        width = sum(model.hidden_widths)
        if net.input_dim != width:
            raise ValueError(f"detector input width {net.input_dim} != hidden width {width}")
        if net.class_count != 2:
            raise ValueError("detector network must have two outputs")
        self.model = model
        self.net = net
        self.scaler = scaler or Standardizer.identity(width)

    def score(self, x) -> Tensor:
        return two_class_score(self.net.forward(self.scaler(hidden_features(self.model, x))))
