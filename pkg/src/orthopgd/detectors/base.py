"""Common scoring contract for detectors.

A detector maps a batch of inputs to one real score per row.  Higher means
more likely adversarial; an input is flagged when its score exceeds the
threshold chosen by the evaluation code.  Scores are raw reals, never
probabilities.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..tensor import Tensor, as_tensor, div, mul, reshape, sub, sum_, take


def two_class_score(logits: Tensor) -> Tensor:
    """Reduce ``[benign, adversarial]`` logits to ``logit_adv - logit_benign``."""
    return sub(take(logits, (slice(None), 1)), take(logits, (slice(None), 0)))


@dataclass
class Standardizer:
    """Fixed affine map ``(v - mean) / scale`` applied before a detector network."""

    mean: np.ndarray
    scale: np.ndarray

    @classmethod
    def identity(cls, width: int) -> Standardizer:
        return cls(np.zeros(width), np.ones(width))

    @classmethod
    def fit(cls, features: np.ndarray, floor: float = 1e-6) -> Standardizer:
        features = np.asarray(features, dtype=np.float64)
        return cls(features.mean(axis=0), np.maximum(features.std(axis=0), floor))

    def __call__(self, v) -> Tensor:
        return div(sub(as_tensor(v), self.mean), self.scale)


class Detector:
    """Base class; subclasses implement :meth:`score` on (possibly taped) tensors."""

    kind = "base"

    def score(self, x) -> Tensor:
        raise NotImplementedError

    def scores(self, x: np.ndarray, batch_size: int = 512) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        out = [self.score(Tensor(x[i : i + batch_size])).data for i in range(0, len(x), batch_size)]
        return np.concatenate(out) if out else np.zeros(0)

    def __call__(self, x) -> Tensor:
        return self.score(x)


class ZeroDetector(Detector):
    """Scores every input 0; turns any attack into a classifier-only attack."""

    kind = "none"

    def score(self, x) -> Tensor:
        x = as_tensor(x)
        if x.ndim == 1:
            x = reshape(x, (1, -1))
        return mul(sum_(x, axis=1), 0.0)
