"""Honeypot (trapdoor) defense.

Training injects a per-class patch: copies of training inputs stamped with
class ``t``'s patch are relabelled ``t``.  The signature of class ``t`` is the
mean embedding of patched inputs; at test time an input predicted as ``t`` is
scored by the cosine between its embedding and that signature.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..data import Dataset
from ..nn import ClassifierModel, TrainConfig, TrainResult, train
from ..tensor import Tensor, as_tensor, div, mul, reshape, sqrt, sum_
from .base import Detector


@dataclass
class PatchSpec:
    """One ``size x size`` trapdoor per class.

    ``locations[c]`` is the (row, col) of the top-left corner of class ``c``'s
    patch and ``patterns[c]`` its pixel values.  Inside the square a patched
    pixel is ``(1 - opacity) * x + opacity * pattern``.
    """

    image_shape: tuple[int, int]
    locations: np.ndarray  # (n, 2) int
    patterns: np.ndarray  # (n, size, size)
    opacity: float = 0.1
    inject_ratio: float = 0.5

    def __post_init__(self):
        self.locations = np.asarray(self.locations, dtype=np.intp)
        self.patterns = np.asarray(self.patterns, dtype=np.float64)
        h, w = self.image_shape
        k = self.size
        for r, c in self.locations:
            if r < 0 or c < 0 or r + k > h or c + k > w:
                raise ValueError(f"patch at ({r}, {c}) of size {k} lies outside the {h}x{w} image")
        if len(self.locations) != len(self.patterns):
            raise ValueError("need one location per pattern")
        if not 0.0 <= self.opacity <= 1.0:
            raise ValueError("opacity must lie in [0, 1]")

    @property
    def size(self) -> int:
        return self.patterns.shape[1]

    @property
    def class_count(self) -> int:
        return len(self.patterns)

    @classmethod
    def random(cls, class_count: int, image_shape, size: int = 3, opacity: float = 0.1, seed: int = 0,
               inject_ratio: float = 0.5) -> PatchSpec:
        rng = np.random.default_rng(seed)
        h, w = image_shape
        locations = np.stack([rng.integers(0, h - size + 1, class_count), rng.integers(0, w - size + 1, class_count)], 1)
        patterns = rng.integers(0, 2, size=(class_count, size, size)).astype(np.float64)
        return cls(tuple(image_shape), locations, patterns, opacity, inject_ratio)

    def apply(self, x: np.ndarray, target: int) -> np.ndarray:
        """Stamp class ``target``'s patch onto flattened images ``x``."""
        x = np.array(x, dtype=np.float64, copy=True)
        single = x.ndim == 1
        imgs = x.reshape(-1, *self.image_shape)
        r, c = self.locations[target]
        k = self.size
        region = imgs[:, r : r + k, c : c + k]
        imgs[:, r : r + k, c : c + k] = (1 - self.opacity) * region + self.opacity * self.patterns[target]
        out = imgs.reshape(x.shape)
        return out[0] if single and out.ndim > 1 else out


@dataclass
class TrapdoorResult:
    model: ClassifierModel
    signatures: np.ndarray  # (n, width)
    losses: list[float] = field(default_factory=list)


def poison(dataset: Dataset, patch: PatchSpec, seed: int = 0) -> Dataset:
    """Append patched, relabelled copies of a random fraction of ``dataset``."""
    rng = np.random.default_rng(seed)
    n = patch.class_count
    count = int(round(patch.inject_ratio * len(dataset)))
    idx = rng.integers(0, len(dataset), size=count)
    targets = (dataset.y[idx] + rng.integers(1, n, size=count)) % n
    xs = [dataset.x]
    ys = [dataset.y]
    for t in range(n):
        sel = idx[targets == t]
        if len(sel):
            xs.append(patch.apply(dataset.x[sel], t))
            ys.append(np.full(len(sel), t))
    return Dataset(np.concatenate(xs), np.concatenate(ys), dataset.image_shape)


def compute_signatures(model: ClassifierModel, x: np.ndarray, patch: PatchSpec,
                       layer_index: int | None = None) -> np.ndarray:
    """Mean embedding of ``x`` stamped with each class's patch."""
    sigs = []
    for t in range(patch.class_count):
        emb = model.embedding(Tensor(patch.apply(x, t)), layer_index).data
        sigs.append(emb.mean(axis=0))
    return np.stack(sigs)


def train_with_trapdoor(model: ClassifierModel, dataset: Dataset, patch: PatchSpec, cfg: TrainConfig,
                        layer_index: int | None = None, signature_samples: int = 500) -> TrapdoorResult:
    if patch.class_count != model.class_count:
        raise ValueError(f"patch covers {patch.class_count} classes, model has {model.class_count}")
    if tuple(patch.image_shape) != tuple(dataset.image_shape):
        raise ValueError("patch and dataset image shapes differ")
    result: TrainResult = train(model, poison(dataset, patch, cfg.seed), cfg)
    rng = np.random.default_rng(cfg.seed + 1)
    pick = rng.choice(len(dataset), size=min(signature_samples, len(dataset)), replace=False)
    sigs = compute_signatures(result.model, dataset.x[np.sort(pick)], patch, layer_index)
    return TrapdoorResult(result.model, sigs, result.losses)


def _norm_rows(t: Tensor) -> Tensor:
    return sqrt(sum_(mul(t, t), axis=1))


class TrapdoorDetector(Detector):
    """Cosine similarity between ``e(x)`` and the signature of the predicted class."""

    kind = "trapdoor"

    def __init__(self, model: ClassifierModel, signatures: np.ndarray, layer_index: int | None = None):
        signatures = np.asarray(signatures, dtype=np.float64)
        if len(signatures) != model.class_count:
            raise ValueError(f"{len(signatures)} signatures for {model.class_count} classes")
        if np.any(np.linalg.norm(signatures, axis=1) == 0):
            raise ValueError("signatures must have nonzero norm")
        self.model = model
        self.signatures = signatures
        self.layer_index = layer_index

    def score(self, x) -> Tensor:
        x = as_tensor(x)
        if x.ndim == 1:
            x = reshape(x, (1, -1))
        acts = self.model.activations(x)
        emb = acts[-1] if self.layer_index is None else acts[self.layer_index]
        pred = np.argmax(acts[-1].data, axis=1)
        sig = self.signatures[pred]
        if emb.shape[1] != sig.shape[1]:
            raise ValueError(f"embedding width {emb.shape[1]} != signature width {sig.shape[1]}")
        enorm = np.linalg.norm(emb.data, axis=1)
        if np.any(enorm == 0):
            raise ValueError("cosine similarity is undefined for a zero embedding")
        dots = sum_(mul(emb, sig), axis=1)
        return div(div(dots, _norm_rows(emb)), np.linalg.norm(sig, axis=1))
