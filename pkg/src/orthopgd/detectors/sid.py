"""Sensitivity-inconsistency detection with a fixed Haar dual.

The dual classifier sees a low-passed copy of the input (2x2 block average,
upsampled back).  The feature is the per-class logit gap between primal and
dual; a small network turns it into a score.
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np

from ..nn import ClassifierModel
from ..tensor import Tensor, as_tensor, matmul, reshape, sub
from .base import Detector, Standardizer, two_class_score


@lru_cache(maxsize=8)
def _haar_matrix(h: int, w: int) -> np.ndarray:
    if h % 2 or w % 2:
        raise ValueError(f"Haar transform needs even image sides, got {h}x{w}")
    idx = np.arange(h * w).reshape(h, w)
    block = (idx // w // 2) * (w // 2) + (idx % w) // 2
    flat = block.ravel()
    mat = (flat[:, None] == flat[None, :]).astype(np.float64) / 4.0
    mat.flags.writeable = False
    return mat


def haar_dual_transform(x, image_shape) -> Tensor:
    """Linear low-pass: every 2x2 block replaced by its mean.  Rows are flattened images."""
    x = as_tensor(x)
    h, w = image_shape
    squeeze = x.ndim == 1
    if squeeze:
        x = reshape(x, (1, -1))
    if x.shape[1] != h * w:
        raise ValueError(f"row width {x.shape[1]} does not match image {h}x{w}")
    out = matmul(x, _haar_matrix(h, w))
    return reshape(out, (h * w,)) if squeeze else out


def sid_features(primal: ClassifierModel, dual: ClassifierModel, x, image_shape, transform=haar_dual_transform) -> Tensor:
    if primal.class_count != dual.class_count:
        raise ValueError(f"primal has {primal.class_count} classes, dual has {dual.class_count}")
    x = as_tensor(x)
    if x.ndim == 1:
        x = reshape(x, (1, -1))
    return sub(primal.forward(x), dual.forward(transform(x, image_shape)))


class SensitivityDetector(Detector):
    kind = "sid"

    def __init__(self, primal: ClassifierModel, dual: ClassifierModel, net: ClassifierModel, image_shape,
                 scaler: Standardizer | None = None, transform=haar_dual_transform):
        if primal.class_count != dual.class_count:
            raise ValueError(f"primal has {primal.class_count} classes, dual has {dual.class_count}")
        if net.input_dim != primal.class_count:
            raise ValueError("detector input width must equal the class count")
        self.primal = primal
        self.dual = dual
        self.net = net
        self.image_shape = tuple(image_shape)
        self.scaler = scaler or Standardizer.identity(net.input_dim)
        self.transform = transform

    def features(self, x) -> Tensor:
        return sid_features(self.primal, self.dual, x, self.image_shape, self.transform)

    def score(self, x) -> Tensor:
        return two_class_score(self.net.forward(self.scaler(self.features(x))))
