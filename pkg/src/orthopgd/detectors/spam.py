"""SPAM steganalysis features and the detector network built on them.

For a step direction ``s`` the difference image is ``A[p] = X[p] - X[p + s]``;
after truncation to ``[-T, T]`` the pair ``(A[p], A[p + s])`` is binned and
``M[x, y] = Pr(A[p + s] = x | A[p] = y)`` is estimated by counting.  The
feature vector concatenates the mean of the four axis-aligned matrices with
the mean of the four diagonal ones, each flattened row-major with ``x`` as
the row index, giving ``2 * (2T + 1) ** 2`` values.

Two routes compute the same features:

* :func:`spam_features_exact` counts integer pairs directly.
* :func:`spam_features_differentiable` bins real-valued differences with a
  hard mask and accumulates ``K * A2 / x`` per bin (``1 - A2`` in the zero
  bin, where the ratio is undefined).  On integer images every accumulated
  term is exactly 1, so the two routes agree bit for bit; on real images the
  gradient flows through ``A2`` while the mask is held constant.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..nn import ClassifierModel
from ..tensor import Tensor, add, as_tensor, clamp, concat, div, mul, reshape, segment_sum, sub, sum_, take
from .base import Detector, Standardizer, two_class_score

DEFAULT_T = 3
PIXEL_SCALE = 255.0

# (flip_rows, flip_cols, base) for the 8 directions; flips reduce every
# direction to one of right, down or down-right on the flipped image.
AXIAL = (
    (False, False, "right"),
    (False, True, "right"),  # left
    (False, False, "down"),
    (True, False, "down"),  # up
)
DIAGONAL = (
    (False, False, "diag"),  # down-right
    (True, True, "diag"),  # up-left
    (False, True, "diag"),  # down-left
    (True, False, "diag"),  # up-right
)


@dataclass
class SpamFeatures:
    T: int
    F: np.ndarray  # (..., 2 * (2T+1)**2)
    matrices: np.ndarray | None = None  # (..., 8, 2T+1, 2T+1), row = next, col = prev

    @property
    def width(self) -> int:
        return feature_width(self.T)


def feature_width(T: int = DEFAULT_T) -> int:
    return 2 * (2 * T + 1) ** 2


def _check_images(images: np.ndarray) -> np.ndarray:
    if images.ndim == 2:
        images = images[None]
    if images.ndim != 3:
        raise ValueError(f"expected (h, w) or (batch, h, w) images, got shape {images.shape}")
    if images.shape[1] < 3 or images.shape[2] < 3:
        raise ValueError(f"SPAM needs images of at least 3x3 pixels, got {images.shape[1:]}")
    return images


def _pairs_np(img: np.ndarray, flip_r: bool, flip_c: bool, base: str):
    if flip_r:
        img = img[:, ::-1, :]
    if flip_c:
        img = img[:, :, ::-1]
    if base == "right":
        a = img[:, :, :-1] - img[:, :, 1:]
        return a[:, :, :-1], a[:, :, 1:]
    if base == "down":
        a = img[:, :-1, :] - img[:, 1:, :]
        return a[:, :-1, :], a[:, 1:, :]
    a = img[:, :-1, :-1] - img[:, 1:, 1:]
    return a[:, :-1, :-1], a[:, 1:, 1:]


def _normalise_np(counts: np.ndarray) -> np.ndarray:
    colsum = counts.sum(axis=-2, keepdims=True)
    return counts / (colsum + (colsum == 0))


def _combine_np(mats: list[np.ndarray], T: int) -> np.ndarray:
    axial = (((mats[0] + mats[1]) + mats[2]) + mats[3]) / 4.0
    diag = (((mats[4] + mats[5]) + mats[6]) + mats[7]) / 4.0
    b = axial.shape[0]
    return np.concatenate([axial.reshape(b, -1), diag.reshape(b, -1)], axis=-1)


def spam_features_exact(x, T: int = DEFAULT_T) -> SpamFeatures:
    """SPAM features of integer-valued images (pixels 0..255) by direct counting."""
    images = np.asarray(x, dtype=np.float64)
    single = images.ndim == 2
    images = _check_images(images)
    if np.any(images != np.round(images)):
        raise ValueError("exact SPAM features need integer-valued pixels")
    k = 2 * T + 1
    b = images.shape[0]
    mats = []
    for flip_r, flip_c, base in AXIAL + DIAGONAL:
        prev, nxt = _pairs_np(images, flip_r, flip_c, base)
        prev = np.clip(prev, -T, T).astype(np.intp).reshape(b, -1) + T
        nxt = np.clip(nxt, -T, T).astype(np.intp).reshape(b, -1) + T
        counts = np.zeros((b, k, k))
        for i in range(b):
            counts[i] = np.bincount(nxt[i] * k + prev[i], minlength=k * k).reshape(k, k)
        mats.append(_normalise_np(counts))
    F = _combine_np(mats, T)
    stacked = np.stack(mats, axis=1)
    if single:
        return SpamFeatures(T, F[0], stacked[0])
    return SpamFeatures(T, F, stacked)


def _flip(t: Tensor, flip_r: bool, flip_c: bool) -> Tensor:
    if not (flip_r or flip_c):
        return t
    rows = slice(None, None, -1) if flip_r else slice(None)
    cols = slice(None, None, -1) if flip_c else slice(None)
    return take(t, (slice(None), rows, cols))


def _pairs_t(img: Tensor, flip_r: bool, flip_c: bool, base: str):
    img = _flip(img, flip_r, flip_c)
    s = slice(None)
    if base == "right":
        a = sub(take(img, (s, s, slice(None, -1))), take(img, (s, s, slice(1, None))))
        return take(a, (s, s, slice(None, -1))), take(a, (s, s, slice(1, None)))
    if base == "down":
        a = sub(take(img, (s, slice(None, -1), s)), take(img, (s, slice(1, None), s)))
        return take(a, (s, slice(None, -1), s)), take(a, (s, slice(1, None), s))
    a = sub(take(img, (s, slice(None, -1), slice(None, -1))), take(img, (s, slice(1, None), slice(1, None))))
    return take(a, (s, slice(None, -1), slice(None, -1))), take(a, (s, slice(1, None), slice(1, None)))


def _transition_t(prev: Tensor, nxt: Tensor, T: int) -> Tensor:
    k = 2 * T + 1
    b = prev.shape[0]
    a1 = reshape(clamp(prev, -T, T), (b, -1))
    a2 = reshape(clamp(nxt, -T, T), (b, -1))
    # bin membership is a hard mask: constant during backward
    ybin = np.floor(a1.data).astype(np.intp) + T
    xbin = np.floor(a2.data).astype(np.intp) + T
    # A2 / x for x != 0 and 1 - A2 in the zero bin: exactly 1 on integers, and
    # raising a count always pulls the difference toward zero
    xval = (xbin - T).astype(np.float64)
    zero = xval == 0
    term = add(div(mul(a2, np.where(zero, -1.0, 1.0)), np.where(zero, 1.0, xval)), zero.astype(np.float64))
    counts = reshape(segment_sum(term, xbin * k + ybin, k * k), (b, k, k))
    col = sum_(counts, axis=1, keepdims=True)
    return div(counts, add(col, (col.data == 0).astype(np.float64)))


def spam_features_differentiable(x, T: int = DEFAULT_T) -> Tensor:
    """Tape-aware SPAM features of real images ``(batch, h, w)`` on the 0..255 scale.

    Returns a ``(batch, 2 * (2T+1)**2)`` tensor.
    """
    x = as_tensor(x)
    if x.ndim == 2:
        x = reshape(x, (1, *x.shape))
    _check_images(x.data)
    mats = [_transition_t(*_pairs_t(x, fr, fc, base), T) for fr, fc, base in AXIAL + DIAGONAL]
    axial = div(add(add(add(mats[0], mats[1]), mats[2]), mats[3]), 4.0)
    diag = div(add(add(add(mats[4], mats[5]), mats[6]), mats[7]), 4.0)
    b = x.shape[0]
    return concat([reshape(axial, (b, -1)), reshape(diag, (b, -1))], axis=-1)


class SpamDetector(Detector):
    """Three-layer dense network over differentiable SPAM features."""

    kind = "spam"

    def __init__(self, net: ClassifierModel, image_shape, T: int = DEFAULT_T, scaler: Standardizer | None = None):
        if net.input_dim != feature_width(T):
            raise ValueError(f"detector input width {net.input_dim} != SPAM width {feature_width(T)}")
        if len(net.layers) != 3:
            raise ValueError("the SPAM detector network has exactly three dense layers")
        self.net = net
        self.image_shape = tuple(image_shape)
        self.T = T
        self.scaler = scaler or Standardizer.identity(net.input_dim)

    def features(self, x) -> Tensor:
        x = as_tensor(x)
        if x.ndim == 1:
            x = reshape(x, (1, -1))
        imgs = reshape(x * PIXEL_SCALE, (x.shape[0], *self.image_shape))
        return spam_features_differentiable(imgs, self.T)

    def score_features(self, feats) -> Tensor:
        feats = as_tensor(feats)
        if feats.shape[-1] != self.net.input_dim:
            raise ValueError(f"feature width {feats.shape[-1]} != detector input {self.net.input_dim}")
        return two_class_score(self.net.forward(self.scaler(feats)))

    def score(self, x) -> Tensor:
        return self.score_features(self.features(x))
