"""Datasets: seeded synthetic images plus IDX and CSV ingestion.

Images are stored flattened, row-major, with pixels in ``[0, 1]``.
"""

from __future__ import annotations

import csv
import gzip
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass
class Dataset:
    x: np.ndarray  # (N, h*w)
    y: np.ndarray  # (N,)
    image_shape: tuple[int, int]

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64).reshape(len(self.y), -1)
        self.y = np.asarray(self.y, dtype=np.intp)
        h, w = self.image_shape
        if self.x.shape[1] != h * w:
            raise ValueError(f"rows of width {self.x.shape[1]} do not match image {h}x{w}")

    def __len__(self) -> int:
        return len(self.y)

    @property
    def class_count(self) -> int:
        return int(self.y.max()) + 1 if len(self.y) else 0

    def subset(self, idx) -> Dataset:
        return Dataset(self.x[idx], self.y[idx], self.image_shape)

    def images(self) -> np.ndarray:
        return self.x.reshape(-1, *self.image_shape)


@dataclass
class SyntheticSpec:
    """Parameters of the class-conditional image generator.

    Each image is mid-grey plus a class pattern of amplitude ``contrast``, a
    per-sample smooth nuisance field of amplitude ``jitter`` and white noise
    of standard deviation ``noise``.
    """

    class_count: int = 10
    size: int = 16
    contrast: float = 0.08
    jitter: float = 0.02
    noise: float = 0.005
    train_count: int = 3000
    test_count: int = 1000
    seed: int = 0


def _smooth_field(rng, size: int, blobs: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    field = np.zeros((size, size))
    for _ in range(blobs):
        cy, cx = rng.uniform(-1, size, size=2)
        width = rng.uniform(size / 8, size / 3)
        amp = rng.uniform(-1.0, 1.0)
        field += amp * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * width**2))
    return field


def _prototypes(rng, spec: SyntheticSpec) -> np.ndarray:
    protos = []
    for _ in range(spec.class_count):
        f = _smooth_field(rng, spec.size, 4)
        protos.append(f / max(np.abs(f).max(), 1e-12))
    return np.stack(protos)


def _shift(img: np.ndarray, dy: int, dx: int) -> np.ndarray:
    padded = np.pad(img, 1, mode="edge")
    h, w = img.shape
    return padded[1 + dy : 1 + dy + h, 1 + dx : 1 + dx + w]


def _sample(rng, protos: np.ndarray, count: int, spec: SyntheticSpec) -> Dataset:
    labels = rng.integers(0, spec.class_count, size=count)
    out = np.empty((count, spec.size, spec.size))
    for i, label in enumerate(labels):
        pattern = _shift(protos[label], *rng.integers(-1, 2, size=2))
        img = 0.5 + spec.contrast * rng.uniform(0.8, 1.2) * pattern
        img = img + spec.jitter * _smooth_field(rng, spec.size, 3)
        img = img + rng.normal(0.0, spec.noise, size=img.shape)
        out[i] = img
    out = np.round(np.clip(out, 0.0, 1.0) * 255.0) / 255.0
    return Dataset(out.reshape(count, -1), labels, (spec.size, spec.size))


def generate(spec: SyntheticSpec) -> tuple[Dataset, Dataset]:
    """Train and test splits drawn from the same class prototypes.

    Pixels are quantised to multiples of 1/255 like 8-bit images.
    """
    if spec.class_count < 2:
        raise ValueError("need at least two classes")
    if spec.size < 4:
        raise ValueError("images must be at least 4x4")
    root = np.random.default_rng(spec.seed)
    proto_rng, train_rng, test_rng = (np.random.default_rng(s) for s in root.spawn(3))
    protos = _prototypes(proto_rng, spec)
    return _sample(train_rng, protos, spec.train_count, spec), _sample(test_rng, protos, spec.test_count, spec)


# -- CSV ---------------------------------------------------------------------


def write_csv(dataset: Dataset, path) -> None:
    """One row per example: ``label,p0,p1,...``; a header row records the image shape."""
    h, w = dataset.image_shape
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["label"] + [f"p{r}_{c}" for r in range(h) for c in range(w)])
        for label, row in zip(dataset.y, dataset.x):
            writer.writerow([int(label)] + [repr(float(v)) for v in row])


def read_csv(path, image_shape: tuple[int, int] | None = None) -> Dataset:
    labels, rows = [], []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise ValueError(f"{path}: empty file")
        if header[0] != "label":
            # headerless file: treat the first line as data
            reader = iter([header, *reader])
            header = None
        for lineno, rec in enumerate(reader, start=2 if header else 1):
            if not rec:
                continue
            try:
                labels.append(int(rec[0]))
                rows.append([float(v) for v in rec[1:]])
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from None
    x = np.asarray(rows, dtype=np.float64)
    if x.size and x.max() > 1.0:
        x = x / 255.0
    if image_shape is None:
        if header is not None and "_" in header[-1]:
            r, c = header[-1][1:].split("_")
            image_shape = (int(r) + 1, int(c) + 1)
        else:
            side = int(round(np.sqrt(x.shape[1])))
            image_shape = (side, side)
    return Dataset(x, np.asarray(labels), image_shape)


# -- IDX ---------------------------------------------------------------------


def _open(path):
    path = Path(path)
    return gzip.open(path, "rb") if path.suffix == ".gz" else open(path, "rb")


def read_idx(path) -> np.ndarray:
    """Parse an unsigned-byte IDX file into a uint8 array of its stated shape."""
    with _open(path) as fh:
        raw = fh.read()
    if len(raw) < 4:
        raise ValueError(f"{path}: truncated IDX header")
    zero, dtype_code, ndim = raw[0] << 8 | raw[1], raw[2], raw[3]
    if zero != 0 or dtype_code != 0x08:
        raise ValueError(f"{path}: unsupported IDX magic {raw[:4].hex()}")
    dims = struct.unpack(">" + "I" * ndim, raw[4 : 4 + 4 * ndim])
    count = int(np.prod(dims))
    payload = np.frombuffer(raw, dtype=np.uint8, count=count, offset=4 + 4 * ndim)
    return payload.reshape(dims)


def write_idx(array: np.ndarray, path) -> None:
    array = np.asarray(array, dtype=np.uint8)
    with open(path, "wb") as fh:
        fh.write(struct.pack(">I", 0x0800 | array.ndim))
        fh.write(struct.pack(">" + "I" * array.ndim, *array.shape))
        fh.write(array.tobytes())


def load_idx(images_path, labels_path) -> Dataset:
    images = read_idx(images_path)
    labels = read_idx(labels_path)
    if images.ndim != 3 or labels.ndim != 1:
        raise ValueError("expected a 3-d image file and a 1-d label file")
    if len(images) != len(labels):
        raise ValueError(f"{len(images)} images but {len(labels)} labels")
    h, w = images.shape[1:]
    return Dataset(images.reshape(len(images), -1) / 255.0, labels.astype(np.intp), (h, w))
