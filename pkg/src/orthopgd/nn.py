"""Dense feed-forward classifiers, training loop and weight persistence."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import Dataset
from .tensor import GradTape, ShapeError, Tensor, add, matmul, relu, reshape, softmax_cross_entropy

FORMAT_VERSION = 1
_MAGIC = b"OPGW"
ACTIVATIONS = ("relu", "none")


@dataclass(frozen=True)
class Dense:
    weight: np.ndarray  # (in, out)
    bias: np.ndarray  # (out,)
    activation: str = "relu"

    def __post_init__(self):
        w = np.array(self.weight, dtype=np.float64)
        b = np.array(self.bias, dtype=np.float64).reshape(-1)
        if w.ndim != 2 or w.shape[1] != b.shape[0]:
            raise ShapeError(f"dense layer weight {w.shape} does not match bias {b.shape}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        w.flags.writeable = False
        b.flags.writeable = False
        object.__setattr__(self, "weight", w)
        object.__setattr__(self, "bias", b)

    @property
    def in_dim(self) -> int:
        return self.weight.shape[0]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[1]


def _apply(layer: Dense, h: Tensor, w: Tensor, b: Tensor) -> Tensor:
    z = add(matmul(h, w), b)
    return relu(z) if layer.activation == "relu" else z


class ClassifierModel:
    """A stack of dense layers; the last layer is linear and yields logits.

    Instances are immutable.  Training returns a new model.
    """

    def __init__(self, layers: Sequence[Dense]):
        layers = tuple(layers)
        if not layers:
            raise ValueError("a model needs at least one layer")
        if layers[-1].activation != "none":
            raise ValueError("the final layer must be linear (it produces logits)")
        for prev, nxt in zip(layers, layers[1:]):
            if prev.out_dim != nxt.in_dim:
                raise ShapeError(f"layer widths do not chain: {prev.out_dim} -> {nxt.in_dim}")
        self.layers = layers

    @classmethod
    def init(cls, dims: Sequence[int], seed: int = 0) -> ClassifierModel:
        """He-initialised relu network with widths ``dims`` (input first, classes last)."""
        if len(dims) < 2:
            raise ValueError("dims needs at least input and output width")
        rng = np.random.default_rng(seed)
        layers = []
        for i, (fan_in, fan_out) in enumerate(zip(dims[:-1], dims[1:])):
            w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, fan_out))
            act = "none" if i == len(dims) - 2 else "relu"
            layers.append(Dense(w, np.zeros(fan_out), act))
        return cls(layers)

    @property
    def input_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def class_count(self) -> int:
        return self.layers[-1].out_dim

    @property
    def dims(self) -> list[int]:
        return [self.input_dim] + [layer.out_dim for layer in self.layers]

    @property
    def hidden_widths(self) -> list[int]:
        return [layer.out_dim for layer in self.layers[:-1]]

    def _check_input(self, x: Tensor) -> Tensor:
        if x.ndim == 1:
            x = reshape(x, (1, -1))
        if x.ndim != 2 or x.shape[1] != self.input_dim:
            raise ShapeError(f"model expects inputs of width {self.input_dim}, got shape {x.shape}")
        return x

    def activations(self, x, params: Sequence[tuple[Tensor, Tensor]] | None = None) -> list[Tensor]:
        """Post-activation output of every layer, logits last."""
        h = self._check_input(x if isinstance(x, Tensor) else Tensor(x))
        if params is None:
            params = [(Tensor._wrap(layer.weight), Tensor._wrap(layer.bias)) for layer in self.layers]
        outs = []
        for layer, (w, b) in zip(self.layers, params):
            h = _apply(layer, h, w, b)
            outs.append(h)
        return outs

    def forward(self, x, params=None) -> Tensor:
        return self.activations(x, params)[-1]

    __call__ = forward

    def embedding(self, x, layer_index: int | None = None) -> Tensor:
        """Output of layer ``layer_index`` (0-based); logits when omitted."""
        if layer_index is None:
            layer_index = len(self.layers) - 1
        if layer_index < 0:
            layer_index += len(self.layers)
        if not 0 <= layer_index < len(self.layers):
            raise IndexError(f"layer index {layer_index} out of range for {len(self.layers)} layers")
        return self.activations(x)[layer_index]

    def logits(self, x: np.ndarray) -> np.ndarray:
        return self.forward(Tensor(np.atleast_2d(x))).data

    def predict(self, x: np.ndarray) -> np.ndarray:
        return np.argmax(self.logits(x), axis=1)

    def accuracy(self, x: np.ndarray, y: np.ndarray) -> float:
        return float(np.mean(self.predict(x) == np.asarray(y)))

    def with_weights(self, weights: Sequence[tuple[np.ndarray, np.ndarray]]) -> ClassifierModel:
        return ClassifierModel(
            [Dense(w, b, layer.activation) for layer, (w, b) in zip(self.layers, weights)]
        )

    def weights(self) -> list[tuple[np.ndarray, np.ndarray]]:
        return [(layer.weight, layer.bias) for layer in self.layers]

    def layer_specs(self) -> list[dict]:
        return [
            {"in": layer.in_dim, "out": layer.out_dim, "activation": layer.activation}
            for layer in self.layers
        ]


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 64
    learning_rate: float = 1e-3
    seed: int = 0
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")


@dataclass
class TrainResult:
    model: ClassifierModel
    losses: list[float] = field(default_factory=list)  # per-epoch mean loss


class _Adam:
    def __init__(self, params, cfg: TrainConfig):
        self.cfg = cfg
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, params, grads):
        c = self.cfg
        self.t += 1
        out = []
        for i, (p, g) in enumerate(zip(params, grads)):
            self.m[i] = c.beta1 * self.m[i] + (1 - c.beta1) * g
            self.v[i] = c.beta2 * self.v[i] + (1 - c.beta2) * g * g
            mhat = self.m[i] / (1 - c.beta1**self.t)
            vhat = self.v[i] / (1 - c.beta2**self.t)
            out.append(p - c.learning_rate * mhat / (np.sqrt(vhat) + c.adam_eps))
        return out


def _sgd(params, grads, lr):
    return [p - lr * g for p, g in zip(params, grads)]


def train(model: ClassifierModel, dataset: Dataset, cfg: TrainConfig) -> TrainResult:
    """Minibatch cross-entropy training; deterministic for a fixed ``cfg.seed``."""
    if len(dataset) == 0:
        raise ValueError("cannot train on an empty dataset")
    x = np.asarray(dataset.x, dtype=np.float64)
    y = np.asarray(dataset.y, dtype=np.intp)
    if x.shape[1] != model.input_dim:
        raise ShapeError(f"dataset width {x.shape[1]} != model input {model.input_dim}")
    if y.min() < 0 or y.max() >= model.class_count:
        raise ValueError(f"labels must lie in [0, {model.class_count})")

    rng = np.random.default_rng(cfg.seed)
    flat = [a.copy() for pair in model.weights() for a in pair]
    adam = _Adam(flat, cfg) if cfg.optimizer == "adam" else None
    tape = GradTape()
    losses = []
    for _ in range(cfg.epochs):
        order = rng.permutation(len(x))
        total, seen = 0.0, 0
        for start in range(0, len(x), cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            leaves = [tape.watch(a) for a in flat]
            params = list(zip(leaves[::2], leaves[1::2]))
            loss = softmax_cross_entropy(model.forward(Tensor._wrap(x[idx]), params), y[idx])
            grads = tape.gradient(loss, leaves)
            flat = adam.step(flat, grads) if adam else _sgd(flat, grads, cfg.learning_rate)
            total += loss.item() * len(idx)
            seen += len(idx)
        losses.append(total / seen)
    trained = model.with_weights(list(zip(flat[::2], flat[1::2])))
    return TrainResult(trained, losses)


def mean_loss(model: ClassifierModel, x: np.ndarray, y: np.ndarray) -> float:
    return softmax_cross_entropy(model.forward(Tensor(x)), np.asarray(y)).item()


# -- persistence -------------------------------------------------------------
#
# Byte layout of a weight file:
#   bytes 0..3   magic b"OPGW"
#   bytes 4..7   little-endian uint32 N, the header length
#   bytes 8..8+N UTF-8 JSON header
#   remainder    every array listed in header["arrays"], in order, row-major,
#                little-endian float64, concatenated without padding
#
# Header keys: format_version, kind, arrays ([{name, shape}]), and optional
# "models" ({name: {dims, layers}}) plus free-form "meta".


def write_arrays(path, kind: str, arrays: dict[str, np.ndarray], *, models=None, meta=None) -> None:
    header = {
        "format_version": FORMAT_VERSION,
        "kind": kind,
        "arrays": [{"name": k, "shape": list(np.shape(v))} for k, v in arrays.items()],
        "models": models or {},
        "meta": meta or {},
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for v in arrays.values():
            fh.write(np.ascontiguousarray(v, dtype="<f8").tobytes())


def read_arrays(path) -> tuple[dict, dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    if raw[:4] != _MAGIC:
        raise ValueError(f"{path}: not a weight file")
    (n,) = struct.unpack("<I", raw[4:8])
    header = json.loads(raw[8 : 8 + n].decode("utf-8"))
    if header.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported format_version {header.get('format_version')}")
    arrays, offset = {}, 8 + n
    for spec in header["arrays"]:
        count = int(np.prod(spec["shape"])) if spec["shape"] else 1
        chunk = raw[offset : offset + 8 * count]
        if len(chunk) != 8 * count:
            raise ValueError(f"{path}: truncated payload for {spec['name']}")
        arrays[spec["name"]] = np.frombuffer(chunk, dtype="<f8").astype(np.float64).reshape(spec["shape"])
        offset += 8 * count
    if offset != len(raw):
        raise ValueError(f"{path}: {len(raw) - offset} trailing bytes")
    return header, arrays


def model_arrays(model: ClassifierModel, prefix: str = "") -> dict[str, np.ndarray]:
    out = {}
    for i, (w, b) in enumerate(model.weights()):
        out[f"{prefix}layer{i}.weight"] = w
        out[f"{prefix}layer{i}.bias"] = b
    return out


def model_spec(model: ClassifierModel) -> dict:
    return {"dims": model.dims, "layers": model.layer_specs()}


def model_from_arrays(spec: dict, arrays: dict[str, np.ndarray], prefix: str = "") -> ClassifierModel:
    layers = []
    for i, ls in enumerate(spec["layers"]):
        layers.append(Dense(arrays[f"{prefix}layer{i}.weight"], arrays[f"{prefix}layer{i}.bias"], ls["activation"]))
    return ClassifierModel(layers)


def save_model(model: ClassifierModel, path, kind: str = "classifier", meta=None) -> None:
    write_arrays(path, kind, model_arrays(model), models={"model": model_spec(model)}, meta=meta)


def load_model(path, kind: str | None = None) -> ClassifierModel:
    header, arrays = read_arrays(path)
    if kind is not None and header["kind"] != kind:
        raise ValueError(f"{path}: expected kind {kind!r}, found {header['kind']!r}")
    return model_from_arrays(header["models"]["model"], arrays)
