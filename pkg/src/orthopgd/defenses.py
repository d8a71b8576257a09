"""Building, saving and loading the four desk-scale defenses.

A defense pairs the classifier it protects with a detector.  Every builder
is deterministic given its config.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .attacks import AttackConfig, choose_targets, run_attack_batch
from .data import Dataset
from .detectors import (
    DenseLayerDetector,
    PatchSpec,
    SensitivityDetector,
    SpamDetector,
    Standardizer,
    TrapdoorDetector,
    ZeroDetector,
    dla_build_dataset,
    feature_width,
    haar_dual_transform,
    train_with_trapdoor,
)
from .detectors.base import Detector
from .nn import (
    ClassifierModel,
    TrainConfig,
    model_arrays,
    model_from_arrays,
    model_spec,
    read_arrays,
    train,
    write_arrays,
)
from .tensor import Tensor

log = logging.getLogger(__name__)

DEFENSE_KINDS = ("trapdoor", "dla", "sid", "spam")
CLASSIFIER_FILE = "classifier.weights"
DETECTOR_FILE = "detector.weights"


class MissingArtifactError(FileNotFoundError):
    """A prerequisite model or data file does not exist."""


@dataclass
class DefenseConfig:
    kind: str
    hidden: tuple[int, ...] = (128, 64)
    classifier_train: TrainConfig = field(default_factory=lambda: TrainConfig(epochs=20, seed=0))
    # adversarial examples used to fit learned detectors
    pgd_epsilon: float = 0.05
    pgd_steps: int = 100
    pgd_samples: int = 1500
    detector_hidden: tuple[int, ...] = (64, 32)
    detector_train: TrainConfig = field(default_factory=lambda: TrainConfig(epochs=60, batch_size=64, seed=1))
    # trapdoor; patch_size None covers the whole image
    patch_size: int | None = None
    patch_opacity: float = 0.15
    inject_ratio: float = 1.0
    embed_layer: int | None = 0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in DEFENSE_KINDS:
            raise ValueError(f"defense kind must be one of {DEFENSE_KINDS}")
        if isinstance(self.classifier_train, dict):
            self.classifier_train = TrainConfig(**self.classifier_train)
        if isinstance(self.detector_train, dict):
            self.detector_train = TrainConfig(**self.detector_train)
        self.hidden = tuple(self.hidden)
        self.detector_hidden = tuple(self.detector_hidden)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Defense:
    kind: str
    model: ClassifierModel
    detector: Detector
    image_shape: tuple[int, int]
    info: dict = field(default_factory=dict)


def vanilla_pgd_oracle(model: ClassifierModel, epsilon: float, steps: int, seed: int = 0):
    """Targeted classifier-only PGD; success means the input is misclassified."""
    cfg = AttackConfig(epsilon=epsilon, alpha=epsilon / 20, steps=steps, strategy="pgd_classifier_only",
                       target_seed=seed)

    def oracle(x, y):
        outs = run_attack_batch(x, y, model, ZeroDetector(), cfg, choose_targets(y, model.class_count, cfg))
        x_adv = np.stack([o.x_adv for o in outs])
        return x_adv, model.predict(x_adv) != np.asarray(y)

    return oracle


def train_classifier(train_set: Dataset, cfg: DefenseConfig, class_count: int | None = None) -> ClassifierModel:
    n = class_count or train_set.class_count
    model = ClassifierModel.init([train_set.x.shape[1], *cfg.hidden, n], seed=cfg.classifier_train.seed)
    return train(model, train_set, cfg.classifier_train).model


def _fit_detector_net(features: np.ndarray, labels: np.ndarray, cfg: DefenseConfig, hidden=None):
    scaler = Standardizer.fit(features)
    z = (features - scaler.mean) / scaler.scale
    hidden = cfg.detector_hidden if hidden is None else hidden
    net = ClassifierModel.init([features.shape[1], *hidden, 2], seed=cfg.detector_train.seed)
    ds = Dataset(z, labels, (1, features.shape[1]))
    return train(net, ds, cfg.detector_train).model, scaler


def _pgd_pairs(model, train_set, cfg, rng):
    idx = np.sort(rng.choice(len(train_set), size=min(cfg.pgd_samples, len(train_set)), replace=False))
    x, y = train_set.x[idx], train_set.y[idx]
    keep = model.predict(x) == y
    oracle = vanilla_pgd_oracle(model, cfg.pgd_epsilon, cfg.pgd_steps, seed=cfg.seed)
    return x[keep], y[keep], oracle


def build_defense(train_set: Dataset, cfg: DefenseConfig, classifier: ClassifierModel | None = None) -> Defense:
    """Train the protected classifier (unless given) and fit the detector."""
    rng = np.random.default_rng(cfg.seed)
    shape = tuple(train_set.image_shape)
    n = train_set.class_count
    info: dict = {}

    if cfg.kind == "trapdoor":
        size = cfg.patch_size or min(shape)
        patch = PatchSpec.random(n, shape, size, cfg.patch_opacity, seed=cfg.seed,
                                 inject_ratio=cfg.inject_ratio)
        init = ClassifierModel.init([train_set.x.shape[1], *cfg.hidden, n], seed=cfg.classifier_train.seed)
        res = train_with_trapdoor(init, train_set, patch, cfg.classifier_train, cfg.embed_layer)
        info["patch"] = {"locations": patch.locations.tolist(), "patterns": patch.patterns.tolist(),
                         "opacity": patch.opacity, "inject_ratio": patch.inject_ratio}
        return Defense("trapdoor", res.model, TrapdoorDetector(res.model, res.signatures, cfg.embed_layer), shape, info)

    model = classifier or train_classifier(train_set, cfg, n)
    x, y, oracle = _pgd_pairs(model, train_set, cfg, rng)

    if cfg.kind == "dla":
        data = dla_build_dataset(model, x, y, oracle)
        net, scaler = _fit_detector_net(data.features, data.labels, cfg)
        info["skipped"] = data.skipped
        return Defense("dla", model, DenseLayerDetector(model, net, scaler), shape, info)

    if cfg.kind == "sid":
        dual_set = Dataset(haar_dual_transform(train_set.x, shape).data, train_set.y, shape)
        dual = train_classifier(dual_set, cfg, n)
        x_adv, ok = oracle(x, y)
        bare = SensitivityDetector(model, dual, ClassifierModel.init([n, 2], 0), shape)
        benign = bare.features(Tensor(x[ok])).data
        adv = bare.features(Tensor(x_adv[ok])).data
        feats = np.concatenate([benign, adv])
        labels = np.r_[np.zeros(len(benign), np.intp), np.ones(len(adv), np.intp)]
        net, scaler = _fit_detector_net(feats, labels, cfg)
        info["skipped"] = int((~ok).sum())
        return Defense("sid", model, SensitivityDetector(model, dual, net, shape, scaler), shape, info)

    # spam
    x_adv, ok = oracle(x, y)
    probe = SpamDetector(ClassifierModel.init([feature_width(), 2, 2, 2], 0), shape)
    benign = probe.features(Tensor(x[ok])).data
    adv = probe.features(Tensor(x_adv[ok])).data
    feats = np.concatenate([benign, adv])
    labels = np.r_[np.zeros(len(benign), np.intp), np.ones(len(adv), np.intp)]
    net, scaler = _fit_detector_net(feats, labels, cfg, hidden=cfg.detector_hidden[:2])
    info["skipped"] = int((~ok).sum())
    return Defense("spam", model, SpamDetector(net, shape, scaler=scaler), shape, info)


# -- persistence -------------------------------------------------------------


def _scaler_arrays(scaler: Standardizer, prefix: str = "scaler.") -> dict:
    return {f"{prefix}mean": scaler.mean, f"{prefix}scale": scaler.scale}


def save_detector(defense: Defense, path) -> None:
    det = defense.detector
    meta = {"image_shape": list(defense.image_shape), "info": defense.info}
    if isinstance(det, TrapdoorDetector):
        meta["layer_index"] = det.layer_index
        write_arrays(path, "trapdoor", {"signatures": det.signatures}, meta=meta)
    elif isinstance(det, DenseLayerDetector):
        arrays = {**model_arrays(det.net, "net."), **_scaler_arrays(det.scaler)}
        write_arrays(path, "dla", arrays, models={"net": model_spec(det.net)}, meta=meta)
    elif isinstance(det, SensitivityDetector):
        arrays = {**model_arrays(det.dual, "dual."), **model_arrays(det.net, "net."), **_scaler_arrays(det.scaler)}
        write_arrays(path, "sid", arrays, models={"dual": model_spec(det.dual), "net": model_spec(det.net)}, meta=meta)
    elif isinstance(det, SpamDetector):
        meta["T"] = det.T
        arrays = {**model_arrays(det.net, "net."), **_scaler_arrays(det.scaler)}
        write_arrays(path, "spam", arrays, models={"net": model_spec(det.net)}, meta=meta)
    else:
        raise TypeError(f"cannot persist detector {type(det).__name__}")


def load_detector(path, model: ClassifierModel) -> tuple[Detector, dict]:
    header, arrays = read_arrays(path)
    kind, meta = header["kind"], header["meta"]
    shape = tuple(meta["image_shape"])
    scaler = None
    if "scaler.mean" in arrays:
        scaler = Standardizer(arrays["scaler.mean"], arrays["scaler.scale"])
    if kind == "trapdoor":
        return TrapdoorDetector(model, arrays["signatures"], meta.get("layer_index")), meta
    if kind == "dla":
        net = model_from_arrays(header["models"]["net"], arrays, "net.")
        return DenseLayerDetector(model, net, scaler), meta
    if kind == "sid":
        dual = model_from_arrays(header["models"]["dual"], arrays, "dual.")
        net = model_from_arrays(header["models"]["net"], arrays, "net.")
        return SensitivityDetector(model, dual, net, shape, scaler), meta
    if kind == "spam":
        net = model_from_arrays(header["models"]["net"], arrays, "net.")
        return SpamDetector(net, shape, meta.get("T", 3), scaler), meta
    raise ValueError(f"{path}: unknown detector kind {kind!r}")


def save_defense(defense: Defense, directory) -> None:
    from .nn import save_model

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    save_model(defense.model, directory / CLASSIFIER_FILE, meta={"defense": defense.kind})
    save_detector(defense, directory / DETECTOR_FILE)


def load_defense(directory) -> Defense:
    from .nn import load_model

    directory = Path(directory)
    for name in (CLASSIFIER_FILE, DETECTOR_FILE):
        if not (directory / name).exists():
            raise MissingArtifactError(f"missing artifact: {directory / name}")
    model = load_model(directory / CLASSIFIER_FILE)
    detector, meta = load_detector(directory / DETECTOR_FILE, model)
    return Defense(detector.kind, model, detector, tuple(meta["image_shape"]), meta.get("info", {}))
