"""Defense-versus-attack experiments: grids of cells, reports and replay.

A cell is one (defense, strategy, lambda, epsilon, seed) combination.  Cells
are independent: they may run in a process pool, and the assembled report
is always in grid order, so serial and parallel runs write identical bytes.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .attacks import AttackConfig, perturbation_waste, run_attack_batch, write_outcomes_jsonl
from .data import Dataset, SyntheticSpec, generate, read_csv, write_csv
from .defenses import (
    DEFENSE_KINDS,
    Defense,
    DefenseConfig,
    MissingArtifactError,
    build_defense,
    load_defense,
    save_defense,
    train_classifier,
)
from .metrics import RocCurve, calibrate_phi, roc, success_rate_at
from .nn import TrainConfig

log = logging.getLogger(__name__)

MANIFEST_VERSION = 1
DEFAULT_FPRS = (5, 50)
RESULT_COLUMNS = ("defense", "strategy", "eps", "sr5", "sr50", "auc", "runtime_s")


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass(frozen=True)
class AttackSpec:
    """A strategy with its Lagrange weight (only meaningful for ``joint``)."""

    strategy: str
    lam: float = 0.0

    @property
    def label(self) -> str:
        return f"joint_l{self.lam:g}" if self.strategy == "joint" else self.strategy

    @classmethod
    def parse(cls, text: str) -> AttackSpec:
        """``"selective"`` or ``"joint:0.1"``."""
        name, _, lam = text.partition(":")
        return cls(name, float(lam) if lam else (1.0 if name == "joint" else 0.0))


DEFAULT_ATTACKS = (
    AttackSpec("pgd_classifier_only"),
    AttackSpec("selective"),
    AttackSpec("orthogonal"),
    AttackSpec("joint", 0.1),
    AttackSpec("joint", 1.0),
    AttackSpec("joint", 10.0),
)


@dataclass
class ExperimentConfig:
    defenses: tuple[str, ...] = DEFENSE_KINDS
    attacks: tuple[AttackSpec, ...] = DEFAULT_ATTACKS
    epsilons: tuple[float, ...] = (0.01, 0.031)
    norm: str = "l_inf"
    steps: int = 500
    alpha_fraction: float = 0.04  # alpha = alpha_fraction * epsilon
    detector_interleave_period: int = 1
    seeds: tuple[int, ...] = (0,)
    attack_count: int = 100
    benign_count: int = 500
    fprs: tuple[float, ...] = DEFAULT_FPRS
    dataset: dict = field(default_factory=dict)  # SyntheticSpec overrides; seed comes from `seeds`
    defense_overrides: dict = field(default_factory=dict)  # kind -> DefenseConfig fields
    record_trace: bool = False
    record_runtime: bool = False

    def __post_init__(self):
        self.defenses = tuple(self.defenses)
        self.attacks = tuple(a if isinstance(a, AttackSpec) else
                             AttackSpec(**a) if isinstance(a, dict) else AttackSpec.parse(a) for a in self.attacks)
        self.epsilons = tuple(float(e) for e in self.epsilons)
        self.seeds = tuple(int(s) for s in self.seeds)
        self.fprs = tuple(self.fprs)
        for k in self.defenses:
            if k not in DEFENSE_KINDS:
                raise ValueError(f"unknown defense {k!r}; expected one of {DEFENSE_KINDS}")
        if len(set(self.seeds)) != len(self.seeds):
            raise ValueError("seeds must be distinct")
        if not self.attacks or not self.epsilons or not self.seeds or not self.defenses:
            raise ValueError("experiment grid is empty")
        if self.attack_count < 1 or self.benign_count < 1:
            raise ValueError("attack_count and benign_count must be positive")
        for a in self.attacks:  # fail early on bad strategy names
            self.attack_config(a, self.epsilons[0], 0)

    def attack_config(self, spec: AttackSpec, eps: float, seed: int) -> AttackConfig:
        return AttackConfig(epsilon=eps, norm=self.norm, alpha=max(self.alpha_fraction * eps, 1e-12),
                            steps=self.steps, strategy=spec.strategy, lam=spec.lam, target_seed=seed,
                            detector_interleave_period=self.detector_interleave_period,
                            record_trace=self.record_trace)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["attacks"] = [asdict(a) for a in self.attacks]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> ExperimentConfig:
        return cls(**d)


@dataclass(frozen=True)
class Cell:
    defense: str
    attack: AttackSpec
    eps: float
    seed: int

    @property
    def name(self) -> str:
        return f"{self.defense}_{self.attack.label}_eps{self.eps:g}_s{self.seed}"


def grid(cfg: ExperimentConfig) -> list[Cell]:
    return [Cell(d, a, e, s) for s in cfg.seeds for d in cfg.defenses for e in cfg.epsilons for a in cfg.attacks]


@dataclass
class EvalReport:
    cell: Cell
    sr_at: dict
    phi_at: dict
    auc: float
    clean_accuracy: float
    outcomes: list
    attacked: int
    skipped: int
    roc: RocCurve
    waste: float | None = None
    runtime_s: float | None = None

    @property
    def successes(self) -> int:
        phi = self.phi_at[min(self.phi_at)]
        return sum(o.classified_as_target and o.detector_score <= phi for o in self.outcomes)

    def row(self, fprs=DEFAULT_FPRS) -> dict:
        r = {"defense": self.cell.defense, "strategy": self.cell.attack.label, "eps": f"{self.cell.eps:g}"}
        for n in fprs:
            r[f"sr{n:g}"] = repr(float(self.sr_at[n]))
        r["auc"] = repr(float(self.auc))
        r["runtime_s"] = "" if self.runtime_s is None else f"{self.runtime_s:.3f}"
        return r


# -- data and defenses for one seed ---------------------------------------------


@dataclass
class SeedContext:
    seed: int
    train: Dataset
    test: Dataset
    defenses: dict  # kind -> Defense


def seed_dataset(cfg: ExperimentConfig, seed: int) -> tuple[Dataset, Dataset]:
    return generate(SyntheticSpec(**{**cfg.dataset, "seed": seed}))


def defense_config(cfg: ExperimentConfig, kind: str, seed: int) -> DefenseConfig:
    over = dict(cfg.defense_overrides.get(kind, {}))
    cls_train = {"seed": seed, **over.pop("classifier_train", {})}
    det_train = {"epochs": 60, "batch_size": 64, "seed": seed + 1, **over.pop("detector_train", {})}
    return DefenseConfig(kind, classifier_train=TrainConfig(**cls_train), detector_train=TrainConfig(**det_train),
                         seed=seed, **over)


def build_seed_defenses(cfg: ExperimentConfig, seed: int, train: Dataset) -> dict:
    out = {}
    base = None
    for kind in cfg.defenses:
        dcfg = defense_config(cfg, kind, seed)
        if kind != "trapdoor" and base is None:
            base = train_classifier(train, dcfg)
        out[kind] = build_defense(train, dcfg, classifier=None if kind == "trapdoor" else base)
        log.info("seed %d: built %s defense", seed, kind)
    return out


def split_inputs(cfg: ExperimentConfig, test: Dataset):
    need = cfg.attack_count + cfg.benign_count
    if len(test) < need:
        raise ValueError(f"test split has {len(test)} rows; the experiment needs {need}")
    attack = test.subset(slice(0, cfg.attack_count))
    benign = test.subset(slice(cfg.attack_count, need))
    return attack, benign


# -- running cells ----------------------------------------------------------------


def evaluate_cell(cfg: ExperimentConfig, cell: Cell, defense: Defense, test: Dataset) -> EvalReport:
    """Attack the correctly classified attack inputs and score the outcomes."""
    start = time.perf_counter()
    model, det = defense.model, defense.detector
    attack, benign = split_inputs(cfg, test)
    keep = model.predict(attack.x) == attack.y
    x, y = attack.x[keep], attack.y[keep]
    benign_scores = det.scores(benign.x)
    acfg = cfg.attack_config(cell.attack, cell.eps, cell.seed)
    outcomes = run_attack_batch(x, y, model, det, acfg) if len(x) else []
    adv_scores = np.array([o.detector_score for o in outcomes])
    phi_at = {n: calibrate_phi(benign_scores, n) for n in cfg.fprs}
    sr_at = {n: success_rate_at(outcomes, benign_scores, n) for n in cfg.fprs}
    curve = roc(benign_scores, adv_scores) if len(outcomes) else roc(benign_scores, benign_scores)
    waste = None
    if cfg.record_trace and outcomes:
        phi = phi_at[min(cfg.fprs)]
        waste = float(np.mean([perturbation_waste(o.trace, phi)[1] for o in outcomes]))
    runtime = time.perf_counter() - start if cfg.record_runtime else None
    return EvalReport(cell, sr_at, phi_at, curve.auc, model.accuracy(test.x, test.y), outcomes,
                      int(keep.sum()), int((~keep).sum()), curve, waste, runtime)


def _run_cell_job(args):
    cfg, cell, defense, test = args
    return evaluate_cell(cfg, cell, defense, test)


def run_cells(cfg: ExperimentConfig, cells: list[Cell], contexts: dict, workers: int = 1) -> list[EvalReport]:
    jobs = [(cfg, c, contexts[c.seed].defenses[c.defense], contexts[c.seed].test) for c in cells]
    if workers <= 1 or len(jobs) <= 1:
        return [_run_cell_job(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_run_cell_job, jobs))


# -- persistence -------------------------------------------------------------------


def write_results_csv(reports: list[EvalReport], path, fprs=DEFAULT_FPRS) -> None:
    cols = ["defense", "strategy", "eps", *[f"sr{n:g}" for n in fprs], "auc", "runtime_s"]
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, cols, lineterminator="\n")
        writer.writeheader()
        for r in reports:
            writer.writerow(r.row(fprs))


def write_roc_csv(curve: RocCurve, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["fpr", "tpr"])
        for f, t in curve.points:
            writer.writerow([repr(f), repr(t)])


def _seed_dirs(out: Path, seed: int) -> tuple[Path, Path]:
    return out / "data" / f"s{seed}", out / "defenses" / f"s{seed}"


def _hash_tree(root: Path, paths) -> dict:
    return {str(p.relative_to(root)): sha256_file(p) for p in sorted(paths)}


def _write_reports(cfg: ExperimentConfig, reports: list[EvalReport], out: Path) -> list[Path]:
    written = []
    cells_dir = out / "cells"
    cells_dir.mkdir(parents=True, exist_ok=True)
    for r in reports:
        p_out = cells_dir / f"outcomes_{r.cell.name}.jsonl"
        write_outcomes_jsonl(r.outcomes, p_out)
        p_roc = out / f"roc_{r.cell.name}.csv"
        write_roc_csv(r.roc, p_roc)
        written += [p_out, p_roc]
    p_res = out / "results.csv"
    write_results_csv(reports, p_res, cfg.fprs)
    written.append(p_res)
    return written


def run_experiment(cfg: ExperimentConfig, out_dir, workers: int = 1) -> list[EvalReport]:
    """Train (per seed) every requested defense, run the grid, persist everything.

    Writes ``results.csv``, one ``roc_<cell>.csv`` per cell, per-cell outcome
    files, the datasets and defense weights used, and ``manifest.json`` with
    the config and SHA-256 hashes of every file for :func:`replay`.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    contexts = {}
    inputs = []
    for seed in cfg.seeds:
        train, test = seed_dataset(cfg, seed)
        defenses = build_seed_defenses(cfg, seed, train)
        data_dir, def_dir = _seed_dirs(out, seed)
        data_dir.mkdir(parents=True, exist_ok=True)
        write_csv(test, data_dir / "test.csv")
        inputs.append(data_dir / "test.csv")
        for kind, d in defenses.items():
            save_defense(d, def_dir / kind)
            inputs += sorted((def_dir / kind).iterdir())
        # reload so the run uses exactly what a replay will read
        test = read_csv(data_dir / "test.csv")
        defenses = {k: load_defense(def_dir / k) for k in defenses}
        contexts[seed] = SeedContext(seed, train, test, defenses)
    reports = run_cells(cfg, grid(cfg), contexts, workers)
    outputs = _write_reports(cfg, reports, out)
    manifest = {
        "format_version": MANIFEST_VERSION,
        "config": cfg.to_dict(),
        "seeds": list(cfg.seeds),
        "cells": [r.cell.name for r in reports],
        "inputs": _hash_tree(out, inputs),
        "outputs": _hash_tree(out, [p for p in outputs if p.name != "results.csv" or not cfg.record_runtime]),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return reports


# -- replay -----------------------------------------------------------------------


class ManifestError(ValueError):
    pass


@dataclass
class ReplayResult:
    matched: list[str]
    mismatched: list[str]
    reports: list[EvalReport]

    @property
    def ok(self) -> bool:
        return not self.mismatched


def load_manifest(path) -> tuple[dict, ExperimentConfig]:
    """Parse and validate a manifest; every referenced input must exist with its recorded hash."""
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(f"missing artifact: {path}")
    try:
        manifest = json.loads(path.read_text())
        cfg = ExperimentConfig.from_dict(manifest["config"])
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise ManifestError(f"{path}: invalid manifest ({exc})") from None
    if manifest.get("format_version") != MANIFEST_VERSION:
        raise ManifestError(f"{path}: unsupported manifest version {manifest.get('format_version')}")
    root = path.parent
    for rel, digest in manifest["inputs"].items():
        p = root / rel
        if not p.exists():
            raise MissingArtifactError(f"missing artifact: {p}")
        if sha256_file(p) != digest:
            raise ManifestError(f"{p}: hash does not match the manifest")
    return manifest, cfg


def replay(manifest_path, out_dir, cells: list[str] | None = None, workers: int = 1) -> ReplayResult:
    """Re-run recorded cells from the stored data and weights and compare output hashes."""
    manifest, cfg = load_manifest(manifest_path)
    root = Path(manifest_path).parent
    by_name = {c.name: c for c in grid(cfg)}
    wanted = cells or manifest["cells"]
    unknown = [c for c in wanted if c not in by_name]
    if unknown:
        raise ManifestError(f"cells not in the manifest: {', '.join(unknown)}")
    chosen = [by_name[c] for c in wanted]
    contexts = {}
    for seed in sorted({c.seed for c in chosen}):
        data_dir, def_dir = _seed_dirs(root, seed)
        test = read_csv(data_dir / "test.csv")
        kinds = sorted({c.defense for c in chosen if c.seed == seed})
        contexts[seed] = SeedContext(seed, None, test, {k: load_defense(def_dir / k) for k in kinds})
    reports = run_cells(cfg, chosen, contexts, workers)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = _write_reports(cfg, reports, out)
    matched, mismatched = [], []
    for p in written:
        rel = str(p.relative_to(out))
        if rel == "results.csv" and (cells or cfg.record_runtime):
            continue  # a partial or timed table is not comparable byte for byte
        expected = manifest["outputs"].get(rel)
        (matched if expected == sha256_file(p) else mismatched).append(rel)
    return ReplayResult(matched, mismatched, reports)
