"""``orthopgd`` command line: data generation, training, attacks, reports, experiments.

Exit codes: 0 success, 1 usage or invalid input, 2 missing artifact,
3 numeric failure (including a replay that does not reproduce).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import harness
from .attacks import STRATEGIES, AttackConfig, read_outcomes_jsonl, run_attack_batch, write_outcomes_jsonl, write_trace_csv
from .data import SyntheticSpec, generate, read_csv, write_csv
from .defenses import (
    CLASSIFIER_FILE,
    DETECTOR_FILE,
    Defense,
    DefenseConfig,
    MissingArtifactError,
    build_defense,
    load_defense,
    save_defense,
    train_classifier,
)
from .detectors import ZeroDetector
from .metrics import calibrate_phi, roc, success_rate_at
from .nn import TrainConfig, load_model, mean_loss, save_model
from .tensor import NumericError

log = logging.getLogger("orthopgd")

ENV_OUT = "ORTHOPGD_OUT"
ENV_THREADS = "ORTHOPGD_THREADS"

EXIT_OK, EXIT_USAGE, EXIT_MISSING, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


def _out_dir(args, default: str) -> Path:
    return Path(args.out or os.environ.get(ENV_OUT) or default)


def _threads(args) -> int:
    if getattr(args, "workers", None):
        return args.workers
    raw = os.environ.get(ENV_THREADS, "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise UsageError(f"{ENV_THREADS} must be an integer, got {raw!r}") from None


def _require(path: Path) -> Path:
    if not path.exists():
        raise MissingArtifactError(f"missing artifact: {path}")
    return path


def _load_split(data_dir: Path, split: str):
    return read_csv(_require(data_dir / f"{split}.csv"))


def _train_flags(args) -> dict:
    return {f.name: getattr(args, f.name) for f in fields(TrainConfig) if getattr(args, f.name, None) is not None}


def _add_train_flags(p):
    g = p.add_argument_group("training (TrainConfig)")
    g.add_argument("--epochs", type=int)
    g.add_argument("--batch-size", dest="batch_size", type=int)
    g.add_argument("--learning-rate", dest="learning_rate", type=float)
    g.add_argument("--seed", type=int)
    g.add_argument("--optimizer", choices=("adam", "sgd"))


# -- gen-data ------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    spec = SyntheticSpec(class_count=args.classes, size=args.size, contrast=args.contrast, jitter=args.jitter,
                         noise=args.noise, train_count=args.train_count, test_count=args.test_count, seed=args.seed)
    train, test = generate(spec)  # validates the spec before anything is written
    out = _out_dir(args, "data")
    out.mkdir(parents=True, exist_ok=True)
    write_csv(train, out / "train.csv")
    write_csv(test, out / "test.csv")
    (out / "data.json").write_text(json.dumps(vars(spec), indent=2, sort_keys=True) + "\n")
    print(f"wrote {len(train)} train and {len(test)} test images ({spec.size}x{spec.size}, "
          f"{spec.class_count} classes) to {out}")
    return EXIT_OK


# -- train ---------------------------------------------------------------------


def _write_log(path: Path, losses) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "loss"])
        for i, v in enumerate(losses, start=1):
            w.writerow([i, repr(float(v))])


def cmd_train(args) -> int:
    data_dir = Path(args.data)
    train_set = _load_split(data_dir, "train")
    test_set = _load_split(data_dir, "test")
    flags = _train_flags(args)
    tcfg = TrainConfig(**flags)
    out = _out_dir(args, args.kind)
    classifier = None
    if args.kind in ("dla", "sid", "spam"):
        if not args.classifier:
            raise MissingArtifactError(f"{args.kind} needs a trained classifier: pass --classifier DIR "
                                       f"containing {CLASSIFIER_FILE}")
        classifier = load_model(_require(Path(args.classifier) / CLASSIFIER_FILE))
    over = {}
    for name in ("pgd_epsilon", "pgd_steps", "pgd_samples", "patch_size", "patch_opacity", "inject_ratio"):
        if getattr(args, name, None) is not None:
            over[name] = getattr(args, name)
    if args.kind == "classifier":
        from .nn import ClassifierModel, train

        init = ClassifierModel.init([train_set.x.shape[1], 128, 64, train_set.class_count], seed=tcfg.seed)
        result = train(init, train_set, tcfg)
        out.mkdir(parents=True, exist_ok=True)
        save_model(result.model, out / CLASSIFIER_FILE)
        _write_log(out / "train_log.csv", result.losses)
        print(f"classifier: final loss {result.losses[-1]:.4f}, "
              f"test accuracy {result.model.accuracy(test_set.x, test_set.y):.4f}")
        return EXIT_OK
    # flags configure the trained network: the classifier for trapdoor, the detector otherwise
    if args.kind == "trapdoor":
        over["classifier_train"] = tcfg
    else:
        over["detector_train"] = TrainConfig(**{"epochs": 60, "seed": tcfg.seed + 1, **flags})
    dcfg = DefenseConfig(args.kind, seed=tcfg.seed, **over)
    defense = build_defense(train_set, dcfg, classifier=classifier)
    out.mkdir(parents=True, exist_ok=True)
    save_defense(defense, out)
    if args.kind == "trapdoor":
        np.savetxt(out / "signatures.csv", defense.detector.signatures, delimiter=",", fmt="%.17g")
    benign = defense.detector.scores(test_set.x[:500])
    print(f"{args.kind}: clean accuracy {defense.model.accuracy(test_set.x, test_set.y):.4f}, "
          f"benign score mean {benign.mean():.4f}, classifier loss {mean_loss(defense.model, test_set.x, test_set.y):.4f}")
    return EXIT_OK


# -- attack ---------------------------------------------------------------------


def _attack_config(args) -> AttackConfig:
    kw = {}
    for f in fields(AttackConfig):
        v = getattr(args, f.name, None)
        if v is not None:
            kw[f.name] = v
    return AttackConfig(**kw)


def _defense_for(path: Path) -> Defense:
    if (path / DETECTOR_FILE).exists():
        return load_defense(path)
    model = load_model(_require(path / CLASSIFIER_FILE))
    return Defense("none", model, ZeroDetector(), (0, 0))


def cmd_attack(args) -> int:
    cfg = _attack_config(args)
    defense = _defense_for(Path(args.defense))
    test = _load_split(Path(args.data), args.split)
    x, y = test.x[args.start : args.start + args.count], test.y[args.start : args.start + args.count]
    keep = defense.model.predict(x) == y
    out = Path(args.out or os.environ.get(ENV_OUT) or "outcomes.jsonl")
    if out.suffix != ".jsonl":
        out = out / "outcomes.jsonl"
    outcomes = run_attack_batch(x[keep], y[keep], defense.model, defense.detector, cfg) if keep.any() else []
    out.parent.mkdir(parents=True, exist_ok=True)
    write_outcomes_jsonl(outcomes, out)
    if cfg.record_trace and args.trace_dir:
        tdir = Path(args.trace_dir)
        tdir.mkdir(parents=True, exist_ok=True)
        for i, o in enumerate(outcomes):
            write_trace_csv(o.trace, tdir / f"trace_{i:05d}.csv")
    hits = sum(o.classified_as_target for o in outcomes)
    print(f"attacked {len(outcomes)} inputs ({int((~keep).sum())} skipped as misclassified); "
          f"{hits} reached their target; outcomes in {out}")
    return EXIT_OK


# -- score / report ----------------------------------------------------------------


def cmd_score(args) -> int:
    defense = _defense_for(Path(args.defense))
    test = _load_split(Path(args.data), args.split)
    scores = defense.detector.scores(test.x[args.start : args.start + args.count])
    out = Path(args.out or os.environ.get(ENV_OUT) or "benign_scores.csv")
    out.parent.mkdir(parents=True, exist_ok=True)
    _write_scores(out, scores)
    print(f"wrote {len(scores)} benign scores to {out}")
    return EXIT_OK


def _write_scores(path: Path, scores) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["score"])
        for s in scores:
            w.writerow([repr(float(s))])


def read_scores(path) -> np.ndarray:
    path = _require(Path(path))
    values = []
    with open(path, newline="") as fh:
        for lineno, rec in enumerate(csv.reader(fh), start=1):
            if not rec or (lineno == 1 and rec[0] == "score"):
                continue
            try:
                values.append(float(rec[0]))
            except ValueError:
                raise ValueError(f"{path}:{lineno}: not a number: {rec[0]!r}") from None
    if not values:
        raise ValueError(f"{path}: no scores")
    return np.asarray(values)


def cmd_report(args) -> int:
    outcomes = read_outcomes_jsonl(_require(Path(args.outcomes)))
    benign = read_scores(args.benign)
    fprs = tuple(args.n)
    out = _out_dir(args, "report")
    name = args.name or Path(args.outcomes).stem
    adv = np.array([o["detector_score"] for o in outcomes])
    curve = roc(benign, adv if len(adv) else benign)
    out.mkdir(parents=True, exist_ok=True)
    row = {"defense": args.defense_name, "strategy": args.strategy_name, "eps": args.eps}
    for n in fprs:
        row[f"sr{n:g}"] = repr(success_rate_at(outcomes, benign, n))
    row["auc"] = repr(curve.auc)
    row["runtime_s"] = ""
    path = out / "results.csv"
    new = not path.exists()
    with open(path, "a", newline="") as fh:
        w = csv.DictWriter(fh, list(row), lineterminator="\n")
        if new:
            w.writeheader()
        w.writerow(row)
    harness.write_roc_csv(curve, out / f"roc_{name}.csv")
    phis = ", ".join(f"phi@{n:g}={calibrate_phi(benign, n):.4g}" for n in fprs)
    srs = ", ".join(f"SR@{n:g}={row[f'sr{n:g}']}" for n in fprs)
    print(f"{name}: {srs}, AUC={curve.auc:.4f} ({phis})")
    return EXIT_OK


# -- experiment / replay -------------------------------------------------------------


def _experiment_config(args) -> harness.ExperimentConfig:
    d = {}
    if args.config:
        d = json.loads(_require(Path(args.config)).read_text())
    for name in ("defenses", "attacks", "epsilons", "seeds"):
        v = getattr(args, name)
        if v:
            d[name] = v
    for name in ("steps", "attack_count", "benign_count", "norm", "alpha_fraction"):
        v = getattr(args, name)
        if v is not None:
            d[name] = v
    if args.trace:
        d["record_trace"] = True
    if args.timing:
        d["record_runtime"] = True
    try:
        return harness.ExperimentConfig.from_dict(d)
    except TypeError as exc:
        raise UsageError(f"bad experiment config: {exc}") from None


def cmd_experiment(args) -> int:
    cfg = _experiment_config(args)
    out = _out_dir(args, "experiment")
    reports = harness.run_experiment(cfg, out, workers=_threads(args))
    for r in reports:
        extra = "" if r.waste is None else f" waste={r.waste:.3f}"
        print(f"{r.cell.name}: " + " ".join(f"SR@{n:g}={r.sr_at[n]:.3f}" for n in cfg.fprs)
              + f" AUC={r.auc:.3f} attacked={r.attacked} skipped={r.skipped}{extra}")
    print(f"results in {out / 'results.csv'}; manifest {out / 'manifest.json'}")
    return EXIT_OK


def cmd_replay(args) -> int:
    manifest = Path(args.manifest)
    harness.load_manifest(manifest)  # validate before creating any output
    out = _out_dir(args, str(manifest.parent / "replay"))
    result = harness.replay(manifest, out, cells=args.cell or None, workers=_threads(args))
    for rel in result.mismatched:
        print(f"MISMATCH {rel}", file=sys.stderr)
    print(f"replayed {len(result.reports)} cells: {len(result.matched)} files identical, "
          f"{len(result.mismatched)} differ")
    return EXIT_OK if result.ok else EXIT_NUMERIC


# -- parser ------------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="orthopgd", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write a seeded synthetic train/test split as CSV")
    g.add_argument("--classes", type=int, default=10)
    g.add_argument("--size", type=int, default=16)
    g.add_argument("--contrast", type=float, default=SyntheticSpec.contrast)
    g.add_argument("--jitter", type=float, default=SyntheticSpec.jitter)
    g.add_argument("--noise", type=float, default=SyntheticSpec.noise)
    g.add_argument("--train-count", type=int, default=3000)
    g.add_argument("--test-count", type=int, default=1000)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a classifier or one of the four defenses")
    t.add_argument("kind", choices=("classifier", "trapdoor", "dla", "sid", "spam"))
    t.add_argument("--data", required=True, help="directory with train.csv and test.csv")
    t.add_argument("--classifier", help="directory holding a trained classifier (dla, sid, spam)")
    t.add_argument("--out")
    _add_train_flags(t)
    t.add_argument("--pgd-epsilon", dest="pgd_epsilon", type=float)
    t.add_argument("--pgd-steps", dest="pgd_steps", type=int)
    t.add_argument("--pgd-samples", dest="pgd_samples", type=int)
    t.add_argument("--patch-size", dest="patch_size", type=int)
    t.add_argument("--patch-opacity", dest="patch_opacity", type=float)
    t.add_argument("--inject-ratio", dest="inject_ratio", type=float)
    t.set_defaults(func=cmd_train)

    a = sub.add_parser("attack", help="attack test inputs; writes JSON-lines outcomes")
    a.add_argument("--defense", required=True, help="defense directory (or a bare classifier directory)")
    a.add_argument("--data", required=True)
    a.add_argument("--split", default="test")
    a.add_argument("--start", type=int, default=0)
    a.add_argument("--count", type=int, default=100)
    a.add_argument("--out")
    a.add_argument("--trace-dir", dest="trace_dir")
    a.add_argument("--epsilon", type=float, required=True)
    a.add_argument("--norm", choices=("l_inf", "l2"))
    a.add_argument("--alpha", type=float)
    a.add_argument("--steps", type=int)
    a.add_argument("--strategy", choices=STRATEGIES)
    a.add_argument("--lam", type=float)
    a.add_argument("--target-rule", dest="target_rule", choices=("uniform_random_wrong", "fixed"))
    a.add_argument("--target-seed", "--seed", dest="target_seed", type=int)
    a.add_argument("--fixed-target", dest="fixed_target", type=int)
    a.add_argument("--detector-interleave-period", dest="detector_interleave_period", type=int)
    a.add_argument("--random-start", dest="random_start", action="store_true", default=None)
    a.add_argument("--untargeted", dest="targeted", action="store_false", default=None)
    a.add_argument("--record-trace", dest="record_trace", action="store_true", default=None)
    a.set_defaults(func=cmd_attack)

    s = sub.add_parser("score", help="write detector scores of benign inputs")
    s.add_argument("--defense", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--split", default="test")
    s.add_argument("--start", type=int, default=100, help="first benign row; attacks use the rows before it")
    s.add_argument("--count", type=int, default=500)
    s.add_argument("--out")
    s.set_defaults(func=cmd_score)

    r = sub.add_parser("report", help="SR@N, AUC and ROC points from outcomes and benign scores")
    r.add_argument("--outcomes", required=True)
    r.add_argument("--benign", required=True, help="CSV of benign detector scores")
    r.add_argument("--n", type=float, nargs="+", default=[5, 50], help="false-positive rates in percent")
    r.add_argument("--name", help="cell name used in roc_<name>.csv")
    r.add_argument("--defense-name", default="")
    r.add_argument("--strategy-name", default="")
    r.add_argument("--eps", default="")
    r.add_argument("--out")
    r.set_defaults(func=cmd_report)

    e = sub.add_parser("experiment", help="run a defense x attack x epsilon x seed grid")
    e.add_argument("--config", help="JSON file with ExperimentConfig fields")
    e.add_argument("--defenses", nargs="+")
    e.add_argument("--attacks", nargs="+", help="strategy names; joint takes a weight as joint:0.1")
    e.add_argument("--epsilons", type=float, nargs="+")
    e.add_argument("--seeds", type=int, nargs="+")
    e.add_argument("--steps", type=int)
    e.add_argument("--alpha-fraction", dest="alpha_fraction", type=float)
    e.add_argument("--norm", choices=("l_inf", "l2"))
    e.add_argument("--attack-count", dest="attack_count", type=int)
    e.add_argument("--benign-count", dest="benign_count", type=int)
    e.add_argument("--trace", action="store_true", help="record traces and report perturbation waste")
    e.add_argument("--timing", action="store_true", help="fill runtime_s (not byte-reproducible)")
    e.add_argument("--workers", type=int)
    e.add_argument("--out")
    e.set_defaults(func=cmd_experiment)

    rp = sub.add_parser("replay", help="re-run cells from a manifest and compare output hashes")
    rp.add_argument("manifest")
    rp.add_argument("--cell", action="append", help="replay only this cell (repeatable)")
    rp.add_argument("--workers", type=int)
    rp.add_argument("--out")
    rp.set_defaults(func=cmd_replay)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except MissingArtifactError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except (NumericError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (UsageError, ValueError, KeyError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
