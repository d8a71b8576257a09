"""Projected gradient attacks against a classifier guarded by a detector.

Four update rules share one projected iteration:

``pgd_classifier_only``
    descend the target-class cross entropy ``L(f, x, t)`` only.
``joint``
    descend ``L(f, x, t) + lam * g(x)`` (the Lagrangian baseline).
``selective``
    descend ``L`` while ``f(x) != t``, otherwise descend ``g``.
``orthogonal``
    as selective, but the chosen gradient first has its component along the
    other objective's gradient removed, so a step on one objective leaves the
    other unchanged to first order.

All rows of a batch are attacked independently; every per-row quantity
(branch choice, orthogonalisation, step normalisation) is computed per row.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .detectors.base import Detector
from .nn import ClassifierModel
from .tensor import GradTape, NumericError, Tensor, softmax_cross_entropy, sum_

STRATEGIES = ("pgd_classifier_only", "joint", "selective", "orthogonal")
NORMS = ("l_inf", "l2")
TARGET_RULES = ("uniform_random_wrong", "fixed")
GRAD_FLOOR = 1e-12

BRANCH_F, BRANCH_G, BRANCH_JOINT = 0, 1, 2
BRANCH_NAMES = {BRANCH_F: "f", BRANCH_G: "g", BRANCH_JOINT: "joint"}


@dataclass
class AttackConfig:
    epsilon: float
    norm: str = "l_inf"
    alpha: float = 0.002
    steps: int = 500
    strategy: str = "orthogonal"
    lam: float = 1.0
    target_rule: str = "uniform_random_wrong"
    target_seed: int = 0
    fixed_target: int | None = None
    detector_interleave_period: int = 1
    random_start: bool = False
    targeted: bool = True
    record_trace: bool = False

    def __post_init__(self):
        if self.epsilon < 0:
            raise ValueError("epsilon must be non-negative")
        if self.alpha <= 0:
            raise ValueError("alpha must be positive")
        if self.steps < 0:
            raise ValueError("steps must be non-negative")
        if self.norm not in NORMS:
            raise ValueError(f"norm must be one of {NORMS}")
        if self.strategy not in STRATEGIES:
            raise ValueError(f"strategy must be one of {STRATEGIES}")
        if self.lam < 0:
            raise ValueError("lam must be non-negative")
        if self.target_rule not in TARGET_RULES:
            raise ValueError(f"target_rule must be one of {TARGET_RULES}")
        if self.target_rule == "fixed" and self.fixed_target is None:
            raise ValueError("target_rule 'fixed' needs fixed_target")
        if self.detector_interleave_period < 1:
            raise ValueError("detector_interleave_period must be >= 1")

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> AttackConfig:
        return cls(**json.loads(text))


@dataclass
class Trace:
    """Per-step record for one attacked input.

    ``loss_f``, ``score_g``, ``margin_f`` describe iterates ``0..n`` (one more
    entry than there are steps); ``branch`` and ``cosine_to_other`` describe
    steps ``0..n-1``.  ``margin_f`` is ``max_{j != t} z_j - z_t`` and is
    non-positive exactly when the iterate is classified as the target.
    """

    loss_f: np.ndarray
    score_g: np.ndarray
    margin_f: np.ndarray
    branch: np.ndarray
    cosine_to_other: np.ndarray

    def __len__(self) -> int:
        return len(self.branch)

    def rows(self):
        for i in range(len(self)):
            yield {
                "step": i,
                "loss_f": float(self.loss_f[i]),
                "score_g": float(self.score_g[i]),
                "branch": BRANCH_NAMES[int(self.branch[i])],
                "cosine_to_other": float(self.cosine_to_other[i]),
            }

    @classmethod
    def empty(cls) -> Trace:
        z = np.zeros(0)
        return cls(z, z, z, np.zeros(0, np.intp), z)


@dataclass
class AttackOutcome:
    x_adv: np.ndarray
    label: int
    target: int
    classified_as_target: bool
    detector_score: float
    iterations_used: int
    stalled: bool = False
    trace: Trace | None = None

    @property
    def predicted(self) -> bool:
        return self.classified_as_target

    def to_record(self) -> dict:
        """JSON-safe summary (the adversarial input is included as a list)."""
        return {
            "label": int(self.label),
            "target": int(self.target),
            "classified_as_target": bool(self.classified_as_target),
            "detector_score": float(self.detector_score),
            "iterations_used": int(self.iterations_used),
            "stalled": bool(self.stalled),
            "x_adv": [float(v) for v in self.x_adv],
        }


def write_trace_csv(trace: Trace, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, ["step", "loss_f", "score_g", "branch", "cosine_to_other"], lineterminator="\n")
        writer.writeheader()
        for row in trace.rows():
            writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})


# -- geometry ----------------------------------------------------------------


def _rowdot(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.einsum("ij,ij->i", a, b)


def project(x_adv, x_orig, epsilon: float, norm: str = "l_inf") -> np.ndarray:
    """Project onto the epsilon-ball around ``x_orig`` intersected with ``[0, 1]``.

    Rows are treated as independent inputs when the arrays are 2-d.
    """
    x_adv = np.asarray(x_adv, dtype=np.float64)
    x_orig = np.asarray(x_orig, dtype=np.float64)
    if x_adv.shape != x_orig.shape:
        raise ValueError(f"shapes differ: {x_adv.shape} vs {x_orig.shape}")
    if norm == "l_inf":
        out = np.clip(x_adv, x_orig - epsilon, x_orig + epsilon)
    elif norm == "l2":
        delta = np.atleast_2d(x_adv - x_orig)
        norms = np.linalg.norm(delta, axis=1, keepdims=True)
        factor = np.where(norms > epsilon, epsilon / np.where(norms > 0, norms, 1.0), 1.0)
        out = (np.atleast_2d(x_orig) + delta * factor).reshape(x_orig.shape)
    else:
        raise ValueError(f"unknown norm {norm!r}")
    return np.clip(out, 0.0, 1.0)


def orthogonal_component(a, b) -> np.ndarray:
    """``a - (<a, b> / <b, b>) b``, row-wise for 2-d input; ``a`` itself where ``|b| < 1e-12``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shapes differ: {a.shape} vs {b.shape}")
    a2, b2 = np.atleast_2d(a), np.atleast_2d(b)
    bb = _rowdot(b2, b2)
    live = np.sqrt(bb) >= GRAD_FLOOR
    coef = np.where(live, _rowdot(a2, b2) / np.where(live, bb, 1.0), 0.0)
    out = np.where(live[:, None], a2 - coef[:, None] * b2, a2)
    return out.reshape(a.shape)


def _cosine_rows(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    na = np.linalg.norm(a, axis=1)
    nb = np.linalg.norm(b, axis=1)
    ok = (na > 0) & (nb > 0)
    return np.where(ok, _rowdot(a, b) / np.where(ok, na * nb, 1.0), 0.0)


def _step_vector(v: np.ndarray, alpha: float, norm: str) -> np.ndarray:
    if norm == "l_inf":
        return -alpha * np.sign(v)
    n = np.linalg.norm(v, axis=1, keepdims=True)
    return np.where(n > 0, -alpha * v / np.where(n > 0, n, 1.0), 0.0)


# -- objectives --------------------------------------------------------------


@dataclass
class _Probe:
    logits: np.ndarray
    loss: np.ndarray  # per-row objective on f (cross entropy, sign-adjusted when untargeted)
    score: np.ndarray
    grad_f: np.ndarray | None = None
    grad_g: np.ndarray | None = None


def _probe(x: np.ndarray, model: ClassifierModel, detector: Detector, goal: np.ndarray, targeted: bool,
           need_f: bool, need_g: bool) -> _Probe:
    sign = 1.0 if targeted else -1.0
    tape = GradTape()
    if need_f:
        xt = tape.watch(x)
        logits_t = model.forward(xt)
        per_row = softmax_cross_entropy(logits_t, goal, reduction="none")
        loss_vals = sign * per_row.data
        logits = logits_t.data
        (grad_f,) = tape.gradient(sum_(per_row) * sign, [xt])
    else:
        logits = model.logits(x)
        loss_vals = sign * softmax_cross_entropy(Tensor(logits), goal, reduction="none").data
        grad_f = None
    if need_g:
        xt = tape.watch(x)
        s = detector.score(xt)
        score = s.data.copy()
        (grad_g,) = tape.gradient(sum_(s), [xt])
    else:
        score = detector.scores(x)
        grad_g = None
    for name, g in (("classifier", grad_f), ("detector", grad_g)):
        if g is not None and not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite {name} gradient during attack")
    return _Probe(logits, loss_vals, np.asarray(score, dtype=np.float64), grad_f, grad_g)


def _margin(logits: np.ndarray, target: np.ndarray) -> np.ndarray:
    rows = np.arange(len(logits))
    others = logits.copy()
    others[rows, target] = -np.inf
    return others.max(axis=1) - logits[rows, target]


def choose_targets(labels, class_count: int, cfg: AttackConfig, seeds=None) -> np.ndarray:
    """Targets per ``cfg.target_rule``; random targets are uniform over the wrong labels.

    ``seeds`` optionally gives one integer per row so that a row's target does
    not depend on which other rows share its batch.
    """
    labels = np.asarray(labels, dtype=np.intp)
    if cfg.target_rule == "fixed":
        return np.full(len(labels), int(cfg.fixed_target), dtype=np.intp)
    if seeds is None:
        offsets = np.random.default_rng(cfg.target_seed).integers(1, class_count, size=len(labels))
    else:
        offsets = np.array(
            [np.random.default_rng([cfg.target_seed, int(s)]).integers(1, class_count) for s in seeds], dtype=np.intp
        )
    return (labels + offsets) % class_count


# -- single steps ------------------------------------------------------------


def _direction(strategy: str, grad_f, grad_g, satisfied: np.ndarray, lam: float):
    """Update direction (to be descended) and the branch taken, per row."""
    b = len(satisfied)
    if strategy == "pgd_classifier_only":
        return grad_f, np.full(b, BRANCH_F)
    if strategy == "joint":
        return grad_f + lam * grad_g, np.full(b, BRANCH_JOINT)
    if strategy == "selective":
        return np.where(satisfied[:, None], grad_g, grad_f), np.where(satisfied, BRANCH_G, BRANCH_F)
    if strategy == "orthogonal":
        on_f = orthogonal_component(grad_f, grad_g)
        on_g = orthogonal_component(grad_g, grad_f)
        return np.where(satisfied[:, None], on_g, on_f), np.where(satisfied, BRANCH_G, BRANCH_F)
    raise ValueError(f"unknown strategy {strategy!r}")


def _satisfied(logits: np.ndarray, goal: np.ndarray, targeted: bool) -> np.ndarray:
    pred = np.argmax(logits, axis=1)
    return pred == goal if targeted else pred != goal


def _step(x_i, x_orig, model, detector, goal, cfg: AttackConfig, strategy: str, lam: float = 0.0,
          force_g: bool = False) -> np.ndarray:
    x_i = np.atleast_2d(np.asarray(x_i, dtype=np.float64))
    x_orig = np.atleast_2d(np.asarray(x_orig, dtype=np.float64))
    goal = np.atleast_1d(np.asarray(goal, dtype=np.intp))
    need_g = strategy != "pgd_classifier_only"
    p = _probe(x_i, model, detector, goal, cfg.targeted, True, need_g)
    grad_g = p.grad_g if need_g else np.zeros_like(p.grad_f)
    sat = _satisfied(p.logits, goal, cfg.targeted) | force_g
    v, _ = _direction(strategy, p.grad_f, grad_g, sat, lam)
    return project(x_i + _step_vector(v, cfg.alpha, cfg.norm), x_orig, cfg.epsilon, cfg.norm)


def step_classifier_only(x_i, x_orig, model, detector, t, cfg: AttackConfig) -> np.ndarray:
    return _step(x_i, x_orig, model, detector, t, cfg, "pgd_classifier_only")


def step_joint(x_i, x_orig, model, detector, t, lam: float, cfg: AttackConfig) -> np.ndarray:
    """One projected step on ``L(f, x, t) + lam * g(x)``."""
    return _step(x_i, x_orig, model, detector, t, cfg, "joint", lam)


def step_selective(x_i, x_orig, model, detector, t, cfg: AttackConfig) -> np.ndarray:
    return _step(x_i, x_orig, model, detector, t, cfg, "selective")


def step_orthogonal(x_i, x_orig, model, detector, t, cfg: AttackConfig, force_detector: bool = False) -> np.ndarray:
    return _step(x_i, x_orig, model, detector, t, cfg, "orthogonal", force_g=force_detector)


# -- full runs ---------------------------------------------------------------


def run_attack_batch(x, labels, model: ClassifierModel, detector: Detector, cfg: AttackConfig,
                     targets=None, start_seed: int = 0) -> list[AttackOutcome]:
    """Attack every row of ``x``; returns one outcome per row.

    The returned iterate is the one classified as the target with the lowest
    detector score seen during the run, or the final iterate if the target was
    never reached.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    labels = np.atleast_1d(np.asarray(labels, dtype=np.intp))
    b = len(x)
    if targets is None:
        targets = choose_targets(labels, model.class_count, cfg)
    targets = np.atleast_1d(np.asarray(targets, dtype=np.intp))
    goal = targets if cfg.targeted else labels
    strategy = cfg.strategy
    need_g = strategy != "pgd_classifier_only"

    x_i = x.copy()
    if cfg.random_start and cfg.epsilon > 0:
        rng = np.random.default_rng(start_seed)
        noise = rng.uniform(-cfg.epsilon, cfg.epsilon, size=x.shape)
        x_i = project(x + noise, x, cfg.epsilon, cfg.norm)

    best_x = x_i.copy()
    best_score = np.full(b, np.inf)
    found = np.zeros(b, dtype=bool)
    active = np.ones(b, dtype=bool)
    stalled = np.zeros(b, dtype=bool)
    used = np.zeros(b, dtype=np.intp)

    record = cfg.record_trace
    n = cfg.steps
    if record:
        t_loss = np.zeros((n + 1, b))
        t_score = np.zeros((n + 1, b))
        t_margin = np.zeros((n + 1, b))
        t_branch = np.zeros((n, b), dtype=np.intp)
        t_cos = np.zeros((n, b))

    def consider(p: _Probe, xs: np.ndarray):
        hit = _satisfied(p.logits, goal, cfg.targeted)
        # ties go to the later iterate, so a constant detector yields plain PGD's final point
        better = hit & (p.score <= best_score)
        best_x[better] = xs[better]
        best_score[better] = p.score[better]
        found[:] |= hit

    for i in range(n):
        if not active.any():
            break
        p = _probe(x_i, model, detector, goal, cfg.targeted, True, need_g)
        consider(p, x_i)
        grad_f = p.grad_f
        grad_g = p.grad_g if need_g else np.zeros_like(grad_f)
        sat = _satisfied(p.logits, goal, cfg.targeted)
        if cfg.detector_interleave_period > 1 and (i + 1) % cfg.detector_interleave_period == 0:
            sat = np.ones(b, dtype=bool)
        v, branch = _direction(strategy, grad_f, grad_g, sat, cfg.lam)
        if strategy == "orthogonal":
            dead = (np.linalg.norm(grad_f, axis=1) < GRAD_FLOOR) & (np.linalg.norm(grad_g, axis=1) < GRAD_FLOOR)
            stalled |= dead & active
            active &= ~dead
        step = _step_vector(v, cfg.alpha, cfg.norm)
        step[~active] = 0.0
        if record:
            other = np.where((branch == BRANCH_G)[:, None], grad_f, grad_g)
            t_loss[i], t_score[i], t_margin[i] = p.loss, p.score, _margin(p.logits, targets)
            t_branch[i] = branch
            t_cos[i] = _cosine_rows(step, other)
        used += active
        x_i = np.where(active[:, None], project(x_i + step, x, cfg.epsilon, cfg.norm), x_i)

    final = _probe(x_i, model, detector, goal, cfg.targeted, False, False)
    consider(final, x_i)
    if record:
        # rows that stalled keep the state recorded when they froze
        t_loss[n], t_score[n], t_margin[n] = final.loss, final.score, _margin(final.logits, targets)

    out_x = np.where(found[:, None], best_x, x_i)
    # score and classify the returned iterate afresh
    out_logits = model.logits(out_x)
    out_scores = detector.scores(out_x)
    hit = np.argmax(out_logits, axis=1) == targets
    outcomes = []
    for r in range(b):
        trace = None
        if record:
            k = int(used[r])
            trace = Trace(
                t_loss[: k + 1, r].copy(), t_score[: k + 1, r].copy(), t_margin[: k + 1, r].copy(),
                t_branch[:k, r].copy(), t_cos[:k, r].copy(),
            )
        outcomes.append(
            AttackOutcome(out_x[r].copy(), int(labels[r]), int(targets[r]), bool(hit[r]), float(out_scores[r]),
                          int(used[r]), bool(stalled[r]), trace)
        )
    return outcomes


def run_attack(x, label: int, model: ClassifierModel, detector: Detector, cfg: AttackConfig,
               target: int | None = None) -> AttackOutcome:
    """Attack a single input; see :func:`run_attack_batch`."""
    targets = None if target is None else [target]
    return run_attack_batch(np.asarray(x)[None], [label], model, detector, cfg, targets)[0]


def perturbation_waste(trace: Trace | None, phi: float, margin: float = 0.0) -> tuple[np.ndarray, float]:
    """Flag steps that push an already-satisfied constraint further while the other is violated.

    A step ``i`` is wasted when either

    * ``g < phi - margin`` and ``f`` misses the target, the step optimised ``g``
      (branch ``g`` or ``joint``) and ``g`` decreased; or
    * ``f`` hits the target with logit margin below ``-margin``, ``g > phi``, the
      step optimised ``f`` (branch ``f`` or ``joint``) and the margin decreased.

    Returns the per-step flags and their mean (0 for an empty trace).
    """
    if trace is None or len(trace) == 0:
        return np.zeros(0, dtype=bool), 0.0
    n = len(trace)
    g, m, br = trace.score_g, trace.margin_f, trace.branch
    opt_g = (br == BRANCH_G) | (br == BRANCH_JOINT)
    opt_f = (br == BRANCH_F) | (br == BRANCH_JOINT)
    g_waste = (g[:n] < phi - margin) & (m[:n] > 0) & opt_g & (g[1 : n + 1] < g[:n])
    f_waste = (m[:n] < -margin) & (g[:n] > phi) & opt_f & (m[1 : n + 1] < m[:n])
    flags = g_waste | f_waste
    return flags, float(flags.mean())


def write_outcomes_jsonl(outcomes, path) -> None:
    with open(path, "w") as fh:
        for o in outcomes:
            fh.write(json.dumps(o.to_record(), sort_keys=True) + "\n")


def read_outcomes_jsonl(path) -> list[dict]:
    records = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            for key in ("classified_as_target", "detector_score"):
                if key not in rec:
                    raise KeyError(key)
        except (json.JSONDecodeError, KeyError) as exc:
            raise ValueError(f"{path}:{lineno}: malformed outcome record ({exc})") from None
        records.append(rec)
    return records
