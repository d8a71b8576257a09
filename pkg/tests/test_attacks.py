import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from orthopgd.attacks import (
    AttackConfig,
    Trace,
    choose_targets,
    orthogonal_component,
    perturbation_waste,
    project,
    read_outcomes_jsonl,
    run_attack,
    run_attack_batch,
    step_classifier_only,
    step_joint,
    step_orthogonal,
    step_selective,
    write_outcomes_jsonl,
    write_trace_csv,
)
from orthopgd.detectors import Detector, ZeroDetector
from orthopgd.metrics import calibrate_phi
from orthopgd.nn import ClassifierModel, Dense
from orthopgd.tensor import GradTape, Tensor, as_tensor, matmul, reshape, sum_


class LinearDetector(Detector):
    """score(x) = x . w"""

    def __init__(self, w):
        self.w = np.asarray(w, dtype=np.float64)

    def score(self, x):
        x = as_tensor(x)
        if x.ndim == 1:
            x = reshape(x, (1, -1))
        return reshape(matmul(x, self.w[:, None]), (x.shape[0],))


def detector_grad(det, x):
    tape = GradTape()
    xt = tape.watch(x)
    return tape.backward(sum_(det.score(xt)))[xt]


def reference_ce_grad(model, x, target):
    """Cross-entropy input gradient by hand-written backpropagation."""
    hs, h = [x], x
    for w, b in model.weights()[:-1]:
        h = np.maximum(h @ w + b, 0.0)
        hs.append(h)
    w_out, b_out = model.weights()[-1]
    z = h @ w_out + b_out
    p = np.exp(z - z.max(axis=1, keepdims=True))
    p /= p.sum(axis=1, keepdims=True)
    p[np.arange(len(x)), target] -= 1.0
    g = p @ w_out.T
    for (w, b), h_in, h_out in zip(reversed(model.weights()[:-1]), reversed(hs[:-1]), reversed(hs[1:])):
        g = (g * (h_out > 0)) @ w.T
    return g


def reference_pgd(model, x, target, eps, alpha, steps):
    xs, xi = [x.copy()], x.copy()
    for _ in range(steps):
        xi = xi - alpha * np.sign(reference_ce_grad(model, xi, target))
        xi = np.clip(np.minimum(np.maximum(xi, x - eps), x + eps), 0.0, 1.0)
        xs.append(xi)
    return xs


@pytest.fixture(scope="module")
def victims(splits, classifier):
    _, test = splits
    x, y = test.x[:12], test.y[:12]
    keep = classifier.predict(x) == y
    return x[keep][:6], y[keep][:6]


# -- geometry ----------------------------------------------------------------


def test_project_examples():
    assert project([0.5], [0.0], 0.3)[0] == pytest.approx(0.3, abs=0)
    inside = np.array([0.4, 0.6])
    assert np.array_equal(project(inside, [0.45, 0.55], 0.1), inside)
    out = project([0.6, 0.8], [0.0, 0.0], 0.5, "l2")
    assert np.allclose(out, [0.3, 0.4], rtol=0, atol=1e-15)


def test_project_clips_to_unit_range():
    assert project([1.2, -0.3], [0.95, 0.05], 0.5).tolist() == [1.0, 0.0]


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from(["l_inf", "l2"]), st.floats(0.0, 0.5))
def test_project_lands_in_the_feasible_set(seed, norm, eps):
    rng = np.random.default_rng(seed)
    x = rng.uniform(size=(3, 10))
    z = x + rng.normal(scale=0.5, size=x.shape)
    p = project(z, x, eps, norm)
    d = p - x
    size = np.abs(d).max(axis=1) if norm == "l_inf" else np.linalg.norm(d, axis=1)
    assert np.all(size <= eps + 1e-9)
    assert p.min() >= 0 and p.max() <= 1


def test_orthogonal_component_examples():
    assert orthogonal_component([1.0, 1.0], [1.0, 0.0]).tolist() == [0.0, 1.0]
    assert np.allclose(orthogonal_component([2.0, 4.0], [1.0, 2.0]), 0.0, atol=1e-15)
    assert orthogonal_component([3.0, -1.0], [0.0, 0.0]).tolist() == [3.0, -1.0]


def test_orthogonal_component_is_orthogonal_even_when_nearly_parallel():
    rng = np.random.default_rng(0)
    for _ in range(200):
        b = rng.normal(size=50)
        a = b * rng.uniform(0.5, 2) + rng.normal(scale=1e-6, size=50)
        out = orthogonal_component(a, b)
        assert abs(out @ b) / (np.linalg.norm(out) * np.linalg.norm(b)) < 1e-5


# -- config --------------------------------------------------------------------


def test_config_validation_and_json_round_trip():
    cfg = AttackConfig(0.05, "l2", 0.01, 7, "joint", lam=3.0, target_seed=4, detector_interleave_period=2)
    assert AttackConfig.from_json(cfg.to_json()) == cfg
    for bad in (dict(epsilon=-1), dict(epsilon=0.1, alpha=0), dict(epsilon=0.1, steps=-1),
                dict(epsilon=0.1, norm="l1"), dict(epsilon=0.1, strategy="cw"), dict(epsilon=0.1, lam=-1),
                dict(epsilon=0.1, target_rule="fixed"), dict(epsilon=0.1, detector_interleave_period=0)):
        with pytest.raises(ValueError):
            AttackConfig(**bad)


def test_random_targets_are_wrong_and_cover_all_classes():
    labels = np.arange(1000) % 10
    t = choose_targets(labels, 10, AttackConfig(0.1, target_seed=3))
    assert not np.any(t == labels)
    assert set(t.tolist()) == set(range(10))
    assert np.array_equal(t, choose_targets(labels, 10, AttackConfig(0.1, target_seed=3)))
    fixed = choose_targets(labels[:5], 10, AttackConfig(0.1, target_rule="fixed", fixed_target=2))
    assert fixed.tolist() == [2] * 5


# -- reductions and branch semantics ------------------------------------------------


def test_classifier_only_matches_reference_pgd(classifier, victims):
    x, y = victims
    cfg = AttackConfig(0.05, alpha=0.004, steps=40, strategy="pgd_classifier_only")
    targets = choose_targets(y, 10, cfg)
    ref = reference_pgd(classifier, x, targets, cfg.epsilon, cfg.alpha, cfg.steps)
    xi = x.copy()
    for i in range(cfg.steps):
        xi = step_classifier_only(xi, x, classifier, ZeroDetector(), targets, cfg)
        assert np.max(np.abs(xi - ref[i + 1])) <= 1e-12
    outs = run_attack_batch(x, y, classifier, ZeroDetector(), cfg, targets)
    for r, o in enumerate(outs):
        hits = [k for k, it in enumerate(ref) if classifier.predict(it[r])[0] == targets[r]]
        expected = ref[hits[-1]][r] if hits else ref[-1][r]
        assert np.max(np.abs(o.x_adv - expected)) <= 1e-12


def test_joint_with_zero_lambda_equals_classifier_only(classifier, defenses, victims):
    x, y = victims
    det = defenses["dla"].detector
    base = dict(epsilon=0.05, alpha=0.002, steps=25)
    t = choose_targets(y, 10, AttackConfig(**base))
    a = run_attack_batch(x, y, classifier, det, AttackConfig(**base, strategy="pgd_classifier_only"), t)
    b = run_attack_batch(x, y, classifier, det, AttackConfig(**base, strategy="joint", lam=0.0), t)
    for oa, ob in zip(a, b):
        assert np.array_equal(oa.x_adv, ob.x_adv)
    xi = x.copy()
    for _ in range(5):
        nxt = step_joint(xi, x, classifier, det, t, 0.0, AttackConfig(**base))
        assert np.array_equal(nxt, step_classifier_only(xi, x, classifier, det, t, AttackConfig(**base)))
        xi = nxt


def test_joint_large_lambda_follows_detector_gradient(classifier, defenses, victims):
    x, y = victims
    det = defenses["dla"].detector
    cfg = AttackConfig(1.0, "l2", alpha=1e-3, steps=1)
    t = choose_targets(y, 10, cfg)
    step = step_joint(x, x, classifier, det, t, 1e9, cfg) - x
    g = detector_grad(det, x)
    cos = -np.einsum("ij,ij->i", step, g) / (np.linalg.norm(step, axis=1) * np.linalg.norm(g, axis=1))
    assert np.all(cos > 1 - 1e-6)


def test_selective_off_target_is_bitwise_classifier_step(classifier, defenses, victims):
    x, y = victims
    det = defenses["sid"].detector
    cfg = AttackConfig(0.05, alpha=0.002)
    t = choose_targets(y, 10, cfg)
    xi = x.copy()
    for _ in range(30):
        off = classifier.predict(xi) != t
        sel = step_selective(xi, x, classifier, det, t, cfg)
        plain = step_classifier_only(xi, x, classifier, det, t, cfg)
        assert np.array_equal(sel[off], plain[off])
        xi = sel


def test_selective_on_target_is_pure_detector_descent(classifier, defenses, victims):
    x, y = victims
    det = defenses["dla"].detector
    cfg = AttackConfig(0.05, alpha=0.002)
    t = classifier.predict(x)  # every input already sits on its "target"
    nxt = step_selective(x, x, classifier, det, t, cfg)
    expected = project(x - cfg.alpha * np.sign(detector_grad(det, x)), x, cfg.epsilon)
    assert np.array_equal(nxt, expected)


def orthogonal_problem():
    # the classifier only reads pixel 0, the detector only pixel 1
    model = ClassifierModel([Dense([[1.0, -1.0], [0.0, 0.0]], [0.0, 0.0], "none")])
    return model, LinearDetector([0.0, 1.0])


def test_orthogonal_equals_selective_when_gradients_are_orthogonal():
    model, det = orthogonal_problem()
    x = np.array([[0.6, 0.5], [0.4, 0.5]])
    cfg = AttackConfig(0.3, alpha=0.01)
    t = np.array([1, 1])
    for norm in ("l_inf", "l2"):
        c = AttackConfig(0.3, norm, alpha=0.01)
        assert np.array_equal(step_orthogonal(x, x, model, det, t, c), step_selective(x, x, model, det, t, c))
    assert np.array_equal(step_orthogonal(x, x, model, det, t, cfg, force_detector=True),
                          project(x - [0.0, 0.01], x, 0.3))


def test_orthogonal_l2_steps_are_orthogonal_to_the_other_gradient(classifier, defenses, victims):
    x, y = victims
    for kind in ("dla", "sid", "trapdoor"):
        d = defenses[kind]
        cfg = AttackConfig(0.5, "l2", alpha=0.05, steps=40, strategy="orthogonal", record_trace=True)
        outs = run_attack_batch(x, y, d.model, d.detector, cfg)
        for o in outs:
            assert np.max(np.abs(o.trace.cosine_to_other)) < 1e-5
            assert set(np.unique(o.trace.branch)) <= {0, 1}


def test_orthogonal_stalls_when_both_gradients_vanish():
    model = ClassifierModel([Dense(np.zeros((3, 2)), [0.0, 1.0], "none")])
    cfg = AttackConfig(0.1, steps=10, strategy="orthogonal")
    o = run_attack(np.full(3, 0.5), 1, model, ZeroDetector(), cfg, target=0)
    assert o.stalled and o.iterations_used == 0
    assert np.array_equal(o.x_adv, np.full(3, 0.5))


def test_interleave_forces_detector_branch(classifier, defenses, victims):
    x, y = victims
    cfg = AttackConfig(0.05, alpha=0.002, steps=12, strategy="orthogonal", detector_interleave_period=3,
                       record_trace=True)
    for o in run_attack_batch(x, y, classifier, defenses["dla"].detector, cfg):
        assert np.all(o.trace.branch[2::3] == 1)


# -- run_attack ----------------------------------------------------------------


def test_zero_steps_and_zero_epsilon_return_the_input(classifier, defenses, victims):
    x, y = victims
    det = defenses["dla"].detector
    o = run_attack(x[0], y[0], classifier, det, AttackConfig(0.05, steps=0), target=(y[0] + 1) % 10)
    assert np.array_equal(o.x_adv, x[0]) and not o.classified_as_target
    for strategy in ("pgd_classifier_only", "joint", "selective", "orthogonal"):
        o = run_attack(x[0], y[0], classifier, det, AttackConfig(0.0, steps=20, strategy=strategy))
        assert np.array_equal(o.x_adv, x[0])


def test_untargeted_step_ascends_the_true_label_loss(classifier, victims):
    x, y = victims
    cfg = AttackConfig(0.05, alpha=0.002, targeted=False)
    nxt = step_classifier_only(x, x, classifier, ZeroDetector(), y, cfg)
    expected = project(x + cfg.alpha * np.sign(reference_ce_grad(classifier, x, y)), x, cfg.epsilon)
    assert np.array_equal(nxt, expected)
    o = run_attack_batch(x, y, classifier, ZeroDetector(), AttackConfig(0.05, alpha=0.004, steps=40, targeted=False,
                                                                      strategy="pgd_classifier_only"))
    assert np.mean([classifier.predict(r.x_adv)[0] != r.label for r in o]) >= 0.5


@pytest.mark.parametrize("norm,eps", [("l_inf", 0.03), ("l2", 0.5)])
@pytest.mark.parametrize("strategy", ["pgd_classifier_only", "joint", "selective", "orthogonal"])
def test_every_iterate_stays_feasible(classifier, defenses, victims, strategy, norm, eps):
    x, y = victims
    det = defenses["sid"].detector
    cfg = AttackConfig(eps, norm, alpha=eps / 5, steps=1, strategy=strategy)
    t = choose_targets(y, 10, cfg)
    xi = x.copy()
    for _ in range(15):
        xi = {
            "pgd_classifier_only": lambda: step_classifier_only(xi, x, classifier, det, t, cfg),
            "joint": lambda: step_joint(xi, x, classifier, det, t, 1.0, cfg),
            "selective": lambda: step_selective(xi, x, classifier, det, t, cfg),
            "orthogonal": lambda: step_orthogonal(xi, x, classifier, det, t, cfg),
        }[strategy]()
        d = xi - x
        size = np.abs(d).max(axis=1) if norm == "l_inf" else np.linalg.norm(d, axis=1)
        assert np.all(size <= eps + 1e-9) and xi.min() >= 0 and xi.max() <= 1


def test_best_iterate_is_never_worse_than_the_final_iterate(classifier, defenses, victims):
    x, y = victims
    cfg = AttackConfig(0.05, alpha=0.002, steps=60, strategy="orthogonal", record_trace=True)
    for o in run_attack_batch(x, y, classifier, defenses["dla"].detector, cfg):
        if o.trace.margin_f[-1] < 0:
            assert o.classified_as_target
            assert o.detector_score <= o.trace.score_g[-1]
        if o.classified_as_target:
            hits = o.trace.margin_f < 0
            assert o.detector_score == pytest.approx(o.trace.score_g[hits].min(), abs=1e-12)


def test_outcomes_are_deterministic_and_match_serial_runs(classifier, defenses, victims):
    x, y = victims
    det = defenses["dla"].detector
    cfg = AttackConfig(0.05, alpha=0.002, steps=20, strategy="selective")
    a = run_attack_batch(x, y, classifier, det, cfg)
    b = run_attack_batch(x, y, classifier, det, cfg)
    assert [json.dumps(o.to_record()) for o in a] == [json.dumps(o.to_record()) for o in b]
    for r, o in enumerate(a):
        single = run_attack(x[r], y[r], classifier, det, cfg, target=o.target)
        assert np.allclose(single.x_adv, o.x_adv, rtol=0, atol=1e-12)
        assert single.classified_as_target == o.classified_as_target


def test_non_finite_gradient_aborts():
    class NanDetector(Detector):
        def score(self, x):
            x = as_tensor(x)
            return reshape(matmul(x, np.full((x.shape[-1], 1), np.nan)), (x.shape[0],))

    model = ClassifierModel.init([4, 3], 0)
    with pytest.raises(ArithmeticError):
        run_attack(np.full(4, 0.5), 0, model, NanDetector(), AttackConfig(0.1, steps=3, strategy="joint"))


# -- waste -----------------------------------------------------------------------


def test_waste_of_empty_trace_is_zero():
    flags, frac = perturbation_waste(Trace.empty(), 0.0)
    assert frac == 0.0 and flags.size == 0
    assert perturbation_waste(None, 0.0)[1] == 0.0


def test_waste_hand_built_trace():
    # step 0: f missed, g already below phi, detector step lowered g further: wasted
    # step 1: same state but the detector step raised g: not wasted
    # step 2: f hit, g above phi, classifier step deepened the margin: wasted
    trace = Trace(
        loss_f=np.zeros(4),
        score_g=np.array([-1.0, -2.0, 3.0, 1.0]),
        margin_f=np.array([1.0, 0.5, -1.0, -2.0]),
        branch=np.array([1, 1, 0]),
        cosine_to_other=np.zeros(3),
    )
    flags, frac = perturbation_waste(trace, phi=0.0)
    assert flags.tolist() == [True, False, True]
    assert frac == pytest.approx(2 / 3)


def test_selective_traces_have_zero_waste(defenses, victims):
    x, y = victims
    d = defenses["dla"]
    phi = calibrate_phi(d.detector.scores(x), 5)
    cfg = AttackConfig(0.05, alpha=0.002, steps=80, strategy="selective", record_trace=True)
    for o in run_attack_batch(x, y, d.model, d.detector, cfg):
        assert perturbation_waste(o.trace, phi)[1] == 0.0


def test_joint_trace_on_honeypot_wastes_steps(defenses, splits):
    _, test = splits
    d = defenses["trapdoor"]
    x, y = test.x[:20], test.y[:20]
    keep = d.model.predict(x) == y
    phi = calibrate_phi(d.detector.scores(test.x[100:600]), 5)
    cfg = AttackConfig(0.05, alpha=0.002, steps=100, strategy="joint", lam=1.0, record_trace=True)
    waste = [perturbation_waste(o.trace, phi)[1] for o in run_attack_batch(x[keep], y[keep], d.model, d.detector, cfg)]
    assert np.mean(waste) > 0


# -- persistence -----------------------------------------------------------------


def test_outcome_jsonl_round_trip_and_errors(tmp_path, classifier, victims):
    x, y = victims
    outs = run_attack_batch(x, y, classifier, ZeroDetector(), AttackConfig(0.05, steps=3, strategy="pgd_classifier_only"))
    path = tmp_path / "o.jsonl"
    write_outcomes_jsonl(outs, path)
    back = read_outcomes_jsonl(path)
    assert [r["x_adv"] for r in back] == [o.x_adv.tolist() for o in outs]
    assert [r["classified_as_target"] for r in back] == [o.classified_as_target for o in outs]
    path.write_text(path.read_text() + '{"detector_score": 1.0}\n')
    with pytest.raises(ValueError, match=f":{len(outs) + 1}:"):
        read_outcomes_jsonl(path)


def test_trace_csv_columns(tmp_path, classifier, defenses, victims):
    x, y = victims
    cfg = AttackConfig(0.05, steps=4, strategy="orthogonal", record_trace=True)
    o = run_attack(x[0], y[0], classifier, defenses["dla"].detector, cfg)
    write_trace_csv(o.trace, tmp_path / "t.csv")
    lines = (tmp_path / "t.csv").read_text().splitlines()
    assert lines[0] == "step,loss_f,score_g,branch,cosine_to_other"
    assert len(lines) == 5
