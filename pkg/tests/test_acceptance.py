"""Acceptance criteria, one test each; every test writes a single PASS/FAIL line.

The training experiments (criteria 4, 5, 6, 9) take several minutes on one
core. Models are shared through module fixtures so each is trained once.
"""
import os
import time

import numpy as np
import pytest

from sphere_at import diffcore as dc
from sphere_at.analysis import grad_ratio, run_suite
from sphere_at.attacks import AttackSpec, GradEstimatorSpec, estimate_gradient, fn_in_objective_toggle, \
    iterative_attack, margin_score
from sphere_at.cli import main
from sphere_at.datahub import make_two_moons, mnist_subset
from sphere_at.objectives import ObjectiveSpec, logit_margin
from sphere_at.spherehead import ArchitectureSpec, HeadConfig, Model, bind, extract_features, head_logits
from sphere_at.trainer import TrainSpec, evaluate, train

pytestmark = pytest.mark.slow

SEEDS = (0, 1, 2)
MOONS_EPS, MOONS_STEP = 0.3 / 3.5, 0.075 / 3.5


@pytest.fixture(scope="module")
def say(request):
    reporter = request.config.pluginmanager.getplugin("terminalreporter")

    def emit(criterion, passed, detail):
        line = f"{'PASS' if passed else 'FAIL'} criterion {criterion}: {detail}"
        if reporter is not None:
            reporter.write_line("")
            reporter.write_line(line)
        else:
            print(line)
    return emit


def pgd_eval(head, eps, step, steps):
    return AttackSpec(eps=eps, step=step, steps=steps, objective=ObjectiveSpec("ce-vs-label", head))


# -- shared experiments ------------------------------------------------------------------

def _he_benefit_runs(make_spec, train_data, test_data, eps, step):
    runs = {}
    t0 = time.perf_counter()
    for mode in ("standard", "he"):
        head = HeadConfig(mode)
        for seed in SEEDS:
            params, _ = train(make_spec(head, seed), train_data)
            model = Model(params, head)
            clean = evaluate(model, None, test_data)
            robust = evaluate(model, pgd_eval(head, eps, step, 20), test_data, rng=np.random.default_rng(5))
            runs[mode, seed] = (model, clean, robust)
    return runs, time.perf_counter() - t0


@pytest.fixture(scope="module")
def moons_runs():
    tr, te = make_two_moons(1000, 0.1, 11, "train"), make_two_moons(1000, 0.1, 12, "test")
    arch = ArchitectureSpec(input_shape=(2,), hidden=(64, 64), feature_dim=32, num_classes=2)
    atk = AttackSpec(eps=MOONS_EPS, step=MOONS_STEP, steps=10)

    def make_spec(head, seed):
        return TrainSpec(arch=arch, framework="pgd-at", head=head, attack=atk, epochs=200, batch_size=128,
                         lr=0.1, seed=seed)
    runs, secs = _he_benefit_runs(make_spec, tr, te, MOONS_EPS, MOONS_STEP)
    return runs, secs, te


@pytest.fixture(scope="module")
def mnist_runs():
    tr, te = mnist_subset()
    arch = ArchitectureSpec(input_shape=(1, 28, 28), hidden=(256, 128), feature_dim=64, num_classes=10)
    atk = AttackSpec(eps=0.1, step=0.025, steps=10)

    def make_spec(head, seed):
        return TrainSpec(arch=arch, framework="pgd-at", head=head, attack=atk, epochs=30, batch_size=64,
                         lr=0.05, seed=seed)
    runs, secs = _he_benefit_runs(make_spec, tr, te, 0.1, 0.025)
    return runs, secs, te


@pytest.fixture(scope="module")
def conv_models():
    tr, te = mnist_subset()
    arch = ArchitectureSpec(input_shape=(1, 28, 28), hidden=(8, 16), feature_dim=64, num_classes=10, kind="conv")
    models = []
    t0 = time.perf_counter()
    for seed in SEEDS:
        params, _ = train(TrainSpec(arch=arch, framework="standard", epochs=8, batch_size=64, lr=0.05, seed=seed), tr)
        models.append(Model(params, HeadConfig()))
    return models, te, time.perf_counter() - t0


def _means(runs, mode):
    return (float(np.mean([runs[mode, s][1] for s in SEEDS])), float(np.mean([runs[mode, s][2] for s in SEEDS])))


# -- 1. exact identities ---------------------------------------------------------------------

def test_criterion_1_exact_identities(say):
    t0 = time.perf_counter()
    results = [r for s in ("lemma2", "eq16", "eq14", "eq15") for r in run_suite(s, seed=0, trials=50)]
    secs = time.perf_counter() - t0
    limits = {"lemma2": 1e-10, "eq16": 1e-10, "eq14": 1e-8, "eq15": 1e-8}
    ok = all(r.value < limits[r.suite] for r in results) and secs < 120
    say(1, ok, ", ".join(f"{r.suite} {r.value:.1e}" for r in results) + f" in {secs:.1f}s")
    assert ok


# -- 2. first-order expansion order ---------------------------------------------------------------

def test_criterion_2_lemma1_order(say):
    res = {r.name: r for r in run_suite("lemma1", seed=0)}
    slope, lin, dual = (res["ce-remainder-slope"].value, res["linear-remainder-zero"].value,
                        res["dual-norm-duality"].value)
    ok = slope >= 1.8 and lin < 1e-12 and dual < 1e-10 and res["dual-norm-duality"].detail["trials"] == 100
    say(2, ok, f"min slope {slope:.3f} (>= 1.8), linear remainder {lin:.1e}, duality {dual:.1e}")
    assert ok


# -- 3. training-loss gradients --------------------------------------------------------------------

def test_criterion_3_gradient_correctness(say):
    t0 = time.perf_counter()
    results = run_suite("gradients", seed=0, trials=100)
    secs = time.perf_counter() - t0
    worst = max(results, key=lambda r: r.value)
    ok = len(results) == 15 and all(r.passed for r in results) and secs < 300
    say(3, ok, f"15 loss/head pairs x 100 probes, worst {worst.name} {worst.value:.1e} (< 1e-5) in {secs:.0f}s")
    assert ok


# -- 4. FN in the attack objective ---------------------------------------------------------------------

def test_criterion_4_fn_attack_efficiency(say, conv_models):
    models, te, train_secs = conv_models
    t0 = time.perf_counter()
    clean, plain, with_fn = [], [], []
    for seed, model in zip(SEEDS, models):
        atk = AttackSpec(eps=0.2, step=0.05, steps=2)
        clean.append(evaluate(model, None, te))
        plain.append(evaluate(model, atk, te, rng=np.random.default_rng(seed)))
        with_fn.append(evaluate(model, fn_in_objective_toggle(atk, True), te, rng=np.random.default_rng(seed)))
    secs = train_secs + time.perf_counter() - t0
    gap = float(np.mean(plain) - np.mean(with_fn))
    ok = min(clean) >= 0.95 and gap >= 0.02 and secs < 600
    say(4, ok, f"clean {np.mean(clean):.3f}, PGD-2 acc without FN {np.mean(plain):.3f}, with FN "
               f"{np.mean(with_fn):.3f}, gap {100 * gap:+.1f} points (need >= +2.0), {secs:.0f}s")
    assert ok


# -- 5. HE benefit under PGD-AT ----------------------------------------------------------------------

def test_criterion_5_he_benefit(say, moons_runs, mnist_runs):
    lines, ok = [], True
    for name, (runs, _, _) in (("two-moons", moons_runs), ("mnist-subset", mnist_runs)):
        (c0, r0), (c1, r1) = _means(runs, "standard"), _means(runs, "he")
        good = r1 >= r0 and c1 >= c0 - 0.03
        ok &= good
        lines.append(f"{name} robust {r0:.4f} -> {r1:.4f}, clean {c0:.4f} -> {c1:.4f} "
                     f"({'ok' if good else 'not met'})")
    secs = moons_runs[1] + mnist_runs[1]
    ok &= secs < 1800
    say(5, ok, "; ".join(lines) + f"; {secs / 60:.1f} min")
    assert ok


# -- 6. more steps never weaker ------------------------------------------------------------------------

def test_criterion_6_attack_strength_monotone(say, moons_runs, conv_models):
    runs, _, moons_te = moons_runs
    models, mnist_te, _ = conv_models
    cases = (("moons pgd-at", runs["standard", 0][0], moons_te, MOONS_EPS, MOONS_STEP),
             ("moons pgd-at+he", runs["he", 0][0], moons_te, MOONS_EPS, MOONS_STEP),
             ("mnist conv", models[0], mnist_te.subset(np.arange(500)), 0.1, 0.025))
    ok, parts = True, []
    for name, model, data, eps, step in cases:
        accs = [evaluate(model, pgd_eval(model.head, eps, step, k), data, rng=np.random.default_rng(7))
                for k in (1, 5, 20)]
        good = accs[1] <= accs[0] + 0.005 and accs[2] <= accs[1] + 0.005
        ok &= good
        parts.append(f"{name} " + "/".join(f"{a:.3f}" for a in accs))
    say(6, ok, "PGD-1/5/20 accuracy: " + "; ".join(parts))
    assert ok


# -- 7. zeroth-order estimators --------------------------------------------------------------------------

def _cosines(a, b):
    return (a * b).sum(axis=1) / np.maximum(np.linalg.norm(a, axis=1) * np.linalg.norm(b, axis=1), 1e-300)


def test_criterion_7_zeroth_order_estimators(say, moons_runs):
    runs, _, te = moons_runs
    model = runs["standard", 0][0]
    x, y = te.inputs[:200], te.labels[:200]
    P = bind(model.params)
    xt = dc.tensor(x, requires_grad=True)
    exact = dc.grad(dc.tsum(logit_margin(head_logits(P, model.head, extract_features(P, xt)), y)), [xt])[0]
    J = margin_score(model, y)
    frac = {}
    for family in ("nes", "spsa"):
        est = estimate_gradient(J, x, GradEstimatorSpec(family, q=128, sigma=1e-3, seed=3))
        frac[family] = float(np.mean(_cosines(est, exact) > 0.5))

    rng = np.random.default_rng(11)
    w = rng.normal(size=(1, 20))
    lin = estimate_gradient(lambda v: v.reshape(v.shape[0], -1) @ w[0], rng.uniform(size=(1, 20)),
                            GradEstimatorSpec("spsa", q=4096, sigma=1e-3, seed=4))
    lin_cos = float(_cosines(lin, w)[0])
    ok = frac["nes"] >= 0.8 and frac["spsa"] >= 0.8 and lin_cos > 0.99
    say(7, ok, f"cos > 0.5 on {100 * frac['nes']:.1f}% (NES) and {100 * frac['spsa']:.1f}% (SPSA) of 200 points; "
               f"linear SPSA q=4096 cos {lin_cos:.4f}")
    assert ok


# -- 8. byte-identical reruns ---------------------------------------------------------------------------------

DETERMINISM_CFG = """\
seed = 4
dataset = two-moons
data.n_train = 300
data.n_test = 200
arch.hidden = 32,32
arch.feature_dim = 16
epochs = 3
batch_size = 50
lr = 0.05
attack.eps = 0.08571428571428572
attack.step = 0.02142857142857143
attack.steps = 5
eval.steps = 10
checkpoint_every = 1
"""


def test_criterion_8_determinism(say, tmp_path, monkeypatch):
    monkeypatch.setenv("SPHERE_AT_THREADS", "1")
    cfg = tmp_path / "det.cfg"
    cfg.write_text(DETERMINISM_CFG)
    checked, mismatched = 0, []
    for framework, mode in (("pgd-at", "he"), ("trades", "standard"), ("free-at", "m-he"), ("fast-at", "he")):
        outs = []
        for rep in ("a", "b"):
            out = tmp_path / f"{framework}-{mode}-{rep}"
            assert main(["train", str(cfg), "--out", str(out), "--set", f"framework={framework}",
                         "--set", f"head.mode={mode}"]) == 0
            outs.append(out)
        names = sorted(p.name for p in outs[0].iterdir() if p.suffix in (".csv", ".ckpt"))
        for n in names:
            checked += 1
            if (outs[0] / n).read_bytes() != (outs[1] / n).read_bytes():
                mismatched.append(f"{framework}/{n}")
    ok = checked > 0 and not mismatched
    say(8, ok, f"{checked} history/checkpoint files compared across 4 framework runs, "
               f"{len(mismatched)} differ {mismatched if mismatched else ''}".rstrip())
    assert ok


# -- 9. gradient-ratio diagnostic ----------------------------------------------------------------------------

def test_criterion_9_grad_ratio_report(say, moons_runs, tmp_path):
    runs, _, te = moons_runs
    x, y = te.inputs[:200], te.labels[:200]
    reports = {}
    for mode, label in (("standard", "pgd-at"), ("he", "pgd-at+he")):
        model = runs[mode, 0][0]
        x_adv = iterative_attack(model, pgd_eval(model.head, MOONS_EPS, MOONS_STEP, 20), x, y,
                                 rng=np.random.default_rng(0))
        reports[label] = grad_ratio(model.params, model.head, x, x_adv, y, label=label)
        (tmp_path / f"grad_ratio_{label}.csv").write_text(reports[label].to_csv())
    base, he = reports["pgd-at"].as_dict(), reports["pgd-at+he"].as_dict()
    values = [v for r in reports.values() for v in r.ratios]
    finite = all(v is not None and np.isfinite(v) and v > 0 for v in values)
    larger = sum(he[b] > base[b] for b in base)
    observation = "HE larger on a majority of blocks" if larger > len(base) / 2 else "HE not larger on a majority"
    say(9, finite, "blocks " + ", ".join(f"{b} {base[b]:.3f}/{he[b]:.3f}" for b in base)
        + f" (pgd-at/pgd-at+he); {observation} ({larger}/{len(base)}, recorded, not gated)")
    assert finite
