import numpy as np
import pytest

from sphere_at.analysis import (SUITES, ce_gradient_double_sum, cosine_margin, gradient_probe, dominant_term_report, duality_deviation,
                                grad_ratio, input_gradient, lemma1_scaling_check, model_objective, random_probe,
                                run_suite, scale_invariance_deviation, smooth_probe,
                                verify_ce_gradient_decomposition, verify_direction_factorization,
                                verify_parameter_gradient_forms, verify_softmax_weight_gradient)
from sphere_at.attacks import AttackSpec, iterative_attack
from sphere_at.diffcore import ContractError
from sphere_at.objectives import ce_between
from sphere_at.spherehead import HeadConfig, Model, extract_features, head_logits


@pytest.fixture
def rng():
    return np.random.default_rng(0)


# -- exact identities on single probes ------------------------------------------------

def test_double_sum_matches_tape_gradient(rng):
    for _ in range(10):
        params, x = random_probe(rng)
        L = params.arch.num_classes
        soft = rng.dirichlet(np.ones(L), size=x.shape[0])
        tape = input_gradient(params, x, lambda P, xt: ce_between(
            head_logits(P, HeadConfig(), extract_features(P, xt)), soft, "sum"))
        assert np.max(np.abs(ce_gradient_double_sum(params, x, soft) - tape)) < 1e-10
        assert verify_ce_gradient_decomposition(params, x, rng.integers(0, L, size=x.shape[0])) < 1e-10


def test_decomposition_needs_standard_head(rng):
    params, x = random_probe(rng)
    with pytest.raises(ContractError):
        verify_ce_gradient_decomposition(params, x, np.zeros(x.shape[0], dtype=int), head=HeadConfig("he"))


def test_gradient_forms_and_batch_weight_gradient(rng):
    for _ in range(5):
        params, x = random_probe(rng, num_classes=3, batch=4)
        y = rng.integers(0, 3, size=4)
        rep = verify_parameter_gradient_forms(params, x, y, modes=("standard", "fn-only"))
        assert rep.eq_norm_angle < 1e-8 and rep.eq_fn < 1e-8
        assert verify_softmax_weight_gradient(params, x, y) < 1e-10


def test_scale_invariance(rng):
    u = rng.normal(size=(5, 3))
    for p in ("inf", "2"):
        assert scale_invariance_deviation(u, rng.uniform(0.01, 100, size=5), p) < 1e-12
    with pytest.raises(ContractError):
        scale_invariance_deviation(u, -1.0, "2")


def test_direction_factorization_two_classes(rng):
    params, x = random_probe(rng, num_classes=2, batch=5)
    y = rng.integers(0, 2, size=5)
    rep = verify_direction_factorization(params, x, y, p="2", head=HeadConfig("fn-only"))
    assert rep.scale_deviation < 1e-12
    cos = rep.fn_cosine[~np.isnan(rep.fn_cosine)]
    assert np.all(cos > 0.99)


def test_dominant_term_report_shapes_and_runner_up(rng):
    params, x = random_probe(rng, num_classes=4, batch=6)
    y = rng.integers(0, 4, size=6)
    rep = dominant_term_report(params, x, x + 0.01, y)
    assert rep.cosine.shape == (6,) and np.all(rep.y_star != y)
    assert np.all(np.abs(rep.cosine) <= 1)
    with pytest.raises(ContractError):
        dominant_term_report(params, x, x, y, y_star=y)
    assert set(rep.to_dict()["aggregate"]) == {"n", "cosine_mean", "cosine_min", "residual_over_full_mean"}


# -- first-order expansion -------------------------------------------------------------------

def test_lemma1_linear_exact_and_grid_contract(rng):
    a = rng.normal(size=4)
    lin = lambda x: (float(a @ x), a.copy())
    rep = lemma1_scaling_check(lin, rng.normal(size=4), [1e-1, 1e-2, 1e-3, 1e-4], "inf")
    assert rep.exact_zero and np.all(rep.remainder < 1e-12)
    with pytest.raises(ContractError):
        lemma1_scaling_check(lin, np.zeros(4), [1e-1, 1e-2])


def test_lemma1_quadratic_slope_is_two(rng):
    A = np.diag([1.0, 3.0])
    quad = lambda x: (0.5 * float(x @ A @ x), A @ x)
    rep = lemma1_scaling_check(quad, np.array([0.3, -0.7]), [1e-1, 1e-2, 1e-3, 1e-4], "2")
    assert rep.slope == pytest.approx(2.0, abs=1e-3)


def test_lemma1_on_smooth_model():
    params, data = smooth_probe(np.random.default_rng(1))
    vg = model_objective(params, HeadConfig(), data.labels[0])
    rep = lemma1_scaling_check(vg, data.inputs[0], [1e-1, 1e-2, 1e-3, 1e-4], "inf")
    assert rep.slope >= 1.8


def test_duality(rng):
    for _ in range(20):
        u = rng.normal(size=9)
        assert duality_deviation(u, "inf") < 1e-12 and duality_deviation(u, "2") < 1e-12


# -- diagnostics and the runner -----------------------------------------------------------------

def test_grad_ratio_report(rng):
    params, x = random_probe(rng, num_classes=3, batch=8)
    y = rng.integers(0, 3, size=8)
    head = HeadConfig("he")
    x_adv = iterative_attack(Model(params, head), AttackSpec(eps=0.1, step=0.03, steps=3), x, y)
    rep = grad_ratio(params, head, x, x_adv, y, label="probe")
    assert rep.blocks[-1] == "softmax"
    assert all(r is None or (np.isfinite(r) and r > 0) for r in rep.ratios)
    lines = rep.to_csv().splitlines()
    assert lines[0] == "block,ratio,n" and len(lines) == len(rep.blocks) + 1
    same = grad_ratio(params, head, x, x, y)
    assert all(r is None or r == pytest.approx(1.0) for r in same.ratios)


@pytest.mark.parametrize("suite", [s for s in SUITES if s != "gradients"])
def test_suites_pass(suite):
    results = run_suite(suite, seed=3, trials=8)
    assert results and all(r.passed for r in results), [r.to_dict() for r in results]


def test_gradient_suite_passes_small():
    results = run_suite("gradients", seed=3, trials=1)
    assert len(results) == 15 and all(r.passed for r in results)


def test_cosine_margin_detects_aligned_feature():
    params, x = random_probe(np.random.default_rng(4))
    z = extract_features(params, x).data
    assert 0 <= cosine_margin(params, x) <= 1
    params.W[:, 0] = 2.5 * z[0]
    assert cosine_margin(params, x) < 1e-12


def test_gradient_probes_keep_clear_of_arccos_endpoints():
    rng = np.random.default_rng(5)
    for _ in range(20):
        params, x, x_adv, _ = gradient_probe(rng)
        assert min(cosine_margin(params, x), cosine_margin(params, x_adv)) >= 1e-3


def test_unknown_selector():
    with pytest.raises(ContractError):
        run_suite("eq99")
