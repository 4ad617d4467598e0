import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from robattr.adversary import (IfiaConfig, MisclassifiedSample, PgdConfig, ifia_topk,
                               pgd_inner_max, pgd_prediction_attack)
from robattr.nn import Network, mlp
from robattr.objectives import (Neighborhood, ObjectiveSpec, Variant, inner_terms, inner_value,
                                one_layer_closed_form)


@pytest.fixture(scope="module")
def problem():
    rng = np.random.default_rng(5)
    net = mlp([8, 10, 3], seed=5)
    x = rng.uniform(size=(6, 8))
    y = np.array([0, 1, 2, 0, 1, 2])
    return net, x, y


def test_zero_radius_returns_nominal_point(problem):
    net, x, y = problem
    cfg = PgdConfig(epsilon=0.0)
    for v in (Variant.IG_NORM, Variant.MADRY, Variant.LOSS_OUTPUT):
        np.testing.assert_array_equal(pgd_inner_max(ObjectiveSpec(v), net, x, y, cfg), x)
    x_adv, success = pgd_prediction_attack(net, x, y, cfg)
    np.testing.assert_array_equal(x_adv, x)
    np.testing.assert_array_equal(success, net.predict(x) != y)


def test_objective_without_attribution_term_skips_the_attack(problem):
    net, x, y = problem
    out = pgd_inner_max(ObjectiveSpec(Variant.IG_NORM, lam=0.0), net, x, y, PgdConfig())
    np.testing.assert_array_equal(out, x)


@settings(max_examples=15, deadline=None)
@given(st.floats(0.01, 0.5), st.integers(1, 6), st.sampled_from(list(Variant)))
def test_attack_stays_feasible_and_never_loses(eps, steps, variant):
    net = mlp([5, 6, 3], seed=1)
    rng = np.random.default_rng(0)
    x, y = rng.uniform(size=(4, 5)), np.array([0, 1, 2, 0])
    m = 1 if variant is Variant.INPUT_GRAD_REG else 4
    spec = ObjectiveSpec(variant, m=m, nbhd=Neighborhood(eps))
    x_star = pgd_inner_max(spec, net, x, y, PgdConfig(steps, 0.05, m_attack=4, epsilon=eps))
    assert Neighborhood(eps).contains(x_star, x)
    at_star = inner_value(spec.with_m(4), net, x, y, x_star).value
    at_x = inner_value(spec.with_m(4), net, x, y, x).value
    assert np.all(at_star >= at_x)


def test_deterministic_and_independent_of_batching(problem):
    net, x, y = problem
    spec = ObjectiveSpec(Variant.IG_SUM_NORM, m=4)
    cfg = PgdConfig(steps=4, m_attack=4)
    full = pgd_inner_max(spec, net, x, y, cfg, key=(9, 3, 0))
    again = pgd_inner_max(spec, net, x, y, cfg, key=(9, 3, 0))
    np.testing.assert_array_equal(full, again)
    part = pgd_inner_max(spec, net, x[2:4], y[2:4], cfg, key=(9, 3, 0), ids=[2, 3])
    np.testing.assert_allclose(part, full[2:4], atol=1e-15)
    other = pgd_inner_max(spec, net, x, y, cfg, key=(9, 3, 1))
    assert not np.array_equal(other, full)


def test_madry_trajectory_is_the_prediction_attack(problem):
    net, x, y = problem
    cfg = PgdConfig(steps=5, step_size=0.02)
    ta, tb = [], []
    a = pgd_inner_max(ObjectiveSpec(Variant.MADRY), net, x, y, cfg, key=(1,), trace=ta)
    b, _ = pgd_prediction_attack(net, x, y, cfg, key=(1,), trace=tb)
    np.testing.assert_array_equal(a, b)
    assert len(ta) == len(tb) == 6
    for (xa, va), (xb, vb) in zip(ta, tb):
        np.testing.assert_array_equal(xa, xb)
        np.testing.assert_array_equal(va, vb)


def test_larger_weight_never_lowers_the_attacked_value(problem):
    net, x, y = problem
    cfg = PgdConfig(steps=4, m_attack=4)
    prev = -np.inf
    for lam in (0.1, 0.5, 1.0, 4.0):
        spec = ObjectiveSpec(Variant.IG_NORM, lam=lam, m=4)
        val = inner_value(spec, net, x, y, pgd_inner_max(spec, net, x, y, cfg)).value
        assert np.all(val >= prev)
        prev = val


def _one_layer(rng, d):
    w, x = rng.normal(size=d), rng.uniform(size=d)
    y = int(rng.choice([-1, 1]))
    net = Network([["dense", d, 1]], (d,))
    net.set_params({"dense0.w": w[:, None], "dense0.b": np.zeros(1)})
    return net, w, x, y


@pytest.mark.parametrize("variant", [Variant.MADRY, Variant.IG_SUM_NORM])
def test_one_layer_attack_reaches_the_corner_maximum(variant):
    rng = np.random.default_rng(3)
    d, eps, beta = 3, 0.1, 0.1
    nb = Neighborhood(eps, clip=False)
    for trial in range(20):
        net, w, x, y = _one_layer(rng, d)
        spec = ObjectiveSpec(variant, beta=beta, m=16, nbhd=nb, loss_kind="logistic")
        cfg = PgdConfig(steps=20, step_size=0.02, m_attack=16, epsilon=eps)
        x_star = pgd_inner_max(spec, net, x[None], [y], cfg, key=(trial,))
        robust, ig_max = one_layer_closed_form(w, x, y, eps)
        got = inner_terms(spec.with_m(2048), net, x[None], [y], x_star).total.value[0]
        want = robust if variant is Variant.MADRY else robust + beta * ig_max
        assert abs(got - want) <= 1e-3


def test_one_layer_ig_norm_attack_stops_at_a_corner():
    # every corner is a local maximum of ||IG||_1 for sign ascent, so only the bound is exact
    rng = np.random.default_rng(4)
    d, eps = 3, 0.1
    nb = Neighborhood(eps, clip=False)
    for trial in range(20):
        net, w, x, y = _one_layer(rng, d)
        spec = ObjectiveSpec(Variant.IG_NORM, m=16, nbhd=nb, loss_kind="logistic")
        cfg = PgdConfig(steps=20, step_size=0.02, m_attack=16, epsilon=eps)
        x_star = pgd_inner_max(spec, net, x[None], [y], cfg, key=(trial,))
        np.testing.assert_allclose(np.abs(x_star[0] - x), eps, atol=1e-12)
        _, ig_max = one_layer_closed_form(w, x, y, eps)
        reg = inner_terms(spec.with_m(2048), net, x[None], [y], x_star).reg_term.value[0]
        assert reg <= ig_max + 1e-6


def test_large_margin_linear_model_resists_the_attack():
    w = np.array([1.0, -2.0, 0.5])
    net = Network([["dense", 3, 2]], (3,))
    net.set_params({"dense0.w": np.stack([-w, w], axis=1), "dense0.b": np.zeros(2)})
    x = np.array([[0.9, 0.1, 0.9], [0.1, 0.9, 0.1]])
    y = net.predict(x)
    # logit gap is 2|<w, x>| >= 2 (1.45) while the attack moves it by at most 2 * 0.1 * ||w||_1
    _, success = pgd_prediction_attack(net, x, y, PgdConfig(steps=20, epsilon=0.1))
    assert not success.any()


def test_ifia_properties(problem):
    net, x, y = problem
    pred = net.predict(x)
    cfg = IfiaConfig(k=3, k_metric=3, epsilon=0.1, alpha=0.02, iters=5, restarts=2,
                     m_attack=4, m_eval=8)
    res = ifia_topk(net, x, pred, cfg, key=(4,))
    assert Neighborhood(0.1).contains(res.x_pert, x)
    np.testing.assert_array_equal(net.predict(res.x_pert), pred)
    assert np.all((-1 <= res.kendall) & (res.kendall <= 1))
    assert np.all((0 <= res.topk_inter) & (res.topk_inter <= 1))
    again = ifia_topk(net, x, pred, cfg, key=(4,))
    np.testing.assert_array_equal(again.x_pert, res.x_pert)
    zero = ifia_topk(net, x, pred, IfiaConfig(k=3, k_metric=3, epsilon=0.0, iters=3, restarts=1,
                                              m_attack=4, m_eval=8))
    np.testing.assert_array_equal(zero.kendall, 1.0)
    np.testing.assert_array_equal(zero.topk_inter, 1.0)


def test_ifia_input_errors(problem):
    net, x, y = problem
    pred = net.predict(x)
    wrong = (pred + 1) % 3
    with pytest.raises(MisclassifiedSample):
        ifia_topk(net, x, wrong, IfiaConfig(k=3, k_metric=3, iters=1, restarts=1))
    with pytest.raises(ValueError):
        ifia_topk(net, x, pred, IfiaConfig(k=9, k_metric=3, iters=1, restarts=1))
    with pytest.raises(ValueError):
        IfiaConfig(method="deeplift")
    with pytest.raises(ValueError):
        PgdConfig(steps=0)
