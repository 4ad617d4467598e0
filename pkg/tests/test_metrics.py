import numpy as np
import pytest
from hypothesis import assume, given, settings, strategies as st
from hypothesis.extra.numpy import arrays
from scipy.stats import kendalltau as scipy_kendall

from robattr.adversary import IfiaConfig, PgdConfig
from robattr.metrics import (EvalReport, UndefinedCorrelation, evaluate, kendall_tau,
                             kendall_tau_bruteforce, kendall_tau_rows, topk_indices,
                             topk_intersection, topk_intersection_rows)
from robattr.nn import mlp


def scores(n_min=2, n_max=60):
    small = st.sampled_from([0.0, 1.0, 2.0, 3.0, -1.5])
    wide = st.floats(-1e3, 1e3, allow_nan=False, allow_subnormal=False)
    return st.integers(n_min, n_max).flatmap(
        lambda n: st.tuples(arrays(np.float64, n, elements=st.one_of(small, wide)),
                            arrays(np.float64, n, elements=st.one_of(small, wide))))


def defined(a, b):
    return np.ptp(a) > 0 and np.ptp(b) > 0


def test_known_values():
    assert kendall_tau([1, 2, 3, 4], [1, 2, 3, 4]) == 1.0
    assert kendall_tau([1, 2, 3, 4], [4, 3, 2, 1]) == -1.0
    # one discordant pair out of six
    assert np.isclose(kendall_tau([1, 2, 3, 4], [1, 2, 4, 3]), 4 / 6)
    # tau-b with ties: 4 concordant, 0 discordant, 1 tie in a, 1 tie in b
    assert np.isclose(kendall_tau([1, 1, 2, 3], [1, 2, 2, 3]), 4 / 5)


@settings(max_examples=200, deadline=None)
@given(scores())
def test_fast_equals_bruteforce_and_scipy(ab):
    a, b = ab
    assume(defined(a, b))
    fast = kendall_tau(a, b)
    assert abs(fast - kendall_tau_bruteforce(a, b)) <= 1e-12
    assert abs(fast - scipy_kendall(a, b).statistic) <= 1e-12


@settings(max_examples=100, deadline=None)
@given(scores())
def test_symmetry_and_antisymmetry(ab):
    a, b = ab
    assume(defined(a, b))
    t = kendall_tau(a, b)
    assert kendall_tau(b, a) == pytest.approx(t, abs=1e-15)
    assert kendall_tau(a, -b) == pytest.approx(-t, abs=1e-15)
    assert -1.0 <= t <= 1.0


@settings(max_examples=100, deadline=None)
@given(scores(), st.integers(-20, 20))
def test_invariant_under_monotone_transforms(ab, exponent):
    a, b = ab
    assume(defined(a, b))
    # both maps are exact in floating point on these inputs, so no ties are created
    b = np.where(np.abs(b) < 1e-3, 0.0, b)
    assume(np.ptp(b) > 0)
    t = kendall_tau(a, b)
    assert kendall_tau(a * 2.0 ** exponent, b ** 3) == pytest.approx(t, abs=1e-12)


def test_batched_rows_match_single_rows(rng):
    a, b = rng.normal(size=(7, 50)), rng.integers(0, 4, size=(7, 50)).astype(float)
    rows = kendall_tau_rows(a, b)
    for i in range(7):
        assert rows[i] == pytest.approx(kendall_tau_bruteforce(a[i], b[i]), abs=1e-12)


def test_undefined_and_invalid_inputs():
    with pytest.raises(UndefinedCorrelation):
        kendall_tau([1, 1, 1], [1, 2, 3])
    with pytest.raises(UndefinedCorrelation):
        kendall_tau_bruteforce([1, 1, 1], [1, 2, 3])
    out = kendall_tau_rows([[1, 1, 1], [1, 2, 3]], [[1, 2, 3], [1, 2, 3]], undefined="nan")
    assert np.isnan(out[0]) and out[1] == 1.0
    with pytest.raises(ValueError):
        kendall_tau([1], [1])
    with pytest.raises(ValueError):
        kendall_tau([1, 2], [1, 2, 3])
    with pytest.raises(ValueError):
        kendall_tau([1, np.nan], [1, 2])


def test_long_vectors_stay_exact(rng):
    n = 784
    a = rng.normal(size=n)
    b = a + rng.normal(size=n)
    b[:100] = 0.0
    assert abs(kendall_tau(a, b) - kendall_tau_bruteforce(a, b)) <= 1e-12


@settings(max_examples=100, deadline=None)
@given(scores(1, 40), st.data())
def test_topk_matches_set_oracle(ab, data):
    a, b = ab
    n = a.size
    k = data.draw(st.integers(1, n))
    top = lambda v: set(sorted(range(n), key=lambda i: (-v[i], i))[:k])
    assert topk_intersection(a, b, k) == len(top(a) & top(b)) / k
    assert topk_intersection(a, a, k) == 1.0


def test_topk_ties_prefer_lower_index():
    np.testing.assert_array_equal(topk_indices([[1.0, 3.0, 3.0, 0.0, 3.0]], 2), [[1, 2]])
    with pytest.raises(ValueError):
        topk_indices([[1.0, 2.0]], 3)
    assert topk_intersection_rows([[3, 2, 1, 0]], [[0, 1, 2, 3]], 2)[0] == 0.0


def test_report_validation_and_round_trip():
    rows = [{"index": 0, "label": 3, "clean_pred": 3, "clean_correct": True, "adv_correct": False,
             "kendall": 0.25, "topk_inter": 0.5},
            {"index": 1, "label": 1, "clean_pred": 2, "clean_correct": False, "adv_correct": False,
             "kendall": None, "topk_inter": None}]
    rep = EvalReport(0.5, 0.0, 0.5, 0.25, rows, 0.25, {"seed": 1})
    assert EvalReport.from_json(rep.to_json()) == rep
    assert EvalReport.rows_from_csv(rep.to_csv()) == rows
    with pytest.raises(ValueError):
        EvalReport(1.5, 0.0, None, None)
    with pytest.raises(ValueError):
        EvalReport(0.5, 0.0, None, 1.2)
    with pytest.raises(ValueError):
        EvalReport(0.5, 0.0, 1.1, None)


def _small_eval(eps, seed=0):
    rng = np.random.default_rng(2)
    net = mlp([16, 8, 3], seed=2)
    x = rng.uniform(size=(12, 16))
    y = net.predict(x)
    y[:3] = (y[:3] + 1) % 3
    pgd = PgdConfig(steps=5, step_size=0.05, epsilon=eps)
    ifia = IfiaConfig(k=4, k_metric=4, epsilon=eps, alpha=0.02, iters=3, restarts=2,
                      m_attack=4, m_eval=8)
    return evaluate(net, x, y, pgd, ifia, seed=seed, chunk=5)


def test_evaluate_population_and_zero_radius():
    rep = _small_eval(0.0)
    assert rep.nat_acc == 0.75 and rep.adv_acc == rep.nat_acc
    assert rep.kendall == 1.0 and rep.topk_inter == 1.0
    wrong = [r for r in rep.per_sample if not r["clean_correct"]]
    assert len(wrong) == 3 and all(r["kendall"] is None for r in wrong)


def test_evaluate_is_deterministic():
    a, b = _small_eval(0.2, seed=3), _small_eval(0.2, seed=3)
    assert a.to_json() == b.to_json()
    assert a.adv_acc <= a.nat_acc


def test_evaluate_rejects_empty_input():
    with pytest.raises(ValueError):
        evaluate(mlp([2, 2]), np.zeros((0, 2)), np.zeros(0, dtype=int), PgdConfig(), IfiaConfig())
