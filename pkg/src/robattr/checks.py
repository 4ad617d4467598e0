"""Verification suites: numerical identities checked against independent oracles.

Each suite returns a :class:`CheckResult`.  The ``check`` CLI subcommand runs
them all and exits non-zero when any fails.
"""

from __future__ import annotations

import itertools
import math
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import autodiff as ad
from .attribution import SUM, batch_loss_fn, completeness_residual, ig_input, one_norm_pow, size
from .duality import (constrained_sup, correspondence_check, dual_correspondence,
                      lagrangian_value, loss_difference_problem, random_problem, row_max_value,
                      wasserstein_reduction_check)
from .metrics import kendall_tau_bruteforce, kendall_tau_rows, topk_intersection_rows
from .nn import Network, loss as batch_loss, mlp
from .objectives import (ONE_LAYER_LOSSES, Neighborhood, ObjectiveSpec, Variant,
                         inner_value, objective_grad, one_layer_closed_form)

FD_STEP = 1e-5
FD_RTOL = 1e-4
COMPLETENESS_RTOL = 1e-3


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str
    stats: dict = field(default_factory=dict)
    seconds: float = 0.0

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'}  {self.name:<28} {self.detail} ({self.seconds:.1f}s)"


def _timed(fn: Callable[..., CheckResult]):
    def run(*args, **kwargs) -> CheckResult:
        t = time.perf_counter()
        res = fn(*args, **kwargs)
        res.seconds = time.perf_counter() - t
        return res
    run.__name__ = fn.__name__
    run.__doc__ = fn.__doc__
    return run


# -- finite differences ---------------------------------------------------------------

def numerical_grad(f: Callable[[np.ndarray], float], x: np.ndarray, h: float = FD_STEP) -> np.ndarray:
    """Central differences of a scalar function, one coordinate at a time."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        hi = f(x)
        flat[i] = old - h
        lo = f(x)
        flat[i] = old
        gflat[i] = (hi - lo) / (2 * h)
    return g


def rel_error(a, b, floor: float = 1e-3) -> float:
    a, b = np.ravel(a), np.ravel(b)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), floor))


def _away(rng, shape, gap=0.1, scale=1.0):
    """Random values with |v| >= gap, keeping clear of kinks at 0."""
    v = rng.uniform(gap, scale, size=shape)
    return v * rng.choice([-1.0, 1.0], size=shape)


def _distinct(rng, shape, gap=0.05):
    n = int(np.prod(shape))
    return (rng.permutation(n) * gap + rng.uniform(0, gap / 4, n)).reshape(shape) - n * gap / 2


def primitive_cases() -> dict[str, Callable]:
    """Builders: rng -> (input arrays, function of nodes)."""
    A = np.array
    return {
        "add": lambda r: ([r.normal(size=(3, 4)), r.normal(size=(4,))], lambda a, b: a + b),
        "sub": lambda r: ([r.normal(size=(3, 1)), r.normal(size=(3, 4))], lambda a, b: a - b),
        "mul": lambda r: ([r.normal(size=(3, 4)), r.normal(size=(3, 4))], lambda a, b: a * b),
        "div": lambda r: ([r.normal(size=(3, 4)), _away(r, (3, 4), 0.5, 2.0)], lambda a, b: a / b),
        "neg": lambda r: ([r.normal(size=(5,))], lambda a: -a),
        "maximum": lambda r: ([(_x := r.normal(size=(6,))), _x + _away(r, (6,))],
                              lambda a, b: ad.maximum(a, b)),
        "power": lambda r: ([r.uniform(0.5, 2.0, size=(5,))], lambda a: ad.power(a, 2.5)),
        "exp": lambda r: ([r.normal(size=(5,))], ad.exp),
        "log": lambda r: ([r.uniform(0.5, 3.0, size=(5,))], ad.log),
        "abs": lambda r: ([_away(r, (6,))], ad.abs),
        "relu": lambda r: ([_away(r, (6,))], ad.relu),
        "sigmoid": lambda r: ([r.normal(size=(5,))], ad.sigmoid),
        "softplus": lambda r: ([r.normal(size=(5,)) * 3], ad.softplus),
        "clamp": lambda r: ([A([-2.0, -0.5, 0.3, 0.7, 1.8]) + r.uniform(-0.05, 0.05, 5)],
                            lambda a: ad.clamp(a, -1.0, 1.0)),
        "reshape": lambda r: ([r.normal(size=(2, 6))], lambda a: ad.reshape(a, (3, 4))),
        "transpose": lambda r: ([r.normal(size=(2, 3, 4))], lambda a: ad.transpose(a, (2, 0, 1))),
        "broadcast_to": lambda r: ([r.normal(size=(1, 4))], lambda a: ad.broadcast_to(a, (3, 4))),
        "matmul": lambda r: ([r.normal(size=(3, 4)), r.normal(size=(4, 2))], ad.matmul),
        "matvec": lambda r: ([r.normal(size=(3, 4)), r.normal(size=(4,))], ad.matmul),
        "sum_axis": lambda r: ([r.normal(size=(3, 4))], lambda a: ad.sum(a, axis=1)),
        "mean": lambda r: ([r.normal(size=(3, 4))], lambda a: ad.mean(a, axis=0)),
        "max_reduce": lambda r: ([_distinct(r, (3, 4))], lambda a: ad.max(a, axis=1)),
        "getitem": lambda r: ([r.normal(size=(4, 5))], lambda a: a[1:3, ::2]),
        "im2col": lambda r: ([r.normal(size=(1, 2, 4, 4))], lambda a: ad.im2col(a, 3)),
        "logsumexp": lambda r: ([r.normal(size=(3, 5))], lambda a: ad.logsumexp(a, axis=1)),
        "softmax_xent": lambda r: ([r.normal(size=(4, 5))],
                                   lambda a: ad.softmax_cross_entropy(a, np.array([0, 2, 4, 1]))),
        "one_norm": lambda r: ([_away(r, (3, 4))], lambda a: ad.one_norm(a, axis=1)),
    }


def _check_primitive(build, rng) -> tuple[float, float]:
    arrays, fn = build(rng)
    out_shape = fn(*[ad.constant(a) for a in arrays]).shape
    weight = rng.normal(size=out_shape)
    direction = [rng.normal(size=a.shape) for a in arrays]

    def scalar(*vals):
        return ad.sum(ad.mul(fn(*vals), weight))

    def value(i):
        def f(xi):
            vals = [ad.constant(a) for a in arrays]
            vals[i] = ad.constant(xi)
            return float(scalar(*vals).value)
        return f

    def dir_grad(i):
        def f(xi):
            vals = [ad.variable(a) for a in arrays]
            vals[i] = ad.variable(xi)
            gs = ad.grad(scalar(*vals), vals, create_graph=False)
            return float(sum(np.sum(g.value * d) for g, d in zip(gs, direction)))
        return f

    nodes = [ad.variable(a) for a in arrays]
    first = ad.grad(scalar(*nodes), nodes, create_graph=True)
    g_dir = ad.add(*[ad.sum(ad.mul(g, d)) for g, d in zip(first, direction)]) if len(first) > 1 \
        else ad.sum(ad.mul(first[0], direction[0]))
    second = ad.grad(g_dir, nodes, create_graph=False)
    err1 = max(rel_error(first[i].value, numerical_grad(value(i), arrays[i])) for i in range(len(arrays)))
    err2 = max(rel_error(second[i].value, numerical_grad(dir_grad(i), arrays[i]))
               for i in range(len(arrays)))
    return err1, err2


def _nested_cases() -> dict[str, Callable]:
    """Composite second-order quantities used by the training objectives."""

    def ig_norm_theta(rng):
        net = mlp([3, 4, 3], seed=int(rng.integers(1 << 30)), smooth=True)
        x = rng.uniform(size=(2, 3))
        xp = np.clip(x + rng.uniform(-0.3, 0.3, size=x.shape), 0, 1)
        y = rng.integers(0, 3, size=2)
        spec = ObjectiveSpec(Variant.IG_NORM, lam=1.0, m=3)
        return net, lambda: objective_grad(spec, net, x, y, xp)[0], \
            lambda: float(np.mean(inner_value(spec, net, x, y, xp).value))

    def ig_sum_norm_theta(rng):
        net = mlp([3, 3, 2], seed=int(rng.integers(1 << 30)), smooth=True)
        x = rng.uniform(size=(2, 3))
        xp = np.clip(x + rng.uniform(-0.3, 0.3, size=x.shape), 0, 1)
        y = rng.integers(0, 2, size=2)
        spec = ObjectiveSpec(Variant.IG_SUM_NORM, beta=0.5, m=3)
        return net, lambda: objective_grad(spec, net, x, y, xp)[0], \
            lambda: float(np.mean(inner_value(spec, net, x, y, xp).value))

    def grad_reg_theta(rng):
        net = mlp([3, 3, 2], seed=int(rng.integers(1 << 30)), smooth=True)
        x = rng.uniform(size=(2, 3))
        xp = np.clip(x + rng.uniform(-0.2, 0.2, size=x.shape), 0, 1)
        y = rng.integers(0, 2, size=2)
        spec = ObjectiveSpec(Variant.INPUT_GRAD_REG, lam_prime=0.3, q=2.0, m=1,
                             nbhd=Neighborhood(0.2))
        return net, lambda: objective_grad(spec, net, x, y, xp)[0], \
            lambda: float(np.mean(inner_value(spec, net, x, y, xp).value))

    return {"ig_norm_dtheta": ig_norm_theta, "ig_sum_norm_dtheta": ig_sum_norm_theta,
            "grad_reg_dtheta": grad_reg_theta}


def _check_nested(build, rng) -> float:
    net, analytic, value = build(rng)
    grads = analytic()
    worst = 0.0
    base = net.param_values()
    for name, arr in base.items():
        def f(v, name=name):
            net.set_params({**base, name: v})
            return value()
        fd = numerical_grad(f, arr)
        net.set_params(base)
        worst = max(worst, rel_error(grads[name], fd))
    return worst


def _ig_x_prime_case(rng) -> float:
    """d ||IG(x, x')||_1 / dx' through the double backward, against differences."""
    net = mlp([4, 5, 3], seed=int(rng.integers(1 << 30)), smooth=True)
    x = rng.uniform(size=(2, 4))
    xp = np.clip(x + rng.uniform(-0.3, 0.3, size=x.shape), 0, 1)
    y = rng.integers(0, 3, size=2)
    spec = ObjectiveSpec(Variant.IG_NORM, m=5)
    node = ad.variable(xp)
    (g,) = ad.grad(ad.sum(inner_value(spec, net, x, y, node)), [node], create_graph=False)
    fd = numerical_grad(lambda v: float(np.sum(inner_value(spec, net, x, y, v).value)), xp)
    return rel_error(g.value, fd)


@_timed
def autodiff_suite(seeds: int = 50) -> CheckResult:
    """Every primitive VJP, its double backward, and the nested objective gradients."""
    worst = {}
    for name, build in primitive_cases().items():
        e1 = e2 = 0.0
        for s in range(seeds):
            a, b = _check_primitive(build, np.random.default_rng([11, s]))
            e1, e2 = max(e1, a), max(e2, b)
        worst[name] = e1
        worst[name + "^2"] = e2
    for name, build in _nested_cases().items():
        worst[name] = max(_check_nested(build, np.random.default_rng([12, s])) for s in range(seeds))
    worst["ig_norm_dx'"] = max(_ig_x_prime_case(np.random.default_rng([13, s])) for s in range(seeds))
    bad = {k: v for k, v in worst.items() if not v <= FD_RTOL}
    top = max(worst, key=worst.get)
    detail = f"{len(worst)} checks x {seeds} seeds, worst rel err {worst[top]:.2e} ({top})"
    if bad:
        detail += f"; failing: {sorted(bad)}"
    return CheckResult("autodiff_fd", not bad, detail, worst)


# -- completeness and the size-function identities ------------------------------------

def _random_smooth_net(rng, d=None, classes=None) -> Network:
    d = d or int(rng.integers(4, 12))
    classes = classes or int(rng.integers(2, 6))
    hidden = [int(rng.integers(4, 16)) for _ in range(int(rng.integers(1, 3)))]
    return mlp([d, *hidden, classes], seed=int(rng.integers(1 << 30)), smooth=True)


def _loss_fn(net, y):
    return batch_loss_fn(net, np.atleast_1d(y))


@_timed
def completeness_suite(nets: int = 20, m_hi: int = 1024, m_lo: int = 64) -> CheckResult:
    """IG sums to f(x') - f(x) up to the Riemann error, which shrinks with m."""
    ratios, improved = [], 0
    for s in range(nets):
        rng = np.random.default_rng([21, s])
        net = _random_smooth_net(rng)
        d, c = net.input_shape[0], net.num_classes
        x, xp = rng.uniform(size=d), rng.uniform(size=d)
        f = _loss_fn(net, rng.integers(0, c))
        hi = ig_input(f, x, xp, m_hi, create_graph=False)
        lo = ig_input(f, x, xp, m_lo, create_graph=False)
        r_hi, r_lo = float(completeness_residual(hi)), float(completeness_residual(lo))
        ratios.append(r_hi / abs(hi.target_value - hi.baseline_value))
        improved += r_hi < r_lo
    worst = max(ratios)
    ok = worst < COMPLETENESS_RTOL and improved >= math.ceil(0.9 * nets)
    return CheckResult("completeness", ok,
                       f"worst residual/|df| at m={m_hi}: {worst:.2e}; "
                       f"residual({m_hi}) < residual({m_lo}) in {improved}/{nets}",
                       {"worst_ratio": worst, "improved": improved})


def richardson_tolerance(f, x, xp, m: int, batched: bool = True, safety: float = 1.1) -> np.ndarray:
    """Riemann error of the m-segment IG sum estimated from the m and 2m sums.

    The left-endpoint error behaves like C/m, so ``2 |S_m - S_2m|`` estimates
    it without ever evaluating f at the far end of the path.
    """
    axes = tuple(range(1, np.ndim(x))) if batched else None
    s_m = ig_input(f, x, xp, m, batched=batched, create_graph=False).values.sum(axis=axes)
    s_2m = ig_input(f, x, xp, 2 * m, batched=batched, create_graph=False).values.sum(axis=axes)
    return safety * 2.0 * np.abs(s_m - s_2m) + 1e-12


@_timed
def sum_identity_suite(trials: int = 100, m: int = 1024) -> CheckResult:
    """l(x) + sum(IG(x, x')) equals l(x') within the measured Riemann tolerance."""
    worst = 0.0
    for s in range(trials):
        rng = np.random.default_rng([31, s])
        net = _random_smooth_net(rng)
        d, c = net.input_shape[0], net.num_classes
        x, xp = rng.uniform(size=(1, d)), rng.uniform(size=(1, d))
        y = rng.integers(0, c, size=1)
        f = _loss_fn(net, y)
        amap = ig_input(f, x, xp, m, batched=True, create_graph=False)
        lhs = float(batch_loss(net, x, y).value[0] + size(SUM, amap).value[0])
        madry = float(inner_value(ObjectiveSpec(Variant.MADRY, m=m), net, x, y, xp).value[0])
        tol = float(richardson_tolerance(f, x, xp, m)[0])
        worst = max(worst, abs(lhs - madry) / tol)
    return CheckResult("sum_identity", worst <= 1.0,
                       f"{trials} triples at m={m}, worst gap / measured tolerance {worst:.3f}",
                       {"worst": worst})


def holder_maximizer(g: np.ndarray, eps: float, q: float) -> np.ndarray:
    """Delta maximizing ||Delta * g||_1 over the l_p ball of radius eps (1/p + 1/q = 1)."""
    if q == 1:
        return eps * np.sign(g)
    norm = np.linalg.norm(g, ord=q)
    return eps * np.sign(g) * (np.abs(g) / norm) ** (q - 1)


def _ball_samples(rng, n, d, eps, q):
    if q == 1:
        return rng.uniform(-eps, eps, size=(n, d))
    u = rng.normal(size=(n, d))
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    return eps * u * rng.uniform(size=(n, 1)) ** (1.0 / d)


@_timed
def grad_reg_suite(seeds: int = 20, samples: int = 10_000, eps: float = 0.1) -> CheckResult:
    """With one segment the regularizer is maximized at eps^q ||grad||_q^q."""
    worst_gap, violations = 0.0, 0
    for q in (1.0, 2.0):
        for s in range(seeds):
            rng = np.random.default_rng([41, int(q), s])
            net = _random_smooth_net(rng)
            d, c = net.input_shape[0], net.num_classes
            x = rng.uniform(size=d)
            y = rng.integers(0, c)
            f = _loss_fn(net, y)
            xn = ad.variable(x[None])
            (g,) = ad.grad(ad.sum(f(xn)), [xn], create_graph=False)
            g = g.value[0]
            target = eps ** q * np.sum(np.abs(g) ** q)
            reg = one_norm_pow(q)
            best = x + holder_maximizer(g, eps, q)
            val = float(size(reg, ig_input(f, x, best, 1, create_graph=False)).value)
            worst_gap = max(worst_gap, abs(val - target) / max(1.0, target))
            xs = x + _ball_samples(rng, samples, d, eps, q)
            amap = ig_input(f, np.broadcast_to(x, xs.shape), xs, 1, batched=True, create_graph=False)
            vals = size(reg, amap).value
            violations += int(np.sum(vals > target * (1 + 1e-12) + 1e-15))
    ok = worst_gap <= 1e-8 and violations == 0
    return CheckResult("grad_reg", ok,
                       f"q in {{1,2}} x {seeds} seeds: maximizer gap {worst_gap:.1e}, "
                       f"{violations} sampled values above the bound", {"gap": worst_gap})


@_timed
def surrogate_suite(trials: int = 10_000, batch: int = 500, eps: float = 0.3) -> CheckResult:
    """The loss-output surrogate never falls below the adversarial loss."""
    violations, count = 0, 0
    for s in range(math.ceil(trials / batch)):
        rng = np.random.default_rng([51, s])
        net = _random_smooth_net(rng) if s % 2 else mlp([6, 8, 4], seed=s)
        d, c = net.input_shape[0], net.num_classes
        n = min(batch, trials - count)
        x = rng.uniform(size=(n, d))
        xp = np.clip(x + rng.uniform(-eps, eps, size=x.shape), 0, 1)
        y = rng.integers(0, c, size=n)
        surrogate = inner_value(ObjectiveSpec(Variant.LOSS_OUTPUT), net, x, y, xp).value
        madry = inner_value(ObjectiveSpec(Variant.MADRY), net, x, y, xp).value
        violations += int(np.sum(surrogate < madry))
        count += n
    return CheckResult("surrogate", violations == 0,
                       f"{count} trials, {violations} violations", {"violations": violations})


# -- one-layer equivalence --------------------------------------------------------------

_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(64)


def one_layer_ig_quadrature(w, x, xp, y, g_prime) -> np.ndarray:
    """IG of g(-y <w, .>) from x to xp, with the path integral done by Gauss-Legendre."""
    t = 0.5 * (_GL_NODES + 1.0)
    z = -y * (w @ x)
    delta = -y * (w @ (xp - x))
    integral = 0.5 * np.sum(_GL_WEIGHTS * g_prime(z + t * delta))
    return (xp - x) * (-y * w) * integral


@_timed
def one_layer_suite(seeds: int = 50, eps: float = 0.1) -> CheckResult:
    """Corner enumeration of ||IG||_1 and of the loss matches the one-layer closed forms."""
    worst_ig, worst_loss = 0.0, 0.0
    for gname, (g, g_prime) in ONE_LAYER_LOSSES.items():
        for d in (2, 3, 4):
            for s in range(seeds):
                rng = np.random.default_rng([61, d, s, len(gname)])
                w, x = rng.normal(size=d), rng.uniform(size=d)
                y = int(rng.choice([-1, 1]))
                robust, ig_max = one_layer_closed_form(w, x, y, eps, gname)
                best_ig, best_loss = -np.inf, -np.inf
                for signs in itertools.product((-1.0, 1.0), repeat=d):
                    xp = x + eps * np.array(signs)
                    best_ig = max(best_ig, np.abs(one_layer_ig_quadrature(w, x, xp, y, g_prime)).sum())
                    best_loss = max(best_loss, float(g(-y * (w @ xp))))
                worst_ig = max(worst_ig, abs(best_ig - ig_max))
                worst_loss = max(worst_loss, abs(best_loss - robust))
    ok = worst_ig <= 1e-6 and worst_loss <= 1e-9
    return CheckResult("one_layer", ok,
                       f"max |corner IG - closed form| {worst_ig:.1e}, loss {worst_loss:.1e}",
                       {"ig": worst_ig, "loss": worst_loss})


# -- finite-space duality ---------------------------------------------------------------

@_timed
def duality_suite(instances: int = 100, max_n: int = 5) -> CheckResult:
    """Exchange identity, strong duality, multiplier correspondence and the Wasserstein reduction."""
    worst = {"exchange": 0.0, "duality": 0.0}
    failures = []
    for s in range(instances):
        rng = np.random.default_rng([71, s])
        n = int(rng.integers(2, max_n + 1))
        prob = random_problem(n, rng)
        try:
            for gamma in (0.0, float(rng.uniform(0, 2)), float(rng.uniform(2, 10))):
                lagrangian_value(prob, gamma)
            _, primal, dual = dual_correspondence(prob)
            worst["duality"] = max(worst["duality"], abs(primal - dual))
            correspondence_check(prob)
            losses = rng.normal(size=n)
            wasserstein_reduction_check(loss_difference_problem(prob.P, prob.c, losses, prob.rho), losses)
        except AssertionError as e:
            failures.append(f"instance {s}: {e}")
        lhs, _ = constrained_sup(prob, math.inf)
        worst["exchange"] = max(worst["exchange"], abs(lhs - row_max_value(prob, 0.0)))
    ok = not failures and max(worst.values()) <= 1e-9
    detail = (f"{instances} instances (n <= {max_n}): exchange err {worst['exchange']:.1e}, "
              f"duality gap {worst['duality']:.1e}")
    if failures:
        detail += f"; {len(failures)} failures, first: {failures[0]}"
    return CheckResult("duality_finite", ok, detail, worst)


# -- metric oracles ---------------------------------------------------------------------

@_timed
def metrics_suite(vectors: int = 200) -> CheckResult:
    """Fast Kendall tau-b against pair counting; top-k against explicit sets."""
    worst, topk_bad = 0.0, 0
    for s in range(vectors):
        rng = np.random.default_rng([81, s])
        n = int(rng.integers(2, 300))
        levels = int(rng.integers(2, 8))
        a = rng.integers(0, levels, n).astype(float) if s % 3 == 0 else rng.normal(size=n)
        b = rng.integers(0, levels, n).astype(float) if s % 2 == 0 else rng.normal(size=n)
        if np.ptp(a) == 0 or np.ptp(b) == 0:
            a[0], b[0] = a[0] + 1.0, b[0] + 1.0
        worst = max(worst, abs(float(kendall_tau_rows(a[None], b[None])[0]) - kendall_tau_bruteforce(a, b)))
        k = int(rng.integers(1, n + 1))
        key_a = sorted(range(n), key=lambda i: (-a[i], i))[:k]
        key_b = sorted(range(n), key=lambda i: (-b[i], i))[:k]
        expected = len(set(key_a) & set(key_b)) / k
        topk_bad += float(topk_intersection_rows(a[None], b[None], k)[0]) != expected
    ok = worst <= 1e-12 and topk_bad == 0
    return CheckResult("metrics_oracles", ok,
                       f"{vectors} vectors: kendall max diff {worst:.1e}, top-k mismatches {topk_bad}",
                       {"kendall": worst, "topk_mismatch": topk_bad})


SUITES = {
    "autodiff": autodiff_suite,
    "completeness": completeness_suite,
    "sum_identity": sum_identity_suite,
    "grad_reg": grad_reg_suite,
    "surrogate": surrogate_suite,
    "one_layer": one_layer_suite,
    "duality": duality_suite,
    "metrics": metrics_suite,
}


def run_all(names=None, progress=None) -> list[CheckResult]:
    results = []
    for name in names or SUITES:
        res = SUITES[name]()
        results.append(res)
        if progress is not None:
            progress(res)
    return results
