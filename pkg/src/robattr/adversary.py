"""Projected sign-gradient attacks.

* :func:`pgd_inner_max` maximizes an objective's inner value over the
  neighborhood (the training-time attack step).
* :func:`pgd_prediction_attack` maximizes cross-entropy (evaluation attack).
* :func:`ifia_topk` pushes attribution mass out of the clean top-k features
  while keeping the predicted class.

All attacks are batched: ``x`` has a leading sample axis and every sample is
attacked independently.  Randomness is drawn per sample from
``default_rng([*key, id])`` so results do not depend on how samples are
grouped into batches.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .attribution import batch_loss_fn, ig_input, importance, saliency
from .metrics import kendall_tau_rows, topk_indices, topk_intersection_rows
from .nn import Network, loss as batch_loss
from .objectives import Neighborhood, ObjectiveSpec, inner_value


class MisclassifiedSample(ValueError):
    pass


@dataclass(frozen=True)
class PgdConfig:
    steps: int = 10
    step_size: float = 0.03
    random_start: bool = True
    m_attack: int = 8
    epsilon: float = 0.3

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if not self.step_size > 0:
            raise ValueError("step_size must be > 0")
        if self.m_attack < 1:
            raise ValueError("m_attack must be >= 1")
        if self.epsilon < 0:
            raise ValueError("epsilon must be >= 0")


@dataclass(frozen=True)
class IfiaConfig:
    k: int = 200
    epsilon: float = 0.3
    alpha: float = 0.01
    iters: int = 100
    restarts: int = 3
    m_attack: int = 8
    m_eval: int = 64
    k_metric: int = 100
    method: str = "ig"
    dissimilarity: str = "kendall_tau"

    def __post_init__(self):
        if self.k < 1 or self.k_metric < 1:
            raise ValueError("k must be >= 1")
        if self.iters < 0 or self.restarts < 1:
            raise ValueError("need iters >= 0 and restarts >= 1")
        if self.method not in ("ig", "sg"):
            raise ValueError(f"unknown importance method {self.method!r}")
        if self.dissimilarity != "kendall_tau":
            raise ValueError("only kendall_tau selection is implemented")


def sample_rngs(key, ids) -> list[np.random.Generator]:
    return [np.random.default_rng([*map(int, key), int(i)]) for i in ids]


def _ids(x, ids):
    return np.arange(len(x)) if ids is None else np.asarray(ids)


def _uniform_start(x, eps, key, ids) -> np.ndarray:
    noise = np.stack([r.uniform(-eps, eps, size=x.shape[1:]) for r in sample_rngs(key, ids)])
    return x + noise


ValueGrad = Callable[..., tuple[np.ndarray, np.ndarray | None]]


def _pgd(value_grad: ValueGrad, x: np.ndarray, x0: np.ndarray, nbhd: Neighborhood,
         steps: int, step_size: float, trace: list | None = None):
    """Sign-gradient ascent with projection, tracking the best iterate per sample.

    The clean point is always a candidate, so the result is never worse than
    ``x``.  Ties keep the earlier candidate.
    """
    xt = nbhd.project(x0, x)
    start_is_clean = np.array_equal(xt, x)
    if start_is_clean:
        best_x, best_v = None, None
    else:
        best_x, best_v = x.copy(), value_grad(x, False)[0]
    for t in range(steps + 1):
        v, g = value_grad(xt, t < steps)
        if trace is not None:
            trace.append((xt.copy(), v.copy()))
        if best_v is None:
            best_x, best_v = xt.copy(), v.copy()
        else:
            better = v > best_v
            best_x[better] = xt[better]
            best_v = np.where(better, v, best_v)
        if t == steps:
            break
        xt = nbhd.project(xt + step_size * np.sign(g), x)
    return best_x, best_v


def _value_grad(fn: Callable[[ad.Node], ad.Node]) -> ValueGrad:
    def vg(xp: np.ndarray, need_grad: bool = True):
        node = ad.variable(xp)
        val = fn(node)
        if not need_grad:
            return val.value, None
        (g,) = ad.grad(ad.sum(val), [node], create_graph=False)
        return val.value, g.value
    return vg


def pgd_inner_max(spec: ObjectiveSpec, net: Network, x, y, cfg: PgdConfig, key=(0,),
                  ids=None, trace: list | None = None) -> np.ndarray:
    """Approximate maximizer x* of the inner value over the neighborhood of each sample."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y)
    ids = _ids(x, ids)
    if not spec.depends_on_x_prime or cfg.epsilon == 0:
        return x.copy()
    attack_spec = spec.with_m(cfg.m_attack)
    nbhd = Neighborhood(cfg.epsilon, spec.nbhd.lo, spec.nbhd.hi, spec.nbhd.clip)
    xc = ad.constant(x)
    vg = _value_grad(lambda xp: inner_value(attack_spec, net, xc, y, xp))
    x0 = _uniform_start(x, cfg.epsilon, key, ids) if cfg.random_start else x
    best_x, _ = _pgd(vg, x, x0, nbhd, cfg.steps, cfg.step_size, trace)
    return best_x


def pgd_prediction_attack(net: Network, x, y, cfg: PgdConfig, key=(0,), ids=None,
                          loss_kind: str = "cross_entropy_nll", clip: bool = True,
                          trace: list | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Cross-entropy PGD.  Returns the best-loss iterate and a per-sample success flag."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y)
    ids = _ids(x, ids)
    nbhd = Neighborhood(cfg.epsilon, clip=clip)
    vg = _value_grad(lambda xp: batch_loss(net, xp, y, loss_kind))
    x0 = _uniform_start(x, cfg.epsilon, key, ids) if cfg.random_start else x
    x_adv, _ = _pgd(vg, x, x0, nbhd, cfg.steps, cfg.step_size, trace)
    return x_adv, net.predict(x_adv) != y


@dataclass
class IfiaResult:
    x_pert: np.ndarray
    kendall: np.ndarray
    topk_inter: np.ndarray
    restart: np.ndarray


def _importance_graph(net: Network, y, xt: ad.Node, method: str, m: int, loss_kind: str):
    """Importance scores (with graph) at ``xt``: |IG from zero| or |gradient|."""
    f = batch_loss_fn(net, y, loss_kind)
    if method == "ig":
        return ig_input(f, np.zeros(xt.shape), xt, m, batched=True, create_graph=True).scores
    pts = ad.track(xt)
    (g,) = ad.grad(ad.sum(f(pts)), [pts], create_graph=True)
    return g


def _maps(net, x, y, method, m, loss_kind):
    return saliency(net, x, y, method, m, loss_kind)


def ifia_topk(net: Network, x, y, cfg: IfiaConfig, key=(0,), ids=None,
              loss_kind: str = "cross_entropy_nll") -> IfiaResult:
    """Top-k feature-importance attack on correctly classified samples.

    Each iteration takes a signed step that lowers the total importance of the
    clean top-k features, then projects back into the neighborhood.  Among the
    iterates that keep the predicted label, the one with the lowest Kendall tau
    against the clean map is kept (maps at ``m_attack`` segments).  The kept
    points of all restarts are re-scored at ``m_eval`` segments and the lowest
    Kendall tau wins.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y)
    ids = _ids(x, ids)
    b = len(x)
    feats = int(np.prod(net.input_shape[-2:])) if len(net.input_shape) == 3 else int(np.prod(net.input_shape))
    if not 1 <= cfg.k <= feats or not 1 <= cfg.k_metric <= feats:
        raise ValueError(f"k must lie in [1, {feats}]")
    wrong = np.flatnonzero(net.predict(x) != y)
    if wrong.size:
        raise MisclassifiedSample(f"samples {ids[wrong].tolist()} are misclassified at the clean input")
    nbhd = Neighborhood(cfg.epsilon)
    m_att = 1 if cfg.method == "sg" else cfg.m_attack
    m_eval = 1 if cfg.method == "sg" else cfg.m_eval

    clean_eval = _maps(net, x, y, cfg.method, m_eval, loss_kind)
    clean_att = clean_eval if m_att == m_eval else _maps(net, x, y, cfg.method, m_att, loss_kind)
    mask = np.zeros((b, feats))
    np.put_along_axis(mask, topk_indices(clean_eval, cfg.k), 1.0, axis=1)
    if len(net.input_shape) == 3:
        mask = np.broadcast_to(mask.reshape(b, 1, *net.input_shape[1:]), (b, *net.input_shape))
    else:
        mask = mask.reshape(b, *net.input_shape)

    def step(xt):
        node = ad.variable(xt)
        scores = _importance_graph(net, y, node, cfg.method, m_att, loss_kind)
        mass = ad.sum(ad.mul(mask, ad.abs(scores)))
        (g,) = ad.grad(mass, [node], create_graph=False)
        return importance(scores.value, net.input_shape), g.value

    def consider(xt, cur_map, best_x, best_tau):
        tau = kendall_tau_rows(clean_att, cur_map, undefined="nan")
        keep = (net.predict(xt) == y) & ~np.isnan(tau) & (tau < best_tau)
        best_x[keep] = xt[keep]
        best_tau[keep] = tau[keep]

    best_tau_all = np.full(b, np.inf)
    best = x.copy()
    best_topk = np.ones(b)
    best_restart = np.zeros(b, dtype=int)
    for r in range(cfg.restarts):
        xt = x.copy() if r == 0 else nbhd.project(_uniform_start(x, cfg.epsilon, (*key, r), ids), x)
        rx, rtau = x.copy(), np.full(b, np.inf)
        for _ in range(cfg.iters):
            cur, g = step(xt)
            consider(xt, cur, rx, rtau)
            xt = nbhd.project(xt - cfg.alpha * np.sign(g), x)
        consider(xt, _maps(net, xt, y, cfg.method, m_att, loss_kind), rx, rtau)
        found = np.isfinite(rtau)
        if not found.any():
            continue
        final = _maps(net, rx, y, cfg.method, m_eval, loss_kind)
        tau = kendall_tau_rows(clean_eval, final, undefined="nan")
        tau = np.where(np.isnan(tau), np.inf, tau)
        win = found & (tau < best_tau_all)
        best[win] = rx[win]
        best_tau_all[win] = tau[win]
        best_topk[win] = topk_intersection_rows(clean_eval[win], final[win], cfg.k_metric)
        best_restart[win] = r
    unset = ~np.isfinite(best_tau_all)
    best_tau_all[unset] = 1.0
    return IfiaResult(best, best_tau_all, best_topk, best_restart)
