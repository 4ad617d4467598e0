"""Robust attribution objectives over an l-infinity neighborhood.

For a nominal sample ``(x, y)`` and a candidate ``x'`` in the neighborhood,
each variant defines an inner value whose maximum over ``x'`` is the
per-sample robust objective:

=================  ======================================================
IG_NORM            l(x) + lam * ||IG(x, x')||_1
IG_SUM_NORM        l(x') + beta * ||IG(x, x')||_1
MADRY              l(x')
INPUT_GRAD_REG     l(x) + lam * ||(x' - x) * grad l(x)||_1 ** q,
                   with lam = lam_prime / eps ** q and a single IG segment
LOSS_OUTPUT        l(x) + |l(x') - l(x)|
=================  ======================================================

Training alternates an attack step (maximize the inner value over ``x'``)
with a gradient step on the parameters at the frozen maximizer.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from enum import Enum
from typing import Callable

import numpy as np

from . import autodiff as ad
from .attribution import AttributionMap, batch_loss_fn, ig_input, ig_layer
from .nn import INPUT, Network, loss as batch_loss


class Variant(str, Enum):
    IG_NORM = "IG_NORM"
    IG_SUM_NORM = "IG_SUM_NORM"
    MADRY = "MADRY"
    INPUT_GRAD_REG = "INPUT_GRAD_REG"
    LOSS_OUTPUT = "LOSS_OUTPUT"


@dataclass(frozen=True)
class Neighborhood:
    """{x' : ||x' - x||_inf <= epsilon}, intersected with the box when ``clip``."""

    epsilon: float = 0.3
    lo: float = 0.0
    hi: float = 1.0
    clip: bool = True

    def __post_init__(self):
        if self.epsilon < 0:
            raise ValueError("epsilon must be >= 0")

    def project(self, x_prime: np.ndarray, x: np.ndarray) -> np.ndarray:
        out = np.clip(x_prime, x - self.epsilon, x + self.epsilon)
        if self.clip:
            out = np.clip(out, self.lo, self.hi)
        return out

    def contains(self, x_prime: np.ndarray, x: np.ndarray, tol: float = 1e-12) -> bool:
        inside = np.all(np.abs(x_prime - x) <= self.epsilon + tol)
        if self.clip:
            inside = inside and np.all(x_prime >= self.lo - tol) and np.all(x_prime <= self.hi + tol)
        return bool(inside)


@dataclass(frozen=True)
class ObjectiveSpec:
    variant: Variant = Variant.IG_NORM
    lam: float = 1.0
    beta: float = 0.1
    lam_prime: float = 1.0
    q: float = 1.0
    layer: str = INPUT
    m: int = 16
    nbhd: Neighborhood = Neighborhood()
    loss_kind: str = "cross_entropy_nll"

    def __post_init__(self):
        object.__setattr__(self, "variant", Variant(self.variant))
        if self.lam < 0 or self.beta < 0 or self.lam_prime < 0:
            raise ValueError("regularization weights must be >= 0")
        if self.q < 1:
            raise ValueError("q must be >= 1")
        if self.m < 1:
            raise ValueError("m must be >= 1")
        if self.variant is Variant.MADRY and self.lam != 1.0:
            raise ValueError("MADRY is the sum instantiation with lam = 1")
        if self.variant is Variant.INPUT_GRAD_REG and self.m != 1:
            raise ValueError("INPUT_GRAD_REG uses a single IG segment (m = 1)")

    @property
    def size_tag(self) -> str:
        return {Variant.IG_NORM: "one_norm", Variant.IG_SUM_NORM: "sum+one_norm",
                Variant.MADRY: "sum", Variant.INPUT_GRAD_REG: "one_norm_pow",
                Variant.LOSS_OUTPUT: "one_norm"}[self.variant]

    @property
    def reg_weight(self) -> float:
        """Weight in front of the attribution term (0 means the term is off)."""
        v = self.variant
        if v is Variant.IG_NORM:
            return self.lam
        if v is Variant.IG_SUM_NORM:
            return self.beta
        if v is Variant.INPUT_GRAD_REG:
            eps = self.nbhd.epsilon
            return self.lam_prime / eps ** self.q if eps > 0 else 0.0
        if v is Variant.LOSS_OUTPUT:
            return 1.0
        return 0.0

    @property
    def loss_at_perturbed(self) -> bool:
        return self.variant in (Variant.IG_SUM_NORM, Variant.MADRY)

    @property
    def depends_on_x_prime(self) -> bool:
        return self.loss_at_perturbed or self.reg_weight > 0

    def with_m(self, m: int) -> "ObjectiveSpec":
        if self.variant is Variant.INPUT_GRAD_REG:
            return self
        return replace(self, m=int(m))


@dataclass
class InnerTerms:
    """Pieces of the inner value for a batch, all shaped (B,)."""

    total: ad.Node
    loss_term: ad.Node
    reg_term: ad.Node | None
    ig: AttributionMap | None


def _attribution(spec: ObjectiveSpec, net: Network, x, y, x_prime, create_graph=True):
    if spec.layer == INPUT:
        return ig_input(batch_loss_fn(net, y, spec.loss_kind), x, x_prime, spec.m,
                        batched=True, create_graph=create_graph)
    return ig_layer(net, y, spec.layer, x, x_prime, spec.m, spec.loss_kind,
                    batched=True, create_graph=create_graph)


def _l1(scores: ad.Node) -> ad.Node:
    return ad.sum(ad.abs(scores), axis=tuple(range(1, scores.ndim)))


def inner_terms(spec: ObjectiveSpec, net: Network, x, y, x_prime) -> InnerTerms:
    """Evaluate the inner value for a batch at fixed ``x_prime``."""
    v = spec.variant
    y = np.asarray(y)
    w = spec.reg_weight
    if spec.loss_at_perturbed:
        loss_term = batch_loss(net, x_prime, y, spec.loss_kind)
    else:
        loss_term = batch_loss(net, x, y, spec.loss_kind)

    if v is Variant.MADRY or w == 0.0:
        return InnerTerms(loss_term, loss_term, None, None)

    if v is Variant.LOSS_OUTPUT:
        other = batch_loss(net, x_prime, y, spec.loss_kind)
        reg = ad.abs(ad.sub(other, loss_term))
        return InnerTerms(ad.add(loss_term, reg), loss_term, reg, None)

    amap = _attribution(spec, net, x, y, x_prime)
    reg = _l1(amap.scores)
    if v is Variant.INPUT_GRAD_REG:
        reg = ad.power(reg, spec.q)
    return InnerTerms(ad.add(loss_term, ad.mul(w, reg)), loss_term, reg, amap)


def inner_value(spec: ObjectiveSpec, net: Network, x, y, x_prime) -> ad.Node:
    """Per-sample inner value (B,) at a fixed ``x_prime``."""
    return inner_terms(spec, net, x, y, x_prime).total


def objective_grad(spec: ObjectiveSpec, net: Network, x, y, x_star):
    """Gradient of the batch-mean objective w.r.t. the parameters, ``x_star`` frozen.

    Returns ``(grads, stats)`` where ``stats`` holds the batch means of the loss
    and regularizer terms and, when an IG map was built, the mean completeness
    residual of that map.
    """
    x = ad.constant(np.asarray(x, dtype=np.float64))
    x_star = ad.stop_gradient(ad.as_node(x_star))
    terms = inner_terms(spec, net, x, y, x_star)
    objective = ad.mean(terms.total)
    names = list(net.params)
    grads = ad.grad(objective, [net.params[k] for k in names], create_graph=False)
    stats = {"objective": float(objective.value),
             "loss_term": float(terms.loss_term.value.mean()),
             "reg_term": float(terms.reg_term.value.mean()) if terms.reg_term is not None else 0.0}
    if terms.ig is not None:
        from .attribution import completeness_residual
        stats["ig_residual"] = float(np.mean(completeness_residual(terms.ig)))
    return {k: g.value for k, g in zip(names, grads)}, stats


# -- one-layer closed forms ---------------------------------------------------------

def _logistic(z):
    return np.logaddexp(0.0, z)


def _softplus_hinge(z):
    return np.logaddexp(0.0, 1.0 + z)


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(z, dtype=np.float64)))


ONE_LAYER_LOSSES: dict[str, tuple[Callable, Callable]] = {
    "logistic": (_logistic, _sigmoid),
    "softplus_hinge": (_softplus_hinge, lambda z: _sigmoid(1.0 + np.asarray(z))),
}


def _g(g) -> Callable:
    if callable(g):
        return g
    return ONE_LAYER_LOSSES[g][0]


def one_layer_closed_form(w, x, y: int, eps: float, g="logistic") -> tuple[float, float]:
    """Soft-margin robust loss and the max IG 1-norm for a one-layer model.

    The loss is ``g(-y <w, x>)`` with ``g`` non-decreasing and convex.  Over the
    unclipped l-infinity ball of radius ``eps`` the worst-case loss is
    ``g(z + eps ||w||_1)`` with ``z = -y <w, x>``, and the largest IG 1-norm is
    ``g(z + eps ||w||_1) - g(z)``, reached at ``x' = x - y sign(w) eps``.
    """
    w = np.asarray(w, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(w)):
        raise ValueError("w must be finite")
    gf = _g(g)
    z = -y * float(w @ x)
    shift = eps * float(np.abs(w).sum())
    robust = float(gf(z + shift))
    return robust, float(gf(z + shift) - gf(z))


def one_layer_maximizer(w, x, y: int, eps: float) -> np.ndarray:
    """The corner ``x - y sign(w) eps`` attaining both one-layer maxima."""
    return np.asarray(x, dtype=np.float64) - y * np.sign(w) * eps
