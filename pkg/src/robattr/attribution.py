"""Integrated Gradients on the input and on intermediate layers.

All integrals are approximated with the left Riemann sum over ``m`` equal
segments of the straight line from ``x`` to ``x'``::

    IG_i(x, x') ~= (x'_i - x_i) / m * sum_{k=0}^{m-1} df/dx_i (x + k/m (x' - x))

The gradients at the ``m`` path points are computed in one batched pass.  With
``create_graph=True`` (the default) the scores remain graph nodes, so a norm of
them can be differentiated again with respect to ``x``, ``x'`` or the network
parameters.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Node
from .nn import INPUT, LOSS, Network, loss_from_logits


@dataclass(frozen=True)
class PathSpec:
    """Straight-line path with ``m`` Riemann segments."""

    m: int
    kind: str = "straightline"

    def __post_init__(self):
        if self.kind != "straightline":
            raise NotImplementedError(f"path kind {self.kind!r} is not implemented")
        if int(self.m) != self.m or self.m < 1:
            raise ValueError(f"path needs m >= 1 segments, got {self.m}")


def as_path(path) -> PathSpec:
    return path if isinstance(path, PathSpec) else PathSpec(int(path))


@dataclass
class AttributionMap:
    """Attribution scores for one layer, plus the function values at both ends.

    ``scores`` has a leading batch axis when ``batched`` is set.
    """

    layer: str
    scores: Node
    baseline_value: np.ndarray
    batched: bool = False
    _target: Callable[[], np.ndarray] | None = field(default=None, repr=False)
    _target_cache: np.ndarray | None = field(default=None, repr=False)

    @property
    def values(self) -> np.ndarray:
        return self.scores.value

    @property
    def target_value(self) -> np.ndarray:
        if self._target_cache is None:
            self._target_cache = self._target() if self._target else self.baseline_value
        return self._target_cache


@dataclass(frozen=True)
class SizeFunction:
    """sum, one_norm, or one_norm_pow (the 1-norm raised to ``q``)."""

    tag: str = "one_norm"
    q: float = 1.0

    def __post_init__(self):
        if self.tag not in ("sum", "one_norm", "one_norm_pow"):
            raise ValueError(f"unknown size function {self.tag!r}")
        if self.q < 1:
            raise ValueError("q must be >= 1")


SUM = SizeFunction("sum")
ONE_NORM = SizeFunction("one_norm")


def one_norm_pow(q: float) -> SizeFunction:
    return SizeFunction("one_norm_pow", float(q))


def _batch(x, batched: bool) -> Node:
    x = ad.as_node(x)
    return x if batched else ad.reshape(x, (1, *x.shape))


def _unbatch_value(v: np.ndarray, batched: bool):
    return v if batched else v[0]


def path_points(x: Node, x_prime: Node, m: int) -> tuple[Node, Node]:
    """Return ``x' - x`` and the m*B left-endpoint points, ordered step-major."""
    diff = ad.sub(x_prime, x)
    b, feat = x.shape[0], x.shape[1:]
    t = (np.arange(m, dtype=np.float64) / m).reshape((m, 1) + (1,) * len(feat))
    pts = ad.add(ad.reshape(x, (1, b, *feat)), ad.mul(t, ad.reshape(diff, (1, b, *feat))))
    return diff, ad.reshape(pts, (m * b, *feat))


def ig_input(f: Callable[[Node], Node], x, x_prime, path=64, batched: bool = False,
             create_graph: bool = True) -> AttributionMap:
    """Integrated Gradients of ``f`` with respect to its input.

    ``f`` maps a batch of points (n, *shape) to per-point values (n,).  Without
    ``batched`` the inputs are single points of shape ``shape``.
    """
    path = as_path(path)
    xb, xpb = _batch(x, batched), _batch(x_prime, batched)
    if xb.shape != xpb.shape:
        raise ad.ShapeError("ig_input", xb.shape, xpb.shape)
    m, b = path.m, xb.shape[0]
    diff, pts = path_points(xb, xpb, m)
    pts = ad.track(pts)
    vals = f(pts)
    (g,) = ad.grad(ad.sum(vals), [pts], create_graph=create_graph)
    avg = ad.mean(ad.reshape(g, (m, b, *xb.shape[1:])), axis=0)
    scores = ad.mul(diff, avg)
    if not batched:
        scores = ad.reshape(scores, scores.shape[1:])
    baseline = vals.value[:b].copy()

    def target():
        with ad.no_grad():
            return _unbatch_value(f(ad.constant(xpb.value)).value, batched)

    return AttributionMap(INPUT, scores, _unbatch_value(baseline, batched), batched, target)


def _layer_node(net: Network, acts: dict, losses: Node, layer: str) -> Node:
    if layer == LOSS:
        return losses
    if layer not in acts:
        raise KeyError(f"unknown layer {layer!r}; known: {[INPUT, *net.layer_names, 'logits', LOSS]}")
    return acts[layer]


def ig_layer(net: Network, y, layer: str, x, x_prime, path=64,
             loss_kind: str = "cross_entropy_nll", batched: bool = False,
             create_graph: bool = True) -> AttributionMap:
    """Integrated Gradients of the fixed-label loss with respect to layer ``layer``.

    Each step contributes ``df/dh_i * (J_h v)_i`` where ``v = x' - x`` and
    ``J_h v`` is the directional derivative of the layer along the path.  The
    Jacobian-vector product is obtained by differentiating a vector-Jacobian
    product with respect to its dummy cotangent.
    """
    path = as_path(path)
    xb, xpb = _batch(x, batched), _batch(x_prime, batched)
    if xb.shape != xpb.shape:
        raise ad.ShapeError("ig_layer", xb.shape, xpb.shape)
    y = np.atleast_1d(np.asarray(y))
    m, b = path.m, xb.shape[0]
    if layer not in (INPUT, LOSS, "logits", *net.layer_names):
        raise KeyError(f"unknown layer {layer!r}; known: {[INPUT, *net.layer_names, 'logits', LOSS]}")
    diff, pts = path_points(xb, xpb, m)
    pts = ad.track(pts)
    logits, acts = net.forward(pts)
    losses = loss_from_logits(logits, np.tile(y, m), loss_kind)
    h = _layer_node(net, acts, losses, layer)
    (dfdh,) = ad.grad(ad.sum(losses), [h], create_graph=create_graph)
    u = ad.variable(np.zeros(h.shape))
    (jtu,) = ad.grad(ad.sum(ad.mul(h, u)), [pts], create_graph=True)
    v = ad.reshape(ad.broadcast_to(ad.reshape(diff, (1, *diff.shape)), (m, *diff.shape)),
                   pts.shape)
    (jv,) = ad.grad(ad.sum(ad.mul(jtu, v)), [u], create_graph=create_graph)
    terms = ad.reshape(ad.mul(dfdh, jv), (m, b, *h.shape[1:]))
    scores = ad.mean(terms, axis=0)
    if not batched:
        scores = ad.reshape(scores, scores.shape[1:])
    baseline = losses.value[:b].copy()

    def target():
        with ad.no_grad():
            return _unbatch_value(loss_from_logits(net.logits(xpb.value), y, loss_kind).value,
                                  batched)

    return AttributionMap(layer, scores, _unbatch_value(baseline, batched), batched, target)


def completeness_residual(amap: AttributionMap):
    """|sum(scores) - (f(x') - f(x))|, per sample when the map is batched."""
    scores = amap.values
    axes = tuple(range(1, scores.ndim)) if amap.batched else None
    total = scores.sum(axis=axes)
    return np.abs(total - (amap.target_value - amap.baseline_value))


def size(s: SizeFunction, amap_or_scores, batched: bool | None = None) -> Node:
    """Apply a size function; batched maps give one value per sample."""
    if isinstance(amap_or_scores, AttributionMap):
        scores, batched = amap_or_scores.scores, amap_or_scores.batched
    else:
        scores = ad.as_node(amap_or_scores)
        batched = bool(batched)
    axes = tuple(range(1, scores.ndim)) if batched else None
    if s.tag == "sum":
        return ad.sum(scores, axis=axes)
    norm = ad.sum(ad.abs(scores), axis=axes)
    if s.tag == "one_norm" or s.q == 1.0:
        return norm
    return ad.power(norm, s.q)


def simple_gradient(net: Network, y, x, loss_kind: str = "cross_entropy_nll",
                    batched: bool = False, create_graph: bool = False) -> AttributionMap:
    """Gradient of the fixed-label loss with respect to the input."""
    xb = ad.track(_batch(x, batched))
    y = np.atleast_1d(np.asarray(y))
    losses = loss_from_logits(net.logits(xb), y, loss_kind)
    (g,) = ad.grad(ad.sum(losses), [xb], create_graph=create_graph)
    if not batched:
        g = ad.reshape(g, g.shape[1:])
    value = _unbatch_value(losses.value.copy(), batched)
    return AttributionMap(INPUT, g, value, batched)


def batch_loss_fn(net: Network, y, loss_kind: str = "cross_entropy_nll"):
    """Loss function for a batch of points whose size is a multiple of len(y)."""
    y = np.atleast_1d(np.asarray(y))

    def f(pts: Node) -> Node:
        reps = pts.shape[0] // y.size
        return loss_from_logits(net.logits(pts), np.tile(y, reps), loss_kind)
    return f


def importance(scores: np.ndarray, feature_shape: tuple) -> np.ndarray:
    """Per-feature importance |score|, summed over the channel axis of (C, H, W) inputs.

    Returns a 2-D array (batch, features).
    """
    scores = np.asarray(scores)
    b = scores.shape[0]
    a = np.abs(scores.reshape(b, *feature_shape))
    if len(feature_shape) == 3:
        a = a.sum(axis=1)
    return a.reshape(b, -1)


def saliency(net: Network, x, y, method: str = "ig", m: int = 64,
             loss_kind: str = "cross_entropy_nll") -> np.ndarray:
    """Importance maps (batch, features) for a batch of images.

    ``ig`` integrates from the all-zero image to ``x``; ``sg`` is the plain
    input gradient.
    """
    x = np.asarray(x, dtype=np.float64)
    if method == "ig":
        amap = ig_input(batch_loss_fn(net, y, loss_kind), np.zeros_like(x), x, m,
                        batched=True, create_graph=False)
    elif method == "sg":
        amap = simple_gradient(net, y, x, loss_kind, batched=True)
    else:
        raise ValueError(f"unknown importance method {method!r}")
    return importance(amap.values, net.input_shape)


# -- PGM export -------------------------------------------------------------------

def write_pgm(path, image: np.ndarray) -> np.ndarray:
    """Write a 2-D map as 8-bit binary PGM (P5), min-max normalized per image.

    The normalization bounds go to a JSON sidecar next to the image.  Returns
    the quantized pixels that were written.
    """
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2:
        raise ValueError("PGM export needs a 2-D map")
    lo, hi = float(image.min()), float(image.max())
    scale = (image - lo) / (hi - lo) if hi > lo else np.zeros_like(image)
    pixels = np.rint(scale * 255.0).astype(np.uint8)
    path = Path(path)
    header = f"P5\n{image.shape[1]} {image.shape[0]}\n255\n".encode("ascii")
    path.write_bytes(header + pixels.tobytes())
    path.with_suffix(".json").write_text(json.dumps({"min": lo, "max": hi}))
    return pixels


def read_pgm(path) -> tuple[np.ndarray, dict]:
    """Read a P5 PGM written by :func:`write_pgm` and its sidecar bounds."""
    path = Path(path)
    data = path.read_bytes()
    parts = data.split(maxsplit=4)
    if parts[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    if maxval != 255:
        raise ValueError(f"{path}: only 8-bit PGM supported")
    pixels = np.frombuffer(data[-w * h:], dtype=np.uint8).reshape(h, w)
    sidecar = path.with_suffix(".json")
    bounds = json.loads(sidecar.read_text()) if sidecar.exists() else {}
    return pixels, bounds
