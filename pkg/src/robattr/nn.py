"""Small feed-forward networks on top of :mod:`robattr.autodiff`.

A :class:`Network` is an ordered stack of layers.  Parameters live on the
network as leaf nodes (``requires_grad`` set), so gradients with respect to
them are available whenever a loss is built from :meth:`Network.forward`.
Every layer output is exposed under a name so attributions can target any
intermediate layer.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import Node

INPUT = "input"
LOGITS = "logits"
LOSS = "loss"

LOSS_KINDS = ("cross_entropy_nll", "logistic", "softplus_hinge")
CHECKPOINT_MAGIC = b"ATRG1"


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class Sample:
    """One labelled input with pixel values in [0, 1]."""

    x: np.ndarray
    y: int

    def __post_init__(self):
        x = np.asarray(self.x, dtype=np.float64)
        if x.size and (x.min() < 0.0 or x.max() > 1.0):
            raise ValueError("sample entries must lie in [0, 1]")
        object.__setattr__(self, "x", x)


# -- layers -------------------------------------------------------------------

class Layer:
    kind = "layer"

    def build(self, in_shape: tuple, rng: np.random.Generator) -> tuple[dict, tuple]:
        """Return (initial params, output shape) for an input of ``in_shape``."""
        return {}, in_shape

    def __call__(self, x: Node, params: Mapping[str, Node]) -> Node:
        raise NotImplementedError

    def describe(self) -> list:
        return [self.kind]


class Dense(Layer):
    kind = "dense"

    def __init__(self, n_in: int, n_out: int):
        self.n_in, self.n_out = int(n_in), int(n_out)

    def build(self, in_shape, rng):
        if in_shape != (self.n_in,):
            raise ad.ShapeError("dense", in_shape, (self.n_in,))
        bound = np.sqrt(6.0 / self.n_in)
        w = rng.uniform(-bound, bound, size=(self.n_in, self.n_out))
        return {"w": w, "b": np.zeros(self.n_out)}, (self.n_out,)

    def __call__(self, x, params):
        return ad.matmul(x, params["w"]) + params["b"]

    def describe(self):
        return [self.kind, self.n_in, self.n_out]


class Conv2D(Layer):
    """Stride-1, valid-padding convolution on (N, C, H, W) inputs."""

    kind = "conv"

    def __init__(self, filters: int, kernel: int):
        self.filters, self.kernel = int(filters), int(kernel)

    def build(self, in_shape, rng):
        if len(in_shape) != 3 or min(in_shape[1:]) < self.kernel:
            raise ad.ShapeError("conv", in_shape, detail=f"kernel {self.kernel}")
        c, h, w = in_shape
        fan_in = c * self.kernel * self.kernel
        bound = np.sqrt(6.0 / fan_in)
        kern = rng.uniform(-bound, bound, size=(fan_in, self.filters))
        out = (self.filters, h - self.kernel + 1, w - self.kernel + 1)
        return {"w": kern, "b": np.zeros(self.filters)}, out

    def __call__(self, x, params):
        n = x.shape[0]
        cols = ad.im2col(x, self.kernel)
        _, ho, wo, fan_in = cols.shape
        y = ad.matmul(ad.reshape(cols, (n * ho * wo, fan_in)), params["w"]) + params["b"]
        y = ad.reshape(y, (n, ho, wo, self.filters))
        return ad.transpose(y, (0, 3, 1, 2))

    def describe(self):
        return [self.kind, self.filters, self.kernel]


class MaxPool2(Layer):
    kind = "maxpool"

    def build(self, in_shape, rng):
        c, h, w = in_shape
        return {}, (c, h // 2, w // 2)

    def __call__(self, x, params):
        n, c, h, w = x.shape
        h2, w2 = h // 2, w // 2
        if (h, w) != (2 * h2, 2 * w2):
            x = x[:, :, : 2 * h2, : 2 * w2]
        x = ad.reshape(x, (n, c, h2, 2, w2, 2))
        return ad.max(x, axis=(3, 5))


class Flatten(Layer):
    kind = "flatten"

    def build(self, in_shape, rng):
        return {}, (int(np.prod(in_shape)),)

    def __call__(self, x, params):
        return ad.reshape(x, (x.shape[0], int(np.prod(x.shape[1:]))))


class ReLU(Layer):
    kind = "relu"

    def __call__(self, x, params):
        return ad.relu(x)


class Softplus(Layer):
    kind = "softplus"

    def __call__(self, x, params):
        return ad.softplus(x)


def layer_from_spec(spec) -> Layer:
    """Build a layer from a list such as ``["dense", 784, 128]`` or ``["relu"]``."""
    if isinstance(spec, str):
        spec = [spec]
    kind, *args = spec
    table = {"dense": Dense, "conv": Conv2D, "maxpool": MaxPool2, "flatten": Flatten,
             "relu": ReLU, "softplus": Softplus}
    if kind not in table:
        raise ValueError(f"unknown layer kind {kind!r}")
    return table[kind](*args)


# -- network --------------------------------------------------------------------

class Network:
    """Ordered layer stack with named parameters and named activations.

    ``smooth=True`` swaps every ReLU for softplus so the network is C2, which
    the finite-difference test suites rely on.
    """

    def __init__(self, layers, input_shape, seed: int = 0, smooth: bool = False):
        self.layers: list[Layer] = [layer_from_spec(s) if not isinstance(s, Layer) else s
                                    for s in layers]
        if smooth:
            self.layers = [Softplus() if isinstance(l, ReLU) else l for l in self.layers]
        self.smooth = smooth
        self.input_shape = tuple(int(s) for s in input_shape)
        self.seed = seed
        rng = np.random.default_rng(seed)
        shape = self.input_shape
        self.layer_names: list[str] = []
        self._param_keys: list[list[str]] = []
        params: dict[str, Node] = {}
        counts: dict[str, int] = {}
        for layer in self.layers:
            idx = counts.get(layer.kind, 0)
            counts[layer.kind] = idx + 1
            name = f"{layer.kind}{idx}"
            init, shape = layer.build(shape, rng)
            keys = []
            for pname, value in init.items():
                key = f"{name}.{pname}"
                if key in params:
                    raise ValueError(f"duplicate parameter {key}")
                params[key] = ad.variable(value)
                keys.append(key)
            self.layer_names.append(name)
            self._param_keys.append(keys)
        self.output_shape = shape
        self.params = params

    @property
    def num_classes(self) -> int:
        return int(np.prod(self.output_shape))

    def describe(self) -> dict:
        return {"layers": [l.describe() for l in self.layers],
                "input_shape": list(self.input_shape), "smooth": self.smooth}

    def param_values(self) -> dict[str, np.ndarray]:
        return {k: v.value for k, v in self.params.items()}

    def set_params(self, values: Mapping[str, np.ndarray]) -> None:
        if set(values) != set(self.params):
            raise KeyError(f"parameter names differ: {sorted(set(values) ^ set(self.params))}")
        new = {}
        for k, old in self.params.items():
            v = np.asarray(values[k], dtype=np.float64)
            if v.shape != old.shape:
                raise ad.ShapeError("set_params", old.shape, v.shape, detail=k)
            new[k] = ad.variable(v)
        self.params = new

    def forward(self, x) -> tuple[Node, dict[str, Node]]:
        """Run the stack on a batch ``x`` of shape (N, *input_shape).

        Returns the logits and a map from layer name to that layer's output;
        the map also holds ``"input"`` and ``"logits"``.
        """
        x = ad.as_node(x)
        if x.shape[1:] != self.input_shape:
            raise ad.ShapeError("forward", x.shape, (None, *self.input_shape))
        acts = {INPUT: x}
        h = x
        for layer, name, keys in zip(self.layers, self.layer_names, self._param_keys):
            local = {k.split(".", 1)[1]: self.params[k] for k in keys}
            h = layer(h, local)
            acts[name] = h
        acts[LOGITS] = h
        return h, acts

    def logits(self, x) -> Node:
        return self.forward(x)[0]

    def predict(self, x) -> np.ndarray:
        with ad.no_grad():
            out = self.logits(x).value
        if out.ndim == 2 and out.shape[1] == 1:
            return np.where(out[:, 0] >= 0, 1, -1)
        return out.argmax(axis=1)


def mlp(sizes, seed: int = 0, smooth: bool = False, activation: str = "relu") -> Network:
    """Dense network, e.g. ``mlp([784, 128, 64, 10])``."""
    layers: list = []
    for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        layers.append(["dense", a, b])
        if i < len(sizes) - 2:
            layers.append([activation])
    return Network(layers, (sizes[0],), seed=seed, smooth=smooth)


# -- losses -------------------------------------------------------------------------

def loss_from_logits(logits: Node, y, kind: str = "cross_entropy_nll") -> Node:
    """Per-sample loss values, shape (N,)."""
    y = np.asarray(y)
    if kind == "cross_entropy_nll":
        if y.size and (y.min() < 0 or y.max() >= logits.shape[1]):
            raise ValueError(f"label out of range [0, {logits.shape[1]})")
        return ad.softmax_cross_entropy(logits, y.astype(int))
    if kind in ("logistic", "softplus_hinge"):
        if not np.all(np.isin(y, (-1, 1))):
            raise ValueError(f"{kind} labels must be -1 or +1")
        z = ad.reshape(logits, (logits.shape[0],))
        margin = ad.mul(z, y.astype(np.float64))
        return ad.softplus(ad.neg(margin) if kind == "logistic" else 1.0 - margin)
    raise ValueError(f"unknown loss kind {kind!r}; expected one of {LOSS_KINDS}")


def loss(net: Network, x, y, kind: str = "cross_entropy_nll") -> Node:
    """Per-sample loss of ``net`` on a batch; labels are held fixed."""
    return loss_from_logits(net.logits(x), y, kind)


def sample_loss(net: Network, sample: Sample, kind: str = "cross_entropy_nll") -> Node:
    """Scalar loss for a single :class:`Sample`."""
    out = loss(net, sample.x[None], np.array([sample.y]), kind)
    return ad.reshape(out, ())


# -- optimizers -----------------------------------------------------------------------

class SGD:
    """Plain SGD with optional heavy-ball momentum."""

    def __init__(self, lr: float = 0.01, momentum: float = 0.0):
        self.lr, self.momentum = lr, momentum
        self.velocity: dict[str, np.ndarray] = {}

    def step(self, params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray]):
        out = {}
        for k, p in params.items():
            g = grads[k]
            if self.momentum:
                v = self.momentum * self.velocity.get(k, np.zeros_like(p)) + g
                self.velocity[k] = v
                g = v
            out[k] = p - self.lr * g
        return out


class Adam:
    def __init__(self, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray]):
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        out = {}
        for k, p in params.items():
            g = grads[k]
            m = self.beta1 * self.m.get(k, np.zeros_like(p)) + (1.0 - self.beta1) * g
            v = self.beta2 * self.v.get(k, np.zeros_like(p)) + (1.0 - self.beta2) * g * g
            self.m[k], self.v[k] = m, v
            out[k] = p - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        return out


def make_optimizer(kind: str, lr: float, momentum: float = 0.9):
    if kind == "adam":
        return Adam(lr)
    if kind == "sgd":
        return SGD(lr, momentum)
    raise ValueError(f"unknown optimizer {kind!r}")


# -- checkpoints ------------------------------------------------------------------------

def save_checkpoint(path, params: Mapping[str, np.ndarray]) -> None:
    """Write parameters in the ATRG1 layout (little-endian u64 headers, f64 payload)."""
    chunks = [CHECKPOINT_MAGIC]
    for name, value in params.items():
        value = np.asarray(value, dtype="<f8")
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<Q", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<Q", value.ndim))
        chunks.append(struct.pack(f"<{value.ndim}Q", *value.shape))
        chunks.append(np.ascontiguousarray(value).tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    data = Path(path).read_bytes()
    if not data.startswith(CHECKPOINT_MAGIC):
        raise CheckpointError(f"{path}: bad magic {data[:5]!r}")
    pos = len(CHECKPOINT_MAGIC)
    out: dict[str, np.ndarray] = {}

    def take(n):
        nonlocal pos
        if pos + n > len(data):
            raise CheckpointError(f"{path}: truncated at byte {pos}, need {n} more")
        chunk = data[pos:pos + n]
        pos += n
        return chunk

    while pos < len(data):
        (nlen,) = struct.unpack("<Q", take(8))
        name = take(nlen).decode("utf-8")
        (rank,) = struct.unpack("<Q", take(8))
        shape = struct.unpack(f"<{rank}Q", take(8 * rank))
        count = int(np.prod(shape)) if rank else 1
        out[name] = np.frombuffer(take(8 * count), dtype="<f8").reshape(shape).astype(np.float64)
    return out
