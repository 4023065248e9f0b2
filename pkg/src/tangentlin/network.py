"""Network descriptions, initialization and forward evaluation.

Every architecture is a stack of layers of the form

    alpha = act(B(W, alpha_prev) / divisor + bias) + skip * alpha_prev

followed by a linear read-out ``f = V alpha_L / divisor`` and an optional
output head. ``B`` is a matrix product for dense layers and a zero-padded 1-D
convolution for :class:`Conv1D`. Under the NTK parameterization weights are
standard normal and ``divisor = sqrt(fan_in)``; under LeCun the weights carry
the ``1/sqrt(fan_in)`` themselves and ``divisor = 1``.
"""

from dataclasses import asdict, dataclass, field
from functools import lru_cache
from typing import Optional

import numpy as np
from scipy.special import log_softmax, softmax

from . import activations, rng
from .tensor import gaussian_matrix


class NumericalError(ArithmeticError):
    """A non-finite value appeared during evaluation."""

    def __init__(self, message, layer=None):
        super().__init__(message)
        self.layer = layer


@dataclass(frozen=True)
class FullyConnected:
    width: int
    activation: str = "tanh"
    bias: bool = False


@dataclass(frozen=True)
class Conv1D:
    channels: int
    pixels: int
    filter: int = 3
    activation: str = "tanh"


@dataclass(frozen=True)
class Residual:
    width: int
    activation: str = "tanh"
    skip: float = 1.0


@dataclass(frozen=True)
class Shallow:
    """One hidden layer with fixed, non-trainable output signs ``v_i = +-1``."""

    width: int
    activation: str = "tanh"


LAYER_TYPES = {cls.__name__: cls for cls in (FullyConnected, Conv1D, Residual, Shallow)}


@dataclass(frozen=True)
class NetworkSpec:
    input_dim: int
    layers: tuple
    head: str = "linear"
    output_dim: int = 1
    parameterization: str = "ntk"
    output_trainable: bool = True

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        if self.input_dim < 1 or self.output_dim < 1:
            raise ValueError("input_dim and output_dim must be >= 1")
        if not self.layers:
            raise ValueError("a network needs at least one hidden layer")
        if self.parameterization not in ("ntk", "lecun"):
            raise ValueError(f"unknown parameterization {self.parameterization!r}")
        if self.head not in activations.HEADS:
            raise ValueError(f"unknown head {self.head!r}; choose from {activations.HEADS}")
        if self.head == "softmax" and self.output_dim < 2:
            raise ValueError("softmax head needs output_dim >= 2")
        for layer in self.layers:
            if type(layer).__name__ not in LAYER_TYPES:
                raise TypeError(f"not a layer descriptor: {layer!r}")
            activations.get(layer.activation)
            size = layer.channels if isinstance(layer, Conv1D) else layer.width
            if size < 1:
                raise ValueError(f"layer width must be >= 1: {layer!r}")
            if isinstance(layer, Conv1D) and (layer.filter < 1 or layer.filter % 2 == 0):
                raise ValueError(f"Conv1D filter size must be odd: {layer!r}")
        if any(isinstance(layer, Shallow) for layer in self.layers):
            if len(self.layers) != 1:
                raise ValueError("Shallow must be the only layer")
            object.__setattr__(self, "output_trainable", False)
        _compile(self)

    @property
    def depth(self):
        return len(self.layers)

    @property
    def fixed_output_signs(self):
        return isinstance(self.layers[0], Shallow)

    @property
    def smooth(self):
        return all(activations.get(layer.activation).smooth for layer in self.layers)

    @property
    def min_width(self):
        return min(getattr(layer, "width", None) or layer.channels for layer in self.layers)

    def with_head(self, head):
        return NetworkSpec(self.input_dim, self.layers, head, self.output_dim,
                           self.parameterization, self.output_trainable)

    def to_dict(self):
        d = asdict(self)
        d["layers"] = [dict(type=type(layer).__name__, **asdict(layer)) for layer in self.layers]
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        layers = []
        for item in d.pop("layers"):
            item = dict(item)
            layers.append(LAYER_TYPES[item.pop("type")](**item))
        return cls(layers=tuple(layers), **d)


@dataclass
class _Layer:
    """Compiled form of one layer descriptor."""

    index: int
    conv: bool
    act: activations.Activation
    in_shape: tuple
    out_shape: tuple
    fan_in: int
    w_shape: tuple
    bias: bool
    skip: float
    divisor: float
    filter: int = 1
    pad: int = 0

    @property
    def out_size(self):
        return int(np.prod(self.out_shape))

    @property
    def in_size(self):
        return int(np.prod(self.in_shape))

    # --- bilinear primitive B(W, a) and its adjoints -------------------

    def _shifted(self, a):
        # a: (n, cin, Q) -> (n, K, cin, Q) with zero fill
        n, c, q = a.shape
        padded = np.zeros((n, c, q + 2 * self.pad))
        padded[:, :, self.pad:self.pad + q] = a
        return np.stack([padded[:, :, k:k + q] for k in range(self.filter)], axis=1)

    def lin(self, W, a):
        if self.conv:
            return np.einsum("kij,nkjq->niq", W, self._shifted(a))
        if W.dtype != a.dtype:
            # single-precision storage: multiply in the storage precision
            return (a.astype(W.dtype) @ W.T).astype(a.dtype)
        return a @ W.T

    def lin_adj_a(self, W, g):
        if not self.conv:
            if W.dtype != g.dtype:
                return (g.astype(W.dtype) @ W).astype(g.dtype)
            return g @ W
        n, _, q = g.shape
        t = np.einsum("kij,niq->nkjq", W, g)
        padded = np.zeros((n, W.shape[2], q + 2 * self.pad))
        for k in range(self.filter):
            padded[:, :, k:k + q] += t[:, k]
        return padded[:, :, self.pad:self.pad + q]

    def lin_adj_w(self, g, a, per_sample=False):
        if self.conv:
            sub = "niq,nkjq->nkij" if per_sample else "niq,nkjq->kij"
            return np.einsum(sub, g, self._shifted(a))
        if per_sample:
            return np.einsum("ni,nj->nij", g, a)
        return g.T @ a

    def bias_adj(self, g, per_sample=False):
        return g if per_sample else g.sum(axis=0)


@dataclass
class _Plan:
    layers: list
    out_size: int
    out_divisor: float
    input_shape: tuple


@lru_cache(maxsize=256)
def _compile(spec: NetworkSpec) -> _Plan:
    ntk = spec.parameterization == "ntk"
    first = spec.layers[0]
    if isinstance(first, Conv1D):
        if spec.input_dim % first.pixels:
            raise ValueError("input_dim must be channels * pixels for a Conv1D first layer")
        shape = (spec.input_dim // first.pixels, first.pixels)
    else:
        shape = (spec.input_dim,)
    input_shape = shape
    plan = []
    for idx, layer in enumerate(spec.layers):
        act = activations.get(layer.activation)
        if isinstance(layer, Conv1D):
            if len(shape) != 2 or shape[1] != layer.pixels:
                raise ValueError(f"layer {idx + 1}: Conv1D needs a (channels, {layer.pixels}) input")
            cin = shape[0]
            out = (layer.channels, layer.pixels)
            plan.append(_Layer(idx + 1, True, act, shape, out, cin, (layer.filter, layer.channels, cin),
                               False, 0.0, np.sqrt(cin) if ntk else 1.0, layer.filter, (layer.filter - 1) // 2))
        else:
            fan = int(np.prod(shape))
            skip = 0.0
            if isinstance(layer, Residual):
                if fan != layer.width:
                    raise ValueError(f"layer {idx + 1}: Residual width {layer.width} != input size {fan}")
                skip = layer.skip
            bias = getattr(layer, "bias", False)
            out = (layer.width,)
            plan.append(_Layer(idx + 1, False, act, (fan,), out, fan, (layer.width, fan), bias, skip,
                               np.sqrt(fan) if ntk else 1.0))
        shape = out
    out_size = int(np.prod(shape))
    return _Plan(plan, out_size, np.sqrt(out_size) if ntk else 1.0, input_shape)


def plan(spec):
    return _compile(spec)


def _frozen(a):
    a = np.asarray(a)
    a = np.ascontiguousarray(a, dtype=np.float32 if a.dtype == np.float32 else np.float64)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class Weights:
    """Per-layer parameter arrays plus the read-out matrix ``output``.

    ``layers[l]`` is ``(W,)`` or ``(W, bias)``. The flat view lists trainable
    arrays in layer order, read-out last; a fixed read-out is excluded.
    """

    layers: tuple
    output: np.ndarray
    output_trainable: bool = True

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(tuple(_frozen(p) for p in ps) for ps in self.layers))
        object.__setattr__(self, "output", _frozen(self.output))

    def arrays(self):
        out = [p for ps in self.layers for p in ps]
        if self.output_trainable:
            out.append(self.output)
        return out

    @property
    def size(self):
        return sum(a.size for a in self.arrays())

    def flat(self):
        return np.concatenate([a.ravel() for a in self.arrays()])

    def from_flat(self, vec):
        vec = np.asarray(vec, dtype=float)
        if vec.shape != (self.size,):
            raise ValueError(f"flat vector has shape {vec.shape}, expected ({self.size},)")
        pos = 0
        layers = []
        for ps in self.layers:
            new = []
            for p in ps:
                new.append(vec[pos:pos + p.size].reshape(p.shape))
                pos += p.size
            layers.append(tuple(new))
        if self.output_trainable:
            output = vec[pos:].reshape(self.output.shape)
        else:
            output = self.output
        return Weights(tuple(layers), output, self.output_trainable)

    def zeros_like(self):
        """Direction with the same layout (a fixed read-out becomes zero)."""
        return Weights(tuple(tuple(np.zeros_like(p) for p in ps) for ps in self.layers),
                       np.zeros_like(self.output), self.output_trainable)

    def norm(self):
        return float(np.sqrt(sum(np.sum(a * a) for a in self.arrays())))

    def norm_inf(self):
        return float(max(np.max(np.abs(a)) for a in self.arrays()))

    def __add__(self, other):
        return self.from_flat(self.flat() + other.flat())

    def __sub__(self, other):
        return self.from_flat(self.flat() - other.flat())


def init_weights(spec: NetworkSpec, seed=0, std_override: Optional[float] = None, dtype=np.float64) -> Weights:
    """Gaussian initialization keyed per layer by ``(seed, layer, name)``.

    NTK and LeCun weights built from the same seed share their standard-normal
    draws, so the two parameterizations define the same function.
    ``std_override`` replaces every standard deviation (debugging aid).
    ``dtype=float32`` stores hidden weight matrices in single precision (the
    same draws, rounded); it exists for Hessian sweeps at widths whose
    double-precision matrices would not fit in memory.
    """
    p = _compile(spec)
    ntk = spec.parameterization == "ntk"
    layers = []
    for lay in p.layers:
        std = 1.0 if ntk else 1.0 / np.sqrt(lay.fan_in)
        if std_override is not None:
            std = std_override
        rows = int(np.prod(lay.w_shape[:-1]))
        W = gaussian_matrix(rows, lay.w_shape[-1], std, rng.child(seed, "layer", lay.index, "W"),
                            dtype=dtype if not lay.conv else np.float64)
        params = [W.reshape(lay.w_shape)]
        if lay.bias:
            bstd = 1.0 if std_override is None else std_override
            params.append(gaussian_matrix(1, lay.out_size, bstd, rng.child(seed, "layer", lay.index, "b"))[0])
        layers.append(tuple(params))
    std = 1.0 if ntk else 1.0 / np.sqrt(p.out_size)
    if std_override is not None:
        std = std_override
    if spec.fixed_output_signs:
        signs = rng.stream(seed, "output", "signs").integers(0, 2, size=(spec.output_dim, p.out_size))
        output = (2.0 * signs - 1.0) * std
    else:
        output = gaussian_matrix(spec.output_dim, p.out_size, std, rng.child(seed, "output", "V"))
    return Weights(tuple(layers), output, spec.output_trainable)


@dataclass(frozen=True)
class ForwardTrace:
    """Cached pre-activations and activations for a batch of inputs.

    Arrays carry a leading batch axis. ``inputs`` is the layer-0 activation
    already reshaped for the first layer; ``logits`` is the linear read-out
    and ``output`` the head applied to it.
    """

    inputs: np.ndarray
    pre: tuple
    post: tuple
    logits: np.ndarray
    output: np.ndarray

    @property
    def n(self):
        return self.inputs.shape[0]

    def activation(self, l):
        """Layer-``l`` activation (``l = 0`` is the input)."""
        return self.inputs if l == 0 else self.post[l - 1]

    def row(self, i):
        return ForwardTrace(self.inputs[i:i + 1], tuple(z[i:i + 1] for z in self.pre),
                            tuple(a[i:i + 1] for a in self.post), self.logits[i:i + 1], self.output[i:i + 1])

    def repeat(self, k):
        rep = lambda a: np.repeat(a, k, axis=0)  # noqa: E731
        return ForwardTrace(rep(self.inputs), tuple(map(rep, self.pre)), tuple(map(rep, self.post)),
                            rep(self.logits), rep(self.output))


def apply_head(head, logits):
    if head == "linear":
        return logits
    if head == "softmax":
        return softmax(logits, axis=-1)
    return activations.get(head).f(logits)


def log_probs(logits):
    return log_softmax(logits, axis=-1)


def as_batch(spec, x):
    x = np.asarray(x, dtype=float)
    if x.ndim == 0:
        x = x.reshape(1)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != spec.input_dim:
        raise ValueError(f"input has shape {x.shape}, expected (n, {spec.input_dim})")
    return x


def forward(spec: NetworkSpec, W: Weights, x) -> ForwardTrace:
    """Evaluate the network on one input ``(d,)`` or a batch ``(n, d)``."""
    p = _compile(spec)
    X = as_batch(spec, x)
    a = X.reshape((X.shape[0],) + p.input_shape)
    inputs = a
    pre, post = [], []
    for lay, params in zip(p.layers, W.layers):
        a_in = a.reshape((a.shape[0],) + lay.in_shape)
        z = lay.lin(params[0], a_in) / lay.divisor
        if lay.bias:
            z = z + params[1]
        a = lay.act.f(z)
        if lay.skip:
            a = a + lay.skip * a_in
        pre.append(z)
        post.append(a)
    flat = a.reshape(a.shape[0], -1)
    logits = flat @ W.output.T / p.out_divisor
    out = apply_head(spec.head, logits)
    if not (np.all(np.isfinite(logits)) and np.all(np.isfinite(out))):
        # non-finite values propagate, so only a failure needs the per-layer scan
        for lay, z, a in zip(p.layers, pre, post):
            if not (np.all(np.isfinite(z)) and np.all(np.isfinite(a))):
                raise NumericalError(f"non-finite value in layer {lay.index}", layer=lay.index)
        raise NumericalError("non-finite value in output layer", layer=len(p.layers) + 1)
    return ForwardTrace(inputs, tuple(pre), tuple(post), logits, out)


def predict(spec, W, X):
    return forward(spec, W, X).output
