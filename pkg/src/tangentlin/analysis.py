"""Tangent kernels, Hessian norms, bounds and scaling fits."""

import logging
from dataclasses import dataclass

import numpy as np

from . import rng
from .derivatives import (QQuantities, backward, head_seed, layer_quantities, param_grads,
                          reduced_hessian_operator, require_smooth)
from .network import FullyConnected, NetworkSpec, Weights, as_batch, forward, plan
from .tensor import spectral_norm, unit_vector

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class KernelMatrix:
    """Tangent kernel Gram matrix; row ``i * C + a`` is output ``a`` at input ``i``."""

    matrix: np.ndarray
    n: int
    C: int

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=float)
        m = 0.5 * (m + m.T)
        m.setflags(write=False)
        object.__setattr__(self, "matrix", m)

    def entry(self, i, a, j, b):
        return float(self.matrix[i * self.C + a, j * self.C + b])

    def diagonal(self):
        return np.diag(self.matrix).copy()

    @property
    def trace(self):
        return float(np.trace(self.matrix))

    def frobenius(self):
        return float(np.linalg.norm(self.matrix))


def _kernel_view(spec, view):
    if view == "post":
        return spec
    if view == "pre":
        return spec.with_head("linear")
    raise ValueError(f"kernel view must be 'pre' or 'post', got {view!r}")


def _interleave(arrays):
    # list over outputs a of (n, ...) -> (n * C, ...) ordered sample-major
    stacked = np.stack(arrays, axis=1)
    return stacked.reshape((-1,) + stacked.shape[2:])


def _expand(gram, C):
    return np.repeat(np.repeat(gram, C, axis=0), C, axis=1)


def tangent_kernel(spec: NetworkSpec, W: Weights, inputs, view="post") -> KernelMatrix:
    """Gram matrix of all per-output gradients over ``inputs``.

    ``view="pre"`` uses the gradients of the linear read-out instead of the
    head output. Dense layers use the factorization
    ``<g_i a_i^T, g_j a_j^T> = (g_i . g_j)(a_i . a_j)`` so no per-sample
    gradient is ever formed.
    """
    spec = _kernel_view(spec, view)
    X = as_batch(spec, inputs)
    trace = forward(spec, W, X)
    p = plan(spec)
    n, C = X.shape[0], spec.output_dim
    seeds, gsets = [], []
    for a in range(C):
        s = head_seed(spec, trace.logits, a)
        seeds.append(s)
        gsets.append(backward(spec, W, trace, s)[0])
    K = np.zeros((n * C, n * C))
    for k, lay in enumerate(p.layers):
        G = _interleave([gs[k] for gs in gsets]).reshape(n * C, -1)
        if lay.conv:
            # per-sample gradients are cheap at the sizes convolutions are used
            A = np.repeat(trace.activation(k).reshape((n,) + lay.in_shape), C, axis=0)
            per = lay.lin_adj_w(G.reshape((n * C,) + lay.out_shape), A, per_sample=True)
            per = per.reshape(n * C, -1) / lay.divisor
            K += per @ per.T
            continue
        A = trace.activation(k).reshape(n, -1)
        GG = G @ G.T
        K += GG * _expand(A @ A.T, C) / lay.divisor ** 2
        if lay.bias:
            K += GG
    if W.output_trainable:
        S = _interleave(seeds)
        aL = trace.post[-1].reshape(n, -1)
        K += (S @ S.T) * _expand(aL @ aL.T, C) / p.out_divisor ** 2
    return KernelMatrix(K, n, C)


def jacobian(spec, W, inputs, view="post"):
    """Explicitly stacked per-output gradients, shape ``(n * C, P)``."""
    spec = _kernel_view(spec, view)
    X = as_batch(spec, inputs)
    trace = forward(spec, W, X)
    n, C = X.shape[0], spec.output_dim
    rows = []
    for a in range(C):
        s = head_seed(spec, trace.logits, a)
        gs, _ = backward(spec, W, trace, s)
        layers, gv = param_grads(spec, W, trace, gs, s, per_sample=True)
        parts = [arr.reshape(n, -1) for ps in layers for arr in ps]
        if W.output_trainable:
            parts.append(gv.reshape(n, -1))
        rows.append(np.concatenate(parts, axis=1))
    return _interleave(rows)


@dataclass(frozen=True)
class HessianNorm:
    value: float
    per_output: tuple
    converged: bool

    def __float__(self):
        return self.value


def hessian_spectral_norm(spec, W, x, out_index=None, tol=1e-9, max_iter=1000, seed=0,
                          method="power") -> HessianNorm:
    """Spectral norm of the output Hessian at a single input.

    The iteration runs on the compressed operator of
    :func:`~tangentlin.derivatives.reduced_hessian_operator`, which has the
    same norm. With ``out_index=None`` the maximum over output coordinates is
    returned.
    """
    require_smooth(spec)
    indices = range(spec.output_dim) if out_index is None else [out_index]
    results = []
    for a in indices:
        op = reduced_hessian_operator(spec, W, x, a)
        res = spectral_norm(op, tol=tol, max_iter=max_iter, seed=rng.child(seed, "hessian", a), method=method)
        if not res.converged:
            logger.warning("Hessian norm iteration did not converge (output %d, %d iterations)", a, res.iterations)
        results.append(res)
    return HessianNorm(max(r.value for r in results), tuple(results), all(r.converged for r in results))


def hessian_constants(L, lipschitz_phi):
    lp = float(lipschitz_phi)
    c1 = L * (L * L * lp ** (2 * L) + L * lp ** L + 1)
    c2 = L * lp ** L
    return c1, c2


def hessian_bound(q: QQuantities, L, lipschitz_phi, m):
    """Upper bound ``C1 Q221 Qinf + C2 QL / sqrt(m)`` on the Hessian norm."""
    if L < 1 or m < 1:
        raise ValueError("L and m must be >= 1")
    c1, c2 = hessian_constants(L, lipschitz_phi)
    return float(c1 * q.q_221 * q.q_inf + c2 * q.q_l / np.sqrt(m))


@dataclass(frozen=True)
class BoundReport:
    hessian_norm: float
    bound: float
    lipschitz: float
    q: QQuantities

    @property
    def holds(self):
        return self.hessian_norm <= self.bound


def bound_report(spec, W, x, out_index=0, seed=0, tol=1e-9, restarts=8, method="power", max_iter=1000):
    """Measure ``||H||`` and the Q-quantity bound at one input.

    The Lipschitz constant is the largest measured layer Jacobian norm,
    floored at 1 so the powers in the constants never shrink.
    """
    trace = forward(spec, W, x)
    q = layer_quantities(spec, W, trace, out_index, tol=tol, restarts=restarts, seed=seed, method=method)
    lip = max(1.0, q.lipschitz)
    h = hessian_spectral_norm(spec.with_head("linear"), W, x, out_index, tol=tol, max_iter=max_iter, seed=seed,
                              method=method).value
    return BoundReport(h, hessian_bound(q, spec.depth, lip, plan(spec).out_size), lip, q)


def delta_k(snapshots):
    """``max_t ||K_t - K_0||_F / ||K_0||_F`` over the snapshots after the first."""
    mats = [s.matrix if isinstance(s, KernelMatrix) else np.asarray(s, dtype=float) for s in snapshots]
    if len(mats) < 2:
        raise ValueError("delta_k needs at least two snapshots")
    k0 = np.linalg.norm(mats[0])
    if k0 == 0.0:
        raise ZeroDivisionError("initial kernel has zero Frobenius norm")
    return float(max(np.linalg.norm(m - mats[0]) for m in mats[1:]) / k0)


@dataclass(frozen=True)
class BallCheck:
    kernel_change: float
    hessian_max: float
    gradient_max: float
    radius: float

    @property
    def bound(self):
        return 2.0 * self.gradient_max * self.hessian_max * self.radius

    @property
    def holds(self):
        return self.kernel_change <= self.bound * (1 + 1e-9) + 1e-12


def kernel_change_vs_hessian_check(spec, W0, inputs, radius, probes=100, seed=0, out_index=0,
                                   tol=1e-8, radii=(0.25, 0.5, 0.75, 1.0), method="auto"):
    """Probe the ball ``B(W0, radius)`` along random rays.

    Each probe draws a uniform direction and visits the points at the given
    fractions of ``radius``. Reported are the largest kernel-entry change
    over the input pairs, and the largest Hessian norm and gradient norm over
    every visited point (``W0`` included). The inequality checked is
    ``change <= 2 * max|grad| * max||H|| * radius``.
    """
    require_smooth(spec)
    X = as_batch(spec, inputs)
    C = spec.output_dim
    sel = [i * C + out_index for i in range(X.shape[0])]

    def measure(W):
        K = tangent_kernel(spec, W, X).matrix[np.ix_(sel, sel)]
        hs = [hessian_spectral_norm(spec, W, x, out_index, tol=tol, seed=seed, method=method).value
              for x in X] if radius else [0.0]
        return K, max(hs), float(np.sqrt(np.max(np.diag(K))))

    K0, hmax, gmax = measure(W0)
    change = 0.0
    if radius > 0:
        w0 = W0.flat()
        for r in range(probes):
            u = unit_vector(w0.size, rng.child(seed, "probe", r))
            for frac in radii:
                K, h, g = measure(W0.from_flat(w0 + frac * radius * u))
                change = max(change, float(np.max(np.abs(K - K0))))
                hmax, gmax = max(hmax, h), max(gmax, g)
    return BallCheck(change, hmax, gmax, float(radius))


@dataclass(frozen=True)
class Kappa:
    value: float
    A: float
    B: float


def kappa(spec, W0, inputs, labels, alpha=1.0, f0=None, tol=1e-9, seed=0):
    """Residual-times-curvature criterion for the model ``alpha * f``.

    ``A = ||f(W0) - y / alpha||`` over the dataset and
    ``B = max_i ||H(x_i)|| / min_i ||grad f(x_i)||^2``; rescaling the model by
    ``alpha`` leaves ``B`` unchanged. ``f0`` overrides the model predictions.
    """
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    X = as_batch(spec, inputs)
    Y = np.asarray(labels, dtype=float).reshape(X.shape[0], -1)
    f = forward(spec, W0, X).output if f0 is None else np.asarray(f0, dtype=float).reshape(Y.shape)
    A = float(np.linalg.norm(f - Y / alpha))
    gmin = float(np.min(tangent_kernel(spec, W0, X).diagonal()))
    if gmin <= 0.0:
        raise ZeroDivisionError("zero gradient norm at some input")
    hmax = max(hessian_spectral_norm(spec, W0, x, tol=tol, seed=seed).value for x in X)
    B = hmax / gmin
    return Kappa(A * B, A, B)


def bottleneck_spec(m, m_b=1, activation="quadratic", head="linear", output_dim=1):
    """Three hidden layers ``m -> m_b -> m``; the middle one is the bottleneck.

    With the defaults this is the quadratic network with a single linear
    bottleneck unit used for the lower-bound statistic.
    """
    mid = "identity" if activation == "quadratic" else activation
    return NetworkSpec(1, (FullyConnected(m, activation), FullyConnected(m_b, mid), FullyConnected(m, activation)),
                       head=head, output_dim=output_dim)


def bottleneck_block_stat(spec, W, x):
    """Norm of the Hessian block of the bottleneck weights.

    For a width-one identity bottleneck the block is the rank-one matrix
    ``c * alpha1 alpha1^T`` with ``c = sum_j v_j act''(z3_j) (w3_j)^2`` times the
    layer scalings, so its norm is ``|c| ||alpha1||^2``.
    """
    if (spec.depth != 3 or spec.head != "linear" or spec.output_dim != 1
            or spec.layers[1].width != 1 or spec.layers[1].activation != "identity"
            or any(type(layer).__name__ != "FullyConnected" or layer.bias for layer in spec.layers)):
        raise ValueError("statistic is defined for the 3-layer width-one identity bottleneck network")
    require_smooth(spec)
    p = plan(spec)
    trace = forward(spec, W, x)
    if trace.n != 1:
        raise ValueError("bottleneck_block_stat takes a single input")
    l2, l3 = p.layers[1], p.layers[2]
    w3 = W.layers[2][0][:, 0]
    v = W.output[0]
    d2 = l3.act.d2(trace.pre[2][0])
    c = np.sum(v * d2 * w3 ** 2) / (p.out_divisor * l3.divisor ** 2 * l2.divisor ** 2)
    a1 = trace.post[0][0]
    return float(abs(c) * np.dot(a1, a1))


@dataclass(frozen=True)
class ScalingFit:
    widths: np.ndarray
    values: np.ndarray
    slope: float
    intercept: float
    r2: float

    def predict(self, width):
        return float(np.exp(self.intercept) * np.asarray(width, dtype=float) ** self.slope)


def scaling_fit(points):
    """Ordinary least squares of ``ln value`` on ``ln width``."""
    pts = [(float(w), float(v)) for w, v in points]
    if len(pts) < 3:
        raise ValueError("scaling_fit needs at least 3 points")
    w = np.array([p[0] for p in pts])
    v = np.array([p[1] for p in pts])
    if np.any(w <= 0) or np.any(v <= 0) or not np.all(np.isfinite(v)):
        raise ValueError("widths and values must be positive and finite")
    lx, ly = np.log(w), np.log(v)
    slope, intercept = np.polyfit(lx, ly, 1)
    resid = ly - (slope * lx + intercept)
    tot = np.sum((ly - ly.mean()) ** 2)
    r2 = 1.0 - np.sum(resid ** 2) / tot if tot > 0 else 1.0
    return ScalingFit(w, v, float(slope), float(intercept), float(r2))


def mean_fit(records):
    """Fit on per-width means of ``(width, value)`` records."""
    groups = {}
    for w, v in records:
        groups.setdefault(w, []).append(v)
    return scaling_fit([(w, float(np.mean(vs))) for w, vs in sorted(groups.items())])
