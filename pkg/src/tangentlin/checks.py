"""Finite-difference and dense-matrix oracles for the derivative engine."""

import logging
from dataclasses import dataclass

import numpy as np

from . import rng
from .analysis import bottleneck_spec, hessian_spectral_norm
from .derivatives import dense_hessian, flat_gradient, gradient, hvp
from .network import Conv1D, FullyConnected, NetworkSpec, Residual, Shallow, forward, init_weights

logger = logging.getLogger(__name__)

GRAD_TOL = 1e-6
HVP_TOL = 1e-5
HESSIAN_TOL = 1e-6


@dataclass(frozen=True)
class CheckResult:
    architecture: str
    check: str
    error: float
    tolerance: float

    @property
    def passed(self):
        return bool(np.isfinite(self.error) and self.error < self.tolerance)


def standard_architectures(m=16):
    """Smooth test networks of width ``m``, one per layer family plus two heads."""
    return {
        "shallow": NetworkSpec(1, (Shallow(m, "tanh"),)),
        "fc3": NetworkSpec(3, (FullyConnected(m, "tanh"), FullyConnected(m, "tanh"), FullyConnected(m, "tanh"))),
        "conv": NetworkSpec(8, (Conv1D(m, 4, 3, "tanh"), Conv1D(m, 4, 3, "tanh"), FullyConnected(m, "tanh"))),
        "residual": NetworkSpec(4, (FullyConnected(m, "tanh", bias=True), Residual(m, "tanh"),
                                    Residual(m, "sigmoid", 0.5))),
        "bottleneck": bottleneck_spec(m),
        "softmax-head": NetworkSpec(2, (FullyConnected(m, "tanh"), FullyConnected(m, "tanh")),
                                    head="softmax", output_dim=3),
        "swish-head": NetworkSpec(2, (FullyConnected(m, "tanh"), FullyConnected(m, "tanh")), head="swish"),
    }


def small_architectures():
    """Nets with at most 200 parameters for the dense Hessian oracle."""
    return {
        "shallow": NetworkSpec(1, (Shallow(24, "tanh"),)),
        "fc2": NetworkSpec(2, (FullyConnected(8, "tanh"), FullyConnected(8, "sigmoid"))),
        "conv": NetworkSpec(4, (Conv1D(3, 4, 3, "tanh"), Conv1D(2, 4, 3, "tanh"))),
        "residual": NetworkSpec(3, (FullyConnected(6, "tanh", bias=True), Residual(6, "tanh"))),
        "bottleneck": bottleneck_spec(8),
        "softmax-head": NetworkSpec(2, (FullyConnected(10, "tanh"),), head="softmax", output_dim=3),
    }


def _rel(a, b):
    den = np.linalg.norm(b)
    return float(np.linalg.norm(a - b) / den) if den > 0 else float(np.linalg.norm(a))


def fd_gradient(spec, W, x, out_index=0, h=1e-5):
    """Central differences of one output coordinate, one parameter at a time."""
    w0 = W.flat()
    out = np.empty_like(w0)
    for k in range(w0.size):
        e = np.zeros_like(w0)
        e[k] = h
        up = forward(spec, W.from_flat(w0 + e), x).output[0, out_index]
        dn = forward(spec, W.from_flat(w0 - e), x).output[0, out_index]
        out[k] = (up - dn) / (2 * h)
    return out


def fd_hvp(spec, W, x, out_index, u, h=1e-4):
    w0 = W.flat()
    up = flat_gradient(spec, W.from_flat(w0 + h * u), x, out_index)
    dn = flat_gradient(spec, W.from_flat(w0 - h * u), x, out_index)
    return (up - dn) / (2 * h)


def derivative_checks(m=16, seed=0, architectures=None):
    """Gradient vs central differences and HVP vs differences of gradients."""
    specs = standard_architectures(m)
    if architectures is not None:
        specs = {k: specs[k] for k in architectures}
    results = []
    for name, spec in specs.items():
        W = init_weights(spec, seed=seed)
        gen = rng.stream(seed, "check", name)
        x = gen.standard_normal(spec.input_dim)
        trace = forward(spec, W, x)
        for a in range(spec.output_dim):
            g = gradient(spec, W, trace, a).flat
            results.append(CheckResult(name, f"gradient[{a}]", _rel(g, fd_gradient(spec, W, x, a)), GRAD_TOL))
            u = gen.standard_normal(W.size)
            u /= np.linalg.norm(u)
            results.append(CheckResult(name, f"hvp[{a}]", _rel(hvp(spec, W, trace, a, u),
                                                               fd_hvp(spec, W, x, a, u)), HVP_TOL))
        logger.info("derivative checks done for %s", name)
    return results


def hessian_norm_checks(seed=0, tol=1e-13, max_iter=100000, method="power"):
    """Matrix-free Hessian norm vs the dense eigendecomposition."""
    results = []
    for name, spec in small_architectures().items():
        W = init_weights(spec, seed=seed)
        x = rng.stream(seed, "hessian-check", name).standard_normal(spec.input_dim)
        for a in range(spec.output_dim):
            dense = float(np.max(np.abs(np.linalg.eigvalsh(dense_hessian(spec, W, x, a)))))
            est = hessian_spectral_norm(spec, W, x, a, tol=tol, max_iter=max_iter, seed=seed, method=method).value
            err = abs(est - dense) / dense if dense > 0 else abs(est)
            results.append(CheckResult(name, f"hessian_norm[{a}] (P={W.size})", err, HESSIAN_TOL))
    return results
