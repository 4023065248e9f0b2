"""Synthetic data and full-batch gradient descent with kernel diagnostics."""

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.special import log_softmax, softmax

from . import rng
from .activations import get as get_activation
from .analysis import tangent_kernel
from .derivatives import backward, param_grads
from .network import FullyConnected, NetworkSpec, NumericalError, Weights, as_batch, forward

logger = logging.getLogger(__name__)

CLASS_MEANS = (0.0, 10.0, -10.0)
LOSSES = ("square", "cross-entropy")


class DivergenceError(NumericalError):
    """Gradient descent produced a huge or non-finite loss."""

    def __init__(self, message, epoch, loss):
        super().__init__(message)
        self.epoch = epoch
        self.loss = loss


@dataclass(frozen=True)
class Dataset:
    x: np.ndarray
    labels: np.ndarray
    C: int

    def __post_init__(self):
        x = np.asarray(self.x, dtype=float)
        if x.ndim == 1:
            x = x[:, None]
        labels = np.asarray(self.labels, dtype=int)
        if labels.shape != (x.shape[0],):
            raise ValueError("one label per input required")
        if labels.min(initial=0) < 0 or labels.max(initial=0) >= self.C:
            raise ValueError(f"labels must lie in [0, {self.C})")
        x.setflags(write=False)
        labels.setflags(write=False)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "labels", labels)

    @property
    def n(self):
        return self.x.shape[0]

    @property
    def onehot(self):
        return np.eye(self.C)[self.labels]


def make_synthetic_dataset(seed=0, n=60, means=CLASS_MEANS, std=1.0):
    """Three Gaussian classes on the line, labels drawn uniformly."""
    gen = rng.stream(seed, "dataset")
    labels = gen.integers(0, len(means), size=n)
    x = np.asarray(means, dtype=float)[labels] + std * gen.standard_normal(n)
    return Dataset(x[:, None], labels, len(means))


def _check_loss(spec, loss):
    if loss not in LOSSES:
        raise ValueError(f"loss must be one of {LOSSES}, got {loss!r}")
    if loss == "cross-entropy" and spec.head != "softmax":
        raise ValueError("cross-entropy loss needs a softmax head")
    if loss == "square" and spec.output_dim != 1 and spec.head not in ("linear", "softmax") \
            and not get_activation(spec.head).smooth:
        raise ValueError(f"unsupported head {spec.head!r}")


def loss_value(spec, trace, Y, loss):
    n = trace.n
    if loss == "cross-entropy":
        return float(-np.sum(Y * log_softmax(trace.logits, axis=1)) / n)
    r = trace.output - Y
    return float(np.sum(r * r) / n)


def _logit_cotangent(spec, trace, Y, loss):
    """``dLoss / dlogits`` for the whole batch, shape ``(n, C)``."""
    n = trace.n
    if loss == "cross-entropy":
        return (softmax(trace.logits, axis=1) - Y) / n
    u = 2.0 * (trace.output - Y) / n
    if spec.head == "linear":
        return u
    if spec.head == "softmax":
        p = trace.output
        return p * (u - np.sum(p * u, axis=1, keepdims=True))
    return u * get_activation(spec.head).d1(trace.logits)


def loss_and_gradient(spec, W, X, Y, loss):
    """Loss and its gradient (a :class:`Weights`-shaped direction)."""
    trace = forward(spec, W, X)
    value = loss_value(spec, trace, Y, loss)
    seed = _logit_cotangent(spec, trace, Y, loss)
    gs, _ = backward(spec, W, trace, seed)
    layers, gv = param_grads(spec, W, trace, gs, seed)
    if not W.output_trainable:
        gv = np.zeros_like(W.output)
    return value, Weights(tuple(tuple(layer) for layer in layers), gv, W.output_trainable)


def _step(W, grad, lr):
    # keep the storage precision of each array
    layers = tuple(tuple((p - lr * g).astype(p.dtype, copy=False) for p, g in zip(ps, gs))
                   for ps, gs in zip(W.layers, grad.layers))
    out = (W.output - lr * grad.output).astype(W.output.dtype, copy=False) if W.output_trainable else W.output
    return Weights(layers, out, W.output_trainable)


def _diff_norms(W, W0):
    sq, inf = 0.0, 0.0
    for a, b in zip(W.arrays(), W0.arrays()):
        d = a - b
        sq += float(np.sum(d * d))
        inf = max(inf, float(np.max(np.abs(d))))
    return np.sqrt(sq), inf


@dataclass
class Trajectory:
    """Record of one gradient-descent run.

    ``delta_k_series[view]`` lists ``(epoch, ||K_t - K_0||_F / ||K_0||_F)`` at
    every snapshot epoch; full kernel matrices are kept only when requested.
    """

    spec: NetworkSpec
    loss: str
    lr: float
    tol: float
    epochs: np.ndarray
    losses: np.ndarray
    dist_l2: np.ndarray
    dist_inf: np.ndarray
    snapshot_epochs: list
    delta_k_series: dict
    initial_kernels: dict
    W0: Weights
    W: Weights
    converged: bool
    grad_norm_max: float
    kernels: dict = field(default_factory=dict)

    @property
    def final_loss(self):
        return float(self.losses[-1])

    @property
    def final_epoch(self):
        return int(self.epochs[-1])

    def delta_k(self, view="post"):
        series = self.delta_k_series[view]
        return max(v for _, v in series[1:]) if len(series) > 1 else 0.0


def _snapshot_due(epoch, every, extra):
    return epoch == 0 or (every and epoch % every == 0) or epoch in extra


def gradient_descent(spec: NetworkSpec, W0: Weights, data: Dataset, loss="square", lr=0.1, max_epochs=1000,
                     tol=1e-4, snapshot_every=10, views=("post",), keep_kernels=False, snapshot_epochs=(),
                     divergence_limit=1e6, track_grad=True):
    """Full-batch gradient descent ``W <- W - lr * grad L`` until ``L < tol``.

    Kernel snapshots (for every entry of ``views``, ``"pre"`` or ``"post"``)
    are taken at epoch 0, every ``snapshot_every`` epochs, at the extra
    ``snapshot_epochs`` and at the final epoch. Raises
    :class:`DivergenceError` when the loss exceeds ``divergence_limit`` or is
    not finite. ``track_grad`` records the largest per-output gradient norm
    of the post-head model at the snapshots.
    """
    if lr < 0:
        raise ValueError("lr must be non-negative")
    _check_loss(spec, loss)
    X = as_batch(spec, data.x)
    Y = data.onehot if spec.output_dim == data.C else data.onehot[:, : spec.output_dim]
    if Y.shape[1] != spec.output_dim:
        raise ValueError("label dimension does not match output_dim")
    extra = set(int(e) for e in snapshot_epochs)
    epochs, losses, d2, dinf = [], [], [], []
    snaps = []
    series = {v: [] for v in views}
    initial = {}
    kept = {v: [] for v in views} if keep_kernels else {}
    gmax = 0.0
    W = W0
    converged = False

    def snapshot(epoch, W):
        nonlocal gmax
        snaps.append(epoch)
        if track_grad and "post" not in views:
            gmax = max(gmax, float(np.sqrt(np.max(tangent_kernel(spec, W, X).diagonal()))))
        for v in views:
            K = tangent_kernel(spec, W, X, view=v)
            if v == "post":
                gmax = max(gmax, float(np.sqrt(np.max(K.diagonal()))))
            if epoch == 0:
                initial[v] = K
                series[v].append((0, 0.0))
            else:
                K0 = initial[v].matrix
                series[v].append((epoch, float(np.linalg.norm(K.matrix - K0) / np.linalg.norm(K0))))
            if keep_kernels:
                kept[v].append(K)

    for epoch in range(max_epochs + 1):
        value, grad = loss_and_gradient(spec, W, X, Y, loss)
        if not np.isfinite(value) or value > divergence_limit:
            raise DivergenceError(f"loss {value:.3g} at epoch {epoch} (lr={lr})", epoch, value)
        a, b = _diff_norms(W, W0) if epoch else (0.0, 0.0)
        epochs.append(epoch)
        losses.append(value)
        d2.append(a)
        dinf.append(b)
        done = value < tol
        if done or epoch == max_epochs or _snapshot_due(epoch, snapshot_every, extra):
            snapshot(epoch, W)
        if done:
            converged = True
            break
        if epoch < max_epochs:
            W = _step(W, grad, lr)
    if not converged:
        logger.info("no convergence after %d epochs (loss %.3g)", max_epochs, losses[-1])
    return Trajectory(spec, loss, lr, tol, np.array(epochs), np.array(losses), np.array(d2), np.array(dinf),
                      snaps, series, initial, W0, W, converged, gmax, kept)


@dataclass(frozen=True)
class WeightChangeReport:
    dist_l2: float
    dist_inf: float
    residual: float
    grad_norm_max: float

    @property
    def lower_bound(self):
        return self.residual / self.grad_norm_max if self.grad_norm_max > 0 else float("inf")

    @property
    def holds(self):
        return self.dist_l2 >= self.lower_bound


def weight_change_report(traj: Trajectory, spec=None, data: Dataset = None) -> WeightChangeReport:
    """Distances from initialization and the residual-over-gradient lower bound.

    ``residual`` is the largest ``|f_a(W0; x_i) - y_ia|`` over the data and
    ``grad_norm_max`` the largest per-output gradient norm seen at the kernel
    snapshots, the stand-in for the supremum over the path.
    """
    spec = spec or traj.spec
    a, b = _diff_norms(traj.W, traj.W0)
    if data is None:
        return WeightChangeReport(a, b, 0.0, traj.grad_norm_max)
    out = forward(spec, traj.W0, data.x).output
    resid = float(np.max(np.abs(out - data.onehot[:, : spec.output_dim])))
    return WeightChangeReport(a, b, resid, traj.grad_norm_max)


def line_search_lr(spec, W0, data, loss, candidates=None, probe_epochs=100):
    """Learning rate with the lowest loss after a short monotone probe run.

    Candidates default to a halving grid from 64 down to 2**-12; a candidate
    is admissible when its probe loss never increases.
    """
    if candidates is None:
        candidates = [2.0 ** k for k in range(6, -13, -1)]
    best, best_loss = None, np.inf
    for lr in sorted(candidates, reverse=True):
        try:
            traj = gradient_descent(spec, W0, data, loss, lr, probe_epochs, tol=0.0, snapshot_every=0,
                                    views=(), track_grad=False)
        except DivergenceError:
            continue
        if np.all(np.diff(traj.losses) <= 1e-12 * np.abs(traj.losses[:-1])) and traj.final_loss < best_loss:
            best, best_loss = lr, traj.final_loss
    if best is None:
        raise DivergenceError("no candidate learning rate gave a monotone probe run", 0, float("nan"))
    logger.info("line search: lr=%g (probe loss %.3g)", best, best_loss)
    return best


def shallow_experiment_spec(m, head="linear"):
    """One ReLU hidden layer with bias and a trainable 3-way output layer."""
    return NetworkSpec(1, (FullyConnected(m, "relu", bias=True),), head=head, output_dim=3)


def bottleneck_experiment_spec(m, m_b, head="softmax"):
    """ReLU layers of width ``m`` (with bias) around a linear bottleneck of width ``m_b``.

    Without biases the net is positively homogeneous in the scalar input and
    cannot separate the class centred at zero from the outer ones.
    """
    return NetworkSpec(1, (FullyConnected(m, "relu", bias=True), FullyConnected(m_b, "identity"),
                           FullyConnected(m, "relu", bias=True)),
                       head=head, output_dim=3)
