"""Dense sampling and matrix-free norm estimators.

The iterative estimators never materialize the operators they measure: a
:class:`LinearMap` is a pair of callables and an :class:`Order3Action` is a
bilinear contraction with its two adjoints.
"""

import logging
from dataclasses import dataclass
from typing import Callable, NamedTuple, Optional

import numpy as np
from scipy.linalg import eigh_tridiagonal

from . import rng

logger = logging.getLogger(__name__)


def gaussian_matrix(rows: int, cols: int, std: float = 1.0, seed=0, dtype=np.float64) -> np.ndarray:
    """I.i.d. ``N(0, std**2)`` matrix drawn from the stream keyed by ``seed``.

    The standard-normal draws depend only on ``(seed, rows, cols)``; ``std``
    multiplies them afterwards, so matrices of different scale built from the
    same seed are exact rescalings of one another. A ``float32`` matrix holds
    the same draws rounded to single precision; it is filled in row chunks so
    no full double-precision copy is ever allocated.
    """
    if rows < 1 or cols < 1:
        raise ValueError(f"shape must be positive, got ({rows}, {cols})")
    if std < 0:
        raise ValueError(f"std must be non-negative, got {std}")
    gen = rng.stream(seed, "gaussian", rows, cols)
    if np.dtype(dtype) == np.float64:
        return gen.standard_normal((rows, cols)) * std
    out = np.empty((rows, cols), dtype=dtype)
    step = max(1, (1 << 22) // cols)
    for start in range(0, rows, step):
        stop = min(rows, start + step)
        out[start:stop] = gen.standard_normal((stop - start, cols)) * std
    return out


def unit_vector(dim, seed):
    v = rng.stream(seed, "unit", dim).standard_normal(dim)
    return v / np.linalg.norm(v)


@dataclass(frozen=True)
class LinearMap:
    """Matrix-free linear operator ``R^dim_in -> R^dim_out``.

    ``adjoint`` may be omitted when ``symmetric`` is set.
    """

    dim_in: int
    dim_out: int
    apply: Callable[[np.ndarray], np.ndarray]
    adjoint: Optional[Callable[[np.ndarray], np.ndarray]] = None
    symmetric: bool = False

    def __post_init__(self):
        if self.symmetric and self.dim_in != self.dim_out:
            raise ValueError("symmetric map must be square")
        if not self.symmetric and self.adjoint is None:
            raise ValueError("non-symmetric map needs an adjoint")

    def rmatvec(self, y):
        return self.apply(y) if self.symmetric else self.adjoint(y)

    @classmethod
    def from_matrix(cls, A, symmetric=False):
        A = np.asarray(A, dtype=float)
        return cls(A.shape[1], A.shape[0], lambda x: A @ x, lambda y: A.T @ y, symmetric)

    def materialize(self):
        cols = [self.apply(e) for e in np.eye(self.dim_in)]
        return np.column_stack(cols) if cols else np.zeros((self.dim_out, 0))


class PowerIterationResult(NamedTuple):
    value: float
    iterations: int
    converged: bool
    rayleigh: float

    def __float__(self):
        return float(self.value)


DENSE_LIMIT = 256
KRYLOV_DIM = 64


def spectral_norm(op: LinearMap, tol=1e-9, max_iter=1000, seed=0, x0=None, method="power"):
    """Largest singular value of ``op`` by power iteration.

    Symmetric maps are iterated directly: the estimate ``||A x_k||`` with
    ``x_k = A x_{k-1} / ||A x_{k-1}||`` is non-decreasing and tends to the
    largest absolute eigenvalue, also when ``+lambda`` and ``-lambda`` are
    both dominant. The signed Rayleigh quotient ``x^T A x`` at the final
    iterate is reported as ``rayleigh``. General maps are iterated through
    ``A^T A`` with the estimate ``||A^T y|| / ||y||``. Stopping is on the
    relative change of the estimate; non-convergence is reported through the
    result flag, never raised.

    ``method="lanczos"`` runs a restarted Lanczos iteration on a symmetric
    map instead; it needs far fewer products when the top eigenvalues are
    clustered.
    ``method="dense"`` materializes the map and takes an exact SVD, and
    ``method="auto"`` uses it up to ``DENSE_LIMIT`` columns, Lanczos (or power
    iteration for non-symmetric maps) above.
    """
    if method == "auto":
        if op.dim_in <= DENSE_LIMIT:
            method = "dense"
        else:
            method = "lanczos" if op.symmetric else "power"
    if method == "dense":
        A = op.materialize()
        if op.symmetric:
            vals = np.linalg.eigvalsh(0.5 * (A + A.T))
            top = float(vals[np.argmax(np.abs(vals))]) if vals.size else 0.0
            return PowerIterationResult(abs(top), op.dim_in, True, top)
        value = float(np.linalg.norm(A, 2)) if A.size else 0.0
        return PowerIterationResult(value, op.dim_in, True, value)
    if method == "lanczos":
        return _lanczos_norm(op, tol, max_iter, seed)
    if method != "power":
        raise ValueError(f"unknown method {method!r}")
    if tol <= 0:
        raise ValueError("tol must be positive")
    x = unit_vector(op.dim_in, rng.child(seed, "power")) if x0 is None else np.asarray(x0, float)
    x = x / np.linalg.norm(x)
    prev = None
    estimate = 0.0
    rayleigh = 0.0
    for it in range(1, max_iter + 1):
        y = op.apply(x)
        ny = np.linalg.norm(y)
        if ny == 0.0:
            return PowerIterationResult(0.0, it, True, 0.0)
        if op.symmetric:
            rayleigh = float(x @ y)
            value, nxt = ny, y / ny
        else:
            z = op.rmatvec(y)
            nz = np.linalg.norm(z)
            # ||A^T y|| / ||y|| <= ||A|| and is non-decreasing along the iteration
            value = nz / ny
            if nz == 0.0:
                return PowerIterationResult(max(estimate, value), it, True, max(estimate, value))
            nxt = z / nz
        estimate = max(estimate, value)
        if not op.symmetric:
            rayleigh = estimate
        x = nxt
        if prev is not None and abs(estimate - prev) <= tol * estimate:
            return PowerIterationResult(estimate, it, True, rayleigh)
        prev = estimate
    logger.info("power iteration stopped at max_iter=%d (estimate %.6g)", max_iter, estimate)
    return PowerIterationResult(estimate, max_iter, False, rayleigh)


def _lanczos_norm(op, tol, max_iter, seed, krylov=KRYLOV_DIM, patience=20):
    """Restarted Lanczos with full reorthogonalization.

    The largest absolute Ritz value never decreases and stays below the true
    norm. Stopping is on the Ritz residual or, for clustered top eigenvalues
    whose vectors resolve slowly, on a total relative gain below ``tol``
    over the last ``patience`` steps. ``max_iter`` caps the number of
    products.
    """
    if not op.symmetric:
        raise ValueError("lanczos mode needs a symmetric map")
    if tol <= 0:
        raise ValueError("tol must be positive")
    n = op.dim_in
    v = unit_vector(n, rng.child(seed, "power"))
    best, best_signed, calls = 0.0, 0.0, 0
    history = []
    while calls < max_iter:
        Q = np.empty((min(krylov, n), n))
        alpha, beta = [], []
        Q[0] = v
        for j in range(Q.shape[0]):
            w = op.apply(Q[j])
            calls += 1
            a = float(Q[j] @ w)
            alpha.append(a)
            for _ in range(2):
                w = w - Q[: j + 1].T @ (Q[: j + 1] @ w)
            b = float(np.linalg.norm(w))
            vals, vecs = eigh_tridiagonal(np.array(alpha), np.array(beta)) if j else (np.array(alpha), np.ones((1, 1)))
            i = int(np.argmax(np.abs(vals)))
            theta = float(vals[i])
            resid = b * abs(vecs[-1, i])
            if abs(theta) >= best:
                best, best_signed = abs(theta), theta
            history.append(best)
            still = len(history) > patience and best - history[-1 - patience] <= tol * best
            if best == 0.0 and b == 0.0:
                return PowerIterationResult(0.0, calls, True, 0.0)
            if resid <= tol * best or b <= 1e-14 * max(best, 1e-300) or still:
                return PowerIterationResult(best, calls, True, best_signed)
            if calls >= max_iter or j + 1 == Q.shape[0]:
                break
            beta.append(b)
            Q[j + 1] = w / b
        # restart from the current top Ritz vector
        v = Q[: len(alpha)].T @ vecs[:, i]
        v /= np.linalg.norm(v)
    logger.info("Lanczos stopped at max_iter=%d (estimate %.6g)", max_iter, best)
    return PowerIterationResult(best, calls, False, best_signed)


@dataclass(frozen=True)
class Order3Action:
    """Order-3 tensor ``T`` known only through contractions.

    ``contract(x, z)[k] = sum_ij T_ijk x_i z_j``; ``adjoint_first(z, y)`` is the
    gradient in ``x`` of ``y . contract(x, z)`` and ``adjoint_second(x, y)`` the
    gradient in ``z``.
    """

    dims: tuple
    contract: Callable
    adjoint_first: Callable
    adjoint_second: Callable

    @classmethod
    def from_array(cls, T):
        T = np.asarray(T, dtype=float)
        return cls(
            T.shape,
            lambda x, z: np.einsum("ijk,i,j->k", T, x, z),
            lambda z, y: np.einsum("ijk,j,k->i", T, z, y),
            lambda x, y: np.einsum("ijk,i,k->j", T, x, y),
        )

    def scaled(self, c):
        return Order3Action(
            self.dims,
            lambda x, z: c * self.contract(x, z),
            lambda z, y: c * self.adjoint_first(z, y),
            lambda x, y: c * self.adjoint_second(x, y),
        )


def _signs(c):
    s = np.sign(c)
    s[s == 0] = 1.0
    return s


def _ascend(action, x, z, tol, sweeps):
    c = action.contract(x, z)
    value = np.abs(c).sum()
    for _ in range(sweeps):
        g = action.adjoint_first(z, _signs(c))
        ng = np.linalg.norm(g)
        if ng > 0:
            x = g / ng
        c = action.contract(x, z)
        h = action.adjoint_second(x, _signs(c))
        nh = np.linalg.norm(h)
        if nh > 0:
            z = h / nh
        c = action.contract(x, z)
        new = np.abs(c).sum()
        if new - value <= tol * max(new, 1e-300):
            value = max(value, new)
            break
        value = new
    return value, x, z


def tensor221_norm(action: Order3Action, restarts=8, tol=1e-12, seed=0, sweeps=100, starts=()):
    """Lower estimate of ``sup_{|x|=|z|=1} sum_k |T(x, z)_k|``.

    Alternating ascent: with ``z`` fixed and the current signs of the
    contraction frozen the objective is linear in ``x``, so its maximizer is a
    normalized adjoint contraction; then the roles swap. Each sweep can only
    increase the objective. Restart ``r`` always starts from the same point
    for a given ``seed``, so the maximum is non-decreasing in ``restarts``.
    ``starts`` adds caller-supplied ``(x, z)`` starting pairs.
    """
    if restarts < 1:
        raise ValueError("restarts must be >= 1")
    d1, d2, _ = action.dims
    best = 0.0
    pairs = [(np.asarray(x, float), np.asarray(z, float)) for x, z in starts]
    for r in range(restarts):
        pairs.append((unit_vector(d1, rng.child(seed, "t221", r, 0)),
                      unit_vector(d2, rng.child(seed, "t221", r, 1))))
    for x, z in pairs:
        value, _, _ = _ascend(action, x / np.linalg.norm(x), z / np.linalg.norm(z), tol, sweeps)
        best = max(best, value)
    return float(best)


def contract_matrix(T: Order3Action, v):
    """Materialize ``A_ij = sum_k T_ijk v_k`` (small dims only)."""
    d1, d2, d3 = T.dims
    v = np.asarray(v, dtype=float)
    if v.shape != (d3,):
        raise ValueError(f"vector length {v.shape} does not match tensor dim {d3}")
    return np.column_stack([T.adjoint_first(e, v) for e in np.eye(d2)]).reshape(d1, d2)


def holder_matrix_bound_check(T: Order3Action, v, restarts=8, seed=0):
    """Return ``(||A||, ||T||_{2,2,1} * ||v||_inf)`` for ``A = T . v``.

    The tensor norm estimate is warm-started from the top singular pair of
    ``A``, which makes the ascent reach at least ``||A|| / ||v||_inf``.
    """
    A = contract_matrix(T, v)
    vinf = float(np.max(np.abs(v))) if len(v) else 0.0
    if not np.any(A):
        lhs = 0.0
        starts = ()
    else:
        U, S, Vt = np.linalg.svd(A)
        lhs = float(S[0])
        starts = ((U[:, 0], Vt[0]),)
    if vinf == 0.0:
        return lhs, 0.0
    return lhs, tensor221_norm(T, restarts=restarts, seed=seed, starts=starts) * vinf
