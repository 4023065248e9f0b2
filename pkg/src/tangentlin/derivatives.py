"""Exact first and second derivatives of the network output.

Gradients come from one reverse sweep. Hessian-vector products differentiate
that reverse sweep along a parameter direction (forward-over-reverse): a
tangent forward pass gives the perturbed pre-activations, and a tangent
backward pass gives the perturbed sensitivities and parameter gradients.

All quantities refer to the model output ``f`` itself, never to a loss.
"""

import logging
from dataclasses import dataclass

import numpy as np
from scipy.special import softmax

from . import activations, rng
from .network import ForwardTrace, NetworkSpec, Weights, forward, plan
from .tensor import LinearMap, Order3Action, spectral_norm, tensor221_norm

logger = logging.getLogger(__name__)


class SmoothnessError(ValueError):
    """Second derivatives were requested for a non-smooth activation."""


def require_smooth(spec: NetworkSpec):
    if not spec.smooth:
        kinds = sorted({layer.activation for layer in spec.layers if not activations.get(layer.activation).smooth})
        raise SmoothnessError(f"second-order quantities need smooth activations, got {kinds}")


def _check_index(spec, out_index):
    if not 0 <= out_index < spec.output_dim:
        raise IndexError(f"out_index {out_index} outside [0, {spec.output_dim})")


def _inp(lay, a):
    return a.reshape((a.shape[0],) + lay.in_shape)


# --- head seeds --------------------------------------------------------------

def head_seed(spec, logits, out_index):
    """Row ``i`` is the gradient of output ``out_index`` w.r.t. the logits of sample ``i``."""
    n, _ = logits.shape
    seed = np.zeros_like(logits)
    if spec.head == "linear":
        seed[:, out_index] = 1.0
    elif spec.head == "softmax":
        p = softmax(logits, axis=1)
        seed = -p[:, out_index:out_index + 1] * p
        seed[:, out_index] += p[:, out_index]
    else:
        seed[:, out_index] = activations.get(spec.head).d1(logits[:, out_index])
    return seed


def head_dseed(spec, logits, out_index, dlogits):
    """Directional derivative of :func:`head_seed` along ``dlogits``."""
    dseed = np.zeros_like(logits)
    if spec.head == "linear":
        return dseed
    if spec.head == "softmax":
        p = softmax(logits, axis=1)
        dp = p * (dlogits - np.sum(p * dlogits, axis=1, keepdims=True))
        dseed = -dp[:, out_index:out_index + 1] * p - p[:, out_index:out_index + 1] * dp
        dseed[:, out_index] += dp[:, out_index]
        return dseed
    dseed[:, out_index] = activations.get(spec.head).d2(logits[:, out_index]) * dlogits[:, out_index]
    return dseed


# --- reverse sweep ---------------------------------------------------------

def backward(spec, W, trace, seed):
    """Reverse sweep from logit cotangents ``seed`` of shape ``(n, C)``.

    Returns ``(gs, bs)``: ``bs[l-1]`` is the sensitivity ``b^(l)`` of layer
    ``l``'s activation and ``gs[l-1] = act'(pre) * b^(l)`` the pre-activation
    sensitivity.
    """
    p = plan(spec)
    n = seed.shape[0]
    b = (seed @ W.output / p.out_divisor).reshape((n,) + p.layers[-1].out_shape)
    gs, bs = [None] * len(p.layers), [None] * len(p.layers)
    for k in range(len(p.layers) - 1, -1, -1):
        lay = p.layers[k]
        bs[k] = b
        g = lay.act.d1(trace.pre[k]) * b
        gs[k] = g
        if k > 0:
            b_in = lay.lin_adj_a(W.layers[k][0], g) / lay.divisor
            if lay.skip:
                b_in = b_in + lay.skip * b.reshape(b_in.shape)
            b = b_in.reshape((n,) + p.layers[k - 1].out_shape)
    return gs, bs


def param_grads(spec, W, trace, gs, seed, per_sample=False):
    """Parameter gradients from the pre-activation sensitivities.

    With ``per_sample`` every array gains a leading batch axis; otherwise the
    batch is summed.
    """
    p = plan(spec)
    layers = []
    for k, lay in enumerate(p.layers):
        a = _inp(lay, trace.activation(k))
        gw = lay.lin_adj_w(gs[k], a, per_sample) / lay.divisor
        layers.append((gw, lay.bias_adj(gs[k], per_sample)) if lay.bias else (gw,))
    aL = trace.post[-1].reshape(trace.n, -1)
    if per_sample:
        gv = np.einsum("nc,nm->ncm", seed, aL) / p.out_divisor
    else:
        gv = seed.T @ aL / p.out_divisor
    return layers, gv


@dataclass(frozen=True)
class GradientBundle:
    """Gradient of one output coordinate at one input.

    ``grads`` shares the layout of the weights, so ``grads.flat()`` lines up
    with ``Weights.flat()``. ``sensitivities[l-1]`` is ``b^(l) = df/d alpha^(l)``
    flattened.
    """

    grads: Weights
    sensitivities: tuple

    @property
    def flat(self):
        return self.grads.flat()

    @property
    def layers(self):
        return self.grads.layers

    @property
    def output(self):
        return self.grads.output if self.grads.output_trainable else None

    def layer_sq_norms(self):
        out = [sum(float(np.sum(a * a)) for a in ps) for ps in self.grads.layers]
        if self.grads.output_trainable:
            out.append(float(np.sum(self.grads.output ** 2)))
        return out


def _single(trace):
    if trace.n != 1:
        raise ValueError(f"expected a trace for one input, got a batch of {trace.n}")


def gradient(spec: NetworkSpec, W: Weights, trace: ForwardTrace, out_index=0) -> GradientBundle:
    """Exact gradient of output coordinate ``out_index`` (after the head)."""
    _single(trace)
    _check_index(spec, out_index)
    seed = head_seed(spec, trace.logits, out_index)
    gs, bs = backward(spec, W, trace, seed)
    layers, gv = param_grads(spec, W, trace, gs, seed)
    if not W.output_trainable:
        gv = np.zeros_like(W.output)
    grads = Weights(tuple(tuple(a for a in ps) for ps in layers), gv, W.output_trainable)
    return GradientBundle(grads, tuple(b.ravel() for b in bs))


def flat_gradient(spec, W, x, out_index=0):
    return gradient(spec, W, forward(spec, W, x), out_index).flat


# --- forward-over-reverse --------------------------------------------------

class _FullDirection:
    """Per-layer parameter direction held as dense arrays."""

    def __init__(self, lay, arrays):
        self.lay = lay
        self.W = arrays[0]
        self.bias = arrays[1] if lay.bias else None

    def apply(self, a):
        return self.lay.lin(self.W, a)

    def adjoint(self, g):
        return self.lay.lin_adj_a(self.W, g)


class _FactoredDirection:
    """Dense-layer direction ``dW = p ahat^T + ghat q^T`` (plus optional bias)."""

    def __init__(self, p, q, ahat, ghat, bias=None):
        self.p, self.q, self.ahat, self.ghat, self.bias = p, q, ahat, ghat, bias

    def apply(self, a):
        return np.outer(a @ self.ahat, self.p) + np.outer(a @ self.q, self.ghat)

    def adjoint(self, g):
        return np.outer(g @ self.p, self.ahat) + np.outer(g @ self.ghat, self.q)


def _hvp_core(spec, W, trace, out_index, dirs, dV, gs, bs):
    """Tangent forward then tangent backward along ``dirs`` / ``dV``.

    Returns per layer ``(dg, g, a_in, da_in)`` from which the layer block of
    the Hessian-vector product is ``(dg a_in^T + g da_in^T) / divisor``, and the
    read-out block.
    """
    p = plan(spec)
    n = trace.n
    dzs, das = [], []
    da = None
    for k, lay in enumerate(p.layers):
        dz = dirs[k].apply(_inp(lay, trace.activation(k)))
        if da is not None:
            dz = dz + lay.lin(W.layers[k][0], _inp(lay, da))
        dz = dz / lay.divisor
        if dirs[k].bias is not None:
            dz = dz + dirs[k].bias
        da_out = lay.act.d1(trace.pre[k]) * dz
        if lay.skip and da is not None:
            da_out = da_out + lay.skip * _inp(lay, da)
        dzs.append(dz)
        das.append(da_out)
        da = da_out
    aL, daL = trace.post[-1].reshape(n, -1), das[-1].reshape(n, -1)
    dlogits = daL @ W.output.T
    if dV is not None:
        dlogits = dlogits + aL @ dV.T
    dlogits = dlogits / p.out_divisor
    seed = head_seed(spec, trace.logits, out_index)
    dseed = head_dseed(spec, trace.logits, out_index, dlogits)
    db = dseed @ W.output
    if dV is not None:
        db = db + seed @ dV
    db = (db / p.out_divisor).reshape((n,) + p.layers[-1].out_shape)
    out = [None] * len(p.layers)
    for k in range(len(p.layers) - 1, -1, -1):
        lay = p.layers[k]
        z = trace.pre[k]
        g = gs[k]
        dg = lay.act.d2(z) * dzs[k] * bs[k] + lay.act.d1(z) * db
        da_in = _inp(lay, das[k - 1]) if k > 0 else None
        out[k] = (dg, g, _inp(lay, trace.activation(k)), da_in)
        if k > 0:
            db_in = (dirs[k].adjoint(g) + lay.lin_adj_a(W.layers[k][0], dg)) / lay.divisor
            if lay.skip:
                db_in = db_in + lay.skip * db.reshape(db_in.shape)
            db = db_in.reshape((n,) + p.layers[k - 1].out_shape)
    dv_out = (dseed.T @ aL + seed.T @ daL) / p.out_divisor
    return out, dv_out


def _prepare(spec, W, trace, out_index):
    require_smooth(spec)
    _single(trace)
    _check_index(spec, out_index)
    gs, bs = backward(spec, W, trace, head_seed(spec, trace.logits, out_index))
    return gs, bs


def hvp(spec: NetworkSpec, W: Weights, trace: ForwardTrace, out_index, direction, _cache=None) -> np.ndarray:
    """Hessian of output ``out_index`` applied to the flat ``direction``."""
    gs, bs = _cache if _cache is not None else _prepare(spec, W, trace, out_index)
    p = plan(spec)
    direction = np.asarray(direction, dtype=float)
    if direction.shape != (W.size,):
        raise ValueError(f"direction has shape {direction.shape}, expected ({W.size},)")
    dW = W.zeros_like().from_flat(direction)
    dirs = [_FullDirection(lay, dW.layers[k]) for k, lay in enumerate(p.layers)]
    pieces, dv = _hvp_core(spec, W, trace, out_index, dirs, dW.output if W.output_trainable else None, gs, bs)
    out = []
    for lay, (dg, g, a_in, da_in) in zip(p.layers, pieces):
        gw = lay.lin_adj_w(dg, a_in)
        if da_in is not None:
            gw = gw + lay.lin_adj_w(g, da_in)
        out.append((gw / lay.divisor).ravel())
        if lay.bias:
            out.append(dg.sum(axis=0).ravel())
    if W.output_trainable:
        out.append(dv.ravel())
    return np.concatenate(out)


def hessian_operator(spec, W, x, out_index=0) -> LinearMap:
    """The Hessian of one output coordinate at ``x`` as a symmetric map on all parameters."""
    trace = forward(spec, W, x)
    cache = _prepare(spec, W, trace, out_index)
    size = W.size
    return LinearMap(size, size, lambda u: hvp(spec, W, trace, out_index, u, cache), symmetric=True)


def dense_hessian(spec, W, x, out_index=0):
    """Materialize the Hessian column by column (small nets only)."""
    return hessian_operator(spec, W, x, out_index).materialize()


def reduced_hessian_operator(spec, W, x, out_index=0, min_size=0) -> LinearMap:
    """Hessian compressed to a subspace that contains its range.

    For one input, the weight block of layer ``l`` in any Hessian-vector
    product has the form ``(dg a^T + g da^T) / divisor`` with ``a`` and ``g``
    the (fixed) layer input and pre-activation sensitivity. Such matrices
    are ``p ahat^T + ghat q^T`` with ``q`` orthogonal to ``ahat``, an
    isometric parameterization by ``(p, q)``. Dense layers whose weight
    matrix has more than ``max(min_size, 2 * (rows + cols))`` entries use
    these coordinates; every other block keeps its plain coordinates. The
    compressed map ``E^T H E`` has the same non-zero spectrum as ``H`` while
    its vectors grow only linearly with the width.
    """
    trace = forward(spec, W, x)
    gs, bs = _prepare(spec, W, trace, out_index)
    p = plan(spec)
    layout = []
    size = 0
    for k, lay in enumerate(p.layers):
        a = trace.activation(k).ravel().astype(float)
        g = gs[k].ravel()
        na, ng = np.linalg.norm(a), np.linalg.norm(g)
        wsize = int(np.prod(lay.w_shape))
        factored = (not lay.conv and na > 0 and ng > 0
                    and wsize > max(min_size, 2 * (lay.in_size + lay.out_size)))
        blocks = [("pq", lay.out_size + lay.in_size, a / na if factored else None, g / ng if factored else None)
                  if factored else ("w", wsize, None, None)]
        if lay.bias:
            blocks.append(("b", lay.out_size, None, None))
        layout.append(blocks)
        size += sum(bl[1] for bl in blocks)
    if W.output_trainable:
        size += W.output.size

    def apply(c):
        pos = 0
        dirs, meta = [], []
        for k, lay in enumerate(p.layers):
            kind, n, ahat, ghat = layout[k][0]
            chunk = c[pos:pos + n]
            pos += n
            bias = None
            if lay.bias:
                bias = c[pos:pos + lay.out_size].reshape((1,) + lay.out_shape)
                pos += lay.out_size
            if kind == "pq":
                pv, q = chunk[:lay.out_size], chunk[lay.out_size:]
                q = q - (q @ ahat) * ahat
                dirs.append(_FactoredDirection(pv, q, ahat, ghat, bias))
            else:
                arrays = (chunk.reshape(lay.w_shape),) + ((bias,) if lay.bias else ())
                dirs.append(_FullDirection(lay, arrays))
            meta.append((kind, ahat, ghat))
        dV = c[pos:].reshape(W.output.shape) if W.output_trainable else None
        pieces, dv = _hvp_core(spec, W, trace, out_index, dirs, dV, gs, bs)
        out = []
        for lay, (kind, ahat, ghat), (dg, g, a_in, da_in) in zip(p.layers, meta, pieces):
            if kind == "pq":
                dg1, g1, a1 = dg.ravel(), g.ravel(), a_in.ravel()
                da1 = da_in.ravel() if da_in is not None else np.zeros_like(a1)
                pa = dg1 * (a1 @ ahat) + g1 * (da1 @ ahat)
                qa = a1 * (dg1 @ ghat) + da1 * (g1 @ ghat)
                qa = qa - (qa @ ahat) * ahat
                out += [pa / lay.divisor, qa / lay.divisor]
            else:
                gw = lay.lin_adj_w(dg, a_in)
                if da_in is not None:
                    gw = gw + lay.lin_adj_w(g, da_in)
                out.append((gw / lay.divisor).ravel())
            if lay.bias:
                out.append(dg.sum(axis=0).ravel())
        if W.output_trainable:
            out.append(dv.ravel())
        return np.concatenate(out)

    return LinearMap(size, size, apply, symmetric=True)


# --- per-layer quantities ---------------------------------------------------

@dataclass(frozen=True)
class LayerQuantities:
    index: int
    b_inf: float
    b_2: float
    jac_w: float
    jac_a: float  # nan for the first layer (input is not a variable)
    t_ww: float
    t_aw: float  # nan for the first layer
    t_aa: float  # nan for the first layer


@dataclass(frozen=True)
class QQuantities:
    q_inf: float
    q_l: float
    q_221: float
    layers: tuple

    @property
    def lipschitz(self):
        """Largest measured layer Jacobian norm (w.r.t. weights or inputs)."""
        vals = [q.jac_w for q in self.layers] + [q.jac_a for q in self.layers if not np.isnan(q.jac_a)]
        return float(max(vals))


class _LayerOps:
    """Analytic Jacobian and second-derivative actions of one layer at one input."""

    def __init__(self, lay, params, a_in, z):
        self.lay = lay
        self.W = params[0]
        self.a = a_in  # (1, *in_shape)
        self.d1 = lay.act.d1(z)
        self.d2 = lay.act.d2(z)
        self.n_w = self.W.size
        self.n_p = self.n_w + (lay.out_size if lay.bias else 0)

    def _split(self, u):
        U = u[:self.n_w].reshape(self.W.shape)
        ub = u[self.n_w:].reshape((1,) + self.lay.out_shape) if self.lay.bias else None
        return U, ub

    def _aff(self, u):
        # pre-activation change for a parameter direction u
        U, ub = self._split(u)
        out = self.lay.lin(U, self.a) / self.lay.divisor
        return out + ub if ub is not None else out

    def _aff_adj(self, y):
        gw = self.lay.lin_adj_w(y, self.a) / self.lay.divisor
        parts = [gw.ravel()] + ([y.ravel()] if self.lay.bias else [])
        return np.concatenate(parts)

    def _x(self, x):
        return x.reshape((1,) + self.lay.in_shape)

    def _y(self, y):
        return y.reshape((1,) + self.lay.out_shape)

    def _lin_a(self, x):
        return self.lay.lin(self.W, self._x(x)) / self.lay.divisor

    def _lin_a_adj(self, y):
        return (self.lay.lin_adj_a(self.W, y) / self.lay.divisor).ravel()

    def jac_w(self):
        return LinearMap(self.n_p, self.lay.out_size,
                         lambda u: (self.d1 * self._aff(u)).ravel(),
                         lambda y: self._aff_adj(self.d1 * self._y(y)))

    def jac_a(self):
        skip = self.lay.skip

        def apply(x):
            out = (self.d1 * self._lin_a(x)).ravel()
            return out + skip * x if skip else out

        def adjoint(y):
            out = self._lin_a_adj(self.d1 * self._y(y))
            return out + skip * y if skip else out

        return LinearMap(self.lay.in_size, self.lay.out_size, apply, adjoint)

    def t_ww(self):
        d2 = self.d2
        return Order3Action(
            (self.n_p, self.n_p, self.lay.out_size),
            lambda u1, u2: (d2 * self._aff(u1) * self._aff(u2)).ravel(),
            lambda u2, y: self._aff_adj(d2 * self._aff(u2) * self._y(y)),
            lambda u1, y: self._aff_adj(d2 * self._aff(u1) * self._y(y)),
        )

    def t_aa(self):
        d2 = self.d2
        return Order3Action(
            (self.lay.in_size, self.lay.in_size, self.lay.out_size),
            lambda x1, x2: (d2 * self._lin_a(x1) * self._lin_a(x2)).ravel(),
            lambda x2, y: self._lin_a_adj(d2 * self._lin_a(x2) * self._y(y)),
            lambda x1, y: self._lin_a_adj(d2 * self._lin_a(x1) * self._y(y)),
        )

    def t_aw(self):
        """Mixed tensor, first slot the layer input, second the parameters.

        Includes the ``act'(pre) * (U x) / divisor`` term that comes from
        differentiating the weight inside the input Jacobian.
        """
        lay, d1, d2 = self.lay, self.d1, self.d2

        def contract(x, u):
            U, _ = self._split(u)
            return (d2 * self._aff(u) * self._lin_a(x) + d1 * lay.lin(U, self._x(x)) / lay.divisor).ravel()

        def adj_first(u, y):
            U, _ = self._split(u)
            y = self._y(y)
            return self._lin_a_adj(d2 * self._aff(u) * y) + (lay.lin_adj_a(U, d1 * y) / lay.divisor).ravel()

        def adj_second(x, y):
            y = self._y(y)
            out = self._aff_adj(d2 * self._lin_a(x) * y)
            gw = (lay.lin_adj_w(d1 * y, self._x(x)) / lay.divisor).ravel()
            out[:self.n_w] += gw
            return out

        return Order3Action((lay.in_size, self.n_p, lay.out_size), contract, adj_first, adj_second)

    # Dense layers act row by row: unit i sees only row i of the weight
    # matrix (and bias entry i). That makes three of the norms available
    # without iterating over the parameter space.

    def _row_scale(self):
        a2 = float(np.sum(self.a.astype(float) ** 2))
        return a2 / self.lay.divisor ** 2 + (1.0 if self.lay.bias else 0.0)

    def jac_w_dense(self):
        """``max_i |act'_i| * sqrt(|a|^2 / s^2 + [bias])``."""
        return float(np.max(np.abs(self.d1)) * np.sqrt(self._row_scale()))

    def t_ww_dense(self):
        """Diagonal tensor: ``max_i |act''_i| * (|a|^2 / s^2 + [bias])``."""
        return float(np.max(np.abs(self.d2)) * self._row_scale())

    def t_aa_dense(self, tol=1e-9, seed=0, method="power"):
        """Exact (2,2,1) norm of the input-input tensor of a dense layer.

        ``sum_i |act''_i y_i u_i| <= (sum_i |act''_i| y_i^2 + sum_i |act''_i| u_i^2) / 2``
        with ``y = W x / s`` and ``u = W z / s``, and equality holds at
        ``x = z`` equal to the top eigenvector of ``W^T |act''| W / s^2``.
        """
        lay = self.lay
        ad2 = np.abs(self.d2)
        op = LinearMap(lay.in_size, lay.in_size, lambda x: self._lin_a_adj(ad2 * self._lin_a(x)), symmetric=True)
        return float(spectral_norm(op, tol=tol, seed=seed, method=method).value)

    def t_aw_dense(self, tol=1e-9, seed=0, method="power"):
        """Exact (2,2,1) norm of the mixed tensor of a dense layer.

        For fixed input direction ``x`` the contraction is ``c_i = r_i . w_i(x)``
        with ``r_i`` the parameters of unit ``i``; the supremum over unit
        parameter directions is ``sqrt(sum_i |w_i(x)|^2) = sqrt(x^T M x)``.
        The norm is therefore ``sqrt(lambda_max(M))``.
        """
        lay, s = self.lay, self.lay.divisor
        a = self.a.ravel().astype(float)
        d1, d2 = self.d1.ravel(), self.d2.ravel()
        kappa = float(a @ a) / s ** 4 + (1.0 / s ** 2 if lay.bias else 0.0)
        w = self._lin_a_adj((d2 * d1).reshape((1,) + lay.out_shape)) * s
        c = float(np.sum(d1 ** 2)) / s ** 2
        d22 = (d2 ** 2).reshape((1,) + lay.out_shape)

        def apply(x):
            Wx = self._lin_a(x) * s
            quad = kappa * self._lin_a_adj(d22 * Wx) * s
            return quad + (a * (w @ x) + w * (a @ x)) / s ** 3 + c * x

        op = LinearMap(lay.in_size, lay.in_size, apply, symmetric=True)
        return float(np.sqrt(spectral_norm(op, tol=tol, seed=seed, method=method).value))


def layer_ops(spec, W, trace):
    """Per-layer :class:`_LayerOps` for a single-input trace."""
    _single(trace)
    p = plan(spec)
    return [_LayerOps(lay, W.layers[k], _inp(lay, trace.activation(k)), trace.pre[k])
            for k, lay in enumerate(p.layers)]


def _norm(op, tol, seed, method):
    if method == "lanczos" and not op.symmetric:
        gram = LinearMap(op.dim_in, op.dim_in, lambda x: op.rmatvec(op.apply(x)), symmetric=True)
        return float(np.sqrt(spectral_norm(gram, tol=tol, seed=seed, method=method).value))
    return float(spectral_norm(op, tol=tol, seed=seed, method=method).value)


def layer_quantities(spec, W, trace, out_index=0, tol=1e-9, restarts=8, seed=0, closed_form=True,
                     method="power") -> QQuantities:
    """Sensitivity norms, Jacobian norms and (2,2,1) tensor norms per layer.

    The quantities describe the network body, so the head is ignored and
    ``b^(l)`` is taken with respect to the linear read-out. With
    ``closed_form`` the three tensor norms and the weight Jacobian norm of
    dense layers use their exact forms (closed expressions or a symmetric
    eigenvalue problem); otherwise, and for convolutions, the tensor norms
    come from alternating ascent. Operator norms use power iteration, or
    Lanczos with ``method="lanczos"``.
    """
    require_smooth(spec)
    _single(trace)
    _check_index(spec, out_index)
    body = spec.with_head("linear")
    seed_f = head_seed(body, trace.logits, out_index)
    _, bs = backward(body, W, trace, seed_f)
    per = []
    for k, ops in enumerate(layer_ops(body, W, trace)):
        lseed = rng.child(seed, "layer", k + 1)
        b = bs[k].ravel()
        dense = closed_form and not ops.lay.conv
        if dense:
            jw, tww = ops.jac_w_dense(), ops.t_ww_dense()
        else:
            jw = _norm(ops.jac_w(), tol, rng.child(lseed, "jw"), method)
            tww = tensor221_norm(ops.t_ww(), restarts=restarts, seed=rng.child(lseed, "tww"))
        if k == 0:
            ja = taw = taa = float("nan")
        else:
            ja = _norm(ops.jac_a(), tol, rng.child(lseed, "ja"), method)
            if dense:
                taw = ops.t_aw_dense(tol=tol, seed=rng.child(lseed, "taw"), method=method)
            else:
                taw = tensor221_norm(ops.t_aw(), restarts=restarts, seed=rng.child(lseed, "taw"))
            if dense:
                taa = ops.t_aa_dense(tol=tol, seed=rng.child(lseed, "taa"), method=method)
            else:
                taa = tensor221_norm(ops.t_aa(), restarts=restarts, seed=rng.child(lseed, "taa"))
        per.append(LayerQuantities(k + 1, float(np.max(np.abs(b))), float(np.linalg.norm(b)),
                                   jw, ja, tww, taw, taa))
    return _assemble(per)


def _assemble(per):
    q_inf = max(q.b_inf for q in per)
    q_l = max(q.jac_w for q in per)
    cands = [q.t_ww for q in per]
    L = len(per)
    for l2 in range(1, L):
        for l1 in range(l2):
            cands.append(per[l1].jac_w * per[l2].t_aw)
    for l3 in range(1, L):
        for l2 in range(l3):
            for l1 in range(l2 + 1):
                cands.append(per[l1].jac_w * per[l2].jac_w * per[l3].t_aa)
    return QQuantities(float(q_inf), float(q_l), float(max(cands)), tuple(per))
