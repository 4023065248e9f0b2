import numpy as np
import pytest
from numpy.polynomial.hermite_e import hermegauss

from tangentlin import activations
from tangentlin.analysis import (KernelMatrix, bottleneck_block_stat, bottleneck_spec, bound_report, delta_k,
                                 hessian_bound, hessian_spectral_norm, jacobian, kappa,
                                 kernel_change_vs_hessian_check, mean_fit, scaling_fit, tangent_kernel)
from tangentlin.derivatives import QQuantities, SmoothnessError, dense_hessian, flat_gradient, hvp
from tangentlin.network import (Conv1D, FullyConnected, NetworkSpec, Residual, Shallow, Weights, forward,
                                init_weights)


def _q(q_inf, q_l, q_221):
    return QQuantities(q_inf=q_inf, q_l=q_l, q_221=q_221, layers=())


def gh_kernel_limit(act, x, nodes=80):
    """``x^2 E_{w ~ N(0,1)}[act'(w x)^2]`` by Gauss-Hermite quadrature."""
    z, w = hermegauss(nodes)
    return x * x * float(np.sum(w * act.d1(z * x) ** 2) / np.sqrt(2 * np.pi))


# ---------------------------------------------------------------- kernels

def test_kernel_zero_at_origin_without_bias():
    spec = NetworkSpec(1, (Shallow(50, "tanh"),))
    K = tangent_kernel(spec, init_weights(spec, seed=0), [[0.0]])
    assert K.entry(0, 0, 0, 0) == 0.0


def test_quadrature_oracle_on_polynomial():
    # quadratic activation: act' = z, so x^2 E[(w x)^2] = x^4
    assert gh_kernel_limit(activations.get("quadratic"), 1.7) == pytest.approx(1.7 ** 4, rel=1e-12)


@pytest.mark.parametrize("x", [1.0, 0.5])
def test_kernel_infinite_width_limit(x):
    spec = NetworkSpec(1, (Shallow(100_000, "tanh"),))
    vals = [tangent_kernel(spec, init_weights(spec, seed=s), [[x]]).entry(0, 0, 0, 0) for s in range(3)]
    assert np.mean(vals) == pytest.approx(gh_kernel_limit(activations.get("tanh"), x), rel=0.05)


KERNEL_SPECS = {
    "shallow": NetworkSpec(2, (Shallow(7, "sigmoid"),)),
    "fc-bias": NetworkSpec(3, (FullyConnected(5, "tanh", True), FullyConnected(4, "swish")), output_dim=2),
    "conv": NetworkSpec(5, (Conv1D(3, 5, 3, "tanh"), FullyConnected(4, "tanh")), output_dim=2),
    "residual": NetworkSpec(2, (FullyConnected(4, "tanh", True), Residual(4, "sigmoid", 0.5))),
    "softmax": NetworkSpec(2, (FullyConnected(6, "tanh"),), head="softmax", output_dim=3),
    "swish-head": NetworkSpec(2, (FullyConnected(6, "tanh"),), head="swish"),
    "lecun": NetworkSpec(2, (FullyConnected(6, "tanh"),), output_dim=2, parameterization="lecun"),
}


@pytest.mark.parametrize("name", sorted(KERNEL_SPECS))
@pytest.mark.parametrize("view", ["pre", "post"])
def test_kernel_equals_gram_of_stacked_gradients(name, view):
    spec = KERNEL_SPECS[name]
    W = init_weights(spec, seed=3)
    X = np.random.default_rng(1).standard_normal((5, spec.input_dim))
    K = tangent_kernel(spec, W, X, view=view)
    vspec = spec if view == "post" else spec.with_head("linear")
    # oracle rows built one input and output at a time
    J = np.array([flat_gradient(vspec, W, x, a) for x in X for a in range(spec.output_dim)])
    np.testing.assert_allclose(K.matrix, J @ J.T, rtol=0, atol=1e-12 * max(1.0, np.abs(J @ J.T).max()))
    np.testing.assert_allclose(jacobian(spec, W, X, view=view), J, rtol=0, atol=1e-12)
    assert K.n == 5 and K.C == spec.output_dim


def test_kernel_diagonal_is_squared_gradient_norm():
    spec = KERNEL_SPECS["fc-bias"]
    W = init_weights(spec, seed=0)
    x = np.array([0.3, -1.0, 2.0])
    K = tangent_kernel(spec, W, x)
    for a in range(2):
        g = flat_gradient(spec, W, x, a)
        assert K.entry(0, a, 0, a) == pytest.approx(g @ g, rel=1e-12)


def test_kernel_symmetric_psd():
    spec = KERNEL_SPECS["conv"]
    K = tangent_kernel(spec, init_weights(spec, seed=5), np.random.default_rng(0).standard_normal((4, 5)))
    assert np.array_equal(K.matrix, K.matrix.T)
    assert np.linalg.eigvalsh(K.matrix).min() >= -1e-8 * K.trace
    assert not K.matrix.flags.writeable


def test_kernel_rejects_unknown_view():
    spec = KERNEL_SPECS["shallow"]
    with pytest.raises(ValueError, match="view"):
        tangent_kernel(spec, init_weights(spec), [[1.0, 0.0]], view="mid")


@pytest.mark.parametrize("head", ["swish", "tanh", "sigmoid", "quadratic"])
def test_nonlinear_head_kernel_identity(head):
    spec = NetworkSpec(2, (FullyConnected(20, "tanh"), FullyConnected(20, "tanh")), head=head)
    W = init_weights(spec, seed=2)
    X = np.random.default_rng(4).standard_normal((4, 2))
    f = forward(spec, W, X).logits[:, 0]
    kt = tangent_kernel(spec, W, X, view="post").diagonal()
    k = tangent_kernel(spec, W, X, view="pre").diagonal()
    np.testing.assert_allclose(kt, activations.get(head).d1(f) ** 2 * k, rtol=1e-10, atol=0)


def test_scale_covariance_on_coupled_draws():
    # a fixed read-out scaled by alpha turns f into alpha * f with the same trainable weights
    spec = NetworkSpec(3, (FullyConnected(8, "tanh"), Residual(8, "sigmoid", 0.5)), output_dim=2,
                       output_trainable=False)
    W = init_weights(spec, seed=9)
    alpha = 3.7
    Wa = Weights(W.layers, alpha * W.output, output_trainable=False)
    X = np.random.default_rng(0).standard_normal((3, 3))
    np.testing.assert_allclose(forward(spec, Wa, X).output, alpha * forward(spec, W, X).output, rtol=1e-13)
    K, Ka = tangent_kernel(spec, W, X).matrix, tangent_kernel(spec, Wa, X).matrix
    np.testing.assert_allclose(Ka, alpha ** 2 * K, rtol=1e-12, atol=1e-14)
    u = np.random.default_rng(1).standard_normal(W.size)
    for a in range(2):
        h = hvp(spec, W, forward(spec, W, X[0]), a, u)
        ha = hvp(spec, Wa, forward(spec, Wa, X[0]), a, u)
        np.testing.assert_allclose(ha, alpha * h, rtol=1e-12, atol=1e-14)


# ---------------------------------------------------------------- Hessian norm

@pytest.mark.parametrize("act", ["tanh", "sigmoid", "swish"])
def test_shallow_hessian_norm_closed_form(act):
    m, x = 64, 1.3
    spec = NetworkSpec(1, (Shallow(m, act),))
    W = init_weights(spec, seed=1)
    w, v = W.layers[0][0][:, 0], W.output[0]
    expected = np.max(np.abs(v * activations.get(act).d2(w * x))) * x * x / np.sqrt(m)
    got = hessian_spectral_norm(spec, W, [x], tol=1e-13, method="lanczos")
    assert got.value == pytest.approx(expected, rel=1e-6)
    assert float(got) == got.value


def test_linear_model_hessian_zero():
    # fixed read-out over identity units: linear in the trainable weights
    spec = NetworkSpec(2, (Shallow(10, "identity"),))
    W = init_weights(spec, seed=0)
    for method in ("dense", "power"):
        assert hessian_spectral_norm(spec, W, [0.5, -1.0], method=method).value == 0.0


def test_multilinear_network_hessian_nonzero():
    # identity layers stacked with a trainable read-out are multilinear, not linear
    spec = NetworkSpec(2, (FullyConnected(10, "identity"), FullyConnected(10, "identity")))
    assert hessian_spectral_norm(spec, init_weights(spec), [0.5, -1.0], method="dense").value > 0.1


@pytest.mark.parametrize("method", ["power", "lanczos", "dense"])
def test_hessian_norm_matches_dense_oracle(method):
    spec = NetworkSpec(2, (FullyConnected(6, "tanh"), FullyConnected(6, "tanh"), FullyConnected(5, "tanh")))
    W = init_weights(spec, seed=4)
    assert W.size <= 200
    x = np.array([0.8, -0.4])
    oracle = np.max(np.abs(np.linalg.eigvalsh(dense_hessian(spec, W, x))))
    got = hessian_spectral_norm(spec, W, x, tol=1e-13, max_iter=100000, method=method).value
    assert got == pytest.approx(oracle, rel=1e-6)


def test_vector_output_norm_is_max_over_coordinates():
    spec = NetworkSpec(2, (FullyConnected(5, "tanh"),), output_dim=3)
    W = init_weights(spec, seed=0)
    x = np.array([1.0, 2.0])
    per = [np.max(np.abs(np.linalg.eigvalsh(dense_hessian(spec, W, x, a)))) for a in range(3)]
    res = hessian_spectral_norm(spec, W, x, method="dense")
    assert res.value == pytest.approx(max(per), rel=1e-10)
    assert len(res.per_output) == 3


def test_hessian_norm_rejects_relu():
    spec = NetworkSpec(1, (FullyConnected(4, "relu"),))
    with pytest.raises(SmoothnessError):
        hessian_spectral_norm(spec, init_weights(spec), [1.0])


def test_hessian_non_convergence_flagged(caplog):
    spec = NetworkSpec(2, (FullyConnected(30, "tanh"), FullyConnected(30, "tanh")))
    res = hessian_spectral_norm(spec, init_weights(spec), [1.0, 1.0], tol=1e-15, max_iter=2, method="power")
    assert not res.converged
    assert "did not converge" in caplog.text


def test_nonlinear_head_hessian_inequality():
    for head in ("swish", "tanh", "quadratic"):
        spec = NetworkSpec(1, (FullyConnected(32, "tanh"), FullyConnected(32, "tanh")), head=head)
        W = init_weights(spec, seed=6)
        x = np.array([1.0])
        f = forward(spec, W, x).logits[0, 0]
        act = activations.get(head)
        g2 = tangent_kernel(spec, W, x, view="pre").entry(0, 0, 0, 0)
        h = hessian_spectral_norm(spec.with_head("linear"), W, x, method="dense").value
        ht = hessian_spectral_norm(spec, W, x, method="dense").value
        assert ht >= abs(act.d2(f)) * g2 - abs(act.d1(f)) * h - 1e-12


# ---------------------------------------------------------------- bound

def test_hessian_bound_worked_example():
    for m in (1, 4, 100):
        assert hessian_bound(_q(0.1, 2.0, 3.0), 1, 1.0, m) == pytest.approx(3 * 3 * 0.1 + 2 / np.sqrt(m), rel=1e-14)


def test_hessian_bound_zero_quantities():
    assert hessian_bound(_q(5.0, 0.0, 0.0), 3, 2.0, 64) == 0.0


def test_hessian_bound_rejects_bad_sizes():
    with pytest.raises(ValueError):
        hessian_bound(_q(1, 1, 1), 0, 1.0, 10)


BOUND_SPECS = {
    "fc": NetworkSpec(2, (FullyConnected(32, "tanh"), FullyConnected(32, "tanh"), FullyConnected(32, "tanh"))),
    "conv": NetworkSpec(6, (Conv1D(8, 6, 3, "tanh"), Conv1D(8, 6, 3, "sigmoid"))),
    "residual": NetworkSpec(3, (FullyConnected(16, "tanh", True), Residual(16, "tanh", 0.5))),
    "shallow": NetworkSpec(1, (Shallow(64, "tanh"),)),
}


@pytest.mark.parametrize("name", sorted(BOUND_SPECS))
def test_bound_dominates_hessian(name):
    spec = BOUND_SPECS[name]
    for seed in range(3):
        W = init_weights(spec, seed=seed)
        x = np.random.default_rng(seed).standard_normal(spec.input_dim)
        rep = bound_report(spec, W, x, seed=seed)
        assert rep.holds, (rep.hessian_norm, rep.bound)
        assert rep.lipschitz >= 1.0


# ---------------------------------------------------------------- delta K

def test_delta_k_hand_example():
    assert delta_k([[[1.0]], [[1.5]], [[1.2]]]) == pytest.approx(0.5)


def test_delta_k_identical_snapshots():
    K = KernelMatrix(np.eye(3) + 0.1, 3, 1)
    assert delta_k([K, K, K]) == 0.0


def test_delta_k_errors():
    with pytest.raises(ZeroDivisionError):
        delta_k([np.zeros((2, 2)), np.eye(2)])
    with pytest.raises(ValueError):
        delta_k([np.eye(2)])


# ---------------------------------------------------------------- ball check

def test_ball_zero_radius():
    spec = NetworkSpec(1, (FullyConnected(8, "tanh"),))
    res = kernel_change_vs_hessian_check(spec, init_weights(spec), [[0.5], [1.0]], 0.0, probes=5)
    assert res.kernel_change == 0.0 and res.holds


def test_ball_linear_model():
    spec = NetworkSpec(2, (Shallow(6, "identity"),))
    res = kernel_change_vs_hessian_check(spec, init_weights(spec), [[0.5, 1.0], [1.0, -2.0]], 5.0, probes=5)
    assert res.kernel_change == pytest.approx(0.0, abs=1e-12)
    assert res.hessian_max == pytest.approx(0.0, abs=1e-12)


@pytest.mark.slow
def test_ball_inequality_wide_fc():
    spec = NetworkSpec(1, (FullyConnected(2048, "tanh"),))
    res = kernel_change_vs_hessian_check(spec, init_weights(spec, seed=0), [[0.7], [-1.2]], 10.0, probes=100,
                                         method="lanczos")
    assert res.holds, (res.kernel_change, res.bound)
    assert res.kernel_change > 0


def test_ball_inequality_small_nets():
    for seed, spec in enumerate(BOUND_SPECS.values()):
        X = np.random.default_rng(seed).standard_normal((2, spec.input_dim))
        res = kernel_change_vs_hessian_check(spec, init_weights(spec, seed=seed), X, 2.0, probes=3, seed=seed)
        assert res.holds, (res.kernel_change, res.bound)


# ---------------------------------------------------------------- kappa

def _kappa_setup():
    spec = NetworkSpec(1, (FullyConnected(16, "tanh"), FullyConnected(16, "tanh")))
    W = init_weights(spec, seed=0)
    X = np.array([[-1.0], [0.5], [2.0]])
    y = np.array([1.0, -1.0, 0.5])
    return spec, W, X, y


def test_kappa_zero_residual():
    spec, W, X, _ = _kappa_setup()
    f = forward(spec, W, X).output[:, 0]
    res = kappa(spec, W, X, f)
    assert res.A == pytest.approx(0.0, abs=1e-15) and res.value == pytest.approx(0.0, abs=1e-15)


def test_kappa_factors():
    spec, W, X, y = _kappa_setup()
    res = kappa(spec, W, X, y)
    f = forward(spec, W, X).output[:, 0]
    assert res.A == pytest.approx(np.linalg.norm(f - y), rel=1e-12)
    g2 = min(flat_gradient(spec, W, x) @ flat_gradient(spec, W, x) for x in X)
    h = max(np.max(np.abs(np.linalg.eigvalsh(dense_hessian(spec, W, x)))) for x in X)
    assert res.B == pytest.approx(h / g2, rel=1e-6)
    assert res.value == pytest.approx(res.A * res.B, rel=1e-12)


def test_kappa_alpha_rescaling():
    spec, W, X, y = _kappa_setup()
    zero = np.zeros(3)
    base = kappa(spec, W, X, y, f0=zero)
    for alpha in (10.0, 1e3, 1e6):
        res = kappa(spec, W, X, y, alpha=alpha, f0=zero)
        assert res.B == base.B
        assert res.value == pytest.approx(np.linalg.norm(y) * base.B / alpha, rel=1e-12)
    with pytest.raises(ValueError):
        kappa(spec, W, X, y, alpha=0.0)


def test_kappa_zero_gradient():
    spec = NetworkSpec(1, (Shallow(4, "tanh"),))
    with pytest.raises(ZeroDivisionError):
        kappa(spec, init_weights(spec), [[0.0]], [1.0])


# ---------------------------------------------------------------- bottleneck statistic

def test_bottleneck_stat_zero_readout():
    spec = bottleneck_spec(16)
    W = init_weights(spec, seed=0)
    W0 = Weights(W.layers, np.zeros_like(W.output))
    assert bottleneck_block_stat(spec, W0, [1.0]) == 0.0


def test_bottleneck_stat_below_dense_norm():
    spec = bottleneck_spec(16)
    for seed in range(5):
        W = init_weights(spec, seed=seed)
        dense = np.max(np.abs(np.linalg.eigvalsh(dense_hessian(spec, W, [1.0]))))
        stat = bottleneck_block_stat(spec, W, [1.0])
        assert 0 < stat <= dense * (1 + 1e-12)


def test_bottleneck_stat_rejects_other_architectures():
    with pytest.raises(ValueError):
        bottleneck_block_stat(bottleneck_spec(8, m_b=2), init_weights(bottleneck_spec(8, m_b=2)), [1.0])
    spec = NetworkSpec(1, (FullyConnected(8, "tanh"),))
    with pytest.raises(ValueError):
        bottleneck_block_stat(spec, init_weights(spec), [1.0])


# ---------------------------------------------------------------- scaling fits

WIDTHS = 2.0 ** np.arange(6, 15)


def test_fit_exact_power_law():
    fit = scaling_fit([(m, m ** -0.5) for m in WIDTHS])
    assert fit.slope == pytest.approx(-0.5, abs=1e-12)
    assert fit.r2 == pytest.approx(1.0, abs=1e-12)
    assert fit.predict(256) == pytest.approx(1 / 16, rel=1e-10)


def test_fit_constant():
    fit = scaling_fit([(m, 2.5) for m in WIDTHS])
    assert fit.slope == pytest.approx(0.0, abs=1e-12)


def test_fit_noisy_power_law():
    gen = np.random.default_rng(0)
    for _ in range(20):
        fit = scaling_fit([(m, 3 * m ** -0.5 * (1 + 0.01 * gen.standard_normal())) for m in WIDTHS])
        assert abs(fit.slope + 0.5) <= 0.02


def test_fit_errors():
    with pytest.raises(ValueError):
        scaling_fit([(1, 1.0), (2, 0.0), (3, 1.0)])
    with pytest.raises(ValueError):
        scaling_fit([(1, 1.0), (2, 1.0)])
    with pytest.raises(ValueError):
        scaling_fit([(1, 1.0), (2, np.nan), (3, 1.0)])


def test_mean_fit_averages_per_width():
    recs = [(10, 1.0), (10, 3.0), (100, 0.2), (100, 0.2), (1000, 0.02)]
    fit = mean_fit(recs)
    np.testing.assert_allclose(fit.values, [2.0, 0.2, 0.02])
    assert fit.slope == pytest.approx(-1.0, abs=1e-12)
