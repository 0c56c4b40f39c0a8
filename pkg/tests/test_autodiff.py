import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from clustergan import autodiff as ad
from clustergan.autodiff import Adam, Tensor
from clustergan.latent import LatentSpec, make_rng
from clustergan.networks import Layer, MlpNetwork, build_stack, grad_wrt_input
from clustergan.training import cycle_losses, gradient_penalty

from conftest import rel_err, sampled_fd_check


def naive_matmul(a, b):
    out = np.zeros((a.shape[0], b.shape[1]))
    for i in range(a.shape[0]):
        for j in range(b.shape[1]):
            for k in range(a.shape[1]):
                out[i, j] += a[i, k] * b[k, j]
    return out


def test_leaky_relu_definition():
    out = ad.forward_op("leaky_relu", [np.array([-1.0, 2.0])], alpha=0.2)
    np.testing.assert_array_equal(out.data, [-0.2, 2.0])


def test_softmax_of_equal_logits_is_uniform():
    out = ad.forward_op("softmax_rows", [np.zeros((1, 4))])
    np.testing.assert_allclose(out.data, [[0.25] * 4], atol=1e-15)


def test_matmul_matches_triple_loop(rng):
    a, b = rng.standard_normal((2, 3)), rng.standard_normal((3, 1))
    out = ad.forward_op("matmul", [a, b])
    np.testing.assert_allclose(out.data, naive_matmul(a, b), atol=1e-12, rtol=0)


def test_shape_mismatch_names_shapes():
    with pytest.raises(ValueError, match=r"\(2, 3\).*\(2, 3\)"):
        ad.matmul(np.ones((2, 3)), np.ones((2, 3)))
    with pytest.raises(ValueError, match="not broadcastable"):
        ad.add(np.ones((2, 3)), np.ones((4,)))


def test_non_finite_input_rejected():
    with pytest.raises(FloatingPointError):
        ad.forward_op("sigmoid", [np.array([1.0, np.nan])])
    with pytest.raises(FloatingPointError):
        ad.forward_op("log", [np.array([0.0])])


def test_unknown_op_rejected():
    with pytest.raises(ValueError, match="unknown op"):
        ad.forward_op("conv2d", [np.ones(3)])


def test_backward_of_sum_of_squares():
    w = ad.parameter([1.0, 2.0])
    ad.backward(ad.sum(ad.square(w)))
    np.testing.assert_array_equal(w.grad, [2.0, 4.0])


def test_backward_accumulates_without_zeroing():
    w = ad.parameter([1.0, 2.0])
    ad.backward(ad.sum(ad.square(w)))
    ad.backward(ad.sum(ad.square(w)))
    np.testing.assert_array_equal(w.grad, [4.0, 8.0])


def test_constant_loss_gives_zero_gradient():
    w = ad.parameter([1.0, 2.0])
    loss = ad.add(ad.scale(ad.sum(w), 0.0), 3.0)
    ad.backward(loss)
    np.testing.assert_array_equal(w.grad, [0.0, 0.0])


def test_backward_requires_scalar():
    w = ad.parameter([1.0, 2.0])
    with pytest.raises(ValueError, match="scalar"):
        ad.backward(ad.square(w))


def test_shared_subexpression_gradient():
    # f = sum(w*w + w) uses w three times through two paths
    w = ad.parameter([0.5, -1.5])
    ad.backward(ad.sum(ad.add(ad.mul(w, w), w)))
    np.testing.assert_allclose(w.grad, 2 * np.array([0.5, -1.5]) + 1)


@pytest.mark.parametrize("op", ["sigmoid", "log_sigmoid", "exp", "square", "softmax_rows",
                                "log_softmax_rows", "l2_norm_rows", "transpose"])
def test_unary_op_gradients(op, rng):
    x = ad.parameter(rng.standard_normal((3, 4)))
    weights = rng.standard_normal((4, 3) if op == "transpose" else
                                  (3, 1) if op == "l2_norm_rows" else (3, 4))

    def loss_val():
        return float((getattr(ad, op)(Tensor(x.data)).data * weights).sum())

    ad.backward(ad.sum(ad.mul(getattr(ad, op)(x), weights)))
    num = ad.numerical_grad(loss_val, x.data)
    assert rel_err(x.grad, num).max() < 1e-6


def test_broadcast_binary_gradients(rng):
    a = ad.parameter(rng.standard_normal((4, 3)))
    b = ad.parameter(rng.uniform(1.0, 2.0, (1, 3)))
    f = lambda A, B: ad.sum(ad.div(ad.mul(ad.sub(ad.add(A, B), B), A), B))  # noqa: E731
    ad.backward(f(a, b))
    for p in (a, b):
        num = ad.numerical_grad(lambda: f(Tensor(a.data), Tensor(b.data)).item(), p.data)
        assert rel_err(p.grad, num).max() < 1e-6


def test_concat_and_slice_gradients(rng):
    a = ad.parameter(rng.standard_normal((2, 3)))
    b = ad.parameter(rng.standard_normal((2, 2)))
    w = rng.standard_normal((2, 3))
    loss = ad.sum(ad.mul(ad.concat([a, b], axis=1)[:, 1:4], w))
    ad.backward(loss)
    expect_a = np.zeros((2, 3))
    expect_a[:, 1:] = w[:, :2]
    expect_b = np.zeros((2, 2))
    expect_b[:, :1] = w[:, 2:]
    np.testing.assert_array_equal(a.grad, expect_a)
    np.testing.assert_array_equal(b.grad, expect_b)


def test_abs_subgradient_at_zero_is_zero():
    w = ad.parameter([0.0, -2.0, 3.0])
    ad.backward(ad.sum(ad.abs(w)))
    np.testing.assert_array_equal(w.grad, [0.0, -1.0, 1.0])


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, (3, 5), elements=st.floats(-50, 50)))
def test_softmax_rows_are_distributions(x):
    out = ad.softmax_rows(x).data
    assert np.all(out > 0)
    np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-12, rtol=0)


# ------------------------------------------------------------- networks

def _presets():
    return [("synthetic", LatentSpec(6, 4), 100), ("pendigits", LatentSpec(5, 10), 16),
            ("counts", LatentSpec(30, 8), 720)]


def _check_params(net, loss_fn, rng, tol, n_coords=12, h=1e-5):
    for name, p in net.params.items():
        analytic, numeric = sampled_fd_check(loss_fn, p, n_coords, rng, h=h)
        err = rel_err(analytic, numeric)
        # near-zero gradients are compared absolutely
        ok = (err <= tol) | (np.abs(analytic - numeric) < 1e-9)
        assert ok.all(), f"{net.name}.{name}: max rel err {err.max():.2e}"


@pytest.mark.parametrize("preset,spec,data_dim", _presets())
@pytest.mark.parametrize("batchnorm", [False, True])
def test_generator_l1_gradient_matches_finite_differences(preset, spec, data_dim, batchnorm, rng):
    G, _, _ = build_stack(preset, spec, data_dim, hidden_width=32, batchnorm=batchnorm, seed=1)
    z = rng.standard_normal((5, spec.dim))
    target = rng.uniform(0, 1, (5, data_dim))

    def loss(frozen=True):
        return ad.sum(ad.abs(ad.sub(G.forward(z, frozen=frozen), target)))

    G.zero_grad()
    ad.backward(loss(frozen=False))
    _check_params(G, lambda: loss().item(), rng, tol=1e-3)


@pytest.mark.parametrize("preset,spec,data_dim", _presets())
def test_encoder_cycle_gradient_matches_finite_differences(preset, spec, data_dim, rng):
    _, E, _ = build_stack(preset, spec, data_dim, hidden_width=32, seed=2)
    x = rng.uniform(0, 1, (6, data_dim))
    zn = 0.1 * rng.standard_normal((6, spec.dn))
    zc = np.eye(spec.k)[rng.integers(0, spec.k, 6)]

    def loss():
        cn, cc = cycle_losses(E, Tensor(x), zn, zc)
        return ad.add(ad.scale(cn, 10.0), ad.scale(cc, 10.0))

    E.zero_grad()
    ad.backward(loss())
    _check_params(E, lambda: loss().item(), rng, tol=1e-4)


@pytest.mark.parametrize("preset,spec,data_dim", _presets())
def test_critic_loss_gradient_matches_finite_differences(preset, spec, data_dim, rng):
    _, _, D = build_stack(preset, spec, data_dim, hidden_width=32, seed=3)
    real, fake = rng.uniform(0, 1, (6, data_dim)), rng.uniform(0, 1, (6, data_dim))

    def loss():
        return ad.sub(ad.mean(D.forward(fake)), ad.mean(D.forward(real)))

    D.zero_grad()
    ad.backward(loss())
    # the critic is piecewise linear: a tiny step is exact unless it straddles a kink
    _check_params(D, lambda: loss().item(), rng, tol=1e-4, h=1e-7)


def test_full_width_generator_gradient(rng):
    G, _, _ = build_stack("synthetic", LatentSpec(6, 4), 100, seed=4)
    z = rng.standard_normal((4, 10))
    w = rng.standard_normal((4, 100))

    def loss(frozen=True):
        return ad.sum(ad.mul(G.forward(z, frozen=frozen), w))

    ad.backward(loss(frozen=False))
    _check_params(G, lambda: loss().item(), rng, tol=1e-4, n_coords=8)


# ------------------------------------------------------- input gradients

def _two_layer_critic(seed, width=16, dim=5):
    layers = [Layer("linear", width), Layer("leaky_relu", alpha=0.2),
              Layer("linear", width), Layer("leaky_relu", alpha=0.2), Layer("linear", 1)]
    return MlpNetwork(dim, layers, seed=seed, name="D", double_backprop=True)


def test_input_gradient_of_linear_critic_is_its_weight(rng):
    D = MlpNetwork(4, [Layer("linear", 1)], seed=0, name="D", double_backprop=True)
    x = rng.standard_normal((7, 4))
    g = grad_wrt_input(D, x).data
    np.testing.assert_array_equal(g, np.tile(D.params["0.weight"].data.T, (7, 1)))


def test_input_gradient_matches_finite_differences(rng):
    D = _two_layer_critic(seed=5)
    x = rng.standard_normal((4, 5))
    g = grad_wrt_input(D, x).data
    for i in range(4):
        row = x[i:i + 1].copy()
        num = ad.numerical_grad(lambda: D.predict(row).item(), row)
        assert rel_err(g[i], num[0]).max() < 1e-4


def test_penalty_parameter_gradient_matches_finite_differences(rng):
    D = _two_layer_critic(seed=6)
    real, fake = rng.standard_normal((8, 5)), rng.standard_normal((8, 5))
    seed = 99

    def penalty():
        pen, _ = gradient_penalty(D, real, fake, make_rng(seed))
        return pen

    D.zero_grad()
    ad.backward(penalty())
    for name, p in D.params.items():
        if p.grad is None:
            continue
        analytic, numeric = sampled_fd_check(lambda: penalty().item(), p, 15, rng)
        err = rel_err(analytic, numeric)
        assert ((err <= 1e-3) | (np.abs(analytic - numeric) < 1e-9)).all(), name


def test_penalty_vanishes_for_unit_norm_linear_critic(rng):
    D = MlpNetwork(3, [Layer("linear", 1)], seed=0, name="D", double_backprop=True)
    w = np.array([[1.0], [2.0], [2.0]]) / 3.0
    D.params["0.weight"].data = w
    pen, _ = gradient_penalty(D, rng.standard_normal((5, 3)), rng.standard_normal((5, 3)), rng)
    assert pen.item() == pytest.approx(0.0, abs=1e-24)


def test_penalty_rejects_unsupported_layers():
    with pytest.raises(ValueError, match="input-gradient"):
        MlpNetwork(3, [Layer("linear", 4), Layer("batchnorm", 4), Layer("linear", 1)],
                   name="D", double_backprop=True)
    net = MlpNetwork(3, [Layer("linear", 1), Layer("sigmoid")], name="D")
    with pytest.raises(ValueError, match="unsupported"):
        grad_wrt_input(net, np.ones((2, 3)))


# ------------------------------------------------------------------ Adam

def test_adam_first_step_is_sign_step():
    w = ad.parameter([0.0, 0.0, 0.0])
    opt = Adam([w], lr=1e-4, beta1=0.5, beta2=0.9)
    w.grad = np.array([3.0, -0.5, 1e-3])
    opt.step()
    g = np.array([3.0, -0.5, 1e-3])
    np.testing.assert_allclose(w.data, -1e-4 * g / (np.abs(g) + 1e-8), rtol=1e-12)
    np.testing.assert_allclose(w.data, -1e-4 * np.sign(g), rtol=1e-4)
    assert w.grad is None


def test_adam_converges_on_quadratic():
    w = ad.parameter([0.0])
    opt = Adam([w], lr=1e-2, beta1=0.5, beta2=0.9)
    for _ in range(5000):
        ad.backward(ad.sum(ad.square(ad.sub(w, 3.0))))
        opt.step()
    assert abs(w.data[0] - 3.0) < 1e-2


def test_adam_zero_gradient_leaves_params_and_counts_step():
    w = ad.parameter([1.0, -2.0])
    opt = Adam([w])
    w.grad = np.zeros(2)
    opt.step()
    np.testing.assert_array_equal(w.data, [1.0, -2.0])
    assert opt.step_count == 1
    assert [m.shape for m in opt.first_moment] == [w.shape]


def test_adam_missing_gradient_rejected():
    w = ad.parameter([1.0])
    with pytest.raises(ValueError, match="without gradient"):
        Adam([w]).step()


def test_adam_step_checks_parameter_list():
    w, v = ad.parameter([1.0]), ad.parameter([2.0])
    opt = Adam([w])
    w.grad = np.ones(1)
    with pytest.raises(ValueError):
        ad.adam_step([v], opt)
    ad.adam_step([w], opt)
    assert opt.step_count == 1
