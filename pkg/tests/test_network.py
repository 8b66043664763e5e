import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hmsm.exceptions import ContractViolation
from hmsm.model import ModelSpec
from hmsm.network import PARAM_NAMES, TransitionNetwork, init_random
from hmsm.numerics import Rng, log_gaussian_diag

from .helpers import fd_gradient, fd_jacobian, max_rel_err


def make_net(seed, d=3, M=2, hp=4, activation="cosine", mask=None, local=True, lv_scale=0.3):
    spec = ModelSpec(d=d, M=M, K=1, hidden_per_output=hp, activation=activation, locally_connected=local)
    rng = Rng(seed)
    net = init_random(rng, spec, mask, 0.8, output_scale=0.7, bias_scale=1.0)
    net.log_var = rng.normal(size=d) * lv_scale
    return net


def reference_forward(net, x):
    """Straight-line loops over hidden units, independent of the vectorized path."""
    d, h = net.W2.shape
    out = np.zeros(d)
    for j in range(d):
        acc = net.b2[j]
        for u in range(h):
            pre = net.b1[u] + sum(net.W1[u, i] * x[i] for i in range(len(x)))
            act = np.cos(pre) if net.activation == "cosine" else max(pre, 0.0)
            acc += net.W2[j, u] * act
        out[j] = acc
    return out


def test_zero_first_layer_cosine_is_row_sums():
    net = make_net(0)
    net.W1[:] = 0.0
    net.b1[:] = 0.0
    x = np.random.default_rng(0).normal(size=6)
    np.testing.assert_allclose(net.forward(x), net.W2.sum(axis=1) + net.b2, rtol=1e-14)


def test_relu_dead_units_give_output_bias():
    net = make_net(1, activation="relu")
    net.b1[:] = -1e3
    x = np.random.default_rng(1).normal(size=6)
    np.testing.assert_array_equal(net.forward(x), net.b2)


@pytest.mark.parametrize("activation", ["cosine", "relu"])
@pytest.mark.parametrize("local", [True, False])
def test_forward_matches_reference(activation, local):
    net = make_net(2, activation=activation, local=local)
    rng = np.random.default_rng(2)
    for _ in range(5):
        x = rng.normal(size=6)
        np.testing.assert_allclose(net.forward(x), reference_forward(net, x), rtol=1e-12, atol=1e-12)


def test_forward_batch_consistent_with_single():
    net = make_net(3)
    xs = np.random.default_rng(3).normal(size=(7, 6))
    batch = net.forward(xs)
    for i in range(7):
        np.testing.assert_allclose(batch[i], net.forward(xs[i]), rtol=1e-13, atol=1e-14)


def test_forward_dimension_mismatch():
    net = make_net(4)
    with pytest.raises(ContractViolation):
        net.forward(np.zeros(5))


def test_zero_weight_gives_zero_value_and_gradient():
    net = make_net(5)
    rng = np.random.default_rng(5)
    val, g = net.weighted_loglik_grad(rng.normal(size=6), rng.normal(size=3), 0.0)
    assert val == 0.0
    for _, arr in g.items():
        assert not np.any(arr)


def test_gradient_at_mode():
    net = make_net(6)
    x = np.random.default_rng(6).normal(size=6)
    w = 0.7
    _, g = net.weighted_loglik_grad(x, net.forward(x), w)
    for name in ("W1", "b1", "W2", "b2"):
        np.testing.assert_allclose(getattr(g, name), 0.0, atol=1e-15)
    np.testing.assert_allclose(g.log_var, np.full(3, -0.5 * w), rtol=1e-15)


def test_value_is_weighted_log_density():
    net = make_net(7)
    rng = np.random.default_rng(7)
    x, y = rng.normal(size=6), rng.normal(size=3)
    val, _ = net.weighted_loglik_grad(x, y, 0.4)
    assert val == pytest.approx(0.4 * log_gaussian_diag(y, net.forward(x), net.log_var), rel=1e-13)


@pytest.mark.parametrize("activation", ["cosine", "relu"])
def test_gradient_matches_finite_differences(activation):
    net = make_net(8, activation=activation, mask=np.random.default_rng(8).uniform(size=(3, 6)) < 0.6)
    rng = np.random.default_rng(9)
    x, y, w = rng.normal(size=(4, 6)), rng.normal(size=(4, 3)), rng.uniform(size=4)
    _, g = net.weighted_loglik_grad(x, y, w)
    fd = fd_gradient(net, x, y, w)
    for name in PARAM_NAMES:
        assert max_rel_err(getattr(g, name), fd[name]) < 1e-5, name


def test_masked_gradient_entries_are_zero():
    mask = np.zeros((3, 6), dtype=bool)
    mask[:, 0] = True
    net = make_net(10, mask=mask)
    rng = np.random.default_rng(10)
    _, g = net.weighted_loglik_grad(rng.normal(size=(5, 6)), rng.normal(size=(5, 3)), np.ones(5))
    assert not np.any(g.W1[~net.w1_mask])
    assert not np.any(g.W2[~net.w2_mask])


def test_jacobian_zero_first_layer():
    for act in ("cosine", "relu", "linear"):
        net = make_net(11, activation=act)
        net.W1[:] = 0.0
        assert not np.any(net.input_jacobian(np.ones(6)))


def test_jacobian_of_linear_network_is_weight_matrix():
    d, M = 3, 2
    W = np.random.default_rng(12).normal(size=(d, d * M))
    net = TransitionNetwork(W, np.zeros(d), np.eye(d), np.zeros(d), np.zeros(d), activation="linear")
    for x in np.random.default_rng(13).normal(size=(4, d * M)):
        np.testing.assert_allclose(net.input_jacobian(x), W, rtol=1e-15)
        np.testing.assert_allclose(net.forward(x), W @ x, rtol=1e-13)


@pytest.mark.parametrize("activation", ["cosine", "relu"])
def test_jacobian_matches_finite_differences(activation):
    net = make_net(14, activation=activation)
    for x in np.random.default_rng(14).normal(size=(5, 6)):
        assert max_rel_err(net.input_jacobian(x), fd_jacobian(net, x)) < 1e-5


def test_fully_masked_network_is_constant():
    net = make_net(15, mask=np.zeros((3, 6), dtype=bool))
    xs = np.random.default_rng(15).normal(size=(6, 6)) * 3
    out = net.forward(xs)
    np.testing.assert_allclose(out, np.broadcast_to(out[0], out.shape), rtol=0, atol=0)


def test_all_ones_mask_equals_unmasked():
    a = make_net(16, mask=np.ones((3, 6), dtype=bool))
    b = make_net(16, mask=None)
    for name in PARAM_NAMES:
        np.testing.assert_array_equal(getattr(a, name), getattr(b, name))
    # block structure is still enforced in the output layer
    assert np.count_nonzero(a.W2) == 3 * 4


def test_init_is_deterministic():
    a, b = make_net(17), make_net(17)
    for name in PARAM_NAMES:
        assert getattr(a, name).tobytes() == getattr(b, name).tobytes()


def test_init_rejects_bad_mask_shape():
    spec = ModelSpec(d=3, M=2, K=1)
    with pytest.raises(ContractViolation):
        init_random(Rng(0), spec, np.ones((3, 5)))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from(["cosine", "relu"]))
def test_masked_jacobian_entries_exactly_zero(seed, activation):
    rng = np.random.default_rng(seed)
    mask = rng.uniform(size=(3, 6)) < 0.5
    net = make_net(seed % 1000, activation=activation, mask=mask)
    J = net.input_jacobian(rng.normal(size=(8, 6)) * 2)
    assert np.all(J[:, ~mask] == 0.0)


def test_jacobian_agrees_with_directional_difference():
    net = make_net(18)
    x = np.random.default_rng(18).normal(size=6)
    J = net.input_jacobian(x)
    for eps in (1e-3, 1e-4):
        for i in range(6):
            e = np.zeros(6)
            e[i] = eps
            col = (net.forward(x + e) - net.forward(x)) / eps
            assert np.max(np.abs(col - J[:, i])) < 10 * eps * (1 + np.max(np.abs(J)))


@pytest.mark.parametrize("activation", ["cosine", "relu"])
def test_small_ascent_step_increases_objective(activation):
    net = make_net(19, activation=activation)
    rng = np.random.default_rng(19)
    x, y = rng.normal(size=6), rng.normal(size=3)
    before, g = net.weighted_loglik_grad(x, y, 0.8)
    for name, arr in g.items():
        getattr(net, name).__iadd__(1e-6 * arr)
    after, _ = net.weighted_loglik_grad(x, y, 0.8)
    assert after > before
