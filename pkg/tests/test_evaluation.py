import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy.optimize import linear_sum_assignment

from hmsm.datagen import RegimeGraph, lag_graph_from_mask
from hmsm.evaluation import (
    estimate_graph,
    exhaustive_assignment,
    f1_graphs,
    greedy_assignment,
    heldout_windows,
    l2_distance,
    match_permutation,
    mean_abs_jacobians,
    threshold_jacobians,
    transition_frequency,
)
from hmsm.exceptions import ContractViolation
from hmsm.model import ChainParams, InitialEmission, ModelSpec, MsmModel
from hmsm.network import TransitionNetwork

from .helpers import random_model


def test_l2_identical_is_zero():
    f = lambda x: np.sin(x[:, :2])
    assert l2_distance(f, f, np.random.default_rng(0).normal(size=(50, 4))) == 0.0


def test_l2_constant_fields():
    f = lambda x: np.tile([1.0, 0.0, 0.0], (len(x), 1))
    g = lambda x: np.zeros((len(x), 3))
    assert l2_distance(f, g, np.random.default_rng(1).normal(size=(7, 6))) == 1.0


def test_l2_linear_fields_match_direct_sum():
    rng = np.random.default_rng(2)
    W1, W2 = rng.normal(size=(3, 6)), rng.normal(size=(3, 6))
    xs = rng.normal(size=(100, 6))
    oracle = sum(np.sqrt(sum(v * v for v in (W1 - W2) @ x)) for x in xs) / len(xs)
    assert l2_distance(lambda x: x @ W1.T, lambda x: x @ W2.T, xs) == pytest.approx(oracle, rel=1e-12)


def test_l2_empty_rejected():
    with pytest.raises(ContractViolation):
        l2_distance(lambda x: x, lambda x: x, np.zeros((0, 3)))


def samples(seed=0, dM=4, n=200):
    return np.random.default_rng(seed).normal(size=(n, dM))


def test_match_identity_and_swap():
    m = random_model(0, d=2, M=2, K=3)
    pm = match_permutation(m, m, samples())
    np.testing.assert_array_equal(pm.sigma, [0, 1, 2])
    assert pm.err == 0.0
    swapped = m.permuted([1, 0, 2])
    pm = match_permutation(swapped, m, samples())
    np.testing.assert_array_equal(pm.sigma, [1, 0, 2])
    assert pm.err == 0.0


def test_match_rejects_k_mismatch():
    with pytest.raises(ContractViolation):
        match_permutation(random_model(0, K=2), random_model(1, K=3), samples(dM=2))


def brute_force(C):
    K = len(C)
    return min(np.mean([C[i, p[i]] for i in range(K)]) for p in itertools.permutations(range(K)))


def test_greedy_can_be_suboptimal():
    C = np.array([[0.0, 1.0, 9.0], [1.0, 10.0, 9.0], [9.0, 9.0, 0.5]])
    sg, cg = greedy_assignment(C)
    se, ce = exhaustive_assignment(C)
    np.testing.assert_array_equal(sg, [0, 1, 2])
    np.testing.assert_array_equal(se, [1, 0, 2])
    assert ce < cg
    assert ce == pytest.approx(brute_force(C), abs=1e-15)
    r, c = linear_sum_assignment(C)
    assert ce == pytest.approx(C[r, c].mean(), abs=1e-15)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 5).flatmap(lambda k: arrays(np.float64, (k, k), elements=st.floats(0, 10))))
def test_exhaustive_never_worse_than_greedy(C):
    _, ce = exhaustive_assignment(C)
    _, cg = greedy_assignment(C)
    assert ce <= cg + 1e-12
    assert ce == pytest.approx(brute_force(C), abs=1e-12)


def test_greedy_used_above_five_states():
    m = random_model(3, d=1, M=1, K=6)
    pm = match_permutation(m.permuted([5, 4, 3, 2, 1, 0]), m, samples(dM=1))
    assert pm.method == "greedy"
    np.testing.assert_array_equal(pm.sigma, [5, 4, 3, 2, 1, 0])


def test_match_error_invariant_to_joint_relabeling():
    a, b = random_model(4, d=2, M=1, K=3), random_model(5, d=2, M=1, K=3)
    x = samples(dM=2)
    p = [2, 0, 1]
    assert match_permutation(a.permuted(p), b.permuted(p), x).err == pytest.approx(
        match_permutation(a, b, x).err, rel=1e-12)


def linear_model(weights_per_state):
    K = len(weights_per_state)
    d, dM = weights_per_state[0].shape
    spec = ModelSpec(d=d, M=dM // d, K=K, hidden_per_output=1, activation="linear")
    nets = [TransitionNetwork(W.copy(), np.zeros(d), np.eye(d), np.zeros(d), np.full(d, np.log(0.01)),
                              activation="linear") for W in weights_per_state]
    initial = InitialEmission(np.arange(K)[:, None] * np.ones((K, dM)), np.zeros((K, dM)))
    chain = ChainParams.from_probs(np.full(K, 1 / K), np.full((K, K), 1 / K))
    return MsmModel(spec, chain, initial, nets)


def test_linear_network_graph_recovered():
    rng = np.random.default_rng(6)
    mask = rng.uniform(size=(3, 6)) < 0.5
    W = np.where(mask, 0.2, 0.01)
    model = linear_model([W])
    X = rng.normal(size=(4, 30, 3))
    g = estimate_graph(model, X, tau=0.05)
    np.testing.assert_array_equal(g.edges[0], lag_graph_from_mask(mask))
    assert not estimate_graph(model, X, tau=np.inf).edges.any()


def test_graph_monotone_in_tau():
    model = random_model(7, d=2, M=2, K=2)
    X = np.random.default_rng(7).normal(size=(3, 25, 2))
    avg, counts = mean_abs_jacobians(model, X)
    assert counts.sum() == 3 * 23
    prev = threshold_jacobians(avg, 0.0).edges
    for tau in (0.01, 0.05, 0.1, 0.3, 1.0):
        cur = threshold_jacobians(avg, tau).edges
        assert np.all(cur <= prev)
        prev = cur


def test_empty_state_warns():
    W = np.full((2, 2), 0.3)
    model = linear_model([W, W * 2])
    model.chain = ChainParams.from_probs([1.0, 0.0], [[1.0, 0.0], [1.0, 0.0]])
    with pytest.warns(RuntimeWarning):
        g = estimate_graph(model, np.random.default_rng(8).normal(size=(2, 10, 2)))
    assert not g.edges[1].any()


def graph_from_edges(edges, d=2, M=2):
    arr = np.zeros((1, d, d, M), dtype=bool)
    for e in edges:
        arr[(0,) + e] = True
    return RegimeGraph(arr)


def test_f1_examples():
    truth = graph_from_edges([(0, 0, 0), (0, 1, 0), (1, 1, 1), (1, 0, 0)])
    assert f1_graphs(truth, truth).mean_f1 == 1.0
    assert f1_graphs(graph_from_edges([]), truth).mean_f1 == 0.0
    est = graph_from_edges([(0, 0, 0), (0, 1, 0), (1, 1, 1), (0, 0, 1)])
    score = f1_graphs(est, truth)
    assert score.precision[0] == 0.75 and score.recall[0] == 0.75
    assert score.mean_f1 == pytest.approx(0.75, abs=1e-15)


def test_f1_uses_sigma_and_is_symmetric():
    rng = np.random.default_rng(9)
    truth = RegimeGraph(rng.uniform(size=(3, 2, 2, 2)) < 0.5)
    truth.edges[:, 0, 0, 0] = True
    sigma = np.array([2, 0, 1])
    est = RegimeGraph(truth.edges[np.argsort(sigma)])
    assert f1_graphs(est, truth, sigma).mean_f1 == 1.0
    other = RegimeGraph(rng.uniform(size=(3, 2, 2, 2)) < 0.5)
    a = f1_graphs(other, truth, sigma).mean_f1
    inv = np.argsort(sigma)
    b = f1_graphs(RegimeGraph(other.edges[sigma[inv]]), RegimeGraph(truth.edges), sigma).mean_f1
    assert a == pytest.approx(b)
    with pytest.raises(ContractViolation):
        f1_graphs(RegimeGraph(np.zeros((3, 2, 2, 1))), truth)


def one_hot(path, K=2):
    return np.eye(K)[np.asarray(path)]


def test_frequency_constant_path():
    assert transition_frequency([one_hot(np.zeros(100, dtype=int))], sample_rate_hz=200) == 0.0


def test_frequency_regular_switching():
    path = (np.arange(400) // 50) % 2
    assert transition_frequency([one_hot(path)], sample_rate_hz=200) == pytest.approx(3.5, abs=1e-12)


def test_frequency_suppresses_single_blip():
    path = np.array([0] * 10 + [1] + [0] * 10)
    assert transition_frequency([one_hot(path)], sample_rate_hz=100) == 0.0
    assert transition_frequency([one_hot(path)], kernel_len=1, sample_rate_hz=100) > 0.0


def test_frequency_averages_over_sequences():
    a = one_hot(np.zeros(200, dtype=int))
    b = one_hot((np.arange(200) // 50) % 2)
    assert transition_frequency([a, b], sample_rate_hz=100) == pytest.approx(0.75)
    with pytest.raises(ContractViolation):
        transition_frequency([a], sample_rate_hz=0)


def test_heldout_windows_are_consecutive_samples():
    X = np.arange(60, dtype=float).reshape(2, 10, 3)
    w = heldout_windows(X, n=5, M=2)
    assert w.shape == (5, 6)
    # each window is (x_{t-1}, x_{t-2}) of one sequence
    np.testing.assert_array_equal(w[:, :3] - w[:, 3:], 3.0)
