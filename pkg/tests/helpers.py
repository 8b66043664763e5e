"""Finite-difference and enumeration oracles shared by the test modules."""

import itertools

import numpy as np

from hmsm.network import PARAM_NAMES
from hmsm.numerics import log_gaussian_diag

FD_EPS = 1e-5


def max_rel_err(a, b, floor=1e-6):
    """Largest elementwise ``|a - b| / max(|a|, |b|, floor)``."""
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0


def _objective(net, x, y, w):
    means = net.forward(x)
    return float(np.sum(np.asarray(w) * log_gaussian_diag(y, means, net.log_var)))


def fd_gradient(net, x, y, w, eps=FD_EPS):
    """Central differences of the weighted log-likelihood over unmasked parameters."""
    out = {}
    for name in PARAM_NAMES:
        arr = getattr(net, name)
        allowed = {"W1": net.w1_mask, "W2": net.w2_mask}.get(name, np.ones(arr.shape, dtype=bool))
        grad = np.zeros_like(arr)
        for idx in zip(*np.nonzero(allowed)):
            old = arr[idx]
            arr[idx] = old + eps
            up = _objective(net, x, y, w)
            arr[idx] = old - eps
            down = _objective(net, x, y, w)
            arr[idx] = old
            grad[idx] = (up - down) / (2 * eps)
        out[name] = grad
    return out


def fd_jacobian(net, x, eps=FD_EPS):
    x = np.asarray(x, dtype=float)
    J = np.zeros((net.d, x.size))
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = eps
        J[:, i] = (net.forward(x + e) - net.forward(x - e)) / (2 * eps)
    return J


def enumerate_paths(model, x):
    """Brute-force posteriors by summing over every regime path ``s_M..s_T``.

    Returns ``(log_lik, gamma, xi)`` computed in extended precision-free
    linear space after subtracting the best path's log weight.
    """
    M, K = model.spec.M, model.K
    x = np.asarray(x, dtype=float)
    T, d = x.shape
    init = x[:M].reshape(-1)
    log_init = model.initial.log_density(init[None])[0] + model.chain.log_pi
    windows = np.stack([x[t - M : t][::-1].reshape(-1) for t in range(M, T)])
    log_trans = model.transition_log_density(windows, x[M:])
    L = T - M + 1
    paths, logw = [], []
    for path in itertools.product(range(K), repeat=L):
        lw = log_init[path[0]]
        for r in range(1, L):
            lw += model.chain.log_A[path[r - 1], path[r]] + log_trans[r - 1, path[r]]
        paths.append(path)
        logw.append(lw)
    logw = np.array(logw)
    top = logw.max()
    wts = np.exp(logw - top)
    Z = wts.sum()
    gamma = np.zeros((L, K))
    xi = np.zeros((L - 1, K, K))
    for path, wt in zip(paths, wts):
        for r in range(L):
            gamma[r, path[r]] += wt
        for r in range(1, L):
            xi[r - 1, path[r - 1], path[r]] += wt
    return top + np.log(Z), gamma / Z, xi / Z


def random_model(seed, d=2, M=1, K=2, hp=3, activation="cosine", lv=-1.0):
    """Small random model with a generic chain, for oracle comparisons."""
    from hmsm.model import ChainParams, InitialEmission, ModelSpec, MsmModel
    from hmsm.network import init_random
    from hmsm.numerics import Rng

    rng = Rng(seed)
    g = rng.gen
    spec = ModelSpec(d=d, M=M, K=K, hidden_per_output=hp, activation=activation)
    pi = g.dirichlet(np.ones(K))
    A = g.dirichlet(np.ones(K), size=K)
    initial = InitialEmission(g.normal(size=(K, d * M)), g.normal(size=(K, d * M)) * 0.3)
    nets = [
        init_random(r, spec, None, 0.8, output_scale=0.5, bias_scale=0.5, log_var=lv + 0.2 * g.normal(size=d))
        for r in rng.spawn(K)
    ]
    return MsmModel(spec, ChainParams.from_probs(pi, A), initial, nets)
