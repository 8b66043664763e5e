"""Exact posterior inference over regimes for a fixed model.

Arrays indexed by time start at the first latent ``s_M``: row ``r`` of
``gamma`` is time ``t = M + r`` (1-based), so there are ``T - M + 1`` rows.
Every function accepts one sequence ``(T, d)`` or a batch ``(N, T, d)`` and
returns results with the matching leading axis.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .exceptions import ContractViolation
from .model import MsmModel, check_T
from .numerics import log_sum_exp


@dataclass
class PosteriorSummary:
    log_lik: np.ndarray | float
    gamma: np.ndarray
    xi: np.ndarray

    @property
    def batched(self) -> bool:
        return self.gamma.ndim == 3

    def as_batch(self) -> "PosteriorSummary":
        if self.batched:
            return self
        return PosteriorSummary(np.atleast_1d(self.log_lik), self.gamma[None], self.xi[None])

    def __getitem__(self, idx) -> "PosteriorSummary":
        b = self.as_batch()
        return PosteriorSummary(b.log_lik[idx], b.gamma[idx], b.xi[idx])


def _as_batch(x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        return x[None], True
    if x.ndim != 3:
        raise ContractViolation(f"expected (T, d) or (N, T, d) data, got shape {x.shape}")
    return x, False


def make_windows(X, M: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Split sequences into conditioning windows, targets and initial blocks.

    Returns ``windows (N, T-M, d*M)`` ordered ``(x_{t-1}, ..., x_{t-M})``,
    ``targets (N, T-M, d)`` and ``init (N, d*M)`` holding ``x_{1:M}`` in
    chronological order.
    """
    X, _ = _as_batch(X)
    N, T, d = X.shape
    if T <= M:
        raise ContractViolation(f"sequence length T={T} must exceed the lag M={M}")
    windows = np.concatenate([X[:, M - 1 - lag : T - 1 - lag] for lag in range(M)], axis=-1)
    return windows, X[:, M:], X[:, :M].reshape(N, d * M)


def emission_terms(model: MsmModel, X) -> tuple[np.ndarray, np.ndarray]:
    """``log p(x_{1:M} | s_M=k)`` as ``(N, K)`` and transition terms ``(N, T-M, K)``."""
    X, _ = _as_batch(X)
    check_T(model.spec, X.shape[1])
    if X.shape[2] != model.spec.d:
        raise ContractViolation(f"data dimension {X.shape[2]} != model d={model.spec.d}")
    windows, targets, init = make_windows(X, model.spec.M)
    N, Tm, dM = windows.shape
    log_trans = model.transition_log_density(windows.reshape(-1, dM), targets.reshape(N * Tm, -1))
    return model.initial.log_density(init), log_trans.reshape(N, Tm, model.K)


def _forward(log_first: np.ndarray, log_trans: np.ndarray, log_A: np.ndarray) -> np.ndarray:
    N, Tm, K = log_trans.shape
    log_alpha = np.empty((N, Tm + 1, K))
    log_alpha[:, 0] = log_first
    for r in range(1, Tm + 1):
        prev = log_alpha[:, r - 1, :, None] + log_A[None]
        log_alpha[:, r] = log_trans[:, r - 1] + log_sum_exp(prev, axis=1)
    return log_alpha


def _backward(log_trans: np.ndarray, log_A: np.ndarray) -> np.ndarray:
    N, Tm, K = log_trans.shape
    log_beta = np.empty((N, Tm + 1, K))
    log_beta[:, Tm] = 0.0
    for r in range(Tm - 1, -1, -1):
        nxt = (log_trans[:, r] + log_beta[:, r + 1])[:, None, :] + log_A[None]
        log_beta[:, r] = log_sum_exp(nxt, axis=2)
    return log_beta


def _unbatch(arr, single):
    return arr[0] if single else arr


def forward_log(model: MsmModel, x) -> tuple[np.ndarray, np.ndarray | float]:
    """Log forward messages and the sequence log-likelihood."""
    X, single = _as_batch(x)
    log_init, log_trans = emission_terms(model, X)
    log_alpha = _forward(model.chain.log_pi + log_init, log_trans, model.chain.log_A)
    log_lik = log_sum_exp(log_alpha[:, -1], axis=1)
    return _unbatch(log_alpha, single), (float(log_lik[0]) if single else log_lik)


def backward_log(model: MsmModel, x) -> np.ndarray:
    X, single = _as_batch(x)
    _, log_trans = emission_terms(model, X)
    return _unbatch(_backward(log_trans, model.chain.log_A), single)


def posteriors_from_terms(log_first, log_trans, log_A) -> PosteriorSummary:
    """Batched posteriors from precomputed log emission terms.

    ``log_first`` already includes the initial state log-probabilities.
    """
    log_alpha = _forward(log_first, log_trans, log_A)
    log_beta = _backward(log_trans, log_A)
    log_lik = log_sum_exp(log_alpha[:, -1], axis=1)
    gamma = np.exp(log_alpha + log_beta - log_lik[:, None, None])
    log_xi = (
        log_alpha[:, :-1, :, None]
        + log_A[None, None]
        + (log_trans + log_beta[:, 1:])[:, :, None, :]
        - log_lik[:, None, None, None]
    )
    xi = np.exp(log_xi)
    # rounding drift only; the exact quantities are already normalized
    gamma /= gamma.sum(axis=-1, keepdims=True)
    xi /= xi.sum(axis=(-2, -1), keepdims=True)
    return PosteriorSummary(log_lik, gamma, xi)


def posteriors(model: MsmModel, x) -> PosteriorSummary:
    """State marginals ``gamma``, pairwise marginals ``xi`` and log-likelihood.

    ``xi[r, i, j]`` is ``p(s_{t-1}=i, s_t=j | x)`` with ``t = M + 1 + r``.
    """
    X, single = _as_batch(x)
    log_init, log_trans = emission_terms(model, X)
    summary = posteriors_from_terms(model.chain.log_pi + log_init, log_trans, model.chain.log_A)
    if single:
        return PosteriorSummary(float(summary.log_lik[0]), summary.gamma[0], summary.xi[0])
    return summary


def log_likelihood(model: MsmModel, x) -> np.ndarray | float:
    return forward_log(model, x)[1]


def decode_argmax(summary: PosteriorSummary | np.ndarray) -> np.ndarray:
    """Per-step most probable regime; ties go to the lowest index."""
    gamma = summary.gamma if isinstance(summary, PosteriorSummary) else np.asarray(summary)
    return np.argmax(gamma, axis=-1)
