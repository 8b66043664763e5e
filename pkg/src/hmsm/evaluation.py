"""Permutation-aware scoring of estimated models against a ground truth."""

from __future__ import annotations

import itertools
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import uniform_filter1d

from .data import SequenceBatch
from .datagen import RegimeGraph, lag_graph_from_mask
from .exceptions import ContractViolation
from .inference import decode_argmax, make_windows, posteriors
from .model import MsmModel
from .numerics import Rng

EXHAUSTIVE_MAX_K = 5


@dataclass
class PermMatch:
    """``sigma[i]`` is the estimated state matched to true state ``i``."""

    sigma: np.ndarray
    err: float
    method: str = "exhaustive"


@dataclass
class GraphScore:
    precision: np.ndarray
    recall: np.ndarray
    f1: np.ndarray

    @property
    def mean_f1(self) -> float:
        return float(np.mean(self.f1))


def l2_distance(f, g, samples) -> float:
    """Mean Euclidean distance between two vector fields over sample points."""
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise ContractViolation("l2_distance needs a non-empty (n, d*M) sample set")
    diff = np.asarray(f(x)) - np.asarray(g(x))
    return float(np.mean(np.linalg.norm(diff, axis=1)))


def state_mean(model: MsmModel, k: int):
    """Callable for regime ``k``'s transition mean (honours piecewise truths)."""
    return lambda x: model.transition_means(x)[:, k]


def heldout_windows(batch, n: int = 1000, rng: Rng | None = None, M: int | None = None) -> np.ndarray:
    """``n`` random conditioning windows (``M`` consecutive samples each)."""
    X = batch.X if isinstance(batch, SequenceBatch) else np.asarray(batch)
    if M is None:
        M = batch.meta["M"]
    windows, _, _ = make_windows(X, M)
    flat = windows.reshape(-1, windows.shape[-1])
    rng = rng or Rng(0)
    if n >= flat.shape[0]:
        return flat.copy()
    return flat[np.sort(rng.choice(flat.shape[0], size=n, replace=False))]


def l2_cost_matrix(est: MsmModel, truth: MsmModel, samples) -> np.ndarray:
    """``C[i, j]`` = distance between true state ``i`` and estimated state ``j``."""
    x = np.asarray(samples, dtype=np.float64)
    mt = truth.transition_means(x)
    me = est.transition_means(x)
    C = np.empty((truth.K, est.K))
    for i in range(truth.K):
        for j in range(est.K):
            C[i, j] = np.mean(np.linalg.norm(mt[:, i] - me[:, j], axis=1))
    return C


def exhaustive_assignment(C: np.ndarray) -> tuple[np.ndarray, float]:
    K = C.shape[0]
    best, best_cost = None, np.inf
    for perm in itertools.permutations(range(K)):
        cost = C[np.arange(K), perm].mean()
        if cost < best_cost:
            best, best_cost = perm, cost
    return np.array(best), float(best_cost)


def greedy_assignment(C: np.ndarray) -> tuple[np.ndarray, float]:
    """Repeatedly take the globally cheapest unmatched pair; O(K^2) per pick."""
    K = C.shape[0]
    work = np.array(C, dtype=np.float64)
    sigma = np.full(K, -1)
    for _ in range(K):
        i, j = np.unravel_index(np.argmin(work), work.shape)
        sigma[i] = j
        work[i, :] = np.inf
        work[:, j] = np.inf
    return sigma, float(C[np.arange(K), sigma].mean())


def match_permutation(est: MsmModel, truth: MsmModel, samples, *, method: str | None = None) -> PermMatch:
    """Relabeling of ``est`` that minimizes the mean per-state L2 distance."""
    if est.K != truth.K:
        raise ContractViolation(f"cannot match K={est.K} against K={truth.K}")
    C = l2_cost_matrix(est, truth, samples)
    method = method or ("exhaustive" if truth.K <= EXHAUSTIVE_MAX_K else "greedy")
    fn = exhaustive_assignment if method == "exhaustive" else greedy_assignment
    sigma, err = fn(C)
    return PermMatch(sigma, err, method)


def classify_windows(model: MsmModel, heldout) -> tuple[np.ndarray, np.ndarray]:
    """Windows ``(n, d*M)`` for steps ``t > M`` and their argmax-posterior regime."""
    X = heldout.X if isinstance(heldout, SequenceBatch) else np.asarray(heldout)
    windows, _, _ = make_windows(X, model.spec.M)
    labels = np.concatenate(
        [decode_argmax(posteriors(model, X[s : s + 500]))[:, 1:] for s in range(0, X.shape[0], 500)]
    )
    return windows.reshape(-1, windows.shape[-1]), labels.reshape(-1)


def mean_abs_jacobians(model: MsmModel, heldout) -> tuple[np.ndarray, np.ndarray]:
    """Per-regime average ``|J|`` as ``(K, d, d*M)`` plus window counts."""
    windows, labels = classify_windows(model, heldout)
    K, d, dM = model.K, model.spec.d, model.spec.input_dim
    avg = np.zeros((K, d, dM))
    counts = np.bincount(labels, minlength=K)
    for k in range(K):
        if counts[k]:
            avg[k] = model.networks[k].mean_abs_jacobian(windows[labels == k])
    return avg, counts


def estimate_graph(model: MsmModel, heldout, tau: float = 0.05) -> RegimeGraph:
    """Regime graph from thresholding posterior-classified mean absolute Jacobians."""
    avg, counts = mean_abs_jacobians(model, heldout)
    for k in np.flatnonzero(counts == 0):
        warnings.warn(f"no held-out window assigned to state {k}; its graph is empty", RuntimeWarning)
    return threshold_jacobians(avg, tau)


def threshold_jacobians(avg: np.ndarray, tau: float) -> RegimeGraph:
    return RegimeGraph(np.stack([lag_graph_from_mask(a > tau) for a in avg]))


def f1_graphs(est: RegimeGraph, truth: RegimeGraph, sigma=None) -> GraphScore:
    """Per-regime edge precision/recall/F1 of ``est[sigma[i]]`` against ``truth[i]``.

    F1 is 0 when there are no true positives.
    """
    if est.edges.shape != truth.edges.shape:
        raise ContractViolation(f"graph shapes differ: {est.edges.shape} vs {truth.edges.shape}")
    K = truth.K
    sigma = np.arange(K) if sigma is None else np.asarray(sigma)
    P, R, F = np.zeros(K), np.zeros(K), np.zeros(K)
    for i in range(K):
        e, t = est.edges[sigma[i]], truth.edges[i]
        tp = np.sum(e & t)
        fp = np.sum(e & ~t)
        fn = np.sum(~e & t)
        P[i] = tp / (tp + fp) if tp + fp else 0.0
        R[i] = tp / (tp + fn) if tp + fn else 0.0
        F[i] = 2 * P[i] * R[i] / (P[i] + R[i]) if tp else 0.0
    return GraphScore(P, R, F)


def smoothed_paths(gamma_sequences, kernel_len: int = 3) -> list[np.ndarray]:
    out = []
    for g in gamma_sequences:
        g = np.asarray(g, dtype=np.float64)
        sm = uniform_filter1d(g, size=kernel_len, axis=0, mode="nearest") if kernel_len > 1 else g
        out.append(np.argmax(sm, axis=1))
    return out


def transition_frequency(gamma_sequences, kernel_len: int = 3, sample_rate_hz: float = 1.0) -> float:
    """Mean rate (Hz) of regime changes in the smoothed argmax-posterior paths."""
    if sample_rate_hz <= 0:
        raise ContractViolation("sample_rate_hz must be positive")
    rates = [
        np.count_nonzero(np.diff(path)) / (len(path) / sample_rate_hz)
        for path in smoothed_paths(gamma_sequences, kernel_len)
    ]
    return float(np.mean(rates))
