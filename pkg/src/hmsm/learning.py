"""Generalised EM for Markov switching models with neural transitions.

Each mini-batch goes through an E-step (exact posteriors under the current
parameters), closed-form updates of the chain and initial Gaussians, and one
optimizer step on the transition networks along the posterior-weighted
log-likelihood gradient.
"""

from __future__ import annotations

import dataclasses
import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .data import SequenceBatch
from .exceptions import ConfigError, ContractViolation, NumericFailure
from .inference import PosteriorSummary, make_windows, posteriors_from_terms
from .model import ChainParams, InitialEmission, ModelSpec, MsmModel, check_T
from .network import ParamGrad, init_random
from .numerics import LOG_2PI, Rng

logger = logging.getLogger(__name__)

VAR_FLOOR = 1e-8
LOG_VAR_FLOOR = math.log(VAR_FLOOR)


@dataclass
class TrainConfig:
    max_epochs: int = 100
    batch_size: int = 500
    learning_rate: float = 7e-3
    plateau_factor: float = 0.5
    plateau_patience: int = 5
    plateau_tol: float = 1e-4
    max_plateau_drops: int = 2
    n_restarts: int = 1
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    full_batch: bool = False
    variance_update: str = "exact"
    init_weight_scale: float = 1.0
    init_output_scale: float = 0.1
    init_bias_scale: float = 1.0
    init_self_prob: float = 0.8
    init_method: str = "linear"
    linear_iters: int = 30
    linear_restarts: int = 4
    warmup_epochs: int = 5

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"optimizer must be 'adam' or 'sgd', got {self.optimizer!r}")
        if self.variance_update not in ("exact", "gradient"):
            raise ConfigError("variance_update must be 'exact' or 'gradient'")
        if self.init_method not in ("linear", "random"):
            raise ConfigError("init_method must be 'linear' or 'random'")
        if self.linear_iters < 1 or self.linear_restarts < 1 or self.warmup_epochs < 0:
            raise ConfigError("linear_iters and linear_restarts must be >= 1, warmup_epochs >= 0")
        if self.n_restarts < 1 or self.max_epochs < 0:
            raise ConfigError("n_restarts must be >= 1 and max_epochs >= 0")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        return cls(**data)


@dataclass
class TrainReport:
    epoch_loglik: list[float]
    epoch_lr: list[float]
    chosen_restart: int
    restart_loglik: list[float]
    final_lr: float
    wall_clock: float = field(default=0.0, compare=False)
    restart_histories: list[list[float]] = field(default_factory=list)
    warmup_loglik: list[float] = field(default_factory=list)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


# -- exact M-steps -----------------------------------------------------------

def _stack(summaries) -> PosteriorSummary:
    if isinstance(summaries, PosteriorSummary):
        return summaries.as_batch()
    summaries = list(summaries)
    if not summaries:
        raise ContractViolation("need at least one posterior summary")
    parts = [s.as_batch() for s in summaries]
    return PosteriorSummary(
        np.concatenate([p.log_lik for p in parts]),
        np.concatenate([p.gamma for p in parts]),
        np.concatenate([p.xi for p in parts]),
    )


def _normalize_rows(counts: np.ndarray) -> np.ndarray:
    counts = np.atleast_2d(counts)
    tot = counts.sum(axis=-1, keepdims=True)
    uniform = np.full_like(counts, 1.0 / counts.shape[-1])
    with np.errstate(invalid="ignore", divide="ignore"):
        probs = np.where(tot > 0, counts / np.where(tot > 0, tot, 1.0), uniform)
        return np.log(probs)


def m_step_discrete(summaries) -> ChainParams:
    """Closed-form chain update from expected initial-state and transition counts."""
    s = _stack(summaries)
    pi_counts = s.gamma[:, 0].sum(axis=0)
    A_counts = s.xi.sum(axis=(0, 1))
    return ChainParams(_normalize_rows(pi_counts)[0], _normalize_rows(A_counts))


def m_step_initial(summaries, batch, previous: InitialEmission | None = None) -> InitialEmission:
    """Posterior-weighted Gaussian MLE for the initial windows ``x_{1:M}``.

    States with zero total weight keep ``previous`` (or a standard normal).
    """
    s = _stack(summaries)
    X = batch.X if isinstance(batch, SequenceBatch) else np.asarray(batch, dtype=np.float64)
    if X.ndim == 2:
        X = X[None]
    N, T, d = X.shape
    M = T - s.gamma.shape[1] + 1
    K = s.gamma.shape[2]
    if previous is None:
        previous = InitialEmission(np.zeros((K, d * M)), np.zeros((K, d * M)))
    return _initial_from_arrays(s, X[:, :M].reshape(N, d * M), previous)


def expected_complete_loglik(model: MsmModel, batch, summaries) -> float:
    """Q-function: expected complete-data log-likelihood under fixed posteriors."""
    s = _stack(summaries)
    windows, targets, init = make_windows(batch.X if isinstance(batch, SequenceBatch) else batch, model.spec.M)
    N, Tm, dM = windows.shape
    log_trans = model.transition_log_density(windows.reshape(-1, dM), targets.reshape(N * Tm, -1))
    log_trans = log_trans.reshape(N, Tm, model.K)
    log_init = model.initial.log_density(init)
    with np.errstate(invalid="ignore"):
        terms = (
            np.nansum(s.gamma[:, 0] * (model.chain.log_pi + log_init))
            + np.nansum(s.xi * model.chain.log_A[None, None])
            + np.sum(s.gamma[:, 1:] * log_trans)
        )
    return float(terms)


# -- network step ------------------------------------------------------------

class Adam:
    """Adaptive-moment ascent over every parameter of the transition networks."""

    def __init__(self, model: MsmModel, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = [{n: np.zeros_like(a) for n, a in net.params().items()} for net in model.networks]
        self.v = [{n: np.zeros_like(a) for n, a in net.params().items()} for net in model.networks]

    def step(self, model: MsmModel, grads: list[ParamGrad], lr: float, skip=()) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for k, (net, g) in enumerate(zip(model.networks, grads)):
            for name, grad in g.items():
                if name in skip:
                    continue
                m = self.m[k][name]
                v = self.v[k][name]
                m *= self.beta1
                m += (1.0 - self.beta1) * grad
                v *= self.beta2
                v += (1.0 - self.beta2) * grad * grad
                getattr(net, name).__iadd__(lr * (m / c1) / (np.sqrt(v / c2) + self.eps))
            net.enforce_mask()


class PlainAscent:
    def step(self, model: MsmModel, grads: list[ParamGrad], lr: float, skip=()) -> None:
        for net, g in zip(model.networks, grads):
            for name, grad in g.items():
                if name not in skip:
                    getattr(net, name).__iadd__(lr * grad)
            net.enforce_mask()


def make_optimizer(model: MsmModel, config: TrainConfig):
    if config.optimizer == "adam":
        return Adam(model, config.beta1, config.beta2, config.adam_eps)
    return PlainAscent()


def _forward_all(model: MsmModel, windows: np.ndarray) -> list[tuple]:
    if model.spec.shared_band is not None:
        raise ContractViolation("piecewise ground-truth models cannot be trained")
    return [net.forward_cache(windows) for net in model.networks]


def _log_trans_from_caches(model: MsmModel, caches, targets) -> np.ndarray:
    out = np.empty((targets.shape[0], model.K))
    for k, (net, (_, _, mean)) in enumerate(zip(model.networks, caches)):
        resid = targets - mean
        out[:, k] = -0.5 * np.sum(LOG_2PI + net.log_var + resid * resid * np.exp(-net.log_var), axis=1)
    return out


def network_gradients(model: MsmModel, windows, targets, gamma, caches=None) -> tuple[float, list[ParamGrad]]:
    """Sum over windows and states of ``gamma * log p(x_t | window, k)`` and its gradients.

    ``windows (n, d*M)``, ``targets (n, d)``, ``gamma (n, K)`` hold the
    transition steps ``t > M`` of all sequences, flattened.
    """
    caches = caches or _forward_all(model, windows)
    total = 0.0
    grads = []
    for k, net in enumerate(model.networks):
        val, g = net.grad_from_cache(windows, caches[k], targets, gamma[:, k])
        total += val
        grads.append(g)
    return total, grads


def _exact_log_var(model: MsmModel, caches, targets, gamma) -> None:
    """Closed-form transition variances given the current means."""
    for k, net in enumerate(model.networks):
        tot = gamma[:, k].sum()
        if tot <= 0:
            continue
        var = gamma[:, k] @ (targets - caches[k][2]) ** 2 / tot
        net.log_var = np.log(np.maximum(var, VAR_FLOOR))


def _gem_step(model, windows, targets, gamma, n_seq, optimizer, lr, variance_update, caches=None) -> None:
    caches = caches or _forward_all(model, windows)
    if variance_update == "exact":
        # conditional maximization of Q in the variances, then ascent in the means
        _exact_log_var(model, caches, targets, gamma)
    _, grads = network_gradients(model, windows, targets, gamma, caches)
    for k, g in enumerate(grads):
        for name, arr in g.items():
            if not np.all(np.isfinite(arr)):
                raise NumericFailure(f"non-finite gradient in state {k}, block {name}")
    grads = [g.scale(1.0 / n_seq) for g in grads]
    skip = ("log_var",) if variance_update == "exact" else ()
    optimizer.step(model, grads, lr, skip=skip)
    if variance_update == "gradient":
        for net in model.networks:
            np.maximum(net.log_var, LOG_VAR_FLOOR, out=net.log_var)


def gem_gradient_step(
    model: MsmModel,
    batch,
    summaries,
    optimizer_state=None,
    lr: float = 7e-3,
    *,
    variance_update: str = "gradient",
) -> MsmModel:
    """One posterior-weighted ascent step on every transition network (in place).

    The gradient is averaged over the sequences in ``batch``. ``summaries``
    must come from the current parameters.
    """
    s = _stack(summaries)
    X = batch.X if isinstance(batch, SequenceBatch) else np.asarray(batch, dtype=np.float64)
    windows, targets, _ = make_windows(X, model.spec.M)
    N, Tm, dM = windows.shape
    if s.gamma.shape[:2] != (N, Tm + 1):
        raise ContractViolation("posterior summaries do not match the batch")
    opt = optimizer_state if optimizer_state is not None else PlainAscent()
    _gem_step(
        model,
        windows.reshape(-1, dM),
        targets.reshape(N * Tm, -1),
        s.gamma[:, 1:].reshape(N * Tm, -1),
        N,
        opt,
        lr,
        variance_update,
    )
    return model


# -- initialisation and training loop ---------------------------------------

def _weighted_design(arrays, gamma):
    windows, targets, _ = arrays
    N, Tm, dM = windows.shape
    Z = np.concatenate([windows.reshape(-1, dM), np.ones((N * Tm, 1))], axis=1)
    return Z, targets.reshape(-1, targets.shape[-1]), gamma[:, 1:].reshape(-1, gamma.shape[-1])


def linear_switching_fit(
    rng: Rng, arrays, K: int, iters: int = 30, self_prob: float = 0.8
) -> tuple[PosteriorSummary, ChainParams]:
    """EM for a switching linear autoregression, used to seed the regime posteriors.

    Every regime's mean is affine in the window, so the M-step is an exact
    weighted least-squares solve. Starts from random responsibilities.
    """
    windows, targets, init = arrays
    N, Tm, dM = windows.shape
    d = targets.shape[-1]
    Z = np.concatenate([windows.reshape(-1, dM), np.ones((N * Tm, 1))], axis=1)
    Y = targets.reshape(-1, d)
    gamma = rng.gen.dirichlet(np.ones(K), size=N * Tm)
    chain = _sticky_chain(K, self_prob)
    ridge = 1e-6 * np.eye(dM + 1)
    log_first = np.tile(chain.log_pi, (N, 1))
    summary = None
    for _ in range(iters):
        log_trans = np.empty((N * Tm, K))
        for k in range(K):
            w = gamma[:, k]
            Zw = Z * w[:, None]
            coef = np.linalg.solve(Z.T @ Zw + ridge, Zw.T @ Y)
            resid = Y - Z @ coef
            var = np.maximum(w @ resid**2 / max(w.sum(), 1e-300), VAR_FLOOR)
            log_trans[:, k] = -0.5 * (np.sum(LOG_2PI + np.log(var)) + (resid**2 / var).sum(axis=1))
        summary = posteriors_from_terms(log_first, log_trans.reshape(N, Tm, K), chain.log_A)
        chain = m_step_discrete(summary)
        log_first = np.tile(chain.log_pi, (N, 1))
        gamma = summary.gamma[:, 1:].reshape(-1, K)
    return summary, chain


def mask_fit_scores(arrays, gamma, masks) -> np.ndarray:
    """``S[a, k]``: weighted log-likelihood of regime ``a``'s samples under a
    linear model restricted to mask ``k`` (per-output least squares)."""
    Z, Y, g = _weighted_design(arrays, gamma)
    K, d = masks.shape[0], Y.shape[1]
    dM = Z.shape[1] - 1
    S = np.zeros((gamma.shape[-1], K))
    for a in range(gamma.shape[-1]):
        w = g[:, a]
        n = max(w.sum(), 1e-300)
        Zw = Z * w[:, None]
        G, B = Z.T @ Zw + 1e-6 * np.eye(dM + 1), Zw.T @ Y
        for k in range(K):
            for j in range(d):
                idx = np.append(np.flatnonzero(masks[k, j]), dM)
                resid = Y[:, j] - Z[:, idx] @ np.linalg.solve(G[np.ix_(idx, idx)], B[idx, j])
                var = max(w @ resid**2 / n, VAR_FLOOR)
                S[a, k] -= 0.5 * n * (LOG_2PI + np.log(var) + 1.0)
    return S


def align_to_masks(summary: PosteriorSummary, arrays, masks) -> PosteriorSummary:
    """Relabel warm-start regimes so regime ``k`` is the one best explained by ``masks[k]``."""
    from scipy.optimize import linear_sum_assignment

    S = mask_fit_scores(arrays, summary.gamma, masks)
    _, order = linear_sum_assignment(-S.T)  # order[k] = warm regime given mask k
    return PosteriorSummary(summary.log_lik, summary.gamma[..., order], summary.xi[..., order, :][..., order])


def _best_linear_start(rng: Rng, arrays, K: int, config: TrainConfig, masks=None) -> PosteriorSummary:
    best = None
    for i in range(config.linear_restarts):
        summary, _ = linear_switching_fit(rng.child(i), arrays, K, config.linear_iters, config.init_self_prob)
        score = float(np.mean(summary.log_lik))
        logger.debug("linear start %d: mean log-likelihood %.4f", i, score)
        if best is None or score > best[0]:
            best = (score, summary)
    return best[1] if masks is None else align_to_masks(best[1], arrays, masks)


def _sticky_chain(K: int, self_prob: float) -> ChainParams:
    if K == 1:
        return ChainParams.from_probs([1.0], [[1.0]])
    A = np.full((K, K), (1.0 - self_prob) / (K - 1))
    np.fill_diagonal(A, self_prob)
    return ChainParams.from_probs(np.full(K, 1.0 / K), A)


def init_model(
    rng: Rng, spec: ModelSpec, X: np.ndarray, config: TrainConfig, masks=None, warm: PosteriorSummary | None = None
) -> MsmModel:
    """Random starting point for GEM; ``masks`` is ``None`` (dense) or ``(K, d, d*M)``.

    With ``warm`` posteriors the initial Gaussians are fitted to them, and
    the chain is re-estimated from them.
    """
    N, T, d = X.shape
    K, M = spec.K, spec.M
    net_rng, init_rng = rng.spawn(2)
    windows, targets, init = make_windows(X, M)
    target_lv = np.log(np.maximum(targets.reshape(-1, d).var(axis=0), VAR_FLOOR))
    networks = [
        init_random(
            r,
            spec,
            None if masks is None else masks[k],
            config.init_weight_scale,
            output_scale=config.init_output_scale,
            bias_scale=config.init_bias_scale,
            log_var=target_lv,
        )
        for k, r in enumerate(net_rng.spawn(K))
    ]
    pick = init_rng.choice(N, size=K, replace=N < K)
    init_var = np.maximum(init.var(axis=0), VAR_FLOOR)
    initial = InitialEmission(
        init[pick] + init_rng.normal(size=(K, d * M)) * np.sqrt(init_var) * 0.1,
        np.tile(np.log(init_var), (K, 1)),
    )
    chain = _sticky_chain(K, config.init_self_prob)
    if warm is not None:
        chain = m_step_discrete(warm)
        initial = _initial_from_arrays(warm, init, initial)
    return MsmModel(spec, chain, initial, networks, {"seed": rng.seed, "kind": "estimate"})


class _Plateau:
    def __init__(self, config: TrainConfig):
        self.cfg = config
        self.lr = config.learning_rate
        self.drops = 0
        self.since = 0
        self.history: list[float] = []

    def update(self, ll: float) -> bool:
        """Record an epoch; returns True when training should stop."""
        self.history.append(ll)
        self.since += 1
        p = self.cfg.plateau_patience
        if self.since <= p or len(self.history) <= p:
            return False
        ref = max(self.history[: -p])
        gain = max(self.history[-p:]) - ref
        if gain / max(abs(ref), 1e-12) >= self.cfg.plateau_tol:
            return False
        if self.drops >= self.cfg.max_plateau_drops:
            return True
        self.drops += 1
        self.lr *= self.cfg.plateau_factor
        self.since = 0
        logger.info("likelihood plateau: learning rate -> %g", self.lr)
        return False


def _train_one(model: MsmModel, arrays, config: TrainConfig, rng: Rng, on_epoch=None, warm_gamma=None):
    """GEM epochs, preceded by ``warmup_epochs`` that fit the networks to
    fixed ``warm_gamma`` posteriors when those are given."""
    windows, targets, init = arrays
    N, Tm, dM = windows.shape
    K = model.K
    optimizer = make_optimizer(model, config)
    sched = _Plateau(config)
    lrs, warm_hist = [], []
    bs = N if config.full_batch else min(config.batch_size, N)
    warmup = config.warmup_epochs if warm_gamma is not None else 0
    for epoch in range(warmup + config.max_epochs):
        warming = epoch < warmup
        order = np.arange(N) if config.full_batch else rng.permutation(N)
        total = 0.0
        lr = sched.lr
        for start in range(0, N, bs):
            idx = order[start : start + bs]
            w = windows[idx].reshape(-1, dM)
            y = targets[idx].reshape(len(idx) * Tm, -1)
            caches = _forward_all(model, w)
            log_trans = _log_trans_from_caches(model, caches, y).reshape(len(idx), Tm, K)
            log_first = model.chain.log_pi + model.initial.log_density(init[idx])
            summary = posteriors_from_terms(log_first, log_trans, model.chain.log_A)
            if not np.all(np.isfinite(summary.log_lik)):
                raise NumericFailure(f"non-finite log-likelihood in epoch {epoch}")
            total += float(summary.log_lik.sum())
            if warming:
                gamma = warm_gamma[idx, 1:].reshape(-1, K)
            else:
                model.chain = m_step_discrete(summary)
                model.initial = _initial_from_arrays(summary, init[idx], model.initial)
                gamma = summary.gamma[:, 1:].reshape(-1, K)
            _gem_step(model, w, y, gamma, len(idx), optimizer, lr, config.variance_update, caches)
        if warming:
            warm_hist.append(total / N)
            continue
        lrs.append(lr)
        stop = sched.update(total / N)
        if on_epoch is not None:
            on_epoch(epoch - warmup, total / N, lr)
        if stop:
            break
    return sched.history, lrs, sched.lr, warm_hist


def _initial_from_arrays(summary, init, previous):
    w = summary.gamma[:, 0]
    tot = w.sum(axis=0)
    mean, log_var = previous.mean.copy(), previous.log_var.copy()
    for k in range(w.shape[1]):
        if tot[k] <= 0:
            continue
        mu = w[:, k] @ init / tot[k]
        mean[k] = mu
        log_var[k] = np.log(np.maximum(w[:, k] @ (init - mu) ** 2 / tot[k], VAR_FLOOR))
    return InitialEmission(mean, log_var)


def mean_loglik(model: MsmModel, X, chunk: int = 1000) -> float:
    """Average per-sequence log-likelihood over a dataset."""
    from .inference import log_likelihood

    X = np.asarray(X, dtype=np.float64)
    total = 0.0
    for s in range(0, X.shape[0], chunk):
        total += float(np.sum(log_likelihood(model, X[s : s + chunk])))
    return total / X.shape[0]


def fit(dataset, spec: ModelSpec, config: TrainConfig | None = None, masks=None, on_epoch=None):
    """Train with random restarts and return ``(best_model, TrainReport)``.

    ``masks`` fixes each state's input structure ``(K, d, d*M)``; ``None``
    trains unrestricted (dense-masked) networks.
    """
    config = config or TrainConfig()
    X = dataset.X if isinstance(dataset, SequenceBatch) else np.asarray(dataset, dtype=np.float64)
    if X.ndim != 3:
        raise ContractViolation(f"dataset must be (N, T, d), got {X.shape}")
    if X.shape[2] != spec.d:
        raise ContractViolation(f"dataset dimension {X.shape[2]} != spec.d={spec.d}")
    check_T(spec, X.shape[1])
    problems = spec.problems()
    if problems:
        raise ConfigError("; ".join(problems))
    if masks is not None:
        masks = np.asarray(masks, dtype=bool)
        if masks.shape != (spec.K, spec.d, spec.input_dim):
            raise ContractViolation(f"masks must have shape {(spec.K, spec.d, spec.input_dim)}")

    t0 = time.perf_counter()
    arrays = make_windows(X, spec.M)
    master = Rng(config.seed)
    best = None
    histories, finals = [], []
    for r in range(config.n_restarts):
        rng = master.child(r)
        warm = None
        if config.init_method == "linear" and spec.K > 1:
            warm = _best_linear_start(rng.child(2), arrays, spec.K, config, masks)
        model = init_model(rng.child(0), spec, X, config, masks, warm)
        hist, lrs, final_lr, warm_hist = _train_one(
            model, arrays, config, rng.child(1), on_epoch, None if warm is None else warm.gamma
        )
        score = mean_loglik(model, X)
        histories.append(hist)
        finals.append(score)
        logger.info("restart %d: final mean log-likelihood %.6f", r, score)
        if best is None or score > finals[best[0]]:
            best = (r, model, hist, lrs, final_lr, warm_hist)
    r, model, hist, lrs, final_lr, warm_hist = best
    model.meta.update({"seed": config.seed, "restart": r, "train_config": config.to_dict()})
    report = TrainReport(
        epoch_loglik=list(hist),
        epoch_lr=list(lrs),
        chosen_restart=r,
        restart_loglik=finals,
        final_lr=final_lr,
        wall_clock=time.perf_counter() - t0,
        restart_histories=histories,
        warmup_loglik=list(warm_hist),
    )
    return model, report
