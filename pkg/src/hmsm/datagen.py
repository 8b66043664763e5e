"""Synthetic ground truth: regime graphs, random transition networks and
simulated sequences."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import SequenceBatch
from .exceptions import ConfigError, ContractViolation
from .model import ChainParams, InitialEmission, ModelSpec, MsmModel, check_T
from .network import init_random
from .numerics import Rng

VARIANTS = ("zero", "nonzero", "relu")


@dataclass
class RegimeGraph:
    """``edges[k, j, i, lag-1]`` is True when ``x^(i)_{t-lag}`` is a parent of
    ``x^(j)_t`` in regime ``k``."""

    edges: np.ndarray

    def __post_init__(self):
        self.edges = np.asarray(self.edges).astype(bool)
        if self.edges.ndim != 4 or self.edges.shape[1] != self.edges.shape[2]:
            raise ContractViolation(f"graph must have shape (K, d, d, M), got {self.edges.shape}")

    @property
    def K(self) -> int:
        return self.edges.shape[0]

    @property
    def d(self) -> int:
        return self.edges.shape[1]

    @property
    def M(self) -> int:
        return self.edges.shape[3]

    def row_masks(self, k: int) -> np.ndarray:
        """Network input mask ``(d, d*M)`` for regime ``k`` (inputs most-recent-first)."""
        return mask_from_lag_graph(self.edges[k])

    @classmethod
    def from_masks(cls, masks) -> "RegimeGraph":
        masks = np.asarray(masks)
        return cls(np.stack([lag_graph_from_mask(m) for m in masks]))

    def parent_counts(self) -> np.ndarray:
        return self.edges.sum(axis=(2, 3))

    def to_json(self) -> str:
        return json.dumps(self.edges.astype(int).tolist())

    @classmethod
    def from_json(cls, text: str) -> "RegimeGraph":
        return cls(np.array(json.loads(text), dtype=int))

    def save(self, path) -> Path:
        path = Path(path)
        path.write_text(self.to_json())
        return path

    @classmethod
    def load(cls, path) -> "RegimeGraph":
        return cls.from_json(Path(path).read_text())

    def __eq__(self, other):
        return isinstance(other, RegimeGraph) and np.array_equal(self.edges, other.edges)


def mask_from_lag_graph(g: np.ndarray) -> np.ndarray:
    """``(d, d, M)`` lag graph to ``(d, d*M)`` input mask."""
    d, _, M = g.shape
    return np.transpose(g, (0, 2, 1)).reshape(d, d * M)


def lag_graph_from_mask(mask: np.ndarray) -> np.ndarray:
    d, dM = mask.shape
    return np.transpose(np.asarray(mask).reshape(d, dM // d, d), (0, 2, 1))


@dataclass
class Sparsity:
    """How many lagged parents each variable gets in each regime.

    Exactly one of ``fraction`` / ``max_parents`` is used. With ``fraction``
    every candidate parent is kept independently with that probability; with
    ``max_parents`` the parent count is uniform on
    ``{min_parents, ..., max_parents}`` (or fixed when ``exact``). Rows left
    empty are topped up to ``min_parents``.
    """

    fraction: float | None = None
    max_parents: int | None = None
    exact: bool = False
    min_parents: int = 1

    def __post_init__(self):
        if (self.fraction is None) == (self.max_parents is None):
            raise ConfigError("give exactly one of fraction or max_parents")
        if self.fraction is not None and not 0.0 <= self.fraction <= 1.0:
            raise ConfigError(f"fraction must lie in [0, 1], got {self.fraction}")

    def expected_parents(self, n_candidates: int) -> float:
        """Mean parent count per (regime, variable) the sampler targets."""
        if self.fraction is not None:
            p, n, floor = self.fraction, n_candidates, self.min_parents
            # binomial count, raised to `floor` when it falls short
            from math import comb

            mean = 0.0
            for c in range(n + 1):
                mean += max(c, floor) * comb(n, c) * p**c * (1 - p) ** (n - c)
            return mean
        cap = self.max_parents
        if self.exact:
            return float(max(cap, self.min_parents))
        lo = min(self.min_parents, cap)
        return (lo + cap) / 2.0

    @classmethod
    def from_dict(cls, data: dict) -> "Sparsity":
        return cls(**data)


def sample_graph(rng: Rng, d: int, M: int, K: int, sparsity: Sparsity, *, shared: bool = False) -> RegimeGraph:
    """Random regime graph; ``shared=True`` copies regime 0's graph to all regimes."""
    n = d * M
    if sparsity.max_parents is not None and sparsity.max_parents > n:
        raise ConfigError(f"max_parents={sparsity.max_parents} exceeds the {n} candidate parents")
    if sparsity.min_parents > n:
        raise ConfigError(f"min_parents={sparsity.min_parents} exceeds the {n} candidate parents")
    masks = np.zeros((K, d, n), dtype=bool)
    for k in range(1 if shared else K):
        for j in range(d):
            if sparsity.fraction is not None:
                row = rng.uniform(size=n) < sparsity.fraction
                missing = sparsity.min_parents - int(row.sum())
                if missing > 0:
                    row[rng.choice(np.flatnonzero(~row), size=missing, replace=False)] = True
            else:
                cap = sparsity.max_parents
                lo = min(sparsity.min_parents, cap)
                count = max(cap, sparsity.min_parents) if sparsity.exact else int(rng.integers(lo, cap + 1))
                row = np.zeros(n, dtype=bool)
                row[rng.choice(n, size=count, replace=False)] = True
            masks[k, j] = row
    if shared:
        masks[1:] = masks[0]
    return RegimeGraph.from_masks(masks)


@dataclass
class GenProfile:
    """Recipe for a synthetic ground truth.

    Network weights are not described beyond architecture in the source
    experiments, so their scales are explicit knobs here.
    """

    variant: str = "zero"
    sparsity: Sparsity = field(default_factory=lambda: Sparsity(max_parents=5))
    transition_noise_std: float = 0.05
    init_mean_std: float = 0.7
    init_std: float = 0.7
    self_stay_prob: float = 0.9
    hidden_per_output: int = 16
    weight_scale: float = 1.0
    output_scale: float | None = None
    bias_scale: float = 1.0
    shared_band: tuple[float, float] = (3.0, 5.0)
    shared_graph: bool | None = None
    deterministic: bool = False
    # ReLU truths are unbounded; their Lipschitz bound is capped at relu_gain / sqrt(M)
    relu_gain: float | None = 0.9

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if not 0.0 <= self.self_stay_prob <= 1.0:
            raise ConfigError("self_stay_prob must lie in [0, 1]")
        if self.transition_noise_std <= 0 and not self.deterministic:
            raise ConfigError("transition_noise_std must be positive unless deterministic")
        if isinstance(self.sparsity, dict):
            self.sparsity = Sparsity.from_dict(self.sparsity)
        self.shared_band = tuple(self.shared_band)

    @property
    def activation(self) -> str:
        return "relu" if self.variant == "relu" else "cosine"

    @property
    def uses_shared_graph(self) -> bool:
        # ReLU truths share one causal structure across regimes
        return self.variant == "relu" if self.shared_graph is None else self.shared_graph

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["shared_band"] = list(self.shared_band)
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "GenProfile":
        return cls(**data)


def cyclic_chain(K: int, stay: float) -> ChainParams:
    """Uniform start; stay with ``stay``, otherwise move to the next state (wrapping)."""
    A = np.zeros((K, K))
    for k in range(K):
        A[k, k] += stay
        A[k, (k + 1) % K] += 1.0 - stay
    return ChainParams.from_probs(np.full(K, 1.0 / K), A)


def cap_lipschitz(net, bound: float) -> float:
    """Scale the output layer so ``||W2|| ||W1|| <= bound`` (spectral norms).

    For ReLU networks that product bounds the Lipschitz constant, so a bound
    below ``1 / sqrt(M)`` keeps simulated trajectories bounded. Returns the
    factor applied.
    """
    lip = np.linalg.norm(net.W2, 2) * np.linalg.norm(net.W1, 2)
    factor = min(1.0, bound / lip) if lip > 0 else 1.0
    net.W2 *= factor
    return factor


def sample_ground_truth(rng: Rng, spec: ModelSpec, profile: GenProfile) -> tuple[MsmModel, RegimeGraph]:
    """Sample a complete ground-truth model and its regime graph."""
    spec = dataclasses.replace(
        spec,
        activation=profile.activation,
        hidden_per_output=profile.hidden_per_output,
        locally_connected=True,
        shared_band=profile.shared_band if profile.variant == "nonzero" else None,
    )
    problems = spec.problems()
    if problems:
        raise ConfigError("; ".join(problems))
    g_rng, i_rng, n_rng = rng.spawn(3)
    graph = sample_graph(g_rng, spec.d, spec.M, spec.K, profile.sparsity, shared=profile.uses_shared_graph)
    chain = cyclic_chain(spec.K, profile.self_stay_prob)
    dM = spec.input_dim
    initial = InitialEmission(
        i_rng.normal(size=(spec.K0, dM)) * profile.init_mean_std,
        np.full((spec.K0, dM), 2.0 * np.log(profile.init_std)),
    )
    noise_lv = 2.0 * np.log(profile.transition_noise_std) if profile.transition_noise_std > 0 else 0.0
    out_scale = profile.output_scale
    if out_scale is None:
        out_scale = profile.weight_scale / np.sqrt(profile.hidden_per_output)
    networks = [
        init_random(
            net_rng,
            spec,
            graph.row_masks(k),
            profile.weight_scale,
            output_scale=out_scale,
            bias_scale=profile.bias_scale,
            log_var=noise_lv,
        )
        for k, net_rng in enumerate(n_rng.spawn(spec.K))
    ]
    if spec.activation == "relu" and profile.relu_gain is not None:
        for net in networks:
            cap_lipschitz(net, profile.relu_gain / np.sqrt(spec.M))
    meta = {"seed": rng.seed, "profile": profile.to_dict(), "kind": "ground_truth"}
    return MsmModel(spec, chain, initial, networks, meta), graph


def sample_sequences(
    rng: Rng,
    model: MsmModel,
    N: int,
    T: int,
    *,
    deterministic: bool = False,
) -> tuple[SequenceBatch, np.ndarray]:
    """Simulate ``N`` sequences of length ``T``.

    Returns the batch and the regime paths ``(N, T-M+1)`` for ``s_M..s_T``.
    With ``deterministic=True`` all Gaussian noise is switched off (regimes
    are still sampled).
    """
    spec = model.spec
    check_T(spec, T)
    M, d, K = spec.M, spec.d, spec.K
    pi, A = model.chain.pi, model.chain.A
    cumA = np.cumsum(A, axis=1)

    states = np.empty((N, T - M + 1), dtype=np.int64)
    X = np.empty((N, T, d))
    states[:, 0] = rng.choice(spec.K0, size=N, p=pi / pi.sum())
    mu0 = model.initial.mean[states[:, 0]]
    if deterministic:
        X[:, :M] = mu0.reshape(N, M, d)
    else:
        sd0 = np.exp(0.5 * model.initial.log_var[states[:, 0]])
        X[:, :M] = (mu0 + sd0 * rng.normal(size=mu0.shape)).reshape(N, M, d)

    noise_sd = np.stack([np.exp(0.5 * net.log_var) for net in model.networks])
    rows = np.arange(N)
    for t in range(M, T):
        u = rng.uniform(size=N)
        prev = states[:, t - M]
        nxt = np.minimum((u[:, None] > cumA[prev]).sum(axis=1), K - 1)
        states[:, t - M + 1] = nxt
        window = X[:, t - M : t][:, ::-1].reshape(N, d * M)
        mean = model.transition_means(window)[rows, nxt]
        if deterministic:
            X[:, t] = mean
        else:
            X[:, t] = mean + noise_sd[nxt] * rng.normal(size=(N, d))
    meta = {"M": M, "K": K, "source": "synthetic"}
    return SequenceBatch(X, rng.seed, meta, states), states
