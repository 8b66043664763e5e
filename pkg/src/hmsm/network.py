"""Two-layer transition mean networks with hand-written gradients.

A network maps a conditioning window ``(x_{t-1}, ..., x_{t-M})`` flattened
most-recent-first (length ``d*M``) to the mean of ``x_t``. In the locally
connected layout each output coordinate owns a block of hidden units that
only read the inputs allowed by its row of the parent mask, so structural
zeros in the input Jacobian are exact.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .exceptions import ContractViolation
from .numerics import LOG_2PI, Rng

ACTIVATIONS = ("cosine", "relu", "linear")
PARAM_NAMES = ("W1", "b1", "W2", "b2", "log_var")

_JAC_CHUNK = 4096


def _act(kind: str, pre: np.ndarray) -> np.ndarray:
    if kind == "cosine":
        return np.cos(pre)
    if kind == "relu":
        return np.maximum(pre, 0.0)
    return pre


def _act_deriv(kind: str, pre: np.ndarray) -> np.ndarray:
    if kind == "cosine":
        return -np.sin(pre)
    if kind == "relu":
        # subgradient 0 at the kink
        return (pre > 0.0).astype(np.float64)
    return np.ones_like(pre)


@dataclass
class ParamGrad:
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray
    log_var: np.ndarray

    def __iadd__(self, other: "ParamGrad") -> "ParamGrad":
        for name in PARAM_NAMES:
            getattr(self, name).__iadd__(getattr(other, name))
        return self

    def scale(self, c: float) -> "ParamGrad":
        return ParamGrad(*(getattr(self, n) * c for n in PARAM_NAMES))

    def items(self):
        return ((n, getattr(self, n)) for n in PARAM_NAMES)

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(a)) for _, a in self.items())


@dataclass
class TransitionNetwork:
    """Mean function ``m(., k)`` plus a constant diagonal log-variance.

    ``mask`` has shape ``(d, d*M)``; ``mask[j, i] = 1`` allows output ``j``
    to read input ``i``. ``None`` means unrestricted.
    """

    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray
    log_var: np.ndarray
    activation: str = "cosine"
    mask: np.ndarray | None = None
    locally_connected: bool = True
    w1_mask: np.ndarray = field(init=False, repr=False)
    w2_mask: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ContractViolation(f"unknown activation {self.activation!r}")
        for name in PARAM_NAMES:
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        h, n_in = self.W1.shape
        d = self.W2.shape[0]
        if self.W2.shape != (d, h) or self.b1.shape != (h,) or self.b2.shape != (d,):
            raise ContractViolation("inconsistent network parameter shapes")
        if self.log_var.shape != (d,):
            raise ContractViolation("log_var must have one entry per output")
        if self.mask is not None:
            self.mask = np.asarray(self.mask, dtype=bool)
            if self.mask.shape != (d, n_in):
                raise ContractViolation(f"mask shape {self.mask.shape} != {(d, n_in)}")
        self.w1_mask, self.w2_mask = self._structural_masks()

    def _structural_masks(self) -> tuple[np.ndarray, np.ndarray]:
        h, n_in = self.W1.shape
        d = self.d
        row_mask = np.ones((d, n_in), dtype=bool) if self.mask is None else self.mask
        if not self.locally_connected:
            w1 = np.ones((h, n_in), dtype=bool)
            if self.mask is not None:
                # a dense hidden layer can only honour inputs nobody reads
                w1 &= row_mask.any(axis=0)[None, :]
            return w1, np.ones((d, h), dtype=bool)
        if h % d:
            raise ContractViolation("locally connected hidden width must be a multiple of d")
        block = np.repeat(np.arange(d), h // d)
        w1 = row_mask[block]
        w2 = block[None, :] == np.arange(d)[:, None]
        return w1, w2

    @property
    def d(self) -> int:
        return self.W2.shape[0]

    @property
    def input_dim(self) -> int:
        return self.W1.shape[1]

    @property
    def hidden(self) -> int:
        return self.W1.shape[0]

    def copy(self) -> "TransitionNetwork":
        return TransitionNetwork(
            *(getattr(self, n).copy() for n in PARAM_NAMES),
            activation=self.activation,
            mask=None if self.mask is None else self.mask.copy(),
            locally_connected=self.locally_connected,
        )

    def params(self) -> dict[str, np.ndarray]:
        return {n: getattr(self, n) for n in PARAM_NAMES}

    def zero_grad(self) -> ParamGrad:
        return ParamGrad(*(np.zeros_like(getattr(self, n)) for n in PARAM_NAMES))

    def enforce_mask(self) -> None:
        self.W1 *= self.w1_mask
        self.W2 *= self.w2_mask

    def mask_violations(self) -> list[str]:
        out = []
        if np.any(self.W1[~self.w1_mask] != 0.0):
            out.append("W1 has nonzero entries outside the parent mask")
        if np.any(self.W2[~self.w2_mask] != 0.0):
            out.append("W2 has nonzero entries outside the block structure")
        return out

    def _check_input(self, x) -> tuple[np.ndarray, bool]:
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        x2 = x.reshape(1, -1) if single else x
        if x2.ndim != 2 or x2.shape[1] != self.input_dim:
            raise ContractViolation(
                f"conditioning window must have length {self.input_dim}, got shape {x.shape}"
            )
        return x2, single

    def forward(self, x_cond) -> np.ndarray:
        """Mean of ``x_t`` given one window ``(d*M,)`` or a batch ``(n, d*M)``."""
        x, single = self._check_input(x_cond)
        pre = x @ self.W1.T + self.b1
        out = _act(self.activation, pre) @ self.W2.T + self.b2
        return out[0] if single else out

    __call__ = forward

    def forward_cache(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """``(pre, hidden, mean)`` for a batch, reusable by ``grad_from_cache``."""
        pre = x @ self.W1.T + self.b1
        hid = _act(self.activation, pre)
        return pre, hid, hid @ self.W2.T + self.b2

    def weighted_loglik_grad(self, x_cond, x_t, weight) -> tuple[float, ParamGrad]:
        """Weighted Gaussian log-likelihood and its parameter gradient.

        Accepts a single sample or a batch with one weight per row; batch
        results are summed.
        """
        x, single = self._check_input(x_cond)
        y = np.asarray(x_t, dtype=np.float64).reshape(x.shape[0], -1)
        if y.shape[1] != self.d:
            raise ContractViolation(f"x_t must have length {self.d}")
        w = np.broadcast_to(np.asarray(weight, dtype=np.float64).reshape(-1), (x.shape[0],))
        return self.grad_from_cache(x, self.forward_cache(x), y, w)

    def grad_from_cache(self, x, cache, y, w) -> tuple[float, ParamGrad]:
        pre, hid, mean = cache
        prec = np.exp(-self.log_var)
        resid = y - mean
        sq = resid * resid * prec
        wcol = w[:, None]
        value = float(-0.5 * (np.sum(w) * np.sum(LOG_2PI + self.log_var) + np.sum(wcol * sq)))

        g_mean = wcol * resid * prec
        g_W2 = (g_mean.T @ hid) * self.w2_mask
        g_b2 = g_mean.sum(axis=0)
        g_pre = (g_mean @ self.W2) * _act_deriv(self.activation, pre)
        g_W1 = (g_pre.T @ x) * self.w1_mask
        g_b1 = g_pre.sum(axis=0)
        g_lv = 0.5 * (w @ sq - np.sum(w))
        return value, ParamGrad(g_W1, g_b1, g_W2, g_b2, g_lv)

    def input_jacobian(self, x_cond) -> np.ndarray:
        """``J[j, i] = d m_j / d x_cond_i``; batched input gives ``(n, d, d*M)``."""
        x, single = self._check_input(x_cond)
        out = np.empty((x.shape[0], self.d, self.input_dim))
        for s in range(0, x.shape[0], _JAC_CHUNK):
            xs = x[s : s + _JAC_CHUNK]
            deriv = _act_deriv(self.activation, xs @ self.W1.T + self.b1)
            out[s : s + _JAC_CHUNK] = (self.W2[None, :, :] * deriv[:, None, :]) @ self.W1
        return out[0] if single else out

    def mean_abs_jacobian(self, x_cond) -> np.ndarray:
        """Elementwise mean of ``|J|`` over a batch of windows, without storing all of them."""
        x, _ = self._check_input(x_cond)
        acc = np.zeros((self.d, self.input_dim))
        for s in range(0, x.shape[0], _JAC_CHUNK):
            acc += np.abs(self.input_jacobian(x[s : s + _JAC_CHUNK])).sum(axis=0)
        return acc / max(x.shape[0], 1)


def init_random(
    rng: Rng,
    spec,
    graph_row_masks=None,
    weight_scale: float = 1.0,
    *,
    output_scale: float | None = None,
    bias_scale: float = 0.0,
    log_var: float | np.ndarray = 0.0,
) -> TransitionNetwork:
    """Sample a network for ``spec`` (anything with ``d``, ``M``,
    ``hidden_per_output``, ``activation`` and ``locally_connected``).

    Unmasked first-layer weights are i.i.d. ``N(0, weight_scale^2)``; output
    weights use ``output_scale`` (defaults to ``weight_scale``). Biases are
    zero unless ``bias_scale > 0``. Randomness consumed does not depend on
    the mask.
    """
    d, n_in = spec.d, spec.d * spec.M
    h = spec.hidden_per_output * d if spec.locally_connected else spec.hidden_per_output
    if graph_row_masks is not None:
        graph_row_masks = np.asarray(graph_row_masks, dtype=bool)
        if graph_row_masks.shape != (d, n_in):
            raise ContractViolation(f"mask shape {graph_row_masks.shape} != {(d, n_in)}")
    out_scale = weight_scale if output_scale is None else output_scale
    W1 = rng.normal(size=(h, n_in)) * weight_scale
    W2 = rng.normal(size=(d, h)) * out_scale
    b1 = rng.normal(size=h) * bias_scale
    b2 = rng.normal(size=d) * bias_scale
    net = TransitionNetwork(
        W1,
        b1,
        W2,
        b2,
        np.broadcast_to(np.asarray(log_var, dtype=np.float64), (d,)).copy(),
        activation=spec.activation,
        mask=graph_row_masks,
        locally_connected=spec.locally_connected,
    )
    net.enforce_mask()
    return net

