"""Log-domain kernels, diagonal Gaussian densities and seeded sampling."""

from __future__ import annotations

import math

import numpy as np

from .exceptions import ContractViolation

LOG_2PI = math.log(2.0 * math.pi)


class Rng:
    """Seeded counter-based random stream.

    Backed by the Philox counter-based bit generator, whose output for a given
    seed is identical across platforms. ``spawn`` derives independent child
    streams, which is how per-sequence and per-restart seeds are split.
    """

    def __init__(self, seed: int = 0):
        if seed < 0 or seed >= 2**64:
            raise ContractViolation(f"seed must fit in 64 unsigned bits, got {seed}")
        self.seed = int(seed)
        self._seq = np.random.SeedSequence(self.seed)
        self.gen = np.random.Generator(np.random.Philox(self._seq))

    @classmethod
    def _from_seq(cls, seq: np.random.SeedSequence, seed: int) -> "Rng":
        obj = cls.__new__(cls)
        obj.seed = seed
        obj._seq = seq
        obj.gen = np.random.Generator(np.random.Philox(seq))
        return obj

    def spawn(self, n: int) -> list["Rng"]:
        return [Rng._from_seq(s, self.seed) for s in self._seq.spawn(n)]

    def child(self, *key: int) -> "Rng":
        """Deterministic child stream addressed by an integer key path."""
        path = tuple(self._seq.spawn_key) + tuple(int(k) for k in key)
        seq = np.random.SeedSequence(self.seed, spawn_key=path)
        return Rng._from_seq(seq, self.seed)

    def normal(self, size=None, scale: float = 1.0) -> np.ndarray:
        return self.gen.normal(0.0, scale, size=size)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self.gen.uniform(low, high, size=size)

    def integers(self, low, high=None, size=None):
        return self.gen.integers(low, high, size=size)

    def choice(self, a, size=None, replace=True, p=None):
        return self.gen.choice(a, size=size, replace=replace, p=p)

    def permutation(self, n):
        return self.gen.permutation(n)


def _as_vec(v, name: str) -> np.ndarray:
    arr = np.asarray(v, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(1)
    return arr


def log_gaussian_diag(x, mean, log_var) -> np.ndarray | float:
    """Log-density of a diagonal Gaussian, summed over the last axis.

    Broadcasts over leading axes, so ``x`` of shape ``(n, d)`` against a
    ``(d,)`` mean gives ``n`` values.
    """
    x = _as_vec(x, "x")
    mean = _as_vec(mean, "mean")
    log_var = _as_vec(log_var, "log_var")
    if x.shape[-1] != mean.shape[-1] or x.shape[-1] != log_var.shape[-1]:
        raise ContractViolation(
            f"dimension mismatch: x {x.shape}, mean {mean.shape}, log_var {log_var.shape}"
        )
    if not np.all(np.isfinite(log_var)):
        raise ContractViolation("log_var must be finite")
    resid = x - mean
    out = -0.5 * np.sum(LOG_2PI + log_var + resid * resid * np.exp(-log_var), axis=-1)
    if np.ndim(out) == 0:
        return float(out)
    return out


def log_sum_exp(v, axis=None) -> np.ndarray | float:
    """Stable ``log(sum(exp(v)))`` using max subtraction.

    Slices that are entirely ``-inf`` reduce to ``-inf``.
    """
    v = np.asarray(v, dtype=np.float64)
    if v.size == 0:
        raise ContractViolation("log_sum_exp of an empty input")
    if axis is None:
        v = v.reshape(-1)
        axis = 0
    vmax = np.max(v, axis=axis, keepdims=True)
    safe = np.where(np.isfinite(vmax), vmax, 0.0)
    with np.errstate(divide="ignore"):
        out = np.log(np.sum(np.exp(v - safe), axis=axis, keepdims=True)) + safe
    out = np.squeeze(out, axis=axis)
    if np.ndim(out) == 0:
        return float(out)
    return out


def sample_gaussian_diag(rng: Rng, mean, log_var=None, *, deterministic: bool = False):
    """Draw ``mean + exp(log_var / 2) * z``.

    ``deterministic=True`` is the zero-variance limit and returns ``mean``
    unchanged without consuming randomness.
    """
    mean = np.asarray(mean, dtype=np.float64)
    if deterministic:
        return mean.copy()
    log_var = np.asarray(log_var, dtype=np.float64)
    if not (np.all(np.isfinite(mean)) and np.all(np.isfinite(log_var))):
        raise ContractViolation("sample_gaussian_diag requires finite mean and log_var")
    z = rng.normal(size=np.broadcast_shapes(mean.shape, log_var.shape))
    return mean + np.exp(0.5 * log_var) * z
