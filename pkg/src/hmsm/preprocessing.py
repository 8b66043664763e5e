"""Preprocessing of multichannel recordings into fixed-length epochs.

The fixed order is notch -> decimate -> standardize -> epoch. Each step is
available as a plain function on :class:`Recording` objects and as a
scikit-learn style transformer, so the chain can be assembled with
:func:`sklearn.pipeline.make_pipeline`. Every filter runs forward and
backward, so no phase shift is introduced.
"""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import signal
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.pipeline import Pipeline

from .data import SequenceBatch, save_batch
from .exceptions import ConfigError, ContractViolation

DEFAULT_NOTCH_Q = 35.0


@dataclass
class Recording:
    """``data`` is ``(channels, samples)``."""

    data: np.ndarray
    sample_rate_hz: float
    channels: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.data = np.atleast_2d(np.asarray(self.data, dtype=np.float64))
        if self.data.ndim != 2:
            raise ContractViolation(f"recording must be (channels, samples), got {self.data.shape}")
        if not self.sample_rate_hz > 0:
            raise ContractViolation(f"sample rate must be positive, got {self.sample_rate_hz}")
        if not np.all(np.isfinite(self.data)):
            raise ContractViolation("recording contains non-finite samples")
        if not self.channels:
            self.channels = [f"ch{i}" for i in range(self.data.shape[0])]
        if len(self.channels) != self.data.shape[0]:
            raise ContractViolation(f"{len(self.channels)} labels for {self.data.shape[0]} channels")

    @property
    def n_samples(self) -> int:
        return self.data.shape[1]

    @property
    def duration_s(self) -> float:
        return self.n_samples / self.sample_rate_hz

    def replace(self, data, sample_rate_hz=None) -> "Recording":
        rate = self.sample_rate_hz if sample_rate_hz is None else sample_rate_hz
        return Recording(data, rate, list(self.channels))

    def select(self, channels) -> "Recording":
        idx = [self.channels.index(c) if isinstance(c, str) else int(c) for c in channels]
        return Recording(self.data[idx], self.sample_rate_hz, [self.channels[i] for i in idx])


@dataclass(frozen=True)
class BiquadCoeffs:
    b0: float
    b1: float
    b2: float
    a1: float
    a2: float

    @property
    def b(self) -> np.ndarray:
        return np.array([self.b0, self.b1, self.b2])

    @property
    def a(self) -> np.ndarray:
        return np.array([1.0, self.a1, self.a2])

    def is_stable(self) -> bool:
        return bool(np.all(np.abs(np.roots(self.a)) < 1.0))

    def gain(self, freq_hz, sample_rate_hz) -> np.ndarray:
        """Magnitude response of a single pass."""
        _, h = signal.freqz(self.b, self.a, worN=np.atleast_1d(freq_hz), fs=sample_rate_hz)
        return np.abs(h)


def design_notch(f0_hz: float, sample_rate_hz: float, q: float = DEFAULT_NOTCH_Q) -> BiquadCoeffs:
    if not 0 < f0_hz < sample_rate_hz / 2:
        raise ConfigError(f"notch frequency {f0_hz} Hz must lie in (0, {sample_rate_hz / 2}) Hz")
    if q <= 0:
        raise ConfigError("notch quality factor must be positive")
    b, a = signal.iirnotch(f0_hz, q, fs=sample_rate_hz)
    b, a = b / a[0], a / a[0]
    coeffs = BiquadCoeffs(b[0], b[1], b[2], a[1], a[2])
    if not coeffs.is_stable():
        raise ConfigError("designed notch filter is unstable")
    return coeffs


def notch_filter(rec: Recording, f0_hz: float = 50.0, q: float = DEFAULT_NOTCH_Q) -> Recording:
    """Zero-phase second-order notch at ``f0_hz``."""
    c = design_notch(f0_hz, rec.sample_rate_hz, q)
    return rec.replace(signal.filtfilt(c.b, c.a, rec.data, axis=1))


def decimation_factor(sample_rate_hz: float, target_hz: float) -> int:
    ratio = sample_rate_hz / target_hz
    factor = int(round(ratio))
    if target_hz <= 0 or factor < 1 or abs(ratio - factor) > 1e-9:
        raise ConfigError(f"cannot decimate {sample_rate_hz} Hz to {target_hz} Hz by an integer factor")
    return factor


def decimate(rec: Recording, target_hz: float = 200.0, cutoff_ratio: float = 0.8, order: int = 4) -> Recording:
    """Zero-phase Butterworth low-pass at ``cutoff_ratio * target/2`` then subsample."""
    factor = decimation_factor(rec.sample_rate_hz, target_hz)
    if factor == 1:
        return rec.replace(rec.data.copy())
    sos = signal.butter(order, cutoff_ratio * target_hz / 2, btype="low", fs=rec.sample_rate_hz, output="sos")
    smooth = signal.sosfiltfilt(sos, rec.data, axis=1)
    return rec.replace(smooth[:, ::factor], sample_rate_hz=rec.sample_rate_hz / factor)


def channel_stats(data: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    return data.mean(axis=1), data.std(axis=1)


def apply_standardization(rec: Recording, mean, std) -> Recording:
    centered = rec.data - np.asarray(mean)[:, None]
    flat = np.asarray(std) == 0
    if np.any(flat):
        names = [rec.channels[i] for i in np.flatnonzero(flat)]
        warnings.warn(f"zero-variance channels set to 0: {names}", RuntimeWarning, stacklevel=2)
    scale = np.where(flat, 1.0, std)
    out = centered / scale[:, None]
    out[flat] = 0.0
    return rec.replace(out)


def standardize(rec: Recording) -> Recording:
    """Per-channel zero mean and unit (population) standard deviation."""
    return apply_standardization(rec, *channel_stats(rec.data))


def epoch_count(n_samples: int, sample_rate_hz: float, seconds: float) -> int:
    return n_samples // epoch_length(sample_rate_hz, seconds)


def epoch_length(sample_rate_hz: float, seconds: float) -> int:
    length = int(round(seconds * sample_rate_hz))
    if length < 1:
        raise ConfigError(f"epoch of {seconds} s at {sample_rate_hz} Hz is empty")
    return length


def epoch(rec: Recording, seconds: float = 2.0) -> SequenceBatch:
    """Non-overlapping epochs ``(N, T, channels)``; the trailing remainder is dropped."""
    T = epoch_length(rec.sample_rate_hz, seconds)
    n = rec.n_samples // T
    if n < 1:
        raise ContractViolation(f"recording of {rec.duration_s:.3f} s is shorter than one {seconds} s epoch")
    X = rec.data[:, : n * T].reshape(rec.data.shape[0], n, T).transpose(1, 2, 0)
    meta = {"sample_rate_hz": rec.sample_rate_hz, "channels": list(rec.channels), "epoch_seconds": seconds}
    return SequenceBatch(np.ascontiguousarray(X), None, meta)


# -- transformer wrappers ----------------------------------------------------

class _RecordingStep(BaseEstimator, TransformerMixin):
    def fit(self, X, y=None):
        return self


class NotchFilter(_RecordingStep):
    def __init__(self, f0_hz=50.0, q=DEFAULT_NOTCH_Q):
        self.f0_hz = f0_hz
        self.q = q

    def transform(self, X):
        return notch_filter(X, self.f0_hz, self.q)


class Decimator(_RecordingStep):
    def __init__(self, target_hz=200.0, cutoff_ratio=0.8, order=4):
        self.target_hz = target_hz
        self.cutoff_ratio = cutoff_ratio
        self.order = order

    def transform(self, X):
        return decimate(X, self.target_hz, self.cutoff_ratio, self.order)


class Standardizer(_RecordingStep):
    """Learns per-channel mean and std in ``fit``; ``transform`` applies them."""

    def fit(self, X, y=None):
        self.mean_, self.scale_ = channel_stats(X.data)
        return self

    def transform(self, X):
        if not hasattr(self, "mean_"):
            from sklearn.exceptions import NotFittedError

            raise NotFittedError("Standardizer is not fitted yet")
        return apply_standardization(X, self.mean_, self.scale_)


class Epocher(_RecordingStep):
    def __init__(self, seconds=2.0):
        self.seconds = seconds

    def transform(self, X):
        return epoch(X, self.seconds)


def make_pipeline(f0_hz=50.0, q=DEFAULT_NOTCH_Q, target_hz=200.0, cutoff_ratio=0.8, order=4, seconds=2.0) -> Pipeline:
    return Pipeline([
        ("notch", NotchFilter(f0_hz, q)),
        ("decimate", Decimator(target_hz, cutoff_ratio, order)),
        ("standardize", Standardizer()),
        ("epoch", Epocher(seconds)),
    ])


def pipeline_manifest(pipe: Pipeline, rec: Recording, batch: SequenceBatch, source=None) -> dict:
    steps = []
    for name, step in pipe.steps:
        entry = {"step": name, "params": step.get_params()}
        if name == "decimate":
            entry["added"] = "anti-alias low-pass applied before subsampling"
        steps.append(entry)
    return {
        "source": None if source is None else str(source),
        "input": {"channels": list(rec.channels), "sample_rate_hz": rec.sample_rate_hz,
                  "n_samples": rec.n_samples, "duration_s": rec.duration_s},
        "steps": steps,
        "zero_phase": True,
        "output": {"N": batch.N, "T": batch.T, "d": batch.d},
    }


def preprocess(rec: Recording, **params) -> tuple[SequenceBatch, dict]:
    """Run the full chain; returns the epochs and a manifest of every parameter."""
    pipe = make_pipeline(**params)
    batch = pipe.fit_transform(rec)
    return batch, pipeline_manifest(pipe, rec, batch)


# -- input / output ----------------------------------------------------------

def read_csv_recording(path, sample_rate_hz: float) -> Recording:
    """CSV with a header of channel labels and one row per sample."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise ContractViolation(f"{path}: empty CSV") from None
        rows = [[float(v) for v in row] for row in reader if row]
    data = np.array(rows, dtype=np.float64).reshape(-1, len(header))
    return Recording(data.T, sample_rate_hz, header)


def read_raw_recording(path, sidecar=None) -> Recording:
    """Raw little-endian float64 samples, interleaved (sample-major).

    The JSON sidecar (default ``<path>.json``) gives ``sample_rate_hz`` and
    ``channels``.
    """
    path = Path(path)
    sidecar = Path(sidecar) if sidecar else path.with_name(path.name + ".json")
    info = json.loads(sidecar.read_text())
    channels = list(info["channels"])
    raw = np.fromfile(path, dtype="<f8")
    if raw.size % len(channels):
        raise ContractViolation(f"{path}: {raw.size} values do not divide into {len(channels)} channels")
    return Recording(raw.reshape(-1, len(channels)).T, float(info["sample_rate_hz"]), channels)


def write_outputs(batch: SequenceBatch, manifest: dict, out_path) -> tuple[Path, Path]:
    out_path = Path(out_path)
    save_batch(batch, out_path)
    manifest_path = out_path.with_name(out_path.name + ".manifest.json")
    manifest_path.write_text(json.dumps(manifest, indent=2))
    return out_path, manifest_path
