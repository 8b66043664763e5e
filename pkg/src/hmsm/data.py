"""Sequence batches and the ``MSMSEQ1`` binary container.

Layout: 7-byte magic ``MSMSEQ1``, little-endian ``uint32`` header length,
UTF-8 JSON header (``N``, ``T``, ``d``, ``dtype``, ``seed`` and free-form
metadata), then the ``N*T*d`` float64 payload in row-major order. When the
header has ``"states": true`` an int32 ``(N, T-M+1)`` block of regime labels
follows the payload.
"""

from __future__ import annotations

import csv
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .exceptions import ContractViolation, CorruptPayloadError

MAGIC = b"MSMSEQ1"


@dataclass
class SequenceBatch:
    X: np.ndarray
    seed: int | None = None
    meta: dict = field(default_factory=dict)
    states: np.ndarray | None = None

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        if self.X.ndim == 2:
            self.X = self.X[None]
        if self.X.ndim != 3:
            raise ContractViolation(f"SequenceBatch expects (N, T, d) data, got {self.X.shape}")

    @property
    def N(self) -> int:
        return self.X.shape[0]

    @property
    def T(self) -> int:
        return self.X.shape[1]

    @property
    def d(self) -> int:
        return self.X.shape[2]

    def __len__(self) -> int:
        return self.N

    def subset(self, idx) -> "SequenceBatch":
        idx = np.asarray(idx)
        return SequenceBatch(
            self.X[idx],
            self.seed,
            dict(self.meta),
            None if self.states is None else self.states[idx],
        )


def save_batch(batch: SequenceBatch, path) -> Path:
    path = Path(path)
    header = {
        "N": batch.N,
        "T": batch.T,
        "d": batch.d,
        "dtype": "f64",
        "seed": batch.seed,
        "meta": batch.meta,
        "states": batch.states is not None,
    }
    head = json.dumps(header, sort_keys=True).encode()
    with path.open("wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(head)))
        fh.write(head)
        fh.write(np.ascontiguousarray(batch.X, dtype="<f8").tobytes())
        if batch.states is not None:
            fh.write(np.ascontiguousarray(batch.states, dtype="<i4").tobytes())
    return path


def load_batch(path) -> SequenceBatch:
    raw = Path(path).read_bytes()
    if raw[: len(MAGIC)] != MAGIC:
        raise CorruptPayloadError(f"{path}: missing MSMSEQ1 magic")
    off = len(MAGIC)
    try:
        (hlen,) = struct.unpack_from("<I", raw, off)
        header = json.loads(raw[off + 4 : off + 4 + hlen])
        N, T, d = int(header["N"]), int(header["T"]), int(header["d"])
    except (struct.error, json.JSONDecodeError, KeyError, ValueError) as exc:
        raise CorruptPayloadError(f"{path}: bad header ({exc})") from None
    if header.get("dtype") != "f64":
        raise CorruptPayloadError(f"{path}: unsupported dtype {header.get('dtype')!r}")
    off += 4 + hlen
    nbytes = N * T * d * 8
    if len(raw) < off + nbytes:
        raise CorruptPayloadError(f"{path}: truncated payload")
    X = np.frombuffer(raw, dtype="<f8", count=N * T * d, offset=off).reshape(N, T, d).copy()
    off += nbytes
    states = None
    if header.get("states"):
        rest = (len(raw) - off) // 4
        if rest == 0 or rest % N:
            raise CorruptPayloadError(f"{path}: truncated state block")
        states = np.frombuffer(raw, dtype="<i4", count=rest, offset=off).reshape(N, -1).astype(np.int64)
    return SequenceBatch(X, header.get("seed"), header.get("meta") or {}, states)


def export_csv(batch: SequenceBatch, path) -> Path:
    """Long-format CSV: ``seq, t, x0..x{d-1}``."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["seq", "t"] + [f"x{j}" for j in range(batch.d)])
        for n in range(batch.N):
            for t in range(batch.T):
                w.writerow([n, t] + [repr(float(v)) for v in batch.X[n, t]])
    return path
