"""Parameter containers for a K-state, order-M Markov switching model."""

from __future__ import annotations

import base64
import binascii
import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .exceptions import (
    ContractViolation,
    CorruptPayloadError,
    ShapeMismatchError,
    VersionMismatchError,
)
from .network import ACTIVATIONS, PARAM_NAMES, TransitionNetwork
from .numerics import LOG_2PI, log_sum_exp

FORMAT_NAME = "hmsm-model"
FORMAT_VERSION = 1
NORMALIZATION_TOL = 1e-9


@dataclass(frozen=True)
class ModelSpec:
    """Hyperparameters of the model family.

    ``shared_band`` is only used by ground-truth models of the piecewise
    variant: when the norm of the conditioning window lies inside the band,
    every state emits with the state-0 mean.
    """

    d: int
    M: int
    K: int
    K0: int | None = None
    hidden_per_output: int = 16
    activation: str = "cosine"
    locally_connected: bool = True
    shared_band: tuple[float, float] | None = None

    def __post_init__(self):
        if self.K0 is None:
            object.__setattr__(self, "K0", self.K)
        if self.shared_band is not None:
            object.__setattr__(self, "shared_band", tuple(float(v) for v in self.shared_band))

    @property
    def input_dim(self) -> int:
        return self.d * self.M

    @property
    def hidden(self) -> int:
        return self.hidden_per_output * (self.d if self.locally_connected else 1)

    def problems(self) -> list[str]:
        out = []
        if self.d < 1:
            out.append(f"spec.d must be >= 1 (got {self.d})")
        if self.M < 1:
            out.append(f"spec.M must be >= 1 (got {self.M})")
        if self.K < 1:
            out.append(f"spec.K must be >= 1 (got {self.K})")
        if self.K0 != self.K:
            out.append(f"spec.K0 ({self.K0}) must equal K ({self.K}) for a first-order chain")
        if self.hidden_per_output < 1:
            out.append("spec.hidden_per_output must be >= 1")
        if self.activation not in ACTIVATIONS:
            out.append(f"spec.activation {self.activation!r} not in {ACTIVATIONS}")
        if self.shared_band is not None and not (0 <= self.shared_band[0] <= self.shared_band[1]):
            out.append(f"spec.shared_band {self.shared_band} is not an interval")
        return out

    def to_dict(self) -> dict:
        out = asdict(self)
        if self.shared_band is not None:
            out["shared_band"] = list(self.shared_band)
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "ModelSpec":
        data = dict(data)
        if data.get("shared_band") is not None:
            data["shared_band"] = tuple(data["shared_band"])
        return cls(**data)


@dataclass
class ChainParams:
    log_pi: np.ndarray
    log_A: np.ndarray

    @classmethod
    def from_probs(cls, pi, A) -> "ChainParams":
        with np.errstate(divide="ignore"):
            return cls(np.log(np.asarray(pi, dtype=np.float64)), np.log(np.asarray(A, dtype=np.float64)))

    @property
    def pi(self) -> np.ndarray:
        return np.exp(self.log_pi)

    @property
    def A(self) -> np.ndarray:
        return np.exp(self.log_A)

    def copy(self) -> "ChainParams":
        return ChainParams(self.log_pi.copy(), self.log_A.copy())


@dataclass
class InitialEmission:
    """Diagonal Gaussians over the flattened first window ``x_{1:M}``
    (chronological order), one row per initial regime."""

    mean: np.ndarray
    log_var: np.ndarray

    def copy(self) -> "InitialEmission":
        return InitialEmission(self.mean.copy(), self.log_var.copy())

    def log_density(self, x_init) -> np.ndarray:
        """``(n, K0)`` log-densities for ``(n, d*M)`` initial windows."""
        x = np.asarray(x_init, dtype=np.float64)
        resid = x[:, None, :] - self.mean[None]
        return -0.5 * np.sum(LOG_2PI + self.log_var + resid**2 * np.exp(-self.log_var), axis=-1)


@dataclass
class MsmModel:
    spec: ModelSpec
    chain: ChainParams
    initial: InitialEmission
    networks: list[TransitionNetwork]
    meta: dict = field(default_factory=dict)

    @property
    def K(self) -> int:
        return self.spec.K

    def copy(self) -> "MsmModel":
        return MsmModel(
            self.spec,
            self.chain.copy(),
            self.initial.copy(),
            [n.copy() for n in self.networks],
            json.loads(json.dumps(self.meta)),
        )

    def transition_means(self, windows) -> np.ndarray:
        """``(n, K, d)`` means for ``(n, d*M)`` conditioning windows."""
        w = np.asarray(windows, dtype=np.float64)
        means = np.stack([net.forward(w) for net in self.networks], axis=1)
        band = self.spec.shared_band
        if band is not None:
            norm = np.linalg.norm(w, axis=1)
            inside = (norm >= band[0]) & (norm <= band[1])
            means[inside] = means[inside, :1, :]
        return means

    def transition_log_density(self, windows, x_t) -> np.ndarray:
        """``(n, K)`` values of ``log p(x_t | window, s_t = k)``."""
        means = self.transition_means(windows)
        lv = np.stack([net.log_var for net in self.networks])
        resid = np.asarray(x_t, dtype=np.float64)[:, None, :] - means
        return -0.5 * np.sum(LOG_2PI + lv + resid**2 * np.exp(-lv), axis=-1)

    def permuted(self, sigma) -> "MsmModel":
        """Relabel states so that new state ``k`` is old state ``sigma[k]``."""
        sigma = np.asarray(sigma, dtype=int)
        chain = ChainParams(self.chain.log_pi[sigma].copy(), self.chain.log_A[np.ix_(sigma, sigma)].copy())
        init = InitialEmission(self.initial.mean[sigma].copy(), self.initial.log_var[sigma].copy())
        return MsmModel(self.spec, chain, init, [self.networks[s].copy() for s in sigma], dict(self.meta))


def validate(model: MsmModel) -> list[str]:
    """Every invariant violation found in ``model``; an empty list means valid."""
    spec = model.spec
    errors = list(spec.problems())
    K, K0, d, dM = spec.K, spec.K0, spec.d, spec.input_dim

    def check_logprob(vec, name):
        if np.any(np.isnan(vec)) or np.any(vec > 1e-12):
            errors.append(f"{name} contains NaN or positive log-probabilities")
            return
        total = log_sum_exp(vec)
        if abs(total) > NORMALIZATION_TOL:
            errors.append(f"{name} is not normalized (sums to {np.exp(total):.12g})")

    log_pi = np.asarray(model.chain.log_pi)
    if log_pi.shape != (K0,):
        errors.append(f"chain.log_pi shape {log_pi.shape} != {(K0,)}")
    else:
        check_logprob(log_pi, "chain.log_pi")
    log_A = np.asarray(model.chain.log_A)
    if log_A.shape != (K, K):
        errors.append(f"chain.log_A shape {log_A.shape} != {(K, K)}")
    else:
        for k in range(K):
            check_logprob(log_A[k], f"chain.log_A row {k}")

    init = model.initial
    for name in ("mean", "log_var"):
        arr = np.asarray(getattr(init, name))
        if arr.shape != (K0, dM):
            errors.append(f"initial.{name} shape {arr.shape} != {(K0, dM)}")
        elif not np.all(np.isfinite(arr)):
            errors.append(f"initial.{name} has non-finite entries")
    if init.mean.shape == (K0, dM) and init.log_var.shape == (K0, dM):
        for a in range(K0):
            for b in range(a + 1, K0):
                if np.array_equal(init.mean[a], init.mean[b]) and np.array_equal(init.log_var[a], init.log_var[b]):
                    errors.append(f"initial components {a} and {b} are identical")

    if len(model.networks) != K:
        errors.append(f"expected {K} transition networks, found {len(model.networks)}")
    for k, net in enumerate(model.networks):
        tag = f"networks[{k}]"
        if net.d != d or net.input_dim != dM or net.hidden != spec.hidden:
            errors.append(
                f"{tag} shape (d={net.d}, in={net.input_dim}, h={net.hidden}) "
                f"!= (d={d}, in={dM}, h={spec.hidden})"
            )
        if net.activation != spec.activation:
            errors.append(f"{tag} activation {net.activation!r} != spec {spec.activation!r}")
        if net.locally_connected != spec.locally_connected:
            errors.append(f"{tag} connectivity disagrees with spec")
        for name, arr in net.params().items():
            if not np.all(np.isfinite(arr)):
                errors.append(f"{tag}.{name} has non-finite entries")
        errors.extend(f"{tag}: {msg}" for msg in net.mask_violations())
    for a in range(len(model.networks)):
        for b in range(a + 1, len(model.networks)):
            na, nb = model.networks[a], model.networks[b]
            if all(np.array_equal(getattr(na, p), getattr(nb, p)) for p in PARAM_NAMES) and (
                na.mask is None and nb.mask is None or
                na.mask is not None and nb.mask is not None and np.array_equal(na.mask, nb.mask)
            ):
                errors.append(f"transition networks {a} and {b} are identical")
    return errors


# -- serialization ---------------------------------------------------------

def _expected_shapes(spec: ModelSpec) -> dict[str, tuple[int, ...]]:
    K, K0, d, dM, h = spec.K, spec.K0, spec.d, spec.input_dim, spec.hidden
    shapes = {
        "chain.log_pi": (K0,),
        "chain.log_A": (K, K),
        "initial.mean": (K0, dM),
        "initial.log_var": (K0, dM),
    }
    for k in range(K):
        shapes.update({
            f"networks.{k}.W1": (h, dM),
            f"networks.{k}.b1": (h,),
            f"networks.{k}.W2": (d, h),
            f"networks.{k}.b2": (d,),
            f"networks.{k}.log_var": (d,),
        })
    return shapes


def _model_arrays(model: MsmModel) -> dict[str, np.ndarray]:
    out = {
        "chain.log_pi": model.chain.log_pi,
        "chain.log_A": model.chain.log_A,
        "initial.mean": model.initial.mean,
        "initial.log_var": model.initial.log_var,
    }
    for k, net in enumerate(model.networks):
        for name in PARAM_NAMES:
            out[f"networks.{k}.{name}"] = getattr(net, name)
    return out


def _encode(arr: np.ndarray, dtype: str) -> dict:
    raw = np.ascontiguousarray(arr, dtype=dtype).tobytes()
    return {"shape": list(arr.shape), "dtype": dtype, "data": base64.b64encode(raw).decode("ascii")}


def model_to_document(model: MsmModel) -> dict:
    blocks = {name: _encode(arr, "<f8") for name, arr in _model_arrays(model).items()}
    for k, net in enumerate(model.networks):
        if net.mask is not None:
            blocks[f"networks.{k}.mask"] = _encode(net.mask.astype(np.uint8), "|u1")
    digest = hashlib.sha256()
    for name, blk in blocks.items():
        digest.update(name.encode())
        digest.update(blk["data"].encode())
    return {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "spec": model.spec.to_dict(),
        "meta": model.meta,
        "seed": model.meta.get("seed"),
        "params": blocks,
        "checksum": digest.hexdigest(),
    }


def save(model: MsmModel, path) -> Path:
    path = Path(path)
    path.write_text(json.dumps(model_to_document(model), indent=1))
    return path


def _decode(blocks: dict, name: str, expected: tuple[int, ...] | None = None) -> np.ndarray:
    try:
        blk = blocks[name]
    except KeyError:
        raise CorruptPayloadError(f"missing parameter block '{name}'") from None
    shape = tuple(blk.get("shape", ()))
    if expected is not None and shape != expected:
        raise ShapeMismatchError(name, expected, shape)
    try:
        raw = base64.b64decode(blk["data"], validate=True)
        arr = np.frombuffer(raw, dtype=blk["dtype"])
    except (KeyError, binascii.Error, ValueError, TypeError) as exc:
        raise CorruptPayloadError(f"cannot decode block '{name}': {exc}") from None
    if arr.size != int(np.prod(shape, dtype=int)):
        raise CorruptPayloadError(f"block '{name}' holds {arr.size} values, header says {shape}")
    return arr.reshape(shape).copy()


def model_from_document(doc: dict) -> MsmModel:
    if not isinstance(doc, dict) or doc.get("format") != FORMAT_NAME:
        raise CorruptPayloadError("not an hmsm model document")
    if doc.get("version") != FORMAT_VERSION:
        raise VersionMismatchError(f"model file version {doc.get('version')!r}, expected {FORMAT_VERSION}")
    try:
        spec = ModelSpec.from_dict(doc["spec"])
        blocks = doc["params"]
        checksum = doc["checksum"]
    except (KeyError, TypeError) as exc:
        raise CorruptPayloadError(f"malformed model document: {exc}") from None

    arrays = {name: _decode(blocks, name, shape) for name, shape in _expected_shapes(spec).items()}
    masks = {}
    for k in range(spec.K):
        key = f"networks.{k}.mask"
        if key in blocks:
            masks[k] = _decode(blocks, key, (spec.d, spec.input_dim)).astype(bool)

    digest = hashlib.sha256()
    for name, blk in blocks.items():
        digest.update(name.encode())
        digest.update(str(blk.get("data", "")).encode())
    if digest.hexdigest() != checksum:
        raise CorruptPayloadError("checksum mismatch")

    networks = [
        TransitionNetwork(
            *(arrays[f"networks.{k}.{n}"] for n in PARAM_NAMES),
            activation=spec.activation,
            mask=masks.get(k),
            locally_connected=spec.locally_connected,
        )
        for k in range(spec.K)
    ]
    return MsmModel(
        spec,
        ChainParams(arrays["chain.log_pi"], arrays["chain.log_A"]),
        InitialEmission(arrays["initial.mean"], arrays["initial.log_var"]),
        networks,
        dict(doc.get("meta") or {}),
    )


def load(path) -> MsmModel:
    text = Path(path).read_text()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise CorruptPayloadError(f"{path}: not valid JSON ({exc.msg})") from None
    return model_from_document(doc)


def models_equal(a: MsmModel, b: MsmModel) -> bool:
    """Exact parameter-wise equality (bitwise for floats, including masks)."""
    if a.spec != b.spec:
        return False
    arr_a, arr_b = _model_arrays(a), _model_arrays(b)
    if arr_a.keys() != arr_b.keys():
        return False
    for key in arr_a:
        if arr_a[key].shape != arr_b[key].shape or arr_a[key].tobytes() != arr_b[key].tobytes():
            return False
    for na, nb in zip(a.networks, b.networks):
        if (na.mask is None) != (nb.mask is None):
            return False
        if na.mask is not None and not np.array_equal(na.mask, nb.mask):
            return False
    return True


def check_T(spec: ModelSpec, T: int) -> None:
    if T <= spec.M:
        raise ContractViolation(f"sequence length T={T} must exceed the lag M={spec.M}")
