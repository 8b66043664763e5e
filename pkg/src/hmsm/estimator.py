"""scikit-learn style front end over :func:`hmsm.learning.fit`."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .data import SequenceBatch
from .exceptions import ContractViolation
from .inference import decode_argmax, posteriors
from .learning import TrainConfig, fit
from .model import ModelSpec, MsmModel


def check_sequences(X, *, min_length: int = 2, n_features: int | None = None) -> np.ndarray:
    """Coerce ``X`` to a finite float64 ``(N, T, d)`` array.

    Accepts a :class:`SequenceBatch`, a single ``(T, d)`` sequence or a
    stacked ``(N, T, d)`` array.
    """
    if isinstance(X, SequenceBatch):
        X = X.X
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 2:
        X = X[None]
    if X.ndim != 3:
        raise ContractViolation(f"expected (N, T, d) or (T, d) sequences, got shape {X.shape}")
    if X.shape[0] == 0 or X.shape[2] == 0:
        raise ContractViolation(f"empty input of shape {X.shape}")
    if X.shape[1] < min_length:
        raise ContractViolation(f"sequences of length {X.shape[1]} are shorter than {min_length}")
    if n_features is not None and X.shape[2] != n_features:
        raise ContractViolation(f"X has {X.shape[2]} features, estimator expects {n_features}")
    if not np.all(np.isfinite(X)):
        raise ContractViolation("input contains NaN or infinite values")
    return X


class MarkovSwitchingModel(BaseEstimator):
    """K-regime, order-M Markov switching model with neural Gaussian transitions.

    Parameters
    ----------
    n_states : int
        Number of regimes ``K``.
    lag : int
        Autoregressive order ``M``.
    hidden_per_output, activation, locally_connected :
        Transition network architecture.
    masks : array of shape (K, d, d*M), optional
        Fixed input structure per regime; ``None`` leaves networks dense.
    max_epochs, batch_size, learning_rate, n_restarts, optimizer :
        Training controls forwarded to :class:`~hmsm.learning.TrainConfig`.
    random_state : int
        Seed for initialization and mini-batch order.

    Attributes
    ----------
    model_ : MsmModel
    report_ : TrainReport
    n_features_in_ : int
    """

    def __init__(
        self,
        n_states=3,
        lag=1,
        hidden_per_output=16,
        activation="cosine",
        locally_connected=True,
        masks=None,
        max_epochs=100,
        batch_size=500,
        learning_rate=7e-3,
        n_restarts=1,
        optimizer="adam",
        random_state=0,
    ):
        self.n_states = n_states
        self.lag = lag
        self.hidden_per_output = hidden_per_output
        self.activation = activation
        self.locally_connected = locally_connected
        self.masks = masks
        self.max_epochs = max_epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.n_restarts = n_restarts
        self.optimizer = optimizer
        self.random_state = random_state

    def _spec(self, d: int) -> ModelSpec:
        return ModelSpec(
            d=d,
            M=self.lag,
            K=self.n_states,
            hidden_per_output=self.hidden_per_output,
            activation=self.activation,
            locally_connected=self.locally_connected,
        )

    def _config(self) -> TrainConfig:
        return TrainConfig(
            max_epochs=self.max_epochs,
            batch_size=self.batch_size,
            learning_rate=self.learning_rate,
            n_restarts=self.n_restarts,
            optimizer=self.optimizer,
            seed=int(self.random_state or 0),
        )

    def fit(self, X, y=None):
        X = check_sequences(X, min_length=self.lag + 1)
        self.model_, self.report_ = fit(X, self._spec(X.shape[2]), self._config(), masks=self.masks)
        self.n_features_in_ = X.shape[2]
        return self

    @classmethod
    def from_model(cls, model: MsmModel) -> "MarkovSwitchingModel":
        """Wrap an already trained or generated model."""
        s = model.spec
        est = cls(s.K, s.M, s.hidden_per_output, s.activation, s.locally_connected)
        est.model_ = model
        est.n_features_in_ = s.d
        return est

    def _checked(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        return check_sequences(X, min_length=self.model_.spec.M + 1, n_features=self.n_features_in_)

    def predict_proba(self, X) -> np.ndarray:
        """Posterior regime marginals ``(N, T-M+1, K)`` for steps ``M..T``."""
        X = self._checked(X)
        return posteriors(self.model_, X).gamma

    def predict(self, X) -> np.ndarray:
        """Most probable regime per step (argmax of the marginals)."""
        X = self._checked(X)
        return decode_argmax(posteriors(self.model_, X))

    def score_samples(self, X) -> np.ndarray:
        """Per-sequence log-likelihood."""
        X = self._checked(X)
        return np.atleast_1d(posteriors(self.model_, X).log_lik)

    def score(self, X, y=None) -> float:
        """Mean per-sequence log-likelihood."""
        return float(np.mean(self.score_samples(X)))
