"""Identifiable high-order Markov switching models with neural Gaussian transitions."""

from .estimator import MarkovSwitchingModel
from .learning import TrainConfig, fit
from .model import ModelSpec, MsmModel

__version__ = "0.1.0"

__all__ = ["MarkovSwitchingModel", "ModelSpec", "MsmModel", "TrainConfig", "fit", "__version__"]
