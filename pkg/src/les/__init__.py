"""Latent Exploration Score (LES) and LES-constrained latent-space optimisation."""

from .scores import ScoreKind, ScoreValue, les, les_appendix, les_batch, les_gradient
from .vae import TrainConfig, VaeModel

__all__ = ["ScoreKind", "ScoreValue", "TrainConfig", "VaeModel", "les", "les_appendix", "les_batch", "les_gradient"]
__version__ = "0.1.0"
