"""Derivative-free training of forward-only models by ensemble Kalman inversion."""

from .eki import (
    EkiConfig,
    EnsembleState,
    coupling_matrix,
    adaptive_step,
    eki_step,
    meki_step,
    ensemble_mean,
    init_ensemble,
    run_epoch,
    online_step,
)
from .losses import LossSpec
from .models import ModelSpec, RnnSpec, dense_network, xavier_prior
from .numerics import GaussianPrior, make_rng

__version__ = "0.1.0"

__all__ = [
    "EkiConfig",
    "EnsembleState",
    "GaussianPrior",
    "LossSpec",
    "ModelSpec",
    "RnnSpec",
    "adaptive_step",
    "coupling_matrix",
    "dense_network",
    "eki_step",
    "ensemble_mean",
    "init_ensemble",
    "make_rng",
    "meki_step",
    "online_step",
    "run_epoch",
    "xavier_prior",
]
