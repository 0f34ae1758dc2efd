"""Wasserstein distributionally robust training: SPGD with an inner oracle, SPGDA and DRFL."""

from .attacks import AttackSpec, evaluate_under_attack
from .data import Dataset, SyntheticSpec, load_idx, make_synthetic
from .federated import FederationConfig, run_federation
from .models import Datum, ModelSpec
from .optim import RunMetrics, TrainConfig, train, train_erm, train_spgd_oracle, train_spgda
from .prox import AugmentedParams, RegularizerSpec, prox_step
from .robust import GradientPair, OracleError, RobustConfig

__version__ = "0.1.0"

__all__ = [
    "AttackSpec", "AugmentedParams", "Dataset", "Datum", "FederationConfig", "GradientPair", "ModelSpec",
    "OracleError", "RegularizerSpec", "RobustConfig", "RunMetrics", "SyntheticSpec", "TrainConfig",
    "evaluate_under_attack", "load_idx", "make_synthetic", "prox_step", "run_federation", "train",
    "train_erm", "train_spgd_oracle", "train_spgda",
]
