"""Conversion-time forecasting with a family of parallel hyperplanes."""

from .domain import Cohort, SurvivalLabel, Visit, read_cohort, validate_cohort, write_cohort
from .estimator import ParallelHyperplaneForecaster
from .head import Calibrator, HyperplaneHead, RiskCalibrator, fit_calibrator
from .synth import SynthConfig, generate
from .trainer import Model, TrainConfig, finetune_unsupervised, train

__all__ = [
    "Calibrator",
    "Cohort",
    "HyperplaneHead",
    "Model",
    "ParallelHyperplaneForecaster",
    "RiskCalibrator",
    "SurvivalLabel",
    "SynthConfig",
    "TrainConfig",
    "Visit",
    "fit_calibrator",
    "finetune_unsupervised",
    "generate",
    "read_cohort",
    "train",
    "validate_cohort",
    "write_cohort",
]

__version__ = "0.1.0"
