"""Collaborative Kalman filtering for time-evolving preferences.

Users carry latent states that drift by a linear-Gaussian random walk, items
carry fixed factor vectors, and each rating is their inner product plus noise.
The package smooths user trajectories, learns all parameters by EM, draws
synthetic data and scores fits against ground truth.
"""

from .datagen import GenConfig, GroundTruth, build_transition, generate
from .em import EmConfig, EmDivergenceError, EmResult, EmTrace, SufficientStats, e_step, run_em
from .evaluation import (
    BaselineConfig,
    Metrics,
    align,
    fit_baseline,
    predict,
    predict_many,
    score,
    score_baseline,
)
from .io import FormatError, deserialize_model, read_model, serialize_model, write_model
from .kalman import NumericalError, filter_user, smooth_all, smooth_user
from .model import (
    Dims,
    FilterTrace,
    ModelParams,
    ObservationSet,
    SmoothedPosterior,
    ValidationError,
    validate,
)

__version__ = "0.1.0"

__all__ = [
    "BaselineConfig", "Dims", "EmConfig", "EmDivergenceError", "EmResult", "EmTrace",
    "FilterTrace", "FormatError", "GenConfig", "GroundTruth", "Metrics", "ModelParams",
    "NumericalError", "ObservationSet", "SmoothedPosterior", "SufficientStats",
    "ValidationError", "align", "build_transition", "deserialize_model", "e_step",
    "filter_user", "fit_baseline", "generate", "predict", "predict_many", "read_model",
    "run_em", "score", "score_baseline", "serialize_model", "smooth_all", "smooth_user",
    "validate", "write_model",
]
