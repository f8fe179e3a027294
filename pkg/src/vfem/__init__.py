"""Vertical federated EM for linear regression with block-missing covariates.

A library for fitting a Gaussian linear model when the covariate columns are
split across clients that cannot share raw data and whole blocks are missing
per sample. Provides the round-based federated estimator, a centralized
closed-form oracle, sketch-based standard errors, synthetic data generation,
baselines, and a Monte Carlo harness.
"""

from . import errors
from .baselines import BaselineKind, BaselineResult, OlsFit, ols, run_baseline
from .centralized import (
    closed_form_m_step,
    conditional_moments,
    em_map,
    estep,
    observed_loglik,
    observed_loss,
    q_gradient_beta,
    q_value,
)
from .data import (
    BlockLayout,
    ClientView,
    ConditionalMoments,
    MissingMask,
    ModelParameters,
    VerticalDataset,
    make_dataset,
)
from .datagen import GenConfig, GroundTruth, generate, smes_like_config
from .engine import (
    FitConfig,
    FitResult,
    IterationSnapshot,
    PredictionResult,
    fit,
    initialize,
    plug_in_learning_rate,
    predict,
)
from .inference import (
    InferenceConfig,
    InferenceReport,
    SketchConfig,
    SketchedStatistics,
    ThetaVectorizer,
    assemble_information,
    asymptotic_covariance,
    exact_statistics,
    run_inference,
    sem_jacobian,
    sketch_statistics,
)
from .montecarlo import MonteCarloSpec, MonteCarloSummary, monte_carlo

__version__ = "0.1.0"

__all__ = [
    "BaselineKind", "BaselineResult", "BlockLayout", "ClientView",
    "ConditionalMoments", "FitConfig", "FitResult", "GenConfig", "GroundTruth",
    "InferenceConfig", "InferenceReport", "IterationSnapshot", "MissingMask",
    "ModelParameters", "MonteCarloSpec", "MonteCarloSummary", "OlsFit",
    "PredictionResult", "SketchConfig", "SketchedStatistics", "ThetaVectorizer",
    "VerticalDataset", "assemble_information", "asymptotic_covariance",
    "closed_form_m_step", "conditional_moments", "em_map", "errors", "estep",
    "exact_statistics", "fit", "generate", "initialize", "make_dataset",
    "monte_carlo", "observed_loglik", "observed_loss", "ols",
    "plug_in_learning_rate", "predict", "q_gradient_beta", "q_value",
    "run_baseline", "run_inference", "sem_jacobian", "sketch_statistics",
    "smes_like_config",
]
