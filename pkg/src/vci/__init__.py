"""Variational causal inference for high-dimensional counterfactual outcomes.

Library layers, bottom up: numerics (networks, hand backprop, Adam), dataset
and simulator, model and objective, trainer, marginal estimators, evaluation,
persistence (dataio) and the ``vci`` command line.
"""
__version__ = "0.1.0"

from .dataset import Dataset, SplitAssignment
from .estimator import StratifiedMeanRegressor, VCIEstimator
from .evaluation import compare_estimators, evaluate_ood, select_ood
from .marginal import covariate_marginal, mean_marginal, robust_marginal
from .objective import ObjectiveConfig, objective
from .sim import SimConfig, simulate
from .trainer import ModelBundle, TrainConfig, predict_counterfactual, train

__all__ = [
    "Dataset", "SplitAssignment", "SimConfig", "simulate", "ObjectiveConfig", "objective",
    "TrainConfig", "ModelBundle", "train", "predict_counterfactual", "robust_marginal",
    "mean_marginal", "covariate_marginal", "select_ood", "evaluate_ood",
    "compare_estimators", "VCIEstimator", "StratifiedMeanRegressor",
]
