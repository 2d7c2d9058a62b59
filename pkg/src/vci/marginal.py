"""Marginal treatment-effect estimators.

The robust estimator averages, over units ``k``::

    w_k * Y_k + (1 - w_k) * m_k,     w_k = I(T_k = a) / p(T_k | X_k)

where ``m_k`` is the model's expected outcome for unit ``k`` under ``a``
(decoded from the unit's own latent encoding). The weight uses the propensity
of the treatment the unit actually received. Because ``m_k`` is built from the
unit's factual outcome it can differ between units sharing a covariate tuple.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dataset import Dataset
from .exceptions import DomainError, LevelError
from .trainer import predict_counterfactual


@dataclass(frozen=True)
class MarginalEstimate:
    psi_hat: np.ndarray
    method: str
    treatment: int
    n_units: int
    covariate: tuple | None = None
    samples: int | None = None

    def __post_init__(self):
        if self.n_units < 1:
            raise DomainError("an estimate needs at least one contributing unit")
        if not np.all(np.isfinite(self.psi_hat)):
            raise DomainError("estimate has non-finite entries")


def inverse_weights(T, propensity_of_T, a, weight="observed", propensity_of_a=None):
    """Per-unit ``I(T_k = a) / p``; ``weight='target'`` divides by p(a | X_k) instead."""
    indicator = (np.asarray(T) == a).astype(np.float64)
    if weight == "observed":
        p = np.asarray(propensity_of_T, dtype=np.float64)
    elif weight == "target":
        p = np.asarray(propensity_of_a, dtype=np.float64)
    else:
        raise ValueError("weight must be 'observed' or 'target'")
    return indicator / p


def robust_terms(Y, weights, adjustment):
    """Per-unit contributions ``w*Y + (1-w)*m``; their column mean is the estimate."""
    w = np.asarray(weights, dtype=np.float64)[:, None]
    return w * np.asarray(Y, dtype=np.float64) + (1.0 - w) * np.asarray(adjustment, dtype=np.float64)


def _adjustment(dataset, network, a, samples, rng, adjustment):
    if adjustment is not None:
        adjustment = np.asarray(adjustment, dtype=np.float64)
        if adjustment.shape != dataset.Y.shape:
            raise ValueError(f"adjustment shape {adjustment.shape} != outcome shape {dataset.Y.shape}")
        return adjustment
    if network is None:
        raise ValueError("either a network or a precomputed adjustment is required")
    return predict_counterfactual(network, dataset.Y, dataset.X, dataset.T, a, samples, rng)


def robust_marginal(dataset: Dataset, network, propensity, a, samples=1, rng=None,
                    adjustment=None, weight="observed", covariate=None) -> MarginalEstimate:
    """Doubly robust estimate of E[Y(a)] over the rows of ``dataset``.

    ``adjustment`` overrides the network's per-unit predictions (e.g. with an
    oracle regression function).
    """
    if dataset.n_units == 0:
        raise DomainError("no units to estimate from")
    if not 0 <= int(a) < propensity.n_treatments:
        raise LevelError(f"treatment level {a} outside propensity table")
    probs = propensity.lookup(dataset.X)
    rows = np.arange(dataset.n_units)
    w = inverse_weights(dataset.T, probs[rows, dataset.T], a, weight, probs[:, a])
    m = _adjustment(dataset, network, a, samples, rng, adjustment)
    # mean(w*Y + (1-w)*m) == mean(m) + mean(w*(Y-m)); only treated rows have w != 0
    hit = np.flatnonzero(w)
    psi = m.mean(axis=0) + (w[hit, None] * (dataset.Y[hit] - m[hit])).sum(axis=0) / dataset.n_units
    return MarginalEstimate(psi, "robust", int(a), dataset.n_units, covariate, samples)


def mean_marginal(predictions, a=None, covariate=None) -> MarginalEstimate:
    """Plug-in estimate: column mean of per-unit counterfactual predictions."""
    predictions = np.asarray(predictions, dtype=np.float64)
    if predictions.ndim != 2 or predictions.shape[0] == 0:
        raise DomainError("mean estimator needs a non-empty prediction matrix")
    return MarginalEstimate(predictions.mean(axis=0), "mean", -1 if a is None else int(a),
                            predictions.shape[0], covariate)


def covariate_marginal(dataset: Dataset, network, propensity, c, a, samples=1, rng=None,
                       adjustment=None, weight="observed") -> MarginalEstimate:
    """Robust estimate restricted to units with covariate tuple ``c``."""
    c = tuple(int(v) for v in np.atleast_1d(c))
    mask = dataset.covariate_mask(c)
    if not mask.any():
        raise DomainError(f"no units with covariates {c}")
    if adjustment is not None:
        adjustment = np.asarray(adjustment)[mask]
    return robust_marginal(dataset.subset(mask), network, propensity, a, samples, rng,
                           adjustment, weight, covariate=c)
