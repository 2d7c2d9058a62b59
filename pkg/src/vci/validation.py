"""Input validation helpers shared by the estimator wrappers."""
from __future__ import annotations

import numpy as np
from sklearn.utils.validation import check_array, check_consistent_length

from .exceptions import LevelError


def check_outcomes(Y, n_genes=None):
    """Finite float64 outcome matrix (units x genes)."""
    Y = check_array(Y, dtype=np.float64, ensure_all_finite=True)
    if n_genes is not None and Y.shape[1] != n_genes:
        raise ValueError(f"Y has {Y.shape[1]} genes, estimator was fitted with {n_genes}")
    return Y


def check_codes(codes, name="X", n_levels=None):
    """Non-negative integer codes; 1-D input becomes one column."""
    arr = np.asarray(codes)
    if arr.ndim == 1:
        arr = arr[:, None]
    arr = check_array(arr, dtype=None, ensure_min_features=0)
    if arr.size and not np.all(np.mod(arr, 1) == 0):
        raise ValueError(f"{name} must hold integer codes")
    arr = arr.astype(np.int64)
    if arr.size and arr.min() < 0:
        raise LevelError(f"{name} codes must be >= 0")
    if n_levels is not None:
        n_levels = np.atleast_1d(n_levels)
        if arr.shape[1] != len(n_levels):
            raise ValueError(f"{name} has {arr.shape[1]} columns, expected {len(n_levels)}")
        if arr.size and np.any(arr.max(axis=0) >= n_levels):
            raise LevelError(f"{name} contains a code outside the fitted levels")
    return arr


def check_treatments(T, n_treatments=None):
    T = check_codes(T, "T", None if n_treatments is None else [n_treatments])
    if T.shape[1] != 1:
        raise ValueError("T must be a single column of treatment codes")
    return T[:, 0]


def check_triplet(Y, X, T, n_genes=None, covariate_levels=None, n_treatments=None):
    """Validate an (outcomes, covariates, treatments) triplet of equal length."""
    check_consistent_length(Y, X, T)
    return (check_outcomes(Y, n_genes), check_codes(X, "X", covariate_levels),
            check_treatments(T, n_treatments))
