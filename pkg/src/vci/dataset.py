"""In-memory dataset and split containers."""
from __future__ import annotations

from dataclasses import dataclass, field, fields, replace

import numpy as np

from .exceptions import ConfigError, LevelError, ShapeError

LABELS = ("train", "test", "ood")


def _as_codes(a, name, ndim):
    arr = np.asarray(a)
    if arr.ndim != ndim:
        raise ShapeError(f"{name} must be {ndim}-dimensional, got shape {arr.shape}")
    if arr.size and not np.issubdtype(arr.dtype, np.integer):
        if not np.all(np.mod(arr, 1) == 0):
            raise ValueError(f"{name} must hold integer codes")
    arr = arr.astype(np.int64)
    if arr.size and arr.min() < 0:
        raise LevelError(f"{name} codes must be >= 0")
    return arr


@dataclass
class Dataset:
    """Outcomes ``Y`` (units x genes), covariate codes ``X`` (units x m) and
    treatment codes ``T`` (units,).

    ``n_treatments`` and ``covariate_levels`` default to one past the largest
    code seen; pass them explicitly when a subset may miss some levels.
    """

    Y: np.ndarray
    X: np.ndarray
    T: np.ndarray
    n_treatments: int | None = None
    covariate_levels: tuple | None = None

    def __post_init__(self):
        self.Y = np.asarray(self.Y, dtype=np.float64)
        X = np.asarray(self.X)
        if X.ndim == 1:
            X = X[:, None]
        self.X = _as_codes(X, "X", 2)
        self.T = _as_codes(self.T, "T", 1)
        if self.Y.ndim != 2:
            raise ShapeError(f"Y must be 2-dimensional, got shape {self.Y.shape}")
        if not (len(self.Y) == len(self.X) == len(self.T)):
            raise ShapeError(
                f"unit counts differ: Y {len(self.Y)}, X {len(self.X)}, T {len(self.T)}"
            )
        if not np.all(np.isfinite(self.Y)):
            raise ValueError("Y contains non-finite values")
        if self.n_treatments is None:
            self.n_treatments = int(self.T.max()) + 1 if self.T.size else 0
        elif self.T.size and self.T.max() >= self.n_treatments:
            raise LevelError(f"treatment code {self.T.max()} >= n_treatments {self.n_treatments}")
        if self.covariate_levels is None:
            self.covariate_levels = tuple(
                int(c.max()) + 1 if c.size else 1 for c in self.X.T
            )
        else:
            self.covariate_levels = tuple(int(v) for v in self.covariate_levels)
            if len(self.covariate_levels) != self.X.shape[1]:
                raise ShapeError("covariate_levels length must equal the number of covariates")
            if self.X.size and np.any(self.X.max(axis=0) >= np.array(self.covariate_levels)):
                raise LevelError("covariate code outside declared levels")

    @property
    def n_units(self):
        return self.Y.shape[0]

    @property
    def n_genes(self):
        return self.Y.shape[1]

    @property
    def n_covariates(self):
        return self.X.shape[1]

    def subset(self, idx):
        """Rows ``idx`` (index array or boolean mask), keeping level tables."""
        idx = np.asarray(idx)
        kwargs = {}
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, np.ndarray) and value.ndim >= 1 and len(value) == self.n_units:
                kwargs[f.name] = value[idx]
        return replace(self, **kwargs)

    def covariate_mask(self, c):
        c = np.atleast_1d(np.asarray(c, dtype=np.int64))
        if c.shape != (self.n_covariates,):
            raise ShapeError(f"covariate tuple must have {self.n_covariates} entries")
        return np.all(self.X == c, axis=1)

    def covariate_keys(self):
        """Distinct covariate tuples present, in lexicographic order."""
        return [tuple(int(v) for v in row) for row in np.unique(self.X, axis=0)]


def onehot(codes, n_levels):
    codes = np.asarray(codes, dtype=np.int64)
    if codes.size and (codes.min() < 0 or codes.max() >= n_levels):
        bad = codes[(codes < 0) | (codes >= n_levels)][0]
        raise LevelError(f"level {bad} outside 0..{n_levels - 1}")
    out = np.zeros((codes.shape[0], n_levels))
    out[np.arange(codes.shape[0]), codes] = 1.0
    return out


def covariate_onehot(X, levels):
    X = np.asarray(X, dtype=np.int64)
    if X.ndim == 1:
        X = X[:, None]
    if X.shape[1] != len(levels):
        raise ShapeError(f"X has {X.shape[1]} covariates, expected {len(levels)}")
    if not levels:
        return np.zeros((X.shape[0], 0))
    return np.hstack([onehot(X[:, j], n) for j, n in enumerate(levels)])


@dataclass
class SplitAssignment:
    """Per-unit ``train``/``test``/``ood`` labels plus the held-out
    (covariate tuple, perturbation) pairs that produced the ood labels."""

    labels: np.ndarray
    held_out: list = field(default_factory=list)
    seed: int | None = None

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype="<U5")
        bad = set(np.unique(self.labels)) - set(LABELS)
        if bad:
            raise ConfigError(f"unknown split labels {sorted(bad)}")

    def indices(self, label):
        return np.flatnonzero(self.labels == label)

    def mask(self, label):
        return self.labels == label

    def __len__(self):
        return len(self.labels)
