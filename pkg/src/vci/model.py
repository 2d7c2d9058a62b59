"""Encoder/decoder networks and the empirical outcome and propensity models."""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .dataset import Dataset, covariate_onehot, onehot
from .exceptions import LevelError, ShapeError, StratumError
from .numerics import MlpParams, init_mlp, mlp_forward, zeros_like_mlp

LOGVAR_BOUND = 10.0
LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass(frozen=True)
class LatentGaussian:
    mean: np.ndarray
    logvar: np.ndarray


@dataclass(frozen=True)
class OutcomeGaussian:
    mean: np.ndarray
    logvar: np.ndarray

    def loglik(self, Y):
        """Row-wise diagonal Gaussian log density of ``Y``."""
        return gaussian_loglik(Y, self.mean, np.exp(self.logvar))


def gaussian_loglik(y, mean, var):
    y = np.asarray(y, dtype=np.float64)
    return -0.5 * np.sum(LOG_2PI + np.log(var) + (y - mean) ** 2 / var, axis=-1)


@dataclass(frozen=True)
class VciNetwork:
    """Encoder q(Z | Y, X, T) and decoder p(Y | Z, T) parameters.

    The encoder reads ``Y ++ onehot(X) ++ onehot(T)`` and emits ``2*d``
    values (latent mean, log-variance); the decoder reads ``Z ++ onehot(T)``
    and emits ``2*n`` values (outcome mean, log-variance).
    """

    encoder: MlpParams
    decoder: MlpParams
    n_genes: int
    latent_dim: int
    covariate_levels: tuple
    n_treatments: int

    def __post_init__(self):
        n_cov = sum(self.covariate_levels)
        if self.encoder.n_in != self.n_genes + n_cov + self.n_treatments:
            raise ShapeError(f"encoder input width {self.encoder.n_in} does not match dims")
        if self.encoder.n_out != 2 * self.latent_dim:
            raise ShapeError(f"encoder output width {self.encoder.n_out} != 2 * latent_dim")
        if self.decoder.n_in != self.latent_dim + self.n_treatments:
            raise ShapeError(f"decoder input width {self.decoder.n_in} does not match dims")
        if self.decoder.n_out != 2 * self.n_genes:
            raise ShapeError(f"decoder output width {self.decoder.n_out} != 2 * n_genes")

    def blocks(self):
        return {**self.encoder.blocks("encoder."), **self.decoder.blocks("decoder.")}

    def with_blocks(self, blocks):
        return replace(
            self,
            encoder=self.encoder.with_blocks(blocks, "encoder."),
            decoder=self.decoder.with_blocks(blocks, "decoder."),
        )

    def encoder_input(self, Y, X, T):
        Y = np.asarray(Y, dtype=np.float64)
        if Y.ndim != 2 or Y.shape[1] != self.n_genes:
            raise ShapeError(f"Y shape {Y.shape} does not match {self.n_genes} genes")
        return np.hstack([Y, covariate_onehot(X, self.covariate_levels), onehot(T, self.n_treatments)])

    def decoder_input(self, Z, T):
        Z = np.asarray(Z, dtype=np.float64)
        if Z.ndim != 2 or Z.shape[1] != self.latent_dim:
            raise ShapeError(f"Z shape {Z.shape} does not match latent_dim {self.latent_dim}")
        return np.hstack([Z, onehot(T, self.n_treatments)])


def init_network(n_genes, covariate_levels, n_treatments, latent_dim=32,
                 encoder_hidden=(128, 128), decoder_hidden=(128, 128), rng=None) -> VciNetwork:
    if rng is None:
        rng = np.random.default_rng(0)
    covariate_levels = tuple(int(v) for v in covariate_levels)
    enc_in = n_genes + sum(covariate_levels) + n_treatments
    encoder = init_mlp((enc_in, *encoder_hidden, 2 * latent_dim), rng)
    decoder = init_mlp((latent_dim + n_treatments, *decoder_hidden, 2 * n_genes), rng)
    return VciNetwork(encoder, decoder, n_genes, latent_dim, covariate_levels, n_treatments)


def zero_network(net: VciNetwork) -> VciNetwork:
    return replace(net, encoder=zeros_like_mlp(net.encoder), decoder=zeros_like_mlp(net.decoder))


def split_gaussian(h, width):
    """Split a (batch, 2*width) head into mean and clamped log-variance."""
    return h[:, :width], np.clip(h[:, width:], -LOGVAR_BOUND, LOGVAR_BOUND)


def encode(net: VciNetwork, Y, X, T) -> LatentGaussian:
    h = mlp_forward(net.encoder, net.encoder_input(Y, X, T))
    return LatentGaussian(*split_gaussian(h, net.latent_dim))


def decode(net: VciNetwork, Z, T) -> OutcomeGaussian:
    h = mlp_forward(net.decoder, net.decoder_input(Z, T))
    return OutcomeGaussian(*split_gaussian(h, net.n_genes))


def decode_mean(net: VciNetwork, Z, T):
    """Decoder outcome means only (skips the log-variance half of the last layer)."""
    dec = net.decoder
    n = net.n_genes
    head = MlpParams(
        dec.weights[:-1] + (dec.weights[-1][:, :n],),
        dec.biases[:-1] + (dec.biases[-1][:n],),
        dec.activations,
    )
    return mlp_forward(head, net.decoder_input(Z, T))


# ---------------------------------------------------------------------------
# empirical models
# ---------------------------------------------------------------------------

def _group_rows(keys):
    """Unique rows of an integer key matrix and, per unique row, its row indices."""
    keys = np.asarray(keys, dtype=np.int64)
    if keys.ndim == 1:
        keys = keys[:, None]
    dims = tuple(int(v) + 1 for v in keys.max(axis=0)) if len(keys) else (1,) * keys.shape[1]
    codes = np.ravel_multi_index(keys.T, dims) if len(keys) else np.zeros(0, dtype=np.int64)
    uniq_codes, inverse = np.unique(codes, return_inverse=True)
    uniq = np.column_stack(np.unravel_index(uniq_codes, dims)) if len(keys) else keys[:0]
    order = np.argsort(inverse, kind="stable")
    bounds = np.cumsum(np.bincount(inverse, minlength=len(uniq)))[:-1]
    return uniq, np.split(order, bounds)


@dataclass(frozen=True)
class StratifiedOutcomeModel:
    """Per-(covariate tuple, treatment) diagonal Gaussian estimate of p(Y | X, T).

    ``strata`` maps ``(cov_tuple, t)`` to ``(mean, var, count)``; strata seen
    fewer than ``min_count`` times are left out and resolved through
    ``fallback[t]``, the treatment-marginal entry.
    """

    strata: dict
    fallback: dict
    n_genes: int
    variance_floor: float = 1e-4

    def resolve(self, x, t):
        key = (tuple(int(v) for v in np.atleast_1d(x)), int(t))
        if key in self.strata:
            return self.strata[key]
        if key[1] in self.fallback:
            return self.fallback[key[1]]
        raise StratumError(f"no stratum or treatment fallback for (X={key[0]}, T={key[1]})")

    def lookup(self, X, T):
        """Stratum means and variances for every row, each (batch, n_genes)."""
        X = np.asarray(X, dtype=np.int64)
        if X.ndim == 1:
            X = X[:, None]
        T = np.asarray(T, dtype=np.int64)
        mean = np.empty((len(T), self.n_genes))
        var = np.empty((len(T), self.n_genes))
        uniq, groups = _group_rows(np.column_stack([X, T]))
        for key, rows in zip(uniq, groups):
            mu, v, _ = self.resolve(key[:-1], key[-1])
            mean[rows] = mu
            var[rows] = v
        return mean, var

    def has_stratum(self, X, T):
        """True where (X, T) has its own stratum rather than a fallback entry."""
        X = np.asarray(X, dtype=np.int64)
        if X.ndim == 1:
            X = X[:, None]
        T = np.asarray(T, dtype=np.int64)
        out = np.zeros(len(T), dtype=bool)
        uniq, groups = _group_rows(np.column_stack([X, T]))
        for key, rows in zip(uniq, groups):
            out[rows] = (tuple(int(v) for v in key[:-1]), int(key[-1])) in self.strata
        return out

    def loglik(self, Y, X, T, return_grad=False):
        """Row-wise log density of ``Y`` under its stratum; optionally d/dY."""
        mean, var = self.lookup(X, T)
        Y = np.asarray(Y, dtype=np.float64)
        ll = gaussian_loglik(Y, mean, var)
        if return_grad:
            return ll, -(Y - mean) / var
        return ll


def _moments(Y, floor):
    return Y.mean(axis=0), np.maximum(Y.var(axis=0), floor)


def fit_stratified(dataset: Dataset, variance_floor=1e-4, min_count=2) -> StratifiedOutcomeModel:
    if dataset.n_units == 0:
        raise ValueError("cannot fit a stratified model on an empty dataset")
    strata = {}
    uniq, groups = _group_rows(np.column_stack([dataset.X, dataset.T]))
    for key, rows in zip(uniq, groups):
        if len(rows) >= min_count:
            mean, var = _moments(dataset.Y[rows], variance_floor)
            strata[(tuple(int(v) for v in key[:-1]), int(key[-1]))] = (mean, var, len(rows))
    fallback = {}
    for t in np.unique(dataset.T):
        rows = dataset.T == t
        mean, var = _moments(dataset.Y[rows], variance_floor)
        fallback[int(t)] = (mean, var, int(rows.sum()))
    return StratifiedOutcomeModel(strata, fallback, dataset.n_genes, variance_floor)


def _floor_simplex(p, floor):
    """Renormalise ``p`` to sum to one with every entry >= ``floor``."""
    p = np.asarray(p, dtype=np.float64) / np.sum(p)
    if floor * len(p) > 1.0:
        raise ValueError("propensity floor too large for the number of levels")
    pinned = np.zeros(len(p), dtype=bool)
    while True:
        low = (p < floor) & ~pinned
        if not low.any():
            return p
        pinned |= low
        free = ~pinned
        p = np.where(pinned, floor, p * (1.0 - floor * pinned.sum()) / p[free].sum())


@dataclass(frozen=True)
class PropensityTable:
    """Covariate tuple -> probability vector over treatment levels."""

    probs: dict
    n_treatments: int
    clip: float = 0.01

    def __post_init__(self):
        for key, p in self.probs.items():
            p = np.asarray(p, dtype=np.float64)
            if p.shape != (self.n_treatments,):
                raise ShapeError(f"propensity vector for {key} has shape {p.shape}")
            if np.any(p <= 0) or abs(p.sum() - 1.0) > 1e-12:
                raise ValueError(f"propensity vector for {key} is not a positive distribution")

    def vector(self, x):
        key = tuple(int(v) for v in np.atleast_1d(x))
        try:
            return self.probs[key]
        except KeyError:
            raise LevelError(f"covariate level {key} absent from propensity table") from None

    def lookup(self, X):
        X = np.asarray(X, dtype=np.int64)
        if X.ndim == 1:
            X = X[:, None]
        out = np.empty((len(X), self.n_treatments))
        uniq, groups = _group_rows(X)
        for key, rows in zip(uniq, groups):
            out[rows] = self.vector(key)
        return out

    def of(self, X, T):
        """p(T_k | X_k) for every row."""
        T = np.asarray(T, dtype=np.int64)
        if T.size and (T.min() < 0 or T.max() >= self.n_treatments):
            raise LevelError("treatment code outside propensity table levels")
        return self.lookup(X)[np.arange(len(T)), T]


def fit_propensity(dataset: Dataset, clip=0.01, smoothing=1.0) -> PropensityTable:
    """Add-``smoothing`` empirical p(T | X), floored at ``clip`` and renormalised."""
    if dataset.n_units == 0:
        raise ValueError("cannot fit propensities on an empty dataset")
    L = dataset.n_treatments
    probs = {}
    uniq, groups = _group_rows(dataset.X)
    for key, rows in zip(uniq, groups):
        counts = np.bincount(dataset.T[rows], minlength=L).astype(np.float64)
        probs[tuple(int(v) for v in key)] = _floor_simplex(counts + smoothing, clip)
    return PropensityTable(probs, L, clip)
