"""Synthetic structural causal model with counterfactual ground truth, and an
exact-enumeration oracle over small discrete Bayesian networks.

Generator (per unit)::

    X_j ~ Uniform{0..levels_j-1}
    Z   = A @ onehot(X) + noise_z * eps_Z
    T   ~ softmax(confounding * W @ onehot(X))
    Y(a) = f(B @ Z + C[:, a]) + noise_y * U_Y

``U_Y`` is drawn once per unit and shared by every potential outcome, so
``Y(a)`` for ``a != T`` is the unit's exact counterfactual. Treatment 0 has
``C[:, 0] = 0`` and serves as control.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from .dataset import Dataset, covariate_onehot
from .exceptions import ConfigError, DomainError, LevelError
from .model import PropensityTable
from .numerics import make_stream

NONLINEARITIES = {"tanh": np.tanh, "identity": lambda v: v}


@dataclass(frozen=True)
class SimConfig:
    n_units: int = 20000
    n_genes: int = 2000
    latent_dim: int = 10
    n_treatments: int = 10
    covariate_levels: tuple = (3,)
    confounding: float = 1.0
    noise_z: float = 0.5
    noise_y: float = 0.2
    covariate_scale: float = 1.0
    effect_scale: float = 1.0
    de_fraction: float = 0.05
    nonlinearity: str = "tanh"
    mixing_seed: int = 0

    def __post_init__(self):
        for name in ("n_units", "n_genes", "latent_dim"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.n_treatments < 2:
            raise ConfigError("n_treatments must be >= 2")
        if not self.covariate_levels or min(self.covariate_levels) < 1:
            raise ConfigError("every covariate needs at least one level")
        for name in ("noise_z", "noise_y", "covariate_scale", "effect_scale", "confounding"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if not 0.0 <= self.de_fraction <= 1.0:
            raise ConfigError("de_fraction must lie in [0, 1]")
        if self.nonlinearity not in NONLINEARITIES:
            raise ConfigError(f"unknown nonlinearity {self.nonlinearity!r}")
        object.__setattr__(self, "covariate_levels", tuple(int(v) for v in self.covariate_levels))


@dataclass(frozen=True)
class Generator:
    A: np.ndarray  # latent_dim x sum(levels)
    B: np.ndarray  # n_genes x latent_dim
    C: np.ndarray  # n_genes x n_treatments
    W: np.ndarray  # n_treatments x sum(levels)


def make_generator(config: SimConfig) -> Generator:
    rng = make_stream(config.mixing_seed, "generator")
    p = sum(config.covariate_levels)
    d, n, L = config.latent_dim, config.n_genes, config.n_treatments
    A = rng.standard_normal((d, p)) * config.covariate_scale
    B = rng.standard_normal((n, d)) / np.sqrt(d)
    C = rng.standard_normal((n, L)) * 0.1 * config.effect_scale
    n_de = int(round(config.de_fraction * n))
    for a in range(1, L):
        genes = rng.permutation(n)[:n_de]
        C[genes, a] += rng.standard_normal(n_de) * 1.5 * config.effect_scale
    C[:, 0] = 0.0
    W = rng.standard_normal((L, p))
    return Generator(A, B, C, W)


@dataclass
class SimDataset(Dataset):
    """A :class:`Dataset` carrying the latent truth needed for counterfactuals."""

    Z: np.ndarray | None = None
    U: np.ndarray | None = None
    generator: Generator | None = None
    config: SimConfig | None = None

    def outcome_mean(self, a, Z=None):
        """E[Y(a) | Z]: the generator's regression function (U_Y averaged out)."""
        if not 0 <= a < self.n_treatments:
            raise LevelError(f"treatment level {a} outside 0..{self.n_treatments - 1}")
        Z = self.Z if Z is None else Z
        f = NONLINEARITIES[self.config.nonlinearity]
        return f(Z @ self.generator.B.T + self.generator.C[:, a])

    def counterfactual(self, a):
        """Ground-truth potential outcomes Y(a) for every unit."""
        return self.outcome_mean(a) + self.config.noise_y * self.U

    @property
    def truth(self):
        """All potential outcomes, shape (levels, units, genes)."""
        return np.stack([self.counterfactual(a) for a in range(self.n_treatments)])


def treatment_probabilities(generator: Generator, config: SimConfig, X):
    scores = config.confounding * covariate_onehot(X, config.covariate_levels) @ generator.W.T
    scores -= scores.max(axis=1, keepdims=True)
    p = np.exp(scores)
    return p / p.sum(axis=1, keepdims=True)


def simulate(config: SimConfig, seed: int) -> SimDataset:
    gen = make_generator(config)
    n_units, m = config.n_units, len(config.covariate_levels)
    X = np.empty((n_units, m), dtype=np.int64)
    rng_x = make_stream(seed, "covariates")
    for j, levels in enumerate(config.covariate_levels):
        X[:, j] = rng_x.integers(0, levels, size=n_units)
    ohx = covariate_onehot(X, config.covariate_levels)
    Z = ohx @ gen.A.T + config.noise_z * make_stream(seed, "latent").standard_normal(
        (n_units, config.latent_dim)
    )
    probs = treatment_probabilities(gen, config, X)
    u = make_stream(seed, "treatment").random(n_units)
    T = (u[:, None] > np.cumsum(probs, axis=1)).sum(axis=1)
    T = np.minimum(T, config.n_treatments - 1)
    U = make_stream(seed, "outcome").standard_normal((n_units, config.n_genes))

    sim = SimDataset(
        Y=np.zeros((n_units, config.n_genes)), X=X, T=T,
        n_treatments=config.n_treatments, covariate_levels=config.covariate_levels,
        Z=Z, U=U, generator=gen, config=config,
    )
    # Y is assembled from the same counterfactual computation so Y(T) == Y bitwise.
    for a in range(config.n_treatments):
        mask = T == a
        if mask.any():
            sim.Y[mask] = sim.counterfactual(a)[mask]
    return sim


def true_marginal(sim: SimDataset, a: int):
    """Per-gene average of the ground-truth Y(a) over all units."""
    return sim.counterfactual(a).mean(axis=0)


def true_propensity(sim: SimDataset) -> PropensityTable:
    """The generator's p(T | X) as a propensity table."""
    keys = list(itertools.product(*(range(n) for n in sim.config.covariate_levels)))
    probs = treatment_probabilities(sim.generator, sim.config, np.array(keys, dtype=np.int64))
    return PropensityTable(
        {k: p for k, p in zip(keys, probs)}, n_treatments=sim.n_treatments,
    )


def analytic_marginal(config: SimConfig, a: int):
    """Closed-form E[Y(a)] for the identity nonlinearity."""
    if config.nonlinearity != "identity":
        raise DomainError("analytic marginal is only available for the identity nonlinearity")
    gen = make_generator(config)
    mean_onehot = np.concatenate([np.full(n, 1.0 / n) for n in config.covariate_levels])
    return gen.B @ (gen.A @ mean_onehot) + gen.C[:, a]


# ---------------------------------------------------------------------------
# exact enumeration on discrete networks
# ---------------------------------------------------------------------------

MAX_SUPPORT = {"x": 4, "z": 4, "t": 4, "y": 8}


@dataclass(frozen=True)
class DiscreteNet:
    """Tables for X -> Z, X -> T, (Z, T) -> Y with ``Y`` taking ``y_values``."""

    p_x: np.ndarray        # (nx,)
    p_z_given_x: np.ndarray  # (nx, nz)
    p_t_given_x: np.ndarray  # (nx, nt)
    p_y_given_zt: np.ndarray  # (nz, nt, ny)
    y_values: np.ndarray = field(default=None)

    def __post_init__(self):
        tables = {
            "p_x": self.p_x, "p_z_given_x": self.p_z_given_x,
            "p_t_given_x": self.p_t_given_x, "p_y_given_zt": self.p_y_given_zt,
        }
        for name, tab in tables.items():
            tab = np.asarray(tab, dtype=np.float64)
            object.__setattr__(self, name, tab)
            if np.any(tab < 0):
                raise ConfigError(f"{name} has negative entries")
            if np.any(np.abs(tab.sum(axis=-1) - 1.0) > 1e-12):
                raise ConfigError(f"{name} rows must sum to 1")
        nx, nz, nt, ny = self.shape
        if self.p_z_given_x.shape != (nx, nz) or self.p_t_given_x.shape[0] != nx \
                or self.p_y_given_zt.shape[:2] != (nz, nt):
            raise ConfigError("inconsistent table shapes")
        for sym, size in zip("xzty", (nx, nz, nt, ny)):
            if size > MAX_SUPPORT[sym]:
                raise ConfigError(f"|{sym.upper()}| = {size} exceeds the enumeration cap {MAX_SUPPORT[sym]}")
        if self.y_values is None:
            object.__setattr__(self, "y_values", np.arange(ny, dtype=np.float64))
        else:
            object.__setattr__(self, "y_values", np.asarray(self.y_values, dtype=np.float64))

    @property
    def shape(self):
        return (len(self.p_x), self.p_z_given_x.shape[1], self.p_t_given_x.shape[1],
                self.p_y_given_zt.shape[2])


def random_discrete_net(rng, nx=2, nz=2, nt=2, ny=3, concentration=1.0) -> DiscreteNet:
    def rows(*shape):
        p = rng.dirichlet(np.full(shape[-1], concentration), size=shape[:-1])
        # numpy's draw can miss 1 by an ulp (a one-level row comes out as
        # 0.9999999999999999); renormalising makes such rows exactly 1
        return p / p.sum(axis=-1, keepdims=True)

    return DiscreteNet(
        p_x=rows(nx),
        p_z_given_x=rows(nx, nz),
        p_t_given_x=rows(nx, nt),
        p_y_given_zt=rows(nz, nt, ny),
    )


@dataclass(frozen=True)
class ElboReport:
    lhs: float
    elbo: float
    recon: float
    covariate: float
    kl: float

    @property
    def gap(self):
        return self.lhs - self.elbo


def _kl_discrete(p, q):
    support = p > 0
    if np.any(q[support] == 0):
        return np.inf
    return float(np.sum(p[support] * (np.log(p[support]) - np.log(q[support]))))


def enumerate_elbo(net: DiscreteNet, x, t, t_cf, y, y_cf) -> ElboReport:
    """Both sides of the counterfactual evidence bound, by exact summation.

    ``y``/``y_cf`` are indices into ``net.y_values``. The variational
    distributions are the net's exact posteriors ``p(z | y, x, t)`` and
    ``p(z | y_cf, x, t_cf)``.
    """
    nx, nz, nt, ny = net.shape
    for name, v, size in (("x", x, nx), ("t", t, nt), ("t_cf", t_cf, nt), ("y", y, ny),
                          ("y_cf", y_cf, ny)):
        if not 0 <= v < size:
            raise LevelError(f"{name}={v} outside support of size {size}")
    if net.p_x[x] == 0:
        raise DomainError(f"p(x={x}) is zero")
    prior = net.p_z_given_x[x]
    lik = net.p_y_given_zt[:, t, y]
    lik_cf = net.p_y_given_zt[:, t_cf, y_cf]
    joint = prior * lik
    joint_cf = prior * lik_cf
    evidence = joint.sum()
    evidence_cf = joint_cf.sum()
    if evidence * net.p_t_given_x[x, t] == 0 or evidence_cf * net.p_t_given_x[x, t_cf] == 0:
        raise DomainError("conditioning event has zero probability")
    q = joint / evidence
    q_cf = joint_cf / evidence_cf

    lhs = float(np.log(np.sum(q * lik_cf)) + np.log(evidence))
    support = q > 0
    with np.errstate(divide="ignore"):
        recon = float(np.sum(q[support] * np.log(lik[support])))
    covariate = float(np.log(evidence_cf))
    kl = _kl_discrete(q, q_cf)
    return ElboReport(lhs=lhs, elbo=recon + covariate - kl, recon=recon, covariate=covariate, kl=kl)


def valid_instances(net: DiscreteNet):
    """Every (x, t, t_cf, y, y_cf) for which :func:`enumerate_elbo` is defined."""
    nx, nz, nt, ny = net.shape
    p_y_given_xt = np.einsum("xz,zty->xty", net.p_z_given_x, net.p_y_given_zt)
    for x, t, t_cf, y, y_cf in itertools.product(range(nx), range(nt), range(nt), range(ny), range(ny)):
        if net.p_x[x] == 0:
            continue
        if p_y_given_xt[x, t, y] * net.p_t_given_x[x, t] > 0 and \
                p_y_given_xt[x, t_cf, y_cf] * net.p_t_given_x[x, t_cf] > 0:
            yield x, t, t_cf, y, y_cf


def enumerate_true_psi(net: DiscreteNet, a: int) -> float:
    """E[Y(a)] = sum_{x,z} p(x) p(z|x) E[Y | z, a]."""
    if not 0 <= a < net.shape[2]:
        raise LevelError(f"treatment level {a} outside support")
    cond_mean = net.p_y_given_zt[:, a, :] @ net.y_values
    return float(net.p_x @ net.p_z_given_x @ cond_mean)
