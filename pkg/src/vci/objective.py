"""Training losses: the variational causal objective and the semi-autoencoder
loss, both with exact hand-derived gradients.

Sign convention: every ``total`` is a quantity to *minimise*. For the
variational objective::

    total = -recon - omega1 * covariate + omega2 * kl

where ``recon`` is the mean decoder log-likelihood of the factual outcome,
``covariate`` the mean log-density of the generated counterfactual under the
stratified outcome model, and ``kl`` the mean KL divergence between the
factual and counterfactual latent posteriors. All terms are averaged over
batch rows and summed over genes/latents.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dataset import Dataset, covariate_onehot, onehot
from .exceptions import ConfigError, ShapeError
from .model import LOG_2PI, LOGVAR_BOUND, StratifiedOutcomeModel, VciNetwork
from .numerics import mlp_backward, mlp_forward

DETACH_MODES = ("none", "encoder", "both")
OBJECTIVE_KINDS = ("vci", "sae")
TERMS = ("recon", "covariate", "kl")


@dataclass(frozen=True)
class ObjectiveConfig:
    omega1: float = 1.0
    omega2: float = 0.1
    omega_sae: float = 1.0
    detach_mode: str = "none"
    objective_kind: str = "vci"
    cf_sample_count: int = 1
    cf_mode: str = "sample"
    # Whether counterfactuals whose (X, T') stratum is only covered by the
    # treatment-marginal fallback enter the covariate term.
    fallback_in_covariate_term: bool = False

    def __post_init__(self):
        if min(self.omega1, self.omega2, self.omega_sae) < 0:
            raise ConfigError("objective weights must be >= 0")
        if self.detach_mode not in DETACH_MODES:
            raise ConfigError(f"detach_mode must be one of {DETACH_MODES}")
        if self.objective_kind not in OBJECTIVE_KINDS:
            raise ConfigError(f"objective_kind must be one of {OBJECTIVE_KINDS}")
        if self.cf_sample_count < 1:
            raise ConfigError("cf_sample_count must be >= 1")
        if self.cf_mode not in ("sample", "mean"):
            raise ConfigError("cf_mode must be 'sample' or 'mean'")


@dataclass
class LossReport:
    """Term values for one batch.

    For ``vci``: ``total = -recon_term - omega1*covariate_term + omega2*kl_term``.
    For ``sae``: ``recon_term`` is the mean squared error and
    ``total = recon_term - omega_sae*covariate_term``; ``kl_term`` is 0.
    ``grad_norms`` maps each term to the L2 norm of its weighted gradient
    contribution, when requested.
    """

    total: float
    recon_term: float
    covariate_term: float
    kl_term: float
    grad_norms: dict | None = None


@dataclass(frozen=True)
class ObjectiveNoise:
    """Frozen randomness for one evaluation: counterfactual treatments, latent
    noise and outcome noise, one row per (sample, unit)."""

    cf_treatments: np.ndarray
    latent: np.ndarray
    outcome: np.ndarray


def kl_diag_gaussians(q1, q2):
    """KL(q1 || q2) for diagonal Gaussians, summed over the last axis."""
    m1, lv1 = np.asarray(q1.mean, dtype=np.float64), np.asarray(q1.logvar, dtype=np.float64)
    m2, lv2 = np.asarray(q2.mean, dtype=np.float64), np.asarray(q2.logvar, dtype=np.float64)
    if not (m1.shape == lv1.shape == m2.shape == lv2.shape):
        raise ShapeError(f"dimension mismatch: {m1.shape} vs {m2.shape}")
    return 0.5 * np.sum(np.exp(lv1 - lv2) + (m2 - m1) ** 2 * np.exp(-lv2) - 1.0 + lv2 - lv1, axis=-1)


def kl_diag_gaussians_grad(q1, q2):
    """Partial derivatives of the KL with respect to (mean1, logvar1, mean2, logvar2)."""
    m1, lv1, m2, lv2 = q1.mean, q1.logvar, q2.mean, q2.logvar
    diff_scaled = (m2 - m1) * np.exp(-lv2)
    ratio = np.exp(lv1 - lv2)
    return (
        -diff_scaled,
        0.5 * (ratio - 1.0),
        diff_scaled,
        0.5 * (1.0 - ratio - (m2 - m1) * diff_scaled),
    )


def sample_counterfactual_treatments(T, n_levels, rng):
    """Draw each T'_k uniformly from the levels other than T_k."""
    if n_levels < 2:
        raise ConfigError("counterfactual treatments need at least two levels")
    T = np.asarray(T, dtype=np.int64)
    return (T + 1 + rng.integers(0, n_levels - 1, size=T.shape)) % n_levels


def draw_noise(rng, T, latent_dim, n_genes, n_treatments, samples=1) -> ObjectiveNoise:
    T_rep = np.tile(np.asarray(T, dtype=np.int64), samples)
    t_cf = sample_counterfactual_treatments(T_rep, n_treatments, rng)
    latent = rng.standard_normal((len(T_rep), latent_dim))
    outcome = rng.standard_normal((len(T_rep), n_genes))
    return ObjectiveNoise(t_cf, latent, outcome)


def _inside(raw):
    return ((raw > -LOGVAR_BOUND) & (raw < LOGVAR_BOUND)).astype(np.float64)


def _add(acc, grads, prefix):
    for k, v in grads.blocks(prefix).items():
        acc[k] = acc[k] + v


def _evaluate(net: VciNetwork, Y, X, T, strat, cfg, noise, weights, frozen_cf=None):
    """Forward pass, and a backward pass when ``weights`` is given.

    ``weights`` scales the three minimised terms ``(-recon, -covariate, kl)``
    (``(mse, -covariate, 0)`` for the semi-autoencoder); their weighted sum is
    differentiated. ``frozen_cf`` substitutes a constant counterfactual in the
    terms severed by ``cfg.detach_mode`` (forward only; used to check detached
    gradients numerically). Returns ``(values, grads)``.
    """
    vci = cfg.objective_kind == "vci"
    d, n = net.latent_dim, net.n_genes
    S = cfg.cf_sample_count
    Y = np.tile(Y, (S, 1))
    X = np.tile(X, (S, 1))
    T = np.tile(T, S)
    t_cf = noise.cf_treatments
    if len(t_cf) != len(T) or noise.latent.shape != (len(T), d) or noise.outcome.shape != (len(T), n):
        raise ShapeError("noise does not match batch size, sample count or model dims")
    B = len(T)
    ohx = covariate_onehot(X, net.covariate_levels)
    oht = onehot(T, net.n_treatments)
    oht_cf = onehot(t_cf, net.n_treatments)

    # factual encode -> latent sample
    enc_in = np.hstack([Y, ohx, oht])
    h1, enc_cache1 = mlp_forward(net.encoder, enc_in, return_cache=True)
    mu1, lv1_raw = h1[:, :d], h1[:, d:]
    lv1 = np.clip(lv1_raw, -LOGVAR_BOUND, LOGVAR_BOUND)
    sd1 = np.exp(0.5 * lv1)
    z = mu1 + sd1 * noise.latent

    # factual decode
    dec_in1 = np.hstack([z, oht])
    g1, dec_cache1 = mlp_forward(net.decoder, dec_in1, return_cache=True)
    my, lvy_raw = g1[:, :n], g1[:, n:]
    lvy = np.clip(lvy_raw, -LOGVAR_BOUND, LOGVAR_BOUND)
    resid = Y - my
    if vci:
        inv_var_y = np.exp(-lvy)
        recon = float(np.mean(-0.5 * np.sum(LOG_2PI + lvy + resid**2 * inv_var_y, axis=1)))
    else:
        recon = float(np.mean(resid**2))

    # counterfactual decode -> generated outcome
    dec_in2 = np.hstack([z, oht_cf])
    g2, dec_cache2 = mlp_forward(net.decoder, dec_in2, return_cache=True)
    m2, lv2y_raw = g2[:, :n], g2[:, n:]
    lv2y = np.clip(lv2y_raw, -LOGVAR_BOUND, LOGVAR_BOUND)
    sd2y = np.exp(0.5 * lv2y)
    y_cf = m2 + sd2y * noise.outcome if cfg.cf_mode == "sample" else m2
    y_cov = y_enc = y_cf
    if frozen_cf is not None:
        if weights is not None:
            raise ValueError("frozen_cf is forward-only")
        if cfg.detach_mode == "both":
            y_cov = frozen_cf
        if cfg.detach_mode != "none":
            y_enc = frozen_cf
    cov_rows, cov_dy = strat.loglik(y_cov, X, t_cf, return_grad=True)
    if not cfg.fallback_in_covariate_term:
        keep = strat.has_stratum(X, t_cf).astype(np.float64)
        cov_rows = cov_rows * keep
        cov_dy = cov_dy * keep[:, None]
    covariate = float(np.mean(cov_rows))

    kl = 0.0
    if vci:
        enc_in2 = np.hstack([y_enc, ohx, oht_cf])
        h2, enc_cache2 = mlp_forward(net.encoder, enc_in2, return_cache=True)
        mu2, lv2_raw = h2[:, :d], h2[:, d:]
        lv2 = np.clip(lv2_raw, -LOGVAR_BOUND, LOGVAR_BOUND)
        diff = mu2 - mu1
        ratio = np.exp(lv1 - lv2)
        inv_var2 = np.exp(-lv2)
        kl = float(np.mean(0.5 * np.sum(ratio + diff**2 * inv_var2 - 1.0 + lv2 - lv1, axis=1)))

    values = (recon, covariate, kl)
    if weights is None:
        return values, y_cf

    w_rec, w_cov, w_kl = weights
    grads = {k: np.zeros_like(v) for k, v in net.blocks().items()}
    inv_b = 1.0 / B

    # factual reconstruction
    if vci:
        d_my = -w_rec * inv_b * resid * inv_var_y
        d_lvy = w_rec * inv_b * 0.5 * (1.0 - resid**2 * inv_var_y) * _inside(lvy_raw)
    else:
        d_my = -w_rec * 2.0 * resid / resid.size
        d_lvy = np.zeros_like(lvy)
    dec_g1, d_dec_in1 = mlp_backward(net.decoder, dec_in1, np.hstack([d_my, d_lvy]), dec_cache1)
    _add(grads, dec_g1, "decoder.")
    d_z = d_dec_in1[:, :d]
    d_mu1 = np.zeros_like(mu1)
    d_lv1 = np.zeros_like(lv1)

    # gradient reaching the generated counterfactual
    d_ycf = np.zeros_like(y_cf)
    if cfg.detach_mode != "both":
        d_ycf -= w_cov * inv_b * cov_dy
    if vci and w_kl != 0.0:
        scale = w_kl * inv_b
        d_mu1 += scale * -diff * inv_var2
        d_lv1 += scale * 0.5 * (ratio - 1.0)
        d_mu2 = scale * diff * inv_var2
        d_lv2 = scale * 0.5 * (1.0 - ratio - diff**2 * inv_var2) * _inside(lv2_raw)
        through_input = cfg.detach_mode == "none"
        enc_g2, d_enc_in2 = mlp_backward(
            net.encoder, enc_in2, np.hstack([d_mu2, d_lv2]), enc_cache2, input_grad=through_input
        )
        _add(grads, enc_g2, "encoder.")
        if through_input:
            d_ycf += d_enc_in2[:, :n]

    if np.any(d_ycf):
        d_m2 = d_ycf
        if cfg.cf_mode == "sample":
            d_lv2y = d_ycf * 0.5 * sd2y * noise.outcome * _inside(lv2y_raw)
        else:
            d_lv2y = np.zeros_like(lv2y)
        dec_g2, d_dec_in2 = mlp_backward(net.decoder, dec_in2, np.hstack([d_m2, d_lv2y]), dec_cache2)
        _add(grads, dec_g2, "decoder.")
        d_z = d_z + d_dec_in2[:, :d]

    d_mu1 += d_z
    d_lv1 = (d_lv1 + d_z * 0.5 * sd1 * noise.latent) * _inside(lv1_raw)
    enc_g1, _ = mlp_backward(net.encoder, enc_in, np.hstack([d_mu1, d_lv1]), enc_cache1, input_grad=False)
    _add(grads, enc_g1, "encoder.")
    return values, grads


def _term_weights(cfg):
    if cfg.objective_kind == "vci":
        return (1.0, cfg.omega1, cfg.omega2)
    return (1.0, cfg.omega_sae, 0.0)


def _objective(net, batch, strat, cfg, rng, noise, term_grads, with_grads):
    if noise is None:
        if rng is None:
            raise ValueError("either rng or noise must be supplied")
        noise = draw_noise(rng, batch.T, net.latent_dim, net.n_genes, net.n_treatments,
                           cfg.cf_sample_count)
    weights = _term_weights(cfg)
    values, grads = _evaluate(net, batch.Y, batch.X, batch.T, strat, cfg, noise,
                              weights if with_grads else None)
    recon, covariate, kl = values
    if cfg.objective_kind == "vci":
        total = -recon - cfg.omega1 * covariate + cfg.omega2 * kl
    else:
        total = recon - cfg.omega_sae * covariate
    norms = None
    if term_grads:
        norms = {}
        for i, term in enumerate(TERMS):
            w = [0.0, 0.0, 0.0]
            w[i] = weights[i]
            _, g = _evaluate(net, batch.Y, batch.X, batch.T, strat, cfg, noise, tuple(w))
            norms[term] = float(np.sqrt(sum(np.sum(v**2) for v in g.values())))
    return LossReport(total, recon, covariate, kl, norms), grads


def vci_objective(net: VciNetwork, batch: Dataset, strat: StratifiedOutcomeModel,
                  cfg: ObjectiveConfig, rng=None, noise=None, term_grads=False, with_grads=True):
    """Variational causal objective and its gradient for one batch.

    Randomness comes from ``noise`` if given, else it is drawn from ``rng``.
    Returns ``(LossReport, grads)`` with ``grads`` keyed like ``net.blocks()``.
    """
    if cfg.objective_kind != "vci":
        raise ConfigError("vci_objective needs objective_kind='vci'")
    return _objective(net, batch, strat, cfg, rng, noise, term_grads, with_grads)


def sae_loss(net: VciNetwork, batch: Dataset, strat: StratifiedOutcomeModel,
             cfg: ObjectiveConfig, rng=None, noise=None, term_grads=False, with_grads=True):
    """Semi-autoencoder loss: reconstruction MSE minus weighted counterfactual log-likelihood."""
    if cfg.objective_kind != "sae":
        raise ConfigError("sae_loss needs objective_kind='sae'")
    return _objective(net, batch, strat, cfg, rng, noise, term_grads, with_grads)


def generated_counterfactual(net, batch, cfg, noise):
    """The generated counterfactual outcomes for a batch under frozen noise."""
    strat_free = _PassThrough(net.n_genes)
    _, y_cf = _evaluate(net, batch.Y, batch.X, batch.T, strat_free,
                        ObjectiveConfig(**{**cfg.__dict__, "objective_kind": "sae"}), noise, None)
    return y_cf


class _PassThrough:
    def __init__(self, n_genes):
        self.n_genes = n_genes

    def has_stratum(self, X, T):
        return np.ones(len(T), dtype=bool)

    def loglik(self, Y, X, T, return_grad=False):
        zeros = np.zeros(len(Y))
        return (zeros, np.zeros_like(Y)) if return_grad else zeros


def detached_total(net, batch, strat, cfg, noise, frozen_cf):
    """Objective value with ``frozen_cf`` standing in for the counterfactual in
    every term the detach mode severs. Its ordinary derivative equals the
    detached gradient returned by :func:`objective`."""
    values, _ = _evaluate(net, batch.Y, batch.X, batch.T, strat, cfg, noise, None, frozen_cf)
    recon, covariate, kl = values
    if cfg.objective_kind == "vci":
        return -recon - cfg.omega1 * covariate + cfg.omega2 * kl
    return recon - cfg.omega_sae * covariate


def term_gradients(net, batch, strat, cfg, noise):
    """Weighted gradient contribution of each term separately, keyed by term name."""
    weights = _term_weights(cfg)
    out = {}
    for i, term in enumerate(TERMS):
        w = [0.0, 0.0, 0.0]
        w[i] = weights[i]
        _, out[term] = _evaluate(net, batch.Y, batch.X, batch.T, strat, cfg, noise, tuple(w))
    return out


def objective(net, batch, strat, cfg, rng=None, noise=None, with_grads=True):
    """Dispatch on ``cfg.objective_kind``."""
    fn = vci_objective if cfg.objective_kind == "vci" else sae_loss
    return fn(net, batch, strat, cfg, rng=rng, noise=noise, with_grads=with_grads)
