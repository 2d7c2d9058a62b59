"""Minibatch training loop and counterfactual prediction."""
from __future__ import annotations

import sys
import time
from dataclasses import dataclass, field

import numpy as np

from .dataset import Dataset, SplitAssignment
from .exceptions import ConfigError, LevelError, NumericError
from .model import (PropensityTable, StratifiedOutcomeModel, VciNetwork, decode_mean, encode,
                    fit_propensity, fit_stratified, init_network)
from .numerics import adam_init, adam_step, gaussian_reparameterize, make_stream
from .objective import ObjectiveConfig, objective


@dataclass(frozen=True)
class TrainConfig:
    # Desk-scale defaults; none of these are tuned values from the literature.
    epochs: int = 200
    batch_size: int = 128
    learning_rate: float = 1e-3
    latent_dim: int = 32
    encoder_hidden: tuple = (128, 128)
    decoder_hidden: tuple = (128, 128)
    objective: ObjectiveConfig = field(default_factory=ObjectiveConfig)
    seed: int = 0
    checkpoint_every: int = 0
    variance_floor: float = 1e-4
    propensity_clip: float = 0.01

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 1 or self.latent_dim < 1:
            raise ConfigError("batch_size and latent_dim must be positive")
        if self.learning_rate < 0:
            raise ConfigError("learning_rate must be >= 0")
        if any(w < 1 for w in (*self.encoder_hidden, *self.decoder_hidden)):
            raise ConfigError("hidden widths must be positive")
        if self.checkpoint_every < 0:
            raise ConfigError("checkpoint_every must be >= 0")
        object.__setattr__(self, "encoder_hidden", tuple(int(w) for w in self.encoder_hidden))
        object.__setattr__(self, "decoder_hidden", tuple(int(w) for w in self.decoder_hidden))


@dataclass(frozen=True)
class ModelBundle:
    """Everything needed to predict and estimate: networks plus the empirical models."""

    network: VciNetwork
    stratified: StratifiedOutcomeModel
    propensity: PropensityTable
    seed: int = 0
    epoch: int = 0


@dataclass
class TrainLog:
    epochs: list = field(default_factory=list)
    seconds: list = field(default_factory=list)
    # Instrumentation: how often each unit's outcome fed a fit or a gradient.
    rows_used: np.ndarray | None = None
    ood_rows_used: int = 0


def _progress(epoch, agg, stream):
    print(
        f"epoch={epoch} total={agg['total']:.6f} recon={agg['recon']:.6f} "
        f"cov={agg['covariate']:.6f} kl={agg['kl']:.6f}",
        file=stream, flush=True,
    )


def train(dataset: Dataset, splits: SplitAssignment | None, cfg: TrainConfig,
          callback=None, verbose=False, stream=None):
    """Fit the empirical models on training rows, then optimise the networks.

    ``callback(bundle)`` runs after every ``cfg.checkpoint_every`` epochs (and
    is not called when that is 0). Returns ``(bundle, log)``.
    """
    if splits is None:
        train_idx = np.arange(dataset.n_units)
        ood = np.zeros(dataset.n_units, dtype=bool)
    else:
        if len(splits) != dataset.n_units:
            raise ConfigError("split assignment does not match dataset size")
        train_idx = splits.indices("train")
        ood = splits.mask("ood")
    if train_idx.size == 0:
        raise ConfigError("training partition is empty")
    stream = sys.stderr if stream is None else stream

    log = TrainLog(rows_used=np.zeros(dataset.n_units, dtype=np.int64))
    train_set = dataset.subset(train_idx)
    strat = fit_stratified(train_set, variance_floor=cfg.variance_floor)
    prop = fit_propensity(train_set, clip=cfg.propensity_clip)
    log.rows_used[train_idx] += 2

    net = init_network(
        dataset.n_genes, dataset.covariate_levels, dataset.n_treatments, cfg.latent_dim,
        cfg.encoder_hidden, cfg.decoder_hidden, rng=make_stream(cfg.seed, "init"),
    )
    params = net.blocks()
    opt = adam_init(params, lr=cfg.learning_rate)
    obj_cfg = cfg.objective

    for epoch in range(1, cfg.epochs + 1):
        start = time.perf_counter()
        order = train_idx[make_stream(cfg.seed, "shuffle", epoch).permutation(train_idx.size)]
        sums = {"total": 0.0, "recon": 0.0, "covariate": 0.0, "kl": 0.0}
        for b, lo in enumerate(range(0, order.size, cfg.batch_size)):
            rows = order[lo:lo + cfg.batch_size]
            batch = dataset.subset(rows)
            net = net.with_blocks(params)
            rng = make_stream(cfg.seed, "noise", epoch, b)
            try:
                report, grads = objective(net, batch, strat, obj_cfg, rng=rng)
            except NumericError as exc:
                raise NumericError(f"epoch {epoch}, batch {b}: {exc}") from exc
            if not np.isfinite(report.total):
                raise NumericError(f"epoch {epoch}, batch {b}: non-finite loss")
            log.rows_used[rows] += 1
            params, opt = adam_step(params, grads, opt)
            k = len(rows)
            sums["total"] += report.total * k
            sums["recon"] += report.recon_term * k
            sums["covariate"] += report.covariate_term * k
            sums["kl"] += report.kl_term * k
        agg = {key: v / train_idx.size for key, v in sums.items()}
        log.epochs.append(agg)
        log.seconds.append(time.perf_counter() - start)
        if verbose:
            _progress(epoch, agg, stream)
        if callback is not None and cfg.checkpoint_every and epoch % cfg.checkpoint_every == 0:
            callback(ModelBundle(net.with_blocks(params), strat, prop, cfg.seed, epoch))

    log.ood_rows_used = int(log.rows_used[ood].sum())
    bundle = ModelBundle(net.with_blocks(params), strat, prop, cfg.seed, cfg.epochs)
    return bundle, log


def predict_counterfactual(network: VciNetwork, Y, X, T, a, samples=0, rng=None):
    """Expected outcome of every unit under treatment ``a``.

    With ``samples=0`` the encoder mean is decoded; otherwise the decoder mean
    is averaged over ``samples`` latent draws from ``rng``.
    """
    return predict_counterfactuals(network, Y, X, T, [a], samples, rng)[int(a)]


def predict_counterfactuals(network: VciNetwork, Y, X, T, levels, samples=0, rng=None):
    """:func:`predict_counterfactual` for several target levels, sharing one
    encoding and the same latent draws. Returns ``{level: predictions}``."""
    levels = [int(a) for a in levels]
    for a in levels:
        if not 0 <= a < network.n_treatments:
            raise LevelError(f"treatment level {a} outside 0..{network.n_treatments - 1}")
    if samples < 0:
        raise ValueError("samples must be >= 0")
    if samples and rng is None:
        raise ValueError("sampling predictions requires an rng")
    q = encode(network, Y, X, T)
    if samples == 0:
        latents = [q.mean]
    else:
        latents = [gaussian_reparameterize(q.mean, q.logvar, rng.standard_normal(q.mean.shape))
                   for _ in range(samples)]
    out = {}
    for a in levels:
        target = np.full(q.mean.shape[0], a, dtype=np.int64)
        total = decode_mean(network, latents[0], target)
        for z in latents[1:]:
            total = total + decode_mean(network, z, target)
        out[a] = total / len(latents)
    return out
