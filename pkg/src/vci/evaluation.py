"""Held-out evaluation protocol: OOD selection, DE genes, R^2 of averaged
predictions, and marginal-estimator comparisons."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .dataset import Dataset, SplitAssignment
from .exceptions import ConfigError, DomainError, LevelError
from .marginal import robust_marginal
from .numerics import make_stream
from .trainer import predict_counterfactual, predict_counterfactuals

logger = logging.getLogger(__name__)


def _level_mask(dataset, t):
    mask = dataset.T == t
    if not mask.any():
        raise LevelError(f"treatment level {t} not present in dataset")
    return mask


def pseudobulk_distance(dataset: Dataset, t: int) -> float:
    """Euclidean distance between the mean profile of level ``t`` and of all other units."""
    mask = _level_mask(dataset, t)
    if mask.all():
        return 0.0
    return float(np.linalg.norm(dataset.Y[mask].mean(axis=0) - dataset.Y[~mask].mean(axis=0)))


def rank_perturbations(dataset: Dataset):
    """Present treatment levels ordered by pseudobulk distance, largest first
    (ties broken by the smaller level)."""
    levels = [int(t) for t in np.unique(dataset.T)]
    dist = {t: pseudobulk_distance(dataset, t) for t in levels}
    return sorted(levels, key=lambda t: (-dist[t], t))


def select_ood(dataset: Dataset, k: int, rng, ratio=(4, 1)) -> SplitAssignment:
    """Hold out one random covariate tuple under the ``k`` most distant
    perturbations; split the remaining units train/test by ``ratio``."""
    n_levels = len(np.unique(dataset.T))
    if not 1 <= k < n_levels:
        raise ConfigError(f"k must satisfy 1 <= k < {n_levels} (number of treatment levels)")
    hardest = rank_perturbations(dataset)[:k]
    keys = dataset.covariate_keys()
    c = keys[int(rng.integers(len(keys)))]
    ood = dataset.covariate_mask(c) & np.isin(dataset.T, hardest)
    labels = np.full(dataset.n_units, "test", dtype="<U5")
    labels[ood] = "ood"
    rest = np.flatnonzero(~ood)
    rest = rest[rng.permutation(rest.size)]
    n_train = int(round(rest.size * ratio[0] / (ratio[0] + ratio[1])))
    labels[rest[:n_train]] = "train"
    return SplitAssignment(labels, [(c, int(a)) for a in sorted(hardest)])


def held_out_pairs(dataset: Dataset, splits: SplitAssignment):
    """(covariate tuple, perturbation) pairs of the ood units, sorted."""
    if splits.held_out:
        return sorted((tuple(c), int(a)) for c, a in splits.held_out)
    ood = splits.mask("ood")
    pairs = {(tuple(int(v) for v in x), int(t)) for x, t in zip(dataset.X[ood], dataset.T[ood])}
    return sorted(pairs)


def select_de_genes(dataset: Dataset, t: int, control: int, n_de: int):
    if not 0 < n_de <= dataset.n_genes:
        raise ConfigError(f"n_de must lie in 1..{dataset.n_genes}")
    diff = np.abs(dataset.Y[_level_mask(dataset, t)].mean(axis=0)
                  - dataset.Y[_level_mask(dataset, control)].mean(axis=0))
    # stable sort on -diff keeps ascending gene index among ties
    return np.argsort(-diff, kind="stable")[:n_de]


def r2_average(pred_mean, true_mean) -> float:
    """Coefficient of determination of ``pred_mean`` with ``true_mean`` as target."""
    pred = np.asarray(pred_mean, dtype=np.float64)
    true = np.asarray(true_mean, dtype=np.float64)
    if pred.shape != true.shape or true.ndim != 1 or true.size < 2:
        raise ValueError("r2_average needs two equal-length vectors of length >= 2")
    ss_tot = np.sum((true - true.mean()) ** 2)
    if ss_tot == 0:
        raise DomainError("target vector has zero variance")
    return float(1.0 - np.sum((true - pred) ** 2) / ss_tot)


@dataclass
class EvalReport:
    config: dict = field(default_factory=dict)
    cells: list = field(default_factory=list)
    summary: dict = field(default_factory=dict)
    estimators: list = field(default_factory=list)


CELL_COLUMNS = ("covariate", "perturbation", "n_test", "n_ood", "r2_all", "r2_de")
ESTIMATOR_COLUMNS = ("epoch", "method", "r2_all", "r2_de", "r2_all_sd", "r2_de_sd", "runs", "cells")


def _r2_or_nan(pred, true):
    try:
        return r2_average(pred, true)
    except DomainError:
        return math.nan


def _summarize_cells(cells, skipped):
    def avg(key):
        vals = [c[key] for c in cells if not math.isnan(c[key])]
        return float(np.mean(vals)) if vals else math.nan

    return {"r2_all": avg("r2_all"), "r2_de": avg("r2_de"), "cells": len(cells), "skipped": skipped}


def evaluate_ood(bundle, dataset: Dataset, splits: SplitAssignment, n_de=50, control=0,
                 samples=0, seed=0, predictor="model") -> EvalReport:
    """Score held-out (covariate, perturbation) cells.

    Test units sharing the held-out covariate tuple are mapped to the held-out
    perturbation and averaged; the average is compared with the ood units'
    empirical average on all genes and on the perturbation's DE genes.
    ``predictor='stratified'`` scores the covariate-only baseline instead
    (stratum mean, falling back to the treatment marginal).
    """
    if predictor not in ("model", "stratified"):
        raise ValueError("predictor must be 'model' or 'stratified'")
    test = splits.mask("test")
    ood = splits.mask("ood")
    n_de = min(n_de, dataset.n_genes)
    cells, skipped = [], 0
    for c, a in held_out_pairs(dataset, splits):
        cmask = dataset.covariate_mask(c)
        test_rows = np.flatnonzero(test & cmask)
        ood_rows = np.flatnonzero(ood & cmask & (dataset.T == a))
        if test_rows.size == 0 or ood_rows.size == 0:
            skipped += 1
            logger.warning("skipping cell covariate=%s perturbation=%s: empty subset", c, a)
            continue
        if predictor == "model":
            sub = dataset.subset(test_rows)
            rng = make_stream(seed, "evaluate", *c, a)
            pred = predict_counterfactual(bundle.network, sub.Y, sub.X, sub.T, a, samples, rng).mean(axis=0)
        else:
            pred = bundle.stratified.resolve(c, a)[0]
        truth = dataset.Y[ood_rows].mean(axis=0)
        de = select_de_genes(dataset, a, control, n_de)
        cells.append({
            "covariate": c, "perturbation": a, "n_test": int(test_rows.size),
            "n_ood": int(ood_rows.size), "r2_all": _r2_or_nan(pred, truth),
            "r2_de": _r2_or_nan(pred[de], truth[de]),
        })
    config = {"n_de": n_de, "control": control, "samples": samples, "seed": seed,
              "predictor": predictor, "model_seed": getattr(bundle, "seed", None),
              "model_epoch": getattr(bundle, "epoch", None)}
    return EvalReport(config, cells, _summarize_cells(cells, skipped))


def estimator_cells(bundle, dataset: Dataset, splits: SplitAssignment, a=None, n_de=50,
                    control=0, samples=1, seed=0):
    """Per-(covariate, perturbation) R^2 of the mean and robust estimators.

    Both estimators use training rows only; the target is the test-set
    empirical average of the cell. Returns a list of dicts.
    """
    train_mask = splits.mask("train")
    test_mask = splits.mask("test")
    train = dataset.subset(train_mask)
    levels = [a] if a is not None else [t for t in range(dataset.n_treatments) if t != control]
    n_de = min(n_de, dataset.n_genes)
    de_sets = {t: select_de_genes(dataset, t, control, n_de) for t in levels}
    out = []
    for c in train.covariate_keys():
        sub = train.subset(train.covariate_mask(c))
        c_test = test_mask & dataset.covariate_mask(c)
        wanted = [t for t in levels if np.any(c_test & (dataset.T == t))]
        if not wanted:
            continue
        rng = make_stream(seed, "estimate", *c)
        preds = predict_counterfactuals(bundle.network, sub.Y, sub.X, sub.T, wanted, samples, rng)
        for t in wanted:
            truth = dataset.Y[c_test & (dataset.T == t)].mean(axis=0)
            adj = preds[t]
            mean_est = adj.mean(axis=0)
            robust = robust_marginal(sub, None, bundle.propensity, t, adjustment=adj,
                                     covariate=c).psi_hat
            de = de_sets[t]
            for method, est in (("mean", mean_est), ("robust", robust)):
                out.append({
                    "covariate": c, "perturbation": t, "method": method,
                    "r2_all": _r2_or_nan(est, truth), "r2_de": _r2_or_nan(est[de], truth[de]),
                })
    return out


def aggregate_estimator_cells(runs_by_epoch):
    """Across-run summary of :func:`estimator_cells` output.

    ``runs_by_epoch`` maps epoch -> list of per-run cell lists. Each run is
    first reduced to its cell-averaged R^2 per method; the rows report the
    mean and standard deviation (ddof 1) of those run averages.
    """
    rows = []
    for epoch in sorted(runs_by_epoch):
        per_method = {"mean": ([], []), "robust": ([], [])}
        n_cells = 0
        for cells in runs_by_epoch[epoch]:
            n_cells = len(cells) // 2
            for method, (r_all, r_de) in per_method.items():
                sel = [c for c in cells if c["method"] == method]
                r_all.append(float(np.nanmean([c["r2_all"] for c in sel])))
                r_de.append(float(np.nanmean([c["r2_de"] for c in sel])))
        for method, (r_all, r_de) in per_method.items():
            rows.append({
                "epoch": int(epoch), "method": method,
                "r2_all": float(np.mean(r_all)), "r2_de": float(np.mean(r_de)),
                "r2_all_sd": float(np.std(r_all, ddof=1)) if len(r_all) > 1 else 0.0,
                "r2_de_sd": float(np.std(r_de, ddof=1)) if len(r_de) > 1 else 0.0,
                "runs": len(r_all), "cells": n_cells,
            })
    return rows


def compare_estimators(bundles, dataset: Dataset, splits: SplitAssignment, a=None, n_de=50,
                       control=0, samples=1, seed=0):
    """Mean-vs-robust comparison per checkpoint.

    ``bundles`` maps epoch -> model bundle, or epoch -> list of bundles (one per
    independent run; each run may carry its own split via a matching list in
    ``splits``). Returns rows with the across-run mean and standard deviation
    of the cell-averaged R^2 (see :func:`aggregate_estimator_cells`).
    """
    runs_by_epoch = {}
    for epoch, runs in bundles.items():
        runs = runs if isinstance(runs, (list, tuple)) else [runs]
        run_splits = splits if isinstance(splits, (list, tuple)) else [splits] * len(runs)
        if len(run_splits) != len(runs):
            raise ConfigError("need one split assignment per run")
        runs_by_epoch[epoch] = [
            estimator_cells(bundle, dataset, split, a, n_de, control, samples, seed)
            for bundle, split in zip(runs, run_splits)
        ]
    return aggregate_estimator_cells(runs_by_epoch)
