import math

import numpy as np
import pytest

from vci.dataset import Dataset, SplitAssignment
from vci.evaluation import (aggregate_estimator_cells, compare_estimators, estimator_cells,
                            evaluate_ood, held_out_pairs, pseudobulk_distance, r2_average,
                            rank_perturbations, select_de_genes, select_ood)
from vci.exceptions import ConfigError, DomainError, LevelError
from vci.numerics import make_stream
from vci.trainer import TrainConfig, train


def _toy():
    Y = np.array([[0.0, 0.0], [0.0, 2.0], [3.0, 4.0], [1.0, 0.0]])
    return Dataset(Y, np.zeros((4, 1), int), np.array([0, 0, 1, 2]))


def test_pseudobulk_distance_by_hand():
    d = _toy()
    # level 1 mean (3,4) vs others (1/3, 2/3)
    assert np.isclose(pseudobulk_distance(d, 1), np.hypot(3 - 1 / 3, 4 - 2 / 3))
    with pytest.raises(LevelError):
        pseudobulk_distance(d, 7)


def test_rank_ties_break_by_level():
    d = Dataset(np.array([[1.0], [-1.0], [0.0]]), np.zeros((3, 1), int), np.array([0, 1, 2]))
    assert rank_perturbations(d) == [0, 1, 2]


def test_select_ood_structure(small_sim):
    splits = select_ood(small_sim, 2, make_stream(0, "s"))
    labels = splits.labels
    assert set(np.unique(labels)) <= {"train", "test", "ood"}
    c, _ = splits.held_out[0]
    ood = splits.mask("ood")
    assert np.all(np.all(small_sim.X[ood] == c, axis=1))
    assert set(small_sim.T[ood]) <= {a for _, a in splits.held_out}
    rest = (~ood).sum()
    assert splits.mask("train").sum() == round(rest * 4 / 5)
    again = select_ood(small_sim, 2, make_stream(0, "s"))
    assert np.array_equal(again.labels, labels)
    assert held_out_pairs(small_sim, SplitAssignment(labels)) == sorted(
        (c, a) for c, a in splits.held_out if np.any(ood & (small_sim.T == a)))


def test_select_ood_rejects_bad_k(small_sim):
    for k in (0, 4):
        with pytest.raises(ConfigError):
            select_ood(small_sim, k, make_stream(0, "s"))


def test_de_genes():
    d = _toy()
    # |(3, 4) - (0, 1)| ties at 3, lower gene index wins
    assert list(select_de_genes(d, 1, 0, 1)) == [0]
    # |(1, 0) - (0, 1)| ties too; against level 1 instead, gene 1 moves more
    assert list(select_de_genes(d, 2, 1, 1)) == [1]
    assert sorted(select_de_genes(d, 1, 0, 2)) == [0, 1]
    with pytest.raises(ConfigError):
        select_de_genes(d, 1, 0, 3)


def test_r2_average():
    t = np.array([1.0, 2.0, 3.0])
    assert r2_average(t, t) == 1.0
    assert r2_average(np.full(3, 2.0), t) == 0.0
    with pytest.raises(DomainError):
        r2_average(t, np.ones(3))
    with pytest.raises(ValueError):
        r2_average(t, t[:2])


def test_true_counterfactual_average_scores_high():
    # the evaluation target is reachable: averaging the test units' true Y(a)
    # recovers the ood cell average
    from vci.sim import SimConfig, simulate
    sim = simulate(SimConfig(n_units=20000, n_genes=12, latent_dim=3, n_treatments=4), 5)
    splits = select_ood(sim, 2, make_stream(1, "s"))
    for c, a in held_out_pairs(sim, splits):
        cm = sim.covariate_mask(c)
        pred = sim.counterfactual(a)[splits.mask("test") & cm].mean(axis=0)
        truth = sim.Y[splits.mask("ood") & cm & (sim.T == a)].mean(axis=0)
        assert r2_average(pred, truth) > 0.95


@pytest.fixture(scope="module")
def trained(request):
    from vci.sim import SimConfig, simulate
    sim = simulate(SimConfig(n_units=600, n_genes=15, latent_dim=3, n_treatments=4), 3)
    splits = select_ood(sim, 2, make_stream(0, "s"))
    cks = {}
    bundle, _ = train(sim, splits, TrainConfig(epochs=4, latent_dim=3, encoder_hidden=(16,),
                                               decoder_hidden=(16,), checkpoint_every=2),
                      callback=lambda b: cks.__setitem__(b.epoch, b))
    return sim, splits, bundle, cks


def test_evaluate_ood_report(trained):
    sim, splits, bundle, _ = trained
    report = evaluate_ood(bundle, sim, splits, n_de=5)
    assert report.summary["cells"] == len(report.cells) == len(held_out_pairs(sim, splits))
    assert report.config["n_de"] == 5 and report.config["model_epoch"] == 4
    base = evaluate_ood(bundle, sim, splits, n_de=5, predictor="stratified")
    assert base.config["predictor"] == "stratified"
    with pytest.raises(ValueError):
        evaluate_ood(bundle, sim, splits, predictor="oracle")


def test_compare_estimators_rows(trained):
    sim, splits, _, cks = trained
    rows = compare_estimators(cks, sim, splits, n_de=5)
    assert [(r["epoch"], r["method"]) for r in rows] == [
        (2, "mean"), (2, "robust"), (4, "mean"), (4, "robust")]
    cells = estimator_cells(cks[4], sim, splits, n_de=5)
    agg = aggregate_estimator_cells({4: [cells, cells]})
    assert agg[0]["runs"] == 2 and agg[0]["r2_de_sd"] == 0.0
    assert math.isclose(agg[1]["r2_de"], rows[3]["r2_de"])
    with pytest.raises(ConfigError):
        compare_estimators({4: [cks[4]]}, sim, [splits, splits])
