import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from vci.estimator import StratifiedMeanRegressor, VCIEstimator
from vci.exceptions import LevelError
from vci.trainer import predict_counterfactual
from vci.validation import check_codes, check_outcomes, check_treatments, check_triplet

PARAMS = dict(latent_dim=2, encoder_hidden=(8,), decoder_hidden=(8,), epochs=2)


def test_params_and_clone():
    est = VCIEstimator(**PARAMS)
    assert est.get_params()["latent_dim"] == 2
    twin = clone(est.set_params(epochs=3))
    assert twin.get_params()["epochs"] == 3 and not hasattr(twin, "bundle_")


def test_fit_transform_predict(small_sim):
    d = small_sim
    est = VCIEstimator(**PARAMS).fit(d.Y, d.X, d.T)
    assert est.n_features_in_ == d.n_genes
    assert est.transform(d.Y, d.X, d.T).shape == (d.n_units, 2)
    pred = est.predict(d.Y, d.X, d.T, 1)
    assert np.array_equal(pred, predict_counterfactual(est.bundle_.network, d.Y, d.X, d.T, 1))
    robust = est.estimate_marginal(d.Y, d.X, d.T, 1, samples=0)
    mean = est.estimate_marginal(d.Y, d.X, d.T, 1, method="mean", samples=0)
    assert robust.method == "robust" and np.allclose(mean.psi_hat, pred.mean(axis=0))
    sub = est.estimate_marginal(d.Y, d.X, d.T, 1, covariate=(0, 1), samples=0)
    assert sub.covariate == (0, 1)
    with pytest.raises(ValueError):
        est.estimate_marginal(d.Y, d.X, d.T, 1, method="median")


def test_unfitted_and_mismatched_inputs(small_sim):
    d = small_sim
    with pytest.raises(NotFittedError):
        VCIEstimator().transform(d.Y, d.X, d.T)
    est = VCIEstimator(**PARAMS).fit(d.Y, d.X, d.T)
    with pytest.raises(ValueError):
        est.transform(d.Y[:, :3], d.X, d.T)
    with pytest.raises(ValueError):
        est.transform(d.Y, d.X[:5], d.T)
    with pytest.raises(LevelError):
        est.transform(d.Y[:1], np.array([[0, 9]]), d.T[:1])


def test_stratified_regressor(small_sim):
    d = small_sim
    XT = np.column_stack([d.X, d.T])
    reg = StratifiedMeanRegressor().fit(XT, d.Y)
    pred = reg.predict(XT)
    rows = np.all(XT == XT[0], axis=1)
    assert np.allclose(pred[0], d.Y[rows].mean(axis=0))
    assert reg.score(XT, d.Y) > 0
    assert clone(reg).get_params() == {"min_count": 2, "variance_floor": 1e-4}
    with pytest.raises(ValueError):
        reg.predict(XT[:, :2])


def test_validation_helpers():
    with pytest.raises(ValueError):
        check_outcomes(np.array([[np.nan]]))
    with pytest.raises(ValueError):
        check_outcomes(np.ones((2, 3)), n_genes=2)
    assert check_codes([1, 2]).shape == (2, 1)
    with pytest.raises(ValueError):
        check_codes([[0.5]])
    with pytest.raises(LevelError):
        check_codes([[-1]])
    with pytest.raises(LevelError):
        check_treatments([0, 3], n_treatments=3)
    with pytest.raises(ValueError):
        check_triplet(np.ones((2, 1)), [[0]], [0, 1])
