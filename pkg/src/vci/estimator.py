"""scikit-learn style wrappers around the trainer, predictor and estimators."""
from __future__ import annotations

from sklearn.base import BaseEstimator, RegressorMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .dataset import Dataset
from .marginal import covariate_marginal, mean_marginal, robust_marginal
from .model import encode, fit_stratified
from .numerics import make_stream
from .objective import ObjectiveConfig
from .trainer import TrainConfig, predict_counterfactual, train
from .validation import check_codes, check_outcomes, check_triplet


class VCIEstimator(TransformerMixin, BaseEstimator):
    """Counterfactual outcome model.

    ``fit(Y, X, T)`` takes outcomes (units x genes), covariate codes and
    treatment codes. ``transform`` returns latent means, ``predict`` the
    expected outcomes under a target treatment.
    """

    def __init__(self, latent_dim=32, encoder_hidden=(128, 128), decoder_hidden=(128, 128),
                 epochs=200, batch_size=128, learning_rate=1e-3, objective="vci",
                 omega1=1.0, omega2=0.1, omega_sae=1.0, detach_mode="none",
                 variance_floor=1e-4, propensity_clip=0.01, n_treatments=None,
                 covariate_levels=None, random_state=0, verbose=False):
        self.latent_dim = latent_dim
        self.encoder_hidden = encoder_hidden
        self.decoder_hidden = decoder_hidden
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.objective = objective
        self.omega1 = omega1
        self.omega2 = omega2
        self.omega_sae = omega_sae
        self.detach_mode = detach_mode
        self.variance_floor = variance_floor
        self.propensity_clip = propensity_clip
        self.n_treatments = n_treatments
        self.covariate_levels = covariate_levels
        self.random_state = random_state
        self.verbose = verbose

    def _config(self):
        obj = ObjectiveConfig(omega1=self.omega1, omega2=self.omega2, omega_sae=self.omega_sae,
                              detach_mode=self.detach_mode, objective_kind=self.objective)
        return TrainConfig(
            epochs=self.epochs, batch_size=self.batch_size, learning_rate=self.learning_rate,
            latent_dim=self.latent_dim, encoder_hidden=tuple(self.encoder_hidden),
            decoder_hidden=tuple(self.decoder_hidden), objective=obj,
            seed=int(self.random_state), variance_floor=self.variance_floor,
            propensity_clip=self.propensity_clip,
        )

    def fit(self, Y, X, T):
        Y, X, T = check_triplet(Y, X, T)
        data = Dataset(Y, X, T, self.n_treatments, self.covariate_levels)
        bundle, log = train(data, None, self._config(), verbose=self.verbose)
        self.bundle_ = bundle
        self.train_log_ = log
        self.n_features_in_ = data.n_genes
        self.n_treatments_ = data.n_treatments
        self.covariate_levels_ = data.covariate_levels
        return self

    def _checked(self, Y, X, T):
        check_is_fitted(self, "bundle_")
        return check_triplet(Y, X, T, self.n_features_in_, self.covariate_levels_, self.n_treatments_)

    def transform(self, Y, X, T):
        """Encoder means, shape (units, latent_dim)."""
        Y, X, T = self._checked(Y, X, T)
        return encode(self.bundle_.network, Y, X, T).mean

    def fit_transform(self, Y, X, T):
        return self.fit(Y, X, T).transform(Y, X, T)

    def predict(self, Y, X, T, target, samples=0):
        """Expected outcomes of every unit under treatment ``target``."""
        Y, X, T = self._checked(Y, X, T)
        rng = make_stream(self.random_state, "predict")
        return predict_counterfactual(self.bundle_.network, Y, X, T, target, samples, rng)

    def estimate_marginal(self, Y, X, T, target, method="robust", covariate=None, samples=1):
        """Per-gene marginal outcome estimate under ``target``; see :mod:`vci.marginal`."""
        Y, X, T = self._checked(Y, X, T)
        data = Dataset(Y, X, T, self.n_treatments_, self.covariate_levels_)
        rng = make_stream(self.random_state, "estimate")
        net, prop = self.bundle_.network, self.bundle_.propensity
        if method == "robust":
            if covariate is None:
                return robust_marginal(data, net, prop, target, samples, rng)
            return covariate_marginal(data, net, prop, covariate, target, samples, rng)
        if method != "mean":
            raise ValueError("method must be 'mean' or 'robust'")
        if covariate is not None:
            data = data.subset(data.covariate_mask(covariate))
        return mean_marginal(predict_counterfactual(net, data.Y, data.X, data.T, target, samples, rng),
                             target, covariate)


class StratifiedMeanRegressor(RegressorMixin, BaseEstimator):
    """Covariate-only baseline: predicts the training mean of the matching
    (covariate tuple, treatment) stratum, else the treatment-level mean.

    ``X`` holds integer code columns with the treatment in the last column;
    ``y`` is the outcome matrix.
    """

    def __init__(self, variance_floor=1e-4, min_count=2):
        self.variance_floor = variance_floor
        self.min_count = min_count

    def fit(self, X, y):
        X = check_codes(X)
        if X.shape[1] < 1:
            raise ValueError("X needs at least the treatment column")
        y = check_outcomes(y)
        if len(y) != len(X):
            raise ValueError(f"X has {len(X)} rows, y has {len(y)}")
        data = Dataset(y, X[:, :-1], X[:, -1])
        self.model_ = fit_stratified(data, self.variance_floor, self.min_count)
        self.n_features_in_ = X.shape[1]
        return self

    def predict(self, X):
        check_is_fitted(self, "model_")
        X = check_codes(X)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} columns, expected {self.n_features_in_}")
        return self.model_.lookup(X[:, :-1], X[:, -1])[0]
