from dataclasses import replace

import numpy as np
import pytest

from conftest import make_toy
from vci.exceptions import ConfigError
from vci.model import LatentGaussian
from vci.numerics import finite_diff_check, make_stream
from vci.objective import (ObjectiveConfig, draw_noise, kl_diag_gaussians, kl_diag_gaussians_grad,
                           objective, sae_loss, sample_counterfactual_treatments, term_gradients,
                           vci_objective)


def _noise(net, batch, seed=0, samples=1):
    return draw_noise(make_stream(seed, "n"), batch.T, net.latent_dim, net.n_genes,
                      net.n_treatments, samples)


def test_config_validation():
    with pytest.raises(ConfigError):
        ObjectiveConfig(detach_mode="all")
    with pytest.raises(ConfigError):
        ObjectiveConfig(omega1=-1)
    with pytest.raises(ConfigError):
        ObjectiveConfig(objective_kind="gan")


def test_kl_closed_form():
    q = LatentGaussian(np.zeros((1, 2)), np.zeros((1, 2)))
    assert kl_diag_gaussians(q, q)[0] == 0.0
    p = LatentGaussian(np.array([[1.0, 0.0]]), np.log(np.array([[2.0, 0.5]])))
    # per dim: 0.5*(s1/s2 + (m2-m1)^2/s2 - 1 + ln(s2/s1))
    expected = 0.5 * (1 / 2 + 1 / 2 - 1 + np.log(2)) + 0.5 * (1 / 0.5 - 1 + np.log(0.5))
    assert np.isclose(kl_diag_gaussians(q, p)[0], expected, atol=1e-15)


def test_kl_gradient():
    rng = make_stream(1, "kl")
    m1, l1, m2, l2 = rng.standard_normal((4, 3, 2))
    g = kl_diag_gaussians_grad(LatentGaussian(m1, l1), LatentGaussian(m2, l2))

    def loss(b):
        return float(kl_diag_gaussians(LatentGaussian(b["m1"], b["l1"]),
                                       LatentGaussian(b["m2"], b["l2"])).sum())

    err = finite_diff_check(loss, {"m1": m1, "l1": l1, "m2": m2, "l2": l2},
                            analytic=dict(zip(("m1", "l1", "m2", "l2"), g)))
    assert err < 1e-8


def test_counterfactual_treatments_differ_and_cover_levels():
    T = np.zeros(6000, dtype=int)
    t_cf = sample_counterfactual_treatments(T, 4, make_stream(0, "cf"))
    assert np.all(t_cf != T)
    counts = np.bincount(t_cf, minlength=4)
    assert counts[0] == 0 and np.all(np.abs(counts[1:] - 2000) < 200)
    with pytest.raises(ConfigError):
        sample_counterfactual_treatments(T, 1, make_stream(0, "cf"))


def test_total_combines_terms():
    net, batch, strat, _ = make_toy(1)
    cfg = ObjectiveConfig(omega1=0.7, omega2=0.3)
    report, _ = vci_objective(net, batch, strat, cfg, noise=_noise(net, batch))
    assert np.isclose(report.total, -report.recon_term - 0.7 * report.covariate_term
                      + 0.3 * report.kl_term, rtol=1e-14)
    assert report.kl_term >= 0


def test_sae_has_no_kl_and_uses_mse():
    net, batch, strat, _ = make_toy(2)
    report, _ = sae_loss(net, batch, strat, ObjectiveConfig(objective_kind="sae"),
                         noise=_noise(net, batch))
    assert report.kl_term == 0.0
    assert np.isclose(report.total, report.recon_term - report.covariate_term)
    with pytest.raises(ConfigError):
        sae_loss(net, batch, strat, ObjectiveConfig())


def test_frozen_noise_is_deterministic():
    net, batch, strat, _ = make_toy(3)
    cfg = ObjectiveConfig()
    a = objective(net, batch, strat, cfg, rng=make_stream(5, "x"))
    b = objective(net, batch, strat, cfg, rng=make_stream(5, "x"))
    assert a[0].total == b[0].total
    assert all(np.array_equal(a[1][k], b[1][k]) for k in a[1])


def _norm(grads, prefix):
    return sum(float(np.sum(v ** 2)) for k, v in grads.items() if k.startswith(prefix))


@pytest.mark.parametrize("mode", ["encoder", "both"])
def test_detach_modes_cut_paths(mode):
    net, batch, strat, _ = make_toy(4)
    noise = _noise(net, batch)
    terms = term_gradients(net, batch, strat, ObjectiveConfig(detach_mode=mode), noise)
    # the KL only reaches the decoder through the counterfactual, which is detached here
    assert _norm(terms["kl"], "decoder.") == 0.0
    if mode == "both":
        assert _norm(terms["covariate"], "") == 0.0
    else:
        assert _norm(terms["covariate"], "") > 0.0
    free = term_gradients(net, batch, strat, ObjectiveConfig(), noise)
    assert _norm(free["kl"], "decoder.") > 0.0


def test_multiple_counterfactual_samples_average():
    net, batch, strat, _ = make_toy(5)
    cfg = ObjectiveConfig(cf_sample_count=3)
    report, grads = objective(net, batch, strat, cfg, rng=make_stream(0, "s"))
    assert np.isfinite(report.total) and set(grads) == set(net.blocks())


def test_fallback_rows_are_excluded_unless_requested():
    net, batch, strat, _ = make_toy(6)
    # drop every stratum for level 2 so counterfactuals there fall back
    strat2 = replace(strat, strata={k: v for k, v in strat.strata.items() if k[1] != 2})
    noise = _noise(net, batch)
    masked, _ = objective(net, batch, strat2, ObjectiveConfig(), noise=noise)
    kept, _ = objective(net, batch, strat2, ObjectiveConfig(fallback_in_covariate_term=True), noise=noise)
    assert masked.covariate_term != kept.covariate_term
    assert masked.recon_term == kept.recon_term
