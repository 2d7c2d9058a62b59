import itertools

import numpy as np
import pytest

from vci.exceptions import ConfigError, DomainError, LevelError
from vci.numerics import make_stream
from vci.sim import (DiscreteNet, SimConfig, analytic_marginal, enumerate_elbo,
                     enumerate_true_psi, random_discrete_net, simulate, true_marginal,
                     true_propensity, valid_instances)


def test_config_validation():
    with pytest.raises(ConfigError):
        SimConfig(n_treatments=1)
    with pytest.raises(ConfigError):
        SimConfig(noise_y=-1.0)
    with pytest.raises(ConfigError):
        SimConfig(covariate_levels=())
    with pytest.raises(ConfigError):
        SimConfig(nonlinearity="relu")


def test_simulation_is_deterministic(small_sim):
    again = simulate(small_sim.config, 11)
    assert np.array_equal(again.Y, small_sim.Y)
    assert np.array_equal(again.T, small_sim.T)
    assert not np.array_equal(simulate(small_sim.config, 12).Y, small_sim.Y)


def test_factual_outcome_is_counterfactual_at_observed_level(small_sim):
    for a in range(small_sim.n_treatments):
        mask = small_sim.T == a
        assert np.array_equal(small_sim.counterfactual(a)[mask], small_sim.Y[mask])


def test_potential_outcomes_share_noise(small_sim):
    # Y(a) - Y(b) is noise-free: it depends only on Z and the treatment effects
    diff = small_sim.counterfactual(1) - small_sim.counterfactual(2)
    mean_diff = small_sim.outcome_mean(1) - small_sim.outcome_mean(2)
    assert np.allclose(diff, mean_diff, atol=1e-12)


def test_control_level_has_no_effect_column(small_sim):
    assert np.all(small_sim.generator.C[:, 0] == 0)
    assert small_sim.truth.shape == (4, 300, 12)


def test_true_propensity_matches_empirical_frequencies():
    sim = simulate(SimConfig(n_units=40000, n_genes=2, n_treatments=3), 0)
    table = true_propensity(sim)
    for key, p in table.probs.items():
        rows = np.all(sim.X == key, axis=1)
        freq = np.bincount(sim.T[rows], minlength=3) / rows.sum()
        se = np.sqrt(p * (1 - p) / rows.sum())
        assert np.all(np.abs(freq - p) < 5 * se)


def test_analytic_marginal_agrees_with_monte_carlo():
    cfg = SimConfig(n_units=50000, n_genes=5, nonlinearity="identity")
    sim = simulate(cfg, 4)
    for a in (0, 3):
        mc = true_marginal(sim, a)
        se = sim.counterfactual(a).std(axis=0) / np.sqrt(cfg.n_units)
        assert np.all(np.abs(mc - analytic_marginal(cfg, a)) < 5 * se)
    with pytest.raises(DomainError):
        analytic_marginal(SimConfig(), 0)


def test_outcome_mean_rejects_bad_level(small_sim):
    with pytest.raises(LevelError):
        small_sim.outcome_mean(9)


def test_discrete_net_validation():
    with pytest.raises(ConfigError):
        DiscreteNet([0.5, 0.6], [[1.0], [1.0]], [[1.0], [1.0]], [[[1.0]]])
    with pytest.raises(ConfigError):
        random_discrete_net(make_stream(0, "n"), nz=9)


def test_enumerate_elbo_hand_case():
    # |Z| = 2, uniform prior, Y binary: every quantity has a closed form
    net = DiscreteNet(
        p_x=[1.0], p_z_given_x=[[0.5, 0.5]], p_t_given_x=[[0.5, 0.5]],
        p_y_given_zt=[[[0.9, 0.1], [0.2, 0.8]], [[0.3, 0.7], [0.6, 0.4]]],
    )
    r = enumerate_elbo(net, 0, 0, 1, 0, 1)
    q = np.array([0.9, 0.3]) / 1.2
    q_cf = np.array([0.8, 0.4]) / 1.2
    assert np.isclose(r.lhs, np.log(0.5 * 0.9 * 0.8 + 0.5 * 0.3 * 0.4), atol=1e-15)
    assert np.isclose(r.recon, q @ np.log([0.9, 0.3]), atol=1e-15)
    assert np.isclose(r.covariate, np.log(0.6), atol=1e-15)
    assert np.isclose(r.kl, q @ np.log(q / q_cf), atol=1e-15)
    assert r.gap > 0


def test_enumerate_elbo_errors():
    net = DiscreteNet([1.0], [[1.0]], [[1.0, 0.0]], [[[1.0, 0.0], [0.5, 0.5]]])
    with pytest.raises(LevelError):
        enumerate_elbo(net, 0, 0, 0, 0, 5)
    with pytest.raises(DomainError):
        enumerate_elbo(net, 0, 0, 1, 0, 0)
    assert all(t == 0 and t_cf == 0 for _, t, t_cf, _, _ in valid_instances(net))


def test_true_psi_matches_brute_force():
    net = random_discrete_net(make_stream(3, "n"), nx=3, nz=2, nt=2, ny=3)
    net = DiscreteNet(net.p_x, net.p_z_given_x, net.p_t_given_x, net.p_y_given_zt,
                      y_values=[-1.0, 0.5, 2.0])
    total = 0.0
    for x, z, y in itertools.product(range(3), range(2), range(3)):
        total += net.p_x[x] * net.p_z_given_x[x, z] * net.p_y_given_zt[z, 1, y] * net.y_values[y]
    assert np.isclose(enumerate_true_psi(net, 1), total, atol=1e-15)


def test_one_level_tables_are_exactly_one():
    # an ulp short of 1 would make the |Z| = 1 bound gap nonzero by rounding
    for i in range(50):
        net = random_discrete_net(make_stream(i, "z1"), nx=2, nz=1, nt=2, ny=3)
        assert np.all(net.p_z_given_x == 1.0)
        assert all(enumerate_elbo(net, *inst).gap == 0.0 for inst in valid_instances(net))
