import pytest

from vci.dataset import Dataset
from vci.model import fit_propensity, fit_stratified, init_network
from vci.numerics import make_stream
from vci.sim import SimConfig, simulate

_CRITERIA = []


def record_criterion(number, passed, detail):
    line = f"criterion {number}: {'PASS' if passed else 'FAIL'} ({detail})"
    _CRITERIA.append(line)
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for line in _CRITERIA:
            terminalreporter.write_line(line)


@pytest.fixture
def small_sim():
    cfg = SimConfig(n_units=300, n_genes=12, latent_dim=3, n_treatments=4, covariate_levels=(2, 3))
    return simulate(cfg, 11)


@pytest.fixture
def toy_setup():
    """A 4-latent, 8-gene, 3-treatment network with a fitted stratified model."""
    return make_toy(0)


def make_toy(seed, hidden=(5,), n_rows=6):
    cfg = SimConfig(n_units=60, n_genes=8, latent_dim=2, n_treatments=3, covariate_levels=(2,))
    sim = simulate(cfg, seed)
    strat = fit_stratified(sim)
    net = init_network(8, (2,), 3, latent_dim=4, encoder_hidden=hidden, decoder_hidden=hidden,
                       rng=make_stream(seed, "toy-net"))
    batch = Dataset(sim.Y[:n_rows], sim.X[:n_rows], sim.T[:n_rows], 3, (2,))
    return net, batch, strat, fit_propensity(sim)
