import numpy as np
import pytest

from vci.dataset import SplitAssignment
from vci.exceptions import ConfigError, LevelError
from vci.evaluation import select_ood
from vci.model import init_network, zero_network
from vci.numerics import make_stream
from vci.sim import SimConfig, simulate
from vci.trainer import TrainConfig, predict_counterfactual, predict_counterfactuals, train

SMALL = dict(latent_dim=3, encoder_hidden=(16,), decoder_hidden=(16,), batch_size=64)


def test_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(epochs=0)
    with pytest.raises(ConfigError):
        TrainConfig(encoder_hidden=(0,))


def test_zero_learning_rate_preserves_init(small_sim):
    bundle, log = train(small_sim, None, TrainConfig(epochs=1, learning_rate=0.0, **SMALL))
    init = init_network(small_sim.n_genes, small_sim.covariate_levels, small_sim.n_treatments,
                        3, (16,), (16,), rng=make_stream(0, "init"))
    blocks = bundle.network.blocks()
    assert all(np.array_equal(blocks[k], v) for k, v in init.blocks().items())
    assert len(log.epochs) == 1


def test_training_is_deterministic(small_sim):
    a, _ = train(small_sim, None, TrainConfig(epochs=2, seed=4, **SMALL))
    b, _ = train(small_sim, None, TrainConfig(epochs=2, seed=4, **SMALL))
    c, _ = train(small_sim, None, TrainConfig(epochs=2, seed=5, **SMALL))
    ba, bb, bc = a.network.blocks(), b.network.blocks(), c.network.blocks()
    assert all(np.array_equal(ba[k], bb[k]) for k in ba)
    assert not all(np.array_equal(ba[k], bc[k]) for k in ba)


def test_loss_decreases_on_smoke_config():
    sim = simulate(SimConfig(n_units=512, n_genes=20, latent_dim=3, n_treatments=4), 1)
    _, log = train(sim, None, TrainConfig(epochs=50, **SMALL))
    assert log.epochs[-1]["total"] < log.epochs[0]["total"]
    assert log.epochs[-1]["recon"] > log.epochs[0]["recon"]


def test_ood_rows_never_used(small_sim):
    splits = select_ood(small_sim, 2, make_stream(0, "s"))
    assert splits.mask("ood").any()
    _, log = train(small_sim, splits, TrainConfig(epochs=2, **SMALL))
    assert log.ood_rows_used == 0
    assert np.all(log.rows_used[splits.mask("test")] == 0)
    assert np.all(log.rows_used[splits.mask("train")] == 2 + 2)


def test_empty_training_split(small_sim):
    splits = SplitAssignment(np.full(small_sim.n_units, "test"))
    with pytest.raises(ConfigError):
        train(small_sim, splits, TrainConfig(epochs=1, **SMALL))


def test_checkpoint_callback(small_sim):
    seen = []
    train(small_sim, None, TrainConfig(epochs=4, checkpoint_every=2, **SMALL),
          callback=lambda b: seen.append(b.epoch))
    assert seen == [2, 4]


def test_progress_lines(small_sim, capsys):
    import sys
    train(small_sim, None, TrainConfig(epochs=2, **SMALL), verbose=True, stream=sys.stderr)
    lines = capsys.readouterr().err.strip().splitlines()
    assert len(lines) == 2 and lines[0].startswith("epoch=1 total=") and " kl=" in lines[0]


def test_zero_network_predicts_zero(small_sim):
    net = zero_network(init_network(small_sim.n_genes, small_sim.covariate_levels, 4, 3, (4,), (4,)))
    pred = predict_counterfactual(net, small_sim.Y, small_sim.X, small_sim.T, 2)
    assert np.array_equal(pred, np.zeros_like(small_sim.Y))


def test_prediction_sampling_and_errors(small_sim):
    bundle, _ = train(small_sim, None, TrainConfig(epochs=1, **SMALL))
    net, d = bundle.network, small_sim
    a = predict_counterfactual(net, d.Y, d.X, d.T, 1, 2, make_stream(0, "p"))
    b = predict_counterfactual(net, d.Y, d.X, d.T, 1, 2, make_stream(0, "p"))
    assert np.array_equal(a, b) and a.shape == d.Y.shape
    many = predict_counterfactuals(net, d.Y, d.X, d.T, [1], 2, make_stream(0, "p"))
    assert np.array_equal(many[1], a)
    with pytest.raises(LevelError):
        predict_counterfactual(net, d.Y, d.X, d.T, 4)
    with pytest.raises(ValueError):
        predict_counterfactual(net, d.Y, d.X, d.T, 1, samples=1)


def test_self_prediction_without_noise():
    sim = simulate(SimConfig(n_units=2000, n_genes=20, latent_dim=3, n_treatments=3,
                             noise_y=0.0, noise_z=0.5), 2)
    bundle, _ = train(sim, None, TrainConfig(epochs=40, latent_dim=4, encoder_hidden=(32,),
                                             decoder_hidden=(32,), batch_size=64, learning_rate=3e-3))
    pred = predict_counterfactual(bundle.network, sim.Y, sim.X, sim.T, sim.T[0])
    rows = sim.T == sim.T[0]
    resid = np.sum((pred[rows] - sim.Y[rows]) ** 2)
    total = np.sum((sim.Y[rows] - sim.Y[rows].mean(axis=0)) ** 2)
    assert 1 - resid / total > 0.9
