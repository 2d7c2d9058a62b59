import numpy as np
import pytest

from vci.exceptions import NumericError, ShapeError
from vci.numerics import (MlpParams, adam_init, adam_step, finite_diff_check,
                          gaussian_reparameterize, gaussian_reparameterize_backward, init_mlp,
                          make_stream, mlp_backward, mlp_forward, zeros_like_mlp)


def test_streams_are_reproducible_and_distinct():
    a = make_stream(3, "shuffle", 1).random(5)
    assert np.array_equal(a, make_stream(3, "shuffle", 1).random(5))
    assert not np.array_equal(a, make_stream(3, "shuffle", 2).random(5))
    assert not np.array_equal(a, make_stream(4, "shuffle", 1).random(5))


def test_init_shapes_and_final_identity():
    p = init_mlp((5, 7, 3), make_stream(0, "x"))
    assert p.widths == (5, 7, 3)
    assert p.activations == ("relu", "identity")
    assert all(np.all(b == 0) for b in p.biases)
    with pytest.raises(ShapeError):
        init_mlp((5,), make_stream(0, "x"))


def test_mlp_params_validation():
    w = np.zeros((2, 3))
    with pytest.raises(ShapeError):
        MlpParams((w,), (np.zeros(2),), ("identity",))
    with pytest.raises(ShapeError):
        MlpParams((w,), (np.zeros(3),), ("relu",))
    with pytest.raises(ValueError):
        MlpParams((w, np.zeros((3, 1))), (np.zeros(3), np.zeros(1)), ("tanh", "identity"))


def test_forward_rejects_wrong_width_and_nonfinite():
    p = init_mlp((3, 4, 2), make_stream(0, "x"))
    with pytest.raises(ShapeError):
        mlp_forward(p, np.zeros((2, 4)))
    big = p.with_blocks({**p.blocks(), "W1": np.full((4, 2), np.inf)})
    with pytest.raises(NumericError):
        mlp_forward(big, np.ones((1, 3)))


def test_zero_network_outputs_zero():
    p = zeros_like_mlp(init_mlp((3, 4, 2), make_stream(0, "x")))
    assert np.array_equal(mlp_forward(p, np.ones((5, 3))), np.zeros((5, 2)))


@pytest.mark.parametrize("seed", range(5))
def test_backward_matches_finite_differences(seed):
    rng = make_stream(seed, "bp")
    p = init_mlp((4, 6, 5, 3), rng)
    # zero biases can leave a pre-activation exactly on the relu kink
    p = p.with_blocks({k: v + 0.1 * rng.standard_normal(v.shape) if k.startswith("b") else v
                       for k, v in p.blocks().items()})
    x = rng.standard_normal((7, 4))
    upstream = rng.standard_normal((7, 3))

    def loss(blocks):
        return float(np.sum(mlp_forward(p.with_blocks(blocks), x) * upstream))

    grads, gx = mlp_backward(p, x, upstream)
    assert finite_diff_check(loss, p.blocks(), analytic=grads.blocks()) < 1e-7
    num = finite_diff_check(lambda b: float(np.sum(mlp_forward(p, b["x"]) * upstream)),
                            {"x": x}, analytic={"x": gx})
    assert num < 1e-7


def test_backward_can_skip_input_gradient():
    p = init_mlp((3, 2), make_stream(0, "x"))
    _, gx = mlp_backward(p, np.ones((2, 3)), np.ones((2, 2)), input_grad=False)
    assert gx is None


def test_finite_diff_quadratic_is_second_order():
    # loss 0.5*|p|^2 has gradient p; central differences are exact up to rounding
    p = {"a": make_stream(1, "q").standard_normal(10)}
    err = finite_diff_check(lambda b: 0.5 * float(np.sum(b["a"] ** 2)), p, step=1e-4,
                            analytic={"a": p["a"]})
    assert err < 1e-8


def test_finite_diff_detects_wrong_gradient():
    p = {"a": np.ones(3)}
    err = finite_diff_check(lambda b: (float(np.sum(b["a"] ** 2)), {"a": b["a"]}), p)
    assert err > 0.4


def test_reparameterize_backward():
    rng = make_stream(2, "r")
    mean, logvar, noise = rng.standard_normal((3, 4, 2))
    up = rng.standard_normal((4, 2))
    gm, glv = gaussian_reparameterize_backward(logvar, noise, up)

    def loss(b):
        return float(np.sum(gaussian_reparameterize(b["m"], b["lv"], noise) * up))

    assert finite_diff_check(loss, {"m": mean, "lv": logvar}, analytic={"m": gm, "lv": glv}) < 1e-8
    with pytest.raises(ShapeError):
        gaussian_reparameterize(mean, logvar[:, :1], noise)


def _reference_adam(p, grads, lr, b1=0.9, b2=0.999, eps=1e-8):
    m = np.zeros_like(p)
    v = np.zeros_like(p)
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        p = p - lr * (m / (1 - b1**t)) / (np.sqrt(v / (1 - b2**t)) + eps)
    return p


def test_adam_matches_reference_recurrence():
    rng = make_stream(0, "adam")
    p0 = rng.standard_normal(6)
    grads = [rng.standard_normal(6) for _ in range(4)]
    params, state = {"w": p0.copy()}, adam_init({"w": p0}, lr=0.01)
    for g in grads:
        params, state = adam_step(params, {"w": g}, state)
    assert state.step == 4
    assert np.allclose(params["w"], _reference_adam(p0, grads, 0.01), rtol=0, atol=1e-15)


def test_adam_first_step_moves_by_lr():
    params, state = adam_step({"w": np.zeros(3)}, {"w": np.array([2.0, -0.5, 1e-3])},
                              adam_init({"w": np.zeros(3)}, lr=0.1))
    assert np.allclose(params["w"], [-0.1, 0.1, -0.1], atol=1e-5)


def test_adam_on_structured_params_and_zero_lr():
    p = init_mlp((3, 2), make_stream(0, "x"))
    new, _ = adam_step(p, p, adam_init(p, lr=0.0))
    assert isinstance(new, MlpParams)
    assert all(np.array_equal(a, b) for a, b in zip(new.weights, p.weights))


def test_adam_rejects_nonfinite_gradient_naming_block():
    with pytest.raises(NumericError, match="'w'"):
        adam_step({"w": np.zeros(2)}, {"w": np.array([0.0, np.nan])}, adam_init({"w": np.zeros(2)}))
    with pytest.raises(ShapeError):
        adam_step({"w": np.zeros(2)}, {"v": np.zeros(2)}, adam_init({"w": np.zeros(2)}))
