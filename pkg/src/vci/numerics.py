"""Dense feed-forward networks with hand-written backprop, Adam, and a
finite-difference gradient checker.

Everything runs in float64. Matrices are plain 2-D numpy arrays (rows are
units of a batch); parameter collections are ordered ``{name: array}``
mappings so that optimizers and serializers see a stable block order.
"""
from __future__ import annotations

import zlib
from dataclasses import dataclass, replace
from typing import Callable, Mapping, Sequence

import numpy as np

from .exceptions import NumericError, ShapeError

ACTIVATIONS = ("relu", "identity")


def make_stream(seed: int, *names) -> np.random.Generator:
    """Counter-based (Philox) generator keyed by ``seed`` and a name path.

    ``make_stream(7, "shuffle", 3)`` always yields the same stream, and it is
    statistically independent of ``make_stream(7, "shuffle", 4)``.
    """
    key = tuple(zlib.crc32(n.encode()) if isinstance(n, str) else int(n) for n in names)
    seq = np.random.SeedSequence(int(seed), spawn_key=key)
    return np.random.Generator(np.random.Philox(seq))


def _check_finite(arr, what):
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite values in {what}")


@dataclass(frozen=True)
class MlpParams:
    weights: tuple
    biases: tuple
    activations: tuple

    def __post_init__(self):
        if not (len(self.weights) == len(self.biases) == len(self.activations)):
            raise ShapeError("weights, biases and activations must have equal length")
        if not self.weights:
            raise ShapeError("an MLP needs at least one layer")
        for i, (w, b, act) in enumerate(zip(self.weights, self.biases, self.activations)):
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise ShapeError(f"layer {i}: weight {w.shape} incompatible with bias {b.shape}")
            if i and self.weights[i - 1].shape[1] != w.shape[0]:
                raise ShapeError(
                    f"layer {i}: input width {w.shape[0]} != previous output "
                    f"{self.weights[i - 1].shape[1]}"
                )
            if act not in ACTIVATIONS:
                raise ValueError(f"unknown activation {act!r}")
        if self.activations[-1] != "identity":
            raise ShapeError("final layer activation must be identity")

    @property
    def widths(self):
        return (self.weights[0].shape[0],) + tuple(w.shape[1] for w in self.weights)

    @property
    def n_in(self):
        return self.weights[0].shape[0]

    @property
    def n_out(self):
        return self.weights[-1].shape[1]

    def blocks(self, prefix=""):
        out = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"{prefix}W{i}"] = w
            out[f"{prefix}b{i}"] = b
        return out

    def with_blocks(self, blocks, prefix=""):
        n = len(self.weights)
        return replace(
            self,
            weights=tuple(np.asarray(blocks[f"{prefix}W{i}"], dtype=np.float64) for i in range(n)),
            biases=tuple(np.asarray(blocks[f"{prefix}b{i}"], dtype=np.float64) for i in range(n)),
        )


def init_mlp(widths: Sequence[int], rng: np.random.Generator, hidden_activation="relu",
             scale=1.0) -> MlpParams:
    """He-initialised MLP; the last layer is linear."""
    if len(widths) < 2 or min(widths) < 1:
        raise ShapeError(f"invalid widths {tuple(widths)}")
    weights, biases, acts = [], [], []
    n_layers = len(widths) - 1
    for i in range(n_layers):
        fan_in, fan_out = widths[i], widths[i + 1]
        last = i == n_layers - 1
        std = scale * np.sqrt((1.0 if last else 2.0) / fan_in)
        weights.append(rng.standard_normal((fan_in, fan_out)) * std)
        biases.append(np.zeros(fan_out))
        acts.append("identity" if last else hidden_activation)
    return MlpParams(tuple(weights), tuple(biases), tuple(acts))


def zeros_like_mlp(params: MlpParams) -> MlpParams:
    return MlpParams(
        tuple(np.zeros_like(w) for w in params.weights),
        tuple(np.zeros_like(b) for b in params.biases),
        params.activations,
    )


def mlp_forward(params: MlpParams, x, return_cache=False):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != params.n_in:
        raise ShapeError(f"input shape {x.shape} does not match first layer ({params.n_in} inputs)")
    cache = [x]
    h = x
    # overflow surfaces as NumericError below, not as a warning
    with np.errstate(over="ignore", invalid="ignore"):
        for w, b, act in zip(params.weights, params.biases, params.activations):
            h = h @ w + b
            if act == "relu":
                h = np.maximum(h, 0.0)
            cache.append(h)
    _check_finite(h, "mlp output")
    return (h, cache) if return_cache else h


def mlp_backward(params: MlpParams, x, output_grad, cache=None, input_grad=True):
    """Gradients of ``sum(mlp_forward(params, x) * output_grad)``.

    Returns ``(param_grads, input_grad)`` where ``param_grads`` is an
    :class:`MlpParams` of the same shapes. Pass ``input_grad=False`` to skip
    the (often wide) gradient with respect to the input; ``None`` is returned.
    """
    if cache is None:
        _, cache = mlp_forward(params, x, return_cache=True)
    g = np.asarray(output_grad, dtype=np.float64)
    out = cache[-1]
    if g.shape != out.shape:
        raise ShapeError(f"output_grad shape {g.shape} != output shape {out.shape}")
    n = len(params.weights)
    gw, gb = [None] * n, [None] * n
    for i in range(n - 1, -1, -1):
        if params.activations[i] == "relu":
            g = g * (cache[i + 1] > 0.0)
        gw[i] = cache[i].T @ g
        gb[i] = g.sum(axis=0)
        if i or input_grad:
            g = g @ params.weights[i].T
    grads = MlpParams(tuple(gw), tuple(gb), params.activations)
    return grads, (g if input_grad else None)


def gaussian_reparameterize(mean, logvar, noise):
    mean, logvar, noise = (np.asarray(a, dtype=np.float64) for a in (mean, logvar, noise))
    if not (mean.shape == logvar.shape == noise.shape):
        raise ShapeError(f"shape mismatch: mean {mean.shape}, logvar {logvar.shape}, noise {noise.shape}")
    return mean + np.exp(0.5 * logvar) * noise


def gaussian_reparameterize_backward(logvar, noise, sample_grad):
    """Returns (mean_grad, logvar_grad) for an upstream gradient on the sample."""
    sample_grad = np.asarray(sample_grad, dtype=np.float64)
    return sample_grad, sample_grad * 0.5 * np.exp(0.5 * np.asarray(logvar)) * noise


@dataclass(frozen=True)
class AdamState:
    m: Mapping
    v: Mapping
    step: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_init(params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8) -> AdamState:
    blocks = params.blocks() if hasattr(params, "blocks") else params
    return AdamState(
        m={k: np.zeros_like(a) for k, a in blocks.items()},
        v={k: np.zeros_like(a) for k, a in blocks.items()},
        lr=lr, beta1=beta1, beta2=beta2, eps=eps,
    )


def adam_step(params, grads, state: AdamState):
    """One bias-corrected Adam update.

    ``params`` and ``grads`` are either name->array mappings or objects with
    ``blocks()``/``with_blocks()`` (such as :class:`MlpParams`); the return
    value has the same kind as ``params``.
    """
    structured = hasattr(params, "blocks")
    p = params.blocks() if structured else params
    g = grads.blocks() if hasattr(grads, "blocks") else grads
    if set(p) != set(g) or set(p) != set(state.m):
        raise ShapeError("parameter, gradient and optimizer blocks differ")
    for name in p:
        if g[name].shape != p[name].shape or state.m[name].shape != p[name].shape:
            raise ShapeError(f"block {name}: shape mismatch")
        if not np.all(np.isfinite(g[name])):
            raise NumericError(f"non-finite gradient in parameter block {name!r}")
    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    new_p, new_m, new_v = {}, {}, {}
    for name in p:
        m = b1 * state.m[name] + (1.0 - b1) * g[name]
        v = b2 * state.v[name] + (1.0 - b2) * g[name] ** 2
        new_p[name] = p[name] - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        new_m[name], new_v[name] = m, v
    new_state = replace(state, m=new_m, v=new_v, step=t)
    return (params.with_blocks(new_p) if structured else new_p), new_state


def finite_diff_check(loss_fn: Callable, params: Mapping, step=1e-5, analytic=None) -> float:
    """Largest relative discrepancy between analytic and central-difference gradients.

    ``loss_fn(blocks)`` returns ``(loss, grads)``, or just the scalar loss when
    ``analytic`` gradients are supplied. It is called with perturbed copies of
    ``params`` and must be deterministic. The error for an entry is
    ``|analytic - numeric| / max(1, |numeric|)``.
    """
    if step <= 0:
        raise ValueError("step must be positive")

    def value(blocks):
        out = loss_fn(blocks)
        return float(out[0] if isinstance(out, tuple) else out)

    base = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    if analytic is None:
        loss0, grads = loss_fn(base)
    else:
        loss0, grads = value(base), analytic
    if not np.isfinite(loss0):
        raise NumericError("loss is not finite at the base point")
    worst = 0.0
    for name, arr in base.items():
        flat = arr.reshape(-1)
        g = np.asarray(grads[name], dtype=np.float64).reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = value(base)
            flat[i] = orig - step
            down = value(base)
            flat[i] = orig
            if not (np.isfinite(up) and np.isfinite(down)):
                raise NumericError(f"loss not finite while perturbing {name}[{i}]")
            numeric = (up - down) / (2.0 * step)
            worst = max(worst, abs(g[i] - numeric) / max(1.0, abs(numeric)))
    return worst
