"""Gradient checks for every layer: inputs and all parameters, at random points.

Each case builds the layer from a seed, draws a random input, and returns the
largest relative error between backprop and central differences over the
input and every parameter.  A fixed random projection turns outputs into a
scalar so no coordinate's gradient is structurally zero.
"""

from __future__ import annotations

import numpy as np

from s2slab import nn
from s2slab import tensor as T
from s2slab.tensor import Tensor, grad_check, grad_check_params

STEP = 1e-5


def _project(out: Tensor, rng: np.random.Generator) -> np.ndarray:
    return rng.uniform(0.5, 1.5, size=out.shape) * rng.choice([-1.0, 1.0], size=out.shape)


def _check(fn, x0: np.ndarray, params, rng) -> float:
    """fn(x: Tensor) -> Tensor.  Checks d/dx and d/dparams of sum(fn(x) * R)."""
    with T.no_grad():
        r = Tensor(_project(fn(Tensor(x0)), rng))
    err = grad_check(lambda x: (fn(x) * r).sum(), x0, STEP)
    x_const = Tensor(x0)
    perr = grad_check_params(lambda: (fn(x_const) * r).sum(), params, STEP)
    return max([err, *perr.values()])


def _randomize(module: nn.Module, rng) -> None:
    """Move every parameter off its initial value (LN gains 1, biases 0 are too symmetric)."""
    for p in module.parameters():
        p.data = np.asarray(p.data + rng.uniform(-0.3, 0.3, size=p.shape), dtype=np.float64)


def lstm_cell(seed: int) -> float:
    rng = np.random.default_rng(seed)
    cell = nn.LSTMCell(3, 4, rng)
    _randomize(cell, rng)
    h, c = Tensor(rng.normal(size=(2, 4))), Tensor(rng.normal(size=(2, 4)))

    def fn(x):
        h1, c1 = cell.step(x, h, c)
        return T.concat([h1, c1], axis=-1)

    return _check(fn, rng.normal(size=(2, 3)), cell.parameters(), rng)


def bidirectional_layer(seed: int) -> float:
    rng = np.random.default_rng(seed)
    layer = nn.BiLSTMLayer(3, 4, rng)
    _randomize(layer, rng)
    mask = np.array([[True, True, True], [True, True, False]])
    return _check(lambda x: layer(x, mask), rng.normal(size=(2, 3, 3)), layer.parameters(), rng)


def additive_attention(seed: int) -> float:
    rng = np.random.default_rng(seed)
    att = nn.MultiHeadAdditiveAttention(4, 6, 4, 2, rng, d_value=6, d_out=4)
    _randomize(att, rng)
    keys = Tensor(rng.normal(size=(2, 3, 6)))
    mask = np.array([[True, True, True], [True, False, True]])
    return _check(lambda q: att(q, keys, keys, mask)[0], rng.normal(size=(2, 4)), att.parameters(), rng)


def dot_attention(seed: int) -> float:
    rng = np.random.default_rng(seed)
    att = nn.MultiHeadDotAttention(4, 2, rng, d_key=6)
    keys = Tensor(rng.normal(size=(2, 3, 6)))
    mask = np.array([[True, True, True], [True, True, False]])
    return _check(lambda q: att(q, keys, keys, mask)[0], rng.normal(size=(2, 2, 4)), att.parameters(), rng)


def causal_self_attention(seed: int) -> float:
    rng = np.random.default_rng(seed)
    att = nn.MultiHeadDotAttention(4, 2, rng)
    return _check(lambda x: att(x, x, x, None, causal=True)[0], rng.normal(size=(2, 3, 4)),
                  att.parameters(), rng)


def feed_forward(seed: int) -> float:
    rng = np.random.default_rng(seed)
    ff = nn.FeedForward(4, 6, rng)
    _randomize(ff, rng)
    return _check(lambda x: ff(x), rng.normal(size=(2, 3, 4)), ff.parameters(), rng)


def transformer_sublayer(seed: int) -> float:
    rng = np.random.default_rng(seed)
    ff = nn.FeedForward(4, 6, rng)
    norm = nn.LayerNorm(4)
    _randomize(ff, rng)
    _randomize(norm, rng)
    return _check(lambda x: nn.transformer_sublayer(x, ff, norm), rng.normal(size=(2, 3, 4)),
                  ff.parameters() + norm.parameters(), rng)


def layer_norm(seed: int) -> float:
    rng = np.random.default_rng(seed)
    norm = nn.LayerNorm(5)
    _randomize(norm, rng)
    return _check(norm, rng.normal(size=(3, 5)), norm.parameters(), rng)


def conv_glu(seed: int) -> float:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for causal in (False, True):
        conv = nn.ConvGLU(3, 4, 3, rng, causal=causal)
        _randomize(conv, rng)
        worst = max(worst, _check(lambda x: conv(x) + conv.shortcut(x), rng.normal(size=(2, 4, 3)),
                                  conv.parameters(), rng))
    return worst


def weight_norm(seed: int) -> float:
    rng = np.random.default_rng(seed)
    g = Tensor(np.array(rng.uniform(0.5, 2.0)), requires_grad=True)
    err_v = _check(lambda v: nn.weight_norm_reparam(v, g), rng.normal(size=(3, 4)), [g], rng)
    v = Tensor(rng.normal(size=(3, 4)))
    err_g = _check(lambda s: nn.weight_norm_reparam(v, s), np.array(rng.uniform(0.5, 2.0)), [], rng)
    return max(err_v, err_g)


CASES = {
    "lstm_cell": lstm_cell,
    "bidirectional_layer": bidirectional_layer,
    "additive_attention": additive_attention,
    "dot_attention": dot_attention,
    "causal_self_attention": causal_self_attention,
    "transformer_sublayer": transformer_sublayer,
    "feed_forward": feed_forward,
    "conv_glu": conv_glu,
    "weight_norm": weight_norm,
    "layer_norm": layer_norm,
}

POINTS = 5


def worst_error(name: str) -> float:
    return max(CASES[name](seed) for seed in range(POINTS))
