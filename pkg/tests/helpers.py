"""Tiny model configs and builders shared by the test modules."""

from __future__ import annotations

import dataclasses

import numpy as np

from s2slab.config import ModelConfig, StackConfig, rnmt_stack, transformer_stack
from s2slab.data import gen_task, make_batch
from s2slab.models import build_model
from s2slab.nn import DropoutSpec

VOCAB = 12
D = 8


def rnmt(layers=2):
    return rnmt_stack(layers, D, heads=2)


def trans(layers=2):
    return transformer_stack(layers, D, 2, 16)


def conv(layers=2):
    return StackConfig("convs2s", layers, D, 1, channels=[D] * layers, kernels=[3] * layers)


def tiny_configs(vocab: int = VOCAB, **kw) -> dict[str, ModelConfig]:
    common = {"label_smoothing": 0.1, **kw}
    return {
        "rnmt_plus": ModelConfig("rnmt_plus", vocab, rnmt(), rnmt(), **common).validate(),
        "transformer": ModelConfig("transformer", vocab, trans(), trans(), **common).validate(),
        "convs2s": ModelConfig("convs2s", vocab, conv(), conv(), **common).validate(),
        "trans_rnmt": ModelConfig("hybrid", vocab, trans(), rnmt(), **common).validate(),
        "rnmt_trans": ModelConfig("hybrid", vocab, rnmt(), trans(), **common).validate(),
        "cascaded": ModelConfig("cascaded", vocab, rnmt(), rnmt(), freeze_encoder=True,
                                cascade=trans(1), **common).validate(),
        "multi_column": ModelConfig("multi_column", vocab, rnmt(), rnmt(), freeze_encoder=True,
                                    columns=[rnmt(), trans()], **common).validate(),
    }


def build_all(vocab: int = VOCAB, seed: int = 0, **kw):
    """Every family, with the pre-trained sources that cascaded/multi-column need."""
    cfgs = tiny_configs(vocab, **kw)
    models = {}
    for name in ("rnmt_plus", "transformer", "convs2s", "trans_rnmt", "rnmt_trans"):
        models[name] = build_model(cfgs[name], rng=np.random.default_rng(seed))
    models["cascaded"] = build_model(cfgs["cascaded"], models["rnmt_plus"], np.random.default_rng(seed + 1))
    models["multi_column"] = build_model(cfgs["multi_column"], [models["rnmt_plus"], models["trans_rnmt"]],
                                         np.random.default_rng(seed + 2))
    return models


def with_dropout(cfg: ModelConfig, p: float = 0.1) -> ModelConfig:
    return dataclasses.replace(cfg, dropout=DropoutSpec(p, p, p, p)).validate()


def toy_batch(n: int = 4, vocab: int = VOCAB, seed: int = 0, len_range=(3, 6)):
    return make_batch(gen_task("toy_translation", n, len_range, vocab, seed))


def model_grad_errors(loss_fn, params, step: float = 1e-5, floor: float = 1e-6):
    """Backprop vs central differences over every coordinate of ``params``.

    Returns ``(worst relative error where |grad| >= floor, worst absolute error elsewhere)``.
    Coordinates below ``floor`` are dominated by roundoff in the difference quotient,
    so only their absolute error is meaningful.
    """
    from s2slab.tensor import backward

    params = list(params)
    for p in params:
        p.grad = None
    backward(loss_fn())
    rel = absolute = 0.0
    for p in params:
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad.copy()
        base = p.data.copy()
        numeric = np.zeros_like(base)
        for i in range(base.size):
            for sign in (1.0, -1.0):
                moved = base.copy()
                moved.flat[i] += sign * step
                p.data = moved
                numeric.flat[i] += sign * loss_fn().item() / (2 * step)
        p.data = base
        big = np.maximum(np.abs(analytic), np.abs(numeric)) >= floor
        diff = np.abs(analytic - numeric)
        if big.any():
            rel = max(rel, float((diff[big] / np.maximum(np.abs(analytic), np.abs(numeric))[big]).max()))
        if (~big).any():
            absolute = max(absolute, float(diff[~big].max()))
    return rel, absolute


def perturb(model, seed: int, scale: float = 0.3):
    rng = np.random.default_rng(seed)
    for p in model.parameters():
        p.data = np.asarray(p.data + rng.uniform(-scale, scale, size=p.shape), dtype=np.float64)


class LatticeModel:
    """Decoder-only stand-in whose logits are an arbitrary function of the emitted prefix."""

    def __init__(self, next_logits):
        self.next_logits = next_logits

    def encode(self, src, mask):
        return np.asarray(src).shape[0]

    def init_state(self, batch):
        return [None] * batch

    def step(self, state, tokens):
        from s2slab.tensor import Tensor

        # the first fed token is bos and does not join the prefix
        state = [() if p is None else p + (int(t),) for p, t in zip(state, tokens)]
        return Tensor(np.array([self.next_logits(p) for p in state], dtype=np.float64)), state

    def reorder(self, state, idx):
        return [state[i] for i in idx]


def random_lattice(vocab: int, seed: int):
    """Logits seeded by the prefix itself, so the same prefix always scores the same."""

    def next_logits(prefix):
        rng = np.random.default_rng([seed, len(prefix), *prefix])
        return (rng.normal(size=vocab) * 2.0).tolist()

    return next_logits
