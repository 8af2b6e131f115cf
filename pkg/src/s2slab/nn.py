"""Neural building blocks: layer norm, per-gate LN LSTM, attention, sublayers, conv+GLU.

Layers operate on batched tensors: sequences are ``[B, T, d]`` and single
steps are ``[B, d]``.  Dropout is active only when a ``numpy.random.Generator``
is passed in; ``rng=None`` means inference.
"""

from __future__ import annotations

import contextlib
import math
import threading
from dataclasses import dataclass
from typing import Callable, Iterator

import numpy as np

from s2slab import tensor as T
from s2slab.errors import (
    AllMasked,
    EmptySequence,
    InvalidProbability,
    PositionOutOfRange,
    ShapeMismatch,
    ZeroDirection,
)
from s2slab.tensor import Tensor

MASK_VALUE = -1e9
INIT_SCALE = 0.04

_local = threading.local()


@contextlib.contextmanager
def symbolic():
    """Build modules without allocating weights (zero-stride placeholders)."""
    prev = getattr(_local, "symbolic", False)
    _local.symbolic = True
    try:
        yield
    finally:
        _local.symbolic = prev


def is_symbolic() -> bool:
    return getattr(_local, "symbolic", False)


class Parameter(Tensor):
    __slots__ = ()

    def __init__(self, data):
        super().__init__(data, requires_grad=True)


def _alloc(shape, fill: Callable[[tuple], np.ndarray]) -> Parameter:
    shape = tuple(int(s) for s in shape)
    if is_symbolic():
        p = Parameter.__new__(Parameter)
        p.data = np.broadcast_to(np.float64(0.0), shape)
        p.grad, p.requires_grad, p._parents, p._backward, p.op = None, True, (), None, "leaf"
        return p
    return Parameter(fill(shape))


def uniform(rng: np.random.Generator, shape, scale: float = INIT_SCALE) -> Parameter:
    return _alloc(shape, lambda s: rng.uniform(-scale, scale, size=s))


def glorot(rng: np.random.Generator, shape) -> Parameter:
    fan_in, fan_out = shape[-2], shape[-1]
    scale = math.sqrt(6.0 / (fan_in + fan_out))
    return uniform(rng, shape, scale)


def constant(shape, value: float) -> Parameter:
    return _alloc(shape, lambda s: np.full(s, float(value)))


class Module:
    """Parameter container; attributes that are Parameters or Modules are discovered in order."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        """Depth-first in attribute order; a shared Parameter is reported once, under its first name."""
        seen: set[int] = set()
        for name, p in self._walk(prefix):
            if id(p) not in seen:
                seen.add(id(p))
                yield name, p

    def _walk(self, prefix: str) -> Iterator[tuple[str, Parameter]]:
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Parameter):
                yield full, value
            elif isinstance(value, Module):
                yield from value._walk(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item._walk(f"{full}.{i}.")
                    elif isinstance(item, Parameter):
                        yield f"{full}.{i}", item

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


# -- dropout --------------------------------------------------------------

@dataclass
class DropoutSpec:
    input_p: float = 0.0
    residual_p: float = 0.0
    relu_p: float = 0.0
    attention_p: float = 0.0

    def __post_init__(self):
        for name in ("input_p", "residual_p", "relu_p", "attention_p"):
            p = getattr(self, name)
            if not 0.0 <= p < 1.0:
                raise InvalidProbability(f"{name}={p} outside [0, 1)")


def dropout(x: Tensor, p: float, rng: np.random.Generator | None, training: bool = True) -> Tensor:
    """Inverted dropout: survivors are scaled by 1/(1-p) so inference is the identity."""
    if not 0.0 <= p < 1.0:
        raise InvalidProbability(f"dropout probability {p} outside [0, 1)")
    if p == 0.0 or rng is None or not training:
        return x
    keep = (rng.random(x.shape) >= p) / (1.0 - p)
    return x * keep


# -- basic layers ---------------------------------------------------------

class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True,
                 init: str = "uniform"):
        self.w = glorot(rng, (d_in, d_out)) if init == "glorot" else uniform(rng, (d_in, d_out))
        self.b = constant((d_out,), 0.0) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = x @ self.w
        return y + self.b if self.b is not None else y


class Embedding(Module):
    def __init__(self, vocab: int, dim: int, rng: np.random.Generator, scale: float = INIT_SCALE):
        self.table = uniform(rng, (vocab, dim), scale)

    def __call__(self, ids: np.ndarray) -> Tensor:
        return T.embedding(self.table, ids)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-6) -> Tensor:
    """gain * (x - mean) / sqrt(var + eps) + bias over the last axis."""
    if eps <= 0:
        raise ValueError("epsilon must be positive")
    return T.layer_norm(x, gain, bias, eps)


class LayerNorm(Module):
    """Layer norm over the last axis.  ``shape`` may carry leading group dims (per-gate LN).

    ``enabled=False`` turns the layer into the identity (layer-norm ablation)
    and allocates no parameters.
    """

    def __init__(self, shape, eps: float = 1e-6, enabled: bool = True):
        shape = (shape,) if isinstance(shape, int) else tuple(shape)
        self.eps = eps
        self.enabled = enabled
        self.gain = constant(shape, 1.0) if enabled else None
        self.bias = constant(shape, 0.0) if enabled else None

    def __call__(self, x: Tensor) -> Tensor:
        if not self.enabled:
            return x
        return layer_norm(x, self.gain, self.bias, self.eps)


# -- LSTM -----------------------------------------------------------------

class LSTMCell(Module):
    """LSTM cell with per-gate layer normalization.

    Gate order along the packed axis is (i, f, g, o).  Each gate's
    pre-activation ``W x + U h`` is normalized with its own gain/bias, then
    the gate bias is added.  The cell state is normalized again before the
    output tanh.  With ``raw_output_gate`` the output is ``o * LN(c)``.
    """

    def __init__(self, d_in: int, d_hidden: int, rng: np.random.Generator,
                 layer_norm: bool = True, raw_output_gate: bool = False):
        self.d_in, self.d_hidden = d_in, d_hidden
        self.raw_output_gate = raw_output_gate
        self.w_input = uniform(rng, (d_in, 4 * d_hidden))
        self.w_recurrent = uniform(rng, (d_hidden, 4 * d_hidden))
        self.gate_norm = LayerNorm((4, d_hidden), enabled=layer_norm)
        bias = np.zeros((4, d_hidden))
        bias[1] = 1.0
        self.bias = _alloc((4, d_hidden), lambda s: bias.copy())
        self.cell_norm = LayerNorm(d_hidden, enabled=layer_norm)

    def project_input(self, x: Tensor) -> Tensor:
        """``W x`` for a whole sequence at once; feed slices to :meth:`step_projected`."""
        return x @ self.w_input

    def step(self, x: Tensor, h: Tensor, c: Tensor) -> tuple[Tensor, Tensor]:
        if x.shape[-1] != self.d_in or h.shape[-1] != self.d_hidden or c.shape != h.shape:
            raise ShapeMismatch(f"lstm step: x {x.shape}, h {h.shape}, c {c.shape} vs cell "
                                f"({self.d_in}->{self.d_hidden})")
        return self.step_projected(self.project_input(x), h, c)

    def step_projected(self, xw: Tensor, h: Tensor, c: Tensor) -> tuple[Tensor, Tensor]:
        pre = xw + h @ self.w_recurrent
        pre = pre.reshape(pre.shape[:-1] + (4, self.d_hidden))
        pre = self.gate_norm(pre) + self.bias
        sig = T.sigmoid(pre)
        i, f, o = sig[..., 0, :], sig[..., 1, :], sig[..., 3, :]
        g = T.tanh(pre[..., 2, :])
        c_new = f * c + i * g
        cn = self.cell_norm(c_new)
        h_new = o * cn if self.raw_output_gate else o * T.tanh(cn)
        return h_new, c_new


def lstm_cell_step(x: Tensor, h_prev: Tensor, c_prev: Tensor, cell: LSTMCell) -> tuple[Tensor, Tensor]:
    return cell.step(x, h_prev, c_prev)


def _zeros(batch: int, d: int) -> Tensor:
    return Tensor(np.zeros((batch, d)))


def run_lstm(cell: LSTMCell, seq: Tensor, mask: np.ndarray | None = None,
             reverse: bool = False) -> Tensor:
    """Run ``cell`` over ``seq[B, T, d_in]`` and return ``[B, T, d_hidden]``.

    Padding is assumed to be a suffix.  In reverse direction the state is held
    at zero over padded positions so every sequence starts at its true end.
    """
    B, steps = seq.shape[0], seq.shape[1]
    if steps == 0:
        raise EmptySequence("cannot run an LSTM over an empty sequence")
    xw = cell.project_input(seq)
    h = c = _zeros(B, cell.d_hidden)
    outs: list[Tensor] = [None] * steps
    order = range(steps - 1, -1, -1) if reverse else range(steps)
    for t in order:
        h, c = cell.step_projected(xw[:, t], h, c)
        if reverse and mask is not None and not mask[:, t].all():
            m = mask[:, t:t + 1].astype(np.float64)
            h, c = h * m, c * m
        outs[t] = h
    return T.stack(outs, axis=1)


class BiLSTMLayer(Module):
    def __init__(self, d_in: int, d_hidden: int, rng: np.random.Generator, layer_norm: bool = True,
                 raw_output_gate: bool = False):
        self.fwd = LSTMCell(d_in, d_hidden, rng, layer_norm, raw_output_gate)
        self.bwd = LSTMCell(d_in, d_hidden, rng, layer_norm, raw_output_gate)

    def __call__(self, seq: Tensor, mask: np.ndarray | None = None) -> Tensor:
        return bidirectional_lstm_layer(seq, self.fwd, self.bwd, mask)


def bidirectional_lstm_layer(seq: Tensor, fwd: LSTMCell, bwd: LSTMCell,
                             mask: np.ndarray | None = None) -> Tensor:
    """Forward states after tokens 1..t concatenated with backward states after tokens T..t."""
    if seq.ndim != 3 or seq.shape[1] == 0:
        raise EmptySequence(f"bidirectional layer needs [B, T>0, d], got {seq.shape}")
    return T.concat([run_lstm(fwd, seq, mask), run_lstm(bwd, seq, mask, reverse=True)], axis=-1)


# -- attention ------------------------------------------------------------

def _mask_bias(mask: np.ndarray) -> np.ndarray:
    mask = np.asarray(mask, dtype=bool)
    if not mask.any(axis=-1).all():
        raise AllMasked("every attention row needs at least one unmasked position")
    return np.where(mask, 0.0, MASK_VALUE)


class MultiHeadAdditiveAttention(Module):
    """Additive (tanh-scored) attention split into heads.

    Query and keys are projected into ``heads`` sub-spaces of size
    ``d_attn / heads``, each head has its own score vector, and each head
    averages its own slice of the values.  The concatenated head contexts
    go through an optional output projection.
    """

    def __init__(self, d_query: int, d_key: int, d_attn: int, heads: int, rng: np.random.Generator,
                 d_value: int | None = None, d_out: int | None = None, output_projection: bool = True):
        d_value = d_key if d_value is None else d_value
        if d_attn % heads or d_value % heads:
            raise ShapeMismatch(f"attention dims {d_attn}/{d_value} not divisible by {heads} heads")
        self.heads, self.d_attn, self.d_value = heads, d_attn, d_value
        self.query = Linear(d_query, d_attn, rng, bias=False)
        self.key = Linear(d_key, d_attn, rng)
        self.score = uniform(rng, (heads, d_attn // heads))
        self.out = Linear(d_value, d_value if d_out is None else d_out, rng) if output_projection else None
        self.d_out = (d_value if d_out is None else d_out) if output_projection else d_value

    def precompute(self, keys: Tensor, values: Tensor, mask: np.ndarray):
        """Key projection and head-split values, reusable across decoder steps."""
        if keys.shape[:2] != values.shape[:2] or mask.shape != keys.shape[:2]:
            raise ShapeMismatch(f"keys {keys.shape}, values {values.shape}, mask {mask.shape}")
        B, Tk = keys.shape[:2]
        h = self.heads
        kp = self.key(keys).reshape(B, Tk, h, self.d_attn // h)
        vh = T.transpose(values.reshape(B, Tk, h, self.d_value // h), (0, 2, 1, 3))
        return kp, vh, _mask_bias(mask)[:, None, :]

    def attend(self, query: Tensor, cache, rng=None, dropout_p: float = 0.0):
        """``query`` is ``[B, dq]`` (one step) or ``[B, Tq, dq]`` (all steps at once)."""
        kp, vh, bias = cache
        B, Tk, h, dh = kp.shape
        single = query.ndim == 2
        q = query.reshape(B, 1, query.shape[-1]) if single else query
        tq = q.shape[1]
        qp = self.query(q).reshape(B, tq, 1, h, dh)
        s = T.tanh(kp.reshape(B, 1, Tk, h, dh) + qp) * self.score      # [B, Tq, Tk, h, dh]
        T.add_macs(B * tq * Tk * self.d_attn)
        scores = T.transpose(s.sum(axis=-1), (0, 3, 1, 2)) + bias[:, :, None, :]  # [B, h, Tq, Tk]
        weights = T.softmax(scores, axis=-1)
        ctx = dropout(weights, dropout_p, rng) @ vh                       # [B, h, Tq, dvh]
        ctx = T.transpose(ctx, (0, 2, 1, 3)).reshape(B, tq, self.d_value)
        if self.out is not None:
            ctx = self.out(ctx)
        if single:
            return ctx.reshape(B, ctx.shape[-1]), weights.reshape(B, h, Tk)
        return ctx, weights

    def __call__(self, query: Tensor, keys: Tensor, values: Tensor, mask: np.ndarray,
                 rng=None, dropout_p: float = 0.0):
        return self.attend(query, self.precompute(keys, values, mask), rng, dropout_p)


def multi_head_additive_attention(query, keys, values, mask, params: MultiHeadAdditiveAttention):
    return params(query, keys, values, mask)


def causal_mask(tq: int, tk: int | None = None) -> np.ndarray:
    tk = tq if tk is None else tk
    return np.tril(np.ones((tq, tk), dtype=bool), k=tk - tq)


class MultiHeadDotAttention(Module):
    """Scaled dot-product attention over ``heads`` sub-spaces (no projection biases)."""

    def __init__(self, d_model: int, heads: int, rng: np.random.Generator, d_key: int | None = None):
        if d_model % heads:
            raise ShapeMismatch(f"d_model {d_model} not divisible by {heads} heads")
        d_key = d_model if d_key is None else d_key
        self.heads, self.d_model = heads, d_model
        self.q = Linear(d_model, d_model, rng, bias=False, init="glorot")
        self.k = Linear(d_key, d_model, rng, bias=False, init="glorot")
        self.v = Linear(d_key, d_model, rng, bias=False, init="glorot")
        self.o = Linear(d_model, d_model, rng, bias=False, init="glorot")

    def _split(self, x: Tensor) -> Tensor:
        B, n = x.shape[:2]
        return T.transpose(x.reshape(B, n, self.heads, self.d_model // self.heads), (0, 2, 1, 3))

    def __call__(self, queries: Tensor, keys: Tensor, values: Tensor, mask: np.ndarray | None = None,
                 causal: bool = False, rng=None, dropout_p: float = 0.0):
        B, tq = queries.shape[:2]
        tk = keys.shape[1]
        allowed = np.ones((B, tq, tk), dtype=bool)
        if mask is not None:
            allowed &= np.asarray(mask, dtype=bool)[:, None, :]
        if causal:
            allowed &= causal_mask(tq, tk)[None]
        bias = _mask_bias(allowed)[:, None]                  # [B, 1, tq, tk]
        dh = self.d_model // self.heads
        q, k, v = self._split(self.q(queries)), self._split(self.k(keys)), self._split(self.v(values))
        scores = (q @ T.swapaxes(k, -1, -2)) * (1.0 / math.sqrt(dh)) + bias
        weights = T.softmax(scores, axis=-1)
        ctx = dropout(weights, dropout_p, rng) @ v            # [B, h, tq, dh]
        ctx = T.transpose(ctx, (0, 2, 1, 3)).reshape(B, tq, self.d_model)
        return self.o(ctx), weights


def multi_head_dot_attention(queries, keys, values, mask, params: MultiHeadDotAttention, causal=False):
    return params(queries, keys, values, mask, causal=causal)


# -- transformer pieces ---------------------------------------------------

def transformer_sublayer(x: Tensor, transform: Callable[[Tensor], Tensor], norm: LayerNorm,
                         dropout_p: float = 0.0, rng=None) -> Tensor:
    """normalize -> transform -> dropout -> residual-add."""
    y = transform(norm(x))
    if y.shape != x.shape:
        raise ShapeMismatch(f"sublayer transform changed shape {x.shape} -> {y.shape}")
    return x + dropout(y, dropout_p, rng)


class FeedForward(Module):
    def __init__(self, d_model: int, d_ff: int, rng: np.random.Generator):
        self.inner = Linear(d_model, d_ff, rng, init="glorot")
        self.outer = Linear(d_ff, d_model, rng, init="glorot")

    def __call__(self, x: Tensor, rng=None, relu_p: float = 0.0) -> Tensor:
        return self.outer(dropout(T.relu(self.inner(x)), relu_p, rng))


def feed_forward(x: Tensor, w1: Tensor, w2: Tensor, b1=None, b2=None, relu_p: float = 0.0, rng=None):
    hidden = x @ w1
    if b1 is not None:
        hidden = hidden + b1
    out = dropout(T.relu(hidden), relu_p, rng) @ w2
    return out + b2 if b2 is not None else out


def sinusoidal_positions(length: int, d: int) -> np.ndarray:
    """Row ``pos`` holds sin/cos of ``pos / 10000^(2i/d)`` interleaved (sin at even columns)."""
    pos = np.arange(length, dtype=np.float64)[:, None]
    i = np.arange(d // 2 + d % 2, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, 2.0 * i / d)
    out = np.empty((length, d))
    out[:, 0::2] = np.sin(angle)[:, : (d + 1) // 2]
    out[:, 1::2] = np.cos(angle)[:, : d // 2]
    return out


def learned_positions(length: int, d: int, table: Tensor) -> Tensor:
    if table.shape[1] != d:
        raise ShapeMismatch(f"position table width {table.shape[1]} != {d}")
    if length > table.shape[0]:
        raise PositionOutOfRange(f"position {length - 1} beyond table of {table.shape[0]} rows")
    return table[:length]


# -- convolution ----------------------------------------------------------

def weight_norm_reparam(v: Tensor, g: Tensor) -> Tensor:
    """w = g * v / ||v||_2 (Frobenius norm over the whole tensor)."""
    v, g = T.as_tensor(v), T.as_tensor(g)
    if not np.any(v.data):
        raise ZeroDirection("weight-norm direction has zero norm")
    norm = T.sqrt(T.tsum(v * v))
    return v * (g / norm)


def conv1d_glu(seq: Tensor, kernel: Tensor, bias: Tensor | None = None, causal: bool = False) -> Tensor:
    """Same-length conv (left-only padding when causal) followed by A * sigmoid(B)."""
    K, _, c2 = kernel.shape
    if c2 % 2:
        raise ShapeMismatch(f"GLU needs an even channel count, got {c2}")
    left = K - 1 if causal else (K - 1) // 2
    right = 0 if causal else K - 1 - left
    y = T.conv1d(seq, kernel, left, right)
    if bias is not None:
        y = y + bias
    half = c2 // 2
    a, b = T.split(y, [half, half], axis=-1)
    return a * T.sigmoid(b)


class ConvGLU(Module):
    """Weight-normalized 1-D convolution followed by GLU.

    ``residual`` projects the block input when the channel count changes.
    """

    def __init__(self, d_in: int, d_out: int, width: int, rng: np.random.Generator,
                 causal: bool = False, weight_norm: bool = True):
        self.width, self.causal, self.weight_norm = width, causal, weight_norm
        scale = 0.5 * math.sqrt(4.0 / (width * d_in))
        self.v = _alloc((width, d_in, 2 * d_out), lambda s: rng.normal(0.0, scale, size=s))
        if weight_norm:
            norm = 0.0 if is_symbolic() else float(np.linalg.norm(self.v.data))
            self.g = constant((), norm)
        else:
            self.g = None
        self.b = constant((2 * d_out,), 0.0)
        self.residual = Linear(d_in, d_out, rng) if d_in != d_out else None

    def kernel(self) -> Tensor:
        return weight_norm_reparam(self.v, self.g) if self.weight_norm else self.v

    def __call__(self, x: Tensor, mask: np.ndarray | None = None) -> Tensor:
        if mask is not None:
            x = x * mask[..., None].astype(np.float64)
        return conv1d_glu(x, self.kernel(), self.b, self.causal)

    def shortcut(self, x: Tensor) -> Tensor:
        return self.residual(x) if self.residual is not None else x
