"""Dense float64 tensors with reverse-mode automatic differentiation.

Every op checks its output for NaN/Inf and raises :class:`NonFiniteValue`
eagerly.  Ops record a graph edge only when grad mode is on and at least one
input requires grad.  ``backward`` linearises the graph into a :class:`Tape`
(topological order), runs the backward rules in reverse and then releases the
tape, so each forward graph can be differentiated once.

Binary elementwise ops follow numpy broadcasting; gradients are summed back
to each operand's shape.
"""

from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from s2slab.errors import EmptyTape, NonFiniteValue, NotScalarLoss, ShapeMismatch

_local = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_local, "grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    prev = is_grad_enabled()
    _local.grad_enabled = False
    try:
        yield
    finally:
        _local.grad_enabled = prev


class MacCounter:
    """Accumulates multiply-accumulate counts of matmul and conv1d ops."""

    def __init__(self) -> None:
        self.macs = 0

    @property
    def flops(self) -> int:
        return 2 * self.macs


@contextlib.contextmanager
def count_macs():
    prev = getattr(_local, "mac_counter", None)
    counter = MacCounter()
    _local.mac_counter = counter
    try:
        yield counter
    finally:
        _local.mac_counter = prev


def add_macs(n: int) -> None:
    counter = getattr(_local, "mac_counter", None)
    if counter is not None:
        counter.macs += int(n)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op", "__weakref__")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.op = "leaf"

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- operators -------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    # -- method forms ------------------------------------------------------
    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sigmoid(self):
        return sigmoid(self)

    def tanh(self):
        return tanh(self)

    def relu(self):
        return relu(self)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def softmax(self, axis: int = -1):
        return softmax(self, axis)

    def log_softmax(self, axis: int = -1):
        return log_softmax(self, axis)

    def backward(self) -> None:
        backward(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, op: str, parents: tuple[Tensor, ...], rule: Callable) -> Tensor:
    if not np.isfinite(data).all():
        raise NonFiniteValue(f"{op} produced non-finite values")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = rule
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    if lead:
        g = g.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _binary_shape(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeMismatch(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# -- elementwise binary ---------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shape("add", a, b)
    sa, sb = a.shape, b.shape

    def rule(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _result(a.data + b.data, "add", (a, b), rule)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shape("sub", a, b)
    sa, sb = a.shape, b.shape

    def rule(g):
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)

    return _result(a.data - b.data, "sub", (a, b), rule)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shape("mul", a, b)
    ad, bd = a.data, b.data

    def rule(g):
        ga = _unbroadcast(g * bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(g * ad, bd.shape) if b.requires_grad else None
        return ga, gb

    return _result(ad * bd, "mul", (a, b), rule)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shape("div", a, b)
    ad, bd = a.data, b.data
    with np.errstate(all="ignore"):
        out = ad / bd

    def rule(g):
        ga = _unbroadcast(g / bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None
        return ga, gb

    return _result(out, "div", (a, b), rule)


# -- linear algebra -------------------------------------------------------

def matmul(a, b) -> Tensor:
    """``a[..., k] @ b[k, m]`` or same-rank batched ``a[..., n, k] @ b[..., k, m]``."""
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    if bd.ndim == 2 and ad.ndim >= 1:
        if ad.shape[-1] != bd.shape[0]:
            raise ShapeMismatch(f"matmul: inner dims differ {ad.shape} @ {bd.shape}")
        out = ad @ bd
        add_macs(ad.size * bd.shape[1])

        def rule(g):
            ga = g @ bd.T if a.requires_grad else None
            gb = None
            if b.requires_grad:
                gb = ad.reshape(-1, bd.shape[0]).T @ g.reshape(-1, bd.shape[1])
            return ga, gb

    elif ad.ndim == bd.ndim >= 3:
        if ad.shape[:-2] != bd.shape[:-2] or ad.shape[-1] != bd.shape[-2]:
            raise ShapeMismatch(f"matmul: incompatible batched shapes {ad.shape} @ {bd.shape}")
        out = ad @ bd
        add_macs(ad.size * bd.shape[-1])

        def rule(g):
            ga = g @ np.swapaxes(bd, -1, -2) if a.requires_grad else None
            gb = np.swapaxes(ad, -1, -2) @ g if b.requires_grad else None
            return ga, gb

    else:
        raise ShapeMismatch(f"matmul: unsupported operand ranks {ad.shape} @ {bd.shape}")
    return _result(out, "matmul", (a, b), rule)


# -- shape ops ------------------------------------------------------------

def reshape(a: Tensor, shape) -> Tensor:
    a = as_tensor(a)
    src = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeMismatch(f"reshape: cannot view {src} as {shape}") from None
    return _result(out, "reshape", (a,), lambda g: (g.reshape(src),))


def transpose(a: Tensor, axes=None) -> Tensor:
    a = as_tensor(a)
    axes = tuple(range(a.ndim))[::-1] if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    return _result(np.transpose(a.data, axes), "transpose", (a,), lambda g: (np.transpose(g, inv),))


def swapaxes(a: Tensor, i: int, j: int) -> Tensor:
    axes = list(range(a.ndim))
    axes[i], axes[j] = axes[j], axes[i]
    return transpose(a, axes)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    if not tensors:
        raise ShapeMismatch("concat: no inputs")
    nd = tensors[0].ndim
    ax = axis % nd
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != nd or any(t.shape[i] != ref[i] for i in range(nd) if i != ax):
            raise ShapeMismatch(f"concat: shapes {ref} and {t.shape} differ off axis {axis}")
    sizes = [t.shape[ax] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def rule(g):
        return tuple(np.split(g, bounds, axis=ax))

    return _result(np.concatenate([t.data for t in tensors], axis=ax), "concat", tensors, rule)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    shapes = {t.shape for t in tensors}
    if len(shapes) != 1:
        raise ShapeMismatch(f"stack: shapes differ {sorted(shapes)}")
    ax = axis % (tensors[0].ndim + 1)

    def rule(g):
        return tuple(np.moveaxis(g, ax, 0))

    return _result(np.stack([t.data for t in tensors], axis=ax), "stack", tensors, rule)


def _is_basic_index(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (int, np.integer, slice)) or i is None or i is Ellipsis for i in items)


def getitem(a: Tensor, idx) -> Tensor:
    a = as_tensor(a)
    src = a.shape
    basic = _is_basic_index(idx)

    def rule(g):
        ga = np.zeros(src)
        if basic:
            ga[idx] = g
        else:
            np.add.at(ga, idx, g)
        return (ga,)

    return _result(a.data[idx], "getitem", (a,), rule)


def split(a: Tensor, sizes: Sequence[int], axis: int = -1) -> list[Tensor]:
    ax = axis % a.ndim
    if sum(sizes) != a.shape[ax]:
        raise ShapeMismatch(f"split: sizes {list(sizes)} do not cover axis of length {a.shape[ax]}")
    out, start = [], 0
    for n in sizes:
        idx = (slice(None),) * ax + (slice(start, start + n),)
        out.append(getitem(a, idx))
        start += n
    return out


# -- nonlinearities -------------------------------------------------------

def sigmoid(a: Tensor) -> Tensor:
    a = as_tensor(a)
    out = 0.5 + 0.5 * np.tanh(0.5 * a.data)
    return _result(out, "sigmoid", (a,), lambda g: (g * out * (1.0 - out),))


def tanh(a: Tensor) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _result(out, "tanh", (a,), lambda g: (g * (1.0 - out * out),))


def relu(a: Tensor) -> Tensor:
    a = as_tensor(a)
    pos = a.data > 0
    return _result(np.where(pos, a.data, 0.0), "relu", (a,), lambda g: (g * pos,))


def exp(a: Tensor) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _result(out, "exp", (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    with np.errstate(all="ignore"):
        out = np.log(ad)
    return _result(out, "log", (a,), lambda g: (g / ad,))


def sqrt(a: Tensor) -> Tensor:
    a = as_tensor(a)
    with np.errstate(all="ignore"):
        out = np.sqrt(a.data)
    return _result(out, "sqrt", (a,), lambda g: (0.5 * g / out,))


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    e = np.exp(a.data - a.data.max(axis=axis, keepdims=True))
    out = e / e.sum(axis=axis, keepdims=True)

    def rule(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _result(out, "softmax", (a,), rule)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))

    def rule(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _result(out, "log_softmax", (a,), rule)


# -- reductions -----------------------------------------------------------

def _expand(g: np.ndarray, shape, axis, keepdims: bool) -> np.ndarray:
    if axis is not None and not keepdims:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        g = np.expand_dims(g, tuple(ax % len(shape) for ax in axes))
    return np.broadcast_to(g, shape)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    src = a.shape
    out = np.asarray(a.data.sum(axis=axis, keepdims=keepdims))
    return _result(out, "sum", (a,), lambda g: (_expand(g, src, axis, keepdims),))


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    src = a.shape
    out = np.asarray(a.data.mean(axis=axis, keepdims=keepdims))
    n = a.size // max(out.size, 1)
    return _result(out, "mean", (a,), lambda g: (_expand(g, src, axis, keepdims) / n,))


def variance(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    """Population variance (divides by N)."""
    a = as_tensor(a)
    src = a.shape
    centered = a.data - a.data.mean(axis=axis, keepdims=True)
    out = np.asarray((centered * centered).mean(axis=axis, keepdims=keepdims))
    n = a.size // max(out.size, 1)

    def rule(g):
        return (_expand(g, src, axis, keepdims) * (2.0 / n) * centered,)

    return _result(out, "variance", (a,), rule)


# -- fused layers ---------------------------------------------------------

def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float) -> Tensor:
    """Normalize over the last axis; ``gain``/``bias`` match a trailing slice of ``x.shape``."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    n = x.shape[-1]
    if gain.shape != bias.shape or x.shape[x.ndim - gain.ndim:] != gain.shape:
        raise ShapeMismatch(f"layer_norm: params {gain.shape}/{bias.shape} do not match input {x.shape}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    centered = xd - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    with np.errstate(all="ignore"):
        inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    gd = gain.data
    out = xhat * gd + bias.data

    def rule(g):
        gx = None
        if x.requires_grad:
            gxhat = g * gd
            gx = (inv / n) * (n * gxhat - gxhat.sum(-1, keepdims=True)
                              - xhat * (gxhat * xhat).sum(-1, keepdims=True))
        ggain = _unbroadcast(g * xhat, gd.shape) if gain.requires_grad else None
        gbias = _unbroadcast(g, gd.shape) if bias.requires_grad else None
        return gx, ggain, gbias

    return _result(out, "layer_norm", (x, gain, bias), rule)


def embedding(table: Tensor, ids) -> Tensor:
    """Row gather ``table[ids]``; ``ids`` is an integer array of any shape."""
    table = as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    vocab = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= vocab):
        raise ShapeMismatch(f"embedding: ids outside [0, {vocab})")

    def rule(g):
        gt = np.zeros(table.shape)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (gt,)

    return _result(table.data[ids], "embedding", (table,), rule)


def conv1d(x: Tensor, w: Tensor, pad_left: int, pad_right: int) -> Tensor:
    """1-D convolution of ``x[B, T, Cin]`` with ``w[K, Cin, Cout]``; zero padding per side."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 3 or w.ndim != 3 or x.shape[2] != w.shape[1]:
        raise ShapeMismatch(f"conv1d: input {x.shape} incompatible with kernel {w.shape}")
    B, T, cin = x.shape
    K, _, cout = w.shape
    xp = np.pad(x.data, ((0, 0), (pad_left, pad_right), (0, 0)))
    t_out = T + pad_left + pad_right - K + 1
    if t_out <= 0:
        raise ShapeMismatch(f"conv1d: kernel width {K} exceeds padded length")
    cols = np.stack([xp[:, k:k + t_out] for k in range(K)], axis=2).reshape(B, t_out, K * cin)
    wmat = w.data.reshape(K * cin, cout)
    add_macs(B * t_out * K * cin * cout)

    def rule(g):
        gx = gw = None
        if w.requires_grad:
            gw = (cols.reshape(-1, K * cin).T @ g.reshape(-1, cout)).reshape(K, cin, cout)
        if x.requires_grad:
            gcols = (g @ wmat.T).reshape(B, t_out, K, cin)
            gxp = np.zeros_like(xp)
            for k in range(K):
                gxp[:, k:k + t_out] += gcols[:, :, k]
            gx = gxp[:, pad_left:pad_left + T]
        return gx, gw

    return _result(cols @ wmat, "conv1d", (x, w), rule)


def scale_grad(x: Tensor, factor: float) -> Tensor:
    """Identity in the forward pass; multiplies the incoming gradient by ``factor``."""
    x = as_tensor(x)
    return _result(x.data, "scale_grad", (x,), lambda g: (g * factor,))


# -- tape & backward ------------------------------------------------------

@dataclass
class TapeEntry:
    output: Tensor
    inputs: tuple[Tensor, ...]
    op: str


@dataclass
class Tape:
    """Recorded ops reachable from a loss, in topological order."""

    entries: list[TapeEntry] = field(default_factory=list)

    @classmethod
    def from_output(cls, root: Tensor) -> Tape:
        order: list[Tensor] = []
        seen: set[int] = set()
        stack = [(root, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p._parents and id(p) not in seen:
                    stack.append((p, False))
        return cls([TapeEntry(n, n._parents, n.op) for n in order])

    def __len__(self) -> int:
        return len(self.entries)

    def is_topological(self) -> bool:
        produced: set[int] = set()
        for e in self.entries:
            for t in e.inputs:
                if t._parents and id(t) not in produced:
                    return False
            produced.add(id(e.output))
        return True

    def release(self) -> None:
        for e in self.entries:
            e.output._parents = ()
            e.output._backward = None
        self.entries.clear()


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad``; the tape is consumed."""
    if loss.size != 1:
        raise NotScalarLoss(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad or not loss._parents:
        raise EmptyTape("loss does not depend on any tensor that requires grad")
    tape = Tape.from_output(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for entry in reversed(tape.entries):
        node = entry.output
        g = grads.pop(id(node), None)
        if g is None:
            continue
        for p, pg in zip(node._parents, node._backward(g)):
            if pg is None or not p.requires_grad:
                continue
            if p._parents:
                key = id(p)
                grads[key] = grads[key] + pg if key in grads else pg
            elif p.grad is None:
                p.grad = np.array(pg, dtype=np.float64)
            else:
                p.grad += pg
    tape.release()


def _relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-12)
    return float(np.max(np.abs(analytic - numeric) / denom)) if analytic.size else 0.0


def grad_check(f: Callable[[Tensor], Tensor], point, step: float = 1e-5) -> float:
    """Max relative error between backprop and central differences of scalar ``f`` at ``point``."""
    if step <= 0:
        raise ValueError("step must be positive")
    x0 = np.array(point.data if isinstance(point, Tensor) else point, dtype=np.float64)
    x = Tensor(x0.copy(), requires_grad=True)
    out = f(x)
    if out.size != 1:
        raise NotScalarLoss(f"grad_check needs a scalar function, got shape {out.shape}")
    if out.requires_grad:
        backward(out)
    analytic = x.grad if x.grad is not None else np.zeros_like(x0)
    numeric = np.zeros_like(x0)
    with no_grad():
        for i in range(x0.size):
            xp = x0.copy()
            xp.flat[i] += step
            xm = x0.copy()
            xm.flat[i] -= step
            numeric.flat[i] = (f(Tensor(xp)).item() - f(Tensor(xm)).item()) / (2 * step)
    if not np.isfinite(numeric).all() or not np.isfinite(analytic).all():
        raise NonFiniteValue("grad_check produced non-finite derivatives")
    return _relative_error(analytic, numeric)


def grad_check_params(loss_fn: Callable[[], Tensor], params: Iterable[Tensor],
                      step: float = 1e-5) -> dict[int, float]:
    """Like :func:`grad_check` but perturbs each tensor of ``params`` in place.

    Returns the max relative error per parameter, keyed by position in ``params``.
    """
    params = list(params)
    for p in params:
        p.grad = None
    out = loss_fn()
    if out.requires_grad:
        backward(out)
    errors = {}
    with no_grad():
        for k, p in enumerate(params):
            analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
            base = np.array(p.data, dtype=np.float64)
            numeric = np.zeros_like(base)
            for i in range(base.size):
                for sign in (1.0, -1.0):
                    moved = base.copy()
                    moved.flat[i] += sign * step
                    p.data = moved
                    numeric.flat[i] += sign * loss_fn().item() / (2 * step)
            p.data = base
            errors[k] = _relative_error(analytic, numeric)
    return errors
