"""Independent reference computations used as test oracles.

Nothing here imports the package under test.  Each function is a
straight-line transcription of the formula it checks, written for clarity
rather than speed.
"""

from __future__ import annotations

import itertools
import math
from collections import Counter

import numpy as np


# -- schedules ------------------------------------------------------------------------


def rnmt_lr(t, n, p, s, e):
    warm = 1.0 + t * (n - 1.0) / (n * p)
    try:
        decay = n * (2.0 * n) ** ((s - n * t) / (e - s))
    except OverflowError:
        decay = math.inf
    return 1e-4 * min(warm, float(n), decay)


def transformer_lr(t, r0, p, d):
    return r0 / math.sqrt(d) * min((t + 1.0) / (p * math.sqrt(p)), 1.0 / math.sqrt(t + 1.0))


# -- layers ----------------------------------------------------------------------------


def layer_norm_vec(x, gain, bias, eps):
    mu = sum(x) / len(x)
    var = sum((v - mu) ** 2 for v in x) / len(x)
    return [g * (v - mu) / math.sqrt(var + eps) + b for v, g, b in zip(x, gain, bias)]


def sigmoid(z):
    return 1.0 / (1.0 + math.exp(-z))


def lstm_cell(x, h, c, w_in, w_rec, gate_gain, gate_bias, bias, cell_gain, cell_bias, eps=1e-6):
    """Per-gate layer-normalized LSTM cell on plain lists; gates packed (i, f, g, o)."""
    d = len(h)
    pre = [sum(x[k] * w_in[k][j] for k in range(len(x))) + sum(h[k] * w_rec[k][j] for k in range(d))
           for j in range(4 * d)]
    gates = []
    for q in range(4):
        chunk = pre[q * d:(q + 1) * d]
        normed = layer_norm_vec(chunk, gate_gain[q], gate_bias[q], eps)
        gates.append([v + b for v, b in zip(normed, bias[q])])
    i = [sigmoid(v) for v in gates[0]]
    f = [sigmoid(v) for v in gates[1]]
    g = [math.tanh(v) for v in gates[2]]
    o = [sigmoid(v) for v in gates[3]]
    c_new = [f[j] * c[j] + i[j] * g[j] for j in range(d)]
    cn = layer_norm_vec(c_new, cell_gain, cell_bias, eps)
    h_new = [o[j] * math.tanh(cn[j]) for j in range(d)]
    return h_new, c_new


def additive_attention(query, keys, values, mask, wq, wk, bk, v_heads, heads, w_out=None, b_out=None):
    """Loop-per-head multi-head additive attention for one query.

    Returns (context, weights[h][T]).  Values are split into ``heads``
    equal slices, one per head.
    """
    T = len(keys)
    d_attn = len(wq[0])
    dh = d_attn // heads
    dv = len(values[0]) // heads
    qp = [sum(query[k] * wq[k][j] for k in range(len(query))) for j in range(d_attn)]
    weights, ctx = [], []
    for head in range(heads):
        scores = []
        for t in range(T):
            kp = [sum(keys[t][k] * wk[k][j] for k in range(len(keys[t]))) + bk[j] for j in range(d_attn)]
            s = sum(v_heads[head][j] * math.tanh(qp[head * dh + j] + kp[head * dh + j]) for j in range(dh))
            scores.append(s if mask[t] else -1e9)
        m = max(scores)
        ex = [math.exp(s - m) for s in scores]
        z = sum(ex)
        w = [e / z for e in ex]
        weights.append(w)
        ctx += [sum(w[t] * values[t][head * dv + j] for t in range(T)) for j in range(dv)]
    if w_out is not None:
        ctx = [sum(ctx[k] * w_out[k][j] for k in range(len(ctx))) + b_out[j] for j in range(len(w_out[0]))]
    return ctx, weights


def central_difference(f, x, step=1e-5):
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        old = x[idx]
        x[idx] = old + step
        hi = f(x)
        x[idx] = old - step
        lo = f(x)
        x[idx] = old
        g[idx] = (hi - lo) / (2 * step)
    return g


# -- decoding and metrics --------------------------------------------------------------


def bleu(hyps, refs, max_n=4):
    """Corpus BLEU from the textbook definition."""
    num = [0] * max_n
    den = [0] * max_n
    hl = rl = 0
    for h, r in zip(hyps, refs):
        h, r = h.split(), r.split()
        hl += len(h)
        rl += len(r)
        for n in range(1, max_n + 1):
            hc = Counter(tuple(h[i:i + n]) for i in range(len(h) - n + 1))
            rc = Counter(tuple(r[i:i + n]) for i in range(len(r) - n + 1))
            num[n - 1] += sum(min(v, rc[k]) for k, v in hc.items())
            den[n - 1] += max(0, len(h) - n + 1)
    if min(num) == 0:
        return 0.0
    geo = math.exp(sum(math.log(a / b) for a, b in zip(num, den)) / max_n)
    bp = 1.0 if hl > rl else math.exp(1 - rl / hl)
    return 100 * bp * geo


def best_window(series, w):
    """Exhaustive enumeration: (mean, population std, start) of the best window, earliest on ties."""
    best = None
    for start in range(len(series) - w + 1):
        chunk = series[start:start + w]
        mean = sum(chunk) / w
        if best is None or mean > best[0] + 1e-12 * max(1.0, abs(best[0])):
            std = math.sqrt(sum((v - mean) ** 2 for v in chunk) / w)
            best = (mean, std, start)
    return best


def log_softmax(logits):
    m = max(logits)
    z = math.log(sum(math.exp(v - m) for v in logits)) + m
    return [v - z for v in logits]


def exhaustive_decode(next_logits, vocab, eos, max_len):
    """Highest-scoring sequence: ends with eos, or is cut at ``max_len``.

    ``next_logits(prefix)`` gives the logits after ``prefix`` (a tuple).
    """
    best = None
    for length in range(1, max_len + 1):
        for seq in itertools.product(range(vocab), repeat=length):
            if eos in seq[:-1]:
                continue
            if length < max_len and seq[-1] != eos:
                continue
            score = sum(log_softmax(next_logits(seq[:i]))[seq[i]] for i in range(length))
            if best is None or score > best[1]:
                best = (list(seq), score)
    return best
