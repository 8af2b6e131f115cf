"""Greedy and beam decoding, corpus BLEU, token accuracy, and the best evaluation window."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from s2slab import tensor as T
from s2slab.data import BOS, EOS, make_batch
from s2slab.errors import EmptyCorpus, EmptySource, SeriesTooShort


@dataclass
class Hypothesis:
    tokens: list[int]
    score: float
    finished: bool = False


def _encode_one(model, source: Sequence[int]):
    src = np.asarray(source, dtype=np.int64)
    if src.size == 0:
        raise EmptySource("cannot decode an empty source sentence")
    return model.encode(src[None, :], np.ones((1, src.size), dtype=bool))


def _log_probs(logits) -> np.ndarray:
    x = logits.data
    x = x - x.max(axis=-1, keepdims=True)
    return x - np.log(np.exp(x).sum(axis=-1, keepdims=True))


def greedy_decode(model, source: Sequence[int], max_len: int = 50) -> tuple[list[int], float]:
    """Argmax at every step (lowest id on ties); the returned tokens include eos if emitted."""
    with T.no_grad():
        state = model.init_state(_encode_one(model, source))
        token, tokens, score = BOS, [], 0.0
        for _ in range(max_len):
            logits, state = model.step(state, np.array([token]))
            lp = _log_probs(logits)[0]
            token = int(np.argmax(lp))
            tokens.append(token)
            score += float(lp[token])
            if token == EOS:
                break
    return tokens, score


def greedy_decode_batch(model, sources: Sequence[Sequence[int]], max_len: int = 50) -> list[list[int]]:
    """Greedy decoding of many sources at once; each row stops at its first eos."""
    if not sources:
        return []
    if any(len(s) == 0 for s in sources):
        raise EmptySource("cannot decode an empty source sentence")
    batch = make_batch([(s, []) for s in sources])
    out = [[] for _ in sources]
    with T.no_grad():
        state = model.init_state(model.encode(batch.source, batch.source_mask))
        tokens = np.full(len(sources), BOS)
        done = np.zeros(len(sources), dtype=bool)
        for _ in range(max_len):
            logits, state = model.step(state, tokens)
            tokens = np.argmax(logits.data, axis=-1)
            for i in np.flatnonzero(~done):
                out[i].append(int(tokens[i]))
            done |= tokens == EOS
            if done.all():
                break
    return out


def length_penalty(length: int, alpha: float = 0.6) -> float:
    return ((5.0 + length) / 6.0) ** alpha


def _rank(h: Hypothesis, length_norm: bool) -> float:
    return h.score / length_penalty(len(h.tokens)) if length_norm else h.score


def beam_search(model, source: Sequence[int], beam: int = 4, max_len: int = 50,
                length_norm: bool = False) -> tuple[list[int], float]:
    """Standard beam search.

    Live hypotheses are expanded over the whole vocabulary; finished ones
    (last token eos) are carried along unchanged and compete for the ``beam``
    slots.  Ties break by lower last token id, then shorter length, then
    lower parent slot.  Stops when every kept hypothesis is finished or after
    ``max_len`` steps.  Returns the best hypothesis and its log-probability.
    """
    if beam < 1:
        raise ValueError("beam must be >= 1")
    with T.no_grad():
        state = model.init_state(_encode_one(model, source))
        beams = [Hypothesis([], 0.0)]
        for _ in range(max_len):
            live = [h for h in beams if not h.finished]
            if not live:
                break
            last = np.array([h.tokens[-1] if h.tokens else BOS for h in live])
            logits, state = model.step(state, last)
            lp = _log_probs(logits)
            # (hypothesis, row in the live batch or -1, tie-break key)
            candidates = [(h, -1, (h.tokens[-1], len(h.tokens), -1)) for h in beams if h.finished]
            for row, h in enumerate(live):
                for tok in range(lp.shape[1]):
                    new = Hypothesis(h.tokens + [tok], h.score + float(lp[row, tok]), tok == EOS)
                    candidates.append((new, row, (tok, len(new.tokens), row)))
            candidates.sort(key=lambda c: (-_rank(c[0], length_norm),) + c[2])
            kept = candidates[:beam]
            rows = [row for h, row, _ in kept if not h.finished]
            if rows:
                state = model.reorder(state, np.array(rows, dtype=np.int64))
            beams = [h for h, _, _ in kept]
        best = min(beams, key=lambda h: (-_rank(h, length_norm), len(h.tokens)))
    return best.tokens, best.score


def strip_eos(tokens: Sequence[int]) -> list[int]:
    out = []
    for t in tokens:
        if t == EOS:
            break
        out.append(int(t))
    return out


# -- metrics --------------------------------------------------------------------


def _ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def bleu(hypotheses: Sequence, references: Sequence, max_n: int = 4, smooth: bool = False) -> float:
    """Corpus BLEU in [0, 100].  Sentences are strings (whitespace-split) or token lists.

    ``smooth`` adds one to numerator and denominator for n >= 2.
    """
    if len(hypotheses) != len(references):
        raise ValueError(f"{len(hypotheses)} hypotheses vs {len(references)} references")
    if not hypotheses:
        raise EmptyCorpus("BLEU needs at least one sentence")
    match = [0] * max_n
    total = [0] * max_n
    hyp_len = ref_len = 0
    for hyp, ref in zip(hypotheses, references):
        h = hyp.split() if isinstance(hyp, str) else [str(t) for t in hyp]
        r = ref.split() if isinstance(ref, str) else [str(t) for t in ref]
        hyp_len += len(h)
        ref_len += len(r)
        for n in range(1, max_n + 1):
            hn, rn = _ngrams(h, n), _ngrams(r, n)
            match[n - 1] += sum(min(c, rn[g]) for g, c in hn.items())
            total[n - 1] += max(len(h) - n + 1, 0)
    if hyp_len == 0:
        return 0.0
    log_p = 0.0
    for n in range(max_n):
        m, t = match[n], total[n]
        if smooth and n > 0:
            m, t = m + 1, t + 1
        if m == 0 or t == 0:
            return 0.0
        log_p += math.log(m / t) / max_n
    bp = 1.0 if hyp_len > ref_len else math.exp(1.0 - ref_len / hyp_len)
    return 100.0 * bp * math.exp(log_p)


def token_accuracy(hypotheses: Sequence[Sequence[int]], references: Sequence[Sequence[int]]) -> float:
    """Position-wise match rate over each reference followed by eos.

    A hypothesis shorter than its reference counts the missing positions as
    errors; extra tokens past the reference's eos are not scored.
    """
    if not references:
        raise EmptyCorpus("token accuracy needs at least one sentence")
    correct = total = 0
    for hyp, ref in zip(hypotheses, references, strict=True):
        want = list(ref) + [EOS]
        got = list(hyp)
        total += len(want)
        correct += sum(1 for i, w in enumerate(want) if i < len(got) and got[i] == w)
    return correct / total


def best_eval_window(series: Sequence[float], window: int = 21) -> tuple[float, float, int]:
    """Window of ``window`` consecutive evaluations with maximal mean.

    Returns ``(mean, population std, start index)``; the earliest window wins ties.
    Accepts plain scores or ``(step, score)`` pairs.
    """
    values = [float(v[1]) if isinstance(v, (tuple, list)) else float(v) for v in series]
    if window < 1:
        raise ValueError("window must be >= 1")
    if len(values) < window:
        raise SeriesTooShort(f"series of {len(values)} evaluations shorter than window {window}")
    best_sum, best_start = None, 0
    for start in range(len(values) - window + 1):
        s = math.fsum(values[start:start + window])
        if best_sum is None or s > best_sum:
            best_sum, best_start = s, start
    chunk = values[best_start:best_start + window]
    mean = best_sum / window
    std = math.sqrt(math.fsum((v - mean) ** 2 for v in chunk) / window)
    return mean, std, best_start
