"""Vocabulary, synthetic tasks, batching, and the plain-text corpus loader."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from s2slab.errors import ConfigInvalid, EmptyCorpus, SentenceExceedsBudget

PAD, BOS, EOS, UNK = 0, 1, 2, 3
RESERVED = ("<pad>", "<s>", "</s>", "<unk>")
SUBSTITUTION_SEED = 1234

Pair = tuple[list[int], list[int]]


class Vocabulary:
    """Token <-> id bijection with ids 0..3 reserved for pad/bos/eos/unk."""

    def __init__(self, tokens: Iterable[str] = ()):
        self.itos: list[str] = list(RESERVED)
        self.stoi: dict[str, int] = {t: i for i, t in enumerate(RESERVED)}
        for tok in tokens:
            if tok not in self.stoi:
                self.stoi[tok] = len(self.itos)
                self.itos.append(tok)

    @classmethod
    def toy(cls, size: int) -> Vocabulary:
        if size <= len(RESERVED):
            raise ConfigInvalid(f"toy vocabulary needs more than {len(RESERVED)} ids")
        return cls(f"t{i}" for i in range(len(RESERVED), size))

    @classmethod
    def from_lines(cls, lines: Iterable[str]) -> Vocabulary:
        counts = Counter(tok for line in lines for tok in line.split())
        return cls(sorted(counts, key=lambda t: (-counts[t], t)))

    def __len__(self) -> int:
        return len(self.itos)

    def encode(self, sentence: str) -> list[int]:
        return [self.stoi.get(tok, UNK) for tok in sentence.split()]

    def decode(self, ids: Sequence[int]) -> str:
        out = []
        for i in ids:
            i = int(i)
            if i == EOS:
                break
            if i in (PAD, BOS):
                continue
            out.append(self.itos[i] if 0 <= i < len(self.itos) else RESERVED[UNK])
        return " ".join(out)


def substitution_table(vocab_size: int) -> np.ndarray:
    """Fixed permutation of the content ids; reserved ids map to themselves."""
    table = np.arange(vocab_size)
    content = np.arange(len(RESERVED), vocab_size)
    table[len(RESERVED):] = np.random.default_rng(SUBSTITUTION_SEED).permutation(content)
    return table


def gen_task(kind: str, count: int, len_range: tuple[int, int] = (4, 12), vocab_size: int = 16,
             seed: int = 0) -> list[Pair]:
    """Deterministic synthetic sentence pairs over content ids ``4..vocab_size-1``."""
    lo, hi = len_range
    if kind not in ("copy", "reverse", "toy_translation"):
        raise ConfigInvalid(f"unknown task kind {kind!r}")
    if count < 0 or lo < 1 or hi < lo or vocab_size <= len(RESERVED):
        raise ConfigInvalid(f"bad task parameters count={count} len_range={len_range} vocab={vocab_size}")
    rng = np.random.default_rng(seed)
    table = substitution_table(vocab_size)
    pairs = []
    for _ in range(count):
        n = int(rng.integers(lo, hi + 1))
        src = rng.integers(len(RESERVED), vocab_size, size=n).tolist()
        if kind == "copy":
            tgt = list(src)
        elif kind == "reverse":
            tgt = src[::-1]
        else:
            tgt = [int(table[t]) for t in reversed(src)]
        pairs.append((src, tgt))
    return pairs


@dataclass
class Batch:
    """Padded id matrices.  ``target`` rows end with eos; ``decoder_input`` starts with bos."""

    source: np.ndarray
    target: np.ndarray
    source_lengths: np.ndarray
    target_lengths: np.ndarray
    pairs: list[Pair]

    @property
    def source_mask(self) -> np.ndarray:
        return np.arange(self.source.shape[1])[None, :] < self.source_lengths[:, None]

    @property
    def target_mask(self) -> np.ndarray:
        return np.arange(self.target.shape[1])[None, :] < self.target_lengths[:, None]

    @property
    def decoder_input(self) -> np.ndarray:
        out = np.full_like(self.target, PAD)
        out[:, 0] = BOS
        out[:, 1:] = self.target[:, :-1]
        return np.where(self.target_mask, out, PAD)

    @property
    def num_tokens(self) -> int:
        return int(self.target_lengths.sum())

    @property
    def num_sentences(self) -> int:
        return int(self.source.shape[0])

    def __len__(self) -> int:
        return self.num_sentences


def make_batch(pairs: Sequence[Pair]) -> Batch:
    pairs = [(list(s), list(t)) for s, t in pairs]
    if not pairs:
        raise EmptyCorpus("cannot build a batch from zero pairs")
    src_len = np.array([len(s) for s, _ in pairs], dtype=np.int64)
    tgt_len = np.array([len(t) + 1 for _, t in pairs], dtype=np.int64)
    src = np.full((len(pairs), max(int(src_len.max()), 1)), PAD, dtype=np.int64)
    tgt = np.full((len(pairs), int(tgt_len.max())), PAD, dtype=np.int64)
    for i, (s, t) in enumerate(pairs):
        src[i, :len(s)] = s
        tgt[i, :len(t)] = t
        tgt[i, len(t)] = EOS
    return Batch(src, tgt, src_len, tgt_len, pairs)


def batch_by_sentences(pairs: Sequence[Pair], size: int) -> list[Batch]:
    if size < 1:
        raise ConfigInvalid("batch size must be positive")
    return [make_batch(pairs[i:i + size]) for i in range(0, len(pairs), size)]


def batch_by_tokens(pairs: Sequence[Pair], budget: int) -> list[Batch]:
    """Greedy fill over length-sorted pairs.

    A batch of ``n`` pairs costs ``n * max_len`` padded tokens per side, where
    lengths are sentence lengths (the appended eos is not charged).
    """
    if budget < 1:
        raise ConfigInvalid("token budget must be positive")
    for s, t in pairs:
        if len(s) > budget or len(t) > budget:
            raise SentenceExceedsBudget(f"pair of lengths ({len(s)}, {len(t)}) exceeds budget {budget}")
    order = sorted(range(len(pairs)), key=lambda i: (max(len(pairs[i][0]), len(pairs[i][1])), i))
    batches, current, ms, mt = [], [], 0, 0
    for i in order:
        s, t = pairs[i]
        ns, nt = max(ms, len(s)), max(mt, len(t))
        if current and ((len(current) + 1) * ns > budget or (len(current) + 1) * nt > budget):
            batches.append(make_batch(current))
            current, ns, nt = [], len(s), len(t)
        current.append(pairs[i])
        ms, mt = ns, nt
    if current:
        batches.append(make_batch(current))
    return batches


def shuffled(pairs: Sequence[Pair], rng: np.random.Generator) -> list[Pair]:
    return [pairs[i] for i in rng.permutation(len(pairs))]


def load_parallel(src_path: str | Path, tgt_path: str | Path,
                  vocab: Vocabulary | None = None) -> tuple[list[Pair], Vocabulary]:
    """Two UTF-8 files, one whitespace-tokenized sentence per line."""
    src_lines = Path(src_path).read_text(encoding="utf-8").splitlines()
    tgt_lines = Path(tgt_path).read_text(encoding="utf-8").splitlines()
    if len(src_lines) != len(tgt_lines):
        raise ConfigInvalid(f"{src_path} and {tgt_path} have different line counts")
    if vocab is None:
        vocab = Vocabulary.from_lines(src_lines + tgt_lines)
    return [(vocab.encode(s), vocab.encode(t)) for s, t in zip(src_lines, tgt_lines)], vocab
