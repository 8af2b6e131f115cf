"""Learning-rate schedules, Adam with L2, label smoothing, adaptive clipping, freezing."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from s2slab import tensor as T
from s2slab.errors import ConfigInvalid, ShapeMismatch, TargetOutOfRange, UnknownSelector
from s2slab.nn import Module, Parameter
from s2slab.tensor import Tensor

# -- schedules ----------------------------------------------------------------


@dataclass
class RnmtScheduleConfig:
    n: int = 1
    p: float = 500
    s: float = 600_000
    e: float = 1_200_000
    base: float = 1e-4
    floor: float = 5e-5

    def validate(self) -> RnmtScheduleConfig:
        if self.n < 1 or self.p <= 0 or not 0 < self.s < self.e:
            raise ConfigInvalid(f"invalid RNMT+ schedule {self}")
        return self


@dataclass
class TransformerScheduleConfig:
    r0: float = 1.0
    p: float = 4000
    d_model: int = 512

    def validate(self) -> TransformerScheduleConfig:
        if self.p <= 0 or self.d_model <= 0:
            raise ConfigInvalid(f"invalid Transformer schedule {self}")
        return self


def lr_rnmt(t: float, cfg: RnmtScheduleConfig) -> float:
    """Linear warmup to ``n``, constant, exponential decay, then held at the floor.

    The decay term reaches ``base / 2`` exactly when ``n t = e``; from then on
    the rate is ``max(formula, floor)``.
    """
    cfg.validate()
    if t < 0:
        raise ConfigInvalid("step must be non-negative")
    n, p, s, e = cfg.n, cfg.p, cfg.s, cfg.e
    warm = 1.0 + t * (n - 1) / (n * p)
    exponent = (s - n * t) / (e - s)
    # far before the decay starts the third term is astronomically large; it never wins the min
    decay = n * (2.0 * n) ** exponent if exponent * math.log(2.0 * n) < 700 else math.inf
    lr = cfg.base * min(warm, n, decay)
    if n * t >= e:
        lr = max(lr, cfg.floor)
    return lr


def lr_transformer(t: float, cfg: TransformerScheduleConfig) -> float:
    cfg.validate()
    if t < 0:
        raise ConfigInvalid("step must be non-negative")
    return cfg.r0 / math.sqrt(cfg.d_model) * min((t + 1) / (cfg.p * math.sqrt(cfg.p)), 1.0 / math.sqrt(t + 1))


@dataclass
class ConstantSchedule:
    lr: float = 1e-3


def learning_rate(t: float, cfg) -> float:
    if isinstance(cfg, RnmtScheduleConfig):
        return lr_rnmt(t, cfg)
    if isinstance(cfg, TransformerScheduleConfig):
        return lr_transformer(t, cfg)
    if isinstance(cfg, ConstantSchedule):
        return cfg.lr
    raise ConfigInvalid(f"unknown schedule {cfg!r}")


# -- Adam -------------------------------------------------------------------------


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-6
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    steps: dict[str, int] = field(default_factory=dict)

    @property
    def t(self) -> int:
        return max(self.steps.values(), default=0)


def adam_step(params: dict[str, Parameter], grads: dict[str, np.ndarray], state: AdamState, lr: float,
              weight_decay: float = 0.0, decay_prefixes: tuple[str, ...] | None = None) -> None:
    """Bias-corrected Adam; ``weight_decay`` adds ``lambda * w`` to the gradient first.

    Parameters without an entry in ``grads`` are left alone and get no state.
    """
    for name, g in grads.items():
        w = params[name]
        if g.shape != w.shape:
            raise ShapeMismatch(f"gradient for {name} has shape {g.shape}, parameter {w.shape}")
        if weight_decay > 0 and (decay_prefixes is None or name.startswith(decay_prefixes)):
            g = g + weight_decay * w.data
        if name not in state.m:
            state.m[name] = np.zeros_like(w.data)
            state.v[name] = np.zeros_like(w.data)
            state.steps[name] = 0
        state.steps[name] += 1
        k = state.steps[name]
        m, v = state.m[name], state.v[name]
        m *= state.beta1
        m += (1 - state.beta1) * g
        v *= state.beta2
        v += (1 - state.beta2) * g * g
        m_hat = m / (1 - state.beta1 ** k)
        v_hat = v / (1 - state.beta2 ** k)
        w.data -= lr * m_hat / (np.sqrt(v_hat) + state.eps)


# -- label smoothing ----------------------------------------------------------


def smoothed_targets(targets: np.ndarray, u: float, vocab: int) -> np.ndarray:
    """(1 - u) * onehot + u * uniform(vocab)."""
    targets = np.asarray(targets, dtype=np.int64)
    if targets.size and (targets.min() < 0 or targets.max() >= vocab):
        raise TargetOutOfRange(f"target ids must lie in [0, {vocab})")
    if not 0.0 <= u < 1.0:
        raise ConfigInvalid(f"smoothing uncertainty {u} outside [0, 1)")
    q = np.full(targets.shape + (vocab,), u / vocab)
    np.put_along_axis(q, targets[..., None], 1.0 - u + u / vocab, axis=-1)
    return q


def label_smoothed_ce(logits: Tensor, targets, u: float, vocab: int | None = None) -> Tensor:
    """Per-position loss ``-sum(q * log_softmax(logits))``; shape of ``targets``."""
    vocab = logits.shape[-1] if vocab is None else vocab
    if logits.shape[-1] != vocab:
        raise ShapeMismatch(f"logits width {logits.shape[-1]} != vocab {vocab}")
    q = smoothed_targets(targets, u, vocab)
    return -(T.log_softmax(logits, axis=-1) * q).sum(axis=-1)


# -- adaptive clipping ----------------------------------------------------------


@dataclass
class GradNormStats:
    """Exponential moving mean/variance of log gradient norms."""

    decay: float = 0.99
    warmup_steps: int = 100
    threshold: float = 4.0
    mean: float = 0.0
    mean_sq: float = 0.0
    count: int = 0

    @classmethod
    def from_moments(cls, mean: float, std: float, count: int, **kw) -> GradNormStats:
        return cls(mean=mean, mean_sq=std * std + mean * mean, count=count, **kw)

    @property
    def std(self) -> float:
        return math.sqrt(max(self.mean_sq - self.mean * self.mean, 0.0))

    def update(self, log_norm: float) -> None:
        if self.count == 0:
            self.mean, self.mean_sq = log_norm, log_norm * log_norm
        else:
            d = self.decay
            self.mean = d * self.mean + (1 - d) * log_norm
            self.mean_sq = d * self.mean_sq + (1 - d) * log_norm * log_norm
        self.count += 1


def adaptive_clip_check(grad_norm: float, stats: GradNormStats) -> bool:
    """True to accept the step.  Accepted steps update ``stats``; aborted ones leave it untouched."""
    if not math.isfinite(grad_norm):
        return False
    if grad_norm < 0:
        raise ValueError("gradient norm must be non-negative")
    if grad_norm == 0.0:
        return True
    log_norm = math.log(grad_norm)
    if stats.count >= stats.warmup_steps and log_norm > stats.mean + stats.threshold * stats.std:
        return False
    stats.update(log_norm)
    return True


def global_norm(grads: dict[str, np.ndarray]) -> float:
    with np.errstate(all="ignore"):
        total = math.fsum(float(np.sum(g * g)) for g in grads.values())
    return math.sqrt(total) if math.isfinite(total) else float("nan")


def aggregate_gradients(replica_grads: list[dict[str, np.ndarray]],
                        weights: list[float] | None = None) -> dict[str, np.ndarray]:
    """Weighted mean of per-replica gradients, summed in replica order.

    Replica ``i`` is weighted by ``weights[i]`` (its token or sentence count),
    so the result equals the gradient of the loss over the union of the
    micro-batches.  ``weights=None`` is a plain mean.
    """
    if not replica_grads:
        raise ValueError("need at least one replica")
    if weights is None:
        weights = [1.0] * len(replica_grads)
    total = float(sum(weights))
    out = {}
    for name in replica_grads[0]:
        acc = np.zeros_like(replica_grads[0][name])
        for w, grads in zip(weights, replica_grads):
            acc += w * grads[name]
        out[name] = acc / total
    return out


# -- freezing ----------------------------------------------------------------------


def _select(model: Module, selector: str) -> list[Parameter]:
    named = list(model.named_parameters())
    if selector in ("*", "all"):
        return [p for _, p in named]
    chosen = [p for n, p in named if n == selector or n.startswith(selector + ".")]
    if not chosen:
        raise UnknownSelector(f"selector {selector!r} matches no parameter")
    return chosen


def freeze(model: Module, selector: str) -> None:
    """Exclude the selected parameters from gradient computation and updates."""
    for p in _select(model, selector):
        p.requires_grad = False
        p.grad = None


def unfreeze(model: Module, selector: str) -> None:
    for p in _select(model, selector):
        p.requires_grad = True


def trainable(model: Module) -> dict[str, Parameter]:
    return {n: p for n, p in model.named_parameters() if p.requires_grad}
