"""Run configuration, the synchronous replica step, and the training loop."""

from __future__ import annotations

import dataclasses
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable

import numpy as np

from s2slab import checkpoint, nn
from s2slab import tensor as T
from s2slab.config import ModelConfig, _reject_unknown
from s2slab.data import Batch, Pair, Vocabulary, batch_by_sentences, batch_by_tokens, gen_task, load_parallel, \
    make_batch, shuffled
from s2slab.decode import beam_search, best_eval_window, bleu, greedy_decode_batch, strip_eos, token_accuracy
from s2slab.errors import CheckpointIncompatible, ConfigInvalid, EmptyBatch, MissingPretrainedEncoder, \
    NonFiniteValue
from s2slab.models import Seq2Seq, build_model, forward_loss, loss_weight_count
from s2slab.optim import (
    AdamState,
    ConstantSchedule,
    GradNormStats,
    RnmtScheduleConfig,
    TransformerScheduleConfig,
    adam_step,
    adaptive_clip_check,
    aggregate_gradients,
    global_norm,
    learning_rate,
    trainable,
)

log = logging.getLogger(__name__)

SCHEDULES = {"rnmt": RnmtScheduleConfig, "transformer": TransformerScheduleConfig, "constant": ConstantSchedule}


@dataclass
class TaskSpec:
    kind: str = "toy_translation"
    train_pairs: int = 5000
    dev_pairs: int = 500
    len_range: tuple[int, int] = (4, 12)
    seed: int = 0


@dataclass
class DataFiles:
    train_src: str
    train_tgt: str
    dev_src: str
    dev_tgt: str


@dataclass
class RunConfig:
    model: ModelConfig
    name: str = "run"
    schedule: dict[str, Any] = field(default_factory=lambda: {"kind": "constant", "lr": 1e-3})
    batching: str = "sentences"
    batch_size: int = 32
    replicas: int = 1
    weight_decay: float = 0.0
    clip: bool = True
    clip_decay: float = 0.99
    clip_warmup: int = 100
    clip_threshold: float = 4.0
    max_consecutive_aborts: int = 50
    steps: int = 3000
    eval_every: int = 100
    window: int = 21
    seed: int = 0
    task: TaskSpec | None = field(default_factory=TaskSpec)
    data: DataFiles | None = None
    pretrained: list[str] = field(default_factory=list)
    eval_beam: int = 1
    decode_extra: int = 5
    stop_accuracy: float | None = None
    stop_bleu: float | None = None
    stop_patience: int = 1

    def schedule_config(self):
        spec = dict(self.schedule)
        kind = spec.pop("kind", None)
        if kind not in SCHEDULES:
            raise ConfigInvalid(f"unknown schedule kind {kind!r}")
        _reject_unknown(SCHEDULES[kind], spec, "schedule")
        cfg = SCHEDULES[kind](**spec)
        return cfg.validate() if hasattr(cfg, "validate") else cfg

    def validate(self) -> RunConfig:
        self.model.validate()
        self.schedule_config()
        if self.batching not in ("sentences", "tokens"):
            raise ConfigInvalid(f"unknown batching scheme {self.batching!r}")
        if self.batch_size < 1 or self.replicas < 1 or self.steps < 0 or self.eval_every < 1:
            raise ConfigInvalid("batch_size, replicas and eval_every must be positive, steps >= 0")
        if self.batching == "sentences" and self.batch_size < self.replicas:
            raise ConfigInvalid("each replica needs at least one sentence per batch")
        if self.window < 1 or self.eval_beam < 1 or self.stop_patience < 1 or self.weight_decay < 0:
            raise ConfigInvalid("window, eval_beam and stop_patience must be positive, weight_decay non-negative")
        if (self.task is None) == (self.data is None):
            raise ConfigInvalid("give exactly one of task or data")
        if self.model.family in ("cascaded", "multi_column") and not self.pretrained:
            raise MissingPretrainedEncoder(f"{self.model.family} model needs pretrained checkpoints")
        return self

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict[str, Any], base_dir: Path | None = None) -> RunConfig:
        data = dict(data)
        _reject_unknown(cls, data, "run")
        if "model" not in data:
            raise ConfigInvalid("run config needs a model section")
        data["model"] = ModelConfig.from_dict(data["model"])
        if data.get("task") is not None:
            _reject_unknown(TaskSpec, data["task"], "task")
            task = dict(data["task"])
            if "len_range" in task:
                task["len_range"] = tuple(task["len_range"])
            data["task"] = TaskSpec(**task)
        if data.get("data") is not None:
            _reject_unknown(DataFiles, data["data"], "data")
            files = {k: _resolve(v, base_dir) for k, v in data["data"].items()}
            try:
                data["data"] = DataFiles(**files)
            except TypeError as exc:
                raise ConfigInvalid(f"data: {exc}") from None
            data.setdefault("task", None)
        if "pretrained" in data:
            data["pretrained"] = [_resolve(p, base_dir) for p in data["pretrained"]]
        try:
            return cls(**data).validate()
        except TypeError as exc:
            raise ConfigInvalid(str(exc)) from None


def _resolve(path: str, base_dir: Path | None) -> str:
    p = Path(path)
    return str(base_dir / p) if base_dir is not None and not p.is_absolute() else str(p)


def load_run_config(path: str | Path) -> RunConfig:
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigInvalid(f"cannot read config {path}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise ConfigInvalid(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(data, dict):
        raise ConfigInvalid(f"{path}: top level must be an object")
    return RunConfig.from_dict(data, path.parent)


# -- state ----------------------------------------------------------------------------


@dataclass
class TrainState:
    """Everything besides the weights needed to resume a run exactly.

    Randomness is derived from ``seed`` and the step counter, so no generator
    state needs saving: batch order comes from ``(seed, epoch)`` and dropout
    masks from ``(seed, step, replica)``.
    """

    seed: int = 0
    step: int = 0
    aborted: int = 0
    consecutive_aborts: int = 0
    adam: AdamState = field(default_factory=AdamState)
    clip: GradNormStats = field(default_factory=GradNormStats)
    history: list[list[float]] = field(default_factory=list)

    def header(self) -> dict[str, Any]:
        return {
            "seed": self.seed, "step": self.step, "aborted": self.aborted,
            "consecutive_aborts": self.consecutive_aborts,
            "adam": {"beta1": self.adam.beta1, "beta2": self.adam.beta2, "eps": self.adam.eps,
                     "steps": self.adam.steps},
            "clip": dataclasses.asdict(self.clip),
            "history": self.history,
        }

    @classmethod
    def from_header(cls, h: dict[str, Any], tensors: dict[str, np.ndarray]) -> TrainState:
        a = h["adam"]
        adam = AdamState(a["beta1"], a["beta2"], a["eps"], steps=dict(a["steps"]))
        for name in adam.steps:
            adam.m[name] = np.array(tensors[f"adam.m.{name}"])
            adam.v[name] = np.array(tensors[f"adam.v.{name}"])
        return cls(h["seed"], h["step"], h["aborted"], h["consecutive_aborts"], adam,
                   GradNormStats(**h["clip"]), [list(x) for x in h["history"]])


@dataclass
class StepResult:
    accepted: bool
    loss: float
    grad_norm: float
    tokens: int


def split_batch(batch: Batch, n: int) -> list[Batch]:
    """Contiguous split into ``n`` micro-batches (sizes differ by at most one)."""
    if batch.num_sentences < n:
        raise EmptyBatch(f"{batch.num_sentences} sentences cannot feed {n} replicas")
    return [make_batch(list(chunk)) for chunk in _chunks(batch.pairs, n)]


def _chunks(items: list, n: int) -> list[list]:
    k, r = divmod(len(items), n)
    out, pos = [], 0
    for i in range(n):
        size = k + (1 if i < r else 0)
        out.append(items[pos:pos + size])
        pos += size
    return out


def replica_gradients(model: Seq2Seq, micro_batches: list[Batch], rngs: list | None = None):
    """Per-replica (gradients, weight, loss) against the same parameters, in replica order."""
    params = trainable(model)
    results = []
    for i, mb in enumerate(micro_batches):
        if mb.num_tokens == 0:
            raise EmptyBatch(f"replica {i} got an empty micro-batch")
        model.zero_grad()
        loss, _ = forward_loss(model, mb, None if rngs is None else rngs[i])
        if params:
            T.backward(loss)
        grads = {n: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data)) for n, p in params.items()}
        results.append((grads, float(loss_weight_count(model, mb)), loss.item()))
    model.zero_grad()
    return results


def sync_replica_step(model: Seq2Seq, micro_batches: list[Batch], state: TrainState, lr: float,
                      weight_decay: float = 0.0, rngs: list | None = None, clip: bool = True,
                      grad_hook: Callable[[dict[str, np.ndarray]], dict[str, np.ndarray]] | None = None
                      ) -> StepResult:
    """One synchronous update from ``n`` replicas.

    Each replica computes gradients on its micro-batch against identical
    parameters.  Gradients are combined weighted by each replica's loss
    normalizer (tokens or sentences) so the update equals one step over the
    concatenated batch.  ``grad_hook`` may rewrite the aggregate before the
    clipping check (fault injection).  An aborted step touches nothing but
    the abort counters.
    """
    if not micro_batches:
        raise EmptyBatch("need at least one micro-batch")
    tokens = sum(mb.num_tokens for mb in micro_batches)
    try:
        results = replica_gradients(model, micro_batches, rngs)
        weights = [w for _, w, _ in results]
        grads = aggregate_gradients([g for g, _, _ in results], weights)
        loss = math.fsum(w * l for _, w, l in results) / sum(weights)
    except NonFiniteValue:
        model.zero_grad()
        grads, loss = None, float("nan")
    if grad_hook is not None and grads is not None:
        grads = grad_hook(grads)
    norm = float("nan") if grads is None else global_norm(grads)
    accepted = adaptive_clip_check(norm, state.clip) if clip else math.isfinite(norm)
    if accepted:
        adam_step(trainable(model), grads, state.adam, lr, weight_decay)
        state.consecutive_aborts = 0
    else:
        state.aborted += 1
        state.consecutive_aborts += 1
    return StepResult(accepted, loss, norm, tokens)


# -- data -----------------------------------------------------------------------------


def load_data(run: RunConfig) -> tuple[list[Pair], list[Pair], Vocabulary]:
    if run.task is not None:
        t = run.task
        vocab = Vocabulary.toy(run.model.vocab_size)
        train = gen_task(t.kind, t.train_pairs, t.len_range, run.model.vocab_size, t.seed)
        dev = gen_task(t.kind, t.dev_pairs, t.len_range, run.model.vocab_size, t.seed + 1)
        return train, dev, vocab
    d = run.data
    train, vocab = load_parallel(d.train_src, d.train_tgt)
    dev, _ = load_parallel(d.dev_src, d.dev_tgt, vocab)
    if len(vocab) > run.model.vocab_size:
        raise ConfigInvalid(f"corpus vocabulary {len(vocab)} exceeds model vocab_size {run.model.vocab_size}")
    return train, dev, vocab


def epoch_batches(run: RunConfig, pairs: list[Pair], epoch: int) -> list[Batch]:
    rng = np.random.default_rng([run.seed, epoch])
    if run.batching == "sentences":
        return batch_by_sentences(shuffled(pairs, rng), run.batch_size)
    batches = batch_by_tokens(pairs, run.batch_size)
    return [batches[i] for i in rng.permutation(len(batches))]


# -- evaluation -------------------------------------------------------------------------


@dataclass
class EvalResult:
    bleu: float
    token_accuracy: float
    hypotheses: list[list[int]]


def evaluate(model: Seq2Seq, pairs: list[Pair], beam: int = 1, extra: int = 5, chunk: int = 250) -> EvalResult:
    """Decode every source (greedy when ``beam == 1``) and score against the targets."""
    hyps: list[list[int]] = []
    if beam == 1:
        for i in range(0, len(pairs), chunk):
            part = pairs[i:i + chunk]
            max_len = max(len(s) for s, _ in part) + extra
            hyps += greedy_decode_batch(model, [s for s, _ in part], max_len)
    else:
        for s, _ in pairs:
            hyps.append(beam_search(model, s, beam, len(s) + extra)[0])
    refs = [t for _, t in pairs]
    score = bleu([strip_eos(h) for h in hyps], refs)
    return EvalResult(score, token_accuracy(hyps, refs), hyps)


# -- model construction ----------------------------------------------------------------


def load_pretrained_sources(paths: list[str]) -> list[dict[str, np.ndarray]]:
    sources = []
    for p in paths:
        try:
            _, tensors = checkpoint.read(p)
        except CheckpointIncompatible as exc:
            raise MissingPretrainedEncoder(f"pretrained checkpoint {p}: {exc}") from None
        sources.append({k: v for k, v in tensors.items() if not k.startswith("adam.")})
    return sources


def build_for_run(run: RunConfig) -> Seq2Seq:
    cfg = run.model
    if cfg.family == "cascaded":
        return build_model(cfg, load_pretrained_sources(run.pretrained)[0])
    if cfg.family == "multi_column":
        return build_model(cfg, load_pretrained_sources(run.pretrained))
    return build_model(cfg)


def model_from_checkpoint(path: str | Path) -> tuple[Seq2Seq, dict[str, Any], dict[str, np.ndarray]]:
    """Rebuild the model recorded in a checkpoint (no pretrained sources needed)."""
    header, tensors = checkpoint.read(path)
    try:
        cfg = ModelConfig.from_dict(header["run"]["model"])
    except (KeyError, TypeError) as exc:
        raise CheckpointIncompatible(f"checkpoint header lacks a model config: {exc}") from None
    with nn.symbolic():
        model = build_model(cfg)
    checkpoint.load_parameters(model, tensors)
    return model, header, tensors


# -- the trainer ---------------------------------------------------------------------------


class Trainer:
    """Owns one model and its TrainState; appends one metrics record per evaluation."""

    def __init__(self, run: RunConfig, run_dir: str | Path, model: Seq2Seq | None = None,
                 state: TrainState | None = None, vocab: Vocabulary | None = None):
        self.run = run.validate()
        self.run_dir = Path(run_dir)
        self.metrics_path = self.run_dir / "metrics.jsonl"
        self.checkpoint_path = self.run_dir / "checkpoint.s2s"
        self.train_pairs, self.dev_pairs, data_vocab = load_data(run)
        self.vocab = vocab or data_vocab
        self.model = model if model is not None else build_for_run(run)
        self.state = state or TrainState(seed=run.seed, clip=GradNormStats(
            decay=run.clip_decay, warmup_steps=run.clip_warmup, threshold=run.clip_threshold))
        self.schedule = run.schedule_config()
        self.grad_hook = None
        self._batches: tuple[int, list[Batch]] | None = None
        self._loss_sum = 0.0
        self._loss_count = 0

    @classmethod
    def resume(cls, checkpoint_path: str | Path, run_dir: str | Path | None = None) -> Trainer:
        model, header, tensors = model_from_checkpoint(checkpoint_path)
        run = RunConfig.from_dict(header["run"])
        state = TrainState.from_header(header["state"], tensors)
        vocab = Vocabulary(header["vocab"][4:])
        return cls(run, run_dir or Path(checkpoint_path).parent, model, state, vocab)

    def batch_at(self, step: int) -> Batch:
        if self._batches is None:
            self._batches = (0, epoch_batches(self.run, self.train_pairs, 0))
        n = len(self._batches[1])
        epoch, idx = divmod(step, n)
        if self._batches[0] != epoch:
            self._batches = (epoch, epoch_batches(self.run, self.train_pairs, epoch))
        return self._batches[1][idx]

    def lr(self) -> float:
        return learning_rate(self.state.step, self.schedule)

    def train_step(self) -> StepResult:
        run, step = self.run, self.state.step
        micro = split_batch(self.batch_at(step), run.replicas) if run.replicas > 1 else [self.batch_at(step)]
        rngs = [np.random.default_rng([run.seed, step, i]) for i in range(len(micro))]
        result = sync_replica_step(self.model, micro, self.state, self.lr(), run.weight_decay, rngs,
                                   run.clip, self.grad_hook)
        self.state.step += 1
        if result.accepted:
            self._loss_sum += result.loss
            self._loss_count += 1
        return result

    def evaluate(self) -> EvalResult:
        return evaluate(self.model, self.dev_pairs, self.run.eval_beam, self.run.decode_extra)

    def _append(self, record: dict[str, Any]) -> None:
        self.run_dir.mkdir(parents=True, exist_ok=True)
        with open(self.metrics_path, "a", encoding="utf-8") as fh:
            fh.write(json.dumps(record, sort_keys=True) + "\n")

    def log_eval(self) -> dict[str, Any]:
        res = self.evaluate()
        loss = self._loss_sum / self._loss_count if self._loss_count else float("nan")
        record = {"step": self.state.step, "bleu": round(res.bleu, 6),
                  "token_accuracy": round(res.token_accuracy, 6),
                  "loss": None if math.isnan(loss) else round(loss, 9),
                  "lr": self.lr(), "aborted_steps": self.state.aborted}
        self.state.history.append([self.state.step, res.bleu, res.token_accuracy])
        self._loss_sum, self._loss_count = 0.0, 0
        self._append(record)
        log.info("step %d  bleu %.2f  acc %.4f  loss %s", record["step"], res.bleu, res.token_accuracy,
                 record["loss"])
        return record

    def save(self, path: str | Path | None = None) -> Path:
        path = Path(path or self.checkpoint_path)
        tensors: dict[str, np.ndarray] = {}
        for name, p in self.model.named_parameters():
            p.data = checkpoint.snap_f32(p.data)
            tensors[name] = p.data
        # moments follow parameter order, not Adam's insertion order, so a reload writes the same bytes
        names = [n for n, _ in self.model.named_parameters() if n in self.state.adam.steps]
        for name in names:
            for kind, buf in (("m", self.state.adam.m), ("v", self.state.adam.v)):
                buf[name] = checkpoint.snap_f32(buf[name])
                tensors[f"adam.{kind}.{name}"] = buf[name]
        header = {"run": self.run.to_dict(), "state": self.state.header(), "vocab": self.vocab.itos}
        checkpoint.write(path, header, tensors)
        return path

    def should_stop(self) -> bool:
        """True once the last ``stop_patience`` evaluations all met the thresholds."""
        run = self.run
        if run.stop_accuracy is None and run.stop_bleu is None:
            return False
        recent = self.state.history[-run.stop_patience:]
        if len(recent) < run.stop_patience:
            return False
        return all((run.stop_accuracy is None or acc >= run.stop_accuracy)
                   and (run.stop_bleu is None or score >= run.stop_bleu) for _, score, acc in recent)

    def fit(self) -> dict[str, Any]:
        """Train until ``run.steps`` or the stop thresholds; returns a summary."""
        run = self.run
        record = None
        while self.state.step < run.steps:
            self.train_step()
            if self.state.consecutive_aborts > run.max_consecutive_aborts:
                self._append({"event": "halted", "step": self.state.step, "aborted_steps": self.state.aborted,
                              "reason": "non-finite or exploding gradients"})
                self.save()
                raise NonFiniteValue(f"training halted at step {self.state.step} after "
                                     f"{self.state.consecutive_aborts} consecutive aborted steps")
            if self.state.step % run.eval_every == 0:
                record = self.log_eval()
                self.save()
                if self.should_stop():
                    break
        if record is None or record["step"] != self.state.step:
            record = self.log_eval()
            self.save()
        return self.summary()

    def summary(self) -> dict[str, Any]:
        hist = self.state.history
        window = min(self.run.window, len(hist))
        mean, std, start = best_eval_window([h[1] for h in hist], window)
        last = hist[-1]
        return {"step": self.state.step, "bleu": last[1], "token_accuracy": last[2],
                "window": window, "window_mean_bleu": mean, "window_std_bleu": std,
                "window_start_step": hist[start][0], "aborted_steps": self.state.aborted}
