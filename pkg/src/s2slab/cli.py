"""Command line: ``train``, ``eval``, ``count`` and ``ablate``.

Runs write to ``$S2SLAB_LOG_DIR/<run name>/`` (default ``./runs``): an
append-only ``metrics.jsonl`` with one JSON record per evaluation and the
latest ``checkpoint.s2s``.  Errors exit with the code of their category.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

from s2slab.config import ModelConfig, desk_presets, full_presets
from s2slab.counting import report
from s2slab.data import Vocabulary
from s2slab.decode import beam_search, bleu, strip_eos
from s2slab.errors import ConfigInvalid, EmptyCorpus, S2SError, UnknownToggle
from s2slab.train import RunConfig, Trainer, load_run_config, model_from_checkpoint

LOG_DIR_ENV = "S2SLAB_LOG_DIR"
TOGGLES = ("label_smoothing", "multi_head", "layer_norm", "sync_training")

log = logging.getLogger("s2slab")


def log_dir() -> Path:
    return Path(os.environ.get(LOG_DIR_ENV, "runs"))


# -- ablation ---------------------------------------------------------------------


def derive_ablation(run: RunConfig, toggle: str) -> tuple[RunConfig, str]:
    """Config identical to ``run`` except for the removed technique, plus a note for the user."""
    if toggle not in TOGGLES:
        raise UnknownToggle(f"unknown ablation toggle {toggle!r}; choose from {', '.join(TOGGLES)}")
    model = run.model
    note = f"removed {toggle}"
    if toggle == "label_smoothing":
        model = dataclasses.replace(model, label_smoothing=0.0)
    elif toggle == "multi_head":
        def one_head(stack):
            return None if stack is None else dataclasses.replace(stack, heads=1)
        model = dataclasses.replace(
            model, encoder=one_head(model.encoder), decoder=one_head(model.decoder),
            cascade=one_head(model.cascade),
            columns=None if model.columns is None else [one_head(c) for c in model.columns])
    elif toggle == "layer_norm":
        model = dataclasses.replace(model, layer_norm=False)
    else:
        schedule = dict(run.schedule)
        if schedule.get("kind") == "rnmt":
            schedule["n"] = 1
        elif schedule.get("kind") == "transformer":
            schedule["p"] = 1
        run = dataclasses.replace(run, replicas=1, schedule=schedule)
        note = ("asynchronous training is not simulated; this ablation trains a single replica "
                "without learning-rate warmup instead")
    derived = dataclasses.replace(run, model=model.validate(), name=f"{run.name}-no_{toggle}")
    return derived.validate(), note


# -- commands ---------------------------------------------------------------------


def _run_dir(run: RunConfig, override: str | None) -> Path:
    return Path(override) if override else log_dir() / run.name


def _train(run: RunConfig, run_dir: Path) -> int:
    if (run_dir / "metrics.jsonl").exists():
        raise ConfigInvalid(f"{run_dir} already holds a run; pass --resume or choose another --run-dir")
    trainer = Trainer(run, run_dir)
    summary = trainer.fit()
    print(json.dumps(summary, sort_keys=True))
    return 0


def cmd_train(args) -> int:
    if args.resume:
        trainer = Trainer.resume(args.resume, args.run_dir)
        print(json.dumps(trainer.fit(), sort_keys=True))
        return 0
    run = load_run_config(args.config)
    return _train(run, _run_dir(run, args.run_dir))


def cmd_ablate(args) -> int:
    run, note = derive_ablation(load_run_config(args.config), args.drop)
    print(f"ablation: {note}", file=sys.stderr)
    return _train(run, _run_dir(run, args.run_dir))


def _read_lines(path: str) -> list[str]:
    try:
        return Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise ConfigInvalid(f"cannot read {path}: {exc}") from None


def cmd_eval(args) -> int:
    model, header, _ = model_from_checkpoint(args.checkpoint)
    vocab = Vocabulary(header["vocab"][4:])
    sources, refs = _read_lines(args.source), _read_lines(args.reference)
    if not sources:
        raise EmptyCorpus(f"{args.source} has no sentences")
    if len(sources) != len(refs):
        raise ConfigInvalid(f"{len(sources)} source lines vs {len(refs)} reference lines")
    hyps = []
    for line in sources:
        ids = vocab.encode(line)
        tokens, _ = beam_search(model, ids, args.beam, 2 * len(ids) + 10, args.length_norm)
        hyps.append(vocab.decode(strip_eos(tokens)))
    out = Path(args.output) if args.output else Path(args.checkpoint).with_name("hypotheses.txt")
    out.write_text("".join(h + "\n" for h in hyps), encoding="utf-8")
    score = bleu(hyps, refs)
    print(f"BLEU = {score:.2f}  ({len(hyps)} sentences, beam {args.beam}, hypotheses in {out})")
    return 0


def _count_targets(name: str) -> dict[str, ModelConfig]:
    full, desk = full_presets(), desk_presets()
    if name == "full":
        return full
    if name == "desk":
        return {f"desk/{k}": v for k, v in desk.items()}
    if name in full:
        return {name: full[name]}
    if name in desk:
        return {f"desk/{name}": desk[name]}
    path = Path(name)
    if not path.exists():
        raise ConfigInvalid(f"{name!r} is neither a preset (full, desk, {', '.join(full)}) nor a config file")
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigInvalid(f"{path}: invalid JSON ({exc})") from None
    if "model" in data:
        return {path.stem: load_run_config(path).model}
    return {path.stem: ModelConfig.from_dict(data)}


def cmd_count(args) -> int:
    configs: dict[str, ModelConfig] = {}
    for name in args.config:
        configs.update(_count_targets(name))
    print(report(configs, args.src_len, args.tgt_len))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="s2slab", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train from a run config")
    p.add_argument("config", nargs="?")
    p.add_argument("--resume", metavar="CHECKPOINT", help="continue a run from its checkpoint")
    p.add_argument("--run-dir", help="output directory (default $S2SLAB_LOG_DIR/<name>)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="beam-decode a corpus and report BLEU")
    p.add_argument("checkpoint")
    p.add_argument("source")
    p.add_argument("reference")
    p.add_argument("--beam", type=int, default=4)
    p.add_argument("--length-norm", action="store_true")
    p.add_argument("--output", help="hypotheses file (default next to the checkpoint)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("count", help="parameter and FLOP counts")
    p.add_argument("config", nargs="+", help="config file or preset: full, desk, or a preset name")
    p.add_argument("--src-len", type=int, default=50)
    p.add_argument("--tgt-len", type=int, default=50)
    p.set_defaults(func=cmd_count)

    p = sub.add_parser("ablate", help="train with one technique removed")
    p.add_argument("config")
    p.add_argument("--drop", required=True, help=f"one of {', '.join(TOGGLES)}")
    p.add_argument("--run-dir")
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "train" and not (args.config or args.resume):
        print("error [config]: train needs a config or --resume", file=sys.stderr)
        return ConfigInvalid.exit_code
    try:
        return args.func(args)
    except S2SError as exc:
        print(f"error [{exc.category}]: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
