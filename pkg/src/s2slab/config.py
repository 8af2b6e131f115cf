"""Declarative model configuration, strict dict round-tripping, and presets."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Any

from s2slab.errors import ConfigInvalid
from s2slab.nn import DropoutSpec

FAMILIES = ("rnmt_plus", "transformer", "convs2s")
MODEL_FAMILIES = FAMILIES + ("hybrid", "cascaded", "multi_column")


@dataclass
class StackConfig:
    """One encoder or decoder stack.

    ``d_model`` is the LSTM width per direction for ``rnmt_plus``, the model
    width for ``transformer`` and the embedding width for ``convs2s``.
    """

    family: str
    layers: int
    d_model: int
    heads: int = 4
    d_ff: int = 0
    channels: list[int] | None = None
    kernels: list[int] | None = None
    d_out_embed: int | None = None

    def validate(self, where: str) -> None:
        if self.family not in FAMILIES:
            raise ConfigInvalid(f"{where}: unknown family {self.family!r}")
        if self.layers < 1 or self.d_model < 1 or self.heads < 1:
            raise ConfigInvalid(f"{where}: layers, d_model and heads must be positive")
        if self.family == "transformer":
            if self.d_model % self.heads:
                raise ConfigInvalid(f"{where}: d_model {self.d_model} not divisible by {self.heads} heads")
            if self.d_ff < 1:
                raise ConfigInvalid(f"{where}: transformer stack needs d_ff")
        if self.family == "rnmt_plus" and self.d_model % self.heads:
            raise ConfigInvalid(f"{where}: d_model {self.d_model} not divisible by {self.heads} heads")
        if self.family == "convs2s":
            if not self.channels or not self.kernels:
                raise ConfigInvalid(f"{where}: convs2s stack needs channels and kernels")
            if len(self.channels) != self.layers or len(self.kernels) != self.layers:
                raise ConfigInvalid(f"{where}: channels/kernels must list one entry per layer")


@dataclass
class ModelConfig:
    family: str
    vocab_size: int
    encoder: StackConfig
    decoder: StackConfig
    residual_start_layer: int = 3
    dropout: DropoutSpec = field(default_factory=DropoutSpec)
    label_smoothing: float = 0.1
    loss_normalization: str | None = None
    feed_context_to_softmax: bool = True
    freeze_encoder: bool = False
    positional: str | None = None
    layer_norm: bool = True
    raw_output_gate: bool = False
    attention_output_projection: bool = True
    encoder_grad_scale: float | None = None
    cascade: StackConfig | None = None
    columns: list[StackConfig] | None = None
    max_positions: int = 256
    share_embeddings: bool = False
    init_seed: int = 0

    @property
    def normalization(self) -> str:
        if self.loss_normalization is not None:
            return self.loss_normalization
        return "sentence" if self.decoder.family == "rnmt_plus" else "token"

    @property
    def positional_mode(self) -> str:
        if self.positional is not None:
            return self.positional
        return "learned" if self.encoder.family == "convs2s" else "sinusoidal"

    def validate(self) -> ModelConfig:
        if self.family not in MODEL_FAMILIES:
            raise ConfigInvalid(f"unknown model family {self.family!r}")
        if self.vocab_size < 5:
            raise ConfigInvalid("vocab_size must leave room for the 4 reserved ids")
        if self.residual_start_layer < 1:
            raise ConfigInvalid("residual_start_layer must be >= 1")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ConfigInvalid("label_smoothing must be in [0, 1)")
        if self.loss_normalization not in (None, "sentence", "token"):
            raise ConfigInvalid(f"unknown loss normalization {self.loss_normalization!r}")
        if self.positional not in (None, "sinusoidal", "learned", "none"):
            raise ConfigInvalid(f"unknown positional mode {self.positional!r}")
        self.encoder.validate("encoder")
        self.decoder.validate("decoder")
        enc, dec = self.encoder.family, self.decoder.family
        if self.family in FAMILIES and not enc == dec == self.family:
            raise ConfigInvalid(f"{self.family} model needs {self.family} encoder and decoder")
        if self.family == "hybrid":
            if "convs2s" in (enc, dec):
                raise ConfigInvalid("ConvS2S hybrids are not supported")
            if enc == dec:
                raise ConfigInvalid("a hybrid needs different encoder and decoder families")
        if self.family == "cascaded":
            if enc != "rnmt_plus" or dec != "rnmt_plus":
                raise ConfigInvalid("cascaded model needs an RNMT+ encoder and decoder")
            if self.cascade is None or self.cascade.family != "transformer":
                raise ConfigInvalid("cascaded model needs a transformer cascade stack")
            self.cascade.validate("cascade")
            if self.cascade.d_model != self.decoder.d_model:
                raise ConfigInvalid("cascade d_model must equal the RNMT+ projection width")
        if self.family == "multi_column":
            if dec != "rnmt_plus":
                raise ConfigInvalid("multi-column model needs an RNMT+ decoder")
            if not self.columns or len(self.columns) < 2:
                raise ConfigInvalid("multi-column model needs at least two columns")
            for i, col in enumerate(self.columns):
                col.validate(f"columns[{i}]")
                if col.family == "convs2s":
                    raise ConfigInvalid("ConvS2S columns are not supported")
        if self.encoder_grad_scale is not None and self.encoder_grad_scale <= 0:
            raise ConfigInvalid("encoder_grad_scale must be positive")
        return self

    # -- dict round trip --------------------------------------------------
    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> ModelConfig:
        data = dict(data)
        _reject_unknown(cls, data, "model")
        for key in ("encoder", "decoder", "cascade"):
            if data.get(key) is not None:
                data[key] = _stack(data[key], key)
        if data.get("columns") is not None:
            data["columns"] = [_stack(c, f"columns[{i}]") for i, c in enumerate(data["columns"])]
        if isinstance(data.get("dropout"), dict):
            _reject_unknown(DropoutSpec, data["dropout"], "dropout")
            data["dropout"] = DropoutSpec(**data["dropout"])
        try:
            return cls(**data).validate()
        except TypeError as exc:
            raise ConfigInvalid(str(exc)) from None


def _reject_unknown(cls, data: dict, where: str) -> None:
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigInvalid(f"{where}: unknown keys {unknown}")


def _stack(data: dict, where: str) -> StackConfig:
    if isinstance(data, StackConfig):
        return data
    _reject_unknown(StackConfig, data, where)
    try:
        return StackConfig(**data)
    except TypeError as exc:
        raise ConfigInvalid(f"{where}: {exc}") from None


# -- presets ----------------------------------------------------------------

FULL_VOCAB = 32000


def rnmt_stack(layers: int, d: int, heads: int = 4) -> StackConfig:
    return StackConfig("rnmt_plus", layers, d, heads)


def transformer_stack(layers: int, d: int, heads: int, d_ff: int) -> StackConfig:
    return StackConfig("transformer", layers, d, heads, d_ff)


def convs2s_fr_stack() -> StackConfig:
    channels = [512] * 5 + [768] * 4 + [1024] * 3 + [2048, 4096]
    kernels = [3] * 12 + [1, 1]
    return StackConfig("convs2s", 14, 768, 1, channels=channels, kernels=kernels, d_out_embed=768)


def full_presets() -> dict[str, ModelConfig]:
    """The four full-scale shapes compared by parameter and FLOP count."""
    base = transformer_stack(6, 512, 8, 2048)
    big = transformer_stack(6, 1024, 16, 8192)
    return {
        "convs2s": ModelConfig("convs2s", FULL_VOCAB, convs2s_fr_stack(), convs2s_fr_stack(),
                               label_smoothing=0.1).validate(),
        "transformer_base": ModelConfig("transformer", FULL_VOCAB, base, base).validate(),
        "transformer_big": ModelConfig("transformer", FULL_VOCAB, big, big).validate(),
        "rnmt_plus": ModelConfig("rnmt_plus", FULL_VOCAB, rnmt_stack(6, 1024), rnmt_stack(8, 1024)).validate(),
    }


def desk_presets(vocab: int = 16) -> dict[str, ModelConfig]:
    """Small shapes that train on the toy tasks in minutes on one CPU core."""
    rnmt_enc, rnmt_dec = rnmt_stack(2, 64), rnmt_stack(2, 64)
    trans = transformer_stack(2, 64, 4, 128)
    return {
        "rnmt_plus": ModelConfig("rnmt_plus", vocab, rnmt_enc, rnmt_dec,
                                 dropout=DropoutSpec(0.1, 0.1, 0.0, 0.0)).validate(),
        "transformer": ModelConfig("transformer", vocab, trans, trans,
                                   dropout=DropoutSpec(0.1, 0.1, 0.0, 0.0)).validate(),
        "convs2s": ModelConfig("convs2s", vocab,
                               StackConfig("convs2s", 4, 64, 1, channels=[64] * 4, kernels=[3] * 4),
                               StackConfig("convs2s", 4, 64, 1, channels=[64] * 4, kernels=[3] * 4),
                               dropout=DropoutSpec(0.1, 0.0, 0.0, 0.0)).validate(),
        "trans_rnmt": ModelConfig("hybrid", vocab, trans, rnmt_dec,
                                  dropout=DropoutSpec(0.1, 0.1, 0.0, 0.0)).validate(),
        "rnmt_trans": ModelConfig("hybrid", vocab, rnmt_enc, trans,
                                  dropout=DropoutSpec(0.1, 0.1, 0.0, 0.0)).validate(),
        "cascaded": ModelConfig("cascaded", vocab, rnmt_enc, rnmt_dec, freeze_encoder=True,
                                cascade=transformer_stack(2, 64, 4, 128),
                                dropout=DropoutSpec(0.1, 0.1, 0.0, 0.0)).validate(),
        "multi_column": ModelConfig("multi_column", vocab, rnmt_enc, rnmt_dec, freeze_encoder=True,
                                    columns=[rnmt_enc, trans],
                                    dropout=DropoutSpec(0.1, 0.1, 0.0, 0.0)).validate(),
    }
