"""Encoder/decoder stacks for RNMT+, Transformer and ConvS2S, plus the hybrids.

Every model is a :class:`Seq2Seq` with the same interface: ``encode`` a
source batch, teacher-forced ``logits`` for training, and ``init_state`` /
``step`` / ``reorder`` for incremental decoding.  Pure and hybrid models are
interchangeable wherever a model is expected.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from s2slab import nn
from s2slab import tensor as T
from s2slab.config import ModelConfig, StackConfig
from s2slab.data import Batch
from s2slab.errors import ColumnDimMismatch, ConfigInvalid, EmptyBatch, MissingPretrainedEncoder
from s2slab.nn import (
    BiLSTMLayer,
    ConvGLU,
    Embedding,
    FeedForward,
    LayerNorm,
    Linear,
    LSTMCell,
    Module,
    MultiHeadAdditiveAttention,
    MultiHeadDotAttention,
    dropout,
    run_lstm,
    sinusoidal_positions,
    transformer_sublayer,
)
from s2slab.optim import freeze, label_smoothed_ce
from s2slab.tensor import Tensor


@dataclass
class EncoderOutput:
    features: Tensor
    mask: np.ndarray
    values: Tensor | None = None
    columns: list[Tensor] | None = None

    def select(self, idx: np.ndarray) -> EncoderOutput:
        """Row-gather for beam expansion (inference only)."""
        values = None if self.values is None else Tensor(self.values.data[idx])
        return EncoderOutput(Tensor(self.features.data[idx]), self.mask[idx], values)


def _frozen(module: Module) -> bool:
    return not any(p.requires_grad for p in module.parameters())


# -- RNMT+ ------------------------------------------------------------------------


class RnmtEncoder(Module):
    """Stacked bidirectional LSTMs, residuals from ``residual_start`` on, final projection."""

    def __init__(self, stack: StackConfig, vocab: int, d_proj: int, cfg: ModelConfig, rng):
        d = stack.d_model
        self.d_out = d_proj
        self.residual_start = cfg.residual_start_layer
        self.drop = cfg.dropout
        self.embed = Embedding(vocab, d, rng)
        self.layers = [BiLSTMLayer(d if i == 0 else 2 * d, d, rng, cfg.layer_norm, cfg.raw_output_gate)
                       for i in range(stack.layers)]
        self.projection = Linear(2 * d, d_proj, rng)

    def __call__(self, src: np.ndarray, mask: np.ndarray, rng=None) -> EncoderOutput:
        x = dropout(self.embed(src), self.drop.input_p, rng)
        for depth, layer in enumerate(self.layers, start=1):
            y = dropout(layer(x, mask), self.drop.residual_p, rng)
            x = y + x if depth >= self.residual_start and y.shape == x.shape else y
        return EncoderOutput(self.projection(x), mask)


@dataclass
class RnmtState:
    cache: tuple
    h: list[Tensor]
    c: list[Tensor]


class RnmtDecoder(Module):
    """Unidirectional LSTM stack; the bottom layer drives multi-head additive attention.

    The step-t context is concatenated into the input of every layer above
    the bottom one and, when ``feed_context_to_softmax``, into the softmax
    input.
    """

    def __init__(self, stack: StackConfig, vocab: int, d_enc: int, cfg: ModelConfig, rng):
        d = stack.d_model
        if d_enc % stack.heads:
            raise ConfigInvalid(f"encoder width {d_enc} not divisible by {stack.heads} heads")
        self.d = d
        self.residual_start = cfg.residual_start_layer
        self.drop = cfg.dropout
        self.feed_context = cfg.feed_context_to_softmax
        self.embed = Embedding(vocab, d, rng)
        self.attention = MultiHeadAdditiveAttention(
            d, d_enc, d, stack.heads, rng, d_value=d_enc, d_out=d,
            output_projection=cfg.attention_output_projection)
        d_ctx = self.attention.d_out
        self.d_context = d_ctx
        self.layers = [LSTMCell(d if i == 0 else d + d_ctx, d, rng, cfg.layer_norm, cfg.raw_output_gate)
                       for i in range(stack.layers)]
        self.softmax = Linear(d + d_ctx if self.feed_context else d, vocab, rng)

    def _cache(self, enc: EncoderOutput):
        return self.attention.precompute(enc.features, enc.features, enc.mask)

    def logits(self, enc: EncoderOutput, tgt_in: np.ndarray, rng=None) -> Tensor:
        cache = self._cache(enc)
        x = dropout(self.embed(tgt_in), self.drop.input_p, rng)
        bottom = run_lstm(self.layers[0], x)
        ctx, _ = self.attention.attend(bottom, cache, rng, self.drop.attention_p)
        x = dropout(bottom, self.drop.residual_p, rng)
        for depth, layer in enumerate(self.layers[1:], start=2):
            y = dropout(run_lstm(layer, T.concat([x, ctx], axis=-1)), self.drop.residual_p, rng)
            x = y + x if depth >= self.residual_start else y
        return self.softmax(T.concat([x, ctx], axis=-1) if self.feed_context else x)

    def init_state(self, enc: EncoderOutput) -> RnmtState:
        B = enc.features.shape[0]
        zeros = [Tensor(np.zeros((B, self.d))) for _ in self.layers]
        return RnmtState(self._cache(enc), list(zeros), list(zeros))

    def step(self, state: RnmtState, tokens: np.ndarray) -> tuple[Tensor, RnmtState]:
        hs, cs = list(state.h), list(state.c)
        x = self.embed(tokens)
        hs[0], cs[0] = self.layers[0].step(x, hs[0], cs[0])
        ctx, _ = self.attention.attend(hs[0], state.cache)
        x = hs[0]
        for i, layer in enumerate(self.layers[1:], start=1):
            hs[i], cs[i] = layer.step(T.concat([x, ctx], axis=-1), hs[i], cs[i])
            x = hs[i] + x if i + 1 >= self.residual_start else hs[i]
        out = self.softmax(T.concat([x, ctx], axis=-1) if self.feed_context else x)
        return out, RnmtState(state.cache, hs, cs)

    def reorder(self, state: RnmtState, idx: np.ndarray) -> RnmtState:
        kp, vh, bias = state.cache
        cache = (Tensor(kp.data[idx]), Tensor(vh.data[idx]), bias[idx])
        return RnmtState(cache, [Tensor(h.data[idx]) for h in state.h], [Tensor(c.data[idx]) for c in state.c])


# -- Transformer ------------------------------------------------------------------


class TransformerEncoderLayer(Module):
    def __init__(self, d: int, heads: int, d_ff: int, rng, layer_norm: bool = True):
        self.self_norm = LayerNorm(d, enabled=layer_norm)
        self.self_attn = MultiHeadDotAttention(d, heads, rng)
        self.ff_norm = LayerNorm(d, enabled=layer_norm)
        self.ff = FeedForward(d, d_ff, rng)

    def __call__(self, x: Tensor, mask: np.ndarray, drop: nn.DropoutSpec, rng=None) -> Tensor:
        x = transformer_sublayer(
            x, lambda y: self.self_attn(y, y, y, mask, rng=rng, dropout_p=drop.attention_p)[0],
            self.self_norm, drop.residual_p, rng)
        return transformer_sublayer(x, lambda y: self.ff(y, rng, drop.relu_p), self.ff_norm,
                                    drop.residual_p, rng)


def _embed_scaled(embed: Embedding, ids: np.ndarray, d: int, positional: bool) -> Tensor:
    x = embed(ids) * math.sqrt(d)
    if positional:
        x = x + sinusoidal_positions(ids.shape[1], d)[None]
    return x


class TransformerEncoder(Module):
    """Pre-norm self-attention stack with a final layer norm.

    With ``embed=False`` the stack consumes features instead of token ids
    (cascaded encoder); ``positional=False`` drops the sinusoids.
    """

    def __init__(self, stack: StackConfig, vocab: int, cfg: ModelConfig, rng, embed: bool = True,
                 positional: bool = True):
        d = stack.d_model
        self.d_out = d
        self.drop = cfg.dropout
        self.positional = positional
        self.embed = Embedding(vocab, d, rng, scale=d ** -0.5) if embed else None
        self.layers = [TransformerEncoderLayer(d, stack.heads, stack.d_ff, rng, cfg.layer_norm)
                       for _ in range(stack.layers)]
        self.final_norm = LayerNorm(d, enabled=cfg.layer_norm)

    def run(self, x: Tensor, mask: np.ndarray, rng=None) -> Tensor:
        for layer in self.layers:
            x = layer(x, mask, self.drop, rng)
        return self.final_norm(x)

    def __call__(self, src: np.ndarray, mask: np.ndarray, rng=None) -> EncoderOutput:
        x = _embed_scaled(self.embed, src, self.d_out, self.positional)
        x = dropout(x, self.drop.input_p, rng)
        return EncoderOutput(self.run(x, mask, rng), mask)


class TransformerDecoderLayer(Module):
    def __init__(self, d: int, heads: int, d_ff: int, d_enc: int, rng, layer_norm: bool = True):
        self.self_norm = LayerNorm(d, enabled=layer_norm)
        self.self_attn = MultiHeadDotAttention(d, heads, rng)
        self.cross_norm = LayerNorm(d, enabled=layer_norm)
        self.cross_attn = MultiHeadDotAttention(d, heads, rng, d_key=d_enc)
        self.ff_norm = LayerNorm(d, enabled=layer_norm)
        self.ff = FeedForward(d, d_ff, rng)

    def __call__(self, x: Tensor, enc: EncoderOutput, drop: nn.DropoutSpec, rng=None) -> Tensor:
        p_att, p_res = drop.attention_p, drop.residual_p
        x = transformer_sublayer(
            x, lambda y: self.self_attn(y, y, y, None, causal=True, rng=rng, dropout_p=p_att)[0],
            self.self_norm, p_res, rng)
        x = transformer_sublayer(
            x, lambda y: self.cross_attn(y, enc.features, enc.features, enc.mask, rng=rng, dropout_p=p_att)[0],
            self.cross_norm, p_res, rng)
        return transformer_sublayer(x, lambda y: self.ff(y, rng, drop.relu_p), self.ff_norm, p_res, rng)


@dataclass
class PrefixState:
    enc: EncoderOutput
    prefix: np.ndarray


class _PrefixDecoding:
    """Incremental decoding by re-running the teacher-forced path on the prefix."""

    def init_state(self, enc: EncoderOutput) -> PrefixState:
        return PrefixState(enc, np.zeros((enc.features.shape[0], 0), dtype=np.int64))

    def step(self, state: PrefixState, tokens: np.ndarray) -> tuple[Tensor, PrefixState]:
        prefix = np.concatenate([state.prefix, np.asarray(tokens, dtype=np.int64)[:, None]], axis=1)
        out = self.logits(state.enc, prefix)
        return out[:, -1], PrefixState(state.enc, prefix)

    def reorder(self, state: PrefixState, idx: np.ndarray) -> PrefixState:
        return PrefixState(state.enc.select(idx), state.prefix[idx])


class TransformerDecoder(_PrefixDecoding, Module):
    def __init__(self, stack: StackConfig, vocab: int, d_enc: int, cfg: ModelConfig, rng):
        d = stack.d_model
        self.d = d
        self.drop = cfg.dropout
        self.positional = cfg.positional_mode != "none"
        self.embed = Embedding(vocab, d, rng, scale=d ** -0.5)
        self.layers = [TransformerDecoderLayer(d, stack.heads, stack.d_ff, d_enc, rng, cfg.layer_norm)
                       for _ in range(stack.layers)]
        self.final_norm = LayerNorm(d, enabled=cfg.layer_norm)
        self.softmax = Linear(d, vocab, rng, init="glorot")

    def logits(self, enc: EncoderOutput, tgt_in: np.ndarray, rng=None) -> Tensor:
        x = dropout(_embed_scaled(self.embed, tgt_in, self.d, self.positional), self.drop.input_p, rng)
        for layer in self.layers:
            x = layer(x, enc, self.drop, rng)
        return self.softmax(self.final_norm(x))


# -- ConvS2S ----------------------------------------------------------------------

_SQRT_HALF = math.sqrt(0.5)


class ConvEncoder(Module):
    def __init__(self, stack: StackConfig, vocab: int, cfg: ModelConfig, rng, grad_scale: float):
        d, chans = stack.d_model, stack.channels
        self.d_out = d
        self.drop = cfg.dropout
        self.grad_scale = grad_scale
        self.embed = Embedding(vocab, d, rng, scale=0.1)
        self.positions = nn.uniform(rng, (cfg.max_positions, d), 0.1)
        self.fc_in = Linear(d, chans[0], rng)
        self.layers = [ConvGLU(chans[i - 1] if i else chans[0], chans[i], stack.kernels[i], rng)
                       for i in range(stack.layers)]
        self.fc_out = Linear(chans[-1], d, rng)

    def __call__(self, src: np.ndarray, mask: np.ndarray, rng=None) -> EncoderOutput:
        emb = self.embed(src) + nn.learned_positions(src.shape[1], self.d_out, self.positions)
        x = self.fc_in(dropout(emb, self.drop.input_p, rng))
        for layer in self.layers:
            res = layer.shortcut(x)
            x = (layer(dropout(x, self.drop.residual_p, rng), mask) + res) * _SQRT_HALF
        keys = self.fc_out(x)
        values = (keys + emb) * _SQRT_HALF
        return EncoderOutput(T.scale_grad(keys, self.grad_scale), mask, T.scale_grad(values, self.grad_scale))


class ConvDecoder(_PrefixDecoding, Module):
    """Causal conv stack; every layer runs its own dot-product attention over the encoder."""

    def __init__(self, stack: StackConfig, vocab: int, cfg: ModelConfig, rng):
        d, chans = stack.d_model, stack.channels
        d_out = stack.d_out_embed or d
        self.d = d
        self.drop = cfg.dropout
        self.embed = Embedding(vocab, d, rng, scale=0.1)
        self.positions = nn.uniform(rng, (cfg.max_positions, d), 0.1)
        self.fc_in = Linear(d, chans[0], rng)
        self.layers = [ConvGLU(chans[i - 1] if i else chans[0], chans[i], stack.kernels[i], rng, causal=True)
                       for i in range(stack.layers)]
        self.attn_in = [Linear(c, d, rng) for c in chans]
        self.attn_out = [Linear(d, c, rng) for c in chans]
        self.fc_out = Linear(chans[-1], d_out, rng)
        self.softmax = Linear(d_out, vocab, rng)

    def logits(self, enc: EncoderOutput, tgt_in: np.ndarray, rng=None) -> Tensor:
        emb = self.embed(tgt_in) + nn.learned_positions(tgt_in.shape[1], self.d, self.positions)
        x = self.fc_in(dropout(emb, self.drop.input_p, rng))
        bias = nn._mask_bias(enc.mask)[:, None, :]
        src_len = enc.mask.sum(axis=1).astype(np.float64)
        keys_t = T.swapaxes(enc.features, 1, 2)
        for layer, a_in, a_out in zip(self.layers, self.attn_in, self.attn_out):
            res = layer.shortcut(x)
            y = layer(dropout(x, self.drop.residual_p, rng))
            query = (a_in(y) + emb) * _SQRT_HALF
            weights = T.softmax(query @ keys_t + bias, axis=-1)
            ctx = (dropout(weights, self.drop.attention_p, rng) @ enc.values) * np.sqrt(src_len)[:, None, None]
            y = (y + a_out(ctx)) * _SQRT_HALF
            x = (y + res) * _SQRT_HALF
        return self.softmax(dropout(self.fc_out(x), self.drop.input_p, rng))


# -- hybrid encoders ----------------------------------------------------------------


class CascadedEncoder(Module):
    """Pre-trained RNMT+ encoder -> layer norm -> Transformer layers without positions."""

    def __init__(self, cfg: ModelConfig, rng):
        self.base = RnmtEncoder(cfg.encoder, cfg.vocab_size, cfg.cascade.d_model, cfg, rng)
        self.norm = LayerNorm(cfg.cascade.d_model, enabled=cfg.layer_norm)
        self.stack = TransformerEncoder(cfg.cascade, cfg.vocab_size, cfg, rng, embed=False, positional=False)
        self.d_out = cfg.cascade.d_model

    def __call__(self, src: np.ndarray, mask: np.ndarray, rng=None) -> EncoderOutput:
        base = self.base(src, mask, None if _frozen(self.base) else rng)
        return EncoderOutput(self.stack.run(self.norm(base.features), mask, rng), mask)


class MultiColumnEncoder(Module):
    """Columns -> LN on RNMT+ columns -> concat -> affine -> layer norm."""

    def __init__(self, cfg: ModelConfig, rng):
        d_dec = cfg.decoder.d_model
        self.columns = []
        self.column_norms = []
        for col in cfg.columns:
            if col.family == "rnmt_plus":
                self.columns.append(RnmtEncoder(col, cfg.vocab_size, d_dec, cfg, rng))
                self.column_norms.append(LayerNorm(d_dec, enabled=cfg.layer_norm))
            else:
                self.columns.append(TransformerEncoder(col, cfg.vocab_size, cfg, rng))
                self.column_norms.append(None)
        self.d_concat = sum(c.d_out for c in self.columns)
        self.merge = Linear(self.d_concat, d_dec, rng)
        self.merge_norm = LayerNorm(d_dec, enabled=cfg.layer_norm)
        self.d_out = d_dec

    def column_outputs(self, src: np.ndarray, mask: np.ndarray, rng=None) -> list[Tensor]:
        outs = []
        for col, norm in zip(self.columns, self.column_norms):
            feats = col(src, mask, None if _frozen(col) else rng).features
            outs.append(norm(feats) if norm is not None else feats)
        return outs

    def __call__(self, src: np.ndarray, mask: np.ndarray, rng=None) -> EncoderOutput:
        cols = self.column_outputs(src, mask, rng)
        merged = self.merge_norm(self.merge(T.concat(cols, axis=-1)))
        return EncoderOutput(merged, mask, columns=cols)


# -- the model ------------------------------------------------------------------------


class Seq2Seq(Module):
    def __init__(self, config: ModelConfig, encoder: Module, decoder: Module):
        self.config = config
        self.encoder = encoder
        self.decoder = decoder
        if config.share_embeddings:
            src = getattr(encoder, "embed", None)
            if src is None or src.table.shape != decoder.embed.table.shape:
                raise ConfigInvalid("share_embeddings needs equal-width source and target embeddings")
            decoder.embed = src

    def encode(self, src: np.ndarray, mask: np.ndarray, rng=None) -> EncoderOutput:
        return self.encoder(np.asarray(src), np.asarray(mask, dtype=bool), rng)

    def logits(self, enc: EncoderOutput, tgt_in: np.ndarray, rng=None) -> Tensor:
        return self.decoder.logits(enc, np.asarray(tgt_in), rng)

    def init_state(self, enc: EncoderOutput):
        return self.decoder.init_state(enc)

    def step(self, state, tokens: np.ndarray):
        return self.decoder.step(state, np.asarray(tokens))

    def reorder(self, state, idx: np.ndarray):
        return self.decoder.reorder(state, np.asarray(idx))

    def state_dict(self) -> dict[str, np.ndarray]:
        return {n: p.data for n, p in self.named_parameters()}


def _rng(cfg: ModelConfig, rng):
    return np.random.default_rng(cfg.init_seed) if rng is None else rng


def _decoder(cfg: ModelConfig, d_enc: int, rng) -> Module:
    if cfg.decoder.family == "rnmt_plus":
        return RnmtDecoder(cfg.decoder, cfg.vocab_size, d_enc, cfg, rng)
    if cfg.decoder.family == "transformer":
        return TransformerDecoder(cfg.decoder, cfg.vocab_size, d_enc, cfg, rng)
    return ConvDecoder(cfg.decoder, cfg.vocab_size, cfg, rng)


def _encoder(stack: StackConfig, cfg: ModelConfig, d_dec: int, rng) -> Module:
    if stack.family == "rnmt_plus":
        return RnmtEncoder(stack, cfg.vocab_size, d_dec, cfg, rng)
    return TransformerEncoder(stack, cfg.vocab_size, cfg, rng, positional=cfg.positional_mode != "none")


def build_rnmt_plus(config: ModelConfig, rng=None) -> Seq2Seq:
    config.validate()
    if config.family != "rnmt_plus":
        raise ConfigInvalid(f"build_rnmt_plus got family {config.family!r}")
    rng = _rng(config, rng)
    enc = RnmtEncoder(config.encoder, config.vocab_size, config.decoder.d_model, config, rng)
    return Seq2Seq(config, enc, RnmtDecoder(config.decoder, config.vocab_size, enc.d_out, config, rng))


def build_transformer(config: ModelConfig, rng=None) -> Seq2Seq:
    config.validate()
    if config.family != "transformer":
        raise ConfigInvalid(f"build_transformer got family {config.family!r}")
    rng = _rng(config, rng)
    enc = _encoder(config.encoder, config, config.decoder.d_model, rng)
    return Seq2Seq(config, enc, TransformerDecoder(config.decoder, config.vocab_size, enc.d_out, config, rng))


def build_convs2s_mini(config: ModelConfig, rng=None) -> Seq2Seq:
    config.validate()
    if config.family != "convs2s":
        raise ConfigInvalid(f"build_convs2s_mini got family {config.family!r}")
    if config.encoder.d_model != config.decoder.d_model:
        raise ConfigInvalid("ConvS2S encoder and decoder embedding widths must match")
    rng = _rng(config, rng)
    scale = config.encoder_grad_scale
    if scale is None:
        scale = 1.0 / (2.0 * config.decoder.layers)
    enc = ConvEncoder(config.encoder, config.vocab_size, config, rng, scale)
    return Seq2Seq(config, enc, ConvDecoder(config.decoder, config.vocab_size, config, rng))


def build_hybrid(encoder_family: str, decoder_family: str, config: ModelConfig, rng=None) -> Seq2Seq:
    if "convs2s" in (encoder_family, decoder_family):
        raise ConfigInvalid("ConvS2S hybrids are not supported")
    if config.encoder.family != encoder_family or config.decoder.family != decoder_family:
        raise ConfigInvalid(f"config stacks ({config.encoder.family}, {config.decoder.family}) do not "
                            f"match requested ({encoder_family}, {decoder_family})")
    config.validate()
    rng = _rng(config, rng)
    enc = _encoder(config.encoder, config, config.decoder.d_model, rng)
    return Seq2Seq(config, enc, _decoder(config, enc.d_out, rng))


def load_pretrained(module: Module, state: dict[str, np.ndarray], prefix: str) -> None:
    """Copy ``state[prefix + name]`` into each parameter of ``module``."""
    for name, p in module.named_parameters():
        key = prefix + name
        if key not in state:
            raise MissingPretrainedEncoder(f"pre-trained state lacks {key}")
        src = np.asarray(state[key], dtype=np.float64)
        if src.shape != p.shape:
            raise ColumnDimMismatch(f"{key}: pre-trained shape {src.shape} != {p.shape}")
        p.data = src.copy()


def _state_of(source) -> dict[str, np.ndarray]:
    if source is None:
        raise MissingPretrainedEncoder("a pre-trained encoder is required")
    return source.state_dict() if isinstance(source, Seq2Seq) else dict(source)


def build_cascaded_encoder(config: ModelConfig, pretrained=None, rng=None) -> Seq2Seq:
    """``pretrained`` is an RNMT+ model (or its state dict) whose encoder is reused."""
    config.validate()
    if config.family != "cascaded":
        raise ConfigInvalid(f"build_cascaded_encoder got family {config.family!r}")
    rng = _rng(config, rng)
    enc = CascadedEncoder(config, rng)
    if not nn.is_symbolic():
        load_pretrained(enc.base, _state_of(pretrained), "encoder.")
    model = Seq2Seq(config, enc, RnmtDecoder(config.decoder, config.vocab_size, enc.d_out, config, rng))
    if config.freeze_encoder:
        freeze(model, "encoder.base")
    return model


def build_multi_column_encoder(config: ModelConfig, pretrained=None, rng=None) -> Seq2Seq:
    """``pretrained`` lists one source model (or state dict) per column; the encoder of each is reused."""
    config.validate()
    if config.family != "multi_column":
        raise ConfigInvalid(f"build_multi_column_encoder got family {config.family!r}")
    rng = _rng(config, rng)
    enc = MultiColumnEncoder(config, rng)
    if not nn.is_symbolic():
        if pretrained is None or len(pretrained) != len(enc.columns):
            raise MissingPretrainedEncoder(f"need {len(enc.columns)} pre-trained column sources")
        for col, source in zip(enc.columns, pretrained):
            load_pretrained(col, _state_of(source), "encoder.")
    model = Seq2Seq(config, enc, RnmtDecoder(config.decoder, config.vocab_size, enc.d_out, config, rng))
    if config.freeze_encoder:
        freeze(model, "encoder.columns")
    return model


def build_model(config: ModelConfig, pretrained=None, rng=None) -> Seq2Seq:
    family = config.family
    if family == "rnmt_plus":
        return build_rnmt_plus(config, rng)
    if family == "transformer":
        return build_transformer(config, rng)
    if family == "convs2s":
        return build_convs2s_mini(config, rng)
    if family == "hybrid":
        return build_hybrid(config.encoder.family, config.decoder.family, config, rng)
    if family == "cascaded":
        return build_cascaded_encoder(config, pretrained, rng)
    if family == "multi_column":
        return build_multi_column_encoder(config, pretrained, rng)
    raise ConfigInvalid(f"unknown model family {family!r}")


# -- loss ----------------------------------------------------------------------------


def forward_loss(model: Seq2Seq, batch: Batch, rng=None) -> tuple[Tensor, int]:
    """Teacher-forced label-smoothed cross-entropy over non-pad target positions.

    Normalized per sentence (mean of per-sentence sums) or per token,
    following ``model.config.normalization``.  Returns ``(loss, token_count)``.
    """
    cfg = model.config
    if batch.num_tokens == 0 or not batch.target_mask.any():
        raise EmptyBatch("batch has no target tokens")
    enc = model.encode(batch.source, batch.source_mask, rng)
    logits = model.logits(enc, batch.decoder_input, rng)
    per_token = label_smoothed_ce(logits, batch.target, cfg.label_smoothing, cfg.vocab_size)
    total = (per_token * batch.target_mask.astype(np.float64)).sum()
    denom = batch.num_sentences if cfg.normalization == "sentence" else batch.num_tokens
    return total * (1.0 / denom), batch.num_tokens


def loss_weight_count(model: Seq2Seq, batch: Batch) -> int:
    """Count the loss is normalized by (sentences or tokens)."""
    return batch.num_sentences if model.config.normalization == "sentence" else batch.num_tokens


def with_ablation(config: ModelConfig, **changes) -> ModelConfig:
    return replace(config, **changes).validate()
