"""Parameter and FLOP accounting for model configs.

Parameters are counted by building the model symbolically (no weight
memory), so the count always matches what a real build allocates.  FLOPs
are an analytic tally of one teacher-forced forward pass.
"""

from __future__ import annotations

from s2slab import nn
from s2slab.config import ModelConfig, StackConfig
from s2slab.models import build_model

PARAM_CONVENTIONS = (
    "separate source embedding, target embedding and softmax matrices (no tying)",
    "biases, layer-norm gains/biases and weight-norm scales counted",
    "learned position tables (ConvS2S) counted at max_positions rows",
)

FLOP_CONVENTIONS = (
    "2 FLOPs per multiply-accumulate",
    "counted: dense projections, LSTM gate matmuls, convolutions, attention scores and contexts, softmax layer",
    "ignored: embedding lookups, nonlinearities, softmax normalization, layer norm, residual adds",
    "one teacher-forced forward pass over the source and target lengths given",
)


def count_params(config: ModelConfig) -> int:
    config.validate()
    with nn.symbolic():
        return build_model(config).num_parameters()


# -- per-stack multiply-accumulate tallies --------------------------------------


def _lstm(steps: int, d_in: int, d: int) -> int:
    return steps * (d_in * 4 * d + d * 4 * d)


def _rnmt_encoder(stack: StackConfig, S: int, d_proj: int) -> int:
    d = stack.d_model
    macs = 0
    for i in range(stack.layers):
        macs += 2 * _lstm(S, d if i == 0 else 2 * d, d)
    return macs + S * 2 * d * d_proj


def _rnmt_decoder(cfg: ModelConfig, S: int, Tt: int, d_enc: int) -> int:
    stack = cfg.decoder
    d = stack.d_model
    d_ctx = d if cfg.attention_output_projection else d_enc
    attn = S * d_enc * d + Tt * d * d + Tt * S * d + Tt * S * d_enc
    if cfg.attention_output_projection:
        attn += Tt * d_enc * d
    lstm = _lstm(Tt, d, d) + (stack.layers - 1) * _lstm(Tt, d + d_ctx, d)
    out = Tt * (d + d_ctx if cfg.feed_context_to_softmax else d) * cfg.vocab_size
    return attn + lstm + out


def _transformer_encoder(stack: StackConfig, S: int) -> int:
    d, ff = stack.d_model, stack.d_ff
    return stack.layers * (4 * S * d * d + 2 * S * S * d + 2 * S * d * ff)


def _transformer_decoder(cfg: ModelConfig, S: int, Tt: int, d_enc: int) -> int:
    stack = cfg.decoder
    d, ff = stack.d_model, stack.d_ff
    self_attn = 4 * Tt * d * d + 2 * Tt * Tt * d
    cross = 2 * Tt * d * d + 2 * S * d_enc * d + 2 * Tt * S * d
    return stack.layers * (self_attn + cross + 2 * Tt * d * ff) + Tt * d * cfg.vocab_size


def _conv_layers(stack: StackConfig, steps: int) -> int:
    chans, macs = stack.channels, steps * stack.d_model * stack.channels[0]
    for i, (c_out, k) in enumerate(zip(chans, stack.kernels)):
        c_in = chans[i - 1] if i else chans[0]
        macs += steps * k * c_in * 2 * c_out
        if c_in != c_out:
            macs += steps * c_in * c_out
    return macs


def _convs2s(cfg: ModelConfig, S: int, Tt: int) -> int:
    enc, dec = cfg.encoder, cfg.decoder
    d, d_out = dec.d_model, dec.d_out_embed or dec.d_model
    macs = _conv_layers(enc, S) + S * enc.channels[-1] * enc.d_model
    macs += _conv_layers(dec, Tt)
    for c in dec.channels:
        macs += Tt * c * d + 2 * Tt * S * d + Tt * d * c
    return macs + Tt * dec.channels[-1] * d_out + Tt * d_out * cfg.vocab_size


def _encoder_macs(stack: StackConfig, cfg: ModelConfig, S: int) -> tuple[int, int]:
    """(MACs, output width) of a plain encoder stack."""
    if stack.family == "rnmt_plus":
        return _rnmt_encoder(stack, S, cfg.decoder.d_model), cfg.decoder.d_model
    return _transformer_encoder(stack, S), stack.d_model


def count_macs_analytic(config: ModelConfig, src_len: int = 50, tgt_len: int = 50) -> int:
    config.validate()
    S, Tt = src_len, tgt_len
    if config.family == "convs2s":
        return _convs2s(config, S, Tt)
    if config.family == "cascaded":
        enc = _rnmt_encoder(config.encoder, S, config.cascade.d_model)
        enc += _transformer_encoder(config.cascade, S)
        d_enc = config.cascade.d_model
    elif config.family == "multi_column":
        enc, widths = 0, 0
        for col in config.columns:
            m, w = _encoder_macs(col, config, S)
            enc, widths = enc + m, widths + w
        d_enc = config.decoder.d_model
        enc += S * widths * d_enc
    else:
        enc, d_enc = _encoder_macs(config.encoder, config, S)
    if config.decoder.family == "rnmt_plus":
        return enc + _rnmt_decoder(config, S, Tt, d_enc)
    return enc + _transformer_decoder(config, S, Tt, d_enc)


def count_flops(config: ModelConfig, src_len: int = 50, tgt_len: int = 50) -> int:
    if src_len < 1 or tgt_len < 1:
        raise ValueError("sequence lengths must be positive")
    return 2 * count_macs_analytic(config, src_len, tgt_len)


def report(configs: dict[str, ModelConfig], src_len: int = 50, tgt_len: int = 50) -> str:
    """Table of parameter and FLOP counts followed by the counting conventions."""
    lines = [f"{'model':<20} {'params':>14} {'':>9} {'FLOPs':>18}"]
    for name, cfg in configs.items():
        params = count_params(cfg)
        flops = count_flops(cfg, src_len, tgt_len)
        lines.append(f"{name:<20} {params:>14,} {params / 1e6:>8.1f}M {flops:>18,} {flops / 1e9:>8.2f}B")
    lines.append("")
    lines.append("parameter conventions:")
    lines += [f"  - {c}" for c in PARAM_CONVENTIONS]
    lines.append(f"FLOP conventions (source length {src_len}, target length {tgt_len}):")
    lines += [f"  - {c}" for c in FLOP_CONVENTIONS]
    return "\n".join(lines)
