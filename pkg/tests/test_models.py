import dataclasses
import math

import numpy as np
import pytest

from s2slab import nn
from s2slab import tensor as T
from s2slab.config import ModelConfig, StackConfig, desk_presets
from s2slab.counting import count_params
from s2slab.data import Batch, make_batch
from s2slab.errors import (ColumnDimMismatch, ConfigInvalid, EmptyBatch, MissingPretrainedEncoder,
                           UnknownSelector)
from s2slab.models import (build_cascaded_encoder, build_hybrid, build_model, build_multi_column_encoder,
                           forward_loss)
from s2slab.optim import AdamState, adam_step, freeze, trainable, unfreeze
from s2slab.tensor import Tensor, backward

import helpers

FAMILIES = ["rnmt_plus", "transformer", "convs2s", "trans_rnmt", "rnmt_trans", "cascaded", "multi_column"]


@pytest.fixture(scope="module")
def models():
    return helpers.build_all()


@pytest.mark.parametrize("name", FAMILIES)
def test_forward_loss_is_positive_scalar(models, name):
    loss, tokens = forward_loss(models[name], helpers.toy_batch())
    assert loss.shape == () and loss.item() > 0
    assert tokens == int(helpers.toy_batch().target_lengths.sum())


@pytest.mark.parametrize("name", FAMILIES)
def test_untrained_loss_near_log_vocab(name):
    cfgs = helpers.tiny_configs(label_smoothing=0.0, loss_normalization="token")
    sources = helpers.build_all(label_smoothing=0.0, loss_normalization="token")
    loss, _ = forward_loss(sources[name], helpers.toy_batch(16))
    assert cfgs[name].label_smoothing == 0.0
    assert abs(loss.item() / math.log(helpers.VOCAB) - 1.0) <= 0.15


@pytest.mark.parametrize("name", FAMILIES)
def test_decoder_is_causal(models, name):
    model = models[name]
    batch = helpers.toy_batch(2)
    enc = model.encode(batch.source, batch.source_mask)
    base = batch.decoder_input
    logits = model.logits(enc, base).data
    rng = np.random.default_rng(1)
    for t in range(base.shape[1] - 1):
        changed = base.copy()
        changed[:, t + 1:] = rng.integers(4, helpers.VOCAB, size=changed[:, t + 1:].shape)
        np.testing.assert_array_equal(model.logits(enc, changed).data[:, : t + 1], logits[:, : t + 1])


@pytest.mark.parametrize("name", FAMILIES)
def test_step_decoding_matches_teacher_forcing(models, name):
    model = models[name]
    batch = helpers.toy_batch(3)
    with T.no_grad():
        enc = model.encode(batch.source, batch.source_mask)
        full = model.logits(enc, batch.decoder_input).data
        state = model.init_state(enc)
        for t in range(batch.decoder_input.shape[1]):
            out, state = model.step(state, batch.decoder_input[:, t])
            np.testing.assert_allclose(out.data, full[:, t], atol=1e-10)


def test_duplicate_sentences_keep_sentence_loss(models):
    model = models["rnmt_plus"]
    assert model.config.normalization == "sentence"
    pair = helpers.toy_batch(1).pairs
    single, _ = forward_loss(model, make_batch(pair))
    double, _ = forward_loss(model, make_batch(pair * 2))
    assert double.item() == pytest.approx(single.item(), rel=1e-12)


def test_padding_is_excluded_from_loss(models):
    model = models["transformer"]
    pairs = helpers.toy_batch(3).pairs
    together, _ = forward_loss(model, make_batch(pairs))
    per = [forward_loss(model, make_batch([p])) for p in pairs]
    expected = sum(l.item() * n for l, n in per) / sum(n for _, n in per)
    assert together.item() == pytest.approx(expected, rel=1e-10)


def test_empty_batch(models):
    empty = Batch(np.zeros((1, 1), int), np.zeros((1, 1), int), np.array([1]), np.array([0]), [])
    with pytest.raises(EmptyBatch):
        forward_loss(models["transformer"], empty)


# -- structure ------------------------------------------------------------------------


def test_feed_context_removes_exactly_context_times_vocab():
    for cfg in (helpers.tiny_configs()["rnmt_plus"], desk_presets()["rnmt_plus"]):
        off = dataclasses.replace(cfg, feed_context_to_softmax=False)
        on_model, off_model = build_model(cfg), build_model(off)
        d_ctx = on_model.decoder.d_context
        assert count_params(cfg) - count_params(off) == d_ctx * cfg.vocab_size
        assert on_model.decoder.softmax.w.shape[0] - off_model.decoder.softmax.w.shape[0] == d_ctx


@pytest.mark.parametrize("name", FAMILIES)
def test_symbolic_count_matches_allocation(models, name):
    assert count_params(models[name].config) == models[name].num_parameters()


@pytest.mark.parametrize("name", sorted(desk_presets()))
def test_desk_count_matches_allocation(name):
    cfg = desk_presets()[name]
    if name == "cascaded":
        model = build_model(cfg, build_model(desk_presets()["rnmt_plus"]))
    elif name == "multi_column":
        model = build_model(cfg, [build_model(desk_presets()["rnmt_plus"]), build_model(desk_presets()["trans_rnmt"])])
    else:
        model = build_model(cfg)
    assert count_params(cfg) == model.num_parameters()


def _zero(module):
    for p in module.parameters():
        p.data = np.zeros_like(p.data)


def test_rnmt_encoder_residual_policy():
    cfg = ModelConfig("rnmt_plus", helpers.VOCAB, helpers.rnmt(4), helpers.rnmt(2)).validate()
    batch = helpers.toy_batch(2)
    model = build_model(cfg)
    enc = model.encoder
    # zeroed layer 3 has a residual: it is transparent, same as removing it
    _zero(enc.layers[2])
    with_zeroed = model.encode(batch.source, batch.source_mask).features.data
    enc.layers = enc.layers[:2] + enc.layers[3:]
    np.testing.assert_allclose(with_zeroed, model.encode(batch.source, batch.source_mask).features.data,
                               atol=1e-14)
    # zeroed layer 2 has no residual: it cuts the source off entirely
    model = build_model(cfg)
    _zero(model.encoder.layers[1])
    other = batch.source.copy()
    other[batch.source_mask] = (other[batch.source_mask] - 3) % (helpers.VOCAB - 4) + 4
    a = model.encode(batch.source, batch.source_mask).features.data
    b = model.encode(other, batch.source_mask).features.data
    np.testing.assert_array_equal(a, b)


def test_rnmt_decoder_residual_policy():
    cfg = ModelConfig("rnmt_plus", helpers.VOCAB, helpers.rnmt(2), helpers.rnmt(4)).validate()
    batch = helpers.toy_batch(2)
    model = build_model(cfg)
    enc = model.encode(batch.source, batch.source_mask)
    _zero(model.decoder.layers[2])
    with_zeroed = model.logits(enc, batch.decoder_input).data
    model.decoder.layers = model.decoder.layers[:2] + model.decoder.layers[3:]
    np.testing.assert_allclose(with_zeroed, model.logits(enc, batch.decoder_input).data, atol=1e-14)

    # layer 2 has no residual: zeroing it makes layer 3 see [0; context] in place of [h1; context]
    model = build_model(cfg)
    enc = model.encode(batch.source, batch.source_mask)
    _zero(model.decoder.layers[1])
    zeroed = model.logits(enc, batch.decoder_input).data
    dec = model.decoder
    bottom = dec.embed(batch.decoder_input)
    h1 = nn.run_lstm(dec.layers[0], bottom)
    ctx, _ = dec.attention.attend(h1, dec._cache(enc))
    x = nn.run_lstm(dec.layers[2], T.concat([h1 * 0.0, ctx], axis=-1))
    x = nn.run_lstm(dec.layers[3], T.concat([x, ctx], axis=-1)) + x
    np.testing.assert_allclose(zeroed, dec.softmax(T.concat([x, ctx], axis=-1)).data, atol=1e-14)


def test_convs2s_hybrids_rejected():
    cfgs = helpers.tiny_configs()
    with pytest.raises(ConfigInvalid):
        build_hybrid("convs2s", "rnmt_plus", cfgs["rnmt_plus"])
    with pytest.raises(ConfigInvalid):
        ModelConfig("hybrid", helpers.VOCAB, helpers.conv(), helpers.rnmt()).validate()
    with pytest.raises(ConfigInvalid):
        build_hybrid("rnmt_plus", "transformer", cfgs["trans_rnmt"])


def test_hybrid_grad_check():
    cfg = ModelConfig("hybrid", 6, StackConfig("rnmt_plus", 1, 4, 2),
                      StackConfig("transformer", 1, 4, 2, d_ff=4), label_smoothing=0.1).validate()
    model = build_model(cfg, rng=np.random.default_rng(3))
    helpers.perturb(model, 4)
    batch = make_batch([([4, 5, 4], [5, 4]), ([5, 5], [4])])
    rel, absolute = helpers.model_grad_errors(lambda: forward_loss(model, batch)[0], model.parameters())
    assert rel <= 1e-4 and absolute <= 1e-9


def _conv_cfg(scale):
    cfg = helpers.tiny_configs()["convs2s"]
    return dataclasses.replace(cfg, encoder_grad_scale=scale).validate()


def test_conv_grad_scale_one_is_plain_gradient():
    batch = helpers.toy_batch(2)
    model = build_model(_conv_cfg(1.0))
    helpers.perturb(model, 5)
    params = [model.encoder.embed.table, model.encoder.layers[0].v, model.encoder.layers[0].g]
    rel, absolute = helpers.model_grad_errors(lambda: forward_loss(model, batch)[0], params)
    assert rel <= 1e-4 and absolute <= 1e-9


def test_conv_grad_scale_scales_encoder_gradients():
    batch = helpers.toy_batch(2)
    grads = {}
    for scale in (1.0, 0.25):
        model = build_model(_conv_cfg(scale))
        loss, _ = forward_loss(model, batch)
        backward(loss)
        grads[scale] = {n: p.grad.copy() for n, p in model.named_parameters()}
    for name, g in grads[1.0].items():
        if name.startswith("decoder."):
            np.testing.assert_array_equal(grads[0.25][name], g)
    emb = "encoder.embed.table"
    assert not np.allclose(grads[0.25][emb], grads[1.0][emb])


def test_default_conv_grad_scale():
    model = build_model(helpers.tiny_configs()["convs2s"])
    assert model.encoder.grad_scale == pytest.approx(1 / (2 * 2))


# -- cascaded and multi-column -------------------------------------------------------


def test_pretrained_required():
    cfgs = helpers.tiny_configs()
    with pytest.raises(MissingPretrainedEncoder):
        build_cascaded_encoder(cfgs["cascaded"])
    with pytest.raises(MissingPretrainedEncoder):
        build_multi_column_encoder(cfgs["multi_column"], [build_model(cfgs["rnmt_plus"])])
    with pytest.raises(MissingPretrainedEncoder):
        build_cascaded_encoder(cfgs["cascaded"], build_model(cfgs["transformer"]))


def test_pretrained_shape_mismatch():
    cfgs = helpers.tiny_configs()
    wider = dataclasses.replace(cfgs["rnmt_plus"], encoder=StackConfig("rnmt_plus", 2, 12, 2),
                                decoder=StackConfig("rnmt_plus", 2, 12, 2)).validate()
    with pytest.raises(ColumnDimMismatch):
        build_cascaded_encoder(cfgs["cascaded"], build_model(wider))


def test_cascaded_loads_and_freezes(models):
    source, model = models["rnmt_plus"], models["cascaded"]
    for name, p in model.encoder.base.named_parameters():
        np.testing.assert_array_equal(p.data, source.state_dict()["encoder." + name])
        assert not p.requires_grad
    assert not hasattr(model.encoder.stack, "positions") or model.encoder.stack.positions is None


def test_frozen_encoder_unchanged_after_training():
    models = helpers.build_all()
    model = models["cascaded"]
    frozen = {n: p.data.copy() for n, p in model.encoder.base.named_parameters()}
    decoder = {n: p.data.copy() for n, p in model.decoder.named_parameters()}
    state = AdamState()
    params = trainable(model)
    for step in range(100):
        loss, _ = forward_loss(model, helpers.toy_batch(4, seed=step))
        backward(loss)
        for p in model.encoder.base.parameters():
            assert p.grad is None
        grads = {n: p.grad for n, p in params.items() if p.grad is not None}
        adam_step(params, grads, state, 1e-3)
        model.zero_grad()
    for n, p in model.encoder.base.named_parameters():
        assert np.array_equal(p.data, frozen[n])
        assert "encoder.base." + n not in state.m
    assert any(not np.array_equal(p.data, decoder[n]) for n, p in model.decoder.named_parameters())


def test_freeze_unfreeze_and_selector():
    model = helpers.build_all()["rnmt_plus"]
    freeze(model, "encoder")
    assert all(not n.startswith("encoder.") for n in trainable(model))
    unfreeze(model, "encoder")
    assert len(trainable(model)) == len(list(model.named_parameters()))
    with pytest.raises(UnknownSelector):
        freeze(model, "no_such_module")


def test_multi_column_shapes_and_linearity(models):
    model = models["multi_column"]
    enc = model.encoder
    batch = helpers.toy_batch(2)
    cols = enc.column_outputs(batch.source, batch.source_mask)
    assert enc.merge.w.shape == (sum(c.shape[-1] for c in cols), model.config.decoder.d_model)
    out = model.encode(batch.source, batch.source_mask)
    assert out.features.shape[-1] == model.config.decoder.d_model
    # before the final norm the merge is affine: dropping column 2 subtracts its block of the map
    d1 = cols[0].shape[-1]
    full = enc.merge(T.concat(cols, axis=-1)).data
    dropped = enc.merge(T.concat([cols[0], cols[1] * 0.0], axis=-1)).data
    np.testing.assert_allclose(full - dropped, cols[1].data @ enc.merge.w.data[d1:], atol=1e-13)
    np.testing.assert_allclose(out.features.data, enc.merge_norm(Tensor(full)).data, atol=1e-14)


def test_multi_column_rnmt_column_is_normalized(models):
    enc = models["multi_column"].encoder
    batch = helpers.toy_batch(2)
    rnmt_col = enc.column_outputs(batch.source, batch.source_mask)[0].data
    np.testing.assert_allclose(rnmt_col.mean(-1), 0.0, atol=1e-12)
    assert enc.column_norms[1] is None


def test_share_embeddings_ties_tables():
    cfg = dataclasses.replace(helpers.tiny_configs()["transformer"], share_embeddings=True).validate()
    model = build_model(cfg)
    assert model.decoder.embed.table is model.encoder.embed.table
    assert count_params(cfg) == count_params(helpers.tiny_configs()["transformer"]) - helpers.VOCAB * helpers.D


# -- configs --------------------------------------------------------------------------


def test_config_round_trip():
    for cfg in list(helpers.tiny_configs().values()) + list(desk_presets().values()):
        assert ModelConfig.from_dict(cfg.to_dict()) == cfg


@pytest.mark.parametrize("change", [
    {"vocab_size": 3},
    {"residual_start_layer": 0},
    {"label_smoothing": 1.0},
    {"loss_normalization": "word"},
    {"unknown_key": 1},
    {"encoder": {"family": "transformer", "layers": 2, "d_model": 10, "heads": 4, "d_ff": 8}},
    {"family": "lstm"},
])
def test_invalid_configs_rejected(change):
    data = helpers.tiny_configs()["transformer"].to_dict()
    data.update(change)
    with pytest.raises(ConfigInvalid):
        ModelConfig.from_dict(data)
