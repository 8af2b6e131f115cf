import re
import time

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from s2slab import nn
from s2slab import tensor as T
from s2slab.config import desk_presets, full_presets
from s2slab.counting import FLOP_CONVENTIONS, PARAM_CONVENTIONS, count_flops, count_macs_analytic, \
    count_params, report
from s2slab.data import make_batch
from s2slab.errors import ConfigInvalid
from s2slab.models import build_model, forward_loss
from s2slab.tensor import Tensor

# published totals and the tolerance each is held to
TABLE = {
    "transformer_base": (93.3e6, 0.05),
    "transformer_big": (375.4e6, 0.05),
    "rnmt_plus": (378.9e6, 0.05),
    "convs2s": (263.4e6, 0.10),
}


@pytest.mark.parametrize("name", sorted(TABLE))
def test_full_preset_params(name):
    expected, tol = TABLE[name]
    assert count_params(full_presets()[name]) == pytest.approx(expected, rel=tol)


def test_full_counts_are_fast():
    start = time.perf_counter()
    for cfg in full_presets().values():
        count_params(cfg)
        count_flops(cfg)
    assert time.perf_counter() - start < 1.0


def test_flop_ordering():
    flops = {k: count_flops(v, 50, 50) for k, v in full_presets().items()}
    assert flops["transformer_base"] < flops["convs2s"] < flops["rnmt_plus"] < flops["transformer_big"]


def test_linear_layer_hand_count():
    with nn.symbolic():
        layer = nn.Linear(3, 2, np.random.default_rng(0))
    assert layer.num_parameters() == 3 * 2 + 2


def test_matmul_flops_example():
    with T.count_macs() as counter:
        T.matmul(Tensor(np.zeros((50, 512))), Tensor(np.zeros((512, 512))))
    assert counter.flops == 26_214_400


def _desk_model(cfgs, name):
    pre = None
    if name == "cascaded":
        pre = build_model(cfgs["rnmt_plus"], rng=np.random.default_rng(0))
    elif name == "multi_column":
        pre = [build_model(cfgs["rnmt_plus"], rng=np.random.default_rng(0)),
               build_model(cfgs["trans_rnmt"], rng=np.random.default_rng(0))]
    return build_model(cfgs[name], pre, np.random.default_rng(0))


@pytest.mark.parametrize("name", sorted(desk_presets()))
def test_symbolic_count_matches_allocation(name):
    cfgs = desk_presets()
    model = _desk_model(cfgs, name)
    # frozen pre-trained weights are part of the model and are counted
    assert count_params(cfgs[name]) == sum(np.asarray(p.data).size for p in model.parameters())


@pytest.mark.parametrize("name", sorted(desk_presets()))
@pytest.mark.parametrize("src_len,tgt_len", [(7, 5), (3, 9)])
def test_analytic_macs_match_instrumented_forward(name, src_len, tgt_len):
    cfgs = desk_presets()
    model = _desk_model(cfgs, name)
    # the target row gains an eos, so a tgt_len-1 sentence decodes tgt_len positions
    batch = make_batch([([5] * src_len, [6] * (tgt_len - 1))])
    with T.count_macs() as counter:
        forward_loss(model, batch)
    assert counter.macs == count_macs_analytic(cfgs[name], src_len, tgt_len)


@settings(max_examples=30, deadline=None)
@given(st.sampled_from(sorted(full_presets())), st.integers(1, 200), st.integers(1, 200))
def test_flops_grow_with_length(name, src_len, tgt_len):
    cfg = full_presets()[name]
    base = count_flops(cfg, src_len, tgt_len)
    assert count_flops(cfg, src_len + 1, tgt_len) > base
    assert count_flops(cfg, src_len, tgt_len + 1) > base


def test_flops_reject_empty_lengths():
    with pytest.raises(ValueError):
        count_flops(full_presets()["transformer_base"], 0, 5)


def test_report_lists_models_and_conventions():
    text = report(full_presets())
    for name in full_presets():
        assert re.search(rf"^{name}\s+[\d,]+\s+\d+\.\dM\s+[\d,]+\s+\d+\.\d\dB$", text, re.M)
    for line in PARAM_CONVENTIONS + FLOP_CONVENTIONS:
        assert line in text
    assert "source length 50, target length 50" in text


def test_base_preset_rounds_to_published_total():
    assert round(count_params(full_presets()["transformer_base"]) / 1e6, 1) == 93.3


def test_invalid_config_rejected():
    import dataclasses
    cfg = dataclasses.replace(full_presets()["transformer_base"], vocab_size=0)
    with pytest.raises(ConfigInvalid):
        count_params(cfg)
