import struct

import numpy as np
import pytest

from moetrim.checkpoint import checkpoint_bytes, load_checkpoint, parse_checkpoint, save_checkpoint
from moetrim.cost import cost_report
from moetrim.engine import iter_tensors, model_forward
from moetrim.errors import ChecksumError, CheckpointError, MagicError, TruncatedError, VersionError
from moetrim.slimming import SlimRecipe, slim_model
from moetrim.trimming import DropPlan, apply_plan


def variants(toy_model, shared_model, toy_traces):
    yield "plain", toy_model
    yield "shared", shared_model
    yield "strict-experts", apply_plan(toy_model, DropPlan("expert", {0: (1, 4), 3: (7,)}), "strict")
    yield "blocks", apply_plan(toy_model, DropPlan("block", removed=(0, 7)))
    yield "layers", apply_plan(toy_model, DropPlan("layer", removed=(2,)))
    yield "rtn", slim_model(toy_model, SlimRecipe("rtn", bits=3, group_size=24, include_attention=True))
    yield "awq", slim_model(toy_model, SlimRecipe("awq", bits=4, group_size=32, grid=4), toy_traces)
    yield "nm", slim_model(toy_model, SlimRecipe("magnitude", n=2, m=4))


def test_roundtrip_byte_identical_and_same_logits(tmp_path, toy_model, shared_model, toy_traces, calib):
    for name, model in variants(toy_model, shared_model, toy_traces):
        p1, p2 = tmp_path / f"{name}.moem", tmp_path / f"{name}.2.moem"
        save_checkpoint(model, p1)
        loaded = load_checkpoint(p1)
        save_checkpoint(loaded, p2)
        assert p1.read_bytes() == p2.read_bytes(), name
        assert loaded.config == model.config, name
        for (n, a, *_), (_, b, *_) in zip(iter_tensors(model), iter_tensors(loaded)):
            assert np.array_equal(a, b), (name, n)
        tokens = calib.samples[0]
        assert np.array_equal(model_forward(model, tokens)[0], model_forward(loaded, tokens)[0]), name
        assert cost_report(loaded.config).to_dict() == cost_report(model.config).to_dict()


def test_quant_metadata_survives(tmp_path, toy_model, toy_traces):
    m = slim_model(toy_model, SlimRecipe("awq", bits=4, group_size=32, grid=4), toy_traces)
    save_checkpoint(m, tmp_path / "a.moem")
    header, tensors = parse_checkpoint((tmp_path / "a.moem").read_bytes())
    assert header["quant"]["blocks.0.ffn.experts.0.w_gate"] == {"bits": 4, "group_size": 32}
    assert tensors["blocks.0.ffn.experts.0.w_gate.codes"].dtype == np.uint8
    assert tensors["blocks.0.ffn.experts.0.w_gate.scales"].dtype == np.float16
    back = load_checkpoint(tmp_path / "a.moem")
    qa = m.blocks[2].ffn.experts[5].quant["w_down"]
    qb = back.blocks[2].ffn.experts[5].quant["w_down"]
    assert np.array_equal(qa.codes, qb.codes) and np.array_equal(qa.scales, qb.scales)
    assert (qa.channel_scale is None) == (qb.channel_scale is None)


def test_load_errors(toy_model):
    data = checkpoint_bytes(toy_model)
    for cut in (0, 3, 7, 11, 200, len(data) // 2, len(data) - 1):
        with pytest.raises(TruncatedError):
            parse_checkpoint(data[:cut])
    with pytest.raises(MagicError):
        parse_checkpoint(b"GGUF1" + data[5:])
    with pytest.raises(VersionError):
        parse_checkpoint(data[:5] + struct.pack("<H", 2) + data[7:])
    flipped = bytearray(data)
    flipped[len(data) // 2] ^= 0xFF
    with pytest.raises(ChecksumError):
        parse_checkpoint(bytes(flipped))
    with pytest.raises(CheckpointError):
        parse_checkpoint(data + b"\0")


def test_truncated_file_leaves_no_model(tmp_path, toy_model):
    p = tmp_path / "m.moem"
    save_checkpoint(toy_model, p)
    p.write_bytes(p.read_bytes()[:-10])
    with pytest.raises(TruncatedError):
        load_checkpoint(p)


def test_errors_are_distinct_kinds():
    kinds = {e.kind for e in (MagicError, VersionError, TruncatedError, ChecksumError)}
    assert len(kinds) == 4
