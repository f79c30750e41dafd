import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from moetrim.analysis import collect_traces
from moetrim.engine import Attention, Expert, MoELayer, model_forward
from moetrim.errors import ArgumentError
from moetrim.pipeline import fidelity_eval
from moetrim.slimming import (
    MethodNotImplemented, SlimRecipe, awq_candidate, awq_scale_search, collect_targets, prune, quantize_rtn,
    slim_model,
)
from oracles import brute_mask, grid_weights, per_element_oracle


def test_prune_hand_cases():
    w = np.array([[1, -5, 2, 0.1]], np.float32)
    assert np.flatnonzero(prune(w, n=2, m=4).mask[0]).tolist() == [1, 2]
    assert prune(w, sparsity=0.0).mask.all()
    with pytest.raises(ArgumentError):
        prune(w, sparsity=1.0)
    with pytest.raises(ArgumentError):
        prune(w, n=2, m=3)
    with pytest.raises(ArgumentError):
        prune(w, metric="wanda")


def test_wanda_and_magnitude_brute_force(rng):
    for trial in range(150):
        w = rng.standard_normal((8, 8)).astype(np.float32)
        norms = rng.random(8) + 0.01
        p = [0.25, 0.5, 0.75][trial % 3]
        n_zero = int(np.floor(p * 8))
        got = prune(w, "wanda", p, act_norms=norms)
        assert np.array_equal(got.mask, brute_mask(np.abs(w.astype(np.float64)) * norms, n_zero))
        got = prune(w, "magnitude", p)
        assert np.array_equal(got.mask, brute_mask(np.abs(w.astype(np.float64)), n_zero))


def test_nm_exact_counts(rng):
    for _ in range(100):
        m = int(rng.choice([4, 8]))
        n = int(rng.integers(0, m + 1))
        w = rng.standard_normal((6, 4 * m)).astype(np.float32)
        mask = prune(w, "wanda", n=n, m=m, act_norms=rng.random(4 * m)).mask
        assert np.all(mask.reshape(6, 4, m).sum(axis=-1) == n)


def test_equal_scores_drop_higher_index():
    mask = prune(np.ones((1, 4), np.float32), sparsity=0.5).mask
    assert mask[0].tolist() == [True, True, False, False]


def test_rtn_grid_fixpoint():
    rng = np.random.default_rng(0)
    for _ in range(100):
        rows, groups, gs = 4, 3, 16
        z = rng.integers(0, 16, size=(rows, groups))
        codes = rng.integers(0, 16, size=(rows, groups, gs))
        codes[..., 0], codes[..., 1] = 0, 15
        w = ((codes - z[..., None]) * 2.0**-6).reshape(rows, groups * gs).astype(np.float32)
        qt = quantize_rtn(w, 4, gs)
        assert np.array_equal(qt.dequantize(), w)


def test_rtn_constant_group_exact():
    for c in (0.0, 0.5, -3.25, 1e-3 * 1.0009765625, 1e-30):
        w = np.full((2, 32), np.float16(c), np.float32)
        assert np.array_equal(quantize_rtn(w, 4, 16).dequantize(), w)
    tiny = np.full((1, 8), 1e-30, np.float32)
    assert np.all(np.abs(quantize_rtn(tiny, 4, 8).dequantize() - tiny) <= 1e-8)


def test_rtn_error_bound_against_oracle(rng):
    for trial in range(100):
        bits = [2, 3, 4, 8][trial % 4]
        gs = [4, 8, 16][trial % 3]
        w = (rng.standard_normal((3, 20)) * rng.uniform(0.01, 2)).astype(np.float32)
        qt = quantize_rtn(w, bits, gs)
        deq = qt.dequantize()
        ref, scales = per_element_oracle(w, bits, gs)
        assert np.allclose(deq, ref, atol=1e-6)
        assert np.array_equal(qt.scale_per_element(), scales.astype(np.float32))
        assert np.all(np.abs(w - deq) <= qt.scale_per_element() / 2 + 1e-6)
        assert qt.scales.shape == (3, -(-20 // gs))


@settings(max_examples=150, deadline=None)
@given(arrays(np.float32, (3, 24), elements=st.floats(-100, 100, allow_nan=False, width=32)),
       st.sampled_from([2, 3, 4, 8]), st.sampled_from([5, 8, 24]))
def test_rtn_error_bound_property(w, bits, gs):
    qt = quantize_rtn(w, bits, gs)
    assert np.all(np.abs(w - qt.dequantize()) <= qt.scale_per_element() / 2 + 1e-6)
    assert qt.codes.max() <= 2**bits - 1


def test_rtn_argument_errors():
    with pytest.raises(ArgumentError):
        quantize_rtn(np.ones((2, 2), np.float32), bits=5)
    with pytest.raises(ArgumentError):
        quantize_rtn(np.ones((2, 2), np.float32), group_size=0)


def awq_loss(x, w, deq):
    d = x.astype(np.float64) @ (w.astype(np.float64) - deq.astype(np.float64)).T
    return float(np.mean(d * d))


def test_awq_exhaustive_grid_oracle(rng):
    for _ in range(100):
        w = rng.standard_normal((6, 16)).astype(np.float32)
        x = (rng.standard_normal((12, 16)) * rng.uniform(0.1, 3, 16)).astype(np.float32)
        stats = np.mean(np.abs(x.astype(np.float64)), axis=0)
        res = awq_scale_search(w, x, 4, 8, grid=5)
        losses = []
        for i in range(5):
            a = i / 5
            s = np.maximum(stats, 1e-4) ** a
            s = (s / np.sqrt(s.max() * s.min())).astype(np.float32)
            deq = quantize_rtn(w * s[None, :], 4, 8).dequantize() / s[None, :]
            losses.append(awq_loss(x, w, deq))
        assert np.allclose(res.losses, losses, rtol=1e-9, atol=1e-12)
        assert res.alpha == int(np.argmin(losses)) / 5
        assert res.loss <= losses[0]


def test_awq_grid_one_is_rtn_and_uniform_acts(rng):
    w = rng.standard_normal((4, 16)).astype(np.float32)
    x = rng.standard_normal((10, 16)).astype(np.float32)
    res = awq_scale_search(w, x, 4, 8, grid=1)
    assert res.alpha == 0.0 and res.quantized.channel_scale is None
    assert np.array_equal(res.quantized.dequantize(), quantize_rtn(w, 4, 8).dequantize())
    ones = np.ones((10, 16), np.float32)
    uni = awq_scale_search(w, ones, 4, 8, grid=10)
    rtn_loss = awq_loss(ones, w, quantize_rtn(w, 4, 8).dequantize())
    assert uni.losses[0] == rtn_loss and uni.loss <= rtn_loss
    assert awq_candidate(w, np.ones(16), 0.5, 4, 8).channel_scale is not None


def weights_of(model):
    out = {}
    for i, b in enumerate(model.blocks):
        for w in Attention.WEIGHTS:
            out[f"{i}.attn.{w}"] = getattr(b.attn, w)
        out[f"{i}.norm"] = b.ffn_norm
        if isinstance(b.ffn, MoELayer):
            out[f"{i}.router"] = b.ffn.router
            for g in ("experts", "shared"):
                for j, e in enumerate(getattr(b.ffn, g)):
                    for w in Expert.WEIGHTS:
                        out[f"{i}.{g}.{j}.{w}"] = getattr(e, w)
        elif b.ffn is not None:
            for w in Expert.WEIGHTS:
                out[f"{i}.dense.{w}"] = getattr(b.ffn, w)
    out["embed"] = model.embed
    return out


def test_exclude_shared_untouched(shared_model, calib):
    traces = collect_traces(shared_model, calib)
    base = weights_of(shared_model)
    for recipe in (SlimRecipe("rtn", bits=3, group_size=16, exclude_shared=True),
                   SlimRecipe("wanda", sparsity=0.5, exclude_shared=True),
                   SlimRecipe("awq", bits=4, group_size=16, grid=4, exclude_shared=True)):
        out = weights_of(slim_model(shared_model, recipe, traces))
        for name, w in base.items():
            same = np.array_equal(out[name], w)
            if ".shared." in name or "router" in name or "norm" in name or "attn" in name or name == "embed":
                assert same, (recipe.method, name)
            elif ".experts." in name or ".dense." in name:
                assert not same, (recipe.method, name)


def test_fixpoint_quantization_keeps_logits(toy_model, calib):
    import copy

    rng = np.random.default_rng(7)
    grid = copy.deepcopy(toy_model)
    for b in grid.blocks:
        for e in b.ffn.experts:
            for w in Expert.WEIGHTS:
                setattr(e, w, grid_weights(rng, getattr(e, w).shape, 8, 32))
    out = slim_model(grid, SlimRecipe("rtn", bits=8, group_size=32))
    assert all(e.quant for b in out.blocks for e in b.ffn.experts)
    for s in calib.samples:
        assert np.array_equal(model_forward(out, s)[0], model_forward(grid, s)[0])


def test_magnitude_prune_model(toy_model, calib):
    out = slim_model(toy_model, SlimRecipe("magnitude", sparsity=0.5))
    for e in out.blocks[0].ffn.experts:
        for w in Expert.WEIGHTS:
            nz = (getattr(e, w) != 0).sum(axis=1)
            assert np.all(np.abs(nz - getattr(e, w).shape[1] / 2) <= 1)
    fid = fidelity_eval(toy_model, out, calib)
    assert fid.cosine < 1.0


def test_routed_token_inputs(toy_model, toy_traces):
    targets = collect_targets(toy_model, toy_traces)
    probs = toy_traces.router_probs[0].reshape(-1, 8)
    chosen = np.argsort(-probs, axis=1, kind="stable")[:, :2]
    f_in = toy_traces.moe_norm_output[0].reshape(-1, 64)
    for i in range(8):
        rows = np.flatnonzero((chosen == i).any(axis=1))
        t = targets[3 * i]
        assert t.weight == "w_gate" and t.owner is toy_model.blocks[0].ffn.experts[i]
        assert np.array_equal(t.inputs, f_in[rows] if rows.size else f_in)


def test_unimplemented_methods(toy_model):
    for method in ("gptq", "sparsegpt"):
        with pytest.raises(MethodNotImplemented):
            slim_model(toy_model, SlimRecipe(method))
    with pytest.raises(ArgumentError):
        slim_model(toy_model, SlimRecipe("wanda"))
    with pytest.raises(ArgumentError):
        SlimRecipe("fp8")
