import copy

import numpy as np
import pytest

from moetrim.analysis import (
    CalibrationSet, ImportanceScores, SimilarityProfile, analyze, build_calibration, collect_traces,
    expert_importance, load_calibration, mean_cosine, save_calibration, similarity_profile,
)
from moetrim.engine import Expert, block_forward, generate_random_model
from moetrim.errors import ArgumentError, ComputationError, InputError
from oracles import importance_oracle, similarity_oracle, small_config


def test_calibration_shapes_and_determinism(tmp_path):
    c = build_calibration(128, 2048, seed=4)
    assert c.samples.shape == (128, 2048) and len(c) == 128
    one = build_calibration(1, 1)
    assert one.samples.shape == (1, 1)
    assert np.array_equal(build_calibration(4, 8, seed=9).samples, build_calibration(4, 8, seed=9).samples)
    for dist in ("zipf", "repetitive"):
        d = build_calibration(4, 20, seed=1, distribution=dist)
        assert d.samples.max() < 256 and d.source.endswith(dist)
    rep = build_calibration(2, 20, seed=1, distribution="repetitive").samples
    assert np.array_equal(rep[:, :8], rep[:, 8:16])
    stream = build_calibration(3, 5, seed=2, source=np.arange(100))
    assert all(np.array_equal(r, np.arange(r[0], r[0] + 5)) for r in stream.samples)
    with pytest.raises(ArgumentError):
        build_calibration(0, 4)
    with pytest.raises(ArgumentError):
        build_calibration(2, 4, distribution="gauss")
    with pytest.raises(InputError):
        build_calibration(2, 40, source=np.arange(10))


def test_calibration_file_roundtrip(tmp_path):
    c = build_calibration(5, 7, seed=3)
    save_calibration(c, tmp_path / "c.moec")
    back = load_calibration(tmp_path / "c.moec")
    assert np.array_equal(back.samples, c.samples) and back.seq_len == 7
    raw = (tmp_path / "c.moec").read_bytes()
    (tmp_path / "bad").write_bytes(b"XXXXX" + raw[5:])
    with pytest.raises(InputError):
        load_calibration(tmp_path / "bad")
    (tmp_path / "short").write_bytes(raw[:-3])
    with pytest.raises(InputError):
        load_calibration(tmp_path / "short")


def test_vocab_check(toy_model):
    with pytest.raises(InputError):
        collect_traces(toy_model, CalibrationSet(np.full((1, 4), 300), 4))


def test_importance_zero_router_is_uniform():
    m = generate_random_model(small_config(), 0)
    for b in m.blocks:
        b.ffn.router[:] = 0
    imp = expert_importance(collect_traces(m, build_calibration(3, 8, seed=0, vocab_size=32)))
    for s in imp.scores:
        assert np.allclose(s, 0.25, atol=1e-7)


def test_importance_dominant_logit():
    m = generate_random_model(small_config(n_layers=1), 0)
    b = m.blocks[0]
    for w in ("wq", "wk", "wv", "wo"):
        setattr(b.attn, w, np.zeros_like(getattr(b.attn, w)))
    m.embed[:, 0] += 50.0
    b.ffn.router[:] = 0
    b.ffn.router[2, 0] = 1000.0
    imp = expert_importance(collect_traces(m, build_calibration(3, 8, seed=0, vocab_size=32)))
    assert imp.scores[0][2] == pytest.approx(1.0, abs=1e-6)
    assert np.all(np.delete(imp.scores[0], 2) < 1e-6)


def test_importance_recompute_oracle():
    for seed in range(100):
        m = generate_random_model(small_config(), seed)
        c = build_calibration(4, 6, seed=seed, vocab_size=32)
        got = expert_importance(collect_traces(m, c))
        for a, b in zip(got.scores, importance_oracle(m, c)):
            assert np.allclose(a, b, atol=1e-6)
        assert got.token_count == 24


def test_similarity_recompute_oracle():
    for seed in range(100):
        m = generate_random_model(small_config(), seed)
        c = build_calibration(3, 6, seed=seed + 7, vocab_size=32)
        prof = similarity_profile(collect_traces(m, c))
        moe, nm, blk = similarity_oracle(m, c)
        assert np.allclose(prof.moe, moe, atol=1e-6)
        assert np.allclose(prof.norm_moe, nm, atol=1e-6)
        assert np.allclose(prof.block, blk, atol=1e-6)


def test_similarity_zero_moe_is_exactly_one():
    m = generate_random_model(small_config(n_layers=3), 2)
    for b in m.blocks:
        for e in b.ffn.experts:
            for w in Expert.WEIGHTS:
                setattr(e, w, np.zeros_like(getattr(e, w)))
    prof = similarity_profile(collect_traces(m, build_calibration(2, 8, seed=1, vocab_size=32)))
    assert prof.norm_moe == [1.0, 1.0, 1.0]
    assert prof.moe == [None, None, None]


def test_similarity_antiparallel():
    x = np.random.default_rng(0).standard_normal((2, 5, 8))
    assert mean_cosine(x, -x) == -1.0
    with pytest.raises(ComputationError):
        mean_cosine(np.zeros((3, 4)), np.ones((3, 4)))


def test_block_similarity_zero_block_and_scaling(toy_model, toy_traces):
    m = copy.deepcopy(toy_model)
    b = m.blocks[3]
    x = toy_traces.block_input[3]
    base = mean_cosine(x, np.stack([block_forward(b, s, m.config) for s in x]))
    for w in ("wq", "wk", "wv", "wo"):
        setattr(b.attn, w, getattr(b.attn, w) * np.float32(0.1))
    for e in b.ffn.experts:
        e.w_down = e.w_down * np.float32(0.1)
    shrunk = mean_cosine(x, np.stack([block_forward(b, s, m.config) for s in x]))
    assert shrunk >= base
    for w in ("wq", "wk", "wv", "wo"):
        setattr(b.attn, w, np.zeros_like(getattr(b.attn, w)))
    for e in b.ffn.experts:
        e.w_down = np.zeros_like(e.w_down)
    assert mean_cosine(x, np.stack([block_forward(b, s, m.config) for s in x])) == 1.0


def test_profile_serialization_and_normalization(toy_model, calib):
    imp, prof = analyze(toy_model, calib)
    assert all(-1 <= v <= 1 for v in prof.block + prof.moe + prof.norm_moe)
    back = SimilarityProfile.from_dict(prof.to_dict())
    assert back.block == prof.block and back.layer_origins == prof.layer_origins
    norm = SimilarityProfile.normalized(prof.block)
    assert min(norm) == 0.0 and max(norm) == 1.0
    assert SimilarityProfile.normalized([None, 0.5, 0.5]) == [None, 0.0, 0.0]
    imp2 = ImportanceScores.from_dict(imp.to_dict())
    assert np.array_equal(imp2.matrix(), imp.matrix())
    assert np.allclose(imp.matrix().sum(axis=1), 1.0)
