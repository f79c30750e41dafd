import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from moetrim.errors import ArgumentError, ShapeError
from moetrim.tensor import count_flops, cosine_rows, matmul, rms_norm, softmax, softmax_topk, topk_indices
from oracles import naive_matmul

finite = st.floats(-30, 30, allow_nan=False, width=32)


def test_matmul_hand_cases():
    eye = np.eye(2, dtype=np.float32)
    b = np.array([[3, 4], [5, 6]], np.float32)
    assert np.array_equal(matmul(eye, b), b)
    assert matmul(np.array([[1, 2]], np.float32), np.array([[3], [4]], np.float32)).tolist() == [[11.0]]


def test_matmul_triple_loop_oracle(rng):
    for _ in range(100):
        a = rng.standard_normal((8, 8)).astype(np.float32)
        b = rng.standard_normal((8, 8)).astype(np.float32)
        ref = naive_matmul(a, b)
        got = matmul(a, b)
        assert np.max(np.abs(got - ref)) <= 1e-5 * max(1.0, np.max(np.abs(ref)))


def test_matmul_shape_errors():
    with pytest.raises(ShapeError):
        matmul(np.ones((2, 3), np.float32), np.ones((4, 2), np.float32))
    with pytest.raises(ShapeError):
        matmul(np.ones(3, np.float32), np.ones((3, 2), np.float32))


def test_flop_counter_counts_only_inside_block():
    a = np.ones((3, 5), np.float32)
    matmul(a, a.T)
    with count_flops() as c:
        matmul(a, a.T)
        matmul(a.T, a)
    assert c[0] == 2 * 3 * 5 * 3 + 2 * 5 * 3 * 5


def test_softmax_topk_hand_cases():
    idx, p = softmax_topk(np.zeros(4), 2)
    assert np.allclose(p, 0.25) and idx.tolist() == [0, 1]
    idx, p = softmax_topk(np.array([1.0, 3.0, 2.0]), 1)
    assert idx.tolist() == [1] and abs(p.sum() - 1) < 1e-6


def test_softmax_topk_errors():
    with pytest.raises(ArgumentError):
        softmax_topk(np.zeros(3), 0)
    with pytest.raises(ArgumentError):
        softmax_topk(np.zeros(3), 4)
    with pytest.raises(ShapeError):
        softmax_topk(np.zeros((2, 3)), 1)


def test_topk_full_sort_oracle(rng):
    for _ in range(200):
        v = rng.standard_normal(8).astype(np.float32)
        k = int(rng.integers(1, 9))
        idx, p = softmax_topk(v, k)
        ref = sorted(range(8), key=lambda i: (-float(p[i]), i))[:k]
        assert idx.tolist() == ref


@settings(max_examples=200, deadline=None)
@given(arrays(np.float32, st.integers(1, 64), elements=finite))
def test_softmax_sums_to_one(v):
    p = softmax(v)
    assert np.all(p >= 0)
    assert abs(float(p.sum(dtype=np.float64)) - 1.0) < 1e-6


@settings(max_examples=200, deadline=None)
@given(arrays(np.float32, 8, elements=st.integers(-20, 20).map(float)), st.integers(1, 8),
       st.integers(-50, 50).map(float))
def test_topk_shift_invariant(v, k, c):
    # Integer-valued logits shifted by an integer stay exact in float32.
    a, _ = softmax_topk(v, k)
    b, _ = softmax_topk(v + np.float32(c), k)
    assert a.tolist() == b.tolist()


def test_topk_tie_rule():
    assert topk_indices(np.array([0.2, 0.4, 0.4, 0.0]), 2).tolist() == [1, 2]
    assert topk_indices(np.ones((2, 5)), 3).tolist() == [[0, 1, 2]] * 2


def test_rms_norm_cases(rng):
    assert np.array_equal(rms_norm(np.zeros(4, np.float32), np.ones(4, np.float32)), np.zeros(4, np.float32))
    out = rms_norm(np.ones(4, np.float32), np.ones(4, np.float32), eps=0.0)
    assert np.array_equal(out, np.ones(4, np.float32))
    for _ in range(100):
        x = rng.standard_normal(16).astype(np.float32)
        g = rng.standard_normal(16).astype(np.float32)
        x64 = x.astype(np.float64)
        ref = x64 / np.sqrt(np.mean(x64**2) + 1e-6) * g
        assert np.allclose(rms_norm(x, g), ref, atol=1e-6, rtol=1e-5)
    with pytest.raises(ShapeError):
        rms_norm(np.ones(4, np.float32), np.ones(3, np.float32))


def test_cosine_rows():
    a = np.array([[1.0, 2.0], [0.0, 0.0], [3.0, 4.0]])
    c = cosine_rows(a, np.array([[2.0, 4.0], [1.0, 1.0], [-3.0, -4.0]]))
    assert c[0] == 1.0 and np.isnan(c[1]) and c[2] == -1.0
