import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from conftest import assert_close
from rehyat import oracles
from rehyat.errors import NonFiniteError, ShapeError
from rehyat.numerics import (
    Rng,
    as_tensor,
    check_finite,
    count_flops,
    load_blob,
    matmul,
    random_tensor,
    save_blob,
    stable_row_softmax_terms,
)


def test_matmul_identity_and_hand_case():
    x = np.array([[1.0, 2.0], [3.0, 4.0]])
    assert np.array_equal(matmul(np.eye(2), x), x)
    assert matmul(np.array([[1.0, 2.0]]), np.array([[3.0], [4.0]])).tolist() == [[11.0]]


def test_matmul_vs_triple_loop(rng):
    a, b = random_tensor(rng, (5, 4)), random_tensor(rng, (4, 3))
    assert_close(matmul(a, b), oracles.naive_matmul(a, b), 1e-12)


def test_matmul_shape_errors():
    with pytest.raises(ShapeError):
        matmul(np.ones((2, 3)), np.ones((2, 3)))
    with pytest.raises(ShapeError):
        matmul(np.ones(3), np.ones((3, 1)))


def test_matmul_counts_flops():
    with count_flops() as c:
        matmul(np.ones((3, 4)), np.ones((4, 5)), "x")
    assert c.total == 2 * 3 * 4 * 5


@given(st.integers(0, 2**32))
def test_matmul_associativity(seed):
    r = Rng(seed)
    a, b, c = (random_tensor(r, (8, 8), "uniform") for _ in range(3))
    assert_close(matmul(matmul(a, b), c), matmul(a, matmul(b, c)), 1e-10 * 8)


def test_softmax_terms_examples():
    e, m = stable_row_softmax_terms(np.array([[0.0, 0.0]]))
    assert e.tolist() == [[1.0, 1.0]] and m.tolist() == [[0.0]]
    e, m = stable_row_softmax_terms(np.array([[100.0, 99.0]]))
    assert m.tolist() == [[100.0]]
    assert_close(e, [[1.0, math.exp(-1)]], 1e-15)


def test_softmax_terms_vs_direct(rng):
    row = random_tensor(rng, (1, 9)) * 4
    e, _ = stable_row_softmax_terms(row)
    direct = np.exp(row) / np.exp(row).sum()
    assert_close(e / e.sum(), direct, 1e-12)


@given(st.lists(st.floats(-700, 700), min_size=1, max_size=12))
def test_softmax_terms_never_overflow(values):
    e, m = stable_row_softmax_terms(np.array([values]))
    assert np.all(np.isfinite(e))
    assert e.max() == 1.0


def test_softmax_terms_rejects_non_finite():
    with pytest.raises(NonFiniteError):
        stable_row_softmax_terms(np.array([[0.0, np.inf]]))
    with pytest.raises(NonFiniteError):
        stable_row_softmax_terms(np.array([[np.nan]]))


def test_check_finite_and_as_tensor():
    with pytest.raises(NonFiniteError):
        check_finite(np.array([1.0, np.nan]))
    assert as_tensor([1, 2], "single").dtype == np.float32
    with pytest.raises(ValueError):
        as_tensor([1.0], "half")


def test_rng_determinism_and_streams():
    a = random_tensor(Rng(5, 1), (3, 4))
    b = random_tensor(Rng(5, 1), (3, 4))
    c = random_tensor(Rng(5, 2), (3, 4))
    assert a.tobytes() == b.tobytes()
    assert not np.array_equal(a, c)


def test_rng_advances():
    r = Rng(5)
    assert not np.array_equal(random_tensor(r, (4,)), random_tensor(r, (4,)))


def test_normal_moments():
    x = random_tensor(Rng(0, 9), (100_000,), "normal")
    assert abs(x.mean()) < 0.02
    assert abs(x.var() - 1.0) < 0.05


def test_uniform_range():
    x = random_tensor(Rng(0, 10), (10_000,), "uniform", "single")
    assert x.dtype == np.float32
    assert x.min() >= -1.0 and x.max() <= 1.0


def test_rng_accepts_full_u64_seed():
    random_tensor(Rng(2**64 - 1, 3), (2,))


def test_blob_roundtrip(tmp_path, rng):
    arrays = {"a": random_tensor(rng, (3, 2)), "b": random_tensor(rng, (4,), precision="single")}
    save_blob(tmp_path / "x", arrays, {"note": "hi"})
    back, meta = load_blob(tmp_path / "x")
    assert meta == {"note": "hi"}
    for k in arrays:
        assert back[k].dtype == arrays[k].dtype
        assert np.array_equal(back[k], arrays[k])


def test_blob_truncation_detected(tmp_path, rng):
    save_blob(tmp_path / "x", {"a": random_tensor(rng, (3,))}, {})
    raw = (tmp_path / "x.bin").read_bytes()
    (tmp_path / "x.bin").write_bytes(raw[:-8])
    with pytest.raises(ValueError):
        load_blob(tmp_path / "x")
