import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from conftest import assert_close
from rehyat import oracles
from rehyat.attention import (
    AttentionConfig,
    FeatureMap,
    ProjectionWeights,
    feature_map_apply,
    guarded_divide,
    linear_attention,
    load_feature_map,
    polynomial_expand,
    project_qkv,
    save_feature_map,
    softmax_attention,
)
from rehyat.costmodel import flops_linear
from rehyat.errors import DenominatorUnderflowError, ShapeError
from rehyat.numerics import Rng, count_flops, matmul, random_tensor


def test_project_identity_and_zero(rng):
    x = random_tensor(rng, (5, 3))
    q, k, v = project_qkv(x, ProjectionWeights.identity(3))
    assert np.array_equal(q, x) and np.array_equal(k, x) and np.array_equal(v, x)
    assert all(np.all(a == 0) for a in project_qkv(np.zeros((4, 3)), ProjectionWeights.random(rng, 3)))


def test_project_vs_matmul_oracle(rng):
    x = random_tensor(rng, (6, 4))
    w = ProjectionWeights.random(rng, 4)
    for got, mat in zip(project_qkv(x, w), (w.w_q, w.w_k, w.w_v)):
        assert_close(got, oracles.naive_matmul(x, mat), 1e-12)


def test_project_shape_mismatch(rng):
    with pytest.raises(ShapeError):
        project_qkv(np.ones((2, 5)), ProjectionWeights.identity(4))


def test_attention_config():
    assert AttentionConfig(2, 16).scale == pytest.approx(0.25)
    with pytest.raises(ValueError):
        AttentionConfig(1, 4, scale=0.0)


def test_softmax_single_key(rng):
    q, k, v = (random_tensor(rng, (1, 4)) for _ in range(3))
    assert_close(softmax_attention(q, k, v), v, 1e-15)


def test_softmax_constant_values(rng):
    q, k = random_tensor(rng, (7, 3)), random_tensor(rng, (7, 3))
    c = np.array([0.5, -2.0, 3.0])
    assert_close(softmax_attention(q, k, np.tile(c, (7, 1))), np.tile(c, (7, 1)), 1e-12)


def test_softmax_vs_loop(rng):
    q, k, v = (random_tensor(rng, (6, 4)) for _ in range(3))
    assert_close(softmax_attention(q, k, v), oracles.softmax_attention_loop(q, k, v), 1e-12)


def test_softmax_stabilizer_noop(rng):
    q, k, v = (random_tensor(rng, (8, 4)) * 2 for _ in range(3))
    logits = q @ k.T / 2.0
    assert np.abs(logits).max() <= 30
    w = np.exp(logits)
    assert_close(softmax_attention(q, k, v), (w @ v) / w.sum(axis=1, keepdims=True), 1e-9)


def test_softmax_large_logits_finite():
    q = np.array([[30.0, 0.0]])
    k = np.array([[30.0, 0.0], [-30.0, 0.0]])
    out = softmax_attention(q, k, np.eye(2))
    assert np.all(np.isfinite(out))


def test_feature_map_identity_examples():
    x = np.array([[2.0, 3.0]])
    assert feature_map_apply(FeatureMap.identity(2, 2, "none"), x).tolist() == [[2.0, 9.0]]
    assert feature_map_apply(FeatureMap.identity(2, 2, "shifted-elu"), x).tolist() == [[3.0, 16.0]]


def test_polynomial_expand():
    base = np.array([[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]])
    assert polynomial_expand(base, 3).tolist() == [[1.0, 2.0, 9.0, 16.0, 125.0, 216.0]]


def test_feature_map_positive(rng):
    fm = FeatureMap.init(rng, 4)
    out = feature_map_apply(fm, random_tensor(rng, (10_000, 4)) * 3)
    assert out.shape == (10_000, 8)
    assert np.all(out > 0)


def test_feature_map_vs_row_oracle(rng):
    fm = FeatureMap.init(rng, 3, hidden=5, out=6, degree=3, activation="softplus")
    x = random_tensor(rng, (4, 3))
    ref = np.array([oracles.phi_row(fm, r) for r in x])
    assert_close(feature_map_apply(fm, x), ref, 1e-12)


def test_feature_map_validation(rng):
    with pytest.raises(ValueError):
        FeatureMap.init(rng, 4, out=7, degree=2)
    with pytest.raises(ShapeError):
        feature_map_apply(FeatureMap.init(rng, 4), np.ones((2, 3)))


def test_feature_map_default_widths(rng):
    fm = FeatureMap.init(rng, 8)
    assert (fm.in_dim, fm.hidden_dim, fm.out_dim) == (8, 16, 16)
    assert fm.n_params == 8 * 16 + 16 + 16 * 16 + 16


def test_linear_constant_map_gives_mean(rng):
    q, k, v = (random_tensor(rng, (5, 3)) for _ in range(3))
    one = FeatureMap.constant(3)
    assert_close(linear_attention(q, k, v, one, one), np.tile(v.mean(axis=0), (5, 1)), 1e-12)


def test_linear_constant_values(rng):
    q, k = random_tensor(rng, (6, 4)), random_tensor(rng, (6, 4))
    fq, fk = FeatureMap.init(rng, 4), FeatureMap.init(rng, 4)
    c = np.tile([1.0, -1.0, 0.25, 7.0], (6, 1))
    assert_close(linear_attention(q, k, c, fq, fk), c, 1e-12)


def test_linear_vs_loop(rng):
    q, k, v = (random_tensor(rng, (8, 4)) for _ in range(3))
    fq, fk = FeatureMap.init(rng, 4, out=6), FeatureMap.init(rng, 4, out=6)
    assert_close(linear_attention(q, k, v, fq, fk), oracles.linear_attention_loop(q, k, v, fq, fk), 1e-10)


def test_linear_mismatched_maps(rng):
    q = random_tensor(rng, (3, 4))
    with pytest.raises(ShapeError):
        linear_attention(q, q, q, FeatureMap.init(rng, 4, out=6), FeatureMap.init(rng, 4, out=8))


@given(st.integers(0, 2**32), st.integers(1, 10), st.integers(1, 5))
def test_convex_hull(seed, n, d):
    r = Rng(seed)
    q, k, v = (random_tensor(r, (n, d)) for _ in range(3))
    fq, fk = FeatureMap.init(r, d), FeatureMap.init(r, d)
    lo, hi = v.min(axis=0) - 1e-9, v.max(axis=0) + 1e-9
    for out in (softmax_attention(q, k, v), linear_attention(q, k, v, fq, fk)):
        assert np.all(out >= lo) and np.all(out <= hi)


@given(st.integers(0, 2**32))
def test_kv_permutation_invariance(seed):
    r = Rng(seed)
    q, k, v = (random_tensor(r, (7, 3)) for _ in range(3))
    fq, fk = FeatureMap.init(r, 3), FeatureMap.init(r, 3)
    perm = r.generator.permutation(7)
    assert_close(softmax_attention(q, k[perm], v[perm]), softmax_attention(q, k, v), 1e-12)
    assert_close(linear_attention(q, k[perm], v[perm], fq, fk), linear_attention(q, k, v, fq, fk), 1e-12)


def test_linear_flops_scale_linearly(rng):
    d = 4
    fq, fk = FeatureMap.init(rng, d), FeatureMap.init(rng, d)
    totals = []
    for n in (64, 128):
        q, k, v = (random_tensor(rng, (n, d)) for _ in range(3))
        with count_flops() as c:
            linear_attention(q, k, v, fq, fk)
        totals.append(c.total)
    assert 1.9 <= totals[1] / totals[0] <= 2.1
    assert 1.9 <= flops_linear(2048, 8, 16).flops / flops_linear(1024, 8, 16).flops <= 2.1


def test_guarded_divide():
    num = np.ones((10, 2))
    den = np.ones((10, 1))
    den[0] = 0.0
    out, clamped = guarded_divide(num, den, "double")
    assert int(clamped.sum()) == 1
    assert out[0, 0] == pytest.approx(1e12)
    den[:3] = 0.0
    with pytest.raises(DenominatorUnderflowError):
        guarded_divide(num, den, "double")


def test_feature_map_serialization(tmp_path, rng):
    fm = FeatureMap.init(Rng(99, 3), 4, hidden=6, out=8, degree=4, activation="softplus")
    save_feature_map(fm, tmp_path / "fm")
    back = load_feature_map(tmp_path / "fm")
    x = random_tensor(rng, (5, 4))
    assert np.array_equal(feature_map_apply(back, x), feature_map_apply(fm, x))
    assert (back.degree, back.nonneg_mode, back.activation) == (4, "shifted-elu", "softplus")
    import json
    meta = json.loads((tmp_path / "fm.json").read_text())["meta"]
    assert {"D", "D_h", "D_e", "P", "nonneg_mode", "activation", "seed"} <= set(meta)
    assert (meta["D"], meta["D_h"], meta["D_e"], meta["P"], meta["seed"]) == (4, 6, 8, 4, 99)


def test_single_precision_path(rng):
    q, k, v = (random_tensor(rng, (6, 4), precision="single") for _ in range(3))
    fq = FeatureMap.init(rng, 4, precision="single")
    out = linear_attention(q, k, v, fq, fq)
    assert out.dtype == np.float32
    assert softmax_attention(q, k, v).dtype == np.float32
