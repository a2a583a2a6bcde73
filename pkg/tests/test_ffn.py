from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from hvit.ffn import (Branch, CffnTrainWeights, FfnConfig, compact_dim, cffn_infer_forward,
                      cffn_train_forward, ffn_forward, init_cffn_train_weights, reparam_merge)
from hvit.tensor_core import BatchNormState, StatisticsError, gelu
from hvit.verify import random_cffn_train


def test_compact_dim_examples():
    assert compact_dim(384, 4, Fraction(2, 3)) == 205
    assert compact_dim(5, 4, 1) == 4
    assert compact_dim(64, 4, Fraction(1, 2)) == 26


@pytest.mark.parametrize("t", [0, Fraction(3, 2), -1])
def test_compact_dim_rejects_bad_t(t):
    with pytest.raises(ValueError):
        compact_dim(8, 4, t)


def test_ffn_loop_oracle(rng):
    x = rng.standard_normal((3, 4))
    m1, b1, m2, b2 = rng.standard_normal((4, 8)), rng.standard_normal(8), rng.standard_normal((8, 4)), rng.standard_normal(4)
    out = ffn_forward(x, m1, b1, m2, b2)
    for p in range(3):
        hid = [gelu(np.array(sum(x[p, c] * m1[c, j] for c in range(4)) + b1[j])) for j in range(8)]
        ref = [sum(hid[j] * m2[j, o] for j in range(8)) + b2[o] for o in range(4)]
        assert np.allclose(out[p], ref, atol=1e-12)
    assert np.array_equal(ffn_forward(np.zeros((2, 4)), m1, np.zeros(8), m2, np.zeros(4)), np.zeros((2, 4)))


def test_cffn_r1_identity_bn_is_plain_factorization(rng):
    cfg = FfnConfig(C=6, m=4, t=Fraction(2, 3), r=1)
    w = init_cffn_train_weights(cfg, rng)
    for br in w.u_branches + w.v_branches:
        br.weight[...] = rng.standard_normal(br.weight.shape)
        br.bn.eps = 0.0
    w.dense_b[...] = rng.standard_normal(w.dense_b.shape)
    x = rng.standard_normal((5, 6))
    ref = gelu(x @ w.dense_w + w.dense_b) @ w.u_branches[0].weight @ w.v_branches[0].weight
    assert np.allclose(cffn_train_forward(x, w, "eval"), ref, atol=1e-12)
    merged = reparam_merge(w)
    assert np.array_equal(merged.u_hat, w.u_branches[0].weight)
    assert np.array_equal(merged.u_bias, np.zeros_like(merged.u_bias))


def test_fold_arithmetic_in_merge():
    bn = BatchNormState(np.array([3.0]), np.array([1.0]), np.array([4.0]), np.array([0.25]), eps=0)
    w = CffnTrainWeights(np.eye(1), None, [Branch(np.array([[2.0]]), bn)],
                         [Branch(np.array([[1.0]]), BatchNormState.identity(1, eps=0))])
    merged = reparam_merge(w)
    assert merged.u_hat[0, 0] == pytest.approx(12.0)
    assert merged.u_bias[0] == pytest.approx(-23.0)


@given(st.integers(2, 12), st.sampled_from([2, 4]), st.sampled_from([Fraction(1, 2), Fraction(2, 3), 1]),
       st.integers(1, 4), st.sampled_from(["M1", "M2"]), st.integers(0, 10_000))
def test_merge_equivalence(c, m, t, r, target, seed):
    rng = np.random.default_rng(seed)
    cfg = FfnConfig(C=c, m=m, t=t, r=r, factor_target=target)
    w = random_cffn_train(cfg, rng)
    x = rng.standard_normal((3, c))
    diff = np.max(np.abs(cffn_train_forward(x, w, "eval") - cffn_infer_forward(x, reparam_merge(w))))
    assert diff < 1e-9


def test_merged_zero_factors_give_zero(rng):
    cfg = FfnConfig(C=4)
    merged = reparam_merge(init_cffn_train_weights(cfg, rng))
    for a in (merged.u_hat, merged.u_bias, merged.v_hat, merged.v_bias):
        a[...] = 0
    assert np.array_equal(cffn_infer_forward(rng.standard_normal((3, 4)), merged), np.zeros((3, 4)))


def test_train_mode_updates_stats_and_needs_batch(rng):
    w = init_cffn_train_weights(FfnConfig(C=4), rng)
    before = w.u_branches[0].bn.running_var.copy()
    cffn_train_forward(rng.standard_normal((6, 4)), w, "train")
    assert not np.array_equal(before, w.u_branches[0].bn.running_var)
    with pytest.raises(StatisticsError):
        cffn_train_forward(rng.standard_normal((1, 4)), w, "train")


def test_merge_needs_running_stats(rng):
    w = init_cffn_train_weights(FfnConfig(C=4), rng)
    w.v_branches[1].bn.running_mean = None
    with pytest.raises(StatisticsError):
        reparam_merge(w)


def test_factor_shapes():
    assert FfnConfig(C=384).factor_shapes() == ((1536, 205), (205, 384))
    assert FfnConfig(C=384, factor_target="M1").factor_shapes() == ((384, 205), (205, 1536))
