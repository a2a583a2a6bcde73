import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from hvit.tensor_core import (BatchNormState, Op, ShapeError, StatisticsError, batchnorm, bn_eval,
                              bn_train, count_macs, depthwise_conv3x3, gelu, gelu_vjp, layernorm,
                              load_tensor, mac_scope, matmul, matmul_vjp, pointwise_mix, save_tensor,
                              softmax_lastdim, softmax_vjp, update_running_stats, vjp_check)

finite = st.floats(-5, 5, allow_nan=False, allow_infinity=False)


def test_matmul_examples():
    a = np.array([[1., 2.], [3., 4.]])
    assert np.array_equal(matmul(a, np.eye(2)), a)
    assert np.array_equal(matmul(a, np.array([[5., 6.], [7., 8.]])), [[19, 22], [43, 50]])
    assert matmul(np.ones((2, 3)), np.ones((3, 4))).shape == (2, 4)


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\[2, 3\].*\[4, 2\]"):
        matmul(np.ones((2, 3)), np.ones((4, 2)))


def test_softmax_examples():
    assert np.allclose(softmax_lastdim(np.zeros(2)), [0.5, 0.5], atol=1e-15)
    assert np.allclose(softmax_lastdim(np.array([0.0, math.log(3)])), [0.25, 0.75], atol=1e-15)


@given(hnp.arrays(np.float64, hnp.array_shapes(min_dims=1, max_dims=3, max_side=6),
                  elements=st.floats(-50, 50)))
def test_softmax_rows_are_distributions(x):
    y = softmax_lastdim(x)
    assert np.all(y >= 0)
    assert np.allclose(y.sum(axis=-1), 1.0, atol=1e-12)
    # shift invariance
    assert np.allclose(softmax_lastdim(x + 7.0), y, atol=1e-12)


def test_softmax_large_inputs_stay_finite():
    y = softmax_lastdim(np.array([1000.0, 1000.0, -1000.0]))
    assert np.all(np.isfinite(y))
    assert np.allclose(y, [0.5, 0.5, 0.0])


def test_conv_identity_kernel():
    x = np.random.default_rng(0).standard_normal((2, 3, 4, 5))
    k = np.zeros((3, 3, 3))
    k[:, 1, 1] = 1
    assert np.array_equal(depthwise_conv3x3(x, k, np.zeros(3)), x)


def test_conv_all_ones_counts_neighbours():
    out = depthwise_conv3x3(np.ones((1, 1, 3, 3)), np.ones((1, 3, 3)), np.zeros(1))
    assert np.array_equal(out[0, 0], [[4, 6, 4], [6, 9, 6], [4, 6, 4]])


def _conv_oracle(x, k, b):
    bsz, ch, hh, ww = x.shape
    out = np.zeros_like(x)
    for n in range(bsz):
        for c in range(ch):
            for i in range(hh):
                for j in range(ww):
                    s = b[c]
                    for di in range(-1, 2):
                        for dj in range(-1, 2):
                            if 0 <= i + di < hh and 0 <= j + dj < ww:
                                s += k[c, di + 1, dj + 1] * x[n, c, i + di, j + dj]
                    out[n, c, i, j] = s
    return out


@given(st.integers(1, 2), st.integers(1, 3), st.integers(1, 5), st.integers(1, 5), st.integers(0, 10_000))
def test_conv_matches_loop_oracle(b, ch, hh, ww, seed):
    rng = np.random.default_rng(seed)
    x, k, bias = rng.standard_normal((b, ch, hh, ww)), rng.standard_normal((ch, 3, 3)), rng.standard_normal(ch)
    assert np.allclose(depthwise_conv3x3(x, k, bias), _conv_oracle(x, k, bias), atol=1e-12)


def test_conv_kernel_channel_mismatch():
    with pytest.raises(ShapeError):
        depthwise_conv3x3(np.ones((1, 2, 3, 3)), np.ones((3, 3, 3)))


def test_pointwise_examples(rng):
    x = rng.standard_normal((5, 3))
    assert np.array_equal(pointwise_mix(x, np.eye(3), np.zeros(3)), x)
    perm = np.eye(3)[[2, 0, 1]]
    assert np.array_equal(pointwise_mix(x, perm), x[:, [2, 0, 1]])
    x, w, b = rng.standard_normal((2, 3)), rng.standard_normal((4, 3)), rng.standard_normal(4)
    oracle = np.array([[sum(x[p, c] * w[o, c] for c in range(3)) + b[o] for o in range(4)] for p in range(2)])
    assert np.allclose(pointwise_mix(x, w, b), oracle, atol=1e-12)


def test_bn_eval_examples():
    x = np.array([[5.0]])
    assert bn_eval(x, np.ones(1), np.zeros(1), np.zeros(1), np.ones(1), eps=0) == pytest.approx(5.0)
    out = bn_eval(x, np.array([2.0]), np.array([1.0]), np.array([3.0]), np.array([4.0]), eps=0)
    assert out[0, 0] == pytest.approx(3.0)


def test_bn_train_normalizes(rng):
    x = 3 + 2 * rng.standard_normal((50, 4))
    y = bn_train(x, np.ones(4), np.zeros(4))
    assert np.allclose(y.mean(axis=0), 0, atol=1e-9)
    assert np.allclose(y.var(axis=0), 1, atol=1e-3)  # eps = 1e-5 shrinks it slightly
    y0 = bn_train(x, np.ones(4), np.zeros(4), eps=0)
    assert np.allclose(y0.var(axis=0), 1, atol=1e-9)


def test_bn_train_needs_two_positions():
    with pytest.raises(StatisticsError):
        bn_train(np.ones((1, 3)), np.ones(3), np.zeros(3))


def test_running_stats_update_unbiased(rng):
    st_ = BatchNormState.identity(2)
    x = rng.standard_normal((10, 2))
    update_running_stats(st_, x)
    assert np.allclose(st_.running_mean, 0.1 * x.mean(axis=0))
    assert np.allclose(st_.running_var, 0.9 + 0.1 * x.var(axis=0, ddof=1))


def test_batchnorm_train_mode_updates_state(rng):
    s = BatchNormState.identity(3)
    batchnorm(rng.standard_normal((8, 3)) + 5, s, mode="train")
    assert np.all(s.running_mean > 0.3)
    before = s.running_mean.copy()
    batchnorm(rng.standard_normal((8, 3)), s, mode="eval")
    assert np.array_equal(s.running_mean, before)


def test_bn_fold_single_channel():
    s = BatchNormState(np.array([3.0]), np.array([1.0]), np.array([4.0]), np.array([0.25]), eps=0)
    scale, shift = s.fold()
    assert scale[0] == pytest.approx(6.0)
    assert 2.0 * scale[0] == pytest.approx(12.0)
    assert shift[0] == pytest.approx(-23.0)


def test_layernorm_examples():
    assert np.array_equal(layernorm(np.full((1, 4), 2.0), np.ones(4), np.zeros(4)), np.zeros((1, 4)))
    assert np.allclose(layernorm(np.array([[1.0, 3.0]]), np.ones(2), np.zeros(2), eps=0), [[-1, 1]])


@given(hnp.arrays(np.float64, (3, 6), elements=finite))
def test_layernorm_rows_zero_mean(x):
    y = layernorm(x, np.ones(6), np.zeros(6))
    assert np.allclose(y.mean(axis=-1), 0, atol=1e-9)


def test_gelu_examples():
    assert gelu(np.array(0.0)) == 0.0
    assert gelu(np.array(10.0)) == pytest.approx(10.0, abs=1e-9)
    assert gelu(np.array(1.0)) == pytest.approx(0.8413447, abs=1e-7)


def test_vjp_check_examples(rng):
    mm = Op("matmul", lambda a, b: matmul(a, b), matmul_vjp)
    assert vjp_check(mm, [rng.standard_normal((3, 4)), rng.standard_normal((4, 2))]) < 1e-6
    sm = Op("softmax", softmax_lastdim, softmax_vjp)
    assert vjp_check(sm, [rng.standard_normal(5)]) < 1e-6
    ge = Op("gelu", gelu, gelu_vjp)
    assert vjp_check(ge, [np.array([0.5])]) < 1e-6


def test_vjp_check_detects_wrong_gradient(rng):
    bad = Op("bad", lambda x: x ** 2, lambda g, x: (g * x,))
    assert vjp_check(bad, [rng.standard_normal(4) + 2]) > 0.1


def test_vjp_check_eps_range():
    op = Op("id", lambda x: x, lambda g, x: (g,))
    with pytest.raises(ValueError):
        vjp_check(op, [np.ones(2)], eps=1e-2)


def test_mac_counter_scopes():
    with count_macs() as c:
        with mac_scope("a"):
            matmul(np.ones((2, 3)), np.ones((3, 4)))
        with mac_scope("b"):
            depthwise_conv3x3(np.ones((1, 2, 3, 3)), np.ones((2, 3, 3)))
    assert c.by_scope == {"a": 24, "b": 2 * 9 * 9}
    assert c.total == 24 + 162


def test_tensor_json_round_trip(tmp_path, rng):
    x = rng.standard_normal((2, 3, 4))
    save_tensor(tmp_path / "x.json", x)
    assert np.array_equal(load_tensor(tmp_path / "x.json"), x)
