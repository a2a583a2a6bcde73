import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from hvit.attention import AttentionMapStack, MapCapture, extract_attention_maps
from hvit.redundancy import SimilarityError, block_similarity, ccs, head_pair_similarity
from hvit.vit_model import PRESETS, build_model, forward_classify


def _pair_oracle(al, am):
    n = al.shape[0]
    total = 0.0
    for i in range(n):
        dot = sum(al[i, j] * am[i, j] for j in range(n))
        na = sum(v * v for v in al[i]) ** 0.5
        nb = sum(v * v for v in am[i]) ** 0.5
        total += dot / (na * nb)
    return total / n


def _block_oracle(maps):
    h = len(maps)
    vals = [_pair_oracle(maps[l], maps[m]) for l in range(h) for m in range(l + 1, h)]
    return sum(vals) / len(vals)


def _stochastic(rng, *shape):
    a = rng.random(shape)
    return a / a.sum(axis=-1, keepdims=True)


def test_pair_examples(rng):
    a = _stochastic(rng, 4, 4)
    assert head_pair_similarity(a, a) == pytest.approx(1.0, abs=1e-12)
    eye = np.eye(5)
    assert head_pair_similarity(eye, np.roll(eye, 1, axis=1)) == 0.0
    b = _stochastic(rng, 4, 4)
    assert abs(head_pair_similarity(a, b) - _pair_oracle(a, b)) < 1e-12


@given(st.sampled_from([2, 4, 8]), st.sampled_from([4, 9, 17]), st.integers(0, 10_000))
def test_block_matches_double_loop(h, n, seed):
    maps = _stochastic(np.random.default_rng(seed), h, n, n)
    assert abs(block_similarity(maps) - _block_oracle(maps)) < 1e-12


def test_block_examples(rng):
    one = _stochastic(rng, 6, 6)
    assert block_similarity(np.stack([one] * 4)) == pytest.approx(1.0, abs=1e-12)
    two = _stochastic(rng, 2, 6, 6)
    assert block_similarity(two) == pytest.approx(head_pair_similarity(two[0], two[1]), abs=1e-15)
    with pytest.raises(SimilarityError):
        block_similarity(one[None])


def test_zero_row_is_undefined():
    a = np.eye(3)
    b = a.copy()
    b[1] = 0
    with pytest.raises(SimilarityError):
        head_pair_similarity(a, b)


def test_ccs_examples(rng):
    s = AttentionMapStack(_stochastic(rng, 4, 5, 5))
    assert ccs([s]).overall == block_similarity(s)
    same = [AttentionMapStack(np.stack([_stochastic(rng, 5, 5)] * 3), i) for i in range(3)]
    assert ccs(same).overall == pytest.approx(1.0, abs=1e-12)
    with pytest.raises(SimilarityError):
        ccs([])


@given(st.permutations(range(4)))
def test_block_invariant_to_head_order(perm):
    maps = _stochastic(np.random.default_rng(7), 4, 5, 5)
    assert block_similarity(maps[list(perm)]) == pytest.approx(block_similarity(maps), abs=1e-12)


@pytest.mark.parametrize("variant", ["vanilla", "ours"])
def test_model_ccs_matches_oracle(rng, variant):
    cfg = PRESETS["toy"] if variant == "vanilla" else PRESETS["toy"].ours()
    model = build_model(cfg)
    cap = MapCapture()
    forward_classify(model, rng.standard_normal((1, 3, 16, 16)), capture=cap)
    stacks = extract_attention_maps(cap)
    assert len(stacks) == 2
    assert stacks[0].maps.shape == (1, cfg.heads, 17, 17)
    ref = np.mean([_block_oracle(s.maps[0]) for s in stacks])
    assert abs(ccs(stacks).overall - ref) < 1e-12
