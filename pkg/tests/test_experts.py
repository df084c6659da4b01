import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bevharmonize.errors import BadK, EmptyInput, NonFinitePdir, ShapeMismatch, ValidationError, ZeroMax
from bevharmonize.experts import (
    FeatureMap,
    ReplacementSchedule,
    expert_distill_loss,
    expert_weights,
    read_feature_maps,
    replacement_mask,
    semantic_distill_loss,
    write_feature_maps,
)
from bevharmonize.synth import random_feature_maps

from oracles import cosine_loss_loop, softmax_loop


def pairs(values):
    return [(f"s{i}", v) for i, v in enumerate(values)]


def test_weights_two_sample_example():
    w = expert_weights(pairs([7.0, 0.0]))
    assert w.w1 == pytest.approx((0.7310585786, 0.2689414214), abs=1e-9)
    assert w.w2 == pytest.approx((0.2689414214, 0.7310585786), abs=1e-9)
    assert w.pdir_max == 7.0


def test_weights_match_loop_softmax():
    vals = [3.0, 12.5, 0.4, 8.8]
    w = expert_weights(pairs(vals))
    m = max(vals)
    assert w.w1 == pytest.approx(softmax_loop([v / m for v in vals]), abs=1e-15)
    assert w.w2 == pytest.approx(softmax_loop([(m - v) / m for v in vals]), abs=1e-15)


def test_weights_uniform_and_single():
    w = expert_weights(pairs([5.0] * 4))
    assert w.w1 == pytest.approx((0.25,) * 4)
    assert expert_weights(pairs([2.0])).w1 == (1.0,)


def test_weights_errors():
    with pytest.raises(EmptyInput):
        expert_weights([])
    with pytest.raises(ZeroMax):
        expert_weights(pairs([0.0, 0.0]))
    with pytest.raises(NonFinitePdir):
        expert_weights(pairs([1.0, float("nan")]))
    with pytest.raises(NonFinitePdir):
        expert_weights(pairs([1.0, -2.0]))


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(0.0, 1e4), min_size=1, max_size=50).filter(lambda v: max(v) > 0))
def test_weights_normalized_and_monotone(vals):
    w = expert_weights(pairs(vals))
    assert abs(math.fsum(w.w1) - 1.0) <= 1e-12
    assert abs(math.fsum(w.w2) - 1.0) <= 1e-12
    m = max(vals)
    for i in range(len(vals)):
        for j in range(len(vals)):
            # gaps below ~1e-12 of the max vanish inside exp()
            if (vals[i] - vals[j]) / m > 1e-12:
                assert w.w1[i] > w.w1[j]
                assert w.w2[i] < w.w2[j]


def maps(seed, n=2, c=2, h=2, w=2):
    return random_feature_maps(seed, n, c, h, w)


def test_identical_maps_give_zero_loss():
    a = maps(1, 3, 4, 5, 6)
    assert expert_distill_loss(a, a, [0.2, 0.3, 0.5]) == pytest.approx(0.0, abs=1e-12)
    assert expert_distill_loss(a, a, [0.2, 0.3, 0.5], mode="flatten") == pytest.approx(0.0, abs=1e-12)


def test_negated_maps_give_two():
    a = maps(2, 3, 4, 5, 6)
    neg = [FeatureMap(-m.data) for m in a]
    assert expert_distill_loss(a, neg, [0.5, 0.25, 0.25]) == pytest.approx(2.0, abs=1e-9)


def test_semantic_k_equal_c_matches_expert_loss():
    a, b = maps(3, 2, 5, 3, 3), maps(4, 2, 5, 3, 3)
    assert semantic_distill_loss(a, b, 5) == pytest.approx(expert_distill_loss(a, b, [1.0, 1.0]), abs=1e-12)


def test_small_example_against_loop():
    a, b = maps(5), maps(6)
    w = [0.7, 0.3]
    assert expert_distill_loss(a, b, w) == pytest.approx(cosine_loss_loop(
        [m.data for m in a], [m.data for m in b], w), abs=1e-7)


def test_semantic_first_k_channels():
    t = maps(7, 2, 3, 4, 4)
    s = maps(8, 2, 8, 4, 4)
    got = semantic_distill_loss(t, s, 3)
    assert got == pytest.approx(cosine_loss_loop([m.data for m in t], [m.data for m in s], [1.0, 1.0], k=3), abs=1e-7)


shapes = st.tuples(st.integers(1, 8), st.integers(1, 16), st.integers(1, 16))


@settings(max_examples=60, deadline=None)
@given(shape=shapes, n=st.integers(1, 3), seed=st.integers(0, 2**32 - 1), scale=st.floats(1e-3, 1e3))
def test_loss_matches_loop_and_is_scale_invariant(shape, n, seed, scale):
    a = random_feature_maps(seed, n, *shape)
    b = random_feature_maps(seed + 1, n, *shape)
    w = list(np.random.default_rng(seed).dirichlet(np.ones(n)))
    got = expert_distill_loss(a, b, w)
    assert got == pytest.approx(cosine_loss_loop([m.data for m in a], [m.data for m in b], w), abs=1e-7)
    scaled = [FeatureMap(scale * m.data) for m in a]
    assert expert_distill_loss(scaled, b, w) == pytest.approx(got, abs=1e-9)


def test_zero_norm_locations_counted():
    a = np.ones((2, 2, 2))
    a[:, 0, 0] = 0.0
    fa = [FeatureMap(a)]
    loss, zeros = expert_distill_loss(fa, fa, [1.0], return_zero_count=True)
    assert zeros == 1
    assert loss == pytest.approx(0.25)
    _, zeros = expert_distill_loss([FeatureMap(np.zeros((2, 2, 2)))], fa, [1.0], mode="flatten",
                                   return_zero_count=True)
    assert zeros == 1


def test_loss_errors():
    a = maps(1)
    with pytest.raises(ShapeMismatch):
        expert_distill_loss(a, a[:1], [1.0, 1.0])
    with pytest.raises(ShapeMismatch):
        expert_distill_loss(a, maps(1, c=3), [1.0, 1.0])
    with pytest.raises(BadK):
        semantic_distill_loss(a, a, 0)
    with pytest.raises(BadK):
        semantic_distill_loss(maps(1, c=3), a, 3)
    with pytest.raises(ShapeMismatch):
        semantic_distill_loss(maps(1, c=1), a, 2)
    with pytest.raises(ValidationError):
        expert_distill_loss(a, a, [1.0, 1.0], mode="pool")
    with pytest.raises(ValidationError):
        FeatureMap(np.full((1, 1, 1), np.inf))


def test_replacement_mask_extremes():
    ids = [f"s{i}" for i in range(20)]
    assert not replacement_mask(ReplacementSchedule(0.0, 3), ids, 6).any()
    assert replacement_mask(ReplacementSchedule(1.0, 3), ids, 6).all()
    with pytest.raises(ValidationError):
        ReplacementSchedule(1.5)


def test_replacement_mask_frequency_and_reproducibility():
    ids = [f"s{i}" for i in range(2000)]
    m = replacement_mask(ReplacementSchedule(0.5, 42), ids, 5)
    assert m.shape == (2000, 5)
    assert abs(m.mean() - 0.5) <= 0.02
    assert np.array_equal(m, replacement_mask(ReplacementSchedule(0.5, 42), ids, 5))
    assert not np.array_equal(m, replacement_mask(ReplacementSchedule(0.5, 43), ids, 5))
    # a prefix of the sample list sees the same draws
    assert np.array_equal(m[:10], replacement_mask(ReplacementSchedule(0.5, 42), ids[:10], 5))


def test_feature_map_file_roundtrip(tmp_path):
    a = maps(9, 3, 4, 5, 6)
    path = tmp_path / "f.bin"
    write_feature_maps(path, a)
    back = read_feature_maps(path)
    assert path.stat().st_size == 16 + 4 * 3 * 4 * 5 * 6
    for x, y in zip(a, back):
        np.testing.assert_array_equal(y.data, x.data.astype(np.float32))


def test_feature_map_file_truncated(tmp_path):
    path = tmp_path / "f.bin"
    write_feature_maps(path, maps(9))
    path.write_bytes(path.read_bytes()[:-4])
    with pytest.raises(ValidationError):
        read_feature_maps(path)
