import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose, assert_array_equal

from conftest import unit_rows
from oracles import loop_clip_logits, loop_final
from prompt_adapter.errors import DimensionMismatch, EmptyInput, KindMismatch, NonFinite, ShapeMismatch
from prompt_adapter.fusion import LogitBatch, cache_batch, clip_logits, final_logits, predict


def test_clip_logits_examples(rng):
    w = unit_rows(rng, 3, 5)
    g = clip_logits(w[:1], w, 1.0)
    assert g.kind == "clip"
    assert_allclose(g.values[0, 0], 1.0, atol=1e-15)
    assert g.values[0].argmax() == 0
    f = unit_rows(rng, 4, 5)
    assert_array_equal(clip_logits(f, w, 100.0).values, 100.0 * clip_logits(f, w, 1.0).values)
    assert_allclose(clip_logits(f, w, 1.0).values, loop_clip_logits(f, w, 1.0), atol=1e-12)
    with pytest.raises(DimensionMismatch):
        clip_logits(f, unit_rows(rng, 3, 4))


def test_final_logits_examples(rng):
    clip = clip_logits(unit_rows(rng, 3, 4), unit_rows(rng, 2, 4))
    cache = cache_batch(rng.random((3, 2)) * 4)
    assert_array_equal(final_logits(clip, cache, 0.0).values, clip.values)
    toy = final_logits(LogitBatch(np.array([[1.0, 0.0]]), "clip"), cache_batch([[0.0, 2.0]]), 1.0)
    assert_array_equal(toy.values, [[1.0, 2.0]])
    d1 = final_logits(clip, cache, 1.5).values - clip.values
    d2 = final_logits(clip, cache, 3.0).values - clip.values
    assert_allclose(d2, 2 * d1, rtol=1e-15)


def test_final_logits_errors(rng):
    clip = LogitBatch(rng.normal(size=(2, 3)), "clip")
    cache = cache_batch(rng.random((2, 3)))
    with pytest.raises(KindMismatch):
        final_logits(cache, clip, 1.0)
    with pytest.raises(ShapeMismatch):
        final_logits(clip, cache_batch(rng.random((2, 4))), 1.0)
    with pytest.raises(NonFinite):
        LogitBatch(np.array([[np.nan]]), "clip")


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 5), st.integers(2, 5), st.floats(0, 5), st.floats(0, 0.5), st.integers(0, 2**31))
def test_fusion_matches_loop_and_is_continuous(b, n, alpha, delta, seed):
    r = np.random.default_rng(seed)
    clip = LogitBatch(r.normal(size=(b, n)), "clip")
    cache = cache_batch(r.random((b, n)) * 3)
    f = final_logits(clip, cache, alpha).values
    assert_allclose(f, loop_final(clip.values, cache.values, alpha), atol=1e-12)
    g = final_logits(clip, cache, alpha + delta).values
    assert np.max(np.abs(g - f)) <= delta * np.max(np.abs(cache.values)) + 1e-12


def test_predict_examples():
    assert_array_equal(predict(np.array([[0.1, 0.9, 0.3]])), [1])
    assert_array_equal(predict(np.array([[0.5, 0.5]])), [0])
    with pytest.raises(EmptyInput):
        predict(np.zeros((0, 3)))
    with pytest.raises(NonFinite):
        predict(np.array([[np.inf, 0.0]]))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31), st.floats(0.01, 100), st.floats(-100, 100))
def test_predict_scale_and_shift_invariant(seed, scale, shift):
    x = np.random.default_rng(seed).normal(size=(6, 4))
    assert_array_equal(predict(x * scale + shift), predict(x))


def test_alpha_zero_prediction_equals_clip(rng):
    clip = LogitBatch(rng.normal(size=(20, 5)), "clip")
    cache = cache_batch(rng.random((20, 5)) * 10)
    assert_array_equal(predict(final_logits(clip, cache, 0.0)), predict(clip))
