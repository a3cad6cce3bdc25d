import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from numpy.testing import assert_allclose, assert_array_equal

from conftest import unit_rows
from oracles import loop_cosine
from prompt_adapter.errors import DimensionMismatch, IndexOutOfRange, NonFinite, ValidationError, ZeroNorm
from prompt_adapter.numerics import (
    ContrastiveConfig,
    contrastive_losses,
    cosine_similarity_matrix,
    cross_entropy,
    finite_difference_check,
    l2_normalize,
    one_hot_matrix,
    softmax,
)

finite = st.floats(-50, 50, allow_nan=False)


def test_l2_normalize_examples():
    assert_allclose(l2_normalize([3.0, 4.0]), [0.6, 0.8], atol=1e-15)
    assert_array_equal(l2_normalize([1.0, 0.0, 0.0]), [1.0, 0.0, 0.0])
    with pytest.raises(ZeroNorm):
        l2_normalize([0.0, 0.0])


def test_l2_normalize_rows_are_unit(rng):
    x = l2_normalize(rng.normal(size=(7, 5)))
    assert_allclose(np.linalg.norm(x, axis=1), 1.0, atol=1e-9)


def test_cosine_matrix_examples(rng):
    eye = np.eye(2)
    assert_array_equal(cosine_similarity_matrix(eye, eye), np.eye(2))
    v = unit_rows(rng, 1, 4)
    assert_allclose(cosine_similarity_matrix(v, v), [[1.0]], atol=1e-15)
    a, b = unit_rows(rng, 3, 6), unit_rows(rng, 5, 6)
    assert_allclose(cosine_similarity_matrix(a, b), loop_cosine(a, b), atol=1e-12)
    with pytest.raises(DimensionMismatch):
        cosine_similarity_matrix(a, unit_rows(rng, 2, 5))


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 6), st.integers(1, 6), st.integers(1, 8), st.integers(0, 2**31))
def test_cosine_matrix_matches_loop(n, m, d, seed):
    r = np.random.default_rng(seed)
    a, b = unit_rows(r, n, d), unit_rows(r, m, d)
    s = cosine_similarity_matrix(a, b)
    assert_allclose(s, loop_cosine(a, b), atol=1e-12)
    assert np.all(np.abs(s) <= 1 + 1e-9)


def test_softmax_examples():
    assert_allclose(softmax([0.0, 0.0, 0.0]), [1 / 3] * 3, atol=1e-15)
    p = softmax([1000.0, 0.0])
    assert np.all(np.isfinite(p))
    assert_allclose(p, [1.0, 0.0], atol=1e-300)
    # High-precision values of e^k / (e + e^2 + e^3).
    assert_allclose(softmax([1.0, 2.0, 3.0]), [0.090030573170380458, 0.24472847105479765, 0.66524095577482189], rtol=1e-14)
    with pytest.raises(NonFinite):
        softmax([np.inf, 0.0])


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.integers(1, 8), elements=finite), st.floats(-100, 100), st.randoms())
def test_softmax_shift_invariant_and_permutation_equivariant(x, c, r):
    p = softmax(x)
    assert_allclose(p.sum(), 1.0, atol=1e-12)
    assert_allclose(softmax(x + c), p, atol=1e-12)
    perm = list(range(len(x)))
    r.shuffle(perm)
    assert_allclose(softmax(x[perm]), p[perm], atol=1e-15)


def test_cross_entropy_examples():
    assert_allclose(cross_entropy([[0.0, 0.0]], [0]), 0.69314718055994531, rtol=1e-15)
    assert_allclose(cross_entropy([[10.0, 0.0, 0.0]], [0]), 9.0795737467244446e-5, rtol=1e-10)
    losses = [cross_entropy([[z, 0.0, 0.0]], [0]) for z in np.linspace(0, 20, 21)]
    assert np.all(np.diff(losses) < 0)
    with pytest.raises(IndexOutOfRange):
        cross_entropy([[0.0, 0.0]], [2])


def test_cross_entropy_reductions(rng):
    logits, y = rng.normal(size=(5, 3)), rng.integers(0, 3, 5)
    assert_allclose(cross_entropy(logits, y, "sum"), 5 * cross_entropy(logits, y), rtol=1e-14)
    with pytest.raises(ValidationError):
        cross_entropy(logits, y, "median")


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 5), st.integers(2, 5), st.integers(0, 2**31))
def test_cross_entropy_nonnegative(b, n, seed):
    r = np.random.default_rng(seed)
    assert cross_entropy(r.normal(size=(b, n)) * 10, r.integers(0, n, b)) >= 0.0


def test_contrastive_examples(rng):
    u = unit_rows(rng, 1, 4)
    i2t, t2i, total = contrastive_losses(u, u)
    assert i2t == 0.0 and t2i == 0.0 and total == 0.0
    e = np.eye(2)
    i2t, t2i, total = contrastive_losses(e, e, ContrastiveConfig(temperature=1.0))
    assert_allclose(i2t, 0.62652337503644567, rtol=1e-14)
    assert_allclose(t2i, 0.62652337503644567, rtol=1e-14)
    assert_allclose(total, 1.2530467500728913, rtol=1e-14)


def test_contrastive_joint_permutation_invariant(rng):
    u, v = unit_rows(rng, 6, 5), unit_rows(rng, 6, 5)
    perm = rng.permutation(6)
    assert_allclose(contrastive_losses(u[perm], v[perm])[2], contrastive_losses(u, v)[2], rtol=1e-13)


def test_contrastive_text_axis_uses_transpose(rng):
    u, v = unit_rows(rng, 4, 3), unit_rows(rng, 4, 3)
    i2t, t2i, _ = contrastive_losses(u, v)
    j2i, i2j, _ = contrastive_losses(v, u)
    assert_allclose(i2t, i2j, rtol=1e-13)
    assert_allclose(t2i, j2i, rtol=1e-13)


def test_contrastive_high_temperature_asymptote(rng):
    u = unit_rows(rng, 3, 4)
    total = contrastive_losses(u, u, ContrastiveConfig(temperature=1e6))[2]
    assert_allclose(total, 6.5916737320086581, rtol=1e-3)  # 2 B ln B at B = 3


def test_contrastive_rejects_bad_input(rng):
    with pytest.raises(DimensionMismatch):
        contrastive_losses(unit_rows(rng, 3, 4), unit_rows(rng, 2, 4))
    with pytest.raises(ValidationError):
        ContrastiveConfig(temperature=0.0)


def test_one_hot_examples():
    assert_array_equal(one_hot_matrix([2], 4), [[0, 0, 1, 0]])
    assert_array_equal(one_hot_matrix([0, 1], 2), np.eye(2))
    assert_array_equal(one_hot_matrix([1, 1, 1], 3), [[0, 1, 0]] * 3)
    with pytest.raises(IndexOutOfRange):
        one_hot_matrix([3], 3)


def test_finite_difference_examples():
    assert finite_difference_check(lambda p: float(np.sum(p**2)), np.array([1.0, 2.0]), np.array([2.0, 4.0])) < 1e-8
    assert finite_difference_check(lambda p: 3.0, np.array([1.0, -1.0]), np.zeros(2)) == 0.0
    err = finite_difference_check(lambda p: float(np.sum(p**2)), np.array([1.0, 2.0]), np.array([4.0, 8.0]))
    assert_allclose(err, 0.5, rtol=1e-6)


def test_finite_difference_flags_non_finite():
    with pytest.raises(NonFinite), np.errstate(invalid="ignore", divide="ignore"):
        finite_difference_check(lambda p: float(np.log(p[0])), np.array([0.0]), np.array([1.0]))


def test_finite_difference_leaves_input_untouched():
    p = np.array([0.3, -0.7])
    finite_difference_check(lambda q: float(np.sum(np.sin(q))), p, np.cos(p))
    assert_array_equal(p, [0.3, -0.7])
