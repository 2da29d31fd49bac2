import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from dsoftmax.core_math import (
    DegenerateVectorError,
    cosine_activations,
    l2_normalize,
    log_sum_exp,
    make_rng,
    read_matrix_snapshot,
    seeded_gaussian_matrix,
    write_matrix_snapshot,
)

# 32 + log1p(e^-32), 40-digit mpmath evaluation
LSE_32_0 = 32.00000000000001266416554909409553


@pytest.mark.parametrize(
    "v, expected",
    [([3, 4], [0.6, 0.8]), ([1, 0, 0], [1, 0, 0]), ([2, 2, 2, 2], [0.5] * 4)],
)
def test_l2_normalize(v, expected):
    out = l2_normalize(v)
    np.testing.assert_allclose(out, expected, atol=1e-15)
    assert abs(np.linalg.norm(out) - 1) < 1e-12


def test_l2_normalize_rejects_zero():
    with pytest.raises(DegenerateVectorError):
        l2_normalize([0.0, 0.0])


def test_rejects_non_finite():
    with pytest.raises(ValueError):
        l2_normalize([1.0, np.nan])
    with pytest.raises(ValueError):
        cosine_activations([[1.0, np.inf]], [[1.0, 0.0]])


@pytest.mark.parametrize(
    "x, w, expected",
    [([[1, 0]], [[0, 1]], 0.0), ([[2, 0]], [[5, 0]], 1.0), ([[1, 1]], [[1, 0]], 0.70710678118654752)],
)
def test_cosine_examples(x, w, expected):
    assert cosine_activations(x, w)[0, 0] == pytest.approx(expected, abs=1e-15)


def test_cosine_names_zero_row():
    with pytest.raises(DegenerateVectorError, match="weights row 1"):
        cosine_activations([[1.0, 0.0]], [[1.0, 0.0], [0.0, 0.0]])


def test_cosine_clamped(rng):
    x = rng.standard_normal((5, 7))
    z = cosine_activations(np.vstack([x, x]), np.vstack([x, -x]))
    assert z.max() <= 1.0 and z.min() >= -1.0


@settings(max_examples=50, deadline=None)
@given(
    arrays(np.float64, (3, 4), elements=st.floats(-10, 10)).filter(
        lambda a: np.all(np.linalg.norm(a, axis=1) > 1e-3)
    ),
    arrays(np.float64, (5, 4), elements=st.floats(-10, 10)).filter(
        lambda a: np.all(np.linalg.norm(a, axis=1) > 1e-3)
    ),
    arrays(np.float64, 3, elements=st.floats(0.01, 100)),
    arrays(np.float64, 5, elements=st.floats(0.01, 100)),
)
def test_cosine_scale_invariant(x, w, a, b):
    base = cosine_activations(x, w)
    scaled = cosine_activations(x * a[:, None], w * b[:, None])
    np.testing.assert_allclose(scaled, base, atol=1e-12)


def test_log_sum_exp_examples():
    assert log_sum_exp([0, 0]) == pytest.approx(math.log(2), rel=1e-15)
    assert log_sum_exp([100]) == 100.0
    assert log_sum_exp([32, 0]) == pytest.approx(LSE_32_0, rel=1e-15)
    assert math.isfinite(log_sum_exp([700.0, 699.0, 700.0]))


def test_log_sum_exp_empty():
    with pytest.raises(ValueError):
        log_sum_exp([])


@settings(max_examples=100, deadline=None)
@given(
    arrays(np.float64, st.integers(1, 20), elements=st.floats(-300, 300)),
    st.floats(-300, 300),
)
def test_log_sum_exp_shift(v, c):
    assert log_sum_exp(v + c) == pytest.approx(log_sum_exp(v) + c, rel=1e-12, abs=1e-9)


def test_gaussian_determinism():
    a = seeded_gaussian_matrix(1, 1, make_rng(7))
    b = seeded_gaussian_matrix(1, 1, make_rng(7))
    assert a[0, 0] == b[0, 0]


def test_gaussian_moments():
    m = seeded_gaussian_matrix(10000, 256, make_rng(3))
    # direct computation of the sample moments
    assert abs(m.mean()) < 0.01
    assert abs(m.var() - 1) < 0.02


def test_matrix_snapshot_roundtrip(tmp_path, rng):
    m = rng.standard_normal((4, 3))
    path = tmp_path / "m.dsfx"
    write_matrix_snapshot(path, m)
    raw = path.read_bytes()
    assert raw[:5] == b"DSFX1" and len(raw) == 5 + 16 + 12 * 8
    assert np.array_equal(read_matrix_snapshot(path), m)
    path.write_bytes(raw[:-1])
    with pytest.raises(ValueError):
        read_matrix_snapshot(path)
