from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cfdsurrogate.reprosum import finish, fold, grid_exponents, repro_sum, slices_for


def exact_sum(col):
    return float(sum(Fraction(float(v)) for v in col))


@settings(max_examples=60, deadline=None)
@given(st.integers(2, 40), st.integers(0, 2**31 - 1), st.sampled_from([np.float32, np.float64]))
def test_partition_independent(n, seed, dtype):
    rng = np.random.default_rng(seed)
    vals = (rng.normal(size=(n, 5)) * 10.0 ** rng.integers(-8, 8, size=(n, 5))).astype(dtype)
    exps = grid_exponents(np.abs(vals).max(0), n)
    k = slices_for(dtype)
    whole = finish(fold(vals, exps, n, k), dtype)
    cut = int(rng.integers(1, n))
    parts = [vals[:cut], vals[cut:]]
    rng.shuffle(parts)
    folded = sum(fold(p, exps, n, k) for p in parts)
    assert np.array_equal(finish(folded, dtype), whole)


def test_f64_close_to_exact(rng):
    vals = rng.normal(size=(50, 4)) * np.array([1e-6, 1, 1e3, 1e9])
    got = repro_sum(vals)
    for j in range(4):
        assert got[j] == pytest.approx(exact_sum(vals[:, j]), rel=1e-15, abs=1e-300)


def test_f32_within_rounding(rng):
    vals = rng.normal(size=(200, 6)).astype(np.float32)
    got = repro_sum(vals)
    assert got.dtype == np.float32
    ref = vals.astype(np.float64).sum(0)
    np.testing.assert_allclose(got, ref, rtol=1e-6, atol=1e-6)


def test_zero_column():
    assert repro_sum(np.zeros((3, 2))).tolist() == [0.0, 0.0]


def test_headroom_guard():
    with pytest.raises(ValueError):
        grid_exponents(np.ones(2), 0)
