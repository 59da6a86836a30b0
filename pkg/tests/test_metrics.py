import logging
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cfdsurrogate.metrics import (UndefinedMetricError, hist_r2, pearson, r2_from_counts, read_scatter, report,
                                  rmse, scatter_export, spearman)


def ref_pearson(x, y):
    n = len(x)
    mx, my = sum(x) / n, sum(y) / n
    num = sum((a - mx) * (b - my) for a, b in zip(x, y))
    den = math.sqrt(sum((a - mx) ** 2 for a in x)) * math.sqrt(sum((b - my) ** 2 for b in y))
    return num / den


def ref_ranks(v):
    order = sorted(range(len(v)), key=lambda i: v[i])
    ranks = [0.0] * len(v)
    i = 0
    while i < len(order):
        j = i
        while j + 1 < len(order) and v[order[j + 1]] == v[order[i]]:
            j += 1
        for k in range(i, j + 1):
            ranks[order[k]] = (i + j) / 2 + 1
        i = j + 1
    return ranks


def ref_hist_r2(x, y, bins):
    lo, hi = min(min(x), min(y)), max(max(x), max(y))
    edges = [lo + i * (hi - lo) / bins for i in range(bins)]

    def counts(v):
        # bin i holds [edge_i, edge_i+1); the last bin also holds hi
        out = [0] * bins
        for a in v:
            out[max(i for i, e in enumerate(edges) if a >= e)] += 1
        return out

    hx, hy = counts(x), counts(y)
    mean = sum(hx) / bins
    return 100 * (1 - sum((b - a) ** 2 for a, b in zip(hx, hy)) / sum((a - mean) ** 2 for a in hx))


def test_hand_cases():
    x = np.arange(10.0)
    assert pearson(x, 2 * x + 3) == 1.0
    assert pearson(x, -x) == -1.0
    assert spearman([1, 2, 3], [10, 20, 15]) == 0.5
    assert rmse([1, 2, 3], [1, 2, 5]) == math.sqrt(4 / 3)
    assert rmse(x, x) == 0


def test_ties_use_average_rank():
    assert ref_ranks([1, 1, 2]) == [1.5, 1.5, 3]
    assert spearman([1, 1, 2], [1, 1, 2]) == pytest.approx(1.0)


@given(st.integers(0, 2**31 - 1))
@settings(max_examples=20, deadline=None)
def test_monotone_transform_keeps_spearman(seed):
    x = np.random.default_rng(seed).normal(size=30)
    assert spearman(x, np.exp(3 * x)) == pytest.approx(1.0, abs=1e-12)


def test_rmse_translation_invariant(rng):
    x, y = rng.normal(size=50), rng.normal(size=50)
    assert rmse(x + 7.5, y + 7.5) == pytest.approx(rmse(x, y), rel=1e-12)


def test_against_brute_force_references():
    rng = np.random.default_rng(7)
    for _ in range(100):
        n = int(rng.integers(2, 1001))
        x = rng.normal(size=n)
        y = 0.6 * x + rng.normal(size=n)
        if rng.random() < 0.3:
            x, y = np.round(x, 1), np.round(y, 1)  # force ties
        xl, yl = x.tolist(), y.tolist()
        assert pearson(x, y) == pytest.approx(ref_pearson(xl, yl), abs=1e-9)
        assert spearman(x, y) == pytest.approx(ref_pearson(ref_ranks(xl), ref_ranks(yl)), abs=1e-9)
        assert rmse(x, y) == pytest.approx(math.sqrt(sum((a - b) ** 2 for a, b in zip(xl, yl)) / n), abs=1e-9)
        assert hist_r2(x, y, 16, clamp=False) == pytest.approx(ref_hist_r2(xl, yl, 16), abs=1e-9)


def test_hist_r2_identical_and_disjoint(caplog):
    x = np.linspace(0, 1, 200)
    assert hist_r2(x, x) == 100.0
    with caplog.at_level(logging.INFO, logger="cfdsurrogate.metrics"):
        assert hist_r2(x, x + 2) == 0.0
    assert "clamped" in caplog.text
    assert hist_r2(x, x + 2, clamp=False) < 0


def test_hist_r2_zero_variance_reference():
    with pytest.raises(UndefinedMetricError):
        r2_from_counts([2, 2], [1, 3])


def test_degenerate_inputs():
    with pytest.raises(UndefinedMetricError):
        pearson([1, 1, 1], [1, 2, 3])
    with pytest.raises(UndefinedMetricError):
        hist_r2([1, 1], [1, 1])
    with pytest.raises(ValueError):
        rmse([1, 2], [1])


def test_report_fields(rng):
    x = rng.normal(size=100)
    r = report(x, x)
    assert (r.pearson, r.spearman, r.rmse, r.hist_r2, r.n) == (1.0, 1.0, 0.0, 100.0, 100)


def test_scatter_round_trip(tmp_path, rng):
    x, y = rng.normal(size=3), rng.normal(size=3)
    scatter_export(x, y, tmp_path / "s.csv")
    lines = (tmp_path / "s.csv").read_text().splitlines()
    assert len(lines) == 4 and lines[0] == "cfd,ai"
    bx, by = read_scatter(tmp_path / "s.csv")
    assert np.array_equal(bx, x.astype(np.float32)) and np.array_equal(by, y.astype(np.float32))
    scatter_export(x, x, tmp_path / "p.csv")
    assert all(a == b for a, b in (l.split(",") for l in (tmp_path / "p.csv").read_text().splitlines()[1:]))
