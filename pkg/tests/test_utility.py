import csv

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from styledeid.utility import diff_stats, match_rate, utility_sweep, write_utility_csv
from styledeid.world import CATEGORICAL, CONTINUOUS


def test_match_rate_examples():
    assert match_rate(list("AAB"), list("AAB")) == 100.0
    assert match_rate(list("AAB"), list("CCD")) == 0.0
    assert match_rate(list("AAB"), list("ABB")) == pytest.approx(66.67, abs=0.01)


def test_diff_stats_examples():
    assert diff_stats([1, 2, 3], [1, 2, 3]) == (0.0, 0.0)
    mean, _ = diff_stats([0, 0, 0], [3, -6, 9])
    assert mean == 6.0
    assert diff_stats([4.0], [1.5])[1] == 0.0


@pytest.mark.parametrize("fn", [match_rate, diff_stats])
def test_empty_and_mismatched_inputs(fn):
    with pytest.raises(ValueError):
        fn([], [])
    with pytest.raises(ValueError):
        fn([1, 2], [1])


@given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=30), st.lists(st.floats(-1e3, 1e3), min_size=30,
                                                                             max_size=30))
def test_diff_stats_bounds(a, b):
    mean, std = diff_stats(a, b[:len(a)])
    assert mean >= 0 and std >= 0


def test_oracle_rows(small_deid, small_pop):
    rows = {r.level: r for r in utility_sweep(None, small_deid, small_pop)}
    k = small_pop.config.coarse_split
    for r, row in rows.items():
        assert row.source == "oracle" and not row.incomplete
        assert row.n_pairs == len(small_pop) * len(small_deid.spec.aux_seeds)
        assert all(0 <= v <= 100 for v in row.rates.values())
    # every attribute reads the coarse layers only, so keeping them all is lossless
    top = rows[max(rows)]
    assert max(rows) >= k - 1
    assert all(v == 100.0 for v in top.rates.values())
    assert all(m == 0.0 for m, _ in top.diffs.values())


def test_oracle_agreement_non_decreasing(g, small_pop):
    from conftest import oracle_deid

    ds = oracle_deid(g, small_pop, levels=tuple(range(g.n_layers - 1)))
    rows = utility_sweep(None, ds, small_pop)
    agree = [np.mean(list(r.rates.values())) for r in rows]
    assert all(b >= a - 1e-9 for a, b in zip(agree, agree[1:])), agree


def test_utility_csv(small_deid, small_pop, tmp_path):
    path = write_utility_csv(utility_sweep(None, small_deid, small_pop), tmp_path / "u.csv", "rid")
    rows = list(csv.DictReader(open(path)))
    assert [r["method"] for r in rows] == ["style 0-0", "style 0-3", "style 0-6"]
    assert set(f"{k}_match" for k in CATEGORICAL) <= set(rows[0])
    assert set(f"{k}_std" for k in CONTINUOUS) <= set(rows[0])
