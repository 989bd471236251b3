import io
import logging

import numpy as np
import pandas as pd
import pytest

from aiwash import synth
from aiwash.errors import DataError, DuplicateKeyError, SchemaError
from aiwash.panel import (
    PanelDataset,
    apply_sample_filters,
    decode_quarter,
    encode_quarter,
    load_panel,
    quantile_by_group,
    quantile_type7,
    sa_index,
    save_panel,
    winsorize,
    winsorize_bounds,
    zscore_by_group,
)


@pytest.fixture(scope="module")
def small_panel():
    return synth.simulate(synth.DgpConfig(n_firms=6, n_quarters=8, n_industries=2, n_provinces=2)).panel


def _csv(panel, **kw):
    buf = io.StringIO()
    save_panel(panel, buf, **kw)
    return buf.getvalue()


# -- quarter encoding --------------------------------------------------------

def test_quarter_codes_are_monotone_and_round_trip():
    labels = ["2019Q4", "2020Q1", "2020Q2", "2021Q1"]
    codes = [encode_quarter(s) for s in labels]
    assert codes == sorted(codes)
    assert codes[1] - codes[0] == 1
    assert [decode_quarter(c) for c in codes] == labels


def test_bad_quarter_label():
    with pytest.raises(DataError):
        encode_quarter("2020Q5")


# -- load_panel --------------------------------------------------------------

def test_two_row_file(small_panel):
    text = _csv(small_panel)
    lines = text.splitlines()
    two = "\n".join(lines[:3]) + "\n"
    ds = load_panel(io.StringIO(two))
    assert len(ds.frame) == 2
    q = small_panel.frame["quarter"].iloc[:2]
    assert ds.quarter_range == (q.min(), q.max())


def test_duplicate_key_names_both_rows(small_panel):
    lines = _csv(small_panel).splitlines()
    text = "\n".join([lines[0], lines[1], lines[1]]) + "\n"
    with pytest.raises(DuplicateKeyError) as exc:
        load_panel(io.StringIO(text))
    assert "lines 2, 3" in str(exc.value)


def test_missing_revenue_column(small_panel):
    df = pd.read_csv(io.StringIO(_csv(small_panel)), dtype=str).drop(columns=["revenue"])
    with pytest.raises(SchemaError) as exc:
        load_panel(io.StringIO(df.to_csv(index=False)))
    assert exc.value.missing == ["revenue"]


def test_bad_cell_rejected_with_line_number(small_panel):
    df = pd.read_csv(io.StringIO(_csv(small_panel)), dtype=str)
    df.loc[3, "roa"] = "n/a?"
    ds = load_panel(io.StringIO(df.to_csv(index=False)))
    assert len(ds.frame) == len(df) - 1
    assert any(d.startswith("line 5:") and "roa" in d for d in ds.diagnostics)


def test_non_monotone_quarters(small_panel):
    df = pd.read_csv(io.StringIO(_csv(small_panel)), dtype=str)
    df.iloc[[0, 1]] = df.iloc[[1, 0]].to_numpy()
    with pytest.raises(DataError, match="non-monotone"):
        load_panel(io.StringIO(df.to_csv(index=False)))


def test_schema_mapping_and_round_trip(small_panel, tmp_path):
    schema = {"revenue": "op_rev", "roa": "ROA"}
    path = tmp_path / "p.csv"
    save_panel(small_panel, path, schema=schema)
    back = load_panel(path, schema=schema)
    cols = list(small_panel.frame.columns.intersection(back.frame.columns))
    pd.testing.assert_frame_equal(back.frame[cols], small_panel.frame[cols], check_dtype=False)


def test_index_maps_consistent(small_panel):
    ds = small_panel
    for firm, rows in ds.by_firm.items():
        assert set(ds.frame.loc[rows, "firm_id"]) == {firm}
    assert sum(len(r) for r in ds.by_quarter.values()) == len(ds.frame)


# -- sample filters ----------------------------------------------------------

def _frame_with_gap(gap):
    q = np.arange(8) + encode_quarter("2020Q1")
    awrs = np.ones(8)
    awrs[2:2 + gap] = np.nan
    return pd.DataFrame({"firm_id": "F1", "quarter": q, "awrs": awrs, "mrmi": 0.0})


def test_three_missing_quarters_drop_firm():
    _, rep = apply_sample_filters(PanelDataset(_frame_with_gap(3)))
    assert rep.missing_run_firms == ["F1"] and rep.n_out == 0


def test_two_missing_quarters_keep_firm():
    out, rep = apply_sample_filters(PanelDataset(_frame_with_gap(2)))
    assert rep.n_out == 8 and len(out.frame) == 8


def test_st_flag_drops_whole_firm():
    a = _frame_with_gap(0)
    b = a.assign(firm_id="F2")
    frame = pd.concat([a, b], ignore_index=True)
    flags = np.zeros(len(frame), bool)
    flags[10] = True
    out, rep = apply_sample_filters(PanelDataset(frame), flags)
    assert rep.st_firms == ["F2"]
    assert set(out.frame["firm_id"]) == {"F1"}


def test_filters_idempotent():
    frame = pd.concat([_frame_with_gap(3), _frame_with_gap(1).assign(firm_id="F2")], ignore_index=True)
    once, _ = apply_sample_filters(PanelDataset(frame))
    twice, _ = apply_sample_filters(once)
    pd.testing.assert_frame_equal(once.frame, twice.frame)


# -- quantiles ---------------------------------------------------------------

def _rank_oracle(values, q):
    # position 1 + (n-1) q in the sorted sample, interpolated between neighbours
    xs = sorted(values)
    pos = 1 + (len(xs) - 1) * q
    lo = int(pos)
    frac = pos - lo
    if lo >= len(xs):
        return xs[-1]
    return xs[lo - 1] + frac * (xs[lo] - xs[lo - 1])


def test_quantile_examples():
    assert quantile_by_group([10, 20, 30, 40, 50], ["g"] * 5, 0.5) == {"g": 30.0}
    for q in (0.1, 0.5, 0.9):
        assert quantile_by_group([7.5], ["a"], q) == {"a": 7.5}
    assert quantile_by_group(range(1, 11), ["x"] * 10, 0.7)["x"] == pytest.approx(_rank_oracle(range(1, 11), 0.7), abs=1e-15)


def test_quantile_matches_oracle_random(rng):
    for _ in range(50):
        v = rng.normal(size=rng.integers(1, 40)).tolist()
        q = float(rng.uniform(0.01, 0.99))
        assert quantile_type7(v, q) == pytest.approx(_rank_oracle(v, q), abs=1e-12)


def test_quantile_rank_preserved_under_monotone_transform(rng):
    # n = 31, q = 0.7 puts the threshold exactly on an order statistic
    v = rng.normal(size=31)
    ev = np.exp(v)
    assert np.array_equal(ev >= quantile_type7(ev, 0.7), v >= quantile_type7(v, 0.7))


# -- winsorize ---------------------------------------------------------------

def test_winsorize_constant_unchanged():
    assert np.array_equal(winsorize([5.0, 5, 5, 5]), [5.0, 5, 5, 5])


def test_winsorize_0_to_99():
    x = np.arange(100.0)
    w = winsorize(x, 0.01, 0.99)
    lo, hi = _rank_oracle(x.tolist(), 0.01), _rank_oracle(x.tolist(), 0.99)
    assert w[0] == lo == pytest.approx(0.99) and w[-1] == hi == pytest.approx(98.01)
    assert np.array_equal(w[2:-2], x[2:-2])


def test_winsorize_inside_range_and_nan_passthrough(rng):
    x = rng.normal(size=500)
    x[7] = np.nan
    lo, hi = winsorize_bounds(x)
    w = winsorize(x)
    assert np.isnan(w[7])
    ok = ~np.isnan(x)
    assert np.all((w[ok] >= lo) & (w[ok] <= hi))
    assert np.array_equal(winsorize(w, bounds=(lo, hi)), w, equal_nan=True)
    order = np.argsort(x[ok])
    assert np.all(np.diff(w[ok][order]) >= 0)


def test_winsorize_inner_values_untouched(rng):
    x = rng.uniform(0.2, 0.8, size=50)
    assert np.array_equal(winsorize(x, bounds=(0.0, 1.0)), x)


def test_winsorize_empty():
    with pytest.raises(DataError):
        winsorize([np.nan, np.nan])


# -- zscore ------------------------------------------------------------------

def test_zscore_two_values():
    z = zscore_by_group([1.0, 3.0], ["a", "a"])
    assert z == pytest.approx([-1 / np.sqrt(2), 1 / np.sqrt(2)], abs=1e-15)


def test_zscore_constant_group_warns(caplog):
    with caplog.at_level(logging.WARNING):
        z = zscore_by_group([4.0, 4, 4], ["c"] * 3)
    assert np.array_equal(z, [0.0, 0, 0])
    assert any("variance" in r.getMessage() for r in caplog.records)


def test_zscore_singleton_missing():
    z = zscore_by_group([1.0, 2.0, 9.0], ["a", "a", "b"])
    assert np.isnan(z[2])


def test_zscore_affine_invariance(rng):
    x = rng.normal(size=60)
    g = rng.integers(0, 3, size=60)
    assert np.allclose(zscore_by_group(3.5 * x - 2, g), zscore_by_group(x, g), atol=1e-12)


# -- SA index ----------------------------------------------------------------

def test_sa_index_values():
    assert sa_index(22, 10) == pytest.approx(4.198, abs=1e-12)
    assert sa_index(22, 11) < sa_index(22, 10)
    assert sa_index(20, 5) == sa_index(20, 5)
    with pytest.raises(DataError):
        sa_index(np.nan, 3)
