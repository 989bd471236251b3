import math

import numpy as np
import pandas as pd
import pytest
from scipy import stats

from aiwash import synth
from aiwash.errors import CollinearityError, DataError, EstimationError
from aiwash.econometrics.did import did_estimate
from aiwash.econometrics.events import ReturnPanel, bhar, bhar_batch, car, car_batch
from aiwash.econometrics.iv import build_province_iv, iv_2sls
from aiwash.econometrics.linalg import cluster_vcov, fit, ols, within_twoway
from aiwash.econometrics.specs import (
    InstitutionCutoffs,
    classify_institutions,
    estimate_h2,
    estimate_h4,
    hhi,
)


def _series(vals, start="2024-01-01"):
    return pd.Series(vals, index=pd.bdate_range(start, periods=len(vals)))


# -- OLS / within --------------------------------------------------------------

def test_ols_matches_normal_equations(rng):
    X = rng.normal(size=(80, 3))
    y = X @ [1.0, -2.0, 0.5] + rng.normal(size=80)
    r = ols(y, X, intercept=True)
    Xc = np.column_stack([np.ones(80), X])
    assert np.allclose(r.coef, np.linalg.solve(Xc.T @ Xc, Xc.T @ y), atol=1e-12)
    assert np.allclose(Xc.T @ r.resid, 0, atol=1e-10)


def test_ols_exact_line():
    r = ols([1.0, 3, 5, 7], [0.0, 1, 2, 3], intercept=True)
    assert np.allclose(r.coef, [1.0, 2.0], atol=1e-14)


def test_collinear_columns_named():
    x = np.arange(10.0)
    with pytest.raises(CollinearityError) as exc:
        ols(np.ones(10) + x, np.column_stack([x, 2 * x]), names=["a", "b"])
    assert "b" in str(exc.value) or "a" in str(exc.value)


def test_within_two_periods_equals_first_difference(rng):
    n = 30
    a, b = rng.normal(size=n), rng.normal(size=n)
    ya, yb = 2 * a + rng.normal(size=n), 2 * b + rng.normal(size=n) + 1
    frame = pd.DataFrame({"firm_id": np.tile(np.arange(n), 2), "quarter": np.repeat([0, 1], n),
                          "y": np.r_[ya, yb], "x": np.r_[a, b]})
    r = fit(frame, "y", ["x"], ("firm_id", "quarter"), intercept=False)
    fd = ols(yb - ya, b - a, intercept=True)
    assert r["x"] == pytest.approx(fd.coef[1], abs=1e-9)


def test_within_singleton_firm_absorbed():
    w = within_twoway([1.0, 2, 3], [[1.0], [2.0], [5.0]], ["a", "b", "b"], [0, 0, 1])
    assert w.components == 1
    assert w.absorbed == 3


def test_firm_constant_regressor_rejected(rng):
    frame = pd.DataFrame({"firm_id": np.repeat(np.arange(10), 4), "quarter": np.tile(np.arange(4), 10)})
    frame["z"] = frame["firm_id"] * 1.5
    frame["x"] = rng.normal(size=40)
    frame["y"] = rng.normal(size=40)
    with pytest.raises(CollinearityError, match="z"):
        fit(frame, "y", ["x", "z"], ("firm_id", "quarter"))


def test_cluster_vcov_loop_oracle(rng):
    n, k = 60, 2
    X = rng.normal(size=(n, k))
    u = rng.normal(size=n)
    g = rng.integers(0, 7, size=n)
    bread = np.linalg.inv(X.T @ X)
    meat = sum(np.outer(X[g == c].T @ u[g == c], X[g == c].T @ u[g == c]) for c in np.unique(g))
    G = len(np.unique(g))
    expect = G / (G - 1) * (n - 1) / (n - k) * bread @ meat @ bread
    assert np.allclose(cluster_vcov(X, u, g, k), expect, atol=1e-14)


def test_cluster_se_coverage():
    # 1000 draws with a firm-level error component; CR1 with t(G-1) critical values should cover near 95%
    hits = 0
    reps = 1000
    for r in range(reps):
        g = np.random.default_rng(1000 + r)
        firms = np.repeat(np.arange(40), 8)
        x = g.normal(size=40)[firms] + g.normal(size=320)
        y = 0.5 * x + g.normal(size=40)[firms] + g.normal(size=320)
        frame = pd.DataFrame({"firm_id": firms, "x": x, "y": y})
        res = fit(frame, "y", ["x"], cluster="firm_id")
        hits += abs(res["x"] - 0.5) <= stats.t.ppf(0.975, res.df_resid) * res.se_of("x")
    assert 0.90 <= hits / reps <= 0.98


# -- CAR / BHAR ----------------------------------------------------------------

def test_car_hand_value():
    firm = _series([0.01] * 10)
    mkt = _series([0.002] * 10)
    assert car(firm, mkt, firm.index[5]) == pytest.approx(7 * 0.008, abs=1e-15)


def test_car_identical_series_is_zero():
    r = _series(np.linspace(-0.02, 0.03, 20))
    assert car(r, r, r.index[10]) == 0.0


def test_car_window_edges():
    r = _series(np.zeros(10))
    with pytest.raises(DataError):
        car(r, r, r.index[2])
    assert car(r, r, r.index[3]) == 0.0


def test_car_additive_over_windows(rng):
    f, m = _series(rng.normal(0, 0.01, 40)), _series(rng.normal(0, 0.01, 40))
    d = f.index[20]
    assert car(f, m, d, (-3, 3)) == pytest.approx(car(f, m, d, (-3, 0)) + car(f, m, d, (1, 3)), abs=1e-15)


def test_bhar_hand_and_horizon():
    f = _series([0.0, 0.1, 0.1, 0.0])
    m = _series([0.0, 0.05, 0.0, 0.0])
    assert bhar(f, m, f.index[0], horizon=2) == pytest.approx(1.21 - 1.05, abs=1e-14)
    long_f = _series(np.zeros(180))
    assert math.isnan(bhar(long_f, long_f, long_f.index[0], horizon=180))


def test_batch_matches_scalar(rng):
    days = 260
    rets = rng.normal(0, 0.02, size=(3, days))
    mkt = rng.normal(0, 0.01, size=days)
    cal = pd.bdate_range("2023-01-02", periods=days)
    panel = ReturnPanel(pd.Index(["a", "b", "c"]), pd.Index(cal), rets, mkt)
    ms = pd.Series(mkt, index=cal)
    for row, pos in [(0, 10), (1, 50), (2, 79)]:
        fs = pd.Series(rets[row], index=cal)
        assert car_batch(panel, [row], [pos])[0] == pytest.approx(car(fs, ms, cal[pos]), abs=1e-14)
        assert bhar_batch(panel, [row], [pos])[0] == pytest.approx(bhar(fs, ms, cal[pos]), abs=1e-10)
    assert np.isnan(bhar_batch(panel, [0], [days - 180])[0])


def test_bhar_minus_sum_small_for_small_returns(rng):
    # for daily returns of order 1e-4 compounding differs from summation by O(n^2 r^2)
    f = _series(rng.normal(0, 1e-4, 200))
    m = _series(rng.normal(0, 1e-4, 200))
    d = f.index[0]
    b = bhar(f, m, d, horizon=180)
    s = float((f.iloc[1:181] - m.iloc[1:181]).sum())
    assert abs(b - s) < 1e-3


# -- HHI / IV ------------------------------------------------------------------

def test_hhi_values():
    assert hhi([5.0]) == 1.0
    assert hhi([1.0, 1, 1, 1]) == 0.25
    assert math.isnan(hhi([]))


def test_province_iv_hand_mean():
    frame = pd.DataFrame({"province": ["p"] * 4 + ["q"], "industry": ["a", "a", "b", "c", "a"],
                          "quarter": 0, "awrs": [1.0, 3.0, 5.0, 9.0, 100.0]})
    iv = build_province_iv(frame)
    assert iv[0] == iv[1] == 7.0
    assert iv[2] == pytest.approx((1 + 3 + 9) / 3)
    assert math.isnan(iv[4])


def test_iv_same_industry_only_is_missing():
    frame = pd.DataFrame({"province": "p", "industry": "a", "quarter": 0, "awrs": [1.0, 2.0]})
    assert np.isnan(build_province_iv(frame)).all()


def test_iv_with_instrument_equal_to_regressor_is_ols(rng):
    x = rng.normal(size=100)
    y = 1 + 2 * x + rng.normal(size=100)
    r = iv_2sls(y, None, x, x)
    o = ols(y, x, intercept=True)
    assert r.second["endog0"] == pytest.approx(o.coef[1], abs=1e-12)
    assert r.second["const"] == pytest.approx(o.coef[0], abs=1e-12)


def test_just_identified_closed_form(rng):
    z = rng.normal(size=200)
    x = z + rng.normal(size=200)
    y = 0.7 * x + rng.normal(size=200)
    zc, xc, yc = z - z.mean(), x - x.mean(), y - y.mean()
    r = iv_2sls(y, None, x, z)
    assert r.second["endog0"] == pytest.approx((zc @ yc) / (zc @ xc), abs=1e-12)


def test_underidentified_raises(rng):
    with pytest.raises(EstimationError):
        iv_2sls(rng.normal(size=20), None, rng.normal(size=(20, 2)), rng.normal(size=20))


# -- DID -----------------------------------------------------------------------

def _did_panel(rng, n=40, T=10, boundary=6, tau=1.5):
    firms = np.repeat(np.arange(n), T)
    q = np.tile(np.arange(T), n)
    treat = (firms < n // 2).astype(int)
    y = rng.normal(size=n)[firms] + 0.1 * q + tau * treat * (q >= boundary) + rng.normal(0, 0.5, n * T)
    return pd.DataFrame({"firm_id": firms, "quarter": q, "y": y, "treated": treat})


def test_did_base_pinned_and_post_average(rng):
    df = _did_panel(rng)
    r = did_estimate(df, "y", "treated", 6)
    ev = r.event_time_coefs.set_index("rel_quarter")
    assert ev.loc[-1, "coef"] == 0.0 and ev.loc[-1, "ci_high"] == ev.loc[-1, "ci_low"]
    # balanced panel: ATT equals mean post coefficient minus mean pre coefficient (base counted as 0)
    pre = ev.loc[ev.index < 0, "coef"].mean()
    post = ev.loc[ev.index >= 0, "coef"].mean()
    assert r.att == pytest.approx(post - pre, abs=1e-8)


def test_did_recovers_effect(rng):
    r = did_estimate(_did_panel(rng, n=200), "y", "treated", 6)
    assert abs(r.att - 1.5) < 3 * r.att_se


def test_did_empty_treatment(rng):
    df = _did_panel(rng).assign(treated=0)
    with pytest.raises(DataError, match="zero firms"):
        did_estimate(df, "y", "treated", 6)


def test_did_binned_window(rng):
    r = did_estimate(_did_panel(rng), "y", "treated", 6, event_window=(-3, 2))
    assert list(r.event_time_coefs["rel_quarter"]) == [-3, -2, -1, 0, 1, 2]


# -- hypotheses ----------------------------------------------------------------

@pytest.fixture(scope="module")
def latent():
    return synth.simulate(synth.DgpConfig(n_firms=150, n_quarters=16, master_seed=7)).latent


def test_h2_degenerate_washing(latent):
    res = estimate_h2(latent.assign(washing=0.0))
    for r in res.values():
        assert "washing_l1" not in r.names
        assert any("no variation" in n for n in r.notes)


def test_classify_institutions_extremes():
    rows = []
    for q in range(6):
        rows.append(("dedicated", "A", q, 1.0))
        rows.append(("transient", "A" if q % 2 else "B", q, 1.0))
        for f in "BCDEFGH":
            rows.append(("transient", f + "x" if q % 2 else f, q, 0.1))
        rows.append(("short", "A", q, 1.0)) if q < 2 else None
    h = pd.DataFrame(rows, columns=["institution_id", "firm_id", "quarter", "value"])
    out = classify_institutions(h, InstitutionCutoffs()).set_index("institution_id")
    assert out.loc["dedicated", "type"] == "Dedicated"
    assert out.loc["transient", "type"] == "Transient"
    assert out.loc["short", "type"] == "Unclassified"


def test_h4_crowd_out_sign(latent):
    r = estimate_h4(latent, horizon=1)
    assert r["awrs_mean"] < 0
