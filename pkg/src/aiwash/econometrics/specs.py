"""Named hypothesis specifications built on the FE regression kernel."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import pandas as pd

from ..errors import DataError, EstimationError
from ..panel import CONTROL_FIELDS, encode_quarter, lag, quantile_type7, quarter_year, sa_index
from .events import ReturnPanel, bhar_batch, car_batch, event_path, quarterly_abnormal_returns
from .iv import IvResult, build_province_iv, estimate_iv
from .linalg import RegressionResult, fit

log = logging.getLogger(__name__)

FIRM_QUARTER_FE = ("firm_id", "quarter")
INDUSTRY_QUARTER_FE = ("industry", "quarter")


def _controls(frame: pd.DataFrame, controls: Sequence[str] | None) -> list[str]:
    if controls is None:
        return [c for c in CONTROL_FIELDS if c in frame]
    missing = [c for c in controls if c not in frame]
    if missing:
        raise DataError(f"control(s) not in panel: {missing}")
    return list(controls)


# ---------------------------------------------------------------------------
# H1: distributed lags of rhetoric on later investment


def sa_tertile(frame: pd.DataFrame) -> np.ndarray:
    """Per-quarter SA-index tertile (0 low, 1 mid, 2 high constraint); NaN if undefined."""
    size = frame["size"].to_numpy(dtype=float)
    age = frame["firm_age"].to_numpy(dtype=float)
    ok = np.isfinite(size) & np.isfinite(age) & (size > 0) & (age >= 0)
    sa = np.full(len(frame), np.nan)
    sa[ok] = sa_index(size[ok], age[ok])
    out = np.full(len(frame), np.nan)
    q = frame["quarter"].to_numpy()
    for code in np.unique(q):
        idx = np.flatnonzero((q == code) & ok)
        if len(idx) < 3:
            continue
        v = sa[idx]
        lo, hi = quantile_type7(v, 1 / 3), quantile_type7(v, 2 / 3)
        out[idx] = np.where(v <= lo, 0, np.where(v > hi, 2, 1))
    return out


def add_lags(frame: pd.DataFrame, column: str, lags: Sequence[int], prefix: str | None = None) -> pd.DataFrame:
    prefix = prefix or column
    for h in lags:
        frame[f"{prefix}_l{h}"] = lag(frame, column, h)
    return frame


def estimate_h1(
    frame: pd.DataFrame,
    lags: int = 4,
    split: str = "sa-tertile",
    controls: Sequence[str] | None = None,
    awrs: str = "awrs_std",
    mrmi: str = "mrmi",
    cluster: str = "firm_id",
) -> dict[str, RegressionResult]:
    """MRMI on AWRS lags 1..``lags`` under industry+quarter and firm+quarter FE.

    With ``split="sa-tertile"`` two more firm+quarter FE columns are run on
    the top and bottom SA tertiles (tertiles formed within each quarter).
    Each result carries the lag sum and its delta-rule standard error.
    """
    if split not in ("none", "sa-tertile"):
        raise ValueError(f"unknown split {split!r}")
    if frame["quarter"].nunique() <= lags:
        raise EstimationError(f"panel has {frame['quarter'].nunique()} quarters, too short for {lags} lags")
    ctrl = _controls(frame, controls)
    df = frame.copy()
    add_lags(df, awrs, range(1, lags + 1), "awrs")
    lag_names = [f"awrs_l{h}" for h in range(1, lags + 1)]
    X = lag_names + ctrl
    cols = {
        "(1) industry+quarter FE": (df, INDUSTRY_QUARTER_FE),
        "(2) firm+quarter FE": (df, FIRM_QUARTER_FE),
    }
    if split == "sa-tertile":
        t = sa_tertile(df)
        cols["(3) high constraint"] = (df[t == 2], FIRM_QUARTER_FE)
        cols["(4) low constraint"] = (df[t == 0], FIRM_QUARTER_FE)
    out = {}
    for label, (sub, fe) in cols.items():
        n_ok = int(sub[[mrmi] + lag_names].notna().all(axis=1).sum())
        if n_ok < len(X) + 10:
            raise EstimationError(f"H1 {label}: only {n_ok} usable rows after lag trimming")
        res = fit(sub, mrmi, X, fe, cluster=cluster, label=f"H1 {label}")
        res.lag_sum, res.lag_sum_se = res.linear_combination({n: 1.0 for n in lag_names})
        out[label] = res
    return out


# ---------------------------------------------------------------------------
# H2: institutional investor responses


def _prepare_h2(frame, awrs, mrmi, washing):
    if washing not in frame:
        raise DataError(f"washing column {washing!r} not in panel")
    if frame[washing].isna().all():
        raise DataError(f"washing column {washing!r} is entirely missing")
    df = frame.copy()
    df["awrs_l1"] = lag(df, awrs, 1)
    df["mrmi_l1"] = lag(df, mrmi, 1)
    df["washing_l1"] = lag(df, washing, 1)
    df["awrs_x_washing_l1"] = df["awrs_l1"] * df["washing_l1"]
    return df


def _washing_terms(df, wcol, inter, notes) -> list[str]:
    w = df[wcol].dropna()
    if len(w) == 0 or w.nunique() < 2:
        notes.append(f"{wcol} has no variation in the estimation sample; Washing and its interaction dropped")
        return []
    return [wcol, inter]


def estimate_h2(
    frame: pd.DataFrame,
    controls: Sequence[str] | None = None,
    awrs: str = "awrs_std",
    mrmi: str = "mrmi",
    washing: str = "washing",
    cluster: str = "firm_id",
) -> dict[str, RegressionResult]:
    """Holdings responses: change in transient holdings and dedicated holdings
    on lagged AWRS, MRMI, Washing and AWRS x Washing, firm+quarter FE."""
    for c in ("ded_hold", "trans_hold"):
        if c not in frame:
            raise DataError(f"H2 needs column {c!r}")
    ctrl = _controls(frame, controls)
    df = _prepare_h2(frame, awrs, mrmi, washing)
    df["d_trans"] = df["trans_hold"] - lag(df, "trans_hold", 1)
    notes: list[str] = []
    wt = _washing_terms(df, "washing_l1", "awrs_x_washing_l1", notes)
    base = ["awrs_l1", "mrmi_l1"]
    specs = {
        "(1) d_trans": ("d_trans", base + wt),
        "(2) ded": ("ded_hold", base + wt[:1]),
        "(3) ded x washing": ("ded_hold", base + wt),
    }
    out = {}
    for label, (y, X) in specs.items():
        res = fit(df, y, X + ctrl, FIRM_QUARTER_FE, cluster=cluster, label=f"H2 {label}")
        res.notes.extend(notes)
        out[label] = res
    return out


def estimate_h2_returns(
    frame: pd.DataFrame,
    controls: Sequence[str] | None = None,
    washing: str = "washing",
    cluster: str = "firm_id",
) -> dict[str, RegressionResult]:
    """Next-quarter market-adjusted return on Washing, holdings and their
    product, one column per investor type, firm+quarter FE."""
    if "ret_adj" not in frame:
        raise DataError("return variant of H2 needs a 'ret_adj' column")
    if washing not in frame or frame[washing].isna().all():
        raise DataError(f"washing column {washing!r} is missing")
    ctrl = _controls(frame, controls)
    df = frame.copy()
    df["ret_adj_f1"] = lag(df, "ret_adj", -1)
    out = {}
    for inst in ("ded_hold", "trans_hold"):
        notes: list[str] = []
        inter = f"washing_x_{inst}"
        df[inter] = df[washing] * df[inst]
        wt = _washing_terms(df, washing, inter, notes)
        X = ([wt[0]] if wt else []) + [inst] + wt[1:] + ctrl
        res = fit(df, "ret_adj_f1", X, FIRM_QUARTER_FE, cluster=cluster, label=f"H2 return {inst}")
        res.notes.extend(notes)
        out[f"return x {inst}"] = res
    return out


@dataclass(frozen=True)
class InstitutionCutoffs:
    """Annualized turnover cutoffs. Comparisons are strict, so values on a
    cutoff (or on the concentration median) fall to Quasi-Indexer."""

    turnover_low: float = 0.2
    turnover_high: float = 0.6
    min_history: int = 4


def classify_institutions(holdings: pd.DataFrame, cutoffs: InstitutionCutoffs = InstitutionCutoffs()) -> pd.DataFrame:
    """Classify institutions by portfolio turnover and concentration.

    ``holdings`` has ``institution_id, firm_id, quarter, value``. Quarterly
    turnover is half the sum of absolute changes in portfolio weights;
    annualized turnover is four times its mean. Concentration is the mean
    Herfindahl index of weights. Institutions with fewer than
    ``min_history`` quarters are ``Unclassified``.
    """
    need = {"institution_id", "firm_id", "quarter", "value"}
    if not need <= set(holdings.columns):
        raise DataError(f"holdings need columns {sorted(need)}")
    h = holdings[holdings["value"] > 0].copy()
    h["w"] = h["value"] / h.groupby(["institution_id", "quarter"])["value"].transform("sum")
    conc = (h.assign(w2=h["w"] ** 2).groupby(["institution_id", "quarter"])["w2"].sum()
            .groupby(level=0).mean())
    nq = h.groupby("institution_id")["quarter"].nunique()
    wide = h.pivot_table(index=["institution_id", "firm_id"], columns="quarter", values="w", fill_value=0.0)
    rows = []
    for inst, g in wide.groupby(level=0):
        present = sorted(h.loc[h["institution_id"] == inst, "quarter"].unique())
        turns = []
        for a, b in zip(present[:-1], present[1:]):
            if b - a != 1:
                continue
            turns.append(0.5 * float(np.abs(g[b].to_numpy() - g[a].to_numpy()).sum()))
        rows.append({"institution_id": inst, "n_quarters": int(nq[inst]),
                     "turnover": 4.0 * float(np.mean(turns)) if turns else float("nan"),
                     "concentration": float(conc[inst])})
    res = pd.DataFrame(rows)
    eligible = (res["n_quarters"] >= cutoffs.min_history) & res["turnover"].notna()
    med = float(res.loc[eligible, "concentration"].median()) if eligible.any() else float("nan")
    kind = np.where(
        ~eligible, "Unclassified",
        np.where((res["turnover"] > cutoffs.turnover_high) & (res["concentration"] < med), "Transient",
                 np.where((res["turnover"] < cutoffs.turnover_low) & (res["concentration"] > med), "Dedicated",
                          "QuasiIndexer")))
    res["type"] = kind
    res.attrs["concentration_median"] = med
    return res


def firm_holdings(holdings: pd.DataFrame, classes: pd.DataFrame) -> pd.DataFrame:
    """Sum of ``ownership`` by Dedicated and Transient holders per firm-quarter."""
    if "ownership" not in holdings:
        raise DataError("holdings need an 'ownership' column to aggregate firm-level stakes")
    h = holdings.merge(classes[["institution_id", "type"]], on="institution_id", how="left")
    out = h.groupby(["firm_id", "quarter"]).apply(
        lambda g: pd.Series({
            "ded_hold": float(g.loc[g["type"] == "Dedicated", "ownership"].sum()),
            "trans_hold": float(g.loc[g["type"] == "Transient", "ownership"].sum()),
        }), include_groups=False)
    return out.reset_index()


# ---------------------------------------------------------------------------
# H3: event returns


def announcement_positions(panel: ReturnPanel, frame: pd.DataFrame, events: pd.DataFrame) -> np.ndarray:
    """Trading-day position of each firm-quarter's announcement (-1 if none)."""
    ev = events[events["kind"] == "announcement"].copy()
    if "quarter" not in ev:
        raise DataError("announcement events need a 'quarter' column naming the reported quarter")
    ev["quarter"] = [encode_quarter(q) for q in ev["quarter"]]
    ev = ev.drop_duplicates(["firm_id", "quarter"], keep="first")
    m = frame[["firm_id", "quarter"]].merge(ev[["firm_id", "quarter", "event_date"]], on=["firm_id", "quarter"], how="left")
    pos = np.full(len(frame), -1)
    has = m["event_date"].notna().to_numpy()
    if has.any():
        pos[has] = panel.positions(m.loc[has, "event_date"].astype(str).to_numpy())
    return pos


def compute_event_returns(
    frame: pd.DataFrame,
    returns: pd.DataFrame | None,
    market: pd.DataFrame | None,
    events: pd.DataFrame,
    window=(-3, 3),
    horizon: int = 180,
    panel: ReturnPanel | None = None,
) -> pd.DataFrame:
    """Attach ``car`` and ``bhar`` to each firm-quarter from its announcement date.

    Rows whose window or horizon is not fully covered get NaN and a cause in
    ``event_return_cause``. A prebuilt ``panel`` replaces the long tables.
    """
    if panel is None:
        if market is None or len(market) == 0:
            raise DataError("market return series is missing; CAR/BHAR cannot be computed")
        panel = ReturnPanel.from_long(returns, market)
    pos = announcement_positions(panel, frame, events)
    rows = panel.firm_rows(frame["firm_id"].to_numpy())
    out = frame.copy()
    out["car"] = car_batch(panel, rows, pos, window)
    out["bhar"] = bhar_batch(panel, rows, pos, horizon)
    cause = np.full(len(out), "", dtype=object)
    cause[pos < 0] = "no announcement date"
    cause[(pos >= 0) & (rows < 0)] = "no firm returns"
    cause[(pos >= 0) & (rows >= 0) & out["car"].isna().to_numpy()] = "car window not covered"
    cause[(pos >= 0) & (rows >= 0) & out["car"].notna().to_numpy() & out["bhar"].isna().to_numpy()] = "bhar horizon not covered"
    out["event_return_cause"] = cause
    return out


@dataclass
class EventStudyResult:
    columns: dict[str, RegressionResult]
    path: pd.DataFrame | None
    n_car: int
    n_bhar: int
    notes: list[str] = field(default_factory=list)


def estimate_h3(
    frame: pd.DataFrame,
    controls: Sequence[str] | None = None,
    awrs: str = "awrs_std",
    mrmi: str = "mrmi",
    washing: str = "washing",
    cluster: str = "firm_id",
    percent: bool = False,
    quarterly_returns: pd.DataFrame | None = None,
    exposure_events: pd.DataFrame | None = None,
    path_window: int = 8,
) -> EventStudyResult:
    """CAR and BHAR on AWRS, lagged MRMI, Washing and AWRS x Washing with
    industry+quarter FE. Returns are fractions unless ``percent``.

    When ``quarterly_returns`` and ``exposure_events`` are given the
    event-time abnormal return path is also computed.
    """
    for c in ("car", "bhar"):
        if c not in frame:
            raise DataError("H3 needs CAR/BHAR columns; run compute_event_returns first")
    if washing not in frame or frame[washing].isna().all():
        raise DataError(f"washing column {washing!r} is missing")
    ctrl = _controls(frame, controls)
    df = frame.copy()
    scale = 100.0 if percent else 1.0
    df["car_y"] = df["car"] * scale
    df["bhar_y"] = df["bhar"] * scale
    df["mrmi_l1"] = lag(df, mrmi, 1)
    df["awrs_x_washing"] = df[awrs] * df[washing]
    notes: list[str] = [f"returns in {'percent' if percent else 'fractions'}"]
    wt = _washing_terms(df, washing, "awrs_x_washing", notes)
    base = [awrs, "mrmi_l1"]
    specs = {
        "(1) CAR": ("car_y", base),
        "(2) CAR x washing": ("car_y", base + wt),
        "(3) BHAR": ("bhar_y", base),
        "(4) BHAR x washing": ("bhar_y", base + wt),
    }
    cols = {}
    for label, (y, X) in specs.items():
        res = fit(df, y, X + ctrl, INDUSTRY_QUARTER_FE, cluster=cluster, label=f"H3 {label}")
        res.outcome = y.replace("_y", "")
        res.notes.extend(notes)
        cols[label] = res
    path = None
    if quarterly_returns is not None or exposure_events is not None:
        if exposure_events is None or len(exposure_events) == 0:
            raise DataError("no events supplied for the event path")
        path = event_path(quarterly_returns, exposure_events, path_window)
    return EventStudyResult(cols, path, int(df["car"].notna().sum()), int(df["bhar"].notna().sum()), notes)


def exposure_event_quarters(events: pd.DataFrame, kind: str = "washing_exposure") -> pd.DataFrame:
    """Calendar quarter code of each exposure event."""
    ev = events[events["kind"] == kind].copy()
    dates = pd.to_datetime(ev["event_date"])
    ev["event_quarter"] = (dates.dt.year * 4 + (dates.dt.month - 1) // 3).to_numpy()
    return ev[["firm_id", "event_quarter"]]


def quarterly_returns_from_daily(returns: pd.DataFrame | None, market: pd.DataFrame | None,
                                 panel: ReturnPanel | None = None) -> pd.DataFrame:
    """Quarterly compounded abnormal returns from daily firm and market series."""
    if panel is None:
        panel = ReturnPanel.from_long(returns, market)
    d = pd.to_datetime(pd.Series(panel.calendar))
    codes = (d.dt.year * 4 + (d.dt.month - 1) // 3).to_numpy()
    return quarterly_abnormal_returns(panel, codes)


# ---------------------------------------------------------------------------
# H4: industry-year crowd-out


def hhi(revenues) -> float:
    r = np.asarray(revenues, dtype=float)
    r = r[np.isfinite(r) & (r > 0)]
    if len(r) == 0:
        return float("nan")
    s = r / r.sum()
    return float((s * s).sum())


def industry_year_frame(frame: pd.DataFrame, awrs: str = "awrs_std", patents: str | None = None) -> pd.DataFrame:
    """Industry-year aggregates: mean AWRS, R&D intensity, HHI, patent count
    and mean AI keyword density."""
    patents = patents or ("inv_pat_apps" if "inv_pat_apps" in frame and frame["inv_pat_apps"].notna().any()
                          else "inv_pat_delta")
    df = frame.copy()
    df["year"] = quarter_year(df["quarter"].to_numpy())
    if "industry_broad" not in df:
        df["industry_broad"] = df["industry"].astype(str).str[:1]
    firm_rev = df.groupby(["industry", "year", "firm_id"])["revenue"].sum().reset_index()
    h = firm_rev.groupby(["industry", "year"])["revenue"].apply(hhi).rename("hhi")
    agg = df.groupby(["industry", "year"]).agg(
        industry_broad=("industry_broad", "first"),
        awrs_mean=(awrs, "mean"),
        rd=("rd_comp", "sum"),
        rev=("revenue", "sum"),
        patents=(patents, "sum"),
        buzz=("base_tfidf", "mean") if "base_tfidf" in df else (awrs, "mean"),
        n_firms=("firm_id", "nunique"),
    )
    agg = agg.join(h)
    agg["rd_intensity"] = np.where(agg["rev"] > 0, agg["rd"] / agg["rev"].where(agg["rev"] > 0), np.nan)
    return agg.reset_index()


def estimate_h4(
    frame: pd.DataFrame,
    horizon: int = 1,
    subsample: str = "all",
    awrs: str = "awrs_std",
    patents: str | None = None,
    vcov: str = "hc1",
) -> RegressionResult:
    """ln(1 + patents at year t+h) on industry-mean AWRS, R&D intensity and
    HHI with broad-industry and year FE, at the industry-year level.

    ``subsample="high_buzz"`` keeps industries whose mean AI keyword density
    exceeds the cross-industry median.
    """
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    if subsample not in ("all", "high_buzz"):
        raise ValueError(f"unknown subsample {subsample!r}")
    iy = industry_year_frame(frame, awrs, patents)
    fut = iy[["industry", "year", "patents"]].copy()
    fut["year"] = fut["year"] - horizon
    iy = iy.merge(fut.rename(columns={"patents": "patents_fwd"}), on=["industry", "year"], how="left")
    iy["ln_patents_fwd"] = np.log1p(iy["patents_fwd"])
    if subsample == "high_buzz":
        buzz = iy.groupby("industry")["buzz"].mean()
        keep = buzz.index[buzz > buzz.median()]
        iy = iy[iy["industry"].isin(keep)]
    usable = iy.dropna(subset=["ln_patents_fwd", "awrs_mean", "rd_intensity", "hhi"])
    if usable.empty:
        raise EstimationError(f"H4 horizon {horizon} pushes the outcome beyond the sample")
    if usable["industry"].nunique() < 2 or usable["year"].nunique() < 3:
        raise EstimationError(
            f"H4 needs >= 2 industries and >= 3 years after the horizon shift, got "
            f"{usable['industry'].nunique()} and {usable['year'].nunique()}")
    res = fit(usable, "ln_patents_fwd", ["awrs_mean", "rd_intensity", "hhi"], ("industry_broad", "year"),
              cluster=None, vcov=vcov, label=f"H4 h={horizon} {subsample}")
    return res


# ---------------------------------------------------------------------------
# IV (provincial peer instrument)


def estimate_iv_table(
    frame: pd.DataFrame,
    controls: Sequence[str] | None = None,
    awrs: str = "awrs_std",
    mrmi: str = "mrmi",
    washing: str = "washing",
    weak_threshold: float = 16.38,
    include_bhar: bool = True,
) -> dict[str, IvResult]:
    """2SLS with the province/other-industry AWRS mean as instrument.

    Column (2): next-quarter MRMI on instrumented AWRS and lagged MRMI.
    Column (3): BHAR on instrumented AWRS and AWRS x Washing, the
    interaction instrumented by z x Washing.
    """
    ctrl = _controls(frame, controls)
    df = frame.copy()
    df["iv_awrs"] = build_province_iv(df, awrs)
    df["mrmi_f1"] = lag(df, mrmi, -1)
    df["mrmi_l1"] = lag(df, mrmi, 1)
    out = {"(2) MRMI t+1": estimate_iv(
        df, "mrmi_f1", [awrs], ["iv_awrs"], ["mrmi_l1", *ctrl], FIRM_QUARTER_FE, "firm_id",
        weak_threshold, "IV MRMI t+1")}
    if include_bhar and "bhar" in df:
        df["awrs_x_washing"] = df[awrs] * df[washing]
        df["iv_x_washing"] = df["iv_awrs"] * df[washing]
        out["(3) BHAR"] = estimate_iv(
            df, "bhar", [awrs, "awrs_x_washing"], ["iv_awrs", "iv_x_washing"], ["mrmi_l1", washing, *ctrl],
            FIRM_QUARTER_FE, "firm_id", weak_threshold, "IV BHAR")
    return out


# ---------------------------------------------------------------------------
# placebo: earlier technology themes


def current_washing_status(frame: pd.DataFrame, start: int, washing: str = "washing", share: float = 0.25) -> pd.Series:
    """Firm-level 0/1: share of evaluable quarters from ``start`` on with Washing = 1 is at least ``share``."""
    cur = frame[(frame["quarter"] >= start) & frame[washing].notna()]
    if cur.empty:
        raise DataError("no evaluable Washing observations in the current window")
    s = cur.groupby("firm_id")[washing].mean()
    return (s >= share).astype(int)


def placebo_historical(
    frame: pd.DataFrame,
    theme_scores: pd.DataFrame,
    pre_window: tuple[int, int],
    current_start: int | None = None,
    washing: str = "washing",
    share: float = 0.25,
) -> dict[str, RegressionResult]:
    """Firm-year theme disclosure intensity over ``pre_window`` (inclusive
    quarter codes) on current Washing status, industry and year FE, firm
    clusters. One column per theme plus a pooled column with theme FE.

    ``theme_scores`` has ``firm_id, quarter, theme, base_tfidf``.
    """
    lo, hi = pre_window
    ts = theme_scores[(theme_scores["quarter"] >= lo) & (theme_scores["quarter"] <= hi)].copy()
    if ts.empty:
        raise DataError(f"no theme scores inside the pre-window {pre_window}")
    status = current_washing_status(frame, hi + 1 if current_start is None else current_start, washing, share)
    ts["year"] = quarter_year(ts["quarter"].to_numpy())
    fy = ts.groupby(["firm_id", "year", "theme"], as_index=False)["base_tfidf"].mean()
    ind = frame.groupby("firm_id")["industry"].first()
    fy["industry"] = fy["firm_id"].map(ind)
    fy["washing_now"] = fy["firm_id"].map(status)
    out = {}
    for theme, g in fy.groupby("theme", sort=True):
        out[str(theme)] = fit(g, "base_tfidf", ["washing_now"], ("industry", "year"), cluster="firm_id",
                              label=f"placebo {theme}")
    if fy["theme"].nunique() > 1:
        out["pooled"] = fit(fy, "base_tfidf", ["washing_now"], ("industry", "year", "theme"), cluster="firm_id",
                            label="placebo pooled")
    return out
