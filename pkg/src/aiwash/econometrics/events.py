"""Market-adjusted event returns: CAR over short windows, BHAR over long horizons."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import pandas as pd

from ..errors import DataError


def _aligned(firm_returns: pd.Series, market_returns: pd.Series) -> tuple[pd.Index, np.ndarray, np.ndarray]:
    cal = market_returns.index
    if market_returns.isna().any():
        raise DataError("market return series has gaps")
    firm = firm_returns.reindex(cal).to_numpy(dtype=float)
    return cal, firm, market_returns.to_numpy(dtype=float)


def event_position(calendar: pd.Index, event_date) -> int:
    """Index of the first trading day on or after ``event_date``."""
    pos = int(calendar.searchsorted(event_date, side="left"))
    if pos >= len(calendar):
        raise DataError(f"event date {event_date} is after the end of the return series")
    return pos


def car(firm_returns: pd.Series, market_returns: pd.Series, event_date, window=(-3, 3)) -> float:
    """Sum of ``r_firm - r_market`` over trading days ``[event + a, event + b]``.

    Both series are indexed by date; the market series defines the trading
    calendar. Raises :class:`DataError` if the window leaves the calendar or
    the firm series has a gap inside it.
    """
    a, b = window
    cal, rf, rm = _aligned(firm_returns, market_returns)
    pos = event_position(cal, event_date)
    lo, hi = pos + a, pos + b
    if lo < 0 or hi >= len(cal):
        raise DataError(f"window {window} around {event_date} is not covered by the return series")
    seg = rf[lo:hi + 1]
    if np.isnan(seg).any():
        raise DataError(f"firm return gap inside window {window} around {event_date}")
    return math.fsum(seg - rm[lo:hi + 1])


def bhar(firm_returns: pd.Series, market_returns: pd.Series, event_date, horizon: int = 180) -> float:
    """``prod(1 + r_firm) - prod(1 + r_market)`` over the ``horizon`` trading
    days after the event date. Returns NaN when the horizon is incomplete."""
    cal, rf, rm = _aligned(firm_returns, market_returns)
    pos = event_position(cal, event_date)
    lo, hi = pos + 1, pos + horizon
    if hi >= len(cal):
        return float("nan")
    seg = rf[lo:hi + 1]
    if np.isnan(seg).any():
        return float("nan")
    return float(np.prod(1.0 + seg) - np.prod(1.0 + rm[lo:hi + 1]))


# ---------------------------------------------------------------------------
# batch versions on a firms x days matrix


@dataclass
class ReturnPanel:
    """Daily returns on a common trading calendar.

    ``returns`` is ``n_firms x n_days`` (NaN where a firm has no return),
    ``market`` is length ``n_days``.
    """

    firms: pd.Index
    calendar: pd.Index
    returns: np.ndarray
    market: np.ndarray

    @classmethod
    def from_long(cls, returns: pd.DataFrame, market: pd.DataFrame) -> "ReturnPanel":
        if market is None or len(market) == 0:
            raise DataError("market return series is missing")
        mk = market.sort_values("date")
        if mk["return"].isna().any():
            raise DataError("market return series has gaps")
        cal = pd.Index(mk["date"].to_numpy())
        if cal.has_duplicates:
            raise DataError("market return series has duplicate dates")
        wide = returns.pivot(index="firm_id", columns="date", values="return").reindex(columns=cal)
        return cls(wide.index, cal, wide.to_numpy(dtype=float), mk["return"].to_numpy(dtype=float))

    def positions(self, dates) -> np.ndarray:
        pos = self.calendar.searchsorted(np.asarray(dates), side="left")
        return np.where(pos >= len(self.calendar), -1, pos)

    def firm_rows(self, firm_ids) -> np.ndarray:
        return self.firms.get_indexer(np.asarray(firm_ids))


def car_batch(panel: ReturnPanel, firm_rows, event_pos, window=(-3, 3)) -> np.ndarray:
    """Vectorized CAR; NaN when the window is uncovered or has a gap."""
    a, b = window
    firm_rows = np.asarray(firm_rows)
    event_pos = np.asarray(event_pos)
    n_days = len(panel.calendar)
    out = np.full(len(firm_rows), np.nan)
    ok = (firm_rows >= 0) & (event_pos >= 0) & (event_pos + a >= 0) & (event_pos + b < n_days)
    if not ok.any():
        return out
    offs = np.arange(a, b + 1)
    rows = firm_rows[ok][:, None]
    cols = event_pos[ok][:, None] + offs[None, :]
    ar = panel.returns[rows, cols] - panel.market[cols]
    vals = ar.sum(axis=1)
    out[ok] = vals
    return out


def bhar_batch(panel: ReturnPanel, firm_rows, event_pos, horizon: int = 180) -> np.ndarray:
    """Vectorized BHAR over the ``horizon`` days after each event; NaN if incomplete."""
    firm_rows = np.asarray(firm_rows)
    event_pos = np.asarray(event_pos)
    n_days = len(panel.calendar)
    out = np.full(len(firm_rows), np.nan)
    ok = (firm_rows >= 0) & (event_pos >= 0) & (event_pos + horizon < n_days)
    if not ok.any():
        return out
    # cumulative log growth with NaN treated as zero; gaps are counted separately
    lf = np.log1p(panel.returns)
    zero = np.zeros((lf.shape[0], 1))
    nan_cnt = np.concatenate([zero, np.cumsum(np.isnan(lf), axis=1)], axis=1)
    cf = np.concatenate([zero, np.cumsum(np.nan_to_num(lf), axis=1)], axis=1)
    cm = np.concatenate([[0.0], np.cumsum(np.log1p(panel.market))])
    r = firm_rows[ok]
    s = event_pos[ok] + 1
    e = event_pos[ok] + horizon + 1
    gaps = nan_cnt[r, e] - nan_cnt[r, s]
    firm_growth = np.exp(cf[r, e] - cf[r, s])
    mkt_growth = np.exp(cm[e] - cm[s])
    vals = firm_growth - mkt_growth
    vals[gaps > 0] = np.nan
    out[ok] = vals
    return out


def quarterly_abnormal_returns(panel: ReturnPanel, days_to_quarter: np.ndarray) -> pd.DataFrame:
    """Compounded firm minus market return per firm and calendar quarter.

    ``days_to_quarter`` maps each calendar day to its quarter code.
    """
    q = np.asarray(days_to_quarter)
    uq = np.unique(q)
    lf = np.log1p(panel.returns)
    lm = np.log1p(panel.market)
    rows = []
    for code in uq:
        cols = q == code
        seg = lf[:, cols]
        full = ~np.isnan(seg).any(axis=1)
        ar = np.expm1(seg.sum(axis=1)) - np.expm1(lm[cols].sum())
        ar[~full] = np.nan
        rows.append(pd.DataFrame({"firm_id": panel.firms, "quarter": code, "ret_adj": ar}))
    return pd.concat(rows, ignore_index=True)


def event_path(quarterly: pd.DataFrame, events: pd.DataFrame, window: int = 8) -> pd.DataFrame:
    """Mean abnormal return by quarter relative to each event, net of the
    same calendar quarter's mean for firms that never have an event.

    ``quarterly`` has ``firm_id, quarter, ret_adj``; ``events`` has
    ``firm_id, event_quarter``. Returns one row per relative quarter in
    ``[-window, window]`` with mean, standard error, 95% bounds and count.
    """
    if events is None or len(events) == 0:
        raise DataError("no events supplied for the event path")
    ev = events.groupby("firm_id", as_index=False)["event_quarter"].min()
    treated = set(ev["firm_id"])
    ctrl = quarterly[~quarterly["firm_id"].isin(treated)]
    base = ctrl.groupby("quarter")["ret_adj"].mean().rename("ctrl_mean")
    q = quarterly.merge(ev, on="firm_id", how="inner").merge(base, on="quarter", how="left")
    q["rel"] = q["quarter"] - q["event_quarter"]
    q["diff"] = q["ret_adj"] - q["ctrl_mean"]
    q = q[(q["rel"] >= -window) & (q["rel"] <= window) & q["diff"].notna()]
    rows = []
    for k in range(-window, window + 1):
        d = q.loc[q["rel"] == k, "diff"].to_numpy()
        n = len(d)
        mean = float(d.mean()) if n else float("nan")
        se = float(d.std(ddof=1) / math.sqrt(n)) if n > 1 else float("nan")
        rows.append({"rel_quarter": k, "mean_ar": mean, "se": se,
                     "ci_low": mean - 1.96 * se, "ci_high": mean + 1.96 * se, "n_events": n})
    return pd.DataFrame(rows)
