"""Single-shock difference-in-differences with an event-time decomposition."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import pandas as pd

from ..errors import DataError, EstimationError
from ..panel import quantile_type7
from .linalg import RegressionResult, fit


@dataclass
class DidResult:
    outcome: str
    rule: str
    post_boundary: int
    att: float
    att_se: float
    att_result: RegressionResult
    event_result: RegressionResult
    event_time_coefs: pd.DataFrame
    pretrend_F: float
    pretrend_joint_p: float
    n_treated: int
    n_control: int
    notes: list[str] = field(default_factory=list)

    def to_dict(self, full_vcov: bool = False) -> dict:
        return {
            "outcome": self.outcome,
            "rule": self.rule,
            "post_boundary": self.post_boundary,
            "att": self.att,
            "att_se": self.att_se,
            "att_regression": self.att_result.to_dict(full_vcov),
            "event_regression": self.event_result.to_dict(full_vcov),
            "event_time_coefs": self.event_time_coefs.to_dict(orient="records"),
            "pretrend_F": self.pretrend_F,
            "pretrend_joint_p": self.pretrend_joint_p,
            "n_treated": self.n_treated,
            "n_control": self.n_control,
            "notes": list(self.notes),
        }


def _rel_name(k: int) -> str:
    return f"rel_m{-k}" if k < 0 else f"rel_p{k}"


def persistent_washing_treatment(
    frame: pd.DataFrame,
    post_boundary: int,
    rhetoric_quantile: float = 0.70,
    action_quantile: float = 0.50,
    awrs: str = "awrs",
    mrmi: str = "mrmi",
) -> pd.Series:
    """Firm-level treatment: pre-period mean AWRS at or above the industry's
    ``rhetoric_quantile`` and pre-period mean MRMI at or below its
    ``action_quantile``, quantiles taken across firms in the same industry."""
    pre = frame[frame["quarter"] < post_boundary]
    if pre.empty:
        raise DataError("no pre-period observations for the treatment rule")
    firm = pre.groupby("firm_id").agg(industry=("industry", "first"), a=(awrs, "mean"), m=(mrmi, "mean"))
    treat = pd.Series(0, index=firm.index, dtype=int)
    for _, g in firm.groupby("industry"):
        g = g.dropna(subset=["a", "m"])
        if len(g) == 0:
            continue
        hi = quantile_type7(g["a"].to_numpy(), rhetoric_quantile)
        lo = quantile_type7(g["m"].to_numpy(), action_quantile)
        treat.loc[g.index[(g["a"] >= hi) & (g["m"] <= lo)]] = 1
    return treat


def did_estimate(
    frame: pd.DataFrame,
    outcome: str,
    treat,
    post_boundary: int,
    controls: Sequence[str] = (),
    cluster: str = "firm_id",
    event_window: tuple[int, int] | None = None,
    rule_name: str | None = None,
) -> DidResult:
    """Two-way FE DID of ``outcome`` on Treat x Post plus event-time leads and lags.

    ``treat`` is a column name (any nonzero value marks the firm as treated)
    or a firm-indexed Series. ``post_boundary`` is the first post quarter;
    the base period is the quarter before it and its coefficient is pinned
    at 0. ``event_window`` bins relative times outside ``(lo, hi)`` into the
    endpoints; by default every relative quarter gets its own indicator.
    """
    if isinstance(treat, str):
        if treat not in frame:
            raise DataError(f"treatment column {treat!r} not in panel")
        rule = rule_name or treat
        tr = frame.groupby("firm_id")[treat].max().fillna(0).astype(bool).astype(int)
    else:
        rule = rule_name or getattr(treat, "name", None) or "supplied treatment"
        tr = pd.Series(treat).astype(int)
    df = frame[["firm_id", "quarter", outcome, *controls] + ([cluster] if cluster not in ("firm_id", "quarter") else [])].copy()
    df = df.dropna(subset=[outcome, *controls]).reset_index(drop=True)
    df["treat"] = df["firm_id"].map(tr).fillna(0).astype(int)
    firms = df.groupby("firm_id")["treat"].first()
    n_t, n_c = int((firms == 1).sum()), int((firms == 0).sum())
    if n_t == 0:
        raise DataError(f"treatment rule {rule!r} matches zero firms")
    if n_c == 0:
        raise DataError(f"treatment rule {rule!r} leaves no control firms")
    quarters = np.sort(df["quarter"].unique())
    n_pre = int((quarters < post_boundary).sum())
    n_post = int((quarters >= post_boundary).sum())
    if n_pre < 4 or n_post < 2:
        raise EstimationError(f"DID needs >= 4 pre and >= 2 post periods, got {n_pre} and {n_post}")

    df["treat_post"] = df["treat"] * (df["quarter"] >= post_boundary).astype(int)
    fe = ("firm_id", "quarter")
    att_res = fit(df, outcome, ["treat_post", *controls], fe, cluster=cluster, label=f"DID {outcome}")

    rel = (df["quarter"] - post_boundary).to_numpy()
    lo, hi = int(rel.min()), int(rel.max())
    if event_window is not None:
        lo, hi = max(lo, event_window[0]), min(hi, event_window[1])
        rel = np.clip(rel, lo, hi)
    if lo > -2:
        raise EstimationError("event window has no lead periods before the base quarter")
    ks = [k for k in range(lo, hi + 1) if k != -1]
    names = [_rel_name(k) for k in ks]
    treat_arr = df["treat"].to_numpy()
    for k, nm in zip(ks, names):
        df[nm] = ((rel == k) & (treat_arr == 1)).astype(float)
    ev_res = fit(df, outcome, [*names, *controls], fe, cluster=cluster, label=f"DID event-time {outcome}")

    rows = []
    for k in range(lo, hi + 1):
        if k == -1:
            rows.append({"rel_quarter": -1, "coef": 0.0, "se": 0.0, "ci_low": 0.0, "ci_high": 0.0, "is_base": True})
            continue
        nm = _rel_name(k)
        c, s = ev_res[nm], ev_res.se_of(nm)
        rows.append({"rel_quarter": k, "coef": c, "se": s, "ci_low": c - 1.96 * s, "ci_high": c + 1.96 * s,
                     "is_base": False})
    leads = [_rel_name(k) for k in ks if k <= -2]
    F, p = ev_res.wald_test(leads)
    notes = [f"pretrend test: joint F on {len(leads)} lead(s) with F({len(leads)}, {ev_res.df_resid})"]
    if cluster and len(leads) >= n_t:
        notes.append(f"pretrend test has {len(leads)} restrictions but only {n_t} treated firms; "
                     "the clustered covariance of the leads is near singular, bin the event window")
    return DidResult(
        outcome=outcome, rule=rule, post_boundary=post_boundary,
        att=att_res["treat_post"], att_se=att_res.se_of("treat_post"),
        att_result=att_res, event_result=ev_res, event_time_coefs=pd.DataFrame(rows),
        pretrend_F=F, pretrend_joint_p=p, n_treated=n_t, n_control=n_c, notes=notes,
    )
