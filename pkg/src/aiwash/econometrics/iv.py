"""Two-stage least squares with absorbed fixed effects and a provincial peer instrument."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import pandas as pd

from ..errors import CollinearityError, DataError, EstimationError
from .linalg import (
    RegressionResult,
    _dense_codes,
    absorbed_rank,
    cluster_vcov,
    demean,
    hc1_vcov,
    ols,
)

WEAK_IV_THRESHOLD = 16.38


@dataclass
class IvResult:
    """Second-stage estimates plus first-stage diagnostics.

    ``first_stage`` holds one regression per endogenous regressor;
    ``first_stage_F`` is the robust Wald F on the excluded instruments
    (the minimum across equations when there are several).
    """

    second: RegressionResult
    first_stage: list[RegressionResult]
    first_stage_F: float
    first_stage_F_each: list[float]
    weak_flag: bool
    weak_threshold: float
    instruments: list[str]
    endogenous: list[str]
    notes: list[str] = field(default_factory=list)

    def to_dict(self, full_vcov: bool = False) -> dict:
        return {
            "second_stage": self.second.to_dict(full_vcov),
            "first_stage": [fs.to_dict(full_vcov) for fs in self.first_stage],
            "first_stage_F": self.first_stage_F,
            "first_stage_F_each": list(self.first_stage_F_each),
            "weak_flag": self.weak_flag,
            "weak_threshold": self.weak_threshold,
            "instruments": list(self.instruments),
            "endogenous": list(self.endogenous),
            "notes": list(self.notes),
        }


def _cols(a, n) -> np.ndarray:
    if a is None:
        return np.empty((n, 0))
    a = np.asarray(a, dtype=float)
    return a.reshape(n, -1) if a.ndim == 1 else a


def _vcov(X, u, dof, bread, codes):
    if codes is not None:
        g = int(codes.max()) + 1
        return cluster_vcov(X, u, codes, dof, bread), g - 1, g
    return hc1_vcov(X, u, dof, bread), len(u) - dof, None


def iv_2sls(
    y,
    X_exog,
    X_endog,
    Z,
    clusters=None,
    fe=None,
    intercept: bool = True,
    names_exog: Sequence[str] | None = None,
    names_endog: Sequence[str] | None = None,
    names_inst: Sequence[str] | None = None,
    weak_threshold: float = WEAK_IV_THRESHOLD,
    outcome: str = "y",
    label: str = "",
) -> IvResult:
    """2SLS of ``y`` on ``[X_endog, X_exog]`` using excluded instruments ``Z``.

    ``fe`` is an optional list of label arrays absorbed by demeaning every
    block jointly. Without ``fe`` a constant is added when ``intercept``.
    The covariance is the sandwich built on the projected regressors and
    structural residuals ``y - X b``, CR1 when ``clusters`` is given.
    """
    y = np.asarray(y, dtype=float)
    n = len(y)
    Xx, Xe, Zx = _cols(X_exog, n), _cols(X_endog, n), _cols(Z, n)
    n_ex, n_en, n_z = Xx.shape[1], Xe.shape[1], Zx.shape[1]
    names_exog = list(names_exog or [f"x{i}" for i in range(n_ex)])
    names_endog = list(names_endog or [f"endog{i}" for i in range(n_en)])
    names_inst = list(names_inst or [f"z{i}" for i in range(n_z)])
    if n_en == 0:
        raise EstimationError("no endogenous regressor given")
    if n_z < n_en:
        raise EstimationError(f"under-identified: {n_z} instrument(s) for {n_en} endogenous regressor(s)")
    k_abs = 0
    fe_names: tuple = ()
    if fe:
        codes = [_dense_codes(np.asarray(f)) for f in fe]
        M, _ = demean(np.column_stack([y, Xx, Xe, Zx]), codes)
        y, Xx, Xe, Zx = M[:, 0], M[:, 1:1 + n_ex], M[:, 1 + n_ex:1 + n_ex + n_en], M[:, 1 + n_ex + n_en:]
        k_abs = absorbed_rank(codes)
        fe_names = tuple(f"fe{i}" for i in range(len(fe)))
    elif intercept:
        Xx = np.column_stack([np.ones(n), Xx])
        names_exog = ["const"] + names_exog
        n_ex += 1
    ccodes = _dense_codes(np.asarray(clusters)) if clusters is not None else None

    W = np.column_stack([Zx, Xx])
    w_names = names_inst + names_exog
    first, F_each = [], []
    X_hat_endog = np.empty_like(Xe)
    for j in range(n_en):
        try:
            fs = ols(Xe[:, j], W, names=w_names)
        except CollinearityError as exc:
            raise EstimationError(f"instrument matrix is rank deficient: {exc}") from exc
        X_hat_endog[:, j] = Xe[:, j] - fs.resid
        dof_fs = W.shape[1] + k_abs
        V, dfr, g = _vcov(W, fs.resid, dof_fs, fs.xtx_inv, ccodes)
        r = RegressionResult(
            names=w_names, coef=fs.coef, vcov=V, n_obs=n, dof=dof_fs, df_resid=dfr,
            r2=float("nan"), adj_r2=float("nan"), r2_within=None, fixed_effects=fe_names,
            cluster="cluster" if ccodes is not None else None, n_clusters=g,
            label=f"{label} first stage: {names_endog[j]}".strip(), notes=[], outcome=names_endog[j],
        )
        try:
            F, _ = r.wald_test(names_inst)
        except np.linalg.LinAlgError:
            F = 0.0
        first.append(r)
        F_each.append(max(float(F), 0.0))

    X_hat = np.column_stack([X_hat_endog, Xx])
    X = np.column_stack([Xe, Xx])
    names = names_endog + names_exog
    try:
        ss = ols(y, X_hat, names=names)
    except CollinearityError as exc:
        raise EstimationError(f"under-identified: first-stage fitted values are collinear ({exc})") from exc
    b = ss.coef
    u = y - X @ b
    dof = X.shape[1] + k_abs
    if n <= dof:
        raise EstimationError(f"{label or outcome}: {n} observations for {dof} parameters")
    V, dfr, g = _vcov(X_hat, u, dof, ss.xtx_inv, ccodes)
    ssr = float(u @ u)
    yc = y - y.mean()
    tss = float(yc @ yc)
    r2 = 1 - ssr / tss if tss > 0 else float("nan")
    notes = []
    if n_en > 1:
        notes.append("first_stage_F is the minimum of per-equation robust Wald F statistics")
    second = RegressionResult(
        names=names, coef=b, vcov=V, n_obs=n, dof=dof, df_resid=dfr, r2=r2,
        adj_r2=1 - (1 - r2) * (n - 1) / (n - dof) if tss > 0 else float("nan"),
        r2_within=r2 if fe else None, fixed_effects=fe_names,
        cluster="cluster" if ccodes is not None else None, n_clusters=g,
        label=label, notes=list(notes), outcome=outcome,
    )
    F_min = min(F_each)
    return IvResult(
        second=second, first_stage=first, first_stage_F=F_min, first_stage_F_each=F_each,
        weak_flag=bool(F_min < weak_threshold), weak_threshold=weak_threshold,
        instruments=names_inst, endogenous=names_endog, notes=notes,
    )


def estimate_iv(
    frame: pd.DataFrame,
    outcome: str,
    endog: Sequence[str],
    instruments: Sequence[str],
    exog: Sequence[str] = (),
    fixed_effects: Sequence[str] = ("firm_id", "quarter"),
    cluster: str | None = "firm_id",
    weak_threshold: float = WEAK_IV_THRESHOLD,
    label: str = "",
) -> IvResult:
    """Frame-level 2SLS; rows with any missing input are dropped."""
    cols = [outcome, *endog, *instruments, *exog, *fixed_effects] + ([cluster] if cluster else [])
    missing = [c for c in dict.fromkeys(cols) if c not in frame]
    if missing:
        raise DataError(f"missing column(s) for IV regression: {missing}")
    sub = frame[list(dict.fromkeys(cols))].dropna()
    if len(sub) == 0:
        raise EstimationError(f"{label or outcome}: no complete observations")
    res = iv_2sls(
        sub[outcome].to_numpy(float),
        sub[list(exog)].to_numpy(float) if exog else None,
        sub[list(endog)].to_numpy(float),
        sub[list(instruments)].to_numpy(float),
        clusters=sub[cluster].to_numpy() if cluster else None,
        fe=[sub[f].to_numpy() for f in fixed_effects] or None,
        names_exog=list(exog), names_endog=list(endog), names_inst=list(instruments),
        weak_threshold=weak_threshold, outcome=outcome, label=label,
    )
    res.second.fixed_effects = tuple(fixed_effects)
    res.second.cluster = cluster
    for fs in res.first_stage:
        fs.fixed_effects = tuple(fixed_effects)
        fs.cluster = cluster
    return res


def build_province_iv(frame: pd.DataFrame, value: str = "awrs") -> np.ndarray:
    """Mean of ``value`` over firms in the same province and quarter but a
    different industry. NaN when that donor set is empty."""
    for c in ("province", "industry", "quarter", value):
        if c not in frame:
            raise DataError(f"province instrument needs column {c!r}")
    v = frame[value].to_numpy(dtype=float)
    ok = ~np.isnan(v)
    d = pd.DataFrame({"p": frame["province"].to_numpy(), "i": frame["industry"].to_numpy(),
                      "q": frame["quarter"].to_numpy(), "v": np.where(ok, v, 0.0), "c": ok.astype(float)})
    pq = d.groupby(["p", "q"])[["v", "c"]].transform("sum")
    piq = d.groupby(["p", "i", "q"])[["v", "c"]].transform("sum")
    s = pq["v"].to_numpy() - piq["v"].to_numpy()
    c = pq["c"].to_numpy() - piq["c"].to_numpy()
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(c > 0, s / np.where(c > 0, c, 1.0), np.nan)
    return out
