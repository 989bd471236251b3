"""Least squares, fixed-effect absorption and robust covariance."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import pandas as pd
import scipy.linalg
import scipy.sparse as sp
from scipy import stats

from ..errors import CollinearityError, ConvergenceError, DataError, EstimationError

RANK_TOL = 1e-10


def _as_2d(x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    return x[:, None] if x.ndim == 1 else x


@dataclass
class OlsFit:
    coef: np.ndarray
    resid: np.ndarray
    fitted: np.ndarray
    xtx_inv: np.ndarray
    rank: int


def ols(y, X, intercept: bool = False, names: Sequence[str] | None = None) -> OlsFit:
    """Least squares via column-pivoted QR.

    Raises :class:`CollinearityError` naming the dependent columns when the
    scaled design has numerical rank below its width.
    """
    y = np.asarray(y, dtype=float)
    X = _as_2d(X)
    if intercept:
        X = np.column_stack([np.ones(len(y)), X])
        names = ["const"] + list(names) if names is not None else None
    n, k = X.shape
    if names is None:
        names = [f"x{i}" for i in range(k)]
    if n <= k:
        raise EstimationError(f"need more observations ({n}) than regressors ({k})")
    norms = np.sqrt((X * X).sum(axis=0))
    zero = norms == 0
    if zero.any():
        raise CollinearityError([names[i] for i in np.flatnonzero(zero)])
    Xs = X / norms
    Q, R, piv = scipy.linalg.qr(Xs, mode="economic", pivoting=True)
    d = np.abs(np.diag(R))
    rank = int(np.sum(d > RANK_TOL * d[0]))
    if rank < k:
        raise CollinearityError([names[i] for i in sorted(piv[rank:])])
    z = scipy.linalg.solve_triangular(R, Q.T @ y)
    coef_s = np.empty(k)
    coef_s[piv] = z
    coef = coef_s / norms
    fitted = X @ coef
    resid = y - fitted
    rinv = scipy.linalg.solve_triangular(R, np.eye(k))
    xtx_inv_s = np.empty((k, k))
    tmp = rinv @ rinv.T
    xtx_inv_s[np.ix_(piv, piv)] = tmp
    xtx_inv = xtx_inv_s / np.outer(norms, norms)
    return OlsFit(coef, resid, fitted, xtx_inv, rank)


# ---------------------------------------------------------------------------
# fixed effects


def _indicator(codes: np.ndarray) -> sp.csr_matrix:
    n = len(codes)
    g = int(codes.max()) + 1 if n else 0
    return sp.csr_matrix((np.ones(n), (np.arange(n), codes)), shape=(n, g))


def _dense_codes(labels) -> np.ndarray:
    codes, _ = pd.factorize(np.asarray(labels), sort=True)
    if (codes < 0).any():
        raise DataError("fixed-effect or cluster labels contain missing values")
    return codes


def demean(M, fe_codes: Sequence[np.ndarray], tol: float = 1e-10, max_sweeps: int = 1000) -> tuple[np.ndarray, int]:
    """Project out any number of fixed-effect dimensions by alternating
    within-group demeaning, until the largest change in a sweep is below
    ``tol``. Returns the residual matrix and the sweep count."""
    M = np.array(_as_2d(M), dtype=float)
    dims = []
    for c in fe_codes:
        c = np.asarray(c)
        D = _indicator(c)
        cnt = np.asarray(D.sum(axis=0)).ravel()
        dims.append((D, cnt))
    if not dims:
        return M, 0
    if len(dims) == 1:
        D, cnt = dims[0]
        M -= D @ ((D.T @ M) / cnt[:, None])
        return M, 1
    for sweep in range(1, max_sweeps + 1):
        prev = M.copy()
        for D, cnt in dims:
            M -= D @ ((D.T @ M) / cnt[:, None])
        change = float(np.max(np.abs(M - prev))) if M.size else 0.0
        if change < tol:
            return M, sweep
    raise ConvergenceError(max_sweeps, change)


def connected_components(a: np.ndarray, b: np.ndarray) -> int:
    """Components of the bipartite graph linking levels of ``a`` and ``b``
    (union-find over observed pairs)."""
    ca, cb = _dense_codes(a), _dense_codes(b)
    na = int(ca.max()) + 1
    parent = list(range(na + int(cb.max()) + 1))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    pairs = np.unique(np.column_stack([ca, cb + na]), axis=0)
    for i, j in pairs:
        ri, rj = find(int(i)), find(int(j))
        if ri != rj:
            parent[ri] = rj
    return len({find(i) for i in range(len(parent))})


def absorbed_rank(fe_codes: Sequence[np.ndarray]) -> int:
    """Number of linearly independent absorbed effects (constant included)."""
    if not fe_codes:
        return 0
    sizes = [len(np.unique(c)) for c in fe_codes]
    if len(fe_codes) == 1:
        return sizes[0]
    if len(fe_codes) == 2:
        return sizes[0] + sizes[1] - connected_components(fe_codes[0], fe_codes[1])
    # beyond two dimensions assume a connected design
    return sum(sizes) - (len(sizes) - 1)


@dataclass
class WithinResult:
    y: np.ndarray
    X: np.ndarray
    absorbed: int
    components: int
    sweeps: int


def within_twoway(y, X, firm_ids, time_ids, tol: float = 1e-10, max_sweeps: int = 1000) -> WithinResult:
    """Two-way (firm and period) within transformation of ``y`` and ``X``."""
    firm = _dense_codes(firm_ids)
    time = _dense_codes(time_ids)
    y = np.asarray(y, dtype=float)
    X = _as_2d(X)
    M, sweeps = demean(np.column_stack([y, X]), [firm, time], tol, max_sweeps)
    comps = connected_components(firm, time)
    absorbed = len(np.unique(firm)) + len(np.unique(time)) - comps
    return WithinResult(M[:, 0], M[:, 1:], absorbed, comps, sweeps)


# ---------------------------------------------------------------------------
# covariance


def cluster_vcov(X, resid, cluster_ids, dof: int, xtx_inv=None) -> np.ndarray:
    """CR1 sandwich ``(X'X)^-1 (sum_g X_g'u_g u_g'X_g) (X'X)^-1`` scaled by
    ``G/(G-1) * (N-1)/(N-K)``, with ``K = dof`` counting absorbed effects."""
    X = _as_2d(X)
    u = np.asarray(resid, dtype=float)
    codes = _dense_codes(cluster_ids)
    G = int(codes.max()) + 1
    if G < 2:
        raise EstimationError("cluster-robust covariance needs at least two clusters")
    n = len(u)
    if xtx_inv is None:
        xtx_inv = np.linalg.inv(X.T @ X)
    scores = _indicator(codes).T @ (X * u[:, None])
    meat = scores.T @ scores
    factor = G / (G - 1) * (n - 1) / (n - dof)
    v = factor * (xtx_inv @ meat @ xtx_inv)
    return (v + v.T) / 2


def hc1_vcov(X, resid, dof: int, xtx_inv=None) -> np.ndarray:
    X = _as_2d(X)
    u = np.asarray(resid, dtype=float)
    n = len(u)
    if xtx_inv is None:
        xtx_inv = np.linalg.inv(X.T @ X)
    xu = X * u[:, None]
    v = n / (n - dof) * (xtx_inv @ (xu.T @ xu) @ xtx_inv)
    return (v + v.T) / 2


def iid_vcov(resid, dof: int, xtx_inv) -> np.ndarray:
    u = np.asarray(resid, dtype=float)
    s2 = u @ u / (len(u) - dof)
    return s2 * xtx_inv


# ---------------------------------------------------------------------------
# regression driver


@dataclass
class RegressionResult:
    names: list[str]
    coef: np.ndarray
    vcov: np.ndarray
    n_obs: int
    dof: int
    df_resid: int
    r2: float
    adj_r2: float
    r2_within: float | None = None
    fixed_effects: tuple = ()
    cluster: str | None = None
    n_clusters: int | None = None
    label: str = ""
    notes: list = field(default_factory=list)
    lag_sum: float | None = None
    lag_sum_se: float | None = None
    outcome: str = ""

    @property
    def se(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diag(self.vcov), 0, None))

    @property
    def t_stats(self) -> np.ndarray:
        with np.errstate(divide="ignore", invalid="ignore"):
            return self.coef / self.se

    @property
    def p_values(self) -> np.ndarray:
        return 2 * stats.t.sf(np.abs(self.t_stats), self.df_resid)

    def index(self, name: str) -> int:
        return self.names.index(name)

    def __getitem__(self, name: str) -> float:
        return float(self.coef[self.index(name)])

    def se_of(self, name: str) -> float:
        return float(self.se[self.index(name)])

    def t_of(self, name: str) -> float:
        return float(self.t_stats[self.index(name)])

    def p_of(self, name: str) -> float:
        return float(self.p_values[self.index(name)])

    def linear_combination(self, weights: dict[str, float]) -> tuple[float, float]:
        w = np.zeros(len(self.names))
        for k, v in weights.items():
            w[self.index(k)] = v
        return float(w @ self.coef), float(math.sqrt(max(w @ self.vcov @ w, 0.0)))

    def wald_test(self, names: Sequence[str]) -> tuple[float, float]:
        """Joint zero test; returns (F statistic, p-value) with F(q, df_resid)."""
        idx = [self.index(n) for n in names]
        b = self.coef[idx]
        V = self.vcov[np.ix_(idx, idx)]
        q = len(idx)
        W = float(b @ np.linalg.solve(V, b))
        F = W / q
        return F, float(stats.f.sf(F, q, self.df_resid))

    def summary_rows(self) -> list[dict]:
        return [
            {"term": n, "coef": float(c), "se": float(s), "t": float(t), "p": float(p)}
            for n, c, s, t, p in zip(self.names, self.coef, self.se, self.t_stats, self.p_values)
        ]

    def to_dict(self, full_vcov: bool = False) -> dict:
        out = {
            "label": self.label,
            "outcome": self.outcome,
            "terms": self.summary_rows(),
            "n_obs": self.n_obs,
            "dof_model": self.dof,
            "df_resid": self.df_resid,
            "r2": self.r2,
            "adj_r2": self.adj_r2,
            "r2_within": self.r2_within,
            "fixed_effects": list(self.fixed_effects),
            "cluster": self.cluster,
            "n_clusters": self.n_clusters,
            "notes": list(self.notes),
        }
        if self.lag_sum is not None:
            out["lag_sum"] = self.lag_sum
            out["lag_sum_se"] = self.lag_sum_se
        if full_vcov:
            out["vcov"] = self.vcov.tolist()
        return out


def fit(
    frame: pd.DataFrame,
    outcome: str,
    regressors: Sequence[str],
    fixed_effects: Sequence[str] = (),
    cluster: str | None = None,
    intercept: bool = True,
    vcov: str | None = None,
    label: str = "",
    tol: float = 1e-10,
) -> RegressionResult:
    """Regress ``outcome`` on ``regressors`` absorbing ``fixed_effects``.

    Rows with a missing outcome, regressor, effect or cluster label are
    dropped. With absorbed effects and ``intercept=True`` the constant is
    reported as ``mean(y) - mean(X) b``. Covariance is CR1 when ``cluster``
    is given, else HC1 (``vcov`` may force ``"iid"`` or ``"hc1"``).
    """
    regressors = list(regressors)
    cols = [outcome] + regressors + list(fixed_effects) + ([cluster] if cluster else [])
    missing = [c for c in dict.fromkeys(cols) if c not in frame]
    if missing:
        raise DataError(f"missing column(s) for regression: {missing}")
    sub = frame[list(dict.fromkeys(cols))]
    keep = sub[[outcome] + regressors].notna().all(axis=1) & sub[list(fixed_effects) + ([cluster] if cluster else [])].notna().all(axis=1)
    sub = sub.loc[keep]
    n = len(sub)
    if n == 0:
        raise EstimationError(f"{label or outcome}: no complete observations")
    y = sub[outcome].to_numpy(dtype=float)
    X = sub[regressors].to_numpy(dtype=float) if regressors else np.empty((n, 0))
    fe_codes = [_dense_codes(sub[f].to_numpy()) for f in fixed_effects]
    notes: list[str] = []
    if fe_codes:
        M, sweeps = demean(np.column_stack([y, X]), fe_codes, tol=tol)
        y_dm, X_dm = M[:, 0], M[:, 1:]
        orig_norm = np.sqrt((X * X).sum(axis=0))
        dm_norm = np.sqrt((X_dm * X_dm).sum(axis=0))
        absorbed_cols = [regressors[i] for i in np.flatnonzero(dm_norm <= 1e-9 * np.maximum(orig_norm, 1e-300))]
        if absorbed_cols:
            raise CollinearityError(absorbed_cols, f"regressor(s) absorbed by fixed effects: {', '.join(absorbed_cols)}")
        k_abs = absorbed_rank(fe_codes)
        if intercept:
            y_fit = y_dm + y.mean()
            X_fit = np.column_stack([np.ones(n), X_dm + X.mean(axis=0)])
            names = ["const"] + regressors
            dof = X_fit.shape[1] + k_abs - 1
        else:
            y_fit, X_fit, names = y_dm, X_dm, regressors
            dof = X_fit.shape[1] + k_abs
    else:
        y_dm = y - y.mean()
        if intercept:
            X_fit = np.column_stack([np.ones(n), X])
            names = ["const"] + regressors
        else:
            X_fit, names = X, regressors
        y_fit = y
        dof = X_fit.shape[1]
    if n <= dof:
        raise EstimationError(f"{label or outcome}: {n} observations for {dof} parameters")
    res = ols(y_fit, X_fit, names=names)
    u = res.resid
    n_clusters = None
    if cluster is not None and vcov in (None, "cluster"):
        ccodes = _dense_codes(sub[cluster].to_numpy())
        n_clusters = int(ccodes.max()) + 1
        V = cluster_vcov(X_fit, u, ccodes, dof, res.xtx_inv)
        df_resid = n_clusters - 1
    elif vcov in (None, "hc1"):
        V = hc1_vcov(X_fit, u, dof, res.xtx_inv)
        df_resid = n - dof
    elif vcov == "iid":
        V = iid_vcov(u, dof, res.xtx_inv)
        df_resid = n - dof
    else:
        raise ValueError(f"unknown vcov {vcov!r}")
    ssr = float(u @ u)
    tss = float(((y - y.mean()) ** 2).sum())
    r2 = 1 - ssr / tss if tss > 0 else float("nan")
    adj = 1 - (1 - r2) * (n - 1) / (n - dof) if tss > 0 else float("nan")
    r2w = None
    if fe_codes:
        tss_w = float(y_dm @ y_dm)
        r2w = 1 - ssr / tss_w if tss_w > 0 else float("nan")
    return RegressionResult(
        names=names, coef=res.coef, vcov=V, n_obs=n, dof=dof, df_resid=df_resid,
        r2=r2, adj_r2=adj, r2_within=r2w, fixed_effects=tuple(fixed_effects), cluster=cluster,
        n_clusters=n_clusters, label=label, notes=notes, outcome=outcome,
    )
