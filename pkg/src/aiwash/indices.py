"""Rhetoric (AWRS), real-investment (MRMI) and washing indices.

AWRS multiplies keyword density by ``1 + exaggeration`` and is z-scored per
quarter. MRMI is the first principal component of three sub-indicators
(patent quality, intangible capitalization, R&D pay share), each z-scored
within industry-quarter cells, re-standardized per quarter. A firm-quarter
is flagged as washing when its AWRS sits in the top of its cell while its
four-quarter-forward MRMI average sits in the bottom.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from .errors import DataError, EstimationError
from .panel import _zscore_codes, group_codes, group_quantile_codes, lag

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# scalar / elementwise building blocks


def awrs_raw(base, exagg):
    """``base * (1 + exagg)``; elementwise, NaN propagates."""
    b = np.asarray(base, dtype=float)
    e = np.asarray(exagg, dtype=float)
    if np.any(b < 0):
        raise DataError("Base_TFIDF must be nonnegative")
    out = b * (1.0 + e)
    return float(out) if out.ndim == 0 else out


def k1(inv_delta_window, util_delta_window):
    """Patent quality ratio ``inv / (inv + util + 1)`` over a 4-quarter window."""
    inv = np.asarray(inv_delta_window, dtype=float)
    util = np.asarray(util_delta_window, dtype=float)
    if np.any(inv < 0) or np.any(util < 0):
        raise DataError("patent counts must be nonnegative")
    out = inv / (inv + util + 1.0)
    return float(out) if out.ndim == 0 else out


def k2(intangible_end, intangible_begin, amortization, revenue):
    """Net intangible capitalization over revenue; missing when revenue <= 0."""
    end, begin, am, rev = (np.asarray(a, dtype=float) for a in (intangible_end, intangible_begin, amortization, revenue))
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(rev > 0, (end - begin + am) / np.where(rev > 0, rev, 1.0), np.nan)
    return float(out) if out.ndim == 0 else out


def k3(rd_comp, total_comp):
    """R&D pay share; missing when total pay <= 0, error when R&D pay exceeds it."""
    rd = np.asarray(rd_comp, dtype=float)
    tot = np.asarray(total_comp, dtype=float)
    if np.any((tot > 0) & (rd > tot)):
        raise DataError("R&D compensation exceeds total compensation")
    if np.any(rd < 0):
        raise DataError("R&D compensation must be nonnegative")
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(tot > 0, rd / np.where(tot > 0, tot, 1.0), np.nan)
    return float(out) if out.ndim == 0 else out


def window_sum(frame: pd.DataFrame, column: str, width: int = 4) -> np.ndarray:
    """Sum over quarters ``[t - width + 1, t]``; NaN unless every quarter is present."""
    total = np.zeros(len(frame))
    for h in range(width):
        total = total + lag(frame, column, h)
    return total


def forward_average(frame: pd.DataFrame, column: str, start: int = 1, stop: int = 4) -> np.ndarray:
    """Mean over quarters ``[t + start, t + stop]``; NaN unless all are present."""
    total = np.zeros(len(frame))
    for h in range(start, stop + 1):
        total = total + lag(frame, column, -h)
    return total / (stop - start + 1)


# ---------------------------------------------------------------------------
# symmetric eigenproblems


def sym3_eigvals(a: np.ndarray) -> np.ndarray:
    """Eigenvalues of a symmetric 3x3 matrix, descending, via the trigonometric
    solution of the characteristic cubic."""
    a = np.asarray(a, dtype=float)
    p1 = a[0, 1] ** 2 + a[0, 2] ** 2 + a[1, 2] ** 2
    q = np.trace(a) / 3.0
    p2 = (a[0, 0] - q) ** 2 + (a[1, 1] - q) ** 2 + (a[2, 2] - q) ** 2 + 2.0 * p1
    if p2 <= 1e-300:
        return np.array([q, q, q])
    p = math.sqrt(p2 / 6.0)
    b = (a - q * np.eye(3)) / p
    r = float(np.linalg.det(b)) / 2.0
    r = min(1.0, max(-1.0, r))
    phi = math.acos(r) / 3.0
    e1 = q + 2.0 * p * math.cos(phi)
    e3 = q + 2.0 * p * math.cos(phi + 2.0 * math.pi / 3.0)
    e2 = 3.0 * q - e1 - e3
    return np.array([e1, e2, e3])


def _null_vector(m: np.ndarray) -> np.ndarray | None:
    # largest cross product of row pairs spans the null space of a rank-2 matrix
    cands = [np.cross(m[0], m[1]), np.cross(m[0], m[2]), np.cross(m[1], m[2])]
    norms = [np.linalg.norm(c) for c in cands]
    k = int(np.argmax(norms))
    scale = max(np.abs(m).max(), 1e-300) ** 2
    if norms[k] <= 1e-10 * scale:
        return None
    return cands[k] / norms[k]


def jacobi_eigen(a: np.ndarray, tol: float = 1e-12, max_sweeps: int = 100) -> tuple[np.ndarray, np.ndarray]:
    """Cyclic Jacobi rotations. Returns (eigenvalues desc, eigenvectors as columns)."""
    a = np.array(a, dtype=float)
    n = a.shape[0]
    v = np.eye(n)
    scale = max(np.abs(a).max(), 1e-300)
    for _ in range(max_sweeps):
        off = math.sqrt(sum(a[i, j] ** 2 for i in range(n) for j in range(n) if i != j))
        if off <= tol * scale:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                if abs(a[p, q]) <= 1e-300:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * a[p, q])
                t = math.copysign(1.0, theta) / (abs(theta) + math.sqrt(theta * theta + 1.0))
                c = 1.0 / math.sqrt(t * t + 1.0)
                s = t * c
                rot = np.eye(n)
                rot[p, p] = rot[q, q] = c
                rot[p, q] = s
                rot[q, p] = -s
                a = rot.T @ a @ rot
                v = v @ rot
    w = np.diag(a).copy()
    order = np.argsort(-w, kind="mergesort")
    return w[order], v[:, order]


def leading_eigenpair(cov: np.ndarray, tol: float = 1e-12) -> tuple[np.ndarray, np.ndarray]:
    """Eigenvalues (desc) and the unit leading eigenvector of a 3x3 covariance.

    Closed form first; the Jacobi solution must agree to ``1e-8`` relative,
    and supplies the vector when the top eigenvalue is repeated.
    """
    cov = np.asarray(cov, dtype=float)
    if cov.shape != (3, 3):
        w, v = jacobi_eigen(cov, tol)
        return w, v[:, 0]
    w = sym3_eigvals(cov)
    wj, vj = jacobi_eigen(cov, tol)
    scale = max(abs(wj[0]), 1e-300)
    if np.max(np.abs(w - wj)) > 1e-8 * scale:
        log.warning("closed-form and Jacobi eigenvalues disagree (%.3e); using Jacobi", np.max(np.abs(w - wj)))
        return wj, vj[:, 0]
    vec = None
    if w[0] - w[1] > 1e-9 * scale:
        vec = _null_vector(cov - w[0] * np.eye(3))
    if vec is None:
        vec = vj[:, 0]
    return w, vec


@dataclass
class PcaResult:
    loadings: np.ndarray
    explained_variance_ratio: float
    scores: np.ndarray
    eigenvalues: np.ndarray
    mean: np.ndarray
    n_used: int
    n_excluded: int = 0


def pca_first_component(k_matrix, min_rows: int = 4) -> PcaResult:
    """First principal component of an ``n x 3`` indicator matrix.

    Rows with any NaN are excluded (their score is NaN). Loadings are the
    unit leading eigenvector of the sample covariance, signed so they sum to
    a positive number; scores are centered data times loadings.
    """
    x = np.asarray(k_matrix, dtype=float)
    if x.ndim != 2:
        raise DataError("k_matrix must be two-dimensional")
    ok = ~np.isnan(x).any(axis=1)
    xo = x[ok]
    if len(xo) < min_rows:
        raise EstimationError(f"PCA needs at least {min_rows} complete rows, got {len(xo)}")
    mean = xo.mean(axis=0)
    c = xo - mean
    cov = c.T @ c / (len(xo) - 1)
    if np.all(np.diag(cov) <= 1e-14 * max(1.0, np.abs(mean).max())):
        raise EstimationError("PCA input is rank deficient: every column is constant")
    w, vec = leading_eigenpair(cov)
    vec = vec / np.linalg.norm(vec)
    if vec.sum() < 0 or (vec.sum() == 0 and vec[np.argmax(np.abs(vec))] < 0):
        vec = -vec
    w = np.clip(w, 0.0, None)
    evr = float(w[0] / w.sum())
    scores = np.full(len(x), np.nan)
    scores[ok] = c @ vec
    return PcaResult(vec, evr, scores, w, mean, int(ok.sum()), int((~ok).sum()))


# ---------------------------------------------------------------------------
# washing flag


@dataclass(frozen=True)
class WashingThresholds:
    rhetoric_quantile: float = 0.70
    action_quantile: float = 0.50

    def __post_init__(self):
        for q in (self.rhetoric_quantile, self.action_quantile):
            if not 0 < q < 1:
                raise ValueError("washing thresholds must lie in (0, 1)")

    @property
    def suffix(self) -> str:
        return f"p{round(self.rhetoric_quantile * 100):d}_p{round(self.action_quantile * 100):d}"


def washing_flag(awrs, mrmi_fwd_avg, groups, thresholds: WashingThresholds = WashingThresholds(),
                 min_cell: int = 3) -> np.ndarray:
    """1 if AWRS >= the cell's rhetoric quantile and forward MRMI <= the cell's
    action quantile, else 0; NaN when either input is missing or the cell has
    fewer than ``min_cell`` evaluable firms.

    Both quantiles are taken over the cell's evaluable rows (AWRS and forward
    MRMI both present). ``groups`` holds cell labels, or a tuple of label
    arrays.
    """
    from .panel import _codes

    a = np.asarray(awrs, dtype=float)
    f = np.asarray(mrmi_fwd_avg, dtype=float)
    codes = _codes(groups)
    ok = ~np.isnan(a) & ~np.isnan(f)
    a_ok = np.where(ok, a, np.nan)
    f_ok = np.where(ok, f, np.nan)
    ng = int(codes.max()) + 1 if codes.size else 0
    size = np.bincount(codes[ok], minlength=ng)
    qa = group_quantile_codes(a_ok, codes, thresholds.rhetoric_quantile)
    qf = group_quantile_codes(f_ok, codes, thresholds.action_quantile)
    out = np.full(len(a), np.nan)
    good = ok & (size[codes] >= min_cell)
    out[good] = ((a[good] >= qa[codes[good]]) & (f[good] <= qf[codes[good]])).astype(float)
    return out


# ---------------------------------------------------------------------------
# full index panel


@dataclass
class IndexConfig:
    thresholds: WashingThresholds = field(default_factory=WashingThresholds)
    alternates: tuple = ()
    pca_scope: str = "pooled"          # or "quarter"
    min_cell: int = 3


@dataclass
class IndexPanel:
    frame: pd.DataFrame
    pca: PcaResult
    thresholds: WashingThresholds
    alternates: tuple = ()
    notes: list = field(default_factory=list)

    def metadata(self) -> dict:
        return {
            "thresholds": [self.thresholds.rhetoric_quantile, self.thresholds.action_quantile],
            "alternate_thresholds": [[t.rhetoric_quantile, t.action_quantile] for t in self.alternates],
            "pca_loadings": [float(v) for v in self.pca.loadings],
            "pca_explained_variance_ratio": self.pca.explained_variance_ratio,
            "pca_eigenvalues": [float(v) for v in self.pca.eigenvalues],
            "pca_rows_used": self.pca.n_used,
            "pca_rows_excluded": self.pca.n_excluded,
            "notes": list(self.notes),
        }


def build_index_panel(panel_frame: pd.DataFrame, text_scores: pd.DataFrame | None = None,
                      config: IndexConfig | None = None) -> IndexPanel:
    """Compute every index column for a firm-quarter panel.

    ``text_scores`` supplies ``base_tfidf`` and ``exaggeration`` per
    ``(firm_id, quarter)``; when omitted those columns must already be in
    ``panel_frame``. Missing exaggeration counts as 0 and is marked in
    ``exaggeration_imputed``.
    """
    config = config or IndexConfig()
    df = panel_frame.copy()
    if text_scores is not None:
        cols = [c for c in ("base_tfidf", "exaggeration") if c in text_scores]
        df = df.drop(columns=[c for c in cols if c in df]).merge(
            text_scores[["firm_id", "quarter"] + cols], on=["firm_id", "quarter"], how="left")
    for c in ("base_tfidf", "exaggeration"):
        if c not in df:
            df[c] = np.nan
    notes = []
    df["exaggeration_imputed"] = df["exaggeration"].isna() & df["base_tfidf"].notna()
    exag = df["exaggeration"].fillna(0.0).to_numpy()
    if df["exaggeration_imputed"].any():
        notes.append(f"{int(df['exaggeration_imputed'].sum())} firm-quarter(s) without figure pairs: exaggeration set to 0")
    df["awrs_raw"] = awrs_raw(df["base_tfidf"].to_numpy(), exag)
    q_codes = group_codes(df, "quarter")
    iq_codes = group_codes(df, "industry-quarter")
    df["awrs_std"] = _zscore_codes(df["awrs_raw"].to_numpy(), q_codes)
    df["awrs_text"] = _zscore_codes(df["base_tfidf"].to_numpy(dtype=float), q_codes)

    df["k1"] = k1_from_panel(df)
    df["k2"] = k2(df["intangible_end"], df["intangible_begin"], df["amortization"], df["revenue"])
    df["k3"] = k3(df["rd_comp"], df["total_comp"])
    for k in ("k1", "k2", "k3"):
        df[f"{k}_std"] = _zscore_codes(df[k].to_numpy(dtype=float), iq_codes)
    kmat = df[["k1_std", "k2_std", "k3_std"]].to_numpy()
    if config.pca_scope == "pooled":
        pca = pca_first_component(kmat)
        scores = pca.scores
    elif config.pca_scope == "quarter":
        pca = pca_first_component(kmat)
        scores = np.full(len(df), np.nan)
        for code in np.unique(q_codes):
            idx = np.flatnonzero(q_codes == code)
            scores[idx] = pca_first_component(kmat[idx]).scores
    else:
        raise ValueError(f"unknown pca_scope {config.pca_scope!r}")
    if pca.n_excluded:
        notes.append(f"{pca.n_excluded} row(s) with a missing K indicator excluded from PCA")
    df["pca_score"] = scores
    df["mrmi"] = _zscore_codes(scores, q_codes)
    df["mrmi_k2"] = _zscore_codes(df["k2"].to_numpy(dtype=float), q_codes)
    df["mrmi_fwd_avg"] = forward_average(df, "mrmi")
    groups = (df["industry"].to_numpy(), df["quarter"].to_numpy())
    df["washing"] = washing_flag(df["awrs_std"], df["mrmi_fwd_avg"], groups, config.thresholds, config.min_cell)
    for alt in config.alternates:
        df[f"washing_{alt.suffix}"] = washing_flag(df["awrs_std"], df["mrmi_fwd_avg"], groups, alt, config.min_cell)
    return IndexPanel(df, pca, config.thresholds, tuple(config.alternates), notes)


def k1_from_panel(frame: pd.DataFrame) -> np.ndarray:
    inv = window_sum(frame, "inv_pat_delta")
    util = window_sum(frame, "util_pat_delta")
    ok = ~np.isnan(inv) & ~np.isnan(util)
    out = np.full(len(frame), np.nan)
    out[ok] = k1(inv[ok], util[ok])
    return out
