"""Firm-quarter panel model, CSV ingestion, sample filters and
cross-sectional transforms (winsorizing, group z-scores, group quantiles,
the size-age constraint index).

Missing values are NaN throughout; zero is never used as a missing marker.
"""

from __future__ import annotations

import json
import logging
import os
import re
from dataclasses import dataclass, field, fields
from functools import cached_property
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
import pandas as pd

from .errors import DataError, DuplicateKeyError, SchemaError

log = logging.getLogger(__name__)

STRING_FIELDS = ("firm_id", "industry", "province")
CONTROL_FIELDS = ("roa", "lev", "size", "growth", "capex", "ocf", "tobin_q", "analyst", "inst_own")
NUMERIC_FIELDS = CONTROL_FIELDS + (
    "inv_pat_delta",
    "util_pat_delta",
    "intangible_begin",
    "intangible_end",
    "amortization",
    "revenue",
    "rd_comp",
    "total_comp",
    "ded_hold",
    "trans_hold",
    "firm_age",
)
REQUIRED_FIELDS = ("firm_id", "quarter", "industry", "province") + NUMERIC_FIELDS
# Optional inputs consumed by later stages when present.
OPTIONAL_FIELDS = ("st_flag", "inv_pat_apps")
COUNT_FIELDS = ("inv_pat_delta", "util_pat_delta", "inv_pat_apps")

GROUP_KINDS = {
    "quarter": ("quarter",),
    "industry-quarter": ("industry", "quarter"),
    "industry-year": ("industry", "year"),
    "province-quarter": ("province", "quarter"),
}

_QUARTER_RE = re.compile(r"^\s*(\d{4})\s*[Qq]\s*([1-4])\s*$")


# ---------------------------------------------------------------------------
# quarter encoding


def encode_quarter(label) -> int:
    """Map ``"2020Q1"`` (or an already-encoded integer) to ``year * 4 + q - 1``."""
    if isinstance(label, (int, np.integer)):
        return int(label)
    text = str(label)
    m = _QUARTER_RE.match(text)
    if m:
        return int(m.group(1)) * 4 + int(m.group(2)) - 1
    if text.strip().lstrip("-").isdigit():
        return int(text)
    raise DataError(f"unrecognised quarter label {label!r}")


def decode_quarter(code: int) -> str:
    code = int(code)
    return f"{code // 4}Q{code % 4 + 1}"


def quarter_year(code):
    return np.asarray(code) // 4


# ---------------------------------------------------------------------------
# data model


@dataclass(frozen=True)
class FirmQuarterRecord:
    firm_id: str
    quarter: int
    industry: str
    province: str
    roa: float
    lev: float
    size: float
    growth: float
    capex: float
    ocf: float
    tobin_q: float
    analyst: float
    inst_own: float
    inv_pat_delta: float
    util_pat_delta: float
    intangible_begin: float
    intangible_end: float
    amortization: float
    revenue: float
    rd_comp: float
    total_comp: float
    ded_hold: float
    trans_hold: float
    firm_age: float


@dataclass(frozen=True)
class GroupKey:
    """Grouping dimension for cross-sectional transforms."""

    kind: str
    values: tuple

    def __post_init__(self):
        if self.kind not in GROUP_KINDS:
            raise ValueError(f"unknown group kind {self.kind!r}")
        if len(self.values) != len(GROUP_KINDS[self.kind]):
            raise ValueError(f"group kind {self.kind!r} takes {len(GROUP_KINDS[self.kind])} value(s)")


def group_codes(frame: pd.DataFrame, kind: str) -> np.ndarray:
    """Integer cell codes for ``kind`` (ordered by the sorted key values)."""
    if kind not in GROUP_KINDS:
        raise ValueError(f"unknown group kind {kind!r}")
    cols = []
    for name in GROUP_KINDS[kind]:
        if name == "year" and "year" not in frame:
            cols.append(quarter_year(frame["quarter"].to_numpy()))
        else:
            cols.append(frame[name].to_numpy())
    return _codes(tuple(cols) if len(cols) > 1 else cols[0])


def group_keys(frame: pd.DataFrame, kind: str) -> list[GroupKey]:
    parts = []
    for name in GROUP_KINDS[kind]:
        if name == "year" and "year" not in frame:
            parts.append(quarter_year(frame["quarter"].to_numpy()))
        else:
            parts.append(frame[name].to_numpy())
    return [GroupKey(kind, tuple(v)) for v in zip(*parts)]


@dataclass
class PanelDataset:
    """Validated firm-quarter panel sorted by ``(firm_id, quarter)``.

    The records live in ``frame``; the ``records`` property materialises
    them as :class:`FirmQuarterRecord` objects on demand.
    """

    frame: pd.DataFrame
    diagnostics: list[str] = field(default_factory=list)

    def __post_init__(self):
        frame = self.frame.sort_values(["firm_id", "quarter"], kind="mergesort").reset_index(drop=True)
        self.frame = frame

    def __len__(self):
        return len(self.frame)

    @property
    def records(self) -> list[FirmQuarterRecord]:
        names = [f.name for f in fields(FirmQuarterRecord)]
        sub = self.frame[names]
        return [FirmQuarterRecord(*row) for row in sub.itertuples(index=False, name=None)]

    @property
    def quarter_range(self) -> tuple[int, int]:
        q = self.frame["quarter"]
        return int(q.min()), int(q.max())

    @cached_property
    def by_firm(self) -> dict[str, np.ndarray]:
        return _index_map(self.frame["firm_id"])

    @cached_property
    def by_quarter(self) -> dict[int, np.ndarray]:
        return _index_map(self.frame["quarter"])

    @cached_property
    def by_industry_quarter(self) -> dict[tuple, np.ndarray]:
        keys = pd.Series(list(zip(self.frame["industry"], self.frame["quarter"])))
        return _index_map(keys)

    @classmethod
    def from_records(cls, records: Iterable[FirmQuarterRecord]) -> "PanelDataset":
        rows = [r.__dict__ if hasattr(r, "__dict__") else dict(r) for r in records]
        frame = pd.DataFrame(rows, columns=[f.name for f in fields(FirmQuarterRecord)])
        return cls(_validate_frame(frame))


def _index_map(keys: pd.Series) -> dict:
    groups = keys.groupby(keys.to_numpy(), sort=True).indices
    return {k: np.asarray(v) for k, v in groups.items()}


# ---------------------------------------------------------------------------
# ingestion


def read_schema(path) -> dict[str, str]:
    """Read a sidecar schema file mapping model fields to column names.

    The file is YAML or JSON with a ``columns`` mapping (``field: column``).
    Fields not listed map to a column of the same name.
    """
    text = Path(path).read_text(encoding="utf-8")
    if str(path).endswith(".json"):
        doc = json.loads(text)
    else:
        import yaml

        doc = yaml.safe_load(text)
    if not isinstance(doc, dict):
        raise SchemaError([], "schema file must be a mapping")
    cols = doc.get("columns", doc)
    unknown = set(cols) - set(REQUIRED_FIELDS) - set(OPTIONAL_FIELDS)
    if unknown:
        raise SchemaError([], f"schema maps unknown field(s): {', '.join(sorted(unknown))}")
    return {str(k): str(v) for k, v in cols.items()}


def load_panel(source, schema: Mapping[str, str] | str | os.PathLike | None = None) -> PanelDataset:
    """Load a comma-separated firm-quarter table.

    Parameters
    ----------
    source : path or text file handle
        UTF-8 CSV with a header row; empty cells are missing.
    schema : mapping or path, optional
        Field-to-column map, or a sidecar schema file. Unmapped fields are
        looked up under their own name.

    Rows whose cells fail numeric coercion, or that break a record
    invariant, are dropped and reported in ``diagnostics`` with their file
    line numbers. Missing columns, duplicate keys and out-of-order quarters
    within a firm raise.
    """
    if schema is None:
        schema = {}
    elif isinstance(schema, (str, os.PathLike)):
        schema = read_schema(schema)
    raw = pd.read_csv(source, dtype=str, keep_default_na=False, na_values=[], encoding="utf-8")
    colmap = {f: schema.get(f, f) for f in REQUIRED_FIELDS + OPTIONAL_FIELDS}
    missing = [f"{f}" if colmap[f] == f else f"{f} (column {colmap[f]!r})"
               for f in REQUIRED_FIELDS if colmap[f] not in raw.columns]
    if missing:
        raise SchemaError(missing)
    present = [f for f in REQUIRED_FIELDS + OPTIONAL_FIELDS if colmap[f] in raw.columns]
    frame = pd.DataFrame({f: raw[colmap[f]] for f in present})
    line_no = np.arange(len(frame)) + 2  # header is line 1
    diagnostics: list[str] = []
    bad = np.zeros(len(frame), dtype=bool)

    for name in STRING_FIELDS:
        frame[name] = frame[name].str.strip()
        empty = frame[name].eq("").to_numpy()
        for i in np.flatnonzero(empty):
            diagnostics.append(f"line {line_no[i]}: empty {name}")
        bad |= empty

    quarters = np.zeros(len(frame), dtype=np.int64)
    for i, label in enumerate(frame["quarter"].to_numpy()):
        try:
            quarters[i] = encode_quarter(label)
        except DataError:
            diagnostics.append(f"line {line_no[i]}: bad quarter {label!r}")
            bad[i] = True
    frame["quarter"] = quarters

    numeric = [f for f in NUMERIC_FIELDS + OPTIONAL_FIELDS if f in frame]
    for name in numeric:
        text = frame[name].str.strip()
        values = pd.to_numeric(text.where(text != ""), errors="coerce")
        failed = (text != "").to_numpy() & values.isna().to_numpy()
        for i in np.flatnonzero(failed):
            diagnostics.append(f"line {line_no[i]}: cannot parse {name}={text.iat[i]!r}")
        bad |= failed
        frame[name] = values.astype(float)

    bad |= _invariant_violations(frame, line_no, diagnostics)

    keys = frame.loc[~bad, ["firm_id", "quarter"]]
    dup = keys.duplicated(keep=False).to_numpy()
    if dup.any():
        idx = keys.index[dup]
        first = keys.loc[idx].groupby(["firm_id", "quarter"], sort=True)
        msgs = []
        for (firm, q), rows in first.groups.items():
            msgs.append(f"({firm}, {decode_quarter(q)}) at lines {', '.join(str(line_no[r]) for r in rows)}")
        raise DuplicateKeyError("duplicate (firm_id, quarter) key: " + "; ".join(msgs))

    kept = frame.loc[~bad]
    order_break = kept.groupby("firm_id", sort=False)["quarter"].diff() <= 0
    if order_break.any():
        r = order_break.to_numpy().nonzero()[0][0]
        i = kept.index[r]
        raise DataError(
            f"non-monotone quarter encoding for firm {kept.at[i, 'firm_id']!r} at line {line_no[i]}"
        )
    for msg in diagnostics:
        log.warning("load_panel: %s", msg)
    return PanelDataset(kept.reset_index(drop=True), diagnostics=diagnostics)


def _invariant_violations(frame, line_no, diagnostics) -> np.ndarray:
    bad = np.zeros(len(frame), dtype=bool)
    for name in COUNT_FIELDS:
        if name not in frame:
            continue
        v = frame[name].to_numpy()
        viol = (v < 0) | (np.isfinite(v) & (v != np.round(v)))
        for i in np.flatnonzero(viol):
            diagnostics.append(f"line {line_no[i]}: {name} must be a nonnegative integer")
        bad |= viol
    holds = frame["ded_hold"].to_numpy() + frame["trans_hold"].to_numpy()
    for name in ("ded_hold", "trans_hold"):
        v = frame[name].to_numpy()
        viol = (v < 0) | (v > 1)
        for i in np.flatnonzero(viol):
            diagnostics.append(f"line {line_no[i]}: {name} outside [0, 1]")
        bad |= viol
    viol = holds > 1 + 1e-12
    for i in np.flatnonzero(viol):
        diagnostics.append(f"line {line_no[i]}: ded_hold + trans_hold exceeds 1")
    return bad | viol


def _validate_frame(frame: pd.DataFrame) -> pd.DataFrame:
    missing = [f for f in REQUIRED_FIELDS if f not in frame]
    if missing:
        raise SchemaError(missing)
    dup = frame.duplicated(["firm_id", "quarter"], keep=False)
    if dup.any():
        raise DuplicateKeyError(f"duplicate (firm_id, quarter) keys: {frame.loc[dup, ['firm_id', 'quarter']].values.tolist()}")
    frame = frame.copy()
    frame["quarter"] = frame["quarter"].map(encode_quarter).astype(np.int64)
    for name in NUMERIC_FIELDS:
        frame[name] = frame[name].astype(float)
    return frame


def save_panel(panel: PanelDataset, dest, schema: Mapping[str, str] | None = None) -> None:
    """Write ``panel`` as CSV readable by :func:`load_panel` with the same schema."""
    schema = schema or {}
    cols = [f for f in REQUIRED_FIELDS + OPTIONAL_FIELDS if f in panel.frame]
    out = panel.frame[cols].copy()
    out["quarter"] = [decode_quarter(q) for q in out["quarter"]]
    out = out.rename(columns={f: schema.get(f, f) for f in cols})
    if hasattr(dest, "write"):
        out.to_csv(dest, index=False, lineterminator="\n")
    else:
        write_atomic(dest, out.to_csv(index=False, lineterminator="\n"))


def write_atomic(path, text: str) -> None:
    """Write ``text`` to ``path`` via a temporary file and rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.name}.tmp{os.getpid()}")
    with open(tmp, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)
    os.replace(tmp, path)


# ---------------------------------------------------------------------------
# sample filters


@dataclass
class FilterReport:
    n_in: int
    st_firms: list[str]
    missing_run_firms: list[str]
    n_out: int

    def as_dict(self):
        return {
            "rows_in": self.n_in,
            "rows_out": self.n_out,
            "dropped_st_firms": len(self.st_firms),
            "dropped_missing_run_firms": len(self.missing_run_firms),
        }


def longest_missing_run(frame: pd.DataFrame, core_vars: Sequence[str]) -> pd.Series:
    """Longest run of consecutive quarters with a missing core variable, per firm.

    Quarters absent from the firm's span count as missing.
    """
    if not core_vars:
        return pd.Series(0, index=pd.Index(frame["firm_id"].unique(), name="firm_id"))
    miss = frame[list(core_vars)].isna().any(axis=1).to_numpy()
    firm_codes, firms = pd.factorize(frame["firm_id"], sort=True)
    q = frame["quarter"].to_numpy()
    qmin, qmax = q.min(), q.max()
    grid = np.ones((len(firms), qmax - qmin + 1), dtype=bool)
    present = np.zeros_like(grid)
    grid[firm_codes, q - qmin] = miss
    present[firm_codes, q - qmin] = True
    # restrict to each firm's own span
    first = np.argmax(present, axis=1)
    last = grid.shape[1] - 1 - np.argmax(present[:, ::-1], axis=1)
    cols = np.arange(grid.shape[1])
    grid &= (cols >= first[:, None]) & (cols <= last[:, None])
    best = np.zeros(len(firms), dtype=np.int64)
    run = np.zeros(len(firms), dtype=np.int64)
    for j in range(grid.shape[1]):
        run = np.where(grid[:, j], run + 1, 0)
        best = np.maximum(best, run)
    return pd.Series(best, index=pd.Index(firms, name="firm_id"))


def apply_sample_filters(
    panel: PanelDataset,
    flags=None,
    core_vars: Sequence[str] = ("awrs", "mrmi"),
    max_missing_run: int = 2,
) -> tuple[PanelDataset, FilterReport]:
    """Drop Special-Treatment firms and firms with long core-variable gaps.

    ``flags`` is a boolean per record (defaults to the ``st_flag`` column when
    present). A firm flagged in any quarter is removed entirely; so is a firm
    with more than ``max_missing_run`` consecutive quarters where any of
    ``core_vars`` is missing. Core variables absent from the frame are
    ignored.
    """
    frame = panel.frame
    if flags is None:
        flags = frame["st_flag"].fillna(0).to_numpy() != 0 if "st_flag" in frame else np.zeros(len(frame), bool)
    flags = np.asarray(flags, dtype=bool)
    if flags.shape != (len(frame),):
        raise DataError(f"ST flags have length {flags.shape[0]}, panel has {len(frame)} records")
    st_firms = sorted(frame.loc[flags, "firm_id"].unique())
    keep = ~frame["firm_id"].isin(st_firms).to_numpy()
    sub = frame.loc[keep]
    present_core = [c for c in core_vars if c in sub]
    runs = longest_missing_run(sub, present_core) if len(sub) else pd.Series(dtype=int)
    run_firms = sorted(runs.index[runs.to_numpy() > max_missing_run])
    keep &= ~frame["firm_id"].isin(run_firms).to_numpy()
    out = frame.loc[keep].reset_index(drop=True)
    report = FilterReport(len(frame), st_firms, run_firms, len(out))
    return PanelDataset(out, diagnostics=list(panel.diagnostics)), report


# ---------------------------------------------------------------------------
# transforms


def quantile_type7(values, q: float) -> float:
    """Empirical quantile by linear interpolation at position ``1 + (n-1) q``."""
    x = np.sort(np.asarray(values, dtype=float))
    if x.size == 0:
        raise ValueError("quantile of an empty sample")
    h = (x.size - 1) * q
    lo = int(np.floor(h))
    hi = min(lo + 1, x.size - 1)
    return float(x[lo] + (h - lo) * (x[hi] - x[lo]))


def winsorize_bounds(values, p_low: float = 0.01, p_high: float = 0.99) -> tuple[float, float]:
    """Pooled ``p_low``/``p_high`` quantiles of the non-missing values."""
    if not 0 <= p_low < p_high <= 1:
        raise ValueError("need 0 <= p_low < p_high <= 1")
    x = np.asarray(values, dtype=float)
    ok = ~np.isnan(x)
    if not ok.any():
        raise DataError("cannot winsorize a series with no non-missing values")
    return quantile_type7(x[ok], p_low), quantile_type7(x[ok], p_high)


def winsorize(values, p_low: float = 0.01, p_high: float = 0.99, bounds: tuple[float, float] | None = None) -> np.ndarray:
    """Clip to the pooled ``p_low``/``p_high`` quantiles; NaN passes through.

    Passing ``bounds`` clips at those values instead. Clipping is idempotent
    for fixed bounds; re-estimating the quantiles on an already clipped
    series moves interpolated bounds slightly inward.
    """
    x = np.asarray(values, dtype=float)
    ok = ~np.isnan(x)
    lo, hi = bounds if bounds is not None else winsorize_bounds(x, p_low, p_high)
    out = x.copy()
    out[ok] = np.clip(x[ok], lo, hi)
    return out


def _codes(groups) -> np.ndarray:
    if isinstance(groups, tuple):
        df = pd.DataFrame({f"k{i}": np.asarray(g) for i, g in enumerate(groups)})
        return df.groupby(list(df.columns), sort=True, dropna=False).ngroup().to_numpy()
    if len(groups) and isinstance(groups[0], GroupKey):
        groups = pd.Series([(g.kind,) + tuple(g.values) for g in groups], dtype=object)
    codes, _ = pd.factorize(np.asarray(groups) if not isinstance(groups, pd.Series) else groups, sort=True)
    return codes


def zscore_by_group(values, groups) -> np.ndarray:
    """Standardize within groups to mean 0 and sample sd 1.

    ``groups`` is an array of labels, or a tuple of label arrays forming a
    composite key. Groups with fewer than two non-missing values yield NaN;
    zero-variance groups yield 0 and log a warning.
    """
    x = np.asarray(values, dtype=float)
    codes = _codes(groups)
    return _zscore_codes(x, codes)


def _zscore_codes(x: np.ndarray, codes: np.ndarray) -> np.ndarray:
    ok = ~np.isnan(x)
    ng = int(codes.max()) + 1 if codes.size else 0
    n = np.bincount(codes[ok], minlength=ng).astype(float)
    s = np.bincount(codes[ok], weights=x[ok], minlength=ng)
    with np.errstate(invalid="ignore", divide="ignore"):
        mean = s / n
    centered = x - mean[codes]
    ss = np.bincount(codes[ok], weights=centered[ok] ** 2, minlength=ng)
    with np.errstate(invalid="ignore", divide="ignore"):
        sd = np.sqrt(ss / (n - 1))
    out = np.full_like(x, np.nan)
    small = n < 2
    flat = (~small) & (sd <= 1e-15 * np.maximum(1.0, np.abs(mean)))
    if flat.any():
        log.warning("zscore_by_group: %d zero-variance group(s) set to 0", int(flat.sum()))
    good = ok & ~small[codes] & ~flat[codes]
    out[good] = centered[good] / sd[codes[good]]
    # second pass removes the residual mean left by rounding
    if good.any():
        r = np.bincount(codes[good], weights=out[good], minlength=ng)
        cnt = np.bincount(codes[good], minlength=ng)
        with np.errstate(invalid="ignore", divide="ignore"):
            adj = np.where(cnt > 0, r / np.maximum(cnt, 1), 0.0)
        out[good] -= adj[codes[good]]
    out[ok & flat[codes]] = 0.0
    return out


def group_quantile_codes(x: np.ndarray, codes: np.ndarray, q: float) -> np.ndarray:
    """Per-code type-7 quantile of the non-missing values (NaN for empty codes)."""
    x = np.asarray(x, dtype=float)
    ng = int(codes.max()) + 1 if codes.size else 0
    ok = ~np.isnan(x)
    xc, cc = x[ok], codes[ok]
    order = np.lexsort((xc, cc))
    xs, cs = xc[order], cc[order]
    counts = np.bincount(cs, minlength=ng)
    starts = np.concatenate(([0], np.cumsum(counts)[:-1]))
    out = np.full(ng, np.nan)
    has = counts > 0
    h = (counts[has] - 1) * q
    lo = np.floor(h).astype(np.int64)
    hi = np.minimum(lo + 1, counts[has] - 1)
    base = starts[has]
    v_lo = xs[base + lo]
    v_hi = xs[base + hi]
    out[has] = v_lo + (h - lo) * (v_hi - v_lo)
    return out


def quantile_by_group(values, groups, q: float) -> dict:
    """Type-7 quantile of ``values`` within each group, keyed by group label."""
    if not 0 < q < 1:
        raise ValueError("q must lie in (0, 1)")
    x = np.asarray(values, dtype=float)
    if isinstance(groups, tuple):
        labels = list(zip(*[np.asarray(g).tolist() for g in groups]))
    else:
        labels = list(np.asarray(groups).tolist()) if not isinstance(groups, list) else groups
    codes, uniques = pd.factorize(pd.Series(labels, dtype=object), sort=True)
    thr = group_quantile_codes(x, codes, q)
    empty = [uniques[i] for i in np.flatnonzero(np.isnan(thr))]
    if empty:
        raise DataError(f"empty group(s) in quantile_by_group: {empty[:5]}")
    return {uniques[i]: float(thr[i]) for i in range(len(uniques))}


def sa_index(size, age):
    """Size-age financing constraint index.

    ``-0.737 * size + 0.043 * size**2 - 0.040 * age``; larger values mean
    tighter constraints. Works elementwise on arrays.
    """
    s = np.asarray(size, dtype=float)
    a = np.asarray(age, dtype=float)
    if not (np.all(np.isfinite(s)) and np.all(np.isfinite(a))):
        raise DataError("sa_index requires finite size and age")
    if np.any(s <= 0) or np.any(a < 0):
        raise DataError("sa_index requires size > 0 and age >= 0")
    out = -0.737 * s + 0.043 * s**2 - 0.040 * a
    return float(out) if out.ndim == 0 else out


def winsorize_frame(frame: pd.DataFrame, columns: Sequence[str], p_low=0.01, p_high=0.99) -> pd.DataFrame:
    out = frame.copy()
    for c in columns:
        if c in out and out[c].notna().any():
            out[c] = winsorize(out[c].to_numpy(), p_low, p_high)
    return out


def lag(frame: pd.DataFrame, column: str, h: int, firm="firm_id", time="quarter") -> np.ndarray:
    """Value of ``column`` at ``time - h`` for the same firm (NaN if absent).

    Negative ``h`` gives leads.
    """
    key = frame[[firm, time]].copy()
    src = frame[[firm, time, column]].copy()
    src[time] = src[time] + h
    merged = key.merge(src, on=[firm, time], how="left", sort=False)
    return merged[column].to_numpy(dtype=float)
