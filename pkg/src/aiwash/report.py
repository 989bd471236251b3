"""Tables, plot-data files and the structured results document.

Tables are CSV with numbers printed to 6 significant digits; the JSON
results document keeps full precision. Nothing here renders plots.
"""

from __future__ import annotations

import json
import math
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
import pandas as pd

from .errors import DataError
from .panel import CONTROL_FIELDS, decode_quarter, quantile_type7, write_atomic

DESCRIPTIVE_COLUMNS = (
    "awrs_std", "base_tfidf", "exaggeration", "mrmi", "k1", "k2", "k3", "washing",
    "ded_hold", "trans_hold", *CONTROL_FIELDS, "car", "bhar",
)
SIG_DIGITS = 6


def fmt(x) -> str:
    """Six significant digits; integers stay integers, missing is empty."""
    if x is None:
        return ""
    if isinstance(x, (bool, np.bool_)):
        return str(int(x))
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        if math.isnan(x):
            return ""
        if math.isinf(x):
            return "inf" if x > 0 else "-inf"
        return f"{float(x):.{SIG_DIGITS}g}"
    return str(x)


def table_csv(df: pd.DataFrame) -> str:
    lines = [",".join(_csv_cell(c) for c in df.columns)]
    for row in df.itertuples(index=False, name=None):
        lines.append(",".join(_csv_cell(fmt(v)) for v in row))
    return "\n".join(lines) + "\n"


def _csv_cell(s) -> str:
    s = str(s)
    if any(ch in s for ch in ',"\n'):
        return '"' + s.replace('"', '""') + '"'
    return s


def write_table(df: pd.DataFrame, path) -> Path:
    path = Path(path)
    write_atomic(path, table_csv(df))
    return path


def read_table(path) -> pd.DataFrame:
    return pd.read_csv(path, keep_default_na=True)


# ---------------------------------------------------------------------------
# descriptive statistics


def emit_descriptives(frame: pd.DataFrame, columns: Sequence[str] | None = None) -> pd.DataFrame:
    """N, mean, sd, min, P25, median, P75 and max per variable (type-7 quantiles)."""
    cols = [c for c in (columns or DESCRIPTIVE_COLUMNS) if c in frame]
    rows = []
    for c in cols:
        x = pd.to_numeric(frame[c], errors="coerce").to_numpy(dtype=float)
        x = x[~np.isnan(x)]
        n = len(x)
        if n == 0:
            rows.append({"variable": c, "N": 0})
            continue
        rows.append({
            "variable": c,
            "N": n,
            "mean": math.fsum(x) / n,
            "sd": float(np.std(x, ddof=1)) if n > 1 else float("nan"),
            "min": float(x.min()),
            "p25": quantile_type7(x, 0.25),
            "median": quantile_type7(x, 0.50),
            "p75": quantile_type7(x, 0.75),
            "max": float(x.max()),
        })
    return pd.DataFrame(rows, columns=["variable", "N", "mean", "sd", "min", "p25", "median", "p75", "max"])


# ---------------------------------------------------------------------------
# regression tables


def regression_table(results: Mapping[str, object], terms: Sequence[str] | None = None) -> pd.DataFrame:
    """Long table with one row per (column, term) plus per-column statistics.

    ``results`` maps column labels to :class:`RegressionResult` objects.
    """
    rows = []
    for label, res in results.items():
        keep = [t for t in res.names if terms is None or t in terms]
        for t in keep:
            i = res.index(t)
            rows.append({"column": label, "term": t, "coef": float(res.coef[i]), "se": float(res.se[i]),
                         "t": float(res.t_stats[i]), "p": float(res.p_values[i])})
        stats = {"n_obs": res.n_obs, "r2": res.r2, "r2_within": res.r2_within, "n_clusters": res.n_clusters}
        lag_sum = getattr(res, "lag_sum", None)
        if lag_sum is not None:
            stats["lag_sum"] = lag_sum
            stats["lag_sum_se"] = getattr(res, "lag_sum_se", None)
        for k, v in stats.items():
            if v is not None:
                rows.append({"column": label, "term": f"[{k}]", "coef": v, "se": None, "t": None, "p": None})
        rows.append({"column": label, "term": "[fixed_effects]", "coef": " x ".join(res.fixed_effects) or "none",
                     "se": None, "t": None, "p": None})
        rows.append({"column": label, "term": "[cluster]", "coef": res.cluster or "hc1",
                     "se": None, "t": None, "p": None})
    return pd.DataFrame(rows, columns=["column", "term", "coef", "se", "t", "p"])


def iv_table(results: Mapping[str, object]) -> pd.DataFrame:
    rows = []
    for label, r in results.items():
        tab = regression_table({label: r.second})
        rows.append(tab)
        extra = [
            {"column": label, "term": "[first_stage_F]", "coef": r.first_stage_F},
            {"column": label, "term": "[weak_flag]", "coef": int(r.weak_flag)},
            {"column": label, "term": "[weak_threshold]", "coef": r.weak_threshold},
        ]
        for fs, F in zip(r.first_stage, r.first_stage_F_each):
            for z in r.instruments:
                extra.append({"column": label, "term": f"[first_stage {fs.outcome}: {z}]", "coef": fs[z],
                              "se": fs.se_of(z)})
            extra.append({"column": label, "term": f"[first_stage_F {fs.outcome}]", "coef": F})
        rows.append(pd.DataFrame(extra, columns=["column", "term", "coef", "se", "t", "p"]))
    return pd.concat(rows, ignore_index=True) if rows else pd.DataFrame(columns=["column", "term", "coef", "se", "t", "p"])


def did_table(results: Mapping[str, object]) -> pd.DataFrame:
    rows = []
    for label, r in results.items():
        rows.append({"rule": label, "outcome": r.outcome, "att": r.att, "att_se": r.att_se,
                     "pretrend_F": r.pretrend_F, "pretrend_p": r.pretrend_joint_p,
                     "n_treated": r.n_treated, "n_control": r.n_control,
                     "post_boundary": decode_quarter(r.post_boundary)})
    return pd.DataFrame(rows)


# ---------------------------------------------------------------------------
# figure data


def figure1_data(text_scores: pd.DataFrame) -> pd.DataFrame:
    """Per-quarter count of documents with at least one AI-lexicon hit."""
    if text_scores is None or "has_hit" not in text_scores:
        raise DataError("figure 1 needs document-level text scores with a 'has_hit' column")
    g = text_scores.groupby("quarter")
    out = pd.DataFrame({"n_docs": g.size(), "n_docs_with_ai": g["has_hit"].sum().astype(int)}).reset_index()
    out["quarter"] = [decode_quarter(int(q)) for q in out["quarter"]]
    return out[["quarter", "n_docs", "n_docs_with_ai"]]


def figure2_data(h1: Mapping[str, object], level: float = 0.95) -> pd.DataFrame:
    """Lag coefficients with confidence bounds for every H1 column."""
    if not h1:
        raise DataError("figure 2 needs H1 results")
    from scipy import stats

    rows = []
    for label, res in h1.items():
        lags = sorted(int(n[len("awrs_l"):]) for n in res.names if n.startswith("awrs_l"))
        crit = stats.t.ppf(0.5 + level / 2, res.df_resid)
        for h in lags:
            c, s = res[f"awrs_l{h}"], res.se_of(f"awrs_l{h}")
            rows.append({"column": label, "lag": h, "coef": c, "se": s, "ci_low": c - crit * s, "ci_high": c + crit * s})
    return pd.DataFrame(rows)


def figure3_data(did) -> pd.DataFrame:
    """Event-time coefficients with the pinned base period marked."""
    if did is None:
        raise DataError("figure 3 needs a DID result")
    out = did.event_time_coefs.copy()
    out["is_base"] = out["is_base"].astype(int)
    return out[["rel_quarter", "coef", "se", "ci_low", "ci_high", "is_base"]]


def emit_figure_data(outdir, text_scores=None, h1=None, did=None) -> dict[str, Path]:
    """Write whichever plot-data files have their inputs available."""
    outdir = Path(outdir)
    written = {}
    if text_scores is not None:
        written["figure1"] = write_table(figure1_data(text_scores), outdir / "figure1_ai_disclosure.csv")
    if h1 is not None:
        written["figure2"] = write_table(figure2_data(h1), outdir / "figure2_lag_effects.csv")
    if did is not None:
        written["figure3"] = write_table(figure3_data(did), outdir / "figure3_event_time.csv")
    return written


# ---------------------------------------------------------------------------
# structured results


def _clean(obj):
    if isinstance(obj, Mapping):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_clean(v) for v in obj.tolist()]
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        f = float(obj)
        return f if math.isfinite(f) else None
    if isinstance(obj, pd.DataFrame):
        return _clean(obj.to_dict(orient="records"))
    return obj


def results_json(doc: Mapping) -> str:
    """Full-precision JSON with non-finite numbers as null and sorted keys."""
    return json.dumps(_clean(doc), sort_keys=True, indent=1, allow_nan=False) + "\n"


def write_results(doc: Mapping, path) -> Path:
    path = Path(path)
    write_atomic(path, results_json(doc))
    return path


def table_files(tables: Mapping[str, pd.DataFrame], outdir) -> dict[str, Path]:
    outdir = Path(outdir)
    return {name: write_table(df, outdir / f"{name}.csv") for name, df in tables.items()}


def lines_for(tables: Iterable[tuple[str, pd.DataFrame]]) -> str:
    """Plain-text rendering for the terminal."""
    parts = []
    for name, df in tables:
        parts.append(f"== {name} ==")
        parts.append(df.to_string(index=False, float_format=fmt))
    return "\n".join(parts) + "\n"


# ---------------------------------------------------------------------------
# bundle assembly

INTERACTIONS = (
    ("h2", "(1) d_trans", "awrs_x_washing_l1"),
    ("h2", "(3) ded x washing", "awrs_x_washing_l1"),
    ("h3", "(2) CAR x washing", "awrs_x_washing"),
    ("h3", "(4) BHAR x washing", "awrs_x_washing"),
)


def interaction_signs(variants: Mapping[str, Mapping]) -> pd.DataFrame:
    """AWRS x Washing coefficients per threshold variant and their sign agreement."""
    rows = []
    for name, out in variants.items():
        for kind, col, term in INTERACTIONS:
            res = out.get(kind)
            if res is None:
                continue
            cols = res.columns if kind == "h3" else res
            r = cols.get(col)
            if r is None or term not in r.names:
                continue
            rows.append({"variant": name, "table": kind, "column": col, "term": term,
                         "coef": r[term], "se": r.se_of(term), "sign": int(np.sign(r[term]))})
    df = pd.DataFrame(rows, columns=["variant", "table", "column", "term", "coef", "se", "sign"])
    if len(df):
        stable = df.groupby(["table", "column"])["sign"].transform(lambda s: int(s.nunique() == 1))
        df["sign_stable"] = stable
    return df


def build_bundle(pipe, est: Mapping, outdir, sweep: bool = False) -> tuple[dict, dict]:
    """Write every table, figure file and the results document for a run."""
    outdir = Path(outdir)
    full = bool(pipe.cfg.options.full_vcov)
    idx_stage = pipe.index()
    idx = idx_stage["index"]
    ev = pipe._memo.get("events")
    txt = pipe.text()
    frame = ev["frame"] if ev is not None else idx.frame
    R = est.get("results", {})
    tables: dict[str, pd.DataFrame] = {}
    results: dict = {"index": idx.metadata(), "sample_filters": idx_stage["filters"],
                     "n_firm_quarters": int(len(frame)), "n_firms": int(frame["firm_id"].nunique())}
    if ev is not None and ev.get("note"):
        results["event_returns_note"] = ev["note"]

    tables["table1_descriptives"] = emit_descriptives(frame)
    results["descriptives"] = tables["table1_descriptives"]

    def cols_dict(cols):
        return {k: v.to_dict(full) for k, v in cols.items()}

    if "h1" in R:
        tables["table2_h1"] = regression_table(R["h1"]["columns"])
        results["h1"] = cols_dict(R["h1"]["columns"])
        for k, v in R["h1"]["columns"].items():
            results["h1"][k]["lag_sum"] = v.lag_sum
            results["h1"][k]["lag_sum_se"] = v.lag_sum_se
    if "h2" in R:
        tables["table3_h2"] = regression_table(R["h2"]["columns"])
        results["h2"] = cols_dict(R["h2"]["columns"])
        if "returns" in R["h2"]:
            tables["table3b_h2_returns"] = regression_table(R["h2"]["returns"])
            results["h2_returns"] = cols_dict(R["h2"]["returns"])
    if "h3" in R:
        es = R["h3"]["result"]
        tables["table4_h3"] = regression_table(es.columns)
        results["h3"] = {"columns": cols_dict(es.columns), "n_car": es.n_car, "n_bhar": es.n_bhar, "notes": es.notes}
        if es.path is not None:
            tables["table4b_event_path"] = es.path
            results["h3"]["event_path"] = es.path
    if "h4" in R:
        tables["table5_h4"] = regression_table(R["h4"]["columns"])
        results["h4"] = cols_dict(R["h4"]["columns"])
    if "iv" in R:
        tables["table6_iv"] = iv_table(R["iv"]["columns"])
        results["iv"] = {k: v.to_dict(full) for k, v in R["iv"]["columns"].items()}
    if "did" in R:
        tables["table7_did"] = did_table(R["did"]["columns"])
        results["did"] = {k: v.to_dict(full) for k, v in R["did"]["columns"].items()}
    if "placebo" in R:
        tables["table8_placebo"] = regression_table(R["placebo"]["columns"])
        results["placebo"] = cols_dict(R["placebo"]["columns"])

    sweep_out = {k[len("sweep_"):]: v for k, v in R.items() if k.startswith("sweep_")}
    if sweep_out:
        results["sweep"] = {}
        for suffix, out in sweep_out.items():
            tables[f"sweep/h2_{suffix}"] = regression_table(out["h2"])
            entry = {"h2": cols_dict(out["h2"])}
            if "h3" in out:
                tables[f"sweep/h3_{suffix}"] = regression_table(out["h3"].columns)
                entry["h3"] = cols_dict(out["h3"].columns)
            results["sweep"][suffix] = entry
        tables["sweep/interaction_signs"] = interaction_signs(sweep_out)
        results["sweep_interaction_signs"] = tables["sweep/interaction_signs"]

    failures = est.get("failures", {})
    if failures:
        results["failures"] = {k: {"error": str(e), "exit_code": e.exit_code} for k, e in failures.items()}

    inp = pipe._memo.get("inputs")
    docs = txt.get("documents") if txt else None
    if inp is not None and inp.annotations is not None and docs is not None:
        pred = dict(zip(docs["doc_id"], docs["exaggeration"]))
        results["exaggeration_validation_spearman"] = inp.annotations.validate(pred)

    files = table_files(tables, outdir / "tables")
    figs = {}
    if docs is not None:
        figs["figure1"] = figure1_data(docs)
    if "h1" in R:
        figs["figure2"] = figure2_data(R["h1"]["columns"])
    if "did" in R:
        first = next(iter(R["did"]["columns"].values()))
        figs["figure3"] = figure3_data(first)
    names = {"figure1": "figure1_ai_disclosure", "figure2": "figure2_lag_effects", "figure3": "figure3_event_time"}
    for k, df in figs.items():
        files[k] = write_table(df, outdir / "figures" / f"{names[k]}.csv")
    results["figures"] = {k: v for k, v in figs.items()}
    if inp is not None and inp.truth is not None:
        write_atomic(outdir / "ground_truth.json", inp.truth.to_json() + "\n")
        files["ground_truth"] = outdir / "ground_truth.json"
    if pipe.cfg.options.write_panel:
        files["index_panel"] = write_table(frame, outdir / "index_panel.csv")
    files["results"] = write_results(results, outdir / "results.json")
    return files, results
