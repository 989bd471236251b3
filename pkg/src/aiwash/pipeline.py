"""Config-driven pipeline: inputs -> text scores -> indices -> event returns
-> estimation -> report bundle.

Stages cache their outputs under a content hash of everything they depend
on. Parallel work (per-quarter text scoring, independent estimation jobs)
is assembled in a fixed order, so the bundle does not depend on the
thread count. Wall-clock timings go to ``metadata.json`` only.
"""

from __future__ import annotations

import hashlib
import io
import json
import logging
import math
import os
import pickle
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Mapping

import numpy as np
import pandas as pd
import yaml

from . import __version__
from .errors import AiwashError, ConfigError, DataError
from .exaggeration import (
    AnnotationSet,
    CommandTransport,
    ExternalScorer,
    HttpTransport,
    Rubric,
    RubricScorer,
    score_document,
)
from .indices import IndexConfig, WashingThresholds, build_index_panel
from .panel import (
    CONTROL_FIELDS,
    PanelDataset,
    apply_sample_filters,
    decode_quarter,
    encode_quarter,
    load_panel,
    save_panel,
    winsorize_frame,
    write_atomic,
)
from .text import Lexicon, builtin_lexicon, dump_documents, load_documents, load_lexicon, score_corpus

log = logging.getLogger(__name__)

ENV_SCORER_ENDPOINT = "AIWASH_SCORER_ENDPOINT"
HYPOTHESES = ("h1", "h2", "h3", "h4", "iv", "did", "placebo")
THEMES = ("blockchain", "metaverse")
WINSOR_COLUMNS = (*CONTROL_FIELDS, "ded_hold", "trans_hold")
SWEEP_DEFAULT = ((0.75, 0.40), (0.65, 0.55))
# MRMI itself is missing for each firm's first three quarters (K1 uses a
# four-quarter window), so the gap rule looks at its non-window inputs
FILTER_CORE_VARS = ("awrs_std", "k2", "k3")


# ---------------------------------------------------------------------------
# configuration


def _strict(cls, doc, where):
    if doc is None:
        return cls()
    if not isinstance(doc, Mapping):
        raise ConfigError(f"{where} must be a mapping")
    names = {f.name for f in fields(cls)}
    unknown = set(doc) - names
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {sorted(unknown)}")
    return cls(**doc)


@dataclass
class InputPaths:
    panel: str | None = None
    schema: str | None = None
    documents: str | None = None
    returns: str | None = None
    market: str | None = None
    events: str | None = None
    holdings: str | None = None
    annotations: str | None = None
    lexicon_ai: str | None = None
    lexicon_blockchain: str | None = None
    lexicon_metaverse: str | None = None


@dataclass
class ScorerConfig:
    kind: str = "rubric"
    endpoint: str | None = None
    command: list | None = None
    rubric: str | None = None
    runs: int = 3
    timeout: float = 30.0
    retries: int = 3
    backoff: float = 0.5
    max_in_flight: int = 4


@dataclass
class Options:
    winsorize: list | None = field(default_factory=lambda: [0.01, 0.99])
    winsorize_returns: bool = False
    text_weighting: str = "tokens"
    sample_filters: bool = True
    max_missing_run: int = 2
    density_scope: str = "document"
    pca_scope: str = "pooled"
    min_cell: int = 3
    h1_lags: int = 4
    h1_split: str = "sa-tertile"
    car_window: list = field(default_factory=lambda: [-3, 3])
    bhar_horizon: int = 180
    percent: bool = False
    did_boundary: str = "2023Q1"
    did_outcomes: list = field(default_factory=lambda: ["awrs_std", "mrmi"])
    did_rule: str = "persistent"
    did_event_window: list | None = field(default_factory=lambda: [-4, 4])
    placebo_window: list = field(default_factory=lambda: ["2017Q1", "2021Q4"])
    placebo_share: float = 0.25
    h4_horizons: list = field(default_factory=lambda: [1, 2])
    institution_cutoffs: dict = field(default_factory=dict)
    weak_iv_threshold: float = 16.38
    full_vcov: bool = False
    write_panel: bool = False


@dataclass
class RunConfig:
    """Validated run configuration; see ``README.md`` for the key schema."""

    inputs: InputPaths = field(default_factory=InputPaths)
    synth: dict | None = None
    thresholds: list = field(default_factory=lambda: [0.70, 0.50])
    alternates: list = field(default_factory=lambda: [list(t) for t in SWEEP_DEFAULT])
    scorer: ScorerConfig = field(default_factory=ScorerConfig)
    estimate: dict = field(default_factory=lambda: {h: True for h in HYPOTHESES})
    options: Options = field(default_factory=Options)
    output: str = "out"
    seed: int = 0
    threads: int = 1
    cache: str | None = None
    base_dir: str = "."

    @classmethod
    def from_dict(cls, doc: Mapping | None, base_dir=".") -> "RunConfig":
        doc = dict(doc or {})
        known = {f.name for f in fields(cls)} - {"base_dir"}
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"unknown top-level config key(s): {sorted(unknown)}")
        cfg = cls(base_dir=str(base_dir))
        cfg.inputs = _strict(InputPaths, doc.pop("inputs", None), "inputs")
        cfg.scorer = _strict(ScorerConfig, doc.pop("scorer", None), "scorer")
        cfg.options = _strict(Options, doc.pop("options", None), "options")
        est = doc.pop("estimate", None)
        if est is not None:
            if not isinstance(est, Mapping):
                raise ConfigError("estimate must map hypothesis names to true/false")
            bad = set(est) - set(HYPOTHESES)
            if bad:
                raise ConfigError(f"unknown estimation toggle(s): {sorted(bad)}")
            cfg.estimate = {h: bool(est.get(h, True)) for h in HYPOTHESES}
        for k, v in doc.items():
            setattr(cfg, k, v)
        return cfg.validate()

    @classmethod
    def load(cls, path) -> "RunConfig":
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file {path} not found")
        try:
            doc = yaml.safe_load(path.read_text(encoding="utf-8"))
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: not valid YAML ({exc})") from exc
        if doc is not None and not isinstance(doc, Mapping):
            raise ConfigError(f"{path}: top level must be a mapping")
        return cls.from_dict(doc, base_dir=path.parent)

    def path(self, p) -> Path | None:
        if p is None:
            return None
        p = Path(p)
        return p if p.is_absolute() else Path(self.base_dir) / p

    def validate(self) -> "RunConfig":
        try:
            self.primary_thresholds()
            self.alternate_thresholds()
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid washing thresholds: {exc}") from exc
        for f in fields(InputPaths):
            p = getattr(self.inputs, f.name)
            if p is not None and not self.path(p).exists():
                raise ConfigError(f"inputs.{f.name}: {self.path(p)} does not exist")
        if self.synth is None and self.inputs.panel is None:
            raise ConfigError("config needs either inputs.panel or a synth section")
        if self.synth is not None and not isinstance(self.synth, Mapping):
            raise ConfigError("synth must be a mapping of generator settings")
        if self.scorer.kind not in ("rubric", "external"):
            raise ConfigError(f"scorer.kind must be 'rubric' or 'external', got {self.scorer.kind!r}")
        if self.scorer.kind == "external" and not (self.scorer_endpoint() or self.scorer.command):
            raise ConfigError(f"external scorer needs scorer.endpoint, scorer.command or ${ENV_SCORER_ENDPOINT}")
        if self.scorer.runs < 1:
            raise ConfigError("scorer.runs must be >= 1")
        o = self.options
        if o.winsorize is not None and not (len(o.winsorize) == 2 and 0 <= o.winsorize[0] < o.winsorize[1] <= 1):
            raise ConfigError("options.winsorize must be [p_low, p_high] with 0 <= p_low < p_high <= 1")
        if o.text_weighting not in ("tokens", "equal"):
            raise ConfigError("options.text_weighting must be 'tokens' or 'equal'")
        if o.winsorize_returns and o.winsorize is None:
            raise ConfigError("options.winsorize_returns needs options.winsorize bounds")
        if o.density_scope not in ("document", "matched"):
            raise ConfigError("options.density_scope must be 'document' or 'matched'")
        if o.pca_scope not in ("pooled", "quarter"):
            raise ConfigError("options.pca_scope must be 'pooled' or 'quarter'")
        if o.h1_split not in ("none", "sa-tertile"):
            raise ConfigError("options.h1_split must be 'none' or 'sa-tertile'")
        if len(o.car_window) != 2 or o.car_window[0] > o.car_window[1]:
            raise ConfigError("options.car_window must be [start, end] with start <= end")
        for q in (o.did_boundary, *o.placebo_window):
            try:
                encode_quarter(q)
            except Exception as exc:
                raise ConfigError(f"bad quarter label {q!r}") from exc
        if int(self.threads) < 1:
            raise ConfigError("threads must be >= 1")
        if self.synth is not None:
            self.dgp_config()
        return self

    def primary_thresholds(self) -> WashingThresholds:
        return WashingThresholds(*map(float, self.thresholds))

    def alternate_thresholds(self) -> tuple:
        return tuple(WashingThresholds(*map(float, a)) for a in self.alternates)

    def scorer_endpoint(self) -> str | None:
        return os.environ.get(ENV_SCORER_ENDPOINT) or self.scorer.endpoint

    def dgp_config(self):
        from .synth import DgpConfig

        doc = dict(self.synth or {})
        doc.setdefault("master_seed", int(self.seed))
        return DgpConfig.from_dict(doc)

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("base_dir")
        return d

    def digest(self) -> str:
        d = self.to_dict()
        for k in ("output", "threads", "cache"):
            d.pop(k)
        return _hash(d)


def _hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()


def file_digest(path) -> str:
    h = hashlib.sha256()
    path = Path(path)
    targets = sorted(path.rglob("*")) if path.is_dir() else [path]
    for p in targets:
        if p.is_file():
            h.update(str(p.relative_to(path) if path.is_dir() else p.name).encode())
            with open(p, "rb") as fh:
                for chunk in iter(lambda: fh.read(1 << 20), b""):
                    h.update(chunk)
    return h.hexdigest()


# ---------------------------------------------------------------------------
# inputs


@dataclass
class Inputs:
    panel: pd.DataFrame
    documents: list | None = None
    returns: pd.DataFrame | None = None
    market: pd.DataFrame | None = None
    events: pd.DataFrame | None = None
    return_panel: object = None
    holdings: pd.DataFrame | None = None
    annotations: AnnotationSet | None = None
    truth: object = None
    diagnostics: list = field(default_factory=list)


def _read_table(path) -> pd.DataFrame:
    path = Path(path)
    sep = "\t" if path.suffix.lower() in (".tsv", ".tab") else ","
    return pd.read_csv(path, sep=sep, dtype={"firm_id": str, "date": str, "event_date": str,
                                             "institution_id": str, "doc_id": str, "quarter": str})


def load_inputs(cfg: RunConfig) -> Inputs:
    ip = cfg.inputs
    panel = load_panel(cfg.path(ip.panel), cfg.path(ip.schema) if ip.schema else None)
    out = Inputs(panel=panel.frame, diagnostics=list(panel.diagnostics))
    if ip.documents:
        out.documents = load_documents(cfg.path(ip.documents))
    if ip.returns:
        out.returns = _read_table(cfg.path(ip.returns))
        for c in ("firm_id", "date", "return"):
            if c not in out.returns:
                raise DataError(f"returns file lacks column {c!r}")
    if ip.market:
        out.market = _read_table(cfg.path(ip.market))
    if ip.events:
        out.events = _read_table(cfg.path(ip.events))
        for c in ("firm_id", "event_date", "kind"):
            if c not in out.events:
                raise DataError(f"event file lacks column {c!r}")
    if ip.holdings:
        h = _read_table(cfg.path(ip.holdings))
        h["quarter"] = [encode_quarter(q) for q in h["quarter"]]
        out.holdings = h
    if ip.annotations:
        a = _read_table(cfg.path(ip.annotations))
        out.annotations = AnnotationSet.from_pairs(zip(a["doc_id"], a["score"]))
    return out


def synth_inputs(cfg: RunConfig) -> Inputs:
    from .synth import generate_documents, simulate, simulate_returns

    data = simulate(cfg.dgp_config())
    sim = simulate_returns(data)
    quarters = np.sort(data.latent["quarter"].unique())
    return Inputs(
        panel=data.panel.frame,
        documents=generate_documents(data),
        events=sim.events_table(quarters),
        return_panel=sim.return_panel(),
        truth=data.truth,
        returns=None,
        market=None,
    )


def write_synth_inputs(cfg: RunConfig, outdir) -> dict[str, Path]:
    """Generate synthetic inputs and write them as files plus a run config
    pointing at them."""
    from .synth import generate_documents, simulate, simulate_returns

    outdir = Path(outdir)
    data = simulate(cfg.dgp_config())
    sim = simulate_returns(data)
    quarters = np.sort(data.latent["quarter"].unique())
    files = {
        "panel": outdir / "panel.csv",
        "documents": outdir / "documents.jsonl",
        "returns": outdir / "returns.csv",
        "market": outdir / "market.csv",
        "events": outdir / "events.csv",
        "truth": outdir / "ground_truth.json",
        "config": outdir / "run.yaml",
    }
    save_panel(data.panel, files["panel"])
    dump_documents(generate_documents(data), files["documents"])
    rets, market = sim.long_tables()
    write_atomic(files["returns"], rets.to_csv(index=False, float_format="%.17g"))
    write_atomic(files["market"], market.to_csv(index=False, float_format="%.17g"))
    write_atomic(files["events"], sim.events_table(quarters).to_csv(index=False))
    write_atomic(files["truth"], data.truth.to_json() + "\n")
    run = {
        "inputs": {k: files[k].name for k in ("panel", "documents", "returns", "market", "events")},
        "output": "bundle",
        "seed": int(cfg.seed),
        "thresholds": list(cfg.thresholds),
        "alternates": [list(a) for a in cfg.alternates],
    }
    write_atomic(files["config"], yaml.safe_dump(run, sort_keys=False))
    return files


# ---------------------------------------------------------------------------
# text scoring


def make_scorer(cfg: RunConfig):
    s = cfg.scorer
    if s.kind == "rubric":
        rubric = Rubric.load(cfg.path(s.rubric)) if s.rubric else None
        return RubricScorer(rubric)
    endpoint = cfg.scorer_endpoint()
    transport = HttpTransport(endpoint) if endpoint else CommandTransport(list(s.command))
    return ExternalScorer(transport, timeout=s.timeout, retries=s.retries, backoff=s.backoff,
                          scorer_id=f"external:{endpoint or ' '.join(s.command)}", max_in_flight=s.max_in_flight)


def _lexicon(cfg: RunConfig, theme: str) -> Lexicon:
    p = getattr(cfg.inputs, f"lexicon_{theme}")
    return load_lexicon(cfg.path(p)) if p else builtin_lexicon(theme)


def _by_quarter(docs) -> list[list]:
    groups: dict[int, list] = {}
    for d in docs:
        groups.setdefault(d.quarter, []).append(d)
    return [groups[q] for q in sorted(groups)]


def score_documents(docs, lex: Lexicon, scorer, runs: int, scope: str, pool: ThreadPoolExecutor | None) -> pd.DataFrame:
    """Document-level Base_TFIDF (per-quarter IDF) and exaggeration."""
    if not docs:
        raise DataError("document collection is empty")
    mapper = pool.map if pool is not None else map
    parts = list(mapper(lambda ds: score_corpus(ds, lex, scope), _by_quarter(docs)))
    table = pd.concat(parts, ignore_index=True)
    by_id = {d.doc_id: d for d in docs}
    ordered = [by_id[i] for i in table["doc_id"]]
    scores = list(mapper(lambda d: score_document(d.figure_pairs, scorer, runs), ordered))
    table["exaggeration"] = [s.value for s in scores]
    table["exaggeration_missing"] = [s.missing_cause or "" for s in scores]
    return table.sort_values(["firm_id", "quarter", "doc_id"], kind="mergesort").reset_index(drop=True)


def firm_quarter_text(doc_scores: pd.DataFrame, value_cols=("base_tfidf", "exaggeration"),
                      weighting: str = "tokens") -> pd.DataFrame:
    """Mean over a firm-quarter's documents (missing values skipped), weighted
    by token count or, with ``weighting="equal"``, unweighted."""
    if weighting not in ("tokens", "equal"):
        raise ValueError(f"unknown weighting {weighting!r}")
    d = doc_scores[["firm_id", "quarter", "n_tokens", *value_cols]].copy()
    out = d.groupby(["firm_id", "quarter"], sort=True).size().rename("n_docs").to_frame()
    base = d["n_tokens"].astype(float) if weighting == "tokens" else pd.Series(1.0, index=d.index)
    for c in value_cols:
        ok = d[c].notna()
        w = base.where(ok, 0.0)
        num = (d[c].fillna(0.0) * w).groupby([d["firm_id"], d["quarter"]]).sum()
        den = w.groupby([d["firm_id"], d["quarter"]]).sum()
        out[c] = (num / den.where(den > 0)).reindex(out.index)
    return out.reset_index()


def theme_scores(docs, cfg: RunConfig, pool) -> pd.DataFrame:
    lo, hi = (encode_quarter(q) for q in cfg.options.placebo_window)
    window = [d for d in docs if lo <= d.quarter <= hi]
    if not window:
        raise DataError(f"no documents inside the placebo window {cfg.options.placebo_window}")
    parts = []
    for theme in THEMES:
        lex = _lexicon(cfg, theme)
        mapper = pool.map if pool is not None else map
        t = pd.concat(list(mapper(lambda ds: score_corpus(ds, lex, cfg.options.density_scope), _by_quarter(window))),
                      ignore_index=True)
        fq = firm_quarter_text(t, ("base_tfidf",))
        fq["theme"] = theme
        parts.append(fq[["firm_id", "quarter", "theme", "base_tfidf"]])
    return pd.concat(parts, ignore_index=True)


# ---------------------------------------------------------------------------
# pipeline


@dataclass
class StageOutcome:
    name: str
    status: str                 # ok | cached | failed | skipped
    seconds: float = 0.0
    error: str | None = None
    exit_code: int = 0


@dataclass
class RunResult:
    bundle_dir: Path
    files: dict
    results: dict
    stages: list
    exit_code: int

    def stage(self, name) -> StageOutcome | None:
        return next((s for s in self.stages if s.name == name), None)


class Pipeline:
    """Stage runner with a content-hash cache and ordered parallel jobs."""

    def __init__(self, cfg: RunConfig, threads: int | None = None, cache_dir=None, out_dir=None):
        self.cfg = cfg
        self.threads = int(threads or cfg.threads or 1)
        cache = cache_dir if cache_dir is not None else cfg.cache
        self.cache_dir = Path(cache) if cache else None
        self.out_dir = Path(out_dir) if out_dir is not None else cfg.path(cfg.output)
        self.stages: list[StageOutcome] = []
        self.keys: dict[str, str] = {}
        self._memo: dict[str, object] = {}
        self.pool = ThreadPoolExecutor(max_workers=self.threads) if self.threads > 1 else None

    def close(self):
        if self.pool is not None:
            self.pool.shutdown()

    # -- cache ---------------------------------------------------------------

    def _stage(self, name: str, key_parts, fn: Callable[[], object]):
        if name in self._memo:
            return self._memo[name]
        key = _hash([name, __version__, key_parts])
        self.keys[name] = key
        t0 = time.perf_counter()
        path = self.cache_dir / f"{name}-{key[:24]}.pkl" if self.cache_dir else None
        if path is not None and path.is_file():
            with open(path, "rb") as fh:
                value = pickle.load(fh)
            self.stages.append(StageOutcome(name, "cached", time.perf_counter() - t0))
        else:
            try:
                value = fn()
            except AiwashError as exc:
                self.stages.append(StageOutcome(name, "failed", time.perf_counter() - t0, str(exc), exc.exit_code))
                raise
            if path is not None:
                path.parent.mkdir(parents=True, exist_ok=True)
                buf = io.BytesIO()
                pickle.dump(value, buf, protocol=pickle.HIGHEST_PROTOCOL)
                tmp = path.with_name(f".{path.name}.tmp{os.getpid()}")
                tmp.write_bytes(buf.getvalue())
                os.replace(tmp, path)
            self.stages.append(StageOutcome(name, "ok", time.perf_counter() - t0))
        self._memo[name] = value
        return value

    # -- stages --------------------------------------------------------------

    def inputs(self) -> Inputs:
        cfg = self.cfg
        if cfg.synth is not None:
            key = {"synth": cfg.dgp_config().to_dict()}
            return self._stage("inputs", key, lambda: synth_inputs(cfg))
        key = {f.name: (file_digest(cfg.path(getattr(cfg.inputs, f.name))) if getattr(cfg.inputs, f.name) else None)
               for f in fields(InputPaths)}
        return self._stage("inputs", key, lambda: load_inputs(cfg))

    def text(self) -> dict:
        inp = self.inputs()
        cfg = self.cfg

        def run():
            if not inp.documents:
                return {"documents": None, "firm_quarter": None, "themes": None}
            lex = _lexicon(cfg, "ai")
            docs = score_documents(inp.documents, lex, make_scorer(cfg), cfg.scorer.runs,
                                   cfg.options.density_scope, self.pool)
            fq = firm_quarter_text(docs, weighting=cfg.options.text_weighting)
            themes = None
            if cfg.estimate.get("placebo"):
                try:
                    themes = theme_scores(inp.documents, cfg, self.pool)
                except DataError as exc:
                    themes = str(exc)
            return {"documents": docs, "firm_quarter": fq, "themes": themes}

        lexkey = {t: _lexicon(cfg, t).digest() for t in ("ai", *THEMES)}
        key = [self.keys.get("inputs"), asdict(cfg.scorer), cfg.options.density_scope, cfg.options.text_weighting, lexkey,
               cfg.options.placebo_window, cfg.estimate.get("placebo"),
               cfg.scorer_endpoint() if cfg.scorer.kind == "external" else None]
        return self._stage("text", key, run)

    def index(self):
        inp = self.inputs()
        txt = self.text()
        cfg = self.cfg
        o = cfg.options

        def build(frame):
            icfg = IndexConfig(cfg.primary_thresholds(), cfg.alternate_thresholds(), o.pca_scope, o.min_cell)
            return build_index_panel(frame, txt["firm_quarter"], icfg)

        def run():
            frame = inp.panel.copy()
            if inp.holdings is not None:
                from .econometrics.specs import InstitutionCutoffs, classify_institutions, firm_holdings

                classes = classify_institutions(inp.holdings, InstitutionCutoffs(**o.institution_cutoffs))
                fh = firm_holdings(inp.holdings, classes)
                frame = frame.drop(columns=["ded_hold", "trans_hold"]).merge(fh, on=["firm_id", "quarter"], how="left")
                frame[["ded_hold", "trans_hold"]] = frame[["ded_hold", "trans_hold"]].fillna(0.0)
            if o.winsorize is not None:
                frame = winsorize_frame(frame, [c for c in WINSOR_COLUMNS if c in frame], *o.winsorize)
            if txt["firm_quarter"] is None and "base_tfidf" not in frame:
                raise DataError("no documents and no base_tfidf column: AWRS cannot be computed")
            ip = build(frame)
            report = None
            if o.sample_filters:
                kept, report = apply_sample_filters(PanelDataset(ip.frame), core_vars=FILTER_CORE_VARS,
                                                    max_missing_run=o.max_missing_run)
                if report.n_out < report.n_in:
                    ip = build(frame[frame["firm_id"].isin(kept.frame["firm_id"].unique())])
            return {"index": ip, "filters": report.as_dict() if report else None}

        key = [self.keys.get("text"), list(cfg.thresholds), [list(a) for a in cfg.alternates],
               o.pca_scope, o.min_cell, o.winsorize, o.sample_filters, o.max_missing_run, o.institution_cutoffs]
        return self._stage("index", key, run)

    def events(self) -> dict:
        inp = self.inputs()
        idx = self.index()
        o = self.cfg.options

        def run():
            from .econometrics.specs import compute_event_returns, exposure_event_quarters, quarterly_returns_from_daily

            frame = idx["index"].frame
            have = inp.return_panel is not None or (inp.returns is not None and inp.market is not None)
            if not have or inp.events is None:
                reason = "no returns/market/events inputs"
                if inp.returns is not None and inp.market is None:
                    reason = "market return series is missing"
                return {"frame": frame, "quarterly": None, "exposure": None, "note": reason}
            rp = inp.return_panel
            if rp is None:
                from .econometrics.events import ReturnPanel

                rp = ReturnPanel.from_long(inp.returns, inp.market)
            out = compute_event_returns(frame, None, None, inp.events, tuple(o.car_window), o.bhar_horizon, panel=rp)
            if o.winsorize_returns:
                out = winsorize_frame(out, ["car", "bhar"], *o.winsorize)
            q = quarterly_returns_from_daily(None, None, panel=rp)
            out = out.merge(q, on=["firm_id", "quarter"], how="left")
            ex = exposure_event_quarters(inp.events)
            return {"frame": out, "quarterly": q, "exposure": ex if len(ex) else None, "note": None}

        key = [self.keys.get("index"), o.car_window, o.bhar_horizon, o.winsorize_returns]
        return self._stage("events", key, run)

    # -- estimation ----------------------------------------------------------

    def _jobs(self, ev: dict, txt: dict) -> dict[str, Callable[[], dict]]:
        from .econometrics import did_estimate, persistent_washing_treatment
        from .econometrics import specs

        cfg, o = self.cfg, self.cfg.options
        frame = ev["frame"]
        th = cfg.primary_thresholds()

        def h1():
            return {"columns": specs.estimate_h1(frame, o.h1_lags, o.h1_split)}

        def h2():
            out = {"columns": specs.estimate_h2(frame)}
            if "ret_adj" in frame:
                out["returns"] = specs.estimate_h2_returns(frame)
            return out

        def h3():
            if "car" not in frame:
                raise DataError(f"H3 needs event returns: {ev['note']}")
            res = specs.estimate_h3(frame, percent=o.percent, quarterly_returns=ev["quarterly"] if ev["exposure"] is not None else None,
                                    exposure_events=ev["exposure"])
            return {"result": res}

        def h4():
            cols = {}
            for h in o.h4_horizons:
                for sub in ("all", "high_buzz"):
                    cols[f"t+{h} {sub}"] = specs.estimate_h4(frame, int(h), sub)
            return {"columns": cols}

        def iv():
            return {"columns": specs.estimate_iv_table(frame, weak_threshold=o.weak_iv_threshold,
                                                       include_bhar="bhar" in frame)}

        def did():
            boundary = encode_quarter(o.did_boundary)
            if o.did_rule == "persistent":
                treat = persistent_washing_treatment(frame, boundary, th.rhetoric_quantile, th.action_quantile,
                                                     "awrs_std", "mrmi")
                treat.name = f"persistent washing {th.suffix}"
            else:
                treat = o.did_rule
            win = tuple(o.did_event_window) if o.did_event_window else None
            return {"columns": {out: did_estimate(frame, out, treat, boundary, event_window=win)
                                for out in o.did_outcomes}}

        def placebo():
            themes = txt.get("themes")
            if themes is None:
                raise DataError("placebo needs disclosure documents for the theme lexicons")
            if isinstance(themes, str):
                raise DataError(themes)
            lo, hi = (encode_quarter(q) for q in o.placebo_window)
            return {"columns": specs.placebo_historical(frame, themes, (lo, hi), share=o.placebo_share)}

        return {"h1": h1, "h2": h2, "h3": h3, "h4": h4, "iv": iv, "did": did, "placebo": placebo}

    def _sweep_jobs(self, ev: dict) -> dict[str, Callable[[], dict]]:
        from .econometrics import specs

        frame = ev["frame"]
        jobs = {}
        for th in (self.cfg.primary_thresholds(), *self.cfg.alternate_thresholds()):
            col = "washing" if th == self.cfg.primary_thresholds() else f"washing_{th.suffix}"

            def job(col=col):
                out = {"h2": specs.estimate_h2(frame, washing=col)}
                if "car" in frame:
                    out["h3"] = specs.estimate_h3(frame, washing=col, percent=self.cfg.options.percent)
                return out

            jobs[f"sweep_{th.suffix}"] = job
        return jobs

    def estimate(self, which=None, sweep: bool = False) -> dict:
        ev = self.events()
        txt = self.text()
        jobs = self._jobs(ev, txt)
        names = [h for h in HYPOTHESES if (which is None and self.cfg.estimate.get(h)) or (which and h in which)]
        todo = {n: jobs[n] for n in names}
        if sweep:
            todo.update(self._sweep_jobs(ev))
        key_base = [self.keys.get("events"), asdict(self.cfg.options), list(self.cfg.thresholds),
                    [list(a) for a in self.cfg.alternates]]

        def run_one(name):
            try:
                return name, self._stage(f"estimate_{name}", key_base, todo[name]), None
            except AiwashError as exc:
                return name, None, exc

        order = list(todo)
        mapper = self.pool.map if self.pool is not None else map
        results, failures = {}, {}
        for name, val, exc in mapper(run_one, order):
            if exc is None:
                results[name] = val
            else:
                failures[name] = exc
        return {"results": results, "failures": failures}

    # -- full run ------------------------------------------------------------

    def run(self, stages=("estimate", "report"), which=None, sweep: bool = False) -> RunResult:
        from .report import build_bundle

        est = {"results": {}, "failures": {}}
        try:
            if "estimate" in stages:
                est = self.estimate(which, sweep)
            else:
                self.events() if "events" in stages else self.index()
        except AiwashError:
            return self._finish({}, {})
        files, results = build_bundle(self, est, self.out_dir, sweep=sweep)
        return self._finish(files, results)

    def _finish(self, files, results) -> RunResult:
        code = max((s.exit_code for s in self.stages), default=0)
        meta = self.metadata()
        if self.out_dir is not None and (files or self.stages):
            write_atomic(self.out_dir / "metadata.json", json.dumps(meta, sort_keys=True, indent=1, default=str) + "\n")
        self.close()
        return RunResult(self.out_dir, files, results, list(self.stages), code)

    def metadata(self) -> dict:
        cfg = self.cfg
        lex = {}
        for t in ("ai", *THEMES):
            try:
                lex[t] = _lexicon(cfg, t).digest()
            except AiwashError as exc:
                lex[t] = f"unavailable: {exc}"
        return {
            "software_version": __version__,
            "config_hash": cfg.digest(),
            "lexicon_hashes": lex,
            "threads": self.threads,
            "cache_dir": str(self.cache_dir) if self.cache_dir else None,
            "stage_keys": dict(self.keys),
            "stages": [asdict(s) for s in self.stages],
            "timings_seconds": {s.name: round(s.seconds, 6) for s in self.stages},
            "created_unix": time.time(),
        }


def run_pipeline(cfg: RunConfig, threads: int | None = None, cache_dir=None, out_dir=None,
                 sweep: bool = False) -> RunResult:
    """Run every enabled stage and write the report bundle."""
    return Pipeline(cfg, threads, cache_dir, out_dir).run(sweep=sweep)
