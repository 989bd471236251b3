"""Seeded synthetic data with known structure.

The generator draws latent firm types first, then builds rhetoric (AWRS)
and investment (MRMI) processes, the Washing flag, holdings, patents,
daily returns and disclosure documents on top of them. Every random draw
comes from a stream keyed by the entity it belongs to, so output does not
depend on generation order or worker count.

Latent frame conventions: ``awrs_std`` and ``mrmi`` are the structural
processes themselves (unit-scale by construction, not re-standardized), so
estimated coefficients are directly comparable to ``TrueParams``.
"""

from __future__ import annotations

import datetime as _dt
import json
import math
from dataclasses import asdict, dataclass, field, fields
from functools import lru_cache
from typing import Mapping

import numpy as np
import pandas as pd
from scipy import stats

from .errors import ConfigError, DataError
from .exaggeration import FigureTextPair
from .indices import WashingThresholds, forward_average, washing_flag
from .panel import (
    CONTROL_FIELDS,
    OPTIONAL_FIELDS,
    REQUIRED_FIELDS,
    PanelDataset,
    _zscore_codes,
    decode_quarter,
    encode_quarter,
    group_codes,
    quantile_type7,
)
from .rng import stream
from .text import DisclosureDocument, builtin_lexicon, tokenize

BURN_IN = 4
DAYS_PER_QUARTER = 63
EXTRA_QUARTERS = 4

# control: (mean, between-firm sd, within-firm sd)
CONTROL_SPEC = {
    "roa": (0.04, 0.04, 0.02),
    "lev": (0.45, 0.15, 0.03),
    "size": (7.0, 1.0, 0.05),
    "growth": (0.10, 0.10, 0.15),
    "capex": (0.05, 0.02, 0.01),
    "ocf": (0.06, 0.04, 0.03),
    "tobin_q": (2.0, 0.6, 0.2),
    "analyst": (1.5, 0.6, 0.2),
    "inst_own": (0.40, 0.15, 0.03),
}
DEFAULT_GAMMAS = {"roa": 0.5, "lev": -0.2, "size": 0.05, "growth": 0.1, "capex": 1.0,
                  "ocf": 0.3, "tobin_q": 0.05, "analyst": 0.05, "inst_own": 0.1}

FILLER = (
    "the company reported steady operating results across core business segments with higher sales "
    "volume in domestic markets management expects continued investment capacity expansion and customer "
    "service quality during period cash flow remained stable while costs declined due to procurement "
    "efficiency new contracts signed regional partners inventory levels production lines upgraded "
    "logistics expanded dividend policy unchanged board approved plan for next fiscal year orders "
    "backlog improved margin gross profit rose overseas revenue share of total"
).split()

THEME_HYPE = {
    "blockchain": {2017: 0.0, 2018: 0.6, 2019: 0.2, 2020: -0.2, 2021: -0.4},
    "metaverse": {2017: -0.6, 2018: -0.4, 2019: -0.2, 2020: 0.1, 2021: 0.6},
}


# ---------------------------------------------------------------------------
# configuration


def _strict(cls, doc: Mapping, where: str):
    names = {f.name for f in fields(cls)}
    unknown = set(doc) - names
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {sorted(unknown)}")
    return cls(**doc)


@dataclass
class TrueParams:
    lag_betas: tuple = (0.0, 0.0, 0.0, 0.0)
    between_firm_corr: float = 0.4
    ded_mrmi_loading: float = 0.02
    ded_washing_interaction: float = -0.02
    trans_awrs_loading: float = 0.01
    trans_washing_interaction: float = 0.01
    car_premium: float = 0.01
    car_washing_premium: float = 0.0
    bhar_penalty: float = -0.05
    did_tau: float = 0.25
    h4_crowdout: float = -0.15
    catering_factor_loading: float = 0.5
    catering_awrs_corr: float = 0.5
    catering_mrmi_corr: float = 0.0
    exposure_drift: float = -0.02
    control_gammas: dict = field(default_factory=lambda: dict(DEFAULT_GAMMAS))


@dataclass
class NoiseSds:
    firm_awrs: float = 0.7
    firm_mrmi: float = 0.7
    industry_year: float = 0.14
    quarter: float = 0.2
    province_quarter: float = 0.3
    awrs: float = 0.7
    mrmi: float = 0.7
    firm_ded: float = 0.05
    ded: float = 0.02
    firm_trans: float = 0.03
    trans: float = 0.02
    returns: float = 0.015
    market: float = 0.012
    patents: float = 0.1
    theme: float = 0.3
    k: float = 0.1


@dataclass
class DgpConfig:
    n_firms: int = 300
    n_quarters: int = 28
    n_industries: int = 10
    n_provinces: int = 8
    master_seed: int = 0
    start_quarter: str = "2017Q1"
    did_boundary: str = "2023Q1"
    placebo_window: tuple = ("2017Q1", "2021Q4")
    true_params: TrueParams = field(default_factory=TrueParams)
    noise_sds: NoiseSds = field(default_factory=NoiseSds)
    endogeneity_rho: float = 0.5
    instrument_strength: float = 0.5
    iv_beta: float = 1.0
    awrs_fwd_rank_corr: float = 0.0
    thresholds: tuple = (0.70, 0.50)
    doc_tokens: int = 150
    pairs_per_doc: int = 2
    flip_noise: float = 0.15
    exposure_share: float = 0.5

    def validate(self) -> "DgpConfig":
        for name in ("n_firms", "n_quarters", "n_industries", "n_provinces"):
            if int(getattr(self, name)) < 2:
                raise ConfigError(f"{name} must be >= 2")
        tp, ns = self.true_params, self.noise_sds
        if len(tp.lag_betas) != 4:
            raise ConfigError("lag_betas must have 4 entries")
        for name in ("between_firm_corr", "catering_awrs_corr", "catering_mrmi_corr"):
            v = getattr(tp, name)
            if not -1 < v < 1:
                raise ConfigError(f"{name} must lie in (-1, 1), got {v}")
        if not -1 < self.awrs_fwd_rank_corr < 1:
            raise ConfigError("awrs_fwd_rank_corr must lie in (-1, 1)")
        if self.awrs_fwd_rank_corr != 0 and any(b != 0 for b in tp.lag_betas):
            raise ConfigError("awrs_fwd_rank_corr requires zero lag_betas")
        for f in fields(ns):
            v = getattr(ns, f.name)
            if not (math.isfinite(v) and v >= 0):
                raise ConfigError(f"noise sd {f.name} must be finite and >= 0")
        if not 0 <= self.flip_noise <= 0.5:
            raise ConfigError("flip_noise must lie in [0, 0.5]")
        if not 0 <= self.exposure_share <= 1:
            raise ConfigError("exposure_share must lie in [0, 1]")
        if self.doc_tokens < 20 or self.pairs_per_doc < 0:
            raise ConfigError("doc_tokens must be >= 20 and pairs_per_doc >= 0")
        unknown = set(tp.control_gammas) - set(CONTROL_FIELDS)
        if unknown:
            raise ConfigError(f"control_gammas for unknown control(s): {sorted(unknown)}")
        WashingThresholds(*self.thresholds)
        for q in (self.start_quarter, self.did_boundary, *self.placebo_window):
            encode_quarter(q)
        return self

    @classmethod
    def from_dict(cls, doc: Mapping) -> "DgpConfig":
        doc = dict(doc)
        tp = _strict(TrueParams, doc.pop("true_params", {}) or {}, "true_params")
        tp.lag_betas = tuple(tp.lag_betas)
        ns = _strict(NoiseSds, doc.pop("noise_sds", {}) or {}, "noise_sds")
        cfg = _strict(cls, doc, "synth config")
        cfg.true_params, cfg.noise_sds = tp, ns
        cfg.placebo_window = tuple(cfg.placebo_window)
        cfg.thresholds = tuple(cfg.thresholds)
        return cfg.validate()

    def to_dict(self) -> dict:
        d = asdict(self)
        d["true_params"]["lag_betas"] = list(self.true_params.lag_betas)
        d["placebo_window"] = list(self.placebo_window)
        d["thresholds"] = list(self.thresholds)
        return d

    def replace(self, **kw) -> "DgpConfig":
        d = self.to_dict()
        tp = {**d.pop("true_params"), **kw.pop("true_params", {})}
        ns = {**d.pop("noise_sds"), **kw.pop("noise_sds", {})}
        d.update(kw)
        return DgpConfig.from_dict({**d, "true_params": tp, "noise_sds": ns})


@dataclass
class GroundTruth:
    config: dict
    true_params: dict
    treated_firms: list
    catering: dict
    exposure_events: list
    washing_rate: float
    did_boundary: int
    notes: list = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=1, default=float)


@dataclass
class SynthData:
    config: DgpConfig
    latent: pd.DataFrame
    truth: GroundTruth

    @property
    def panel(self) -> PanelDataset:
        cols = list(REQUIRED_FIELDS) + [c for c in OPTIONAL_FIELDS if c in self.latent]
        return PanelDataset(self.latent[cols].copy())


# ---------------------------------------------------------------------------
# helpers


def industry_code(g: int) -> str:
    return f"{'CIKMD'[g % 5]}{10 + g}"


def firm_code(i: int) -> str:
    return f"F{i:05d}"


def _corr_factor(tp: TrueParams) -> np.ndarray:
    R = np.array([
        [1.0, tp.catering_awrs_corr, tp.catering_mrmi_corr],
        [tp.catering_awrs_corr, 1.0, tp.between_firm_corr],
        [tp.catering_mrmi_corr, tp.between_firm_corr, 1.0],
    ])
    w, v = np.linalg.eigh(R)
    if w.min() < -1e-12:
        raise ConfigError(f"implied latent correlation matrix is not positive semidefinite (min eigenvalue {w.min():.3g})")
    return v * np.sqrt(np.clip(w, 0, None))


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


@lru_cache(maxsize=256)
def quarter_dates(code: int) -> tuple:
    """The first ``DAYS_PER_QUARTER`` business days of a calendar quarter, ISO formatted."""
    year, q = divmod(int(code), 4)
    start = _dt.date(year, 3 * q + 1, 1)
    days = pd.bdate_range(start, periods=DAYS_PER_QUARTER)
    return tuple(d.strftime("%Y-%m-%d") for d in days)


# ---------------------------------------------------------------------------
# panel


def simulate(cfg: DgpConfig | None = None) -> SynthData:
    """Latent firm-quarter frame with every structural variable."""
    cfg = (cfg or DgpConfig()).validate()
    tp, ns = cfg.true_params, cfg.noise_sds
    N, T, B = int(cfg.n_firms), int(cfg.n_quarters), BURN_IN
    seed = int(cfg.master_seed)
    q0 = encode_quarter(cfg.start_quarter)
    allq = q0 - B + np.arange(T + B)
    quarters = allq[B:]
    L = _corr_factor(tp)
    ctrl_names = list(CONTROL_SPEC)
    nc = len(ctrl_names)

    z3 = np.empty((N, 3))
    province = np.empty(N, dtype=int)
    age0 = np.empty(N)
    ctrl_mu = np.empty((N, nc))
    ctrl_w = np.empty((N, T, nc))
    hold_fe = np.empty((N, 2))
    hold_e = np.empty((N, T, 2))
    u = np.empty((N, T + B))
    e = np.empty((N, T))
    kn = np.empty((N, T, 3))
    pois_u = np.empty((N, T, 2))
    theme_e = np.empty((N, T, 2))
    exag_z = np.empty((N, T))
    level = np.empty((N, 3))
    pat_w = np.empty(N)
    for i in range(N):
        g = stream(seed, "firm", i)
        z3[i] = L @ g.standard_normal(3)
        province[i] = g.integers(cfg.n_provinces)
        age0[i] = g.uniform(2.0, 25.0)
        ctrl_mu[i] = g.standard_normal(nc)
        ctrl_w[i] = g.standard_normal((T, nc))
        hold_fe[i] = g.standard_normal(2)
        hold_e[i] = g.standard_normal((T, 2))
        u[i] = g.standard_normal(T + B)
        e[i] = g.standard_normal(T)
        kn[i] = g.standard_normal((T, 3))
        pois_u[i] = g.random((T, 2))
        theme_e[i] = g.standard_normal((T, 2))
        exag_z[i] = g.standard_normal(T)
        level[i] = g.standard_normal(3)
        pat_w[i] = g.uniform(0.5, 1.5)

    ind = np.arange(N) % cfg.n_industries
    catering, a, m = z3[:, 0], ns.firm_awrs * z3[:, 1], ns.firm_mrmi * z3[:, 2]
    years_all = np.unique(allq // 4)
    iota = np.zeros((cfg.n_industries, len(years_all)))
    for g_ in range(cfg.n_industries):
        for j, y in enumerate(years_all):
            iota[g_, j] = ns.industry_year * stream(seed, "industry_year", g_, int(y)).standard_normal()
    delta = np.array([ns.quarter * stream(seed, "quarter", int(q)).standard_normal() for q in quarters])
    # regional hype shared by every firm in a province; drives the peer instrument
    psi = np.array([[ns.province_quarter * stream(seed, "province_quarter", p, int(q)).standard_normal()
                     for q in allq] for p in range(cfg.n_provinces)])

    # latent washing type: high firm-level rhetoric, low firm-level investment within industry
    treat = np.zeros(N, dtype=int)
    for g_ in range(cfg.n_industries):
        idx = np.flatnonzero(ind == g_)
        if len(idx) == 0:
            continue
        hi = quantile_type7(a[idx], 0.70)
        lo = quantile_type7(m[idx], 0.50)
        treat[idx] = ((a[idx] >= hi) & (m[idx] <= lo)).astype(int)
    boundary = encode_quarter(cfg.did_boundary)
    post_all = (allq >= boundary).astype(float)

    year_idx = np.searchsorted(years_all, allq // 4)
    awrs_all = (a[:, None] + iota[ind][:, year_idx] + psi[province] + tp.did_tau * treat[:, None] * post_all[None, :]
                + ns.awrs * u)

    mean = np.array([CONTROL_SPEC[c][0] for c in ctrl_names])
    sdb = np.array([CONTROL_SPEC[c][1] for c in ctrl_names])
    sdw = np.array([CONTROL_SPEC[c][2] for c in ctrl_names])
    X = mean + sdb * ctrl_mu[:, None, :] + sdw * ctrl_w
    X[..., ctrl_names.index("lev")] = np.clip(X[..., ctrl_names.index("lev")], 0.0, 1.5)
    X[..., ctrl_names.index("inst_own")] = np.clip(X[..., ctrl_names.index("inst_own")], 0.0, 1.0)
    X[..., ctrl_names.index("analyst")] = np.clip(X[..., ctrl_names.index("analyst")], 0.0, None)
    X[..., ctrl_names.index("size")] = np.clip(X[..., ctrl_names.index("size")], 0.5, None)
    gam = np.array([tp.control_gammas.get(c, 0.0) for c in ctrl_names])

    mrmi = m[:, None] + delta[None, :] + X @ gam + ns.mrmi * e
    for h, beta in enumerate(tp.lag_betas, start=1):
        if beta:
            mrmi = mrmi + beta * awrs_all[:, B - h:B - h + T]
    awrs = awrs_all[:, B:]

    fid = np.array([firm_code(i) for i in range(N)])
    df = pd.DataFrame({
        "firm_id": np.repeat(fid, T),
        "quarter": np.tile(quarters, N).astype(np.int64),
        "industry": np.repeat([industry_code(g_) for g_ in ind], T),
        "province": np.repeat([f"P{p:02d}" for p in province], T),
    })
    for k, c in enumerate(ctrl_names):
        df[c] = X[..., k].ravel()
    df["firm_age"] = (age0[:, None] + np.arange(T)[None, :] / 4.0).ravel()
    df["mrmi"] = mrmi.ravel()
    df["mrmi_fwd_avg"] = forward_average(df, "mrmi")
    if cfg.awrs_fwd_rank_corr != 0:
        # Gaussian copula: Pearson target giving the requested Spearman correlation
        r = 2.0 * math.sin(math.pi * cfg.awrs_fwd_rank_corr / 6.0)
        fwd = df["mrmi_fwd_avg"].to_numpy()
        ok = ~np.isnan(fwd)
        codes = group_codes(df.loc[ok], "quarter")
        zf = _zscore_codes(fwd[ok], codes)
        flat = awrs.ravel().copy()
        # strip the part of AWRS already related to forward MRMI so the mix hits r exactly
        za = _zscore_codes(flat[ok], codes)
        slope = np.bincount(codes, za * zf) / np.bincount(codes, zf * zf)
        resid = _zscore_codes(za - slope[codes] * zf, codes)
        flat[ok] = r * zf + math.sqrt(1 - r * r) * resid
        awrs = flat.reshape(N, T)
    df["awrs_std"] = awrs.ravel()
    th = WashingThresholds(*cfg.thresholds)
    df["washing"] = washing_flag(df["awrs_std"], df["mrmi_fwd_avg"],
                                 (df["industry"].to_numpy(), df["quarter"].to_numpy()), th)
    W = np.nan_to_num(df["washing"].to_numpy().reshape(N, T))
    df["treat_latent"] = np.repeat(treat, T)
    df["post"] = np.tile((quarters >= boundary).astype(int), N)
    df["catering"] = np.repeat(catering, T)

    # holdings respond to last quarter's indices
    aw_prev = np.zeros((N, T))
    aw_prev[:, 1:] = awrs[:, :-1]
    mr_prev = np.zeros((N, T))
    mr_prev[:, 1:] = mrmi[:, :-1]
    w_prev = np.zeros((N, T))
    w_prev[:, 1:] = W[:, :-1]
    ded = (0.20 + ns.firm_ded * hold_fe[:, [0]] + tp.ded_mrmi_loading * mr_prev
           + tp.ded_washing_interaction * aw_prev * w_prev + ns.ded * hold_e[..., 0])
    trans = (0.10 + ns.firm_trans * hold_fe[:, [1]] + tp.trans_awrs_loading * aw_prev
             + tp.trans_washing_interaction * aw_prev * w_prev + ns.trans * hold_e[..., 1])
    df["ded_hold"] = np.clip(ded, 0.0, 0.6).ravel()
    df["trans_hold"] = np.clip(trans, 0.0, 0.35).ravel()

    # investment inputs whose ratios track the latent MRMI
    rev = np.exp(5.0 + 0.8 * level[:, [0]] + 0.05 * kn[..., 0]) * 1e6
    k2 = np.exp(-3.0 + 0.25 * mrmi + ns.k * kn[..., 1])
    intang_begin = np.empty((N, T))
    intang_end = np.empty((N, T))
    amort = np.empty((N, T))
    begin = 0.5 * rev[:, 0]
    for t in range(T):
        intang_begin[:, t] = begin
        amort[:, t] = 0.02 * begin
        intang_end[:, t] = begin - amort[:, t] + k2[:, t] * rev[:, t]
        begin = intang_end[:, t]
    total_comp = np.exp(3.0 + 0.3 * level[:, [1]] + 0.05 * kn[..., 2]) * 1e6
    k3 = _sigmoid(-1.5 + 0.4 * mrmi + ns.k * kn[..., 2])
    df["revenue"] = rev.ravel()
    df["intangible_begin"] = intang_begin.ravel()
    df["intangible_end"] = intang_end.ravel()
    df["amortization"] = amort.ravel()
    df["total_comp"] = total_comp.ravel()
    df["rd_comp"] = (k3 * total_comp).ravel()
    lam_inv = np.exp(np.clip(0.3 + 0.3 * mrmi, -5, 5))
    df["inv_pat_delta"] = stats.poisson.ppf(pois_u[..., 0], lam_inv).ravel()
    df["util_pat_delta"] = stats.poisson.ppf(pois_u[..., 1], 2.0).ravel()

    df["inv_pat_apps"] = _industry_patents(cfg, df, pat_w)

    # planted text channels
    df["base_density"] = np.clip(0.02 * np.exp(0.5 * awrs), 0.0, 0.1).ravel()
    df["exaggeration_true"] = _sigmoid(exag_z).ravel()
    lo_w, hi_w = (encode_quarter(q) for q in cfg.placebo_window)
    inwin = (quarters >= lo_w) & (quarters <= hi_w)
    for k, theme in enumerate(("blockchain", "metaverse")):
        hype = np.array([THEME_HYPE[theme].get(int(q) // 4, 0.0) for q in quarters])
        dens = 0.01 * np.exp(tp.catering_factor_loading * catering[:, None] + hype[None, :]
                             + ns.theme * theme_e[..., k])
        df[f"theme_{theme}"] = np.where(inwin[None, :], np.clip(dens, 0.0, 0.04), 0.0).ravel()

    exposure = []
    for i in np.flatnonzero(treat):
        g = stream(seed, "exposure", int(i))
        if g.random() >= cfg.exposure_share or T - 8 <= 4:
            continue
        k = int(g.integers(4, T - 8))
        exposure.append({"firm_id": fid[i], "event_quarter": int(quarters[k]),
                         "day": int(g.integers(0, DAYS_PER_QUARTER)), "drift": tp.exposure_drift})
    truth = GroundTruth(
        config=cfg.to_dict(),
        true_params=asdict(tp),
        treated_firms=[str(f) for f in fid[treat == 1]],
        catering={str(f): float(c) for f, c in zip(fid, catering)},
        exposure_events=exposure,
        washing_rate=float(np.nanmean(df["washing"])) if df["washing"].notna().any() else float("nan"),
        did_boundary=int(boundary),
    )
    return SynthData(cfg, df, truth)


def _industry_patents(cfg: DgpConfig, df: pd.DataFrame, pat_w: np.ndarray) -> np.ndarray:
    """Industry-year application totals crowded out by lagged industry AWRS,
    split across the industry's firm-quarters."""
    tp, ns = cfg.true_params, cfg.noise_sds
    seed = int(cfg.master_seed)
    year = df["quarter"].to_numpy() // 4
    abar = df.assign(year=year).groupby(["industry", "year"])["awrs_std"].mean()
    out = np.zeros(len(df))
    firm_idx = df["firm_id"].str[1:].astype(int).to_numpy()
    for (ind, y), rows in df.assign(year=year).groupby(["industry", "year"]).groups.items():
        g_ = int(ind[1:]) - 10
        eta = 0.3 * stream(seed, "industry", g_).standard_normal()
        lag1 = abar.get((ind, y - 1), 0.0)
        lag2 = abar.get((ind, y - 2), 0.0)
        eps = stream(seed, "industry_year_patents", g_, int(y)).standard_normal()
        total = int(round(math.exp(math.log(500.0) + eta + tp.h4_crowdout * (lag1 + lag2) + ns.patents * eps)))
        rows = np.asarray(rows)
        w = pat_w[firm_idx[rows]]
        split = stream(seed, "patent_split", g_, int(y)).multinomial(total, w / w.sum())
        out[rows] = split
    return out


def generate_panel(cfg: DgpConfig | None = None) -> SynthData:
    """Synthetic panel plus ground truth; ``.panel`` holds the raw input fields."""
    return simulate(cfg)


# ---------------------------------------------------------------------------
# returns


@dataclass
class ReturnSim:
    firms: np.ndarray
    calendar: np.ndarray
    returns: np.ndarray
    market: np.ndarray
    announce_pos: np.ndarray           # n_firms x n_quarters
    day_quarter: np.ndarray            # quarter code of each trading day
    exposure: list

    def return_panel(self):
        from .econometrics.events import ReturnPanel

        return ReturnPanel(pd.Index(self.firms), pd.Index(self.calendar), self.returns, self.market)

    def events_table(self, quarters: np.ndarray) -> pd.DataFrame:
        """Announcement dates per firm-quarter plus washing-exposure events."""
        n = len(self.firms)
        T = self.announce_pos.shape[1]
        ev = pd.DataFrame({
            "firm_id": np.repeat(self.firms, T),
            "event_date": self.calendar[self.announce_pos.ravel()],
            "kind": "announcement",
            "quarter": np.tile([decode_quarter(int(q)) for q in quarters], n),
        })
        ex = pd.DataFrame([{"firm_id": x["firm_id"], "event_date": x["event_date"], "kind": "washing_exposure",
                            "quarter": decode_quarter(x["event_quarter"])} for x in self.exposure],
                          columns=["firm_id", "event_date", "kind", "quarter"])
        return pd.concat([ev, ex], ignore_index=True)

    def long_tables(self) -> tuple[pd.DataFrame, pd.DataFrame]:
        """Long firm returns ``(firm_id, date, return)`` and the market series."""
        n, d = self.returns.shape
        rets = pd.DataFrame({
            "firm_id": np.repeat(self.firms, d),
            "date": np.tile(self.calendar, n),
            "return": self.returns.ravel(),
        })
        return rets, pd.DataFrame({"date": self.calendar, "return": self.market})


def simulate_returns(data: SynthData) -> ReturnSim:
    """Daily market-adjusted returns with injected announcement premia,
    post-announcement penalties for Washing firm-quarters and exposure drifts.

    Announcement for quarter ``t`` falls 20-44 trading days into quarter
    ``t + 1``. The CAR window ``(-3, +3)`` carries ``pi * AWRS (+ pi_w * AWRS
    * Washing)`` spread evenly; the penalty ``lambda * AWRS * Washing`` is
    spread evenly over the 180 following days that lie outside every CAR
    window of the firm, so CARs contain none of it.
    """
    cfg, df = data.config, data.latent
    tp, ns = cfg.true_params, cfg.noise_sds
    seed = int(cfg.master_seed)
    firms = df["firm_id"].unique()
    N = len(firms)
    quarters = np.sort(df["quarter"].unique())
    T = len(quarters)
    q0 = int(quarters[0])
    cal_q = q0 + np.arange(T + EXTRA_QUARTERS)
    calendar = np.array([d for q in cal_q for d in quarter_dates(int(q))])
    day_quarter = np.repeat(cal_q, DAYS_PER_QUARTER)
    D = len(calendar)
    market = stream(seed, "market").normal(3e-4, ns.market, D)

    awrs = df["awrs_std"].to_numpy().reshape(N, T)
    W = np.nan_to_num(df["washing"].to_numpy().reshape(N, T))
    idio = np.empty((N, D))
    offsets = np.empty((N, T), dtype=int)
    for i in range(N):
        g = stream(seed, "returns", i)
        idio[i] = g.standard_normal(D)
        offsets[i] = g.integers(20, 45, T)
    pos = (np.arange(T)[None, :] + 1) * DAYS_PER_QUARTER + offsets
    rows = np.repeat(np.arange(N), T)

    inj = np.zeros((N, D))
    mask = np.zeros((N, D), dtype=bool)
    car_amt = (tp.car_premium * awrs + tp.car_washing_premium * awrs * W).ravel()
    for k in range(-3, 4):
        cols = pos.ravel() + k
        ok = (cols >= 0) & (cols < D)
        mask[rows[ok], cols[ok]] = True
        np.add.at(inj, (rows[ok], cols[ok]), car_amt[ok] / 7.0)

    free = (~mask).astype(float)
    cfree = np.concatenate([np.zeros((N, 1)), np.cumsum(free, axis=1)], axis=1)

    def spread(start, stop, amount):
        # add amount evenly over free days in [start, stop) for each (row, start, stop)
        start = np.clip(start, 0, D)
        stop = np.clip(stop, 0, D)
        n_free = cfree[rows_s, stop] - cfree[rows_s, start]
        rate = np.where(n_free > 0, amount / np.where(n_free > 0, n_free, 1.0), 0.0)
        diff = np.zeros((N, D + 1))
        np.add.at(diff, (rows_s, start), rate)
        np.add.at(diff, (rows_s, stop), -rate)
        return np.cumsum(diff[:, :D], axis=1) * free

    rows_s = rows
    pen = (tp.bhar_penalty * awrs * W).ravel()
    inj += spread(pos.ravel() + 1, pos.ravel() + 181, pen)

    exposure = []
    firm_pos = {f: i for i, f in enumerate(firms)}
    ex_rows, ex_start, ex_stop, ex_amt = [], [], [], []
    for x in data.truth.exposure_events:
        i = firm_pos[x["firm_id"]]
        k = int(x["event_quarter"]) - q0
        day = k * DAYS_PER_QUARTER + int(x["day"])
        exposure.append({**x, "event_date": calendar[day]})
        for j in range(4):
            ex_rows.append(i)
            ex_start.append((k + j) * DAYS_PER_QUARTER)
            ex_stop.append((k + j + 1) * DAYS_PER_QUARTER)
            ex_amt.append(x["drift"])
    if ex_rows:
        rows_s = np.array(ex_rows)
        inj += spread(np.array(ex_start), np.array(ex_stop), np.array(ex_amt, dtype=float))

    returns = market[None, :] + ns.returns * idio + inj
    return ReturnSim(firms, calendar, returns, market, pos, day_quarter, exposure)


def attach_event_returns(data: SynthData, sim: ReturnSim, window=(-3, 3), horizon: int = 180) -> pd.DataFrame:
    """Latent frame plus ``car``, ``bhar`` and quarterly ``ret_adj`` computed from ``sim``."""
    from .econometrics.events import bhar_batch, car_batch, quarterly_abnormal_returns

    rp = sim.return_panel()
    N, T = sim.announce_pos.shape
    rows = np.repeat(np.arange(N), T)
    p = sim.announce_pos.ravel()
    out = data.latent.copy()
    out["car"] = car_batch(rp, rows, p, window)
    out["bhar"] = bhar_batch(rp, rows, p, horizon)
    qr = quarterly_abnormal_returns(rp, sim.day_quarter)
    out = out.merge(qr, on=["firm_id", "quarter"], how="left")
    return out


# ---------------------------------------------------------------------------
# documents


ARCH_TEXT = ("architecture diagram of the transformer encoder", "network topology with hidden layers",
             "model structure showing the attention layer")
PARAM_TEXT = ("the model uses {n} billion parameters", "trained with {n} billion parameters")
BENCH_TEXT = ("accuracy reached {x} percent on the internal test", "inference speed of {x} tokens per second",
              "error rate fell to {x} percent")
STOCK_TEXT = ("stock image illustration of a futuristic robot", "decorative concept art of a glowing brain",
              "generic image with clip art icons")
PLAIN_TEXT = ("photo of the new production line", "chart of quarterly revenue by segment",
              "picture of the headquarters building")


def figure_pairs_for(doc_id: str, exaggeration: float, n_pairs: int, flip: float, rng: np.random.Generator) -> list:
    """Figure-text pairs whose evidence flags come from a planted exaggeration
    score, each flag flipped independently with probability ``flip``."""
    pairs = []
    for j in range(n_pairs):
        u = rng.random(8)
        evid = [u[k] >= exaggeration for k in range(3)]
        stock = u[3] < exaggeration
        flags = [f != (u[4 + k] < flip) for k, f in enumerate(evid + [stock])]
        parts = []
        pick = rng.integers(0, 3, 5)
        if flags[0]:
            parts.append(ARCH_TEXT[pick[0]])
        if flags[1]:
            parts.append(PARAM_TEXT[pick[1] % 2].format(n=int(rng.integers(1, 200))))
        if flags[2]:
            parts.append(BENCH_TEXT[pick[2]].format(x=round(float(rng.uniform(60, 99.9)), 1)))
        parts.append(STOCK_TEXT[pick[3]] if flags[3] else PLAIN_TEXT[pick[4]])
        caption = parts[-1]
        adjacent = "; ".join(parts[:-1]) if len(parts) > 1 else f"figure {j + 1} of the disclosure"
        pairs.append(FigureTextPair(f"{doc_id}-f{j}", doc_id, caption, adjacent))
    return pairs


@lru_cache(maxsize=8)
def _term_tokens(theme: str) -> tuple:
    lex = builtin_lexicon(theme)
    return tuple(tuple(tokenize(t)) for t in sorted(lex.terms))


def _compose(rng: np.random.Generator, n_tokens: int, hits: list[tuple[str, int]]) -> list[str]:
    units: list[str] = []
    used = 0
    for theme, k in hits:
        if k <= 0:
            continue
        terms = _term_tokens(theme)
        for j in rng.integers(0, len(terms), k):
            units.append(" ".join(terms[j]))
            used += len(terms[j])
    if used > n_tokens // 2:
        raise DataError(f"target density needs {used} term tokens, infeasible for a {n_tokens}-token document")
    units.extend(_FILLER_ARR[rng.integers(0, len(FILLER), n_tokens - used)].tolist())
    units = _as_obj(units)[rng.permutation(len(units))].tolist()
    n = len(units)
    cuts = [0, n // 3, 2 * n // 3, n]
    return [" ".join(units[a:b]) for a, b in zip(cuts, cuts[1:]) if b > a]


_FILLER_ARR = np.array(FILLER, dtype=object)


def _as_obj(items: list) -> np.ndarray:
    out = np.empty(len(items), dtype=object)
    out[:] = items
    return out


def make_document(doc_id, firm_id, quarter, density: float, exaggeration: float, n_tokens: int,
                  n_pairs: int, flip: float, rng: np.random.Generator, themes: Mapping[str, float] | None = None
                  ) -> DisclosureDocument:
    """One report with ``round(density * n_tokens)`` AI-lexicon hits."""
    if not (0 <= density <= 1):
        raise DataError(f"density {density} outside [0, 1]")
    hits = [("ai", int(round(density * n_tokens)))]
    for theme, d in (themes or {}).items():
        hits.append((theme, int(round(d * n_tokens))))
    paragraphs = _compose(rng, n_tokens, hits)
    pairs = figure_pairs_for(doc_id, exaggeration, n_pairs, flip, rng) if n_pairs else []
    return DisclosureDocument(doc_id, firm_id, int(quarter), "periodic_report", paragraphs, pairs)


def generate_documents(data: SynthData | DgpConfig | None = None) -> list[DisclosureDocument]:
    """One periodic report per firm-quarter with planted AI and theme densities
    and figure pairs drawn from the planted exaggeration."""
    if not isinstance(data, SynthData):
        data = simulate(data)
    cfg, df = data.config, data.latent
    seed = int(cfg.master_seed)
    docs = []
    cols = zip(df["firm_id"].to_numpy(), df["quarter"].to_numpy(), df["base_density"].to_numpy(),
               df["exaggeration_true"].to_numpy(), df["theme_blockchain"].to_numpy(), df["theme_metaverse"].to_numpy())
    for fid, q, dens, ex, tb, tm in cols:
        rng = stream(seed, "doc", fid, int(q))
        doc_id = f"{fid}-{decode_quarter(int(q))}-R"
        docs.append(make_document(doc_id, fid, q, float(dens), float(ex), cfg.doc_tokens, cfg.pairs_per_doc,
                                  cfg.flip_noise, rng, {"blockchain": float(tb), "metaverse": float(tm)}))
    return docs


def planted_corpus(n_docs: int = 500, flip_noise: float = 0.15, pairs_per_doc: int = 3, seed: int = 0,
                   n_tokens: int = 120) -> tuple[list[DisclosureDocument], np.ndarray]:
    """Documents with exaggeration drawn uniformly on [0, 1]; returns (docs, planted scores)."""
    g = stream(seed, "planted_corpus")
    truth = g.uniform(0.0, 1.0, n_docs)
    dens = g.uniform(0.0, 0.05, n_docs)
    docs = []
    for k in range(n_docs):
        rng = stream(seed, "planted_doc", k)
        docs.append(make_document(f"D{k:05d}", f"F{k:05d}", 0, float(dens[k]), float(truth[k]), n_tokens,
                                  pairs_per_doc, flip_noise, rng))
    return docs, truth


# ---------------------------------------------------------------------------
# instrumental-variable sample


def iv_sample(cfg: DgpConfig | None = None, instrument_strength: float | None = None,
              endogeneity_rho: float | None = None) -> pd.DataFrame:
    """Firm-quarter sample with ``x = pi z + v``, ``y = beta x + eps`` and
    ``corr(x, eps) = rho``. Returns ``firm_id, quarter, y, x, z``."""
    cfg = (cfg or DgpConfig()).validate()
    pi = cfg.instrument_strength if instrument_strength is None else instrument_strength
    rho = cfg.endogeneity_rho if endogeneity_rho is None else endogeneity_rho
    rho_ve = rho * math.sqrt(pi * pi + 1.0)
    if not -1 < rho_ve < 1:
        raise ConfigError(f"corr(x, error) = {rho} is infeasible with first-stage coefficient {pi}")
    N, T = int(cfg.n_firms), int(cfg.n_quarters)
    z = np.empty((N, T))
    v = np.empty((N, T))
    w = np.empty((N, T))
    for i in range(N):
        g = stream(int(cfg.master_seed), "iv", i)
        z[i], v[i], w[i] = g.standard_normal((3, T))
    x = pi * z + v
    eps = rho_ve * v + math.sqrt(1 - rho_ve ** 2) * w
    y = cfg.iv_beta * x + eps
    q0 = encode_quarter(cfg.start_quarter)
    return pd.DataFrame({
        "firm_id": np.repeat([firm_code(i) for i in range(N)], T),
        "quarter": np.tile(q0 + np.arange(T), N),
        "y": y.ravel(), "x": x.ravel(), "z": z.ravel(),
    })
