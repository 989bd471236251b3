"""Acceptance criteria 1-10.

Each test prints one ``criterion N: PASS|FAIL`` line (also collected into
the pytest terminal summary). Monte Carlo studies use 200 replications;
set ``AIWASH_MC_REPS`` to shorten them while iterating.
"""

import math
import time

import numpy as np
import pandas as pd
import pytest

from aiwash import synth
from aiwash.econometrics import cluster_vcov, did_estimate, estimate_iv, fit, hc1_vcov, iv_2sls, within_twoway
from aiwash.econometrics import specs
from aiwash.econometrics.events import ReturnPanel, car_batch
from aiwash.exaggeration import RubricScorer, score_document, spearman
from aiwash.indices import WashingThresholds, awrs_raw, k1, pca_first_component, washing_flag
from aiwash.panel import encode_quarter, zscore_by_group
from aiwash.pipeline import RunConfig, run_pipeline
from aiwash.text import DisclosureDocument, base_tfidf, compile_lexicon, compute_corpus_stats

from conftest import mc_reps, record

pytestmark = pytest.mark.slow

Z975 = 1.959963984540054


def _t(res, name):
    return res[name] / res.se_of(name)


# ---------------------------------------------------------------------------
# 1. estimator exactness


def _unbalanced_panel(rng, n_firms=50, n_q=12, k=3, drop=0.15):
    firm = np.repeat(np.arange(n_firms), n_q)
    q = np.tile(np.arange(n_q), n_firms)
    keep = rng.random(len(firm)) > drop
    firm, q = firm[keep], q[keep]
    X = rng.standard_normal((len(firm), k)) + 0.3 * firm[:, None] / n_firms
    y = X @ np.array([0.5, -1.0, 2.0])[:k] + 0.1 * firm + 0.05 * q + rng.standard_normal(len(firm))
    return y, X, firm, q


def _dummy_ols(y, X, firm, q):
    D_f = (firm[:, None] == np.unique(firm)[None, :]).astype(float)
    D_q = (q[:, None] == np.unique(q)[None, 1:]).astype(float)
    Z = np.column_stack([X, D_f, D_q])
    b = np.linalg.lstsq(Z, y, rcond=None)[0]
    return b[: X.shape[1]]


def _sandwich_loop(X, u, g, K):
    bread = np.linalg.inv(X.T @ X)
    meat = np.zeros((X.shape[1], X.shape[1]))
    labels = np.unique(g)
    for lab in labels:
        s = X[g == lab].T @ u[g == lab]
        meat += np.outer(s, s)
    G, n = len(labels), len(u)
    return G / (G - 1) * (n - 1) / (n - K) * bread @ meat @ bread


def test_criterion_01_estimator_exactness():
    t0 = time.perf_counter()
    rng = np.random.default_rng(1)
    worst_within = 0.0
    for _ in range(5):
        y, X, firm, q = _unbalanced_panel(rng)
        w = within_twoway(y, X, firm, q)
        b = np.linalg.lstsq(w.X, w.y, rcond=None)[0]
        worst_within = max(worst_within, np.abs(b - _dummy_ols(y, X, firm, q)).max())

    X = np.column_stack([np.ones(30), rng.standard_normal((30, 2))])
    u = rng.standard_normal(30)
    g = np.repeat([0, 1, 2], 10)
    V = cluster_vcov(X, u, g, dof=3)
    sand = np.abs(V - _sandwich_loop(X, u, g, 3)).max()

    n = 6
    z = rng.standard_normal(n)
    x = z + 0.5 * rng.standard_normal(n)
    yv = 1.5 * x + rng.standard_normal(n)
    iv = iv_2sls(yv, None, x, z)
    Zc, Xc = np.column_stack([z, np.ones(n)]), np.column_stack([x, np.ones(n)])
    closed = np.linalg.solve(Zc.T @ Xc, Zc.T @ yv)
    order = [iv.second.names.index("endog0"), iv.second.names.index("const")]
    iv_diff = np.abs(iv.second.coef[order] - closed).max()

    X2 = np.column_stack([np.ones(80), rng.standard_normal((80, 3))])
    u2 = rng.standard_normal(80) * (1 + np.abs(X2[:, 1]))
    hc = np.abs(cluster_vcov(X2, u2, np.arange(80), dof=4) - hc1_vcov(X2, u2, dof=4)).max()
    secs = time.perf_counter() - t0

    ok = worst_within < 1e-8 and sand < 1e-12 and iv_diff < 1e-8 and hc < 1e-12 and secs < 10
    record(1, ok, f"within-vs-dummy {worst_within:.1e}, sandwich {sand:.1e}, 2SLS {iv_diff:.1e}, "
                  f"G=N vs HC1 {hc:.1e}, {secs:.2f}s")
    assert ok


# ---------------------------------------------------------------------------
# 2. index identities


def test_criterion_02_index_identities():
    rng = np.random.default_rng(2)
    b = rng.exponential(size=10_000)
    exact = bool(np.all(awrs_raw(b, np.zeros_like(b)) == b))

    k1_cases = [((0, 0), 0.0), ((9, 0), 0.9), ((4, 2), 4 / 7), ((0, 5), 0.0), ((3, 3), 3 / 7)]
    k1_ok = all(float(k1(i, u)) == v for (i, u), v in k1_cases)

    m = rng.standard_normal((400, 3)) @ np.array([[1.0, 0.6, 0.3], [0.0, 0.8, 0.4], [0.0, 0.0, 0.5]])
    p = pca_first_component(m)
    lam = np.linalg.eigvalsh(np.cov(m, rowvar=False))
    evr_diff = abs(p.explained_variance_ratio - lam[-1] / lam.sum())

    vals = rng.lognormal(size=3000)
    quarters = rng.integers(0, 12, size=3000)
    z = zscore_by_group(vals, quarters)
    mean_dev = max(abs(math.fsum(z[quarters == k]) / (quarters == k).sum()) for k in range(12))
    sd_dev = max(abs(np.std(z[quarters == k], ddof=1) - 1) for k in range(12))

    ok = exact and k1_ok and evr_diff < 1e-10 and mean_dev < 1e-12 and sd_dev < 1e-12
    record(2, ok, f"awrs_raw(b,0)=b {exact}, k1 cases {k1_ok}, evr diff {evr_diff:.1e}, "
                  f"z |mean| {mean_dev:.1e}, |sd-1| {sd_dev:.1e}")
    assert ok


# ---------------------------------------------------------------------------
# 3. H1 lag pattern under industry vs firm fixed effects


def test_criterion_03_h1_pattern():
    R = mc_reps()
    t0 = time.perf_counter()
    t_iq, t_fe = [], []
    for r in range(R):
        d = synth.simulate(synth.DgpConfig(master_seed=r))
        res = specs.estimate_h1(d.latent)
        t_iq.append([_t(res["(1) industry+quarter FE"], f"awrs_l{h}") for h in range(1, 5)])
        t_fe.append([_t(res["(2) firm+quarter FE"], f"awrs_l{h}") for h in range(1, 5)])
    secs = time.perf_counter() - t0
    t_iq, t_fe = np.array(t_iq), np.array(t_fe)
    sig_iq = (np.abs(t_iq) > Z975).mean(axis=0)
    mean_abs = np.abs(t_fe).mean()
    rej = (np.abs(t_fe) > Z975).mean()

    ok = bool(sig_iq.min() >= 0.90 and mean_abs < 0.5 and 0.02 <= rej <= 0.10 and secs < 300)
    record(3, ok, f"IQ-FE sig share per lag {np.round(sig_iq, 3).tolist()}, firm-FE mean|t| {mean_abs:.3f} "
                  f"(per lag {np.round(np.abs(t_fe).mean(0), 3).tolist()}, |mean t| {abs(t_fe.mean()):.3f}), "
                  f"rejection {rej:.3f}, {R} reps {secs:.0f}s")
    assert ok


# ---------------------------------------------------------------------------
# 4. endogeneity correction


def test_criterion_04_iv():
    R = mc_reps()
    bias_se, cover, F, weak = [], [], [], []
    for r in range(R):
        cfg = synth.DgpConfig(master_seed=r, endogeneity_rho=0.5, instrument_strength=0.5)
        s = synth.iv_sample(cfg)
        o = fit(s, "y", ["x"], ("firm_id", "quarter"), cluster="firm_id")
        bias_se.append(abs(o["x"] - cfg.iv_beta) / o.se_of("x"))
        v = estimate_iv(s, "y", ["x"], ["z"])
        b, se = v.second["x"], v.second.se_of("x")
        cover.append(abs(b - cfg.iv_beta) <= Z975 * se)
        F.append(v.first_stage_F)
        w = estimate_iv(synth.iv_sample(cfg, instrument_strength=0.02), "y", ["x"], ["z"])
        weak.append(w.weak_flag)
    cov = float(np.mean(cover))
    ok = min(bias_se) > 5 and 0.92 <= cov <= 0.98 and min(F) > 10 and np.mean(weak) >= 0.95
    record(4, ok, f"min OLS bias {min(bias_se):.1f} se, 2SLS coverage {cov:.3f}, min F {min(F):.0f}, "
                  f"weak flag rate {np.mean(weak):.3f}, {R} reps")
    assert ok


# ---------------------------------------------------------------------------
# 5. DID recovery


def test_criterion_05_did():
    R = mc_reps()
    boundary = encode_quarter("2023Q1")
    within, rejects, base_zero = [], [], []
    for r in range(R):
        dc = synth.DgpConfig(master_seed=r, n_quarters=16, start_quarter="2021Q1")
        res = did_estimate(synth.simulate(dc).latent, "awrs_std", "treat_latent", boundary)
        within.append(abs(res.att - 0.25) <= 2 * res.att_se)
        et = res.event_time_coefs.set_index("rel_quarter")
        base_zero.append(et.loc[-1, "coef"] == 0.0 and et.loc[-1, "se"] == 0.0)
    # a rejection rate needs more draws than coverage: at 200 the MC sd is ~0.015
    # against a +-0.02 band, so the size study uses five times as many
    n_null = 5 * R
    for r in range(n_null):
        dc = synth.DgpConfig(master_seed=r, n_quarters=16, start_quarter="2021Q1").replace(true_params={"did_tau": 0.0})
        r0 = did_estimate(synth.simulate(dc).latent, "awrs_std", "treat_latent", boundary, event_window=(-4, 7))
        rejects.append(r0.pretrend_joint_p < 0.05)
        et0 = r0.event_time_coefs.set_index("rel_quarter")
        base_zero.append(et0.loc[-1, "coef"] == 0.0)
    share, size = float(np.mean(within)), float(np.mean(rejects))
    mc_sd = math.sqrt(size * (1 - size) / n_null)
    ok = share >= 0.93 and 0.03 <= size <= 0.07 and all(base_zero)
    record(5, ok, f"ATT within 2 se {share:.3f} ({R} reps), pretrend size {size:.3f} +- {mc_sd:.3f} "
                  f"({n_null} null reps, leads binned at -4), base coef exactly 0 in all runs {all(base_zero)}")
    assert ok


# ---------------------------------------------------------------------------
# 6. washing flag rate

INDEPENDENCE = {"between_firm_corr": 0.0, "did_tau": 0.0, "catering_mrmi_corr": 0.0}


def _flag_rate(seed, rank_corr):
    cfg = synth.DgpConfig(master_seed=seed, awrs_fwd_rank_corr=rank_corr).replace(true_params=INDEPENDENCE)
    w = synth.simulate(cfg).latent["washing"].to_numpy(float)
    return np.nanmean(w)


def test_criterion_06_washing_rate():
    reps = max(5, mc_reps() // 10)
    levels = (0.0, -0.25, -0.5)
    rates = np.array([[_flag_rate(s, rc) for rc in levels] for s in range(reps)])
    means = rates.mean(axis=0)
    base_ok = 0.13 <= means[0] <= 0.17
    mono = bool(means[0] < means[1] < means[2])
    ok = base_ok and mono
    record(6, ok, f"independence rate {means[0]:.4f}, rates over rank corr {levels}: "
                  f"{np.round(means, 4).tolist()} monotone {mono}, {reps} reps")
    assert ok


# ---------------------------------------------------------------------------
# 7. event-study checks


def test_criterion_07_event_study():
    R = mc_reps()
    days = pd.Index([f"2020-01-{d:02d}" for d in range(1, 31)])
    mkt = np.random.default_rng(7).normal(0, 0.01, len(days))
    panel = ReturnPanel(["A"], days, mkt[None, :].copy(), mkt)
    car0 = car_batch(panel, np.array([0]), np.array([10]))[0]

    car_ok, bhar_neg = [], []
    for r in range(R):
        d = synth.simulate(synth.DgpConfig(master_seed=r))
        frame = synth.attach_event_returns(d, synth.simulate_returns(d))
        e = specs.estimate_h3(frame)
        c1 = e.columns["(1) CAR"]
        car_ok.append(abs(c1["awrs_std"] - d.config.true_params.car_premium) <= 2 * c1.se_of("awrs_std"))
        bhar_neg.append(_t(e.columns["(4) BHAR x washing"], "awrs_x_washing") < -Z975)
    ok = car0 == 0.0 and car_ok[0] and np.mean(bhar_neg) >= 0.90
    record(7, ok, f"CAR(firm==market) = {float(car0)!r}, premium within 2 se (seed 0) {car_ok[0]} "
                  f"(share {np.mean(car_ok):.3f}), BHAR interaction significantly negative {np.mean(bhar_neg):.3f}, "
                  f"{R} reps")
    assert ok


# ---------------------------------------------------------------------------
# 8. text pipeline


def test_criterion_08_text():
    lex = compile_lexicon(["machine learning"])
    doc = DisclosureDocument("d1", "F1", 0, "periodic_report",
                             ["we apply machine learning and machine learning tools here today"])
    stats = compute_corpus_stats([doc], lex)
    got = base_tfidf(doc, lex, stats)
    # 2 hits in 10 tokens, idf = ln(2/2) + 1
    hand = 2 / 10 * (math.log((1 + 1) / (1 + 1)) + 1)
    hand_diff = abs(got - hand)

    lex2 = compile_lexicon(["machine learning", "neural network", "computing power"])
    docs = [
        DisclosureDocument("a", "F1", 0, "periodic_report", ["neural network use", "computing power and neural network"]),
        DisclosureDocument("b", "F2", 0, "periodic_report", ["plain words only here"]),
        DisclosureDocument("c", "F3", 0, "periodic_report", ["machine learning", "machine learning at scale"]),
    ]
    st = compute_corpus_stats(docs, lex2)
    concat_diff = max(abs(base_tfidf(d, lex2, st) - base_tfidf(d.self_concatenated(), lex2, st)) for d in docs)

    corpus, truth = synth.planted_corpus(n_docs=500, flip_noise=0.15, seed=1)
    scorer = RubricScorer()
    pred = [score_document(d.figure_pairs, scorer).value for d in corpus]
    rho = spearman(pred, truth)

    ok = hand_diff <= 1e-12 and concat_diff == 0.0 and rho > 0.6
    record(8, ok, f"hand TF-IDF diff {hand_diff:.1e}, self-concatenation diff {concat_diff:.1e}, "
                  f"Spearman(rubric, planted) {rho:.3f}")
    assert ok


# ---------------------------------------------------------------------------
# 9. scale benchmark


def _bundle_bytes(root):
    return {p.relative_to(root).as_posix(): p.read_bytes()
            for p in sorted(root.rglob("*")) if p.is_file() and p.name != "metadata.json"}


def test_criterion_09_scale(tmp_path):
    doc = {"synth": {"n_firms": 2300, "n_quarters": 30}}
    t0 = time.perf_counter()
    r1 = run_pipeline(RunConfig.from_dict(doc), threads=1, out_dir=tmp_path / "one", sweep=True)
    secs = time.perf_counter() - t0
    r4 = run_pipeline(RunConfig.from_dict(doc), threads=4, out_dir=tmp_path / "four", sweep=True)
    b1, b4 = _bundle_bytes(tmp_path / "one"), _bundle_bytes(tmp_path / "four")
    same = b1 == b4
    n_rows = len(pd.read_csv(tmp_path / "one" / "figures" / "figure1_ai_disclosure.csv"))
    ok = r1.exit_code == 0 and r4.exit_code == 0 and secs < 120 and same
    record(9, ok, f"2300x30 single-worker {secs:.1f}s (exit {r1.exit_code}), 4-worker bundle byte-identical {same} "
                  f"({len(b1)} files, {n_rows} quarters)")
    assert ok


# ---------------------------------------------------------------------------
# 10. threshold sweep

SWEEP = (WashingThresholds(0.70, 0.50), WashingThresholds(0.75, 0.40), WashingThresholds(0.65, 0.55))
# interactions with a nonzero effect in the default generator
SIGNED = (("h2", "(1) d_trans", "awrs_x_washing_l1"),
          ("h2", "(3) ded x washing", "awrs_x_washing_l1"),
          ("h3", "(4) BHAR x washing", "awrs_x_washing"))
UNSIGNED = (("h3", "(2) CAR x washing", "awrs_x_washing"),)


def _sweep_signs(seed):
    d = synth.simulate(synth.DgpConfig(master_seed=seed))
    frame = synth.attach_event_returns(d, synth.simulate_returns(d))
    groups = (frame["industry"].to_numpy(), frame["quarter"].to_numpy())
    signs = {}
    for th in SWEEP:
        col = f"washing_{th.suffix}"
        frame[col] = washing_flag(frame["awrs_std"], frame["mrmi_fwd_avg"], groups, th)
        out = {"h2": specs.estimate_h2(frame, washing=col), "h3": specs.estimate_h3(frame, washing=col).columns}
        complete = all(len(out[k]) >= 2 for k in out)
        for kind, c, term in SIGNED + UNSIGNED:
            signs.setdefault((c, term), []).append(np.sign(out[kind][c][term]) if complete else np.nan)
    return {k: len(set(v)) == 1 and not np.isnan(v).any() for k, v in signs.items()}


def test_criterion_10_threshold_sweep():
    R = mc_reps()
    rows = [_sweep_signs(r) for r in range(R)]
    signed_keys = [(c, t) for _, c, t in SIGNED]
    stable = np.mean([all(row[k] for k in signed_keys) for row in rows])
    each = {k[0]: round(float(np.mean([row[k] for row in rows])), 3) for k in rows[0]}
    ok = stable >= 0.90
    record(10, ok, f"all nonzero-effect AWRSxWashing signs stable across 3 variants in {stable:.3f} of {R} reps; "
                   f"per column {each}")
    assert ok
