import math

import numpy as np
import pandas as pd
import pytest

from aiwash import synth
from aiwash.errors import DataError, EstimationError
from aiwash.indices import (
    IndexConfig,
    WashingThresholds,
    awrs_raw,
    build_index_panel,
    forward_average,
    jacobi_eigen,
    k1,
    k1_from_panel,
    k2,
    k3,
    pca_first_component,
    sym3_eigvals,
    washing_flag,
)


# -- AWRS --------------------------------------------------------------------

def test_awrs_examples():
    assert awrs_raw(0.37, 0.0) == 0.37
    assert awrs_raw(0.0, 0.9) == 0.0
    assert awrs_raw(0.4, 0.5) == pytest.approx(0.6, abs=1e-15)
    with pytest.raises(DataError):
        awrs_raw(-0.1, 0.2)


# -- K indicators ------------------------------------------------------------

def test_k1_examples():
    assert k1(0, 0) == 0.0
    assert k1(9, 0) == 0.9
    with pytest.raises(DataError):
        k1(-1, 0)


def test_k1_rolling_window():
    frame = pd.DataFrame({"firm_id": "F", "quarter": np.arange(4) + 100,
                          "inv_pat_delta": [1, 2, 0, 1], "util_pat_delta": [0, 1, 1, 0]})
    out = k1_from_panel(frame)
    assert np.isnan(out[:3]).all()
    assert out[3] == 4 / 7


def test_k1_monotone():
    assert k1(3, 2) < k1(4, 2)
    assert k1(3, 2) > k1(3, 3)


def test_k2_examples():
    assert k2(100, 100, 0, 50) == 0.0
    assert k2(120, 100, 10, 1000) == pytest.approx(0.03, abs=1e-15)
    assert math.isnan(k2(120, 100, 10, 0))
    assert k2(90, 100, 0, 100) < 0


def test_k3_examples():
    assert k3(0, 100) == 0.0
    assert k3(25, 100) == 0.25
    assert math.isnan(k3(5, 0))
    with pytest.raises(DataError):
        k3(101, 100)


def test_forward_average_strict_window():
    f = pd.DataFrame({"firm_id": "F", "quarter": np.arange(6), "m": [0.0, 1, 2, 3, 4, 5]})
    fa = forward_average(f, "m")
    assert fa[0] == 2.5 and fa[1] == 3.5
    assert np.isnan(fa[2:]).all()


# -- eigen / PCA -------------------------------------------------------------

def test_sym3_and_jacobi_vs_numpy(rng):
    for _ in range(50):
        a = rng.normal(size=(3, 3))
        a = a @ a.T
        ref = np.linalg.eigvalsh(a)[::-1]
        assert np.allclose(sym3_eigvals(a), ref, atol=1e-10 * ref[0])
        w, v = jacobi_eigen(a)
        assert np.allclose(np.sort(w)[::-1], ref, atol=1e-10 * ref[0])


def test_rank_one_pca():
    base = np.random.default_rng(5).normal(size=50)
    p = pca_first_component(np.column_stack([base, base, base]))
    assert p.explained_variance_ratio == pytest.approx(1.0, abs=1e-12)
    assert np.allclose(p.loadings, np.ones(3) / np.sqrt(3), atol=1e-12)


def test_two_variable_closed_form():
    # exact sample covariance [[1, .5], [.5, 1]] in the first two columns, third column constant 0
    z = np.random.default_rng(6).normal(size=(400, 2))
    z -= z.mean(0)
    L = np.linalg.cholesky(np.cov(z, rowvar=False))
    w = z @ np.linalg.inv(L).T @ np.linalg.cholesky(np.array([[1.0, 0.5], [0.5, 1.0]])).T
    p = pca_first_component(np.column_stack([w, np.zeros(400)]))
    # closed form for [[a, b], [b, a]]: lambda = a + |b|
    assert p.eigenvalues[0] == pytest.approx(1.5, abs=1e-10)
    assert p.explained_variance_ratio == pytest.approx(0.75, abs=1e-10)


def test_pca_invariants(rng):
    m = rng.normal(size=(200, 3)) @ np.array([[1, 0.5, 0.2], [0, 1, 0.4], [0, 0, 1.0]])
    p = pca_first_component(m)
    assert np.linalg.norm(p.loadings) == pytest.approx(1.0, abs=1e-14)
    assert p.loadings.sum() > 0
    assert 0 < p.explained_variance_ratio <= 1
    assert np.var(p.scores, ddof=1) == pytest.approx(p.eigenvalues[0], abs=1e-10)
    perm = rng.permutation(200)
    q = pca_first_component(m[perm])
    assert np.allclose(q.scores, p.scores[perm], atol=1e-10)


def test_pca_excludes_missing_and_rejects_constant():
    m = np.random.default_rng(1).normal(size=(10, 3))
    m[2, 1] = np.nan
    p = pca_first_component(m)
    assert p.n_excluded == 1 and np.isnan(p.scores[2])
    with pytest.raises(EstimationError):
        pca_first_component(np.ones((10, 3)))


# -- washing flag ------------------------------------------------------------

def test_extreme_firm_flagged():
    a = np.arange(10.0)
    f = np.arange(10.0)[::-1]
    flags = washing_flag(a, f, np.zeros(10))
    assert flags[9] == 1.0


def test_below_rhetoric_threshold_never_flagged(rng):
    a = rng.normal(size=20)
    f = rng.normal(size=20)
    flags = washing_flag(a, f, np.zeros(20))
    thr = np.quantile(a, 0.7)
    assert np.all(flags[a < thr] == 0)


def test_small_cell_and_missing_forward():
    flags = washing_flag([1.0, 2.0, 3.0, 4.0], [0.0, np.nan, 1.0, 2.0], ["a", "a", "b", "b"])
    assert np.isnan(flags).all()


def test_threshold_monotone(rng):
    a, f = rng.normal(size=300), rng.normal(size=300)
    g = rng.integers(0, 5, size=300)
    lo = washing_flag(a, f, g, WashingThresholds(0.6, 0.5))
    hi = washing_flag(a, f, g, WashingThresholds(0.8, 0.5))
    assert not np.any((lo == 0) & (hi == 1))


def test_raw_or_standardized_awrs_give_same_flags(rng):
    a = rng.exponential(size=120)
    q = np.repeat(np.arange(4), 30)
    z = np.empty_like(a)
    for k in range(4):
        s = q == k
        z[s] = (a[s] - a[s].mean()) / a[s].std(ddof=1)
    f = rng.normal(size=120)
    assert np.array_equal(washing_flag(a, f, q), washing_flag(z, f, q))


def test_thresholds_validated():
    with pytest.raises((ValueError, DataError)):
        WashingThresholds(1.2, 0.5)
    assert WashingThresholds(0.75, 0.40).suffix == "p75_p40"


# -- full panel --------------------------------------------------------------

@pytest.fixture(scope="module")
def built():
    d = synth.simulate(synth.DgpConfig(n_firms=60, n_quarters=12, n_industries=3))
    docs = synth.generate_documents(d)
    from aiwash.pipeline import firm_quarter_text, score_documents
    from aiwash.text import builtin_lexicon
    from aiwash.exaggeration import RubricScorer

    scores = firm_quarter_text(score_documents(docs, builtin_lexicon("ai"), RubricScorer(), 1, "document", None))
    cfg = IndexConfig(alternates=(WashingThresholds(0.75, 0.40),))
    return build_index_panel(d.panel.frame, scores, cfg)


def test_index_panel_invariants(built):
    df = built.frame
    both = df["base_tfidf"].notna() & df["exaggeration"].notna()
    assert np.array_equal(df.loc[both, "awrs_raw"], df.loc[both, "base_tfidf"] * (1 + df.loc[both, "exaggeration"]))
    for _, g in df.groupby("quarter"):
        assert abs(g["awrs_std"].mean()) < 1e-12
        assert abs(g["awrs_std"].std(ddof=1) - 1) < 1e-12
    k = df["k1"].dropna()
    assert ((k >= 0) & (k < 1)).all()
    assert df.loc[df["mrmi_fwd_avg"].isna(), "washing"].isna().all()
    assert "washing_p75_p40" in df
    meta = built.metadata()
    assert meta["thresholds"] == [0.7, 0.5] and len(meta["pca_loadings"]) == 3


def test_awrs_ranks_match_raw(built):
    df = built.frame.dropna(subset=["awrs_raw"])
    for _, g in df.groupby("quarter"):
        assert np.array_equal(g["awrs_raw"].rank().to_numpy(), g["awrs_std"].rank().to_numpy())
