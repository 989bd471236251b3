"""Estimation kernel and hypothesis specifications."""

from .did import DidResult, did_estimate, persistent_washing_treatment
from .events import ReturnPanel, bhar, bhar_batch, car, car_batch, event_path
from .iv import IvResult, build_province_iv, estimate_iv, iv_2sls
from .linalg import (
    RegressionResult,
    absorbed_rank,
    cluster_vcov,
    demean,
    fit,
    hc1_vcov,
    ols,
    within_twoway,
)
from .specs import (
    EventStudyResult,
    InstitutionCutoffs,
    classify_institutions,
    compute_event_returns,
    estimate_h1,
    estimate_h2,
    estimate_h2_returns,
    estimate_h3,
    estimate_h4,
    estimate_iv_table,
    firm_holdings,
    hhi,
    placebo_historical,
)

__all__ = [
    "DidResult", "EventStudyResult", "InstitutionCutoffs", "IvResult", "RegressionResult", "ReturnPanel",
    "absorbed_rank", "bhar", "bhar_batch", "build_province_iv", "car", "car_batch", "classify_institutions",
    "cluster_vcov", "compute_event_returns", "demean", "did_estimate", "estimate_h1", "estimate_h2",
    "estimate_h2_returns", "estimate_h3", "estimate_h4", "estimate_iv", "estimate_iv_table", "event_path",
    "firm_holdings", "fit", "hc1_vcov", "hhi", "iv_2sls", "ols", "persistent_washing_treatment",
    "placebo_historical", "within_twoway",
]
