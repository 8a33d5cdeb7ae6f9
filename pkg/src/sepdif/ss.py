"""Detector for separable DIF without item impact.

Pipeline: causal forest on (covariates, ability) -> doubly robust scores ->
ordinary least squares of the scores on (1, ability) -> joint Wald test of
both coefficients against zero with an HC3 covariance -> decision at alpha.
A rejection means the item's response probability depends on group at fixed
ability beyond what the covariates explain.
"""

from __future__ import annotations

from dataclasses import dataclass
from time import perf_counter

import numpy as np
from scipy import stats

from .data import (
    DetectionReport,
    DifDataset,
    config_digest,
    new_timing,
    positivity_check,
)
from .errors import ConstantAbility
from .forest import DrScores, ForestParams, doubly_robust_scores, fit_causal_forest

__all__ = ["BlpFit", "WaldResult", "best_linear_projection", "joint_wald_test", "detect_ss"]


@dataclass
class BlpFit:
    """OLS of the DR scores on (1, ability) with an HC3 sandwich covariance."""

    beta0: float
    beta1: float
    hc3_cov: np.ndarray          # 2x2
    n: int
    residuals: np.ndarray


@dataclass(frozen=True)
class WaldResult:
    f_stat: float
    df1: int
    df2: int
    p_value: float
    used_pseudo_inverse: bool = False


def best_linear_projection(scores, ability: np.ndarray) -> BlpFit:
    """HC3 = (X'X)^-1 X' diag(e_i^2 / (1-h_ii)^2) X (X'X)^-1."""
    gamma = scores.scores if isinstance(scores, DrScores) else np.asarray(scores, dtype=float)
    theta = np.asarray(ability, dtype=float)
    if gamma.shape[0] != theta.shape[0]:
        raise ValueError("scores and ability disagree in length")
    if theta.min() == theta.max():
        raise ConstantAbility("ability is constant; the projection design is singular")

    n = theta.shape[0]
    X = np.column_stack([np.ones(n), theta])
    xtx_inv = np.linalg.inv(X.T @ X)
    beta = xtx_inv @ (X.T @ gamma)
    resid = gamma - X @ beta
    leverage = np.einsum("ij,jk,ik->i", X, xtx_inv, X)
    omega = resid**2 / (1.0 - leverage) ** 2
    meat = (X.T * omega) @ X
    cov = xtx_inv @ meat @ xtx_inv
    return BlpFit(beta0=float(beta[0]), beta1=float(beta[1]), hc3_cov=cov, n=n,
                  residuals=resid)


def joint_wald_test(fit: BlpFit) -> WaldResult:
    """F = beta' V^-1 beta / 2 with p from F(2, n - 2)."""
    beta = np.array([fit.beta0, fit.beta1])
    used_pinv = False
    try:
        vinv = np.linalg.inv(fit.hc3_cov)
    except np.linalg.LinAlgError:
        vinv = np.linalg.pinv(fit.hc3_cov)
        used_pinv = True
    f = float(beta @ vinv @ beta) / 2.0
    if f < 0.0:  # pseudo-inverse roundoff
        f = 0.0
    df2 = fit.n - 2
    p = float(stats.f.sf(f, 2, df2))
    return WaldResult(f_stat=f, df1=2, df2=df2, p_value=p, used_pseudo_inverse=used_pinv)


def detect_ss(ds: DifDataset, params: ForestParams, alpha: float = 0.05) -> DetectionReport:
    """Run the full no-impact detection pipeline on one item."""
    if not ds.has_ability:
        raise ConstantAbility("dataset has no ability column; score it first")
    t0 = perf_counter()

    theta = np.asarray(ds.ability, dtype=float)
    xplus = np.column_stack([ds.covariates, theta])
    names = ds.covariate_names + ("ability",)

    model = fit_causal_forest(
        ds.item_response.astype(float), ds.group.astype(float), xplus, params,
        feature_names=names,
    )
    scores = doubly_robust_scores(model, ds.item_response, ds.group)
    fit = best_linear_projection(scores, theta)
    wald = joint_wald_test(fit)
    decision = "reject" if wald.p_value < alpha else "fail_to_reject"

    diag = positivity_check(ds, include_ability=True)
    report = DetectionReport(
        method="SimpleSeparable",
        decision=decision,
        alpha=float(alpha),
        statistics={
            "f_stat": wald.f_stat,
            "df1": wald.df1,
            "df2": wald.df2,
            "p_value": wald.p_value,
            "beta0": fit.beta0,
            "beta1": fit.beta1,
            "hc3_cov": fit.hc3_cov.tolist(),
            "used_pseudo_inverse": wald.used_pseudo_inverse,
        },
        diagnostics={
            "positivity": diag.to_dict(),
            "forest": model.diagnostics(),
        },
        provenance={
            "config_hash": config_digest(
                {"params": params, "alpha": alpha, "method": "ss"}
            ),
            "seed": params.seed,
            "dataset": ds.fingerprint(),
        },
        timing=new_timing(),
    )
    report.timing["seconds"] = perf_counter() - t0
    return report


def scores_table(ds: DifDataset, scores: DrScores) -> "np.ndarray":
    """(ability, score) pairs for external plotting."""
    return np.column_stack([np.asarray(ds.ability, dtype=float), scores.scores])
