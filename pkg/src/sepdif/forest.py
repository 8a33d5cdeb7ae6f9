"""Honest causal forest with out-of-bag nuisances and doubly robust scores.

The causal fit is three stages sharing one tree engine: regression forests
for the group propensity e(x) = E[A | X+] and the marginal outcome
m(x) = E[Y | X+], both with out-of-bag predictions; then honest causal
trees grown on the centered data (Y - m, A - e), each split maximizing the
between-child heterogeneity n_L * n_R * (tau_L - tau_R)^2 of the
residual-on-residual slope.  Per-unit CATEs are out-of-bag ratios of
aggregated leaf means, and the doubly robust (AIPW) scores combine them
with the out-of-bag nuisances.

Each tree's subsample is derived from (seed, tree index) only, so fits are
reproducible and independent of worker scheduling; structure and estimation
halves are disjoint (honesty).
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import _forest_kernels as fk
from .errors import InvalidParams, NotFitted, TooFewSamples
from .streams import kernel_seed, substream

__all__ = [
    "ForestParams",
    "RegressionForestModel",
    "CausalForestModel",
    "DrScores",
    "fit_regression_forest",
    "fit_causal_forest",
    "doubly_robust_scores",
    "average_treatment_effect",
]

PROPENSITY_CLIP = (0.01, 0.99)


@dataclass(frozen=True)
class ForestParams:
    """Hyperparameters shared by the nuisance and causal forests."""

    num_trees: int = 2000
    subsample_fraction: float = 0.5
    honesty_fraction: float = 0.5
    min_leaf_size: int = 5
    mtry: int | None = None          # default ceil(sqrt(p)) at fit time
    seed: int = 0

    def __post_init__(self):
        if self.num_trees < 1:
            raise InvalidParams(f"num_trees must be >= 1, got {self.num_trees}")
        if not 0.0 < self.subsample_fraction <= 1.0:
            raise InvalidParams("subsample_fraction must be in (0, 1]")
        if not 0.0 < self.honesty_fraction < 1.0:
            raise InvalidParams("honesty_fraction must be in (0, 1)")
        if self.min_leaf_size < 1:
            raise InvalidParams("min_leaf_size must be >= 1")
        if self.mtry is not None and self.mtry < 1:
            raise InvalidParams("mtry must be >= 1 when given")


@dataclass
class _TreeSet:
    """Raw per-tree arrays produced by the growing kernel."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    parent: np.ndarray
    n_nodes: np.ndarray
    leaf_num: np.ndarray
    leaf_den: np.ndarray


@dataclass
class RegressionForestModel:
    """Honest regression forest with per-unit out-of-bag predictions."""

    trees: _TreeSet
    oob_prediction: np.ndarray
    resample_plan: np.ndarray        # (num_trees, subsample size); first h structure
    structure_size: int
    params: ForestParams
    n_never_oob: int = 0


@dataclass
class CausalForestModel:
    """Fitted causal forest state: trees, OOB nuisances, OOB CATEs."""

    trees: _TreeSet
    oob_propensity: np.ndarray       # clipped to PROPENSITY_CLIP
    oob_outcome: np.ndarray
    oob_cate: np.ndarray
    feature_names: tuple[str, ...]
    resample_plan: np.ndarray
    structure_size: int
    params: ForestParams
    clip_fraction: float = 0.0
    warnings_: list = field(default_factory=list)

    def diagnostics(self) -> dict:
        return {
            "num_trees": int(self.params.num_trees),
            "propensity_clip_fraction": self.clip_fraction,
            "min_oob_propensity": float(self.oob_propensity.min()),
            "max_oob_propensity": float(self.oob_propensity.max()),
            "warnings": list(self.warnings_),
        }


@dataclass(frozen=True)
class DrScores:
    """Per-unit doubly robust scores; their mean estimates the ATE."""

    scores: np.ndarray


def _make_plan(n: int, params: ForestParams, seed_path: int):
    s_size = int(math.floor(params.subsample_fraction * n))
    h = int(math.floor(params.honesty_fraction * s_size))
    if params.subsample_fraction >= 1.0:
        raise TooFewSamples(
            "subsample_fraction must be < 1: honesty and out-of-bag prediction "
            "need units held out of each tree"
        )
    if h < max(params.min_leaf_size, 1) or s_size - h < 1:
        raise TooFewSamples(
            f"subsample of {s_size} with honest split {h}/{s_size - h} is too small "
            f"for min_leaf_size={params.min_leaf_size}"
        )
    plan = np.empty((params.num_trees, s_size), dtype=np.int64)
    for t in range(params.num_trees):
        rng = substream(params.seed, seed_path, t)
        plan[t] = rng.permutation(n)[:s_size]
    return plan, h


def _run_forest(X, u, v, params: ForestParams, causal: bool, seed_path: int,
                resample_plan=None, structure_size=None):
    n, p = X.shape
    if n < 2 * params.min_leaf_size:
        raise TooFewSamples(f"need at least {2 * params.min_leaf_size} rows, got {n}")
    if resample_plan is None:
        plan, h = _make_plan(n, params, seed_path)
    else:
        plan = np.asarray(resample_plan, dtype=np.int64)
        if plan.ndim != 2 or plan.shape[0] != params.num_trees:
            raise InvalidParams("resample_plan must have shape (num_trees, subsample)")
        h = int(structure_size if structure_size is not None
                else math.floor(params.honesty_fraction * plan.shape[1]))

    mtry = params.mtry if params.mtry is not None else max(1, math.ceil(math.sqrt(p)))
    mtry = min(mtry, p)
    max_nodes = 2 * max(h // max(params.min_leaf_size, 1), 1) + 1
    T = params.num_trees

    feature = np.empty((T, max_nodes), dtype=np.int32)
    threshold = np.zeros((T, max_nodes), dtype=np.float64)
    left = np.zeros((T, max_nodes), dtype=np.int32)
    right = np.zeros((T, max_nodes), dtype=np.int32)
    parent = np.zeros((T, max_nodes), dtype=np.int32)
    n_nodes = np.zeros(T, dtype=np.int64)
    leaf_num = np.zeros((T, max_nodes), dtype=np.float64)
    leaf_den = np.zeros((T, max_nodes), dtype=np.float64)
    oob_num = np.zeros(n, dtype=np.float64)
    oob_den = np.zeros(n, dtype=np.float64)
    oob_cnt = np.zeros(n, dtype=np.int64)
    tree_seeds = np.array([kernel_seed(params.seed, seed_path + 1, t) for t in range(T)],
                          dtype=np.uint64)

    fk.grow_forest(
        np.ascontiguousarray(X, dtype=np.float64), u, v, plan, h,
        params.min_leaf_size, mtry, causal, tree_seeds, max_nodes,
        feature, threshold, left, right, parent, n_nodes,
        leaf_num, leaf_den, oob_num, oob_den, oob_cnt,
    )
    trees = _TreeSet(feature, threshold, left, right, parent, n_nodes, leaf_num, leaf_den)
    return trees, plan, h, oob_num, oob_den, oob_cnt


def _oob_ratio(trees, X, oob_num, oob_den, oob_cnt):
    """Per-unit OOB prediction; units never out of bag fall back to all trees."""
    never = oob_cnt == 0
    n_never = int(never.sum())
    num = oob_num.copy()
    den = oob_den.copy()
    if n_never:
        fill_num = np.empty(int(n_never))
        fill_den = np.empty(int(n_never))
        rows = np.ascontiguousarray(X[never], dtype=np.float64)
        fk.predict_forest(rows, trees.feature, trees.threshold, trees.left,
                          trees.right, trees.leaf_num, trees.leaf_den,
                          fill_num, fill_den)
        num[never] = fill_num
        den[never] = fill_den
    with np.errstate(invalid="ignore", divide="ignore"):
        pred = np.where(np.abs(den) > 1e-12, num / np.where(den == 0, 1.0, den), 0.0)
    return pred, n_never


def fit_regression_forest(
    features: np.ndarray,
    target: np.ndarray,
    params: ForestParams,
    resample_plan: np.ndarray | None = None,
    structure_size: int | None = None,
    _seed_path: int = 10,
) -> RegressionForestModel:
    """Honest regression forest; OOB prediction for unit i averages only
    trees whose subsample excluded i."""
    X = np.asarray(features, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    y = np.asarray(target, dtype=np.float64)
    if y.shape[0] != X.shape[0]:
        raise InvalidParams("features and target disagree in length")
    v = np.ones_like(y)
    trees, plan, h, num, den, cnt = _run_forest(
        X, y, v, params, causal=False, seed_path=_seed_path,
        resample_plan=resample_plan, structure_size=structure_size,
    )
    pred, n_never = _oob_ratio(trees, X, num, den, cnt)
    return RegressionForestModel(
        trees=trees, oob_prediction=pred, resample_plan=plan,
        structure_size=h, params=params, n_never_oob=n_never,
    )


def fit_causal_forest(
    y: np.ndarray,
    a: np.ndarray,
    xplus: np.ndarray,
    params: ForestParams,
    feature_names: tuple[str, ...] = (),
    resample_plan: np.ndarray | None = None,
    structure_size: int | None = None,
) -> CausalForestModel:
    """Fit nuisances, center, and grow the honest causal forest."""
    y = np.asarray(y, dtype=np.float64)
    a = np.asarray(a, dtype=np.float64)
    X = np.asarray(xplus, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    n = y.shape[0]
    if a.shape[0] != n or X.shape[0] != n:
        raise InvalidParams("y, a, xplus disagree in length")
    if not np.isin(a, (0.0, 1.0)).all():
        raise InvalidParams("treatment vector must be binary 0/1")

    e_model = fit_regression_forest(X, a, params, resample_plan=resample_plan,
                                    structure_size=structure_size, _seed_path=10)
    m_model = fit_regression_forest(X, y, params, resample_plan=resample_plan,
                                    structure_size=structure_size, _seed_path=20)

    e_raw = e_model.oob_prediction
    lo, hi = PROPENSITY_CLIP
    outside = (e_raw < lo) | (e_raw > hi)
    clip_fraction = float(outside.mean())
    e_hat = np.clip(e_raw, lo, hi)
    warns = []
    if clip_fraction > 0.20:
        msg = (f"propensity estimates outside [{lo}, {hi}] for "
               f"{clip_fraction:.1%} of units; continuing with clipping")
        warns.append("PropensityDegenerate: " + msg)
        warnings.warn(msg, stacklevel=2)

    m_hat = m_model.oob_prediction
    y_c = y - m_hat
    a_c = a - e_hat

    trees, plan, h, num, den, cnt = _run_forest(
        X, a_c * y_c, a_c * a_c, params, causal=True, seed_path=30,
        resample_plan=resample_plan, structure_size=structure_size,
    )
    tau, n_never = _oob_ratio(trees, X, num, den, cnt)

    names = tuple(feature_names) if feature_names else tuple(
        f"f{j}" for j in range(X.shape[1])
    )
    return CausalForestModel(
        trees=trees,
        oob_propensity=e_hat,
        oob_outcome=m_hat,
        oob_cate=tau,
        feature_names=names,
        resample_plan=plan,
        structure_size=h,
        params=params,
        clip_fraction=clip_fraction,
        warnings_=warns,
    )


def _check_fitted(model: CausalForestModel, n: int):
    for name in ("oob_propensity", "oob_outcome", "oob_cate"):
        arr = getattr(model, name, None)
        if arr is None or arr.shape[0] != n:
            raise NotFitted(f"model lacks {name} of length {n}")


def doubly_robust_scores(model: CausalForestModel, y: np.ndarray, a: np.ndarray) -> DrScores:
    """AIPW scores from out-of-bag nuisances, propensity clipped before use."""
    y = np.asarray(y, dtype=np.float64)
    a = np.asarray(a, dtype=np.float64)
    _check_fitted(model, y.shape[0])
    e = np.clip(model.oob_propensity, *PROPENSITY_CLIP)
    m = model.oob_outcome
    tau = model.oob_cate
    resid = y - m - (a - e) * tau
    scores = tau + (a - e) / (e * (1.0 - e)) * resid
    return DrScores(scores=scores)


def average_treatment_effect(model: CausalForestModel, y: np.ndarray, a: np.ndarray) -> float:
    """Forest ATE estimate: the mean of the AIPW construction."""
    y = np.asarray(y, dtype=np.float64)
    a = np.asarray(a, dtype=np.float64)
    _check_fitted(model, y.shape[0])
    e = np.clip(model.oob_propensity, *PROPENSITY_CLIP)
    augment = (a - e) * (y - model.oob_outcome - (a - e) * model.oob_cate) / (e * (1.0 - e))
    return float(np.mean(model.oob_cate + augment))
