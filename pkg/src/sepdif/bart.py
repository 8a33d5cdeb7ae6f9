"""Probit sum-of-trees model for the binary item response.

The sampler augments the binary response with truncated-normal latents and
runs backfitting MCMC with grow/prune/change proposals over a fixed number
of regression trees; the latent residual variance is fixed at 1.  The
treatment enters as an ordinary splitting column of a single outcome
surface, and individual-level CATE draws (ICATEs) come from toggling it at
a counterfactual ability value.

Kept posterior draws are stored in a compact replay form (per-draw node
arrays), which both the per-grid ICATE op and the fused grid-curve kernel
traverse.  Chains are deterministic given the seed for any worker count.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtri

from . import _bart_kernels as bk
from .errors import InvalidParams, ShapeMismatch, TooFewSamples
from .streams import kernel_seed

__all__ = ["BartParams", "BartModel", "IcateDraws", "fit_bart_probit", "predict_icate"]

MAX_NODES = 128


@dataclass(frozen=True)
class BartParams:
    """Sampler settings; defaults follow common sum-of-trees practice."""

    num_trees: int = 200
    prior_alpha: float = 0.95        # depth prior: alpha * (1 + depth)^-beta
    prior_beta: float = 2.0
    k: float = 2.0                   # leaf scale: sigma_mu = 3 / (k sqrt(num_trees))
    burn_in: int = 500
    draws: int = 1000
    thinning: int = 1
    proposal_probs: tuple[float, float, float] = (0.25, 0.25, 0.5)
    max_depth: int = 10
    num_cuts: int = 100
    seed: int = 0

    def __post_init__(self):
        if self.draws < 1:
            raise InvalidParams("draws must be >= 1")
        if self.burn_in < 0:
            raise InvalidParams("burn_in must be >= 0")
        if not 0.0 < self.prior_alpha < 1.0:
            raise InvalidParams("prior_alpha must be in (0, 1)")
        if self.prior_beta < 0.0:
            raise InvalidParams("prior_beta must be >= 0")
        if self.num_trees < 1 or self.k <= 0 or self.thinning < 1:
            raise InvalidParams("num_trees, k, thinning must be positive")
        g, p, c = self.proposal_probs
        if g <= 0 or p <= 0 or c < 0 or abs(g + p + c - 1.0) > 1e-9:
            raise InvalidParams("proposal_probs must be positive and sum to 1")

    @property
    def sigma_mu(self) -> float:
        return 3.0 / (self.k * math.sqrt(self.num_trees))


@dataclass
class BartModel:
    """Kept draws in compact replay form plus training metadata."""

    node_var: np.ndarray             # int16, concatenated (draw, tree) blocks
    node_cut: np.ndarray             # float64
    node_val: np.ndarray             # float64
    node_left: np.ndarray            # int32, block-local child index
    node_right: np.ndarray           # int32
    offsets: np.ndarray              # int64, len n_draws * num_trees + 1
    n_draws: int
    num_trees: int
    offset: float                    # fixed probit offset ndtri(mean(y))
    n_columns: int                   # training columns: treatment + W+
    ability_col: int                 # index of the ability column in training X
    acceptance: dict = field(default_factory=dict)
    params: BartParams | None = None
    column_names: tuple[str, ...] = ()
    residual_variance: float = 1.0   # fixed; probit identification

    def latent(self, x_rows: np.ndarray, draw: int) -> np.ndarray:
        """Pure-Python sum of per-tree leaf values for verification.

        ``x_rows`` uses the full training layout (treatment in column 0).
        Slow; the compiled replay kernels are the production path.
        """
        x_rows = np.atleast_2d(np.asarray(x_rows, dtype=float))
        out = np.zeros(x_rows.shape[0])
        for t in range(self.num_trees):
            lo = self.offsets[draw * self.num_trees + t]
            for i in range(x_rows.shape[0]):
                node = 0
                while self.node_var[lo + node] >= 0:
                    col = self.node_var[lo + node]
                    if x_rows[i, col] <= self.node_cut[lo + node]:
                        node = self.node_left[lo + node]
                    else:
                        node = self.node_right[lo + node]
                out[i] += self.node_val[lo + node]
        return out

    def posterior_mean_prob(self, x_rows: np.ndarray) -> np.ndarray:
        """Posterior mean of Phi(latent) at rows in full training layout."""
        x_rows = np.ascontiguousarray(np.atleast_2d(x_rows), dtype=np.float64)
        if x_rows.shape[1] != self.n_columns:
            raise ShapeMismatch(
                f"expected {self.n_columns} columns, got {x_rows.shape[1]}"
            )
        out = np.empty(x_rows.shape[0])
        bk.replay_train_mean(self.node_var, self.node_cut, self.node_val,
                             self.node_left, self.node_right, self.offsets,
                             self.n_draws, self.num_trees, x_rows, self.offset, out)
        return out


@dataclass(frozen=True)
class IcateDraws:
    """D x n matrix of per-draw, per-unit treatment contrasts at one grid value."""

    draws: np.ndarray
    grid_value: float


def _cut_grid(col: np.ndarray, num_cuts: int) -> np.ndarray:
    u = np.unique(col)
    if u.size < 2:
        return np.empty(0, dtype=np.float64)
    mids = 0.5 * (u[1:] + u[:-1])
    if mids.size <= num_cuts:
        return mids.astype(np.float64)
    q = np.linspace(0, mids.size - 1, num_cuts).round().astype(int)
    return mids[np.unique(q)].astype(np.float64)


def fit_bart_probit(y, a, wplus, params: BartParams) -> BartModel:
    """Fit the probit sum-of-trees outcome model on (treatment, W+).

    ``wplus`` must carry the ability column last; the model records its
    position so counterfactual grid prediction can override it.
    """
    y = np.asarray(y)
    a = np.asarray(a)
    W = np.asarray(wplus, dtype=np.float64)
    if W.ndim == 1:
        W = W[:, None]
    n = y.shape[0]
    if a.shape[0] != n or W.shape[0] != n:
        raise ShapeMismatch("y, a, wplus disagree in length")
    if n < 10:
        raise TooFewSamples(f"need at least 10 rows, got {n}")
    for name, vec in (("y", y), ("a", a)):
        if not np.isin(vec, (0, 1)).all():
            raise InvalidParams(f"{name} must be binary 0/1")

    X = np.ascontiguousarray(np.column_stack([a.astype(float), W]))
    P = X.shape[1]
    ability_col = P - 1

    rate = float(np.clip(y.mean(), 1.0 / (n + 1), n / (n + 1.0)))
    offset = float(ndtri(rate))

    cuts = [_cut_grid(X[:, j], params.num_cuts) for j in range(P)]
    cuts_off = np.zeros(P + 1, dtype=np.int64)
    cuts_off[1:] = np.cumsum([c.size for c in cuts])
    cuts_flat = np.concatenate(cuts) if cuts_off[-1] else np.zeros(1)

    T = params.num_trees
    var = np.full((T, MAX_NODES), bk.FREE, dtype=np.int32)
    var[:, 0] = bk.LEAF
    cutv = np.zeros((T, MAX_NODES))
    leafval = np.zeros((T, MAX_NODES))
    left = np.zeros((T, MAX_NODES), dtype=np.int32)
    right = np.zeros((T, MAX_NODES), dtype=np.int32)
    parent = np.full((T, MAX_NODES), -1, dtype=np.int32)
    free_list = np.zeros((T, MAX_NODES), dtype=np.int32)
    free_cnt = np.zeros(T, dtype=np.int64)
    hw = np.ones(T, dtype=np.int64)
    leaf_of = np.zeros((T, n), dtype=np.int32)

    z = np.zeros(n)
    f = np.zeros(n)
    cnt = np.zeros(MAX_NODES, dtype=np.int64)
    ssum = np.zeros(MAX_NODES)
    ulist = np.zeros(n, dtype=np.int64)
    uside = np.zeros(n, dtype=np.uint8)
    state = np.array([kernel_seed(params.seed, 40)], dtype=np.uint64)
    counters = np.zeros((3, 2), dtype=np.int64)
    yb = np.ascontiguousarray(y, dtype=np.int8)

    g_p, p_p, _ = params.proposal_probs
    total_iter = params.burn_in + params.draws * params.thinning

    chunks_var, chunks_cut, chunks_val = [], [], []
    chunks_left, chunks_right = [], []
    block_sizes = []
    alive = np.zeros(T, dtype=np.int64)
    remap = np.zeros(MAX_NODES, dtype=np.int32)

    for it in range(total_iter):
        bk.draw_latents(yb, f, z, offset, state)
        bk.tree_sweep(X, z, f, offset, var, cutv, leafval, left, right, parent,
                      free_list, free_cnt, hw, leaf_of,
                      cuts_flat, cuts_off, params.sigma_mu,
                      params.prior_alpha, params.prior_beta,
                      g_p, p_p, params.max_depth, MAX_NODES,
                      cnt, ssum, ulist, uside, state, counters)
        if it >= params.burn_in and (it - params.burn_in) % params.thinning == 0:
            bk.count_alive(var, hw, alive)
            total = int(alive.sum())
            offsets_t = np.zeros(T, dtype=np.int64)
            offsets_t[1:] = np.cumsum(alive)[:-1]
            o_var = np.empty(total, dtype=np.int16)
            o_cut = np.empty(total)
            o_val = np.empty(total)
            o_left = np.empty(total, dtype=np.int32)
            o_right = np.empty(total, dtype=np.int32)
            bk.snapshot(var, cutv, leafval, left, right, hw, offsets_t,
                        o_var, o_cut, o_val, o_left, o_right, remap)
            chunks_var.append(o_var)
            chunks_cut.append(o_cut)
            chunks_val.append(o_val)
            chunks_left.append(o_left)
            chunks_right.append(o_right)
            block_sizes.append(alive.copy())

    D = len(block_sizes)
    offsets = np.zeros(D * T + 1, dtype=np.int64)
    offsets[1:] = np.cumsum(np.concatenate(block_sizes))

    proposed = counters[:, 0].astype(float)
    accepted = counters[:, 1].astype(float)
    overall = float(accepted.sum() / max(proposed.sum(), 1.0))
    acceptance = {
        "grow": {"proposed": int(counters[0, 0]), "accepted": int(counters[0, 1])},
        "prune": {"proposed": int(counters[1, 0]), "accepted": int(counters[1, 1])},
        "change": {"proposed": int(counters[2, 0]), "accepted": int(counters[2, 1])},
        "overall_rate": overall,
        "mixing_warning": overall < 0.05,
    }
    if acceptance["mixing_warning"]:
        warnings.warn(
            f"average tree-proposal acceptance {overall:.1%} is below 5%; "
            "the chain may be mixing poorly",
            stacklevel=2,
        )

    return BartModel(
        node_var=np.concatenate(chunks_var),
        node_cut=np.concatenate(chunks_cut),
        node_val=np.concatenate(chunks_val),
        node_left=np.concatenate(chunks_left),
        node_right=np.concatenate(chunks_right),
        offsets=offsets,
        n_draws=D,
        num_trees=T,
        offset=offset,
        n_columns=P,
        ability_col=ability_col,
        acceptance=acceptance,
        params=params,
        column_names=("treatment",) + tuple(f"w{j}" for j in range(W.shape[1] - 1)) + ("ability",),
    )


def _check_wplus(model: BartModel, covariates: np.ndarray) -> np.ndarray:
    W = np.asarray(covariates, dtype=np.float64)
    if W.ndim == 1:
        W = W[:, None]
    if W.shape[1] != model.n_columns - 1:
        raise ShapeMismatch(
            f"expected {model.n_columns - 1} columns (covariates + ability), "
            f"got {W.shape[1]}"
        )
    return np.ascontiguousarray(W)


def predict_icate(model: BartModel, covariates: np.ndarray, grid_value: float) -> IcateDraws:
    """Posterior ICATE draws with ability overridden by ``grid_value``.

    ``covariates`` uses the training W+ layout (no treatment column); the
    ability column's values are ignored and replaced by the grid value.
    """
    W = _check_wplus(model, covariates)
    out = np.empty((model.n_draws, W.shape[0]))
    bk.replay_icate(model.node_var, model.node_cut, model.node_val,
                    model.node_left, model.node_right, model.offsets,
                    model.n_draws, model.num_trees, W, model.ability_col,
                    float(grid_value), model.offset, out)
    return IcateDraws(draws=out, grid_value=float(grid_value))


def weighted_grid_sums(model: BartModel, covariates: np.ndarray,
                       grid_values: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """Per-draw weighted treatment contrasts at every grid value (D x G).

    Fused fast path used by the impact detector; equals applying the
    weights to materialized ICATE draws grid point by grid point.
    """
    W = _check_wplus(model, covariates)
    grid = np.ascontiguousarray(grid_values, dtype=np.float64)
    wts = np.ascontiguousarray(weights, dtype=np.float64)
    if wts.shape != (grid.size, W.shape[0]):
        raise ShapeMismatch(
            f"weights must have shape {(grid.size, W.shape[0])}, got {wts.shape}"
        )
    out = np.empty((model.n_draws, grid.size))
    bk.replay_weighted_curve(model.node_var, model.node_cut, model.node_val,
                             model.node_left, model.node_right, model.offsets,
                             model.n_draws, model.num_trees, W, model.ability_col,
                             grid, wts, model.offset, out)
    return out
