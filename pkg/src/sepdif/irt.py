"""Ability estimation from anchor items.

Two-parameter-logistic (2PL) calibration by marginal maximum likelihood EM
with a fixed normal quadrature grid, plus the latent-regression variant used
when the ability distribution differs by group (item impact).  Scoring is
expected a posteriori (EAP): the posterior mean of ability on the model's
quadrature.

The latent-regression fit is two stage: items are first calibrated by the
plain 2PL, then held fixed while the latent mean regression (group +
covariates) and residual sd are estimated; the model is finally re-centered
so the latent intercept is 0 for the reference group at covariate zero.
The studied item is never part of ability estimation; callers pass anchors
only.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import CollinearRegressors, DegenerateItem, ShapeMismatch, TooFewSamples

__all__ = ["IrtModel", "fit_2pl", "fit_latent_regression_2pl", "eap_scores"]

N_QUAD = 61
QUAD_RANGE = 6.0
A_BOUNDS = (0.05, 10.0)
B_BOUNDS = (-8.0, 8.0)


def _quadrature():
    nodes = np.linspace(-QUAD_RANGE, QUAD_RANGE, N_QUAD)
    w = np.exp(-0.5 * nodes**2)
    return nodes, w / w.sum()


@dataclass
class IrtModel:
    """Fitted 2PL (optionally latent-regression) model.

    ``latent_regression_coefs`` holds the coefficients of (group,
    covariates...) on the latent mean, or None for the plain model; the
    latent intercept is 0 by construction.  ``fit_log`` records the EM
    trace: iteration count, log-likelihood path, convergence flag.
    """

    discriminations: np.ndarray
    difficulties: np.ndarray
    latent_regression_coefs: np.ndarray | None
    latent_sd: float
    quad_nodes: np.ndarray
    quad_weights: np.ndarray
    fit_log: dict = field(default_factory=dict)

    @property
    def n_items(self) -> int:
        return self.discriminations.shape[0]

    def item_probs(self, nodes=None) -> np.ndarray:
        """P(correct) at each quadrature node, shape (n_nodes, n_items)."""
        th = self.quad_nodes if nodes is None else np.asarray(nodes)
        z = self.discriminations[None, :] * (th[:, None] - self.difficulties[None, :])
        return 1.0 / (1.0 + np.exp(-z))


def _check_anchor_matrix(anchors: np.ndarray) -> np.ndarray:
    anchors = np.asarray(anchors)
    if anchors.ndim != 2:
        raise ShapeMismatch(f"anchor matrix must be 2-D, got shape {anchors.shape}")
    n, m = anchors.shape
    if m < 2:
        raise TooFewSamples(f"need at least 2 anchor items, got {m}")
    if n < m:
        raise TooFewSamples(f"need at least as many persons ({n}) as items ({m})")
    if not np.isin(anchors, (0, 1)).all():
        raise DegenerateItem("anchor responses must be binary")
    means = anchors.mean(axis=0)
    bad = np.nonzero((means == 0.0) | (means == 1.0))[0]
    if bad.size:
        raise DegenerateItem(f"anchor item {bad[0]} is constant (mean {means[bad[0]]})")
    return anchors.astype(float)


def _loglik_by_node(anchors, disc, diff, nodes):
    """Per-person log-likelihood at each node, shape (n, n_nodes)."""
    z = disc[None, :] * (nodes[:, None] - diff[None, :])          # (q, m)
    # stable log expit / log(1 - expit)
    log_p = -np.log1p(np.exp(-z))
    log_q = -z + log_p
    return anchors @ log_p.T + (1.0 - anchors) @ log_q.T          # (n, q)


def _posterior(anchors, disc, diff, nodes, log_prior):
    """Posterior node weights per person plus the observed-data log-likelihood."""
    ll = _loglik_by_node(anchors, disc, diff, nodes) + log_prior
    mx = ll.max(axis=1, keepdims=True)
    p = np.exp(ll - mx)
    norm = p.sum(axis=1, keepdims=True)
    marginal = float(np.sum(np.log(norm.ravel())) + np.sum(mx.ravel()))
    return p / norm, marginal


def _mstep_item(nodes, n_k, r_k, a0, b0):
    """Newton with step-halving for one item's expected-count 2PL likelihood."""
    a, b = a0, b0

    def nll(a_, b_):
        z = a_ * (nodes - b_)
        return -np.sum(r_k * z - n_k * np.logaddexp(0.0, z))

    f0 = nll(a, b)
    for _ in range(50):
        z = a * (nodes - b)
        p = 1.0 / (1.0 + np.exp(-z))
        w = n_k * p * (1.0 - p)
        resid = r_k - n_k * p
        g_a = -np.sum(resid * (nodes - b))
        g_b = np.sum(resid * a)
        h_aa = np.sum(w * (nodes - b) ** 2)
        h_ab = -np.sum(w * (nodes - b) * a) - 0.0
        h_bb = np.sum(w * a * a)
        det = h_aa * h_bb - h_ab * h_ab
        if det <= 1e-12:
            break
        da = -(h_bb * g_a - h_ab * g_b) / det
        db = -(-h_ab * g_a + h_aa * g_b) / det
        step = 1.0
        for _ in range(30):
            a_new = np.clip(a + step * da, *A_BOUNDS)
            b_new = np.clip(b + step * db, *B_BOUNDS)
            f_new = nll(a_new, b_new)
            if f_new <= f0 + 1e-12:
                break
            step *= 0.5
        if max(abs(a_new - a), abs(b_new - b)) < 1e-10:
            a, b, f0 = a_new, b_new, f_new
            break
        a, b, f0 = a_new, b_new, f_new
    return a, b


def fit_2pl(anchors: np.ndarray, max_iter: int = 500, tol: float = 1e-4) -> IrtModel:
    """Calibrate a 2PL by MML-EM with a standard-normal latent prior."""
    anchors = _check_anchor_matrix(anchors)
    n, m = anchors.shape
    nodes, weights = _quadrature()
    log_prior = np.log(weights)[None, :]

    disc = np.ones(m)
    pbar = anchors.mean(axis=0)
    diff = -np.log(pbar / (1.0 - pbar))

    ll_trace = []
    converged = False
    for it in range(max_iter):
        post, marginal = _posterior(anchors, disc, diff, nodes, log_prior)
        if ll_trace and marginal < ll_trace[-1] - 1e-6:
            raise AssertionError(
                f"EM log-likelihood decreased at iteration {it}: "
                f"{ll_trace[-1]:.6f} -> {marginal:.6f}"
            )
        ll_trace.append(marginal)

        n_k = post.sum(axis=0)                     # (q,)
        r = post.T @ anchors                       # (q, m)
        new_disc = disc.copy()
        new_diff = diff.copy()
        for j in range(m):
            new_disc[j], new_diff[j] = _mstep_item(nodes, n_k, r[:, j], disc[j], diff[j])
        delta = max(np.abs(new_disc - disc).max(), np.abs(new_diff - diff).max())
        disc, diff = new_disc, new_diff
        if delta < tol:
            converged = True
            break

    at_bound = bool(np.any((disc <= A_BOUNDS[0]) | (disc >= A_BOUNDS[1]))
                    or np.any((diff <= B_BOUNDS[0]) | (diff >= B_BOUNDS[1])))
    if not converged or at_bound:
        warnings.warn(
            "2PL EM did not converge cleanly"
            + (" (parameter at bound)" if at_bound else "")
            + "; returning best iterate",
            stacklevel=2,
        )
    return IrtModel(
        discriminations=disc,
        difficulties=diff,
        latent_regression_coefs=None,
        latent_sd=1.0,
        quad_nodes=nodes,
        quad_weights=weights,
        fit_log={
            "iterations": len(ll_trace),
            "loglik_trace": ll_trace,
            "final_loglik": ll_trace[-1],
            "converged": converged and not at_bound,
        },
    )


def _regression_design(n: int, group, covariates) -> np.ndarray:
    group = np.asarray(group, dtype=float)
    if group.shape[0] != n:
        raise ShapeMismatch(f"group has length {group.shape[0]}, expected {n}")
    cols = [group[:, None]]
    if covariates is not None:
        covariates = np.asarray(covariates, dtype=float)
        if covariates.ndim == 1:
            covariates = covariates[:, None]
        if covariates.shape[0] != n:
            raise ShapeMismatch(f"covariates have {covariates.shape[0]} rows, expected {n}")
        cols.append(covariates)
    z = np.hstack(cols)
    full = np.column_stack([np.ones(n), z])
    if np.linalg.matrix_rank(full) < full.shape[1]:
        raise CollinearRegressors("latent-regression design is rank deficient")
    return z


def fit_latent_regression_2pl(
    anchors: np.ndarray,
    group: np.ndarray,
    covariates: np.ndarray | None = None,
    max_iter: int = 500,
    tol: float = 1e-4,
) -> IrtModel:
    """2PL with the latent mean regressed on (group, covariates).

    Stage 1 calibrates the items under a standard-normal prior; stage 2
    holds them fixed and runs EM over the regression coefficients and the
    residual latent sd.  The returned model is re-centered so the intercept
    is exactly 0 (absorbed into the difficulties).
    """
    anchors_f = _check_anchor_matrix(anchors)
    n = anchors_f.shape[0]
    z = _regression_design(n, group, covariates)

    base = fit_2pl(anchors, max_iter=max_iter, tol=tol)
    disc, diff = base.discriminations, base.difficulties
    nodes, _ = _quadrature()

    zfull = np.column_stack([np.ones(n), z])
    ztz_inv = np.linalg.inv(zfull.T @ zfull)
    coefs = np.zeros(zfull.shape[1])
    sigma = 1.0

    ll_item = _loglik_by_node(anchors_f, disc, diff, nodes)    # fixed across iterations
    ll_trace = []
    converged = False
    for it in range(max_iter):
        mu = zfull @ coefs
        log_prior = (-0.5 * ((nodes[None, :] - mu[:, None]) / sigma) ** 2
                     - np.log(sigma))
        ll = ll_item + log_prior
        mx = ll.max(axis=1, keepdims=True)
        p = np.exp(ll - mx)
        norm = p.sum(axis=1, keepdims=True)
        post = p / norm
        # marginal likelihood of the discretized latent (constant grid spacing
        # drops out of the comparison across iterations)
        marginal = float(np.sum(np.log(norm.ravel())) + np.sum(mx.ravel()))
        if ll_trace and marginal < ll_trace[-1] - 1e-6:
            raise AssertionError(
                f"latent-regression EM log-likelihood decreased at iteration {it}"
            )
        ll_trace.append(marginal)

        theta_bar = post @ nodes
        theta_sq = post @ nodes**2
        new_coefs = ztz_inv @ (zfull.T @ theta_bar)
        mu_new = zfull @ new_coefs
        var = np.mean(theta_sq - 2.0 * theta_bar * mu_new + mu_new**2)
        new_sigma = float(np.sqrt(max(var, 1e-6)))
        delta = max(np.abs(new_coefs - coefs).max(), abs(new_sigma - sigma))
        coefs, sigma = new_coefs, new_sigma
        if delta < tol:
            converged = True
            break

    # re-center: fold the intercept into the difficulties so the reference
    # group at covariate zero has latent mean exactly 0
    intercept = coefs[0]
    diff = diff - intercept

    if not converged:
        warnings.warn("latent-regression EM did not converge; returning best iterate",
                      stacklevel=2)
    return IrtModel(
        discriminations=disc.copy(),
        difficulties=diff,
        latent_regression_coefs=coefs[1:].copy(),
        latent_sd=sigma,
        quad_nodes=nodes,
        quad_weights=base.quad_weights,
        fit_log={
            "iterations": len(ll_trace),
            "loglik_trace": ll_trace,
            "final_loglik": ll_trace[-1] if ll_trace else None,
            "converged": converged,
            "stage1": base.fit_log,
        },
    )


def eap_scores(
    model: IrtModel,
    anchors: np.ndarray,
    group: np.ndarray | None = None,
    covariates: np.ndarray | None = None,
) -> np.ndarray:
    """Posterior-mean ability per person under the fitted model."""
    anchors = np.asarray(anchors, dtype=float)
    if anchors.ndim != 2 or anchors.shape[1] != model.n_items:
        raise ShapeMismatch(
            f"anchor matrix has shape {anchors.shape}, model has {model.n_items} items"
        )
    n = anchors.shape[0]
    nodes = model.quad_nodes

    if model.latent_regression_coefs is None:
        if group is not None or covariates is not None:
            raise ShapeMismatch("plain 2PL model takes no regressors")
        log_prior = np.broadcast_to(np.log(model.quad_weights)[None, :], (n, nodes.size))
    else:
        if group is None:
            raise ShapeMismatch("latent-regression model requires the group vector")
        z = _regression_design(n, group, covariates)
        if z.shape[1] != model.latent_regression_coefs.shape[0]:
            raise ShapeMismatch(
                f"{z.shape[1]} regressors supplied, model has "
                f"{model.latent_regression_coefs.shape[0]}"
            )
        mu = z @ model.latent_regression_coefs
        log_prior = -0.5 * ((nodes[None, :] - mu[:, None]) / model.latent_sd) ** 2

    ll = _loglik_by_node(anchors, model.discriminations, model.difficulties, nodes)
    ll = ll + log_prior
    mx = ll.max(axis=1, keepdims=True)
    p = np.exp(ll - mx)
    return (p @ nodes) / p.sum(axis=1)
