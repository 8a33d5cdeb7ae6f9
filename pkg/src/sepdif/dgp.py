"""Data-generating processes for the two simulation scenarios.

Both scenarios share the covariate law (one standard normal, one
Bernoulli(0.5)), a logistic group-selection model, a logistic studied-item
model whose linear predictor carries the group main effect ``delta`` and the
group-by-ability interaction ``eta``, and a DIF-free two-parameter-logistic
anchor block used only for ability estimation.

* ``simple``  scenario: ability is standard normal, independent of group.
* ``general`` scenario: ability is linear in group (item impact) and in the
  covariates plus normal noise, so ability mediates part of the group gap.

``true_tau_ss`` / ``true_tau_gs`` evaluate the two identified estimands
exactly under a known config by deterministic quadrature (Gauss-Hermite for
the normal covariate, enumeration for the Bernoulli one), never Monte Carlo,
so oracle fixtures are stable to <=1e-6.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from .data import DifDataset, validate_dataset, write_dataset_csv
from .errors import InvalidConfig, WrongScenario
from .streams import substream

__all__ = [
    "DgpConfig",
    "SimulatedData",
    "default_anchor_params",
    "simple_config",
    "general_config",
    "generate",
    "true_tau_ss",
    "true_tau_gs",
    "plugin_tau_ss",
    "plugin_tau_gs",
]

SCENARIOS = ("simple", "general")
COVARIATE_NAMES = ("x_norm", "x_bern")

_GH_NODES, _GH_WEIGHTS = np.polynomial.hermite.hermgauss(64)
_GH_NODES = _GH_NODES * np.sqrt(2.0)           # nodes for N(0, 1)
_GH_WEIGHTS = _GH_WEIGHTS / np.sqrt(np.pi)     # weights summing to 1


def expit(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=float)))


@dataclass(frozen=True)
class DgpConfig:
    """Full specification of one simulated scenario.

    ``effect_main`` (group main effect) and ``effect_interaction``
    (group x ability) are on the logit scale.  ``impact_coef`` is the
    coefficient of group on ability and must be 0 in the simple scenario.
    Anchor parameters are concrete per-item (discrimination, difficulty)
    pairs; ``default_anchor_params`` draws them from a seed.
    """

    scenario: str
    n: int = 4000
    effect_main: float = 0.0
    effect_interaction: float = 0.0
    selection_intercept: float = -0.2
    selection_coefs: tuple[float, float] = (0.4, 0.4)
    outcome_intercept: float = 0.0
    outcome_ability_slope: float = 1.0
    outcome_covariate_coefs: tuple[float, float] = (0.3, 0.3)
    impact_coef: float = 0.0
    ability_covariate_coefs: tuple[float, float] = (0.0, 0.0)
    ability_residual_sd: float = 1.0
    anchor_params: tuple[tuple[float, float], ...] = ()
    seed: int = 0

    def __post_init__(self):
        if self.scenario not in SCENARIOS:
            raise InvalidConfig(f"scenario must be one of {SCENARIOS}, got {self.scenario!r}")
        if self.n < 1:
            raise InvalidConfig(f"n must be >= 1, got {self.n}")
        if self.ability_residual_sd <= 0:
            raise InvalidConfig(f"ability_residual_sd must be > 0, got {self.ability_residual_sd}")
        if self.scenario == "simple" and (
            self.impact_coef != 0.0 or any(c != 0.0 for c in self.ability_covariate_coefs)
        ):
            raise InvalidConfig("simple scenario requires impact_coef = 0 and no "
                                "ability-covariate path")
        for a_j, _ in self.anchor_params:
            if a_j <= 0:
                raise InvalidConfig(f"anchor discrimination must be > 0, got {a_j}")

    @property
    def n_anchors(self) -> int:
        return len(self.anchor_params)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def default_anchor_params(m: int = 60, seed: int = 0) -> tuple[tuple[float, float], ...]:
    """Draw m anchor items: discrimination LogNormal(0, 0.25^2), difficulty N(0, 1)."""
    rng = substream(seed, 90)
    a = np.exp(rng.normal(0.0, 0.25, size=m))
    b = rng.normal(0.0, 1.0, size=m)
    return tuple((float(aj), float(bj)) for aj, bj in zip(a, b))


def simple_config(delta: float = 0.0, eta: float = 0.0, n: int = 4000,
                  seed: int = 0, m_anchors: int = 60) -> DgpConfig:
    """Simple scenario with the default nuisance coefficients."""
    return DgpConfig(
        scenario="simple", n=n, effect_main=delta, effect_interaction=eta,
        anchor_params=default_anchor_params(m_anchors, seed), seed=seed,
    )


def general_config(delta: float = 0.0, eta: float = 0.0, n: int = 4000,
                   seed: int = 0, m_anchors: int = 60) -> DgpConfig:
    """General scenario: item impact -0.5, ability residual sd 0.8."""
    return DgpConfig(
        scenario="general", n=n, effect_main=delta, effect_interaction=eta,
        impact_coef=-0.5, ability_covariate_coefs=(0.3, 0.3),
        ability_residual_sd=0.8,
        anchor_params=default_anchor_params(m_anchors, seed), seed=seed,
    )


@dataclass(frozen=True)
class SimulatedData:
    """One simulated sample: studied item dataset, anchor block, true ability."""

    dataset: DifDataset
    anchor_responses: np.ndarray     # (n, m) in {0, 1}
    true_ability: np.ndarray         # (n,) kept for oracle checks

    def export_csv(self, data_path, anchor_path) -> None:
        write_dataset_csv(self.dataset, data_path)
        import pandas as pd

        cols = {f"item{j:02d}": self.anchor_responses[:, j]
                for j in range(self.anchor_responses.shape[1])}
        pd.DataFrame(cols).to_csv(anchor_path, index=False)


def _outcome_linpred(cfg: DgpConfig, a, theta, x):
    lp = (cfg.outcome_intercept
          + cfg.outcome_ability_slope * theta
          + x @ np.asarray(cfg.outcome_covariate_coefs)
          + cfg.effect_main * a
          + cfg.effect_interaction * a * theta)
    return lp


def _ability_mean(cfg: DgpConfig, a, x):
    return cfg.impact_coef * a + x @ np.asarray(cfg.ability_covariate_coefs)


def generate(config: DgpConfig) -> SimulatedData:
    """Draw one sample from the configured scenario, deterministic given seed."""
    n = config.n
    rng_x = substream(config.seed, 0)
    rng_a = substream(config.seed, 1)
    rng_t = substream(config.seed, 2)
    rng_y = substream(config.seed, 3)
    rng_anchor = substream(config.seed, 4)

    x = np.column_stack([rng_x.normal(size=n), rng_x.binomial(1, 0.5, size=n).astype(float)])
    p_a = expit(config.selection_intercept + x @ np.asarray(config.selection_coefs))
    a = (rng_a.random(n) < p_a).astype(float)

    if config.scenario == "simple":
        theta = rng_t.normal(0.0, config.ability_residual_sd, size=n)
    else:
        theta = _ability_mean(config, a, x) + rng_t.normal(0.0, config.ability_residual_sd, size=n)

    y = (rng_y.random(n) < expit(_outcome_linpred(config, a, theta, x))).astype(int)

    m = config.n_anchors
    anchors = np.empty((n, m), dtype=np.int8)
    if m:
        disc = np.array([p[0] for p in config.anchor_params])
        diff = np.array([p[1] for p in config.anchor_params])
        p_anchor = expit(disc[None, :] * (theta[:, None] - diff[None, :]))
        anchors = (rng_anchor.random((n, m)) < p_anchor).astype(np.int8)

    dataset = validate_dataset(
        {
            "item_response": y,
            "group": a,
            "ability": theta,
            "covariates": x,
            "covariate_names": COVARIATE_NAMES,
        }
    )
    return SimulatedData(dataset=dataset, anchor_responses=anchors, true_ability=theta.copy())


def _covariate_quadrature():
    """Nodes and weights for E over (normal, Bernoulli(0.5)) covariates."""
    x1 = np.repeat(_GH_NODES, 2)
    x2 = np.tile([0.0, 1.0], _GH_NODES.size)
    w = np.repeat(_GH_WEIGHTS, 2) * 0.5
    return np.column_stack([x1, x2]), w


def true_tau_ss(config: DgpConfig, theta: float) -> float:
    """Exact no-impact estimand at one ability value under the known DGP.

    Averages the focal-minus-reference response-probability contrast over
    the covariate law; ability is independent of the covariates in this
    scenario so the unconditional average is the conditional one.
    """
    if config.scenario != "simple":
        raise WrongScenario("true_tau_ss requires a simple-scenario config")
    xg, w = _covariate_quadrature()
    contrast = expit(_outcome_linpred(config, 1.0, theta, xg)) - expit(
        _outcome_linpred(config, 0.0, theta, xg)
    )
    return float(np.sum(w * contrast))


def true_tau_gs(config: DgpConfig, theta: float) -> float:
    """Exact impact-scenario estimand at one ability value under the known DGP.

    Ratio form: the covariate average of the response-probability contrast,
    weighted by the conditional ability density at ``theta`` given the focal
    group and the covariates, over the average of that same density.
    """
    if config.scenario != "general":
        raise WrongScenario("true_tau_gs requires a general-scenario config")
    xg, w = _covariate_quadrature()
    contrast = expit(_outcome_linpred(config, 1.0, theta, xg)) - expit(
        _outcome_linpred(config, 0.0, theta, xg)
    )
    mu = _ability_mean(config, 1.0, xg)
    sd = config.ability_residual_sd
    dens = np.exp(-0.5 * ((theta - mu) / sd) ** 2) / (sd * np.sqrt(2.0 * np.pi))
    num = np.sum(w * contrast * dens)
    den = np.sum(w * dens)
    return float(num / den)


# ---- plug-in empirical evaluation of the identification formulas ----------
# Fits the correctly-specified outcome (and, in the impact scenario, ability)
# models on a sample and averages over the empirical covariate distribution.
# With large n these converge to the quadrature oracles above, which checks
# that the identified formulas and the oracles agree.

def _fit_outcome_model(sim: SimulatedData):
    from sklearn.linear_model import LogisticRegression

    ds = sim.dataset
    a = ds.group.astype(float)
    theta = np.asarray(ds.ability)
    design = np.column_stack([a, theta, ds.covariates, a * theta])
    model = LogisticRegression(penalty=None, max_iter=2000)
    model.fit(design, ds.item_response)
    return model


def _predict_contrast(model, theta: float, x: np.ndarray) -> np.ndarray:
    n = x.shape[0]
    th = np.full(n, theta)
    d1 = np.column_stack([np.ones(n), th, x, th])
    d0 = np.column_stack([np.zeros(n), th, x, np.zeros(n)])
    return model.predict_proba(d1)[:, 1] - model.predict_proba(d0)[:, 1]


def plugin_tau_ss(sim: SimulatedData, theta: float) -> float:
    """Empirical plug-in of the no-impact adjustment formula."""
    model = _fit_outcome_model(sim)
    return float(np.mean(_predict_contrast(model, theta, sim.dataset.covariates)))


def plugin_tau_gs(sim: SimulatedData, theta: float) -> float:
    """Empirical plug-in of the impact-scenario ratio formula."""
    model = _fit_outcome_model(sim)
    ds = sim.dataset
    design = np.column_stack([ds.group.astype(float), ds.covariates])
    th = np.asarray(ds.ability)
    coef, *_ = np.linalg.lstsq(np.column_stack([np.ones(ds.n), design]), th, rcond=None)
    resid = th - np.column_stack([np.ones(ds.n), design]) @ coef
    sigma = float(np.sqrt(np.mean(resid**2)))
    mu_focal = coef[0] + coef[1] + ds.covariates @ coef[2:]
    dens = np.exp(-0.5 * ((theta - mu_focal) / sigma) ** 2) / (sigma * np.sqrt(2 * np.pi))
    contrast = _predict_contrast(model, theta, ds.covariates)
    return float(np.sum(contrast * dens) / np.sum(dens))
