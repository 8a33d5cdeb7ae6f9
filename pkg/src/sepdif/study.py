"""Replication engine for the detection-rate studies.

A study config names a scenario (simple or general), one or more effect
conditions (zero / constant / heterogeneous, mapping to group main effect
and group-by-ability interaction of (0, 0), (0.5, 0), (0.5, 0.25) on the
logit scale), the ability source (true values or EAP estimates from the
anchors), the detector settings, and the replication count.  Every
replication draws its own counter-based stream from the master seed, so
rates are invariant to worker count and execution order.
"""

from __future__ import annotations

import configparser
import dataclasses
import json
import os
import time
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .bart import BartParams
from .data import config_digest
from .dgp import DgpConfig, default_anchor_params, generate
from .errors import InvalidConfig, StudyFailure
from .forest import ForestParams
from .gs import AbilityGrid, DensityModel, default_grid, detect_gs
from .irt import eap_scores, fit_2pl, fit_latent_regression_2pl
from .ss import detect_ss
from .streams import substream

__all__ = ["StudyConfig", "RatesTable", "run_simulation", "build_replication_data"]

CONDITIONS = {"zero": (0.0, 0.0), "constant": (0.5, 0.0), "heterogeneous": (0.5, 0.25)}
WORKERS_ENV = "SEPDIF_WORKERS"
MAX_FAILURE_SHARE = 0.01


@dataclass(frozen=True)
class StudyConfig:
    """Everything needed to reproduce one rates table."""

    scenario: str                                  # "simple" | "general"
    conditions: tuple[str, ...] = ("zero", "constant", "heterogeneous")
    ability_source: str = "true"                   # "true" | "estimated"
    replications: int = 500
    alpha: float = 0.05
    seed: int = 20260810
    workers: int | None = None
    n: int = 4000
    n_anchors: int = 60
    dgp_overrides: dict = field(default_factory=dict)
    forest: ForestParams = ForestParams(num_trees=500)   # simulation-mode default
    bart: BartParams = BartParams()
    grid: tuple[float, ...] = tuple(default_grid().values)
    density_method: str = "estimated"              # "estimated" | "known"

    def __post_init__(self):
        if self.scenario not in ("simple", "general"):
            raise InvalidConfig(f"unknown scenario {self.scenario!r}")
        for c in self.conditions:
            if c not in CONDITIONS:
                raise InvalidConfig(f"unknown effect condition {c!r}")
        if self.ability_source not in ("true", "estimated"):
            raise InvalidConfig(f"unknown ability source {self.ability_source!r}")
        if self.replications < 1:
            raise InvalidConfig("replications must be >= 1")
        if not 0.0 < self.alpha < 1.0:
            raise InvalidConfig("alpha must be in (0, 1)")
        if self.density_method not in ("estimated", "known"):
            raise InvalidConfig(f"unknown density method {self.density_method!r}")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        return d

    def digest(self) -> str:
        return config_digest(self.to_dict())

    # ---- flat key/value config file (INI sections) ------------------------

    def to_ini(self, path) -> None:
        cp = configparser.ConfigParser()
        cp["study"] = {
            "scenario": self.scenario,
            "conditions": ",".join(self.conditions),
            "ability_source": self.ability_source,
            "replications": str(self.replications),
            "alpha": repr(self.alpha),
            "seed": str(self.seed),
            "workers": "" if self.workers is None else str(self.workers),
        }
        cp["dgp"] = {
            "n": str(self.n),
            "n_anchors": str(self.n_anchors),
            **{k: repr(v) for k, v in self.dgp_overrides.items()},
        }
        cp["forest"] = {
            "num_trees": str(self.forest.num_trees),
            "subsample_fraction": repr(self.forest.subsample_fraction),
            "honesty_fraction": repr(self.forest.honesty_fraction),
            "min_leaf_size": str(self.forest.min_leaf_size),
            "mtry": "" if self.forest.mtry is None else str(self.forest.mtry),
        }
        cp["bart"] = {
            "num_trees": str(self.bart.num_trees),
            "burn_in": str(self.bart.burn_in),
            "draws": str(self.bart.draws),
            "thinning": str(self.bart.thinning),
            "k": repr(self.bart.k),
            "prior_alpha": repr(self.bart.prior_alpha),
            "prior_beta": repr(self.bart.prior_beta),
        }
        cp["gs"] = {
            "grid": ",".join(repr(g) for g in self.grid),
            "density_method": self.density_method,
        }
        with open(path, "w") as fh:
            cp.write(fh)

    @classmethod
    def from_ini(cls, path) -> "StudyConfig":
        cp = configparser.ConfigParser()
        if not cp.read(path):
            raise InvalidConfig(f"cannot read config file {path}")
        st = cp["study"]
        dgp = cp["dgp"] if cp.has_section("dgp") else {}
        forest = cp["forest"] if cp.has_section("forest") else {}
        bart = cp["bart"] if cp.has_section("bart") else {}
        gs = cp["gs"] if cp.has_section("gs") else {}

        dgp_overrides = {}
        for key, val in dict(dgp).items():
            if key in ("n", "n_anchors"):
                continue
            dgp_overrides[key] = json.loads(val.replace("(", "[").replace(")", "]"))

        forest_kwargs = {}
        if forest:
            forest_kwargs = {
                "num_trees": int(forest.get("num_trees", 500)),
                "subsample_fraction": float(forest.get("subsample_fraction", 0.5)),
                "honesty_fraction": float(forest.get("honesty_fraction", 0.5)),
                "min_leaf_size": int(forest.get("min_leaf_size", 5)),
            }
            if forest.get("mtry"):
                forest_kwargs["mtry"] = int(forest["mtry"])
        bart_kwargs = {}
        if bart:
            bart_kwargs = {
                "num_trees": int(bart.get("num_trees", 200)),
                "burn_in": int(bart.get("burn_in", 500)),
                "draws": int(bart.get("draws", 1000)),
                "thinning": int(bart.get("thinning", 1)),
                "k": float(bart.get("k", 2.0)),
                "prior_alpha": float(bart.get("prior_alpha", 0.95)),
                "prior_beta": float(bart.get("prior_beta", 2.0)),
            }
        grid = tuple(default_grid().values)
        if gs and gs.get("grid"):
            grid = tuple(float(x) for x in gs["grid"].split(","))

        return cls(
            scenario=st["scenario"],
            conditions=tuple(c.strip() for c in st.get("conditions",
                             "zero,constant,heterogeneous").split(",") if c.strip()),
            ability_source=st.get("ability_source", "true"),
            replications=int(st.get("replications", 500)),
            alpha=float(st.get("alpha", 0.05)),
            seed=int(st.get("seed", 20260810)),
            workers=int(st["workers"]) if st.get("workers") else None,
            n=int(dgp.get("n", 4000)) if dgp else 4000,
            n_anchors=int(dgp.get("n_anchors", 60)) if dgp else 60,
            dgp_overrides=dgp_overrides,
            forest=ForestParams(**forest_kwargs) if forest_kwargs else ForestParams(num_trees=500),
            bart=BartParams(**bart_kwargs) if bart_kwargs else BartParams(),
            grid=grid,
            density_method=gs.get("density_method", "estimated") if gs else "estimated",
        )


@dataclass
class RatesTable:
    """Per-condition rejection rates with Monte-Carlo standard errors."""

    scenario: str
    ability_source: str
    rows: list
    config_hash: str
    seed: int
    wall_seconds: float = 0.0

    def rate(self, condition: str) -> float:
        for row in self.rows:
            if row["condition"] == condition:
                return row["rate"]
        raise KeyError(condition)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self, path=None) -> str:
        text = json.dumps(self.to_dict(), indent=2, sort_keys=True)
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text + "\n")
        return text

    def to_csv(self, path) -> None:
        import pandas as pd

        pd.DataFrame(self.rows).to_csv(path, index=False)


def _dgp_for(cfg: StudyConfig, condition: str, rep_seed: int) -> DgpConfig:
    delta, eta = CONDITIONS[condition]
    base = dict(
        scenario=cfg.scenario,
        n=cfg.n,
        effect_main=delta,
        effect_interaction=eta,
        anchor_params=default_anchor_params(cfg.n_anchors, cfg.seed),
        seed=rep_seed,
    )
    if cfg.scenario == "general":
        base.update(impact_coef=-0.5, ability_covariate_coefs=(0.3, 0.3),
                    ability_residual_sd=0.8)
    base.update(cfg.dgp_overrides)
    return DgpConfig(**base)


def build_replication_data(cfg: StudyConfig, condition: str, rep: int):
    """Generate one replication's dataset with the configured ability source."""
    cond_idx = list(CONDITIONS).index(condition)
    rep_seed = int(substream(cfg.seed, cond_idx, rep).integers(0, 2**62))
    dgp = _dgp_for(cfg, condition, rep_seed)
    sim = generate(dgp)
    ds = sim.dataset
    if cfg.ability_source == "estimated":
        import warnings

        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            if cfg.scenario == "simple":
                model = fit_2pl(sim.anchor_responses)
                theta_hat = eap_scores(model, sim.anchor_responses)
            else:
                model = fit_latent_regression_2pl(
                    sim.anchor_responses, ds.group, ds.covariates
                )
                theta_hat = eap_scores(model, sim.anchor_responses, ds.group, ds.covariates)
        ds = ds.with_ability(theta_hat)
    return ds, dgp, rep_seed


def _run_one(args):
    cfg, condition, rep = args
    try:
        import warnings

        ds, dgp, rep_seed = build_replication_data(cfg, condition, rep)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            if cfg.scenario == "simple":
                params = dataclasses.replace(cfg.forest, seed=rep_seed)
                report = detect_ss(ds, params, cfg.alpha)
            else:
                params = dataclasses.replace(cfg.bart, seed=rep_seed)
                if cfg.density_method == "known":
                    dm = DensityModel.from_dgp(dgp)
                else:
                    dm = DensityModel.estimate(ds)
                report = detect_gs(ds, AbilityGrid(cfg.grid), params, dm, cfg.alpha)
        return condition, rep, report.rejected, None
    except Exception:
        return condition, rep, None, traceback.format_exc()


def run_simulation(cfg: StudyConfig, progress=None) -> RatesTable:
    """Run every (condition, replication) cell and aggregate rejection rates.

    Failed replications are recorded; if more than 1% of a run fails the
    study aborts with the collected tracebacks.
    """
    t0 = time.perf_counter()
    tasks = [(cfg, cond, rep) for cond in cfg.conditions
             for rep in range(cfg.replications)]
    workers = cfg.workers or int(os.environ.get(WORKERS_ENV, 0)) or os.cpu_count() or 1

    rejects = {c: 0 for c in cfg.conditions}
    done = {c: 0 for c in cfg.conditions}
    failures = []

    if workers == 1:
        results = map(_run_one, tasks)
        for out in results:
            _collect(out, rejects, done, failures, progress, len(tasks))
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            for out in pool.map(_run_one, tasks, chunksize=1):
                _collect(out, rejects, done, failures, progress, len(tasks))

    n_total = len(tasks)
    if len(failures) > MAX_FAILURE_SHARE * n_total:
        raise StudyFailure(
            f"{len(failures)} of {n_total} replications failed", failures=failures
        )

    rows = []
    for cond in cfg.conditions:
        r = cfg.replications - sum(1 for f in failures if f[0] == cond)
        rate = rejects[cond] / r if r else float("nan")
        rows.append(
            {
                "condition": cond,
                "rate": rate,
                "replications": r,
                "mc_se": float(np.sqrt(rate * (1.0 - rate) / r)) if r else float("nan"),
                "failed": cfg.replications - r,
            }
        )
    return RatesTable(
        scenario=cfg.scenario,
        ability_source=cfg.ability_source,
        rows=rows,
        config_hash=cfg.digest(),
        seed=cfg.seed,
        wall_seconds=time.perf_counter() - t0,
    )


def _collect(out, rejects, done, failures, progress, n_total):
    condition, rep, rejected, err = out
    if err is not None:
        failures.append((condition, rep, err))
    else:
        done[condition] += 1
        if rejected:
            rejects[condition] += 1
    if progress is not None:
        progress(sum(done.values()) + len(failures), n_total, condition)
