"""Causal detection of separable differential item functioning.

Two detectors for one studied item at a time:

* :func:`detect_ss` (no item impact): honest causal forest, doubly robust
  scores, best linear projection on ability, joint HC3 Wald test.
* :func:`detect_gs` (item impact): probit sum-of-trees outcome model,
  density-weighted posterior effect curves over an ability grid,
  Benjamini-Hochberg multiplicity control.

Supporting machinery: dataset validation and positivity diagnostics,
simulation scenarios with exact quadrature oracles for both estimands,
2PL / latent-regression 2PL ability estimation with EAP scoring, and a
replication engine that reproduces the detection-rate tables.
"""

from .bart import BartModel, BartParams, IcateDraws, fit_bart_probit, predict_icate
from .data import (
    DetectionReport,
    DifDataset,
    PositivityDiagnostic,
    positivity_check,
    read_dataset_csv,
    validate_dataset,
    write_dataset_csv,
)
from .dgp import (
    DgpConfig,
    SimulatedData,
    general_config,
    generate,
    plugin_tau_gs,
    plugin_tau_ss,
    simple_config,
    true_tau_gs,
    true_tau_ss,
)
from .forest import (
    CausalForestModel,
    DrScores,
    ForestParams,
    RegressionForestModel,
    average_treatment_effect,
    doubly_robust_scores,
    fit_causal_forest,
    fit_regression_forest,
)
from .gs import (
    AbilityGrid,
    DensityModel,
    EffectCurve,
    bh_adjust,
    default_grid,
    density_weights,
    detect_gs,
    posterior_p_values,
    weighted_curve,
)
from .irt import IrtModel, eap_scores, fit_2pl, fit_latent_regression_2pl
from .ss import BlpFit, WaldResult, best_linear_projection, detect_ss, joint_wald_test
from .study import RatesTable, StudyConfig, run_simulation

__version__ = "0.1.0"

__all__ = [
    "AbilityGrid",
    "BartModel",
    "BartParams",
    "BlpFit",
    "CausalForestModel",
    "DensityModel",
    "DetectionReport",
    "DgpConfig",
    "DifDataset",
    "DrScores",
    "EffectCurve",
    "ForestParams",
    "IcateDraws",
    "IrtModel",
    "PositivityDiagnostic",
    "RatesTable",
    "RegressionForestModel",
    "SimulatedData",
    "StudyConfig",
    "WaldResult",
    "average_treatment_effect",
    "best_linear_projection",
    "bh_adjust",
    "default_grid",
    "density_weights",
    "detect_gs",
    "detect_ss",
    "doubly_robust_scores",
    "eap_scores",
    "fit_2pl",
    "fit_bart_probit",
    "fit_causal_forest",
    "fit_latent_regression_2pl",
    "fit_regression_forest",
    "general_config",
    "generate",
    "joint_wald_test",
    "plugin_tau_gs",
    "plugin_tau_ss",
    "positivity_check",
    "posterior_p_values",
    "predict_icate",
    "read_dataset_csv",
    "run_simulation",
    "simple_config",
    "true_tau_gs",
    "true_tau_ss",
    "validate_dataset",
    "weighted_curve",
    "write_dataset_csv",
]
