"""Core domain types: datasets, positivity diagnostics, detection reports.

A :class:`DifDataset` holds one studied item's binary responses together
with the group label, ability values, and covariates.  Group coding is
fixed to {0, 1} with 1 = focal; every contrast in the package is focal
minus reference.  All types are immutable after construction and safe to
share across parallel workers.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import time
import warnings
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from .errors import (
    DegenerateDesign,
    LengthMismatch,
    NonBinaryResponse,
    NonFiniteAbility,
    SingleGroup,
)

__all__ = [
    "DifDataset",
    "PositivityDiagnostic",
    "DetectionReport",
    "validate_dataset",
    "positivity_check",
    "read_dataset_csv",
    "write_dataset_csv",
]


def _frozen(a: np.ndarray) -> np.ndarray:
    out = np.ascontiguousarray(a)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class DifDataset:
    """One item's responses plus group, ability, and covariates.

    Construct via :func:`validate_dataset` (or :func:`read_dataset_csv`);
    direct construction skips invariant checks.
    """

    item_response: np.ndarray          # (n,) values in {0, 1}
    group: np.ndarray                  # (n,) values in {0, 1}, 1 = focal
    ability: np.ndarray | None         # (n,) float, logit metric; may be absent
    covariates: np.ndarray             # (n, p), p >= 0
    covariate_names: tuple[str, ...] = ()

    @property
    def n(self) -> int:
        return self.item_response.shape[0]

    @property
    def n_covariates(self) -> int:
        return self.covariates.shape[1]

    @property
    def has_ability(self) -> bool:
        return self.ability is not None

    def with_ability(self, ability: np.ndarray) -> "DifDataset":
        """Return a copy with the ability column replaced (e.g. by EAP scores)."""
        ds = dataclasses.replace(self, ability=np.asarray(ability, dtype=float))
        return validate_dataset(ds)

    def fingerprint(self) -> str:
        """Stable content hash used in report provenance."""
        h = hashlib.sha256()
        h.update(self.item_response.tobytes())
        h.update(self.group.tobytes())
        if self.ability is not None:
            h.update(np.asarray(self.ability, dtype=float).tobytes())
        h.update(np.asarray(self.covariates, dtype=float).tobytes())
        h.update(",".join(self.covariate_names).encode())
        return h.hexdigest()[:16]


def validate_dataset(raw) -> DifDataset:
    """Validate a dataset candidate and return an immutable :class:`DifDataset`.

    Accepts a :class:`DifDataset`, a mapping with keys ``item_response``,
    ``group`` and optionally ``ability`` / ``covariates`` / ``covariate_names``,
    or any object exposing those attributes.  Idempotent: validating a
    validated dataset returns an equal dataset.
    """
    if isinstance(raw, dict):
        get = raw.get
    else:
        def get(name, default=None):
            return getattr(raw, name, default)

    y = np.asarray(get("item_response"), dtype=float)
    a = np.asarray(get("group"), dtype=float)
    theta = get("ability")
    x = get("covariates")
    names = tuple(get("covariate_names") or ())

    n = y.shape[0]
    if n < 2:
        raise LengthMismatch(f"need at least 2 rows, got {n}")
    if a.shape[0] != n:
        raise LengthMismatch(f"group has length {a.shape[0]}, item_response has {n}")

    for col, vec in (("item_response", y), ("group", a)):
        bad = np.nonzero(~np.isin(vec, (0.0, 1.0)))[0]
        if bad.size:
            raise NonBinaryResponse(
                f"column '{col}' has non-binary value {vec[bad[0]]!r} at row {bad[0]}"
            )
    if a.min() == a.max():
        raise SingleGroup(f"column 'group' has a single level ({int(a[0])})")

    if theta is not None:
        theta = np.asarray(theta, dtype=float)
        if theta.shape[0] != n:
            raise LengthMismatch(f"ability has length {theta.shape[0]}, expected {n}")
        bad = np.nonzero(~np.isfinite(theta))[0]
        if bad.size:
            raise NonFiniteAbility(f"ability has non-finite value at row {bad[0]}")
        theta = _frozen(theta)

    if x is None:
        x = np.empty((n, 0), dtype=float)
    else:
        x = np.asarray(x, dtype=float)
        if x.ndim == 1:
            x = x[:, None]
        if x.shape[0] != n:
            raise LengthMismatch(f"covariates have {x.shape[0]} rows, expected {n}")
        bad = np.argwhere(~np.isfinite(x))
        if bad.size:
            r, c = bad[0]
            label = names[c] if c < len(names) else f"column {c}"
            raise NonFiniteAbility(f"covariate '{label}' non-finite at row {r}")
    if not names:
        names = tuple(f"x{j}" for j in range(x.shape[1]))
    elif len(names) != x.shape[1]:
        raise LengthMismatch(
            f"{len(names)} covariate names for {x.shape[1]} covariate columns"
        )

    return DifDataset(
        item_response=_frozen(y.astype(np.int8)),
        group=_frozen(a.astype(np.int8)),
        ability=theta,
        covariates=_frozen(x),
        covariate_names=names,
    )


@dataclass(frozen=True)
class PositivityDiagnostic:
    """Extremes of the estimated group propensity and the flag count."""

    min_propensity: float
    max_propensity: float
    n_flagged: int
    epsilon: float

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def positivity_check(
    ds: DifDataset, epsilon: float = 0.01, include_ability: bool | None = None
) -> PositivityDiagnostic:
    """Estimate P(group = 1 | covariates[, ability]) and report its extremes.

    ``include_ability`` controls whether ability joins the propensity design
    (it does under the no-impact analysis, not under the impact analysis);
    by default ability is used whenever present.  The check warns, it never
    rejects: near-violations are reported through ``n_flagged``.
    """
    if not 0.0 < epsilon < 0.5:
        raise ValueError(f"epsilon must be in (0, 0.5), got {epsilon}")
    if include_ability is None:
        include_ability = ds.has_ability

    cols = [ds.covariates]
    if include_ability:
        if not ds.has_ability:
            raise ValueError("include_ability=True but the dataset has no ability column")
        cols.append(np.asarray(ds.ability, dtype=float)[:, None])
    design = np.hstack(cols)

    if design.shape[1] == 0:
        p = np.full(ds.n, float(np.mean(ds.group)))
    else:
        from sklearn.exceptions import ConvergenceWarning
        from sklearn.linear_model import LogisticRegression

        with warnings.catch_warnings():
            warnings.simplefilter("ignore", ConvergenceWarning)
            try:
                model = LogisticRegression(penalty=None, max_iter=2000)
                model.fit(design, np.asarray(ds.group))
                p = model.predict_proba(design)[:, 1]
            except Exception as exc:  # pragma: no cover - sklearn internals
                raise DegenerateDesign(f"propensity fit failed: {exc}") from exc
        if not np.all(np.isfinite(p)):
            raise DegenerateDesign("propensity fit produced non-finite probabilities")

    n_flagged = int(np.sum((p < epsilon) | (p > 1.0 - epsilon)))
    if n_flagged:
        warnings.warn(
            f"{n_flagged} of {ds.n} units have estimated group propensity outside "
            f"[{epsilon}, {1 - epsilon}]",
            stacklevel=2,
        )
    return PositivityDiagnostic(
        min_propensity=float(p.min()),
        max_propensity=float(p.max()),
        n_flagged=n_flagged,
        epsilon=float(epsilon),
    )


@dataclass
class DetectionReport:
    """Outcome of one detection run: decision, statistics, diagnostics.

    ``statistics`` is method specific: the no-impact detector records the
    Wald F, degrees of freedom, p-value and projection coefficients; the
    impact detector records the per-grid effect curve with raw and adjusted
    p-values.  ``timing`` is excluded from provenance hashing so identical
    configs reproduce identical reports byte for byte.
    """

    method: str                  # "SimpleSeparable" | "GeneralSeparable"
    decision: str                # "reject" | "fail_to_reject"
    alpha: float
    statistics: dict
    diagnostics: dict
    provenance: dict
    timing: dict = field(default_factory=dict)

    @property
    def rejected(self) -> bool:
        return self.decision == "reject"

    def to_dict(self, include_timing: bool = True) -> dict:
        d = {
            "method": self.method,
            "decision": self.decision,
            "alpha": self.alpha,
            "statistics": self.statistics,
            "diagnostics": self.diagnostics,
            "provenance": self.provenance,
        }
        if include_timing:
            d["timing"] = self.timing
        return d

    def to_json(self, path=None, include_timing: bool = True) -> str:
        text = json.dumps(self.to_dict(include_timing), indent=2, sort_keys=True)
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text + "\n")
        return text

    @classmethod
    def from_dict(cls, d: dict) -> "DetectionReport":
        return cls(
            method=d["method"],
            decision=d["decision"],
            alpha=d["alpha"],
            statistics=d["statistics"],
            diagnostics=d["diagnostics"],
            provenance=d["provenance"],
            timing=d.get("timing", {}),
        )


def new_timing() -> dict:
    return {"created_at": time.strftime("%Y-%m-%dT%H:%M:%S%z"), "seconds": None}


def config_digest(obj) -> str:
    """Short stable hash of any JSON-serializable configuration object."""
    text = json.dumps(obj, sort_keys=True, default=_json_default)
    return hashlib.sha256(text.encode()).hexdigest()[:16]


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if dataclasses.is_dataclass(o):
        return dataclasses.asdict(o)
    raise TypeError(f"not JSON serializable: {type(o)}")


# ---- CSV interface ---------------------------------------------------------
# Header row required.  Columns: `y`, `a` mandatory; `theta` optional; all
# remaining columns are covariates.  Missing values are a hard error.

def read_dataset_csv(path) -> DifDataset:
    df = pd.read_csv(path)
    for col in ("y", "a"):
        if col not in df.columns:
            raise LengthMismatch(f"{path}: required column '{col}' missing")
    if df.isna().any().any():
        col = df.columns[df.isna().any().values][0]
        row = int(df.index[df[col].isna()][0])
        raise NonFiniteAbility(f"{path}: missing value in column '{col}' at row {row}")
    theta = df["theta"].to_numpy(float) if "theta" in df.columns else None
    cov_cols = [c for c in df.columns if c not in ("y", "a", "theta")]
    return validate_dataset(
        {
            "item_response": df["y"].to_numpy(),
            "group": df["a"].to_numpy(),
            "ability": theta,
            "covariates": df[cov_cols].to_numpy(float) if cov_cols else None,
            "covariate_names": tuple(cov_cols),
        }
    )


def write_dataset_csv(ds: DifDataset, path) -> None:
    cols = {"y": ds.item_response, "a": ds.group}
    if ds.has_ability:
        cols["theta"] = ds.ability
    for j, name in enumerate(ds.covariate_names):
        cols[name] = ds.covariates[:, j]
    pd.DataFrame(cols).to_csv(path, index=False)
