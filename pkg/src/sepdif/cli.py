"""Command-line entry points.

Subcommands: ``simulate`` (replication studies / dataset export), ``detect``
(one item, one method), ``score`` (EAP ability scores from anchors), and
``oracle`` (exact estimand values for a configured scenario).

Exit codes: 0 = ran without a rejection, 2 = ran and the detector rejected
(scripting convenience), 3 = usage error, 4 = runtime error.  Worker count
for studies can be overridden with the SEPDIF_WORKERS environment variable.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys

import numpy as np
import pandas as pd

from .bart import BartParams
from .data import read_dataset_csv, validate_dataset
from .dgp import DgpConfig, general_config, generate, simple_config, true_tau_gs, true_tau_ss
from .errors import SepdifError
from .forest import ForestParams
from .gs import AbilityGrid, DensityModel, default_grid, detect_gs
from .irt import eap_scores, fit_2pl, fit_latent_regression_2pl
from .ss import detect_ss
from .study import CONDITIONS, StudyConfig, build_replication_data, run_simulation

USAGE_ERROR = 3
RUNTIME_ERROR = 4


class _Parser(argparse.ArgumentParser):
    """argparse exits with 2 on usage errors; 2 means 'reject' here, so remap."""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        raise SystemExit(USAGE_ERROR)


def _parse_grid(text: str) -> AbilityGrid:
    try:
        lo, hi, step = (float(x) for x in text.split(":"))
        count = int(round((hi - lo) / step)) + 1
        return AbilityGrid(tuple(lo + step * k for k in range(count)))
    except (ValueError, ZeroDivisionError) as exc:
        raise SepdifError(f"grid must be LO:HI:STEP, got {text!r}") from exc


def _build_parser() -> _Parser:
    parser = _Parser(prog="sepdif", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p_sim = sub.add_parser("simulate", parser_class=_Parser,
                           help="run a replication study or export one simulated dataset")
    p_sim.add_argument("--config", required=True, help="study config file (INI)")
    p_sim.add_argument("--out", help="rates table JSON path")
    p_sim.add_argument("--csv", help="rates table CSV path")
    p_sim.add_argument("--emit-data", metavar="DIR",
                       help="export one replication's CSVs instead of running the study")
    p_sim.add_argument("--condition", default="zero", choices=sorted(CONDITIONS),
                       help="condition for --emit-data")
    p_sim.add_argument("--rep", type=int, default=0, help="replication index for --emit-data")

    p_det = sub.add_parser("detect", parser_class=_Parser, help="detect separable DIF in one item")
    p_det.add_argument("data", help="dataset CSV (columns y, a, optional theta, covariates)")
    p_det.add_argument("--method", required=True, choices=("ss", "gs"))
    p_det.add_argument("--alpha", type=float, default=0.05)
    p_det.add_argument("--seed", type=int, default=0)
    p_det.add_argument("--anchors", help="anchor CSV; used to score ability when theta is absent")
    p_det.add_argument("--irt-model", choices=("2pl", "latent-regression"),
                       help="ability model for --anchors (default: by method)")
    p_det.add_argument("--out", help="report JSON path (default: stdout)")
    p_det.add_argument("--scores-csv", help="ss only: (theta, score) pairs CSV")
    p_det.add_argument("--curve-csv", help="gs only: per-grid curve CSV")
    p_det.add_argument("--num-trees", type=int, help="forest or BART tree count")
    p_det.add_argument("--grid", default="-3:3:0.5", help="gs ability grid LO:HI:STEP")
    p_det.add_argument("--draws", type=int, default=1000, help="gs kept posterior draws")
    p_det.add_argument("--burn-in", type=int, default=500)
    p_det.add_argument("--density", default="estimated", choices=("estimated", "known"))
    p_det.add_argument("--density-known", metavar="INT:COEFS:SIGMA",
                       help="known density, e.g. '-0.5:0.3,0.3:0.8'")

    p_score = sub.add_parser("score", parser_class=_Parser, help="EAP ability scores from anchors")
    p_score.add_argument("anchors", help="anchor response CSV (binary columns)")
    p_score.add_argument("--model", default="2pl", choices=("2pl", "latent-regression"))
    p_score.add_argument("--data", help="dataset CSV supplying group/covariates "
                                        "(required for latent-regression)")
    p_score.add_argument("--out", required=True, help="output CSV of per-person scores")
    p_score.add_argument("--fit-log", help="optional JSON path for the fit log")

    p_or = sub.add_parser("oracle", parser_class=_Parser,
                          help="print exact estimand values for a configured scenario")
    p_or.add_argument("--scenario", required=True, choices=("simple", "general"))
    p_or.add_argument("--condition", default="heterogeneous", choices=sorted(CONDITIONS))
    p_or.add_argument("--theta", default="-1,0,1", help="comma-separated ability values")
    return parser


def _cmd_simulate(args) -> int:
    cfg = StudyConfig.from_ini(args.config)
    if args.emit_data:
        import pathlib

        out = pathlib.Path(args.emit_data)
        out.mkdir(parents=True, exist_ok=True)
        ds, dgp, _ = build_replication_data(cfg, args.condition, args.rep)
        from .data import write_dataset_csv
        from .dgp import generate as _generate

        sim = _generate(dgp)
        write_dataset_csv(ds, out / "data.csv")
        pd.DataFrame(
            {f"item{j:02d}": sim.anchor_responses[:, j]
             for j in range(sim.anchor_responses.shape[1])}
        ).to_csv(out / "anchors.csv", index=False)
        print(f"wrote {out / 'data.csv'} and {out / 'anchors.csv'}")
        return 0
    table = run_simulation(cfg)
    text = table.to_json(args.out)
    if args.csv:
        table.to_csv(args.csv)
    if not args.out:
        print(text)
    else:
        print(f"wrote {args.out}")
    return 0


def _ability_from_anchors(args, ds):
    anchors = pd.read_csv(args.anchors).to_numpy()
    model_kind = args.irt_model or ("2pl" if args.method == "ss" else "latent-regression")
    if model_kind == "2pl":
        model = fit_2pl(anchors)
        theta = eap_scores(model, anchors)
    else:
        model = fit_latent_regression_2pl(anchors, ds.group, ds.covariates)
        theta = eap_scores(model, anchors, ds.group, ds.covariates)
    return ds.with_ability(theta)


def _cmd_detect(args) -> int:
    ds = read_dataset_csv(args.data)
    if not ds.has_ability:
        if not args.anchors:
            raise SepdifError("dataset has no theta column; supply --anchors to score it")
        ds = _ability_from_anchors(args, ds)

    if args.method == "ss":
        params = ForestParams(num_trees=args.num_trees or 2000, seed=args.seed)
        report = detect_ss(ds, params, args.alpha)
        if args.scores_csv:
            from .forest import doubly_robust_scores, fit_causal_forest

            xplus = np.column_stack([ds.covariates, np.asarray(ds.ability)])
            model = fit_causal_forest(ds.item_response.astype(float),
                                      ds.group.astype(float), xplus, params)
            scores = doubly_robust_scores(model, ds.item_response, ds.group)
            pd.DataFrame({"theta": np.asarray(ds.ability),
                          "score": scores.scores}).to_csv(args.scores_csv, index=False)
    else:
        params = BartParams(num_trees=args.num_trees or 200, draws=args.draws,
                            burn_in=args.burn_in, seed=args.seed)
        grid = _parse_grid(args.grid)
        if args.density == "known":
            if not args.density_known:
                raise SepdifError("--density known requires --density-known INT:COEFS:SIGMA")
            inter, coefs, sigma = args.density_known.split(":")
            dm = DensityModel(
                method="known_dgp",
                intercept_focal=float(inter),
                covariate_coefs=np.array([float(c) for c in coefs.split(",") if c]),
                sigma=float(sigma),
            )
        else:
            dm = DensityModel.estimate(ds)
        report = detect_gs(ds, grid, params, dm, args.alpha)
        if args.curve_csv:
            pd.DataFrame(report.statistics["curve"]).to_csv(args.curve_csv, index=False)

    text = report.to_json(args.out)
    if not args.out:
        print(text)
    else:
        print(f"wrote {args.out} (decision: {report.decision})")
    return 2 if report.rejected else 0


def _cmd_score(args) -> int:
    anchors = pd.read_csv(args.anchors)
    if anchors.isna().any().any():
        raise SepdifError(f"{args.anchors}: missing values are not supported")
    mat = anchors.to_numpy()
    if args.model == "latent-regression":
        if not args.data:
            raise SystemExit(USAGE_ERROR)  # usage error: regressors required
        ds = read_dataset_csv(args.data)
        model = fit_latent_regression_2pl(mat, ds.group, ds.covariates)
        theta = eap_scores(model, mat, ds.group, ds.covariates)
    else:
        model = fit_2pl(mat)
        theta = eap_scores(model, mat)
    pd.DataFrame({"person": np.arange(mat.shape[0]), "eap": theta}).to_csv(
        args.out, index=False
    )
    if args.fit_log:
        with open(args.fit_log, "w") as fh:
            json.dump(model.fit_log, fh, indent=2, default=float)
    print(f"wrote {args.out} ({mat.shape[0]} persons, "
          f"converged={model.fit_log.get('converged')})")
    return 0


def _cmd_oracle(args) -> int:
    delta, eta = CONDITIONS[args.condition]
    cfg = (simple_config if args.scenario == "simple" else general_config)(
        delta=delta, eta=eta
    )
    fn = true_tau_ss if args.scenario == "simple" else true_tau_gs
    thetas = [float(t) for t in args.theta.split(",") if t.strip()]
    print("theta,tau")
    for t in thetas:
        print(f"{t},{fn(cfg, t):.8f}")
    return 0


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    handlers = {
        "simulate": _cmd_simulate,
        "detect": _cmd_detect,
        "score": _cmd_score,
        "oracle": _cmd_oracle,
    }
    try:
        return handlers[args.command](args)
    except SystemExit:
        raise
    except SepdifError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return RUNTIME_ERROR
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return RUNTIME_ERROR


if __name__ == "__main__":
    sys.exit(main())
