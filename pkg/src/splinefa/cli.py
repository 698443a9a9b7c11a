"""Command line entry points.

Every subcommand reads one YAML configuration file and writes its results
under --out-dir. Exit codes: 0 on success, 2 for configuration problems,
3 for data or schema problems, 4 for numerical failures.
"""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import replace

import numpy as np

from .analysis import (
    ConfigBundle,
    load_config,
    load_dataset,
    run_analysis,
    write_report,
)
from .data import write_table
from .exceptions import (
    ConfigurationError,
    DataError,
    InsufficientEnsembleError,
    NumericalError,
    SplineFAError,
)
from .inference import bootstrap_refit, default_scores, eta_squared_interval, flag_residuals
from .likelihood import build_model
from .estimation import em_fit
from .scoring import precision_by_quantile, score_records
from .selection import make_cv_plan, select_weights
from .serialize import save_columns, save_model
from .simulate import GaussianCopulaTruth, MixtureCopulaTruth, ShockTruth, default_truth, simulate


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="splinefa",
        description="Semiparametric factor analysis of response/response-time batteries.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    commands = {
        "preprocess": "Build a model-ready dataset from raw columns.",
        "select-weights": "Cross-validate the three penalty weights.",
        "fit": "Fit the factor model at fixed or selected weights.",
        "bootstrap": "Bootstrap the fitted model and summarize dependence.",
        "diagnose": "Bootstrap residual-correlation flags.",
        "score": "EAP scores with predictive precision.",
        "simulate": "Draw a synthetic dataset from a configured truth.",
        "run": "Full analysis loop with flag-and-drop rounds.",
    }
    for name, help_text in commands.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True, help="YAML configuration file")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--threads", type=int, default=None,
                       help="override the config thread count")
        p.add_argument("--out-dir", default="out", help="directory for output files")
    return parser


def _bundle(args) -> ConfigBundle:
    bundle = load_config(args.config)
    cfg = bundle.analysis
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if args.threads is not None:
        if args.threads < 1:
            raise ConfigurationError("--threads must be positive")
        cfg = replace(cfg, threads=args.threads)
    bundle.analysis = cfg
    return bundle


def _outpath(args, name: str) -> str:
    os.makedirs(args.out_dir, exist_ok=True)
    return os.path.join(args.out_dir, name)


def _write_dataset(args, data, prefix="data"):
    write_table(
        _outpath(args, f"{prefix}.csv"),
        data.names,
        [tuple(row) for row in data.values],
    )
    save_columns(_outpath(args, "columns.yaml"), data.columns)


def cmd_preprocess(args) -> int:
    bundle = _bundle(args)
    data = load_dataset(bundle)
    _write_dataset(args, data)
    print(f"retained {data.n} records over {len(data.columns)} variables")
    return 0


def _selection_rows(selection):
    rows = []
    for stage in selection.stages:
        for w, r, s in zip(stage.weights, stage.risks, stage.ses):
            rows.append((stage.name, w, r, s, int(w == stage.selected)))
    return rows


def cmd_select_weights(args) -> int:
    bundle = _bundle(args)
    cfg = bundle.analysis
    data = load_dataset(bundle)
    plan = make_cv_plan(data.n, cfg.n_folds, cfg.seed)
    selection = select_weights(
        data, cfg.grid, plan, cfg.fit_config(), cfg.basis_size, cfg.quadrature_size
    )
    write_table(
        _outpath(args, "selection.csv"),
        ["stage", "weight", "risk", "se", "selected"],
        _selection_rows(selection),
    )
    w = selection.weights
    with open(_outpath(args, "weights.yaml"), "w") as fh:
        fh.write(
            "weights:\n  continuous: %r\n  discrete: %r\n  copula: %r\n"
            % (w.continuous, w.discrete, w.copula)
        )
    print(
        "selected weights: continuous=%g discrete=%g copula=%g (%d fits)"
        % (w.continuous, w.discrete, w.copula, selection.n_fits)
    )
    return 0


def _fit_once(args, bundle: ConfigBundle):
    """Shared select-if-needed-then-fit path for fit-like subcommands."""
    cfg = bundle.analysis
    data = load_dataset(bundle)
    weights = cfg.weights
    selection = None
    if weights is None:
        plan = make_cv_plan(data.n, cfg.n_folds, cfg.seed)
        selection = select_weights(
            data, cfg.grid, plan, cfg.fit_config(), cfg.basis_size, cfg.quadrature_size
        )
        weights = selection.weights
        write_table(
            _outpath(args, "selection.csv"),
            ["stage", "weight", "risk", "se", "selected"],
            _selection_rows(selection),
        )
    model = build_model(data.columns, cfg.basis_size, cfg.quadrature_size)
    fit = em_fit(model, data.values, weights, cfg.fit_config())
    return data, weights, fit


def _write_fit(args, data, fit):
    save_model(_outpath(args, "model.yaml"), fit.model, data.columns)
    write_table(
        _outpath(args, "em_trace.csv"),
        ["iteration", "objective"],
        list(enumerate(fit.trace)),
    )


def cmd_fit(args) -> int:
    bundle = _bundle(args)
    data, weights, fit = _fit_once(args, bundle)
    _write_fit(args, data, fit)
    print(
        "fit finished: %d iterations, objective %.6f, converged=%s"
        % (fit.n_iterations, fit.trace[-1], fit.converged)
    )
    return 0


def _bootstrap_once(args, bundle: ConfigBundle):
    cfg = bundle.analysis
    data, weights, fit = _fit_once(args, bundle)
    ensemble = bootstrap_refit(
        data, weights, cfg.n_replicates, cfg.fit_config(),
        base=fit, seed=cfg.seed,
        basis_size=cfg.basis_size, quadrature_size=cfg.quadrature_size,
        threads=cfg.threads,
    )
    return data, fit, ensemble


def cmd_bootstrap(args) -> int:
    bundle = _bundle(args)
    data, fit, ensemble = _bootstrap_once(args, bundle)
    _write_fit(args, data, fit)
    est, lo, hi = eta_squared_interval(ensemble, bundle.analysis.level)
    write_table(
        _outpath(args, "eta_squared.csv"),
        ["estimate", "ci_lo", "ci_hi"],
        [(est, lo, hi)],
    )
    print(
        "bootstrap finished: %d of %d replicates succeeded, eta-squared %.4f [%.4f, %.4f]"
        % (ensemble.n_success, bundle.analysis.n_replicates, est, lo, hi)
    )
    return 0


def cmd_diagnose(args) -> int:
    bundle = _bundle(args)
    cfg = bundle.analysis
    data, fit, ensemble = _bootstrap_once(args, bundle)
    flags = flag_residuals(
        ensemble, data, default_scores(data.columns), cfg.threshold, cfg.level
    )
    write_table(
        _outpath(args, "residuals.csv"),
        ["name_j", "name_k", "estimate", "ci_lo", "ci_hi", "flagged"],
        [(f.name_j, f.name_k, f.estimate, f.ci_lo, f.ci_hi, f.flagged) for f in flags],
    )
    n_flagged = sum(1 for f in flags if f.flagged)
    print(f"diagnostics finished: {n_flagged} of {len(flags)} pairs flagged")
    return 0


def cmd_score(args) -> int:
    bundle = _bundle(args)
    cfg = bundle.analysis
    data, fit, ensemble = _bootstrap_once(args, bundle)
    scores = score_records(fit.model, data.values, ensemble)
    write_table(
        _outpath(args, "scores.csv"),
        ["record", "eap_slowness", "eap_ability", "sd_slowness", "sd_ability",
         "precision_joint", "precision_marginal"],
        [
            (i, s.eap_slowness, s.eap_ability, s.sd_slowness, s.sd_ability,
             s.precision_joint, s.precision_marginal)
            for i, s in enumerate(scores)
        ],
    )
    groups = precision_by_quantile(scores, cfg.groups)
    names = list(groups[0])
    write_table(
        _outpath(args, "precision_by_group.csv"),
        names,
        [tuple(row[k] for k in names) for row in groups],
    )
    print(f"scored {len(scores)} records into {len(groups)} groups")
    return 0


def _truth_from_config(sim: dict):
    if not isinstance(sim, dict) or "n" not in sim:
        raise ConfigurationError("simulate config needs at least a sample size n")
    kind = str(sim.get("copula", "gaussian"))
    if kind == "gaussian":
        copula = GaussianCopulaTruth(rho=float(sim.get("rho", 0.5)))
    elif kind == "mixture":
        copula = MixtureCopulaTruth(
            separation=float(sim.get("separation", 1.0)),
            rho=float(sim.get("rho", 0.6)),
            weight=float(sim.get("weight", 0.5)),
        )
    else:
        raise ConfigurationError(f"unknown simulate copula {kind!r}")
    shock = None
    if sim.get("shock"):
        s = sim["shock"]
        shock = ShockTruth(
            item=str(s["item"]),
            sd=float(s.get("sd", 1.0)),
            on_time=float(s.get("on_time", 0.3)),
            on_response=float(s.get("on_response", 1.5)),
        )
    truth = default_truth(
        n_pairs=int(sim.get("n_pairs", 3)), copula=copula, shock=shock
    )
    return truth, int(sim["n"])


def cmd_simulate(args) -> int:
    bundle = _bundle(args)
    if bundle.simulate is None:
        raise ConfigurationError("config has no simulate section")
    truth, n = _truth_from_config(bundle.simulate)
    data, draws = simulate(truth, n, bundle.analysis.seed)
    _write_dataset(args, data)
    latent_rows = list(zip(draws.slowness_star, draws.ability_star))
    write_table(
        _outpath(args, "latents.csv"), ["slowness_star", "ability_star"], latent_rows
    )
    print(f"simulated {data.n} records over {len(data.columns)} variables")
    return 0


def cmd_run(args) -> int:
    bundle = _bundle(args)
    data = load_dataset(bundle)
    log_lines = []
    report = run_analysis(data, bundle.analysis, log=log_lines)
    write_report(report, args.out_dir, log_lines)
    status = "clean" if report.clean else "flags remained"
    print(
        "analysis finished after %d round(s): %s; eta-squared %.4f [%.4f, %.4f]"
        % (len(report.rounds), status, *report.eta)
    )
    return 0


HANDLERS = {
    "preprocess": cmd_preprocess,
    "select-weights": cmd_select_weights,
    "fit": cmd_fit,
    "bootstrap": cmd_bootstrap,
    "diagnose": cmd_diagnose,
    "score": cmd_score,
    "simulate": cmd_simulate,
    "run": cmd_run,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return HANDLERS[args.command](args)
    except ConfigurationError as err:
        print(f"configuration error: {err}", file=sys.stderr)
        return 2
    except DataError as err:
        print(f"data error: {err}", file=sys.stderr)
        return 3
    except OSError as err:
        print(f"io error: {err}", file=sys.stderr)
        return 3
    except (NumericalError, InsufficientEnsembleError) as err:
        print(f"numerical failure: {err}", file=sys.stderr)
        return 4
    except SplineFAError as err:
        print(f"error: {err}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
