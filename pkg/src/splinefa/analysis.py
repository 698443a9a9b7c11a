"""End-to-end analysis: selection, fitting, diagnostics, and reporting.

The analysis loop alternates estimation with local-dependence checks:
select penalty weights by cross-validation, fit, bootstrap, flag residual
correlations, drop the response-time member of any flagged within-item
pair, and repeat until no pair is flagged or the round budget runs out.
The final report holds fitted densities on grids, the dependence summary
with its interval, the residual table, scores, and the precision
comparison, all written as fixed-format CSV for reproducible output.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, replace

import numpy as np
import yaml

from .data import Dataset, ItemSpec, preprocess, read_table, write_table
from .estimation import FitConfig, FitResult, em_fit
from .exceptions import ConfigurationError, SchemaError
from .inference import (
    BootstrapEnsemble,
    ScoreFunction,
    bootstrap_refit,
    default_scores,
    eta_squared_interval,
    flag_residuals,
)
from .latent import transformed_joint_density
from .likelihood import PenaltyWeights, build_model
from .measurement import CONTINUOUS, continuous_density, discrete_irf
from .scoring import precision_by_quantile, score_records
from .selection import SelectionResult, WeightGrid, make_cv_plan, select_weights
from .serialize import save_model

DENSITY_GRID = 41


@dataclass(frozen=True)
class AnalysisConfig:
    """Knobs for the full pipeline, with application-scale defaults."""

    basis_size: int = 13
    quadrature_size: int = 21
    n_folds: int = 5
    grid: WeightGrid = field(default_factory=WeightGrid)
    weights: PenaltyWeights | None = None
    n_replicates: int = 100
    threshold: float = 0.1
    level: float = 0.90
    max_rounds: int = 3
    groups: int = 5
    em_tolerance: float = 1e-3
    max_em_iterations: int = 500
    mstep_steps: int = 1
    reference_x: float = 0.5
    reference_y: float = 0.5
    trim: float = 0.01
    seed: int = 1
    threads: int = 1

    def __post_init__(self):
        if self.max_rounds < 1:
            raise ConfigurationError("max_rounds must be at least 1")
        if not 0.0 < self.threshold < 1.0:
            raise ConfigurationError("flagging threshold must be in (0, 1)")
        if not 0.0 < self.level < 1.0:
            raise ConfigurationError("interval level must be in (0, 1)")

    def fit_config(self) -> FitConfig:
        return FitConfig(
            em_tolerance=self.em_tolerance,
            max_em_iterations=self.max_em_iterations,
            mstep_steps=self.mstep_steps,
            x0=self.reference_x,
            y0=self.reference_y,
        )


@dataclass
class ConfigBundle:
    """Parsed configuration file: analysis knobs plus data/truth sources."""

    analysis: AnalysisConfig
    items: list | None = None
    raw_path: str | None = None
    processed_path: str | None = None
    columns_path: str | None = None
    simulate: dict | None = None


def _section(doc: dict, name: str) -> dict:
    sub = doc.get(name, {})
    if sub is None:
        sub = {}
    if not isinstance(sub, dict):
        raise ConfigurationError(f"config section {name!r} must be a mapping")
    return sub


def _get(sub: dict, key: str, default, cast):
    if key not in sub or sub[key] is None:
        return default
    try:
        return cast(sub[key])
    except (TypeError, ValueError) as err:
        raise ConfigurationError(f"bad config value for {key!r}: {err}") from None


def parse_config(doc: dict) -> ConfigBundle:
    """Turn a parsed YAML mapping into an AnalysisConfig bundle."""
    if not isinstance(doc, dict):
        raise ConfigurationError("config file must hold a mapping at top level")
    known = {"model", "fit", "selection", "bootstrap", "diagnostics", "scoring",
             "data", "simulate", "seed", "threads", "weights"}
    unknown = set(doc) - known
    if unknown:
        raise ConfigurationError(f"unknown config sections: {sorted(unknown)}")

    model = _section(doc, "model")
    fit = _section(doc, "fit")
    sel = _section(doc, "selection")
    boot = _section(doc, "bootstrap")
    diag = _section(doc, "diagnostics")
    scor = _section(doc, "scoring")

    grids = _section(sel, "grids")
    grid = WeightGrid(
        continuous=tuple(grids.get("continuous", WeightGrid().continuous)),
        discrete=tuple(grids.get("discrete", WeightGrid().discrete)),
        copula=tuple(grids.get("copula", WeightGrid().copula)),
    )
    weights = None
    if "weights" in doc and doc["weights"] is not None:
        w = _section(doc, "weights")
        missing = {"continuous", "discrete", "copula"} - set(w)
        if missing:
            raise ConfigurationError(f"weights section missing {sorted(missing)}")
        weights = PenaltyWeights(
            continuous=float(w["continuous"]),
            discrete=float(w["discrete"]),
            copula=float(w["copula"]),
        )

    data_sec = _section(doc, "data")
    analysis = AnalysisConfig(
        basis_size=_get(model, "basis_size", 13, int),
        quadrature_size=_get(model, "quadrature_size", 21, int),
        reference_x=_get(model, "reference_x", 0.5, float),
        reference_y=_get(model, "reference_y", 0.5, float),
        em_tolerance=_get(fit, "em_tolerance", 1e-3, float),
        max_em_iterations=_get(fit, "max_em_iterations", 500, int),
        mstep_steps=_get(fit, "mstep_steps", 1, int),
        n_folds=_get(sel, "n_folds", 5, int),
        grid=grid,
        weights=weights,
        n_replicates=_get(boot, "replicates", 100, int),
        threshold=_get(diag, "threshold", 0.1, float),
        level=_get(diag, "level", 0.90, float),
        max_rounds=_get(diag, "max_rounds", 3, int),
        groups=_get(scor, "groups", 5, int),
        trim=_get(data_sec, "trim", 0.01, float),
        seed=_get(doc, "seed", 1, int),
        threads=_get(doc, "threads", 1, int),
    )

    items = None
    if "items" in data_sec:
        items = []
        for entry in data_sec["items"]:
            if not isinstance(entry, dict) or "name" not in entry:
                raise ConfigurationError("each data item needs at least a name")
            items.append(
                ItemSpec(
                    name=str(entry["name"]),
                    responses=tuple(entry.get("responses", ())),
                    times=tuple(entry.get("times", ())),
                    monotone=bool(entry.get("monotone", False)),
                )
            )
    return ConfigBundle(
        analysis=analysis,
        items=items,
        raw_path=data_sec.get("raw"),
        processed_path=data_sec.get("processed"),
        columns_path=data_sec.get("columns"),
        simulate=doc.get("simulate"),
    )


def load_config(path) -> ConfigBundle:
    try:
        with open(path) as fh:
            doc = yaml.safe_load(fh)
    except OSError as err:
        raise ConfigurationError(f"cannot read config {path}: {err}") from None
    except yaml.YAMLError as err:
        raise ConfigurationError(f"cannot parse config {path}: {err}") from None
    return parse_config(doc if doc is not None else {})


def load_dataset(bundle: ConfigBundle) -> Dataset:
    """Materialize the configured dataset (processed file or raw + spec)."""
    from .serialize import load_columns

    if bundle.processed_path is not None:
        if bundle.columns_path is None:
            raise ConfigurationError("processed data needs a columns file")
        table = read_table(bundle.processed_path)
        columns = load_columns(bundle.columns_path)
        names = [c.name for c in columns]
        missing = set(names) - set(table)
        if missing:
            raise SchemaError(f"processed data missing columns {sorted(missing)}")
        data = Dataset(np.column_stack([table[n] for n in names]), columns)
        data.validate()
        return data
    if bundle.raw_path is not None:
        if not bundle.items:
            raise ConfigurationError("raw data needs an item spec")
        return preprocess(read_table(bundle.raw_path), bundle.items, bundle.analysis.trim)
    raise ConfigurationError("config names no data source")


@dataclass
class RoundRecord:
    """Everything produced by one pass of the analysis loop."""

    number: int
    n_records: int
    names: list
    selection: SelectionResult | None
    weights: PenaltyWeights
    fit: FitResult
    ensemble: BootstrapEnsemble
    flags: list
    dropped: list


@dataclass
class AnalysisReport:
    rounds: list
    data: Dataset
    clean: bool
    eta: tuple
    scores: list
    precision_groups: list

    @property
    def final(self) -> RoundRecord:
        return self.rounds[-1]


def _within_item_drops(data: Dataset, flags) -> list:
    """Continuous members of flagged within-item pairs, in column order."""
    drops = []
    for f in flags:
        if not f.flagged:
            continue
        cj = data.column(f.name_j)
        ck = data.column(f.name_k)
        if cj.partner == ck.name or ck.partner == cj.name:
            for c in (cj, ck):
                if c.kind == CONTINUOUS:
                    drops.append(c.name)
    seen = []
    for name in data.names:
        if name in drops and name not in seen:
            seen.append(name)
    return seen


def run_analysis(data: Dataset, config: AnalysisConfig, log=None) -> AnalysisReport:
    """Run the selection/fit/bootstrap/flag loop to a clean battery.

    Stops early when no pair is flagged, or when flags remain but none is
    a removable within-item pair; in the latter case the report carries
    the partial results with ``clean`` False.
    """
    data.validate()
    fitcfg = config.fit_config()
    lines = log if log is not None else []
    rounds = []
    clean = False

    for round_no in range(1, config.max_rounds + 1):
        lines.append(f"round {round_no}: n={data.n}, m={len(data.columns)}")
        plan = make_cv_plan(data.n, config.n_folds, config.seed)
        if config.weights is not None:
            selection, weights = None, config.weights
        else:
            selection = select_weights(
                data, config.grid, plan, fitcfg,
                config.basis_size, config.quadrature_size,
            )
            weights = selection.weights
        lines.append(
            "  weights: continuous=%g discrete=%g copula=%g"
            % (weights.continuous, weights.discrete, weights.copula)
        )
        model = build_model(data.columns, config.basis_size, config.quadrature_size)
        fit = em_fit(model, data.values, weights, fitcfg)
        lines.append(
            "  fit: %d iterations, objective %.6f, converged=%s"
            % (fit.n_iterations, fit.trace[-1], fit.converged)
        )
        ensemble = bootstrap_refit(
            data, weights, config.n_replicates, fitcfg,
            base=fit, seed=config.seed + round_no,
            basis_size=config.basis_size, quadrature_size=config.quadrature_size,
            threads=config.threads,
        )
        if ensemble.failures:
            lines.append("  bootstrap: %d of %d replicates failed"
                         % (len(ensemble.failures), config.n_replicates))
        score = default_scores(data.columns)
        flags = flag_residuals(ensemble, data, score, config.threshold, config.level)
        flagged = [f for f in flags if f.flagged]
        for f in flagged:
            lines.append(
                "  flag: %s/%s estimate %.4f interval [%.4f, %.4f]"
                % (f.name_j, f.name_k, f.estimate, f.ci_lo, f.ci_hi)
            )
        drops = _within_item_drops(data, flagged)
        rounds.append(
            RoundRecord(
                number=round_no, n_records=data.n, names=data.names,
                selection=selection, weights=weights, fit=fit,
                ensemble=ensemble, flags=flags, dropped=drops,
            )
        )
        if not flagged:
            clean = True
            lines.append("  no flags; battery is clean")
            break
        if not drops:
            lines.append("  flags remain but no within-item pair is removable; stopping")
            break
        if round_no == config.max_rounds:
            lines.append("  flags remain but the round budget is exhausted; stopping")
            break
        reduced = data.drop(drops)
        if not reduced.select_kind(CONTINUOUS).columns:
            lines.append(
                "  dropping " + ", ".join(drops)
                + " would exhaust the continuous block; stopping"
            )
            break
        lines.append("  dropping: " + ", ".join(drops))
        data = reduced

    last = rounds[-1]
    eta = eta_squared_interval(last.ensemble, config.level)
    lines.append("eta-squared %.4f interval [%.4f, %.4f]" % eta)
    scores = score_records(last.fit.model, data.values, last.ensemble)
    groups = precision_by_quantile(scores, config.groups)
    return AnalysisReport(
        rounds=rounds, data=data, clean=clean, eta=eta,
        scores=scores, precision_groups=groups,
    )


def _density_tables(model):
    """Fitted conditional densities and the latent density on fixed grids."""
    x_grid = np.linspace(0.025, 0.975, DENSITY_GRID)
    y_grid = np.linspace(0.0, 1.0, DENSITY_GRID)
    cont_rows = []
    disc_rows = []
    for item in model.items:
        if item.kind == CONTINUOUS:
            for x in x_grid:
                dens = continuous_density(item, x, model.quad)(y_grid)
                for y, d in zip(y_grid, dens):
                    cont_rows.append((item.name, x, y, d))
        else:
            for x in x_grid:
                p = discrete_irf(item, x)
                for a, pa in enumerate(p):
                    disc_rows.append((item.name, x, a, pa))
    z_grid = np.linspace(-2.5, 2.5, DENSITY_GRID)
    zz1, zz2 = np.meshgrid(z_grid, z_grid, indexing="ij")
    dens = transformed_joint_density(model.copula, zz1.ravel(), zz2.ravel())
    latent_rows = [
        (z1, z2, d) for z1, z2, d in zip(zz1.ravel(), zz2.ravel(), dens)
    ]
    return cont_rows, disc_rows, latent_rows


def write_report(report: AnalysisReport, out_dir, log_lines=None) -> list:
    """Write all report artifacts; returns the list of files written."""
    os.makedirs(out_dir, exist_ok=True)
    written = []

    def path(name):
        written.append(name)
        return os.path.join(out_dir, name)

    sel_rows = []
    for rnd in report.rounds:
        if rnd.selection is None:
            continue
        for stage in rnd.selection.stages:
            for w, r, s in zip(stage.weights, stage.risks, stage.ses):
                sel_rows.append(
                    (rnd.number, stage.name, w, r, s, int(w == stage.selected))
                )
    if sel_rows:
        write_table(path("selection.csv"),
                    ["round", "stage", "weight", "risk", "se", "selected"], sel_rows)

    trace_rows = []
    for rnd in report.rounds:
        for i, v in enumerate(rnd.fit.trace):
            trace_rows.append((rnd.number, i, v))
    write_table(path("em_trace.csv"), ["round", "iteration", "objective"], trace_rows)

    summary_rows = [
        (
            rnd.number, rnd.n_records, len(rnd.names),
            rnd.weights.continuous, rnd.weights.discrete, rnd.weights.copula,
            rnd.fit.n_iterations, int(rnd.fit.converged),
            sum(1 for f in rnd.flags if f.flagged),
            ";".join(rnd.dropped),
        )
        for rnd in report.rounds
    ]
    write_table(
        path("summary.csv"),
        ["round", "n_records", "n_columns", "weight_continuous", "weight_discrete",
         "weight_copula", "em_iterations", "converged", "n_flagged", "dropped"],
        summary_rows,
    )

    write_table(
        path("residuals.csv"),
        ["name_j", "name_k", "estimate", "ci_lo", "ci_hi", "flagged"],
        [(f.name_j, f.name_k, f.estimate, f.ci_lo, f.ci_hi, f.flagged)
         for f in report.final.flags],
    )

    est, lo, hi = report.eta
    write_table(path("eta_squared.csv"), ["estimate", "ci_lo", "ci_hi"], [(est, lo, hi)])

    write_table(
        path("scores.csv"),
        ["record", "eap_slowness", "eap_ability", "sd_slowness", "sd_ability",
         "precision_joint", "precision_marginal"],
        [
            (i, s.eap_slowness, s.eap_ability, s.sd_slowness, s.sd_ability,
             s.precision_joint, s.precision_marginal)
            for i, s in enumerate(report.scores)
        ],
    )

    group_names = list(report.precision_groups[0]) if report.precision_groups else []
    write_table(
        path("precision_by_group.csv"), group_names,
        [tuple(row[k] for k in group_names) for row in report.precision_groups],
    )

    model = report.final.fit.model
    cont_rows, disc_rows, latent_rows = _density_tables(model)
    if cont_rows:
        write_table(path("density_continuous.csv"),
                    ["item", "x", "y", "density"], cont_rows)
    if disc_rows:
        write_table(path("density_discrete.csv"),
                    ["item", "x", "category", "probability"], disc_rows)
    write_table(path("latent_density.csv"),
                ["slowness", "ability", "density"], latent_rows)

    save_model(path("model.yaml"), model, report.data.columns)

    if log_lines is not None:
        with open(path("run.log"), "w") as fh:
            fh.write("\n".join(log_lines) + "\n")
    return written
