"""Bootstrap refits and residual-correlation diagnostics.

The model-implied correlation of two scored manifest variables comes from
nested quadrature over the fitted conditional densities (three cases: same
variable, same factor, opposite factors through the copula). Residuals are
sample minus model-implied correlations; a pair is flagged when its
percentile bootstrap interval sits entirely beyond the threshold.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .estimation import FitConfig, FitResult, em_fit
from .exceptions import (
    ConfigurationError,
    DegenerateMVError,
    InsufficientEnsembleError,
    SplineFAError,
)
from .latent import eta_squared
from .likelihood import FACTOR_SPEED, FactorModel, ModelTables, PenaltyWeights
from .measurement import CONTINUOUS


@dataclass(frozen=True)
class ScoreFunction:
    """Per-variable scoring maps used by the moment diagnostics.

    ``tables`` maps an item name either to None (identity, used for
    continuous variables) or to a vector of per-category scores.
    """

    tables: dict

    def category_scores(self, item) -> np.ndarray | None:
        return self.tables.get(item.name)

    def apply(self, item, values) -> np.ndarray:
        values = np.asarray(values, dtype=float)
        table = self.tables.get(item.name)
        if table is None:
            return values
        return np.asarray(table, dtype=float)[values.astype(int)]


def default_scores(columns) -> ScoreFunction:
    """Identity for continuous and dichotomous variables; the collapsed
    testlet map (0, 1, 1, 2) for four-category testlet variables; raw
    category codes otherwise."""
    tables = {}
    for c in columns:
        if c.kind == CONTINUOUS:
            tables[c.name] = None
        elif getattr(c, "score", "identity") == "testlet":
            tables[c.name] = np.array([0.0, 1.0, 1.0, 2.0])
        else:
            tables[c.name] = np.arange(c.n_categories, dtype=float)
    return ScoreFunction(tables=tables)


def _expected_scores(model: FactorModel, tables: ModelTables, score: ScoreFunction):
    """Per-node conditional means and second moments of each scored item."""
    quad = model.quad
    means = []
    seconds = []
    for item in model.items:
        eta = item.alpha[:, None] + item.coef @ tables.phi_nodes.T
        if item.kind == CONTINUOUS:
            g = tables.psi_quad @ eta
            g -= g.max(axis=0)
            f = np.exp(g) * quad.weights[:, None]
            f /= f.sum(axis=0)
            s = score.apply(item, quad.nodes)
            means.append(f.T @ s)
            seconds.append(f.T @ (s * s))
        else:
            logits = np.vstack([np.zeros(eta.shape[1]), eta])
            logits -= logits.max(axis=0)
            p = np.exp(logits)
            p /= p.sum(axis=0)
            s = score.apply(item, np.arange(item.n_categories))
            means.append(p.T @ s)
            seconds.append(p.T @ (s * s))
    return means, seconds


def model_implied_moments(model: FactorModel, score: ScoreFunction, j: int, k: int):
    """First moments of items j and k and their cross (or second) moment.

    The cross moment integrates the two conditional means against the
    latent density: same item uses the conditional second moment, items on
    one factor share the latent value, items on opposite factors integrate
    against the copula.
    """
    tables = _moment_tables(model)
    means, seconds = _expected_scores(model, tables, score)
    w = model.quad.weights
    mu_j = float(w @ means[j])
    mu_k = float(w @ means[k])
    item_j, item_k = model.items[j], model.items[k]
    if j == k:
        mu_jk = float(w @ seconds[j])
    elif item_j.factor == item_k.factor:
        mu_jk = float(w @ (means[j] * means[k]))
    else:
        cgrid = tables.copula_grid()
        a, b = (means[j], means[k]) if item_j.factor == FACTOR_SPEED else (means[k], means[j])
        mu_jk = float((w * a) @ cgrid @ (w * b))
    return mu_j, mu_k, mu_jk


def _moment_tables(model: FactorModel):
    # an empty-data table set: only the node designs are needed
    return ModelTables(model, np.zeros((0, len(model.items))))


def model_implied_correlation(model: FactorModel, score: ScoreFunction, j: int, k: int) -> float:
    """Correlation of scored items j and k under the fitted model."""
    mu_j, mu_k, mu_jk = model_implied_moments(model, score, j, k)
    _, _, mu_jj = model_implied_moments(model, score, j, j)
    _, _, mu_kk = model_implied_moments(model, score, k, k)
    var_j = mu_jj - mu_j * mu_j
    var_k = mu_kk - mu_k * mu_k
    if var_j <= 0 or var_k <= 0:
        raise DegenerateMVError(
            f"zero model-implied variance for {model.items[j].name} or {model.items[k].name}"
        )
    return float((mu_jk - mu_j * mu_k) / np.sqrt(var_j * var_k))


def residual_correlations(model: FactorModel, values, score: ScoreFunction) -> np.ndarray:
    """Upper-triangular matrix of sample-minus-implied correlations.

    Entry [j, k] for j < k; everything else is NaN.
    """
    values = np.asarray(values, dtype=float)
    m = len(model.items)
    scored = np.column_stack(
        [score.apply(item, values[:, j]) for j, item in enumerate(model.items)]
    )
    sd = scored.std(axis=0)
    for j, item in enumerate(model.items):
        if sd[j] == 0:
            raise DegenerateMVError(f"{item.name}: constant column")
    sample = np.corrcoef(scored, rowvar=False)
    out = np.full((m, m), np.nan)
    for j in range(m):
        for k in range(j + 1, m):
            out[j, k] = sample[j, k] - model_implied_correlation(model, score, j, k)
    return out


@dataclass
class BootstrapEnsemble:
    """Resample-and-refit replicates at fixed penalty weights."""

    base: FitResult
    replicates: list
    indices: list
    seeds: list
    failures: list

    @property
    def n_success(self) -> int:
        return len(self.replicates)

    def models(self):
        return [fit.model for fit in self.replicates]


def resample_indices(n: int, seed) -> np.ndarray:
    """Row indices of one with-replacement resample of size n."""
    return np.random.default_rng(seed).integers(0, n, size=n)


def bootstrap_refit(
    data,
    weights: PenaltyWeights,
    n_replicates: int,
    config: FitConfig,
    base: FitResult = None,
    basis_size: int = 13,
    quadrature_size: int = 21,
    seed: int = 0,
    threads: int = 1,
) -> BootstrapEnsemble:
    """Refit the model on ``n_replicates`` row resamples.

    Penalty weights stay fixed at the full-data selection; each replicate
    starts from the full-data fit, which keeps refits short. Failures are
    recorded per replicate rather than aborting the ensemble.
    """
    if n_replicates < 1:
        raise ConfigurationError("need at least one bootstrap replicate")
    values = np.asarray(data.values, dtype=float)
    n = values.shape[0]
    if base is None:
        from .likelihood import build_model

        model0 = build_model(data.columns, basis_size, quadrature_size)
        base = em_fit(model0, values, weights, config)

    seeds = [s.generate_state(1)[0] for s in np.random.SeedSequence(seed).spawn(n_replicates)]
    all_indices = [resample_indices(n, s) for s in seeds]

    def one(idx):
        rows = all_indices[idx]
        try:
            return em_fit(base.model, values[rows], weights, config), None
        except SplineFAError as err:
            return None, f"replicate {idx}: {err}"

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(one, range(n_replicates)))
    else:
        results = [one(i) for i in range(n_replicates)]

    replicates, indices, failures = [], [], []
    for i, (fit, err) in enumerate(results):
        if fit is None:
            failures.append(err)
        else:
            replicates.append(fit)
            indices.append(all_indices[i])
    return BootstrapEnsemble(
        base=base, replicates=replicates, indices=indices, seeds=seeds, failures=failures
    )


def percentile_interval(draws, level: float = 0.90):
    """Order-statistic percentile interval at the given two-sided level."""
    draws = np.asarray(draws, dtype=float)
    lo = (1.0 - level) / 2.0
    return (
        float(np.quantile(draws, lo, method="inverted_cdf")),
        float(np.quantile(draws, 1.0 - lo, method="inverted_cdf")),
    )


@dataclass(frozen=True)
class PairFlag:
    """Residual-correlation summary for one variable pair."""

    name_j: str
    name_k: str
    estimate: float
    ci_lo: float
    ci_hi: float
    flagged: bool


def flag_residuals(
    ensemble: BootstrapEnsemble,
    data,
    score: ScoreFunction,
    threshold: float = 0.1,
    level: float = 0.90,
):
    """Flag pairs whose residual-correlation CI clears the threshold.

    Each replicate's residual matrix is computed on its own resample with
    its own refit model; the percentile interval across replicates is
    compared against (-threshold, threshold). Returns all pairs with their
    estimates, intervals and flags.
    """
    if ensemble.n_success == 0:
        raise InsufficientEnsembleError("no successful replicates to summarize")
    values = np.asarray(data.values, dtype=float)
    base_resid = residual_correlations(ensemble.base.model, values, score)
    stacks = [
        residual_correlations(fit.model, values[rows], score)
        for fit, rows in zip(ensemble.replicates, ensemble.indices)
    ]
    items = ensemble.base.model.items
    out = []
    m = len(items)
    for j in range(m):
        for k in range(j + 1, m):
            draws = np.array([s[j, k] for s in stacks])
            lo, hi = percentile_interval(draws, level)
            flagged = bool(lo > threshold or hi < -threshold)
            out.append(
                PairFlag(
                    name_j=items[j].name,
                    name_k=items[k].name,
                    estimate=float(base_resid[j, k]),
                    ci_lo=lo,
                    ci_hi=hi,
                    flagged=flagged,
                )
            )
    return out


def eta_squared_interval(ensemble: BootstrapEnsemble, level: float = 0.90):
    """Point estimate and percentile CI of the dependence summary."""
    if ensemble.n_success < 2:
        raise InsufficientEnsembleError("need at least 2 replicates for an interval")
    quad = ensemble.base.model.quad
    point = eta_squared(ensemble.base.model.copula, quad)
    draws = [eta_squared(m.copula, quad) for m in ensemble.models()]
    lo, hi = percentile_interval(draws, level)
    return point, lo, hi
