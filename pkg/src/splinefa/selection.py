"""Cross-validated penalty-weight selection.

Risk is the negative mean held-out log-likelihood per record, averaged over
folds; its spread across folds gives the standard error for the one-SE
rule (pick the smoothest weight whose risk stays within one SE of the
minimum). Selection runs in three stages so the grids stay one-dimensional:
first the continuous-item weight on a single-factor model, then the
discrete-item weight, then the copula weight on the full model.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .estimation import FitConfig, em_fit
from .exceptions import ConfigurationError, SplineFAError
from .likelihood import PenaltyWeights, build_model, per_record_loglik
from .measurement import CONTINUOUS, DISCRETE

DEFAULT_GRID_CONTINUOUS = (1e-1, 1e-2, 1e-3, 1e-4, 1e-5, 1e-6)
DEFAULT_GRID_DISCRETE = (1e1, 1e0, 1e-1, 1e-2, 1e-3, 1e-4)
DEFAULT_GRID_COPULA = (1e-2, 1e-4, 1e-6, 1e-8)


@dataclass(frozen=True)
class WeightGrid:
    """Descending candidate weights for the three penalty groups."""

    continuous: tuple = DEFAULT_GRID_CONTINUOUS
    discrete: tuple = DEFAULT_GRID_DISCRETE
    copula: tuple = DEFAULT_GRID_COPULA

    def __post_init__(self):
        for name in ("continuous", "discrete", "copula"):
            g = tuple(float(v) for v in getattr(self, name))
            object.__setattr__(self, name, g)
            if not g:
                raise ConfigurationError(f"empty {name} weight grid")
            if any(v <= 0 for v in g) or any(a >= b for a, b in zip(g[1:], g)):
                raise ConfigurationError(
                    f"{name} weight grid must be strictly positive and decreasing"
                )


@dataclass(frozen=True)
class CvPlan:
    """Disjoint validation folds covering all record indices."""

    n_folds: int
    folds: tuple
    seed: int

    def __post_init__(self):
        if self.n_folds < 2:
            raise ConfigurationError("cross-validation needs at least 2 folds")


def make_cv_plan(n: int, n_folds: int = 5, seed: int = 0) -> CvPlan:
    """Seeded shuffle followed by round-robin assignment (sizes differ by <= 1)."""
    if n_folds < 2 or n_folds > n:
        raise ConfigurationError(f"fold count must be in [2, {n}], got {n_folds}")
    perm = np.random.default_rng(seed).permutation(n)
    folds = tuple(np.sort(perm[s::n_folds]) for s in range(n_folds))
    return CvPlan(n_folds=n_folds, folds=folds, seed=seed)


def cv_risk(data, weights: PenaltyWeights, plan: CvPlan, config: FitConfig,
            basis_size: int = 13, quadrature_size: int = 21, update_copula: bool = True):
    """Cross-validated risk and its standard error.

    ``data`` provides ``values`` and ``columns`` (see the Dataset type).
    Each fold is held out once; the model refits from a blank start on the
    complement and the held-out records are scored with the unpenalized
    log-likelihood. Returns (risk, se, fold_losses).
    """
    values = np.asarray(data.values, dtype=float)
    n = values.shape[0]
    losses = []
    for s, fold in enumerate(plan.folds):
        mask = np.ones(n, dtype=bool)
        mask[fold] = False
        model = build_model(data.columns, basis_size, quadrature_size)
        cfg = replace(config, update_copula=update_copula and config.update_copula)
        try:
            fit = em_fit(model, values[mask], weights, cfg)
        except SplineFAError as err:
            raise type(err)(f"fold {s}: {err}") from err
        held = per_record_loglik(fit.model, values[fold])
        losses.append(-float(np.mean(held)))
    losses = np.asarray(losses)
    risk = float(np.mean(losses))
    se = float(np.sqrt(np.sum((losses - risk) ** 2) / (len(losses) - 1)))
    return risk, se, losses


def one_se_select(candidates):
    """Pick the largest weight whose risk is within one SE of the minimum.

    ``candidates`` is a nonempty list of (weight, risk, se) with weights in
    descending order. With all SEs zero this returns the risk minimizer.
    """
    if not candidates:
        raise ConfigurationError("no candidates to select from")
    weights = [c[0] for c in candidates]
    if any(a >= b for a, b in zip(weights[1:], weights)):
        raise ConfigurationError("candidate weights must be strictly decreasing")
    risks = np.asarray([c[1] for c in candidates], dtype=float)
    best = int(np.argmin(risks))
    cutoff = risks[best] + float(candidates[best][2])
    for w, r, _ in candidates:
        if r <= cutoff:
            return w
    return candidates[best][0]


@dataclass
class StageTable:
    """Per-candidate CV results for one selection stage."""

    name: str
    weights: tuple
    risks: tuple
    ses: tuple
    selected: float


@dataclass
class SelectionResult:
    weights: PenaltyWeights
    stages: list
    n_fits: int


def select_weights(
    data,
    grid: WeightGrid,
    plan: CvPlan,
    config: FitConfig,
    basis_size: int = 13,
    quadrature_size: int = 21,
) -> SelectionResult:
    """Three-stage penalty-weight selection.

    Stage 1 cross-validates the continuous weight on the continuous block
    alone (single factor, flat latent prior); stage 2 does the same for the
    discrete block; stage 3 fixes both and cross-validates the copula
    weight on the full two-factor model.
    """
    cont = data.select_kind(CONTINUOUS)
    disc = data.select_kind(DISCRETE)
    if not cont.columns or not disc.columns:
        raise ConfigurationError("weight selection needs both a continuous and a discrete block")

    stages = []
    n_fits = 0

    def run_stage(name, sub, candidates, make_weights, update_copula):
        nonlocal n_fits
        rows = []
        for w in candidates:
            risk, se, _ = cv_risk(
                sub,
                make_weights(w),
                plan,
                config,
                basis_size,
                quadrature_size,
                update_copula=update_copula,
            )
            n_fits += plan.n_folds
            rows.append((w, risk, se))
        chosen = one_se_select(rows)
        stages.append(
            StageTable(
                name=name,
                weights=tuple(r[0] for r in rows),
                risks=tuple(r[1] for r in rows),
                ses=tuple(r[2] for r in rows),
                selected=chosen,
            )
        )
        return chosen

    # the off-stage groups get a placeholder weight of 1: single-block
    # models have no items of the other kind, and the frozen independence
    # copula has zero roughness, so the placeholder multiplies nothing
    lam_c = run_stage(
        "continuous", cont, grid.continuous,
        lambda w: PenaltyWeights(continuous=w, discrete=1.0, copula=1.0),
        update_copula=False,
    )
    lam_d = run_stage(
        "discrete", disc, grid.discrete,
        lambda w: PenaltyWeights(continuous=1.0, discrete=w, copula=1.0),
        update_copula=False,
    )
    lam_g = run_stage(
        "copula", data, grid.copula,
        lambda w: PenaltyWeights(continuous=lam_c, discrete=lam_d, copula=w),
        update_copula=True,
    )
    return SelectionResult(
        weights=PenaltyWeights(continuous=lam_c, discrete=lam_d, copula=lam_g),
        stages=stages,
        n_fits=n_fits,
    )
