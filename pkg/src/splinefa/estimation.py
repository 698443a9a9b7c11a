"""Penalized marginal maximum likelihood by EM with constrained subproblems.

The E step reuses the likelihood grid, so the fitted criterion is EM-exact:
every accepted update cannot decrease the quadrature-approximated penalized
objective, and the trace is monotone up to roundoff.

Each M-step subproblem (one item, or the copula) is a concave program with
linear equality and inequality constraints. Equalities are eliminated once
per fit through an orthonormal null-space basis; each improvement step then
solves a small inequality-constrained quadratic model with an active-set
solver (warm started across iterations) and backtracks along the feasible
direction.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .exceptions import ConfigurationError, MonotonicityViolationError
from .latent import CopulaModel, copula_constraints, copula_penalty_matrix
from .likelihood import (
    FACTOR_SPEED,
    FactorModel,
    ModelTables,
    PenaltyWeights,
    copula_qgrad_hess,
    copula_qvalue,
    estep,
    item_estep_stats,
    item_qgrad_hess,
    item_qvalue,
    penalty_value,
)
from .measurement import (
    CONTINUOUS,
    ConstraintSet,
    ItemModel,
    equality_constraints,
    penalty_matrix,
)
from .numerics import QuadratureRule
from .qp import solve_qp

TRACE_SLACK = 1e-8
ARMIJO = 1e-4
MAX_BACKTRACKS = 45


@dataclass
class FitConfig:
    """Settings for one EM fit."""

    em_tolerance: float = 1e-3
    max_em_iterations: int = 500
    qp_tolerance: float = 1e-8
    mstep_steps: int = 1
    update_copula: bool = True
    x0: float = 0.5
    y0: float = 0.5
    seed: int | None = None

    def __post_init__(self):
        if self.em_tolerance <= 0 or self.qp_tolerance <= 0:
            raise ConfigurationError("tolerances must be positive")
        if self.max_em_iterations < 1 or self.mstep_steps < 1:
            raise ConfigurationError("iteration counts must be positive")
        if not (0.0 <= self.x0 <= 1.0 and 0.0 <= self.y0 <= 1.0):
            raise ConfigurationError("reference levels must lie in [0, 1]")


@dataclass
class FitResult:
    """Fitted model plus the objective trace.

    ``trace[0]`` is the objective at the initial coefficients and each later
    entry follows one EM iteration; ``converged`` means the final increment
    fell below the tolerance.
    """

    model: FactorModel
    trace: np.ndarray
    converged: bool
    n_iterations: int
    weights: PenaltyWeights
    config: FitConfig = field(repr=False, default=None)


class _Subproblem:
    """Cached constraint geometry for one coefficient block."""

    def __init__(self, Z, G, pen):
        self.Z = Z
        self.G = G
        self.GZ = G @ Z if G.shape[0] else np.zeros((0, Z.shape[1]))
        self.pen = pen
        self.active = ()


def _item_subproblem(item: ItemModel, x0: float, y0: float) -> _Subproblem:
    cons = equality_constraints(item, x0, y0)
    return _Subproblem(cons.nullspace(), cons.G, penalty_matrix(item))


def _copula_subproblem(copula: CopulaModel) -> _Subproblem:
    cons = copula_constraints(copula.basis)
    return _Subproblem(cons.nullspace(), cons.G, copula_penalty_matrix(copula.basis))


def _constrained_newton(theta, value_fn, grad_hess_fn, prob, pen_scale, max_steps, qp_tol):
    """Feasible ascent on a concave objective with linear constraints.

    ``value_fn``/``grad_hess_fn`` give the data part (to maximize);
    ``pen_scale * prob.pen`` is subtracted as a quadratic penalty. Returns
    the new point, the scaled KKT residual (norm of the last candidate
    step), and whether the line search stalled.
    """
    pen_h = pen_scale * prob.pen

    def objective(th):
        return -value_fn(th) + 0.5 * float(th @ (pen_h @ th))

    kkt = np.inf
    stalled = False
    moved = False
    for _ in range(max_steps):
        qgrad, qneg = grad_hess_fn(theta)
        g_full = -qgrad + pen_h @ theta
        h_full = qneg + pen_h
        gr = prob.Z.T @ g_full
        hr = prob.Z.T @ h_full @ prob.Z
        hr = 0.5 * (hr + hr.T)
        if prob.GZ.shape[0]:
            res = solve_qp(hr, gr, prob.GZ, -(prob.G @ theta), active=prob.active)
            p = res.x
            prob.active = res.active
        else:
            try:
                p = np.linalg.solve(hr, -gr)
            except np.linalg.LinAlgError:
                p = np.linalg.lstsq(hr, -gr, rcond=None)[0]
        kkt = float(np.linalg.norm(p, np.inf))
        if kkt <= qp_tol * (1.0 + float(np.linalg.norm(theta, np.inf))):
            break
        descent = float(gr @ p)
        if descent >= 0.0:
            break
        d = prob.Z @ p
        f0 = objective(theta)
        alpha = 1.0
        accepted = False
        for _ in range(MAX_BACKTRACKS):
            trial = theta + alpha * d
            if objective(trial) <= f0 + ARMIJO * alpha * descent:
                accepted = True
                break
            alpha *= 0.5
        if not accepted:
            stalled = True
            break
        theta = theta + alpha * d
        moved = True
    return theta, kkt, stalled, moved


def solve_item_subproblem(
    item: ItemModel,
    weights: np.ndarray,
    y_col: np.ndarray,
    penalty_weight: float,
    quad: QuadratureRule,
    *,
    x0: float = 0.5,
    y0: float = 0.5,
    qp_tolerance: float = 1e-8,
    max_steps: int = 50,
) -> ItemModel:
    """Maximize one item's posterior-weighted complete-data objective.

    ``weights`` has shape (n, Q): posterior mass per record over the item's
    factor grid. The penalty is scaled by the record count. Returns the
    updated item; a stalled line search returns the entry coefficients.
    """
    weights = np.asarray(weights, dtype=float)
    model_stub = FactorModel(items=[item], copula=_indep_for(item), quad=quad)
    tables = ModelTables(model_stub, np.asarray(y_col, dtype=float).reshape(-1, 1))
    stats = item_estep_stats(item, tables, 0, weights)
    prob = _item_subproblem(item, x0, y0)
    theta, _, _, moved = _constrained_newton(
        item.pack(),
        lambda th: item_qvalue(item, stats, tables.phi_nodes, tables.psi_quad, quad, th),
        lambda th: item_qgrad_hess(item, stats, tables.phi_nodes, tables.psi_quad, quad, th),
        prob,
        weights.shape[0] * penalty_weight,
        max_steps,
        qp_tolerance,
    )
    return item.with_packed(theta) if moved else item


def solve_copula_subproblem(
    copula: CopulaModel,
    pooled: np.ndarray,
    penalty_weight: float,
    quad: QuadratureRule,
    *,
    qp_tolerance: float = 1e-8,
    max_steps: int = 50,
) -> CopulaModel:
    """Maximize the posterior-weighted copula objective at fixed total mass."""
    pooled = np.asarray(pooled, dtype=float)
    phi_nodes = copula.basis.design_matrix(quad.nodes)
    prob = _copula_subproblem(copula)
    theta, _, _, moved = _constrained_newton(
        copula.pack(),
        lambda th: copula_qvalue(copula, pooled, phi_nodes, th),
        lambda th: copula_qgrad_hess(copula, pooled, phi_nodes, th),
        prob,
        float(pooled.sum()) * penalty_weight,
        max_steps,
        qp_tolerance,
    )
    return copula.with_packed(theta) if moved else copula


def _indep_for(item: ItemModel) -> CopulaModel:
    from .latent import independence_copula

    return independence_copula(item.basis)


def _calibrate_main_effect(
    item: ItemModel,
    y_col: np.ndarray,
    penalty_weight: float,
    quad: QuadratureRule,
    x0: float,
    y0: float,
    qp_tolerance: float,
) -> ItemModel:
    """Fit the item's main effect to its marginal with the interaction pinned.

    Starting EM with main effects away from their marginal optimum kicks the
    interaction block in the direction of the main-effect residual, which can
    plant spurious latent structure. Pinning the interaction turns the update
    into a plain penalized marginal fit; the inequality rows act only on the
    pinned block, so they drop out.
    """
    y_col = np.asarray(y_col, dtype=float)
    packed = item.pack()
    n_alpha = item.alpha.size
    pins = np.zeros((packed.size - n_alpha, packed.size))
    pins[:, n_alpha:] = np.eye(packed.size - n_alpha)
    cons = equality_constraints(item, x0, y0)
    stacked = ConstraintSet(
        A=np.vstack([cons.A, pins]), b=np.zeros(cons.A.shape[0] + pins.shape[0])
    )
    prob = _Subproblem(stacked.nullspace(), np.zeros((0, packed.size)), penalty_matrix(item))
    model_stub = FactorModel(items=[item], copula=_indep_for(item), quad=quad)
    tables = ModelTables(model_stub, y_col.reshape(-1, 1))
    uniform = np.tile(quad.weights, (y_col.size, 1))
    stats = item_estep_stats(item, tables, 0, uniform)
    theta, _, _, moved = _constrained_newton(
        packed,
        lambda th: item_qvalue(item, stats, tables.phi_nodes, tables.psi_quad, quad, th),
        lambda th: item_qgrad_hess(item, stats, tables.phi_nodes, tables.psi_quad, quad, th),
        prob,
        y_col.size * penalty_weight,
        50,
        qp_tolerance,
    )
    return item.with_packed(theta) if moved else item


def _start_tilt(item: ItemModel, x0: float, y0: float, slope: float) -> ItemModel:
    """An equality-feasible starting interaction of the given strength.

    An all-zero interaction block is a stationary point of the marginal
    likelihood (a flat item keeps its factor's posterior flat, which in
    turn keeps the item's update flat), so fits started there would never
    move. Centering index ramps at the reference levels keeps the side
    conditions exact; a positive slope makes every monotone difference
    strictly positive.
    """
    k = item.basis.size
    ramp_x = np.arange(k, dtype=float)
    ramp_x -= float(item.basis.evaluate(x0) @ ramp_x)
    ramp_x *= 2.0 / (k - 1)
    if item.kind == CONTINUOUS:
        ramp_y = np.arange(k, dtype=float)
        ramp_y -= float(item.basis.evaluate(y0) @ ramp_y)
        ramp_y *= 2.0 / (k - 1)
        coef = slope * np.outer(ramp_y, ramp_x)
    else:
        steps = np.arange(1, item.n_categories, dtype=float)
        steps /= max(item.n_categories - 1, 1)
        coef = slope * np.outer(steps, ramp_x)
    return item.with_packed(np.concatenate([item.alpha, coef.ravel("F")]))


def _start_slopes(model: FactorModel, values: np.ndarray) -> np.ndarray:
    """Symmetry-breaking start sizes from rest-score correlations.

    Each item's tilt is proportional to its correlation with the total of
    the other items on its factor (or of all other items when the factor
    block has a single member), soft-thresholded at twice the null standard
    error. Correlations explainable by sampling noise alone give an exactly
    flat start, and a flat start is a stationary point of the EM map, so
    flat data yields a flat fit. Real dependence survives the threshold and
    starts the item off the stationary point in the direction the data
    suggest.
    """
    m = len(model.items)
    n = values.shape[0]
    noise = 2.0 / np.sqrt(n) if n > 0 else 0.0
    slopes = np.zeros(m)
    for j, item in enumerate(model.items):
        same = [k for k in model.indices_for(item.factor) if k != j]
        pool = same if same else [k for k in range(m) if k != j]
        if not pool:
            continue
        total = values[:, pool].sum(axis=1)
        yj = values[:, j]
        if yj.std() <= 0.0 or total.std() <= 0.0:
            continue
        r = float(np.corrcoef(yj, total)[0, 1])
        slopes[j] = 2.0 * np.sign(r) * max(abs(r) - noise, 0.0)
        if item.monotone and slopes[j] < 0.0:
            slopes[j] = 0.0
    return slopes


def em_fit(
    model: FactorModel,
    values: np.ndarray,
    weights: PenaltyWeights,
    config: FitConfig | None = None,
) -> FitResult:
    """Fit by EM from the given starting model.

    Every iteration records the penalized objective before updating, so the
    returned trace starts at the initial coefficients. The trace must be
    nondecreasing up to a small slack; a larger decrease raises, since it
    would mean a defective update step.
    """
    config = config or FitConfig()
    values = np.asarray(values, dtype=float)
    n = values.shape[0]
    if n == 0:
        raise ConfigurationError("cannot fit an empty data set")

    fresh = [
        j
        for j, item in enumerate(model.items)
        if not np.any(item.coef) and not np.any(item.alpha)
    ]
    if fresh:
        for j in fresh:
            item = model.items[j]
            model = model.replace_item(
                j,
                _calibrate_main_effect(
                    item,
                    values[:, j],
                    weights.for_item(item),
                    model.quad,
                    config.x0,
                    config.y0,
                    config.qp_tolerance,
                ),
            )
        slopes = _start_slopes(model, values)
        for j in fresh:
            if slopes[j] != 0.0:
                model = model.replace_item(
                    j, _start_tilt(model.items[j], config.x0, config.y0, slopes[j])
                )

    tables = ModelTables(model, values)
    probs = [_item_subproblem(item, config.x0, config.y0) for item in model.items]
    cop_prob = _copula_subproblem(model.copula) if config.update_copula else None

    trace = []
    converged = False
    for it in range(config.max_em_iterations + 1):
        stats = estep(model, values, tables)
        obj = stats.loglik - n * penalty_value(model, weights)
        if trace:
            delta = obj - trace[-1]
            if delta < -TRACE_SLACK:
                raise MonotonicityViolationError(
                    f"objective decreased by {-delta:.3e} at iteration {it}"
                )
            trace.append(obj)
            if abs(delta) < config.em_tolerance:
                converged = True
                break
        else:
            trace.append(obj)
        if it == config.max_em_iterations:
            break

        for j, item in enumerate(model.items):
            r = stats.r1 if item.factor == FACTOR_SPEED else stats.r2
            istats = item_estep_stats(item, tables, j, r)
            theta, _, _, moved = _constrained_newton(
                item.pack(),
                lambda th, _i=item, _s=istats: item_qvalue(
                    _i, _s, tables.phi_nodes, tables.psi_quad, model.quad, th
                ),
                lambda th, _i=item, _s=istats: item_qgrad_hess(
                    _i, _s, tables.phi_nodes, tables.psi_quad, model.quad, th
                ),
                probs[j],
                n * weights.for_item(item),
                config.mstep_steps,
                config.qp_tolerance,
            )
            if moved:
                new_item = item.with_packed(theta)
                model = model.replace_item(j, new_item)
                tables.refresh_item(j, new_item)

        if config.update_copula:
            cop = model.copula
            theta, _, _, moved = _constrained_newton(
                cop.pack(),
                lambda th: copula_qvalue(cop, stats.pooled, tables.phi_nodes, th),
                lambda th: copula_qgrad_hess(cop, stats.pooled, tables.phi_nodes, th),
                cop_prob,
                n * weights.copula,
                config.mstep_steps,
                config.qp_tolerance,
            )
            if moved:
                model = replace(model, copula=cop.with_packed(theta))

    return FitResult(
        model=model,
        trace=np.asarray(trace),
        converged=converged,
        n_iterations=len(trace) - 1,
        weights=weights,
        config=config,
    )
