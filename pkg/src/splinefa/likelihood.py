"""Two-factor simple-structure model: marginal likelihood over a tensor
quadrature grid, posterior weights, and the penalized objective.

Each manifest variable loads on exactly one of two latent variables, so the
conditional joint density factors into two blocks. The marginal likelihood
integrates the blocks against the copula on a product Gauss-Legendre grid;
everything downstream (EM, scoring, diagnostics) reuses the same grid.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .exceptions import (
    ConfigurationError,
    DegeneratePosteriorError,
    DomainError,
    NumericalError,
    SchemaError,
)
from .latent import (
    LOG_FLOOR,
    CopulaModel,
    copula_penalty,
    copula_penalty_matrix,
    independence_copula,
)
from .measurement import CONTINUOUS, ItemModel, blank_item, item_penalty, penalty_matrix
from .numerics import build_basis, gauss_legendre_unit, logsumexp_weighted

FACTOR_SPEED = "slowness"
FACTOR_ABILITY = "ability"
FACTORS = (FACTOR_SPEED, FACTOR_ABILITY)


@dataclass(frozen=True)
class PenaltyWeights:
    """Smoothing weights: one for continuous items, one for discrete items,
    one for the copula."""

    continuous: float
    discrete: float
    copula: float

    def __post_init__(self):
        for name in ("continuous", "discrete", "copula"):
            v = getattr(self, name)
            if not np.isfinite(v) or v <= 0:
                raise ConfigurationError(f"penalty weight {name} must be > 0, got {v!r}")

    def for_item(self, item: ItemModel) -> float:
        return self.continuous if item.kind == CONTINUOUS else self.discrete


@dataclass
class FactorModel:
    """All item models plus the copula and the shared quadrature rule."""

    items: list
    copula: CopulaModel
    quad: object

    def __post_init__(self):
        if not self.items:
            raise ConfigurationError("a factor model needs at least one item")
        for item in self.items:
            if item.factor not in FACTORS:
                raise ConfigurationError(
                    f"{item.name}: factor must be one of {FACTORS}, got {item.factor!r}"
                )
            if item.basis.size != self.copula.basis.size:
                raise ConfigurationError(
                    f"{item.name}: item basis must match the copula basis size"
                )

    @property
    def basis(self):
        return self.copula.basis

    def indices_for(self, factor: str) -> list:
        return [j for j, item in enumerate(self.items) if item.factor == factor]

    def item_index(self, name: str) -> int:
        for j, item in enumerate(self.items):
            if item.name == name:
                return j
        raise ConfigurationError(f"no item named {name!r}")

    def replace_item(self, index: int, item: ItemModel) -> "FactorModel":
        items = list(self.items)
        items[index] = item
        return replace(self, items=items)


def build_model(columns, basis_size: int = 13, quadrature_size: int = 21) -> FactorModel:
    """Blank model (flat items, independence copula) from column metadata.

    ``columns`` is any iterable of objects with name/kind/factor fields and,
    for discrete columns, ``n_categories`` (plus an optional ``monotone``
    flag).
    """
    basis = build_basis(basis_size)
    items = [
        blank_item(
            name=c.name,
            kind=c.kind,
            factor=c.factor,
            basis=basis,
            n_categories=getattr(c, "n_categories", None),
            monotone=bool(getattr(c, "monotone", False)),
        )
        for c in columns
    ]
    return FactorModel(
        items=items,
        copula=independence_copula(basis),
        quad=gauss_legendre_unit(quadrature_size),
    )


class ModelTables:
    """Cached per-item response designs and log-density tables on the grid.

    The response-side designs depend only on the data, so the expensive part
    survives coefficient updates; ``refresh_item`` recomputes a single item's
    log-density table after its coefficients change.
    """

    def __init__(self, model: FactorModel, values: np.ndarray):
        values = np.asarray(values, dtype=float)
        if values.ndim != 2 or values.shape[1] != len(model.items):
            raise ConfigurationError(
                f"data must be 2-d with {len(model.items)} columns, got {values.shape}"
            )
        self.model = model
        self.n = values.shape[0]
        self.quad = model.quad
        self.phi_nodes = model.basis.design_matrix(model.quad.nodes)
        self.psi_quad = self.phi_nodes  # continuous items share the basis
        self.resp = []
        self.codes = []
        for j, item in enumerate(model.items):
            col = values[:, j]
            if item.kind == CONTINUOUS:
                if col.size and (np.isnan(col).any() or col.min() < 0.0 or col.max() > 1.0):
                    raise DomainError(
                        f"{item.name}: continuous responses must lie in [0, 1]"
                    )
                self.resp.append(item.response_design(col))
                self.codes.append(None)
            else:
                self.resp.append(None)
                codes = col.astype(int)
                if not np.array_equal(codes, col):
                    raise SchemaError(f"{item.name}: categories must be integers")
                if codes.size and (codes.min() < 0 or codes.max() >= item.n_categories):
                    raise DomainError(
                        f"{item.name}: category codes outside [0, {item.n_categories - 1}]"
                    )
                self.codes.append(codes)
        self.logf = [None] * len(model.items)
        for j, item in enumerate(model.items):
            self.refresh_item(j, item)

    def refresh_item(self, j: int, item: ItemModel):
        self.logf[j] = self._item_log_table(j, item)

    def _item_log_table(self, j: int, item: ItemModel) -> np.ndarray:
        eta = item.alpha[:, None] + item.coef @ self.phi_nodes.T  # (L, Q)
        if not np.all(np.isfinite(eta)):
            raise NumericalError(f"{item.name}: non-finite kernel coefficients")
        if item.kind == CONTINUOUS:
            g_quad = self.psi_quad @ eta  # (Qy, Q)
            log_z = logsumexp_weighted(g_quad, self.quad.weights[:, None], axis=0)
            return self.resp[j] @ eta - log_z[None, :]
        logits = np.vstack([np.zeros(eta.shape[1]), eta])  # (C, Q)
        shift = logits.max(axis=0)
        logp = logits - shift
        logp -= np.log(np.exp(logp).sum(axis=0))
        return logp[self.codes[j]]

    def block_logs(self):
        """Summed per-record log densities for each factor, shape (n, Q).

        Accumulation runs in item-name order, so reordering items within a
        block (with matching data columns) reproduces the sums bit for bit.
        """
        q = len(self.quad)
        out = []
        for factor in FACTORS:
            idx = sorted(
                self.model.indices_for(factor),
                key=lambda j: self.model.items[j].name,
            )
            if idx:
                total = self.logf[idx[0]].copy()
                for j in idx[1:]:
                    total += self.logf[j]
                out.append(total)
            else:
                out.append(np.zeros((self.n, q)))
        return out[0], out[1]

    def copula_grid(self) -> np.ndarray:
        """Copula density on the node grid; entry [a, b] pairs factor-1 node
        a with factor-2 node b."""
        return self.model.copula.density_grid(self.quad.nodes)


@dataclass
class EStepStats:
    """Posterior summaries from one pass over the data.

    ``r1``/``r2`` are per-record marginal posterior weights over the factor
    grids (rows sum to one); ``pooled`` sums the full posterior grids over
    records (total mass n); ``per_record`` holds the log marginal of every
    record.
    """

    r1: np.ndarray
    r2: np.ndarray
    pooled: np.ndarray
    per_record: np.ndarray

    @property
    def loglik(self) -> float:
        return float(np.sum(self.per_record))


def _mix_parts(tables: ModelTables):
    a1, a2 = tables.block_logs()
    w = tables.quad.weights
    m1 = a1.max(axis=1)
    m2 = a2.max(axis=1)
    p1 = np.exp(a1 - m1[:, None]) * w[None, :]
    p2 = np.exp(a2 - m2[:, None]) * w[None, :]
    cgrid = tables.copula_grid()
    s = np.einsum("ia,ab,ib->i", p1, cgrid, p2)
    return p1, p2, cgrid, s, m1, m2


def estep(model: FactorModel, values: np.ndarray, tables: ModelTables = None) -> EStepStats:
    """Marginal log-likelihood and posterior weight summaries."""
    tables = tables or ModelTables(model, values)
    tables.model = model  # coefficients may have moved since construction
    p1, p2, cgrid, s, m1, m2 = _mix_parts(tables)
    bad = np.nonzero(~(s > 0.0) | ~np.isfinite(s))[0]
    if bad.size:
        raise DegeneratePosteriorError(int(bad[0]))
    per_record = m1 + m2 + np.log(s)
    r2 = (p1 @ cgrid) * p2 / s[:, None]
    r1 = p1 * (p2 @ cgrid.T) / s[:, None]
    pooled = cgrid * ((p1 / s[:, None]).T @ p2)
    return EStepStats(r1=r1, r2=r2, pooled=pooled, per_record=per_record)


def marginal_loglik(model: FactorModel, values, tables: ModelTables = None) -> float:
    """Sum over records of the log marginal density of the observed row."""
    tables = tables or ModelTables(model, values)
    tables.model = model
    _, _, _, s, m1, m2 = _mix_parts(tables)
    bad = np.nonzero(~(s > 0.0) | ~np.isfinite(s))[0]
    if bad.size:
        raise NumericalError(f"non-finite marginal likelihood for record {int(bad[0])}")
    return float(np.sum(m1 + m2 + np.log(s)))


def per_record_loglik(model: FactorModel, values) -> np.ndarray:
    """Log marginal density of each record, shape (n,)."""
    tables = ModelTables(model, values)
    _, _, _, s, m1, m2 = _mix_parts(tables)
    bad = np.nonzero(~(s > 0.0) | ~np.isfinite(s))[0]
    if bad.size:
        raise NumericalError(f"non-finite marginal likelihood for record {int(bad[0])}")
    return m1 + m2 + np.log(s)


def penalty_value(model: FactorModel, weights: PenaltyWeights) -> float:
    """Total roughness penalty (per-record scale, before multiplying by n)."""
    total = 0.0
    for item in model.items:
        total += item_penalty(item, weights.for_item(item))[0]
    total += copula_penalty(model.copula, weights.copula)[0]
    return total


def penalized_objective(
    model: FactorModel, values, weights: PenaltyWeights, tables: ModelTables = None
) -> float:
    """Marginal log-likelihood minus n times the total penalty."""
    values = np.asarray(values, dtype=float)
    n = values.shape[0]
    return marginal_loglik(model, values, tables) - n * penalty_value(model, weights)


def posterior_weights(model: FactorModel, y_row) -> np.ndarray:
    """Normalized posterior over the node grid for one record, shape (Q, Q)."""
    row = np.asarray(y_row, dtype=float).reshape(1, -1)
    tables = ModelTables(model, row)
    p1, p2, cgrid, s, _, _ = _mix_parts(tables)
    if not (s[0] > 0.0 and np.isfinite(s[0])):
        raise DegeneratePosteriorError(0)
    grid = cgrid * np.outer(p1[0], p2[0])
    return grid / grid.sum()


def conditional_joint_logdensity(model: FactorModel, y_row, x1: float, x2: float) -> float:
    """Log density of one observation row given both latent values."""
    y_row = np.asarray(y_row, dtype=float)
    if y_row.shape != (len(model.items),):
        raise ConfigurationError(
            f"row must have {len(model.items)} entries, got {y_row.shape}"
        )
    quad = model.quad
    total = 0.0
    for j, item in enumerate(model.items):
        x = x1 if item.factor == FACTOR_SPEED else x2
        phi = item.basis.evaluate(x)
        eta = item.alpha + item.coef @ phi
        if item.kind == CONTINUOUS:
            log_z = logsumexp_weighted(item.basis.design_matrix(quad.nodes) @ eta, quad.weights)
            total += float(item.response_design([y_row[j]])[0] @ eta) - log_z
        else:
            code = int(y_row[j])
            if code != y_row[j] or not 0 <= code < item.n_categories:
                raise DomainError(
                    f"{item.name}: category {y_row[j]!r} outside "
                    f"[0, {item.n_categories - 1}]"
                )
            logits = np.concatenate([[0.0], eta])
            logits -= logits.max()
            total += float(logits[code] - np.log(np.exp(logits).sum()))
    return total


# ---------------------------------------------------------------------------
# complete-data (posterior-weighted) building blocks shared by the M step
# and the objective gradient
# ---------------------------------------------------------------------------


def item_estep_stats(item: ItemModel, tables: ModelTables, j: int, r: np.ndarray):
    """Sufficient statistics of the weighted complete-data log-likelihood.

    Continuous items need the weighted response-design totals per node and
    the node masses; discrete items need category-by-node counts.
    """
    if item.kind == CONTINUOUS:
        return {"t": tables.resp[j].T @ r, "rho": r.sum(axis=0)}
    counts = np.zeros((item.n_categories, r.shape[1]))
    np.add.at(counts, tables.codes[j], r)
    return {"n": counts}


def item_qvalue(item: ItemModel, stats, phi_nodes, psi_quad, quad, theta=None) -> float:
    """Weighted complete-data log-likelihood at packed coefficients."""
    work = item if theta is None else item.with_packed(theta)
    eta = work.alpha[:, None] + work.coef @ phi_nodes.T  # (L, Q)
    if item.kind == CONTINUOUS:
        g_quad = psi_quad @ eta
        log_z = logsumexp_weighted(g_quad, quad.weights[:, None], axis=0)
        return float(np.sum(stats["t"] * eta) - np.dot(stats["rho"], log_z))
    logits = np.vstack([np.zeros(eta.shape[1]), eta])
    shift = logits.max(axis=0)
    logp = logits - shift
    logp -= np.log(np.exp(logp).sum(axis=0))
    return float(np.sum(stats["n"] * logp))


def item_qgrad_hess(item: ItemModel, stats, phi_nodes, psi_quad, quad, theta=None):
    """Gradient and Hessian of the weighted complete-data log-likelihood.

    Both use the closed-form exponential-family moments at each node; the
    Hessian is returned as the negative curvature (a PSD matrix) ready for
    a minimization step.
    """
    work = item if theta is None else item.with_packed(theta)
    K = item.basis.size
    L = item.n_effects
    eta = work.alpha[:, None] + work.coef @ phi_nodes.T
    ext = np.hstack([np.ones((phi_nodes.shape[0], 1)), phi_nodes])  # (Q, 1+K)

    if item.kind == CONTINUOUS:
        g_quad = psi_quad @ eta  # (Qy, Q)
        shift = g_quad.max(axis=0)
        f = np.exp(g_quad - shift) * quad.weights[:, None]
        f /= f.sum(axis=0)  # conditional density mass at the y nodes
        mean_psi = psi_quad.T @ f  # (L, Q)
        rho = stats["rho"]
        resid = stats["t"] - mean_psi * rho[None, :]
        grad_eta = resid  # (L, Q)
        # node covariances of psi under the fitted conditional
        cov = np.einsum("qa,ql,qm->alm", f, psi_quad, psi_quad)
        cov -= np.einsum("la,ma->alm", mean_psi, mean_psi)
    else:
        logits = np.vstack([np.zeros(eta.shape[1]), eta])
        shift = logits.max(axis=0)
        p = np.exp(logits - shift)
        p /= p.sum(axis=0)  # (C, Q)
        counts = stats["n"]
        rho = counts.sum(axis=0)
        grad_eta = counts[1:] - p[1:] * rho[None, :]
        p1 = p[1:]
        cov = np.einsum("la,ma->alm", p1, p1) * -1.0
        idx = np.arange(L)
        cov[:, idx, idx] += p1.T

    grad = np.concatenate(
        [grad_eta.sum(axis=1), (grad_eta @ phi_nodes).ravel(order="F")]
    )
    outer = np.einsum("qi,qj->qij", ext, ext)  # (Q, 1+K, 1+K)
    hess_blocks = np.einsum("q,qij,qlm->iljm", rho, outer, cov)
    neg_hess = hess_blocks.reshape(((1 + K) * L, (1 + K) * L))
    return grad, neg_hess


def copula_qvalue(copula: CopulaModel, pooled: np.ndarray, phi_nodes, theta=None) -> float:
    """Posterior-weighted log copula density over the node grid."""
    work = copula if theta is None else copula.with_packed(theta)
    c = phi_nodes @ work.xi.T @ phi_nodes.T
    return float(np.sum(pooled * np.log(np.maximum(c, LOG_FLOOR))))


def copula_qgrad_hess(copula: CopulaModel, pooled: np.ndarray, phi_nodes, theta=None):
    """Gradient and negative Hessian (PSD) of the weighted copula term."""
    work = copula if theta is None else copula.with_packed(theta)
    K = copula.basis.size
    c = np.maximum(phi_nodes @ work.xi.T @ phi_nodes.T, LOG_FLOOR)
    ratio = pooled / c
    grad = (phi_nodes.T @ ratio.T @ phi_nodes).ravel(order="F")
    curv = pooled / (c * c)
    neg_hess = np.zeros((K * K, K * K))
    for a in range(phi_nodes.shape[0]):
        inner = phi_nodes.T @ (curv[a][:, None] * phi_nodes)  # (K, K) over factor-2
        neg_hess += np.kron(np.outer(phi_nodes[a], phi_nodes[a]), inner)
    return grad, neg_hess


def objective_gradient(model: FactorModel, values, weights: PenaltyWeights):
    """Exact gradient of the penalized objective in packed coordinates.

    Returns a dict keyed by item name plus ``"copula"``. Uses the posterior
    identity: the marginal score equals the posterior-weighted
    complete-data score, evaluated at the current coefficients.
    """
    values = np.asarray(values, dtype=float)
    n = values.shape[0]
    tables = ModelTables(model, values)
    stats = estep(model, values, tables)
    out = {}
    for j, item in enumerate(model.items):
        r = stats.r1 if item.factor == FACTOR_SPEED else stats.r2
        istats = item_estep_stats(item, tables, j, r)
        grad, _ = item_qgrad_hess(item, istats, tables.phi_nodes, tables.psi_quad, model.quad)
        out[item.name] = grad - n * weights.for_item(item) * (
            penalty_matrix(item) @ item.pack()
        )
    cgrad, _ = copula_qgrad_hess(model.copula, stats.pooled, tables.phi_nodes)
    out["copula"] = cgrad - n * weights.copula * (
        copula_penalty_matrix(model.basis) @ model.copula.pack()
    )
    return out
