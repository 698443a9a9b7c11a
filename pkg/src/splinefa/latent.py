"""Bivariate latent density: a B-spline copula on the unit square with
standard-normal marginals on the transformed scale.

The copula density is bilinear in one shared basis,

    c(x1, x2) = phi(x2)' Xi phi(x1),

with nonnegative entries and unit marginal integrals (``Xi kappa = 1`` and
``Xi' kappa = 1``, where ``kappa`` holds the basis integrals). Mapping each
coordinate through the normal quantile function gives a joint density on the
plane whose marginals are exactly standard normal.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import ndtr, ndtri
from scipy.stats import norm

from .exceptions import ConfigurationError
from .measurement import ConstraintSet
from .numerics import BasisSet, QuadratureRule, difference_matrix

LOG_FLOOR = 1e-300


@dataclass
class CopulaModel:
    """Copula coefficients over a shared clamped cubic basis."""

    basis: BasisSet
    xi: np.ndarray

    def __post_init__(self):
        self.xi = np.asarray(self.xi, dtype=float)
        K = self.basis.size
        if self.xi.shape != (K, K):
            raise ConfigurationError(f"xi must have shape ({K}, {K})")

    @property
    def kappa(self) -> np.ndarray:
        return self.basis.integrals

    def pack(self) -> np.ndarray:
        return self.xi.ravel(order="F")

    def with_packed(self, theta: np.ndarray) -> "CopulaModel":
        K = self.basis.size
        return replace(self, xi=np.asarray(theta, dtype=float).reshape((K, K), order="F"))

    def density_grid(self, nodes1, nodes2=None) -> np.ndarray:
        """c on a product grid; entry [a, b] is c(nodes1[a], nodes2[b])."""
        f1 = self.basis.design_matrix(nodes1)
        f2 = f1 if nodes2 is None else self.basis.design_matrix(nodes2)
        return f1 @ self.xi.T @ f2.T


def independence_copula(basis: BasisSet) -> CopulaModel:
    """The constant copula (all coefficients one)."""
    return CopulaModel(basis=basis, xi=np.ones((basis.size, basis.size)))


def copula_density(copula: CopulaModel, x1, x2) -> np.ndarray:
    """Pointwise copula density at paired coordinates."""
    x1 = np.atleast_1d(np.asarray(x1, dtype=float))
    x2 = np.atleast_1d(np.asarray(x2, dtype=float))
    f1 = copula.basis.design_matrix(x1)
    f2 = copula.basis.design_matrix(x2)
    return np.einsum("ik,kl,il->i", f2, copula.xi, f1)


def copula_constraints(basis: BasisSet) -> ConstraintSet:
    """Marginal-uniformity equalities and nonnegativity bounds on vec(Xi).

    Builds 2K equality rows (row sums and column sums against kappa) and
    drops the final column-sum row, which is implied by the others, leaving
    2K - 1 independent rows. Inequalities are the identity (all entries
    nonnegative).
    """
    K = basis.size
    kappa = basis.integrals
    rows = np.kron(kappa[None, :], np.eye(K))      # Xi kappa = 1
    cols = np.kron(np.eye(K), kappa[None, :])      # Xi' kappa = 1
    A = np.vstack([rows, cols[:-1]])
    return ConstraintSet(A=A, b=np.ones(2 * K - 1), G=np.eye(K * K))


def copula_penalty_matrix(basis: BasisSet) -> np.ndarray:
    """Second-difference roughness form on vec(Xi), both axes."""
    K = basis.size
    ete = difference_matrix(2, K)
    ete = ete.T @ ete
    return np.kron(np.eye(K), ete) + np.kron(ete, np.eye(K))


def copula_penalty(copula: CopulaModel, weight: float):
    """Penalty value, gradient and Hessian at the current coefficients."""
    if weight <= 0:
        raise ConfigurationError(f"penalty weight must be positive, got {weight!r}")
    H = weight * copula_penalty_matrix(copula.basis)
    theta = copula.pack()
    grad = H @ theta
    return 0.5 * float(theta @ grad), grad, H


@dataclass(frozen=True)
class LatentDensity:
    """Joint latent density on the transformed (normal) scale."""

    copula: CopulaModel

    def density(self, z1, z2) -> np.ndarray:
        return transformed_joint_density(self.copula, z1, z2)

    def marginal(self, z) -> np.ndarray:
        return norm.pdf(np.asarray(z, dtype=float))


def transformed_joint_density(copula: CopulaModel, z1, z2) -> np.ndarray:
    """Joint density after mapping both axes through the normal quantile.

    h(z1, z2) = c(ndtr(z1), ndtr(z2)) * pdf(z1) * pdf(z2); its marginals
    are standard normal by the copula's unit-integral constraints.
    """
    z1 = np.asarray(z1, dtype=float)
    z2 = np.asarray(z2, dtype=float)
    c = copula_density(copula, ndtr(z1).ravel(), ndtr(z2).ravel())
    return c.reshape(z1.shape) * norm.pdf(z1) * norm.pdf(z2)


def conditional_mean_curve(copula: CopulaModel, u_grid, quad: QuadratureRule) -> np.ndarray:
    """E[Z2* | x1 = u] on the transformed scale, evaluated at u_grid."""
    u_grid = np.atleast_1d(np.asarray(u_grid, dtype=float))
    zstar = ndtri(quad.nodes)
    cgrid = copula.density_grid(u_grid, quad.nodes)
    return cgrid @ (quad.weights * zstar)


def eta_squared(copula: CopulaModel, quad: QuadratureRule) -> float:
    """Variance of the conditional mean of the second transformed factor
    given the first; 0 under independence, at most 1.

    Both integrals run over [0, 1] with the normal quantile applied at the
    inner nodes, so the same unit-interval rule used everywhere else
    applies here too.
    """
    m = conditional_mean_curve(copula, quad.nodes, quad)
    return float(np.dot(quad.weights, m * m))


def fit_copula_least_squares(
    basis: BasisSet,
    target,
    grid_size: int = 41,
    qp_tolerance: float = 1e-10,
) -> CopulaModel:
    """Project a target copula density onto the feasible coefficient set.

    Minimizes the squared grid misfit subject to the marginal and
    nonnegativity constraints; used to build spline ground truths and to
    check how much dependence the family can express.

    Parameters
    ----------
    target : callable
        Maps (u1, u2) arrays to density values.
    grid_size : int
        Per-axis uniform grid resolution (cell midpoints).
    """
    from .qp import solve_qp

    K = basis.size
    u = (np.arange(grid_size) + 0.5) / grid_size
    f = basis.design_matrix(u)
    # design rows phi(u1) kron phi(u2) for every grid pair, column-major vec
    design = np.einsum("ak,bl->abkl", f, f).reshape(grid_size * grid_size, K * K)
    g1, g2 = np.meshgrid(u, u, indexing="ij")
    t = np.asarray(target(g1.ravel(), g2.ravel()), dtype=float)

    cons = copula_constraints(basis)
    theta0 = independence_copula(basis).pack()
    Z = cons.nullspace()
    M = design @ Z
    H = M.T @ M
    q = M.T @ (design @ theta0 - t)
    G = cons.G @ Z
    h = -(cons.G @ theta0)
    res = solve_qp(H, q, G, h, x0=np.zeros(Z.shape[1]), tol=qp_tolerance)
    xi = theta0 + Z @ res.x
    return CopulaModel(basis=basis, xi=xi.reshape((K, K), order="F"))
