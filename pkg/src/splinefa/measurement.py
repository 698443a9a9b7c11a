"""Conditional models for single manifest variables given one latent variable.

A continuous variable on [0, 1] gets a logistic spline density
``f(y | x) = exp(g(x, y)) / Z(x)`` whose log kernel is a main effect plus a
bilinear interaction in two spline bases,

    g(x, y) = psi(y)' alpha + psi(y)' B phi(x).

A discrete variable with categories ``0..C-1`` uses indicator contrasts for
the nonzero categories, with category 0 as the structural reference, so the
same (alpha, B) parameterization yields a multinomial response function.

Identifiability comes from side conditions at reference levels: the main
effect and the interaction vanish at ``y0`` and the interaction vanishes at
``x0``. Optional likelihood-ratio monotonicity is a set of linear
inequalities on mixed forward differences of ``B``.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy.linalg import block_diag, null_space, qr

from .exceptions import ConfigurationError, DomainError, NumericalError
from .numerics import BasisSet, QuadratureRule, difference_matrix, logsumexp_weighted

CONTINUOUS = "continuous"
DISCRETE = "discrete"


@dataclass
class ItemModel:
    """Coefficients and metadata for one manifest variable.

    Attributes
    ----------
    name : str
        Column label, used in reports.
    kind : str
        ``"continuous"`` or ``"discrete"``.
    factor : str
        Which latent variable the item loads on.
    basis : BasisSet
        Latent-side basis; continuous items reuse it on the response side.
    alpha : ndarray, shape (L,)
        Main-effect coefficients. ``L = basis.size`` for continuous items
        and ``n_categories - 1`` for discrete items.
    coef : ndarray, shape (L, K)
        Interaction coefficients ``B``.
    n_categories : int or None
        Category count for discrete items (>= 2).
    monotone : bool
        Whether likelihood-ratio monotonicity constraints apply.
    """

    name: str
    kind: str
    factor: str
    basis: BasisSet
    alpha: np.ndarray
    coef: np.ndarray
    n_categories: int | None = None
    monotone: bool = False

    def __post_init__(self):
        if self.kind not in (CONTINUOUS, DISCRETE):
            raise ConfigurationError(f"unknown item kind {self.kind!r}")
        if self.kind == DISCRETE:
            if self.n_categories is None or self.n_categories < 2:
                raise ConfigurationError(
                    f"{self.name}: discrete items need n_categories >= 2"
                )
        self.alpha = np.asarray(self.alpha, dtype=float)
        self.coef = np.asarray(self.coef, dtype=float)
        if self.alpha.shape != (self.n_effects,):
            raise ConfigurationError(
                f"{self.name}: alpha must have shape ({self.n_effects},)"
            )
        if self.coef.shape != (self.n_effects, self.basis.size):
            raise ConfigurationError(
                f"{self.name}: coef must have shape "
                f"({self.n_effects}, {self.basis.size})"
            )

    @property
    def n_effects(self) -> int:
        """Row count L of alpha/B: K for continuous, C - 1 for discrete."""
        if self.kind == CONTINUOUS:
            return self.basis.size
        return self.n_categories - 1

    @property
    def n_coef(self) -> int:
        """Length of the packed coefficient vector."""
        return self.n_effects * (1 + self.basis.size)

    def pack(self) -> np.ndarray:
        """Stack (alpha, vec(B)) with column-major vec."""
        return np.concatenate([self.alpha, self.coef.ravel(order="F")])

    def with_packed(self, theta: np.ndarray) -> "ItemModel":
        """Copy of the item with coefficients taken from a packed vector."""
        L = self.n_effects
        alpha = np.asarray(theta[:L], dtype=float)
        coef = np.asarray(theta[L:], dtype=float).reshape(
            (L, self.basis.size), order="F"
        )
        return replace(self, alpha=alpha, coef=coef)

    def response_design(self, y) -> np.ndarray:
        """Response-side design rows psi(y), shape (len(y), L).

        Continuous items evaluate the spline basis; discrete items produce
        indicator rows with category 0 mapping to the zero vector.
        """
        if self.kind == CONTINUOUS:
            return self.basis.design_matrix(y)
        y = np.atleast_1d(np.asarray(y))
        codes = y.astype(int)
        if not np.array_equal(codes, y) or (
            codes.size and (codes.min() < 0 or codes.max() >= self.n_categories)
        ):
            raise DomainError(
                f"{self.name}: categories must be integers in [0, {self.n_categories - 1}]"
            )
        out = np.zeros((y.size, self.n_effects))
        nz = codes > 0
        out[nz, codes[nz] - 1] = 1.0
        return out


def blank_item(name, kind, factor, basis, n_categories=None, monotone=False) -> ItemModel:
    """Item with all coefficients zero (uniform density / equal categories)."""
    L = basis.size if kind == CONTINUOUS else max((n_categories or 0) - 1, 0)
    return ItemModel(
        name=name,
        kind=kind,
        factor=factor,
        basis=basis,
        alpha=np.zeros(L),
        coef=np.zeros((L, basis.size)),
        n_categories=n_categories,
        monotone=monotone,
    )


def log_kernel(item: ItemModel, x: float, y) -> np.ndarray:
    """Log kernel g(x, y) before normalization; vectorized over y."""
    phi = item.basis.evaluate(x)
    eta = item.alpha + item.coef @ phi
    return item.response_design(y) @ eta


def continuous_density(item: ItemModel, x: float, quad: QuadratureRule):
    """Normalized conditional density of a continuous item at latent value x.

    Returns a callable mapping y arrays to density values. The normalizing
    integral is computed with ``quad`` and a max shift, so well-scaled
    kernels never overflow.
    """
    if item.kind != CONTINUOUS:
        raise ConfigurationError(f"{item.name} is not a continuous item")
    phi = item.basis.evaluate(x)
    eta = item.alpha + item.coef @ phi
    if not np.all(np.isfinite(eta)):
        raise NumericalError(f"{item.name}: non-finite kernel coefficients")
    log_z = logsumexp_weighted(item.response_design(quad.nodes) @ eta, quad.weights)

    def density(y):
        return np.exp(item.response_design(y) @ eta - log_z)

    return density


def discrete_irf(item: ItemModel, x: float) -> np.ndarray:
    """Category probabilities at latent value x, shape (C,), summing to 1."""
    if item.kind != DISCRETE:
        raise ConfigurationError(f"{item.name} is not a discrete item")
    phi = item.basis.evaluate(x)
    logits = np.concatenate([[0.0], item.alpha + item.coef @ phi])
    if not np.all(np.isfinite(logits)):
        raise NumericalError(f"{item.name}: non-finite category logits")
    logits -= logits.max()
    p = np.exp(logits)
    return p / p.sum()


@dataclass(frozen=True)
class ConstraintSet:
    """Linear constraints on a packed coefficient vector.

    Equality rows satisfy ``A @ coef = b``; inequality rows require
    ``G @ coef >= 0``.
    """

    A: np.ndarray
    b: np.ndarray
    G: np.ndarray = field(default=None)

    def independent_rows(self) -> "ConstraintSet":
        """Drop linearly dependent equality rows (QR with pivoting)."""
        if self.A.shape[0] == 0:
            return self
        r, p = qr(self.A.T, mode="r", pivoting=True)
        diag = np.abs(np.diag(r))
        tol = max(self.A.shape) * np.finfo(float).eps * (diag.max() if diag.size else 0.0)
        rank = int(np.sum(diag > tol))
        keep = np.sort(p[:rank])
        return ConstraintSet(A=self.A[keep], b=self.b[keep], G=self.G)

    def nullspace(self) -> np.ndarray:
        """Orthonormal basis Z of the equality null space (coef = part + Z u)."""
        if self.A.shape[0] == 0:
            return np.eye(self.A.shape[1])
        return null_space(self.A)

    def particular(self) -> np.ndarray:
        """Minimum-norm particular solution of the equality system."""
        if self.A.shape[0] == 0:
            return np.zeros(self.A.shape[1])
        return np.linalg.lstsq(self.A, self.b, rcond=None)[0]


def equality_constraints(item: ItemModel, x0: float = 0.5, y0: float = 0.5) -> ConstraintSet:
    """Identifiability side conditions at the reference levels.

    Continuous items: ``psi(y0)' alpha = 0``, ``B phi(x0) = 0`` and
    ``B' psi(y0) = 0`` (1 + L + K rows with one redundancy). Discrete items
    anchor category 0 structurally and only need ``B phi(x0) = 0``.
    """
    K = item.basis.size
    L = item.n_effects
    P = item.n_coef
    phi0 = item.basis.evaluate(x0)
    rows = []
    if item.kind == CONTINUOUS:
        psi0 = item.basis.evaluate(y0)
        main = np.zeros(P)
        main[:L] = psi0
        rows.append(main[None, :])
        inter_x = np.hstack([np.zeros((L, L)), np.kron(phi0[None, :], np.eye(L))])
        rows.append(inter_x)
        inter_y = np.hstack([np.zeros((K, L)), np.kron(np.eye(K), psi0[None, :])])
        rows.append(inter_y)
    else:
        rows.append(np.hstack([np.zeros((L, L)), np.kron(phi0[None, :], np.eye(L))]))
    A = np.vstack(rows)
    G = monotonicity_constraints(item) if item.monotone else np.zeros((0, P))
    return ConstraintSet(A=A, b=np.zeros(A.shape[0]), G=G)


def monotonicity_constraints(item: ItemModel) -> np.ndarray:
    """Inequality rows making the item stochastically increasing in x.

    Rows are mixed forward differences of ``B`` (nonnegative slack at
    coefficient sheets that increase along both axes). Discrete items
    include the boundary block against the structural zero row of the
    reference category, so a dichotomous item reduces to forward
    differences of its single coefficient row.
    """
    K = item.basis.size
    L = item.n_effects
    fwd_x = -difference_matrix(1, K)  # (K-1, K), rows (-1, +1)
    if item.kind == CONTINUOUS:
        fwd_y = -difference_matrix(1, L)
        block = np.kron(fwd_x, fwd_y)
    else:
        fwd_aug = np.zeros((L, L))
        fwd_aug[0, 0] = 1.0
        for a in range(1, L):
            fwd_aug[a, a - 1] = -1.0
            fwd_aug[a, a] = 1.0
        block = np.kron(fwd_x, fwd_aug)
    return np.hstack([np.zeros((block.shape[0], L)), block])


def penalty_matrix(item: ItemModel) -> np.ndarray:
    """Quadratic roughness form on the packed coefficients (PSD).

    Continuous items penalize squared second differences of alpha and of
    both axes of B; discrete items only smooth each category's row of B
    along the latent axis (categories are nominal, intercepts are free).
    """
    K = item.basis.size
    L = item.n_effects
    ete_x = difference_matrix(2, K)
    ete_x = ete_x.T @ ete_x
    if item.kind == CONTINUOUS:
        ete_y = difference_matrix(2, L)
        ete_y = ete_y.T @ ete_y
        inter = np.kron(np.eye(K), ete_y) + np.kron(ete_x, np.eye(L))
        return block_diag(ete_y, inter)
    return block_diag(np.zeros((L, L)), np.kron(ete_x, np.eye(L)))


def item_penalty(item: ItemModel, weight: float):
    """Penalty value, gradient and Hessian at the item's coefficients."""
    if weight <= 0:
        raise ConfigurationError(f"penalty weight must be positive, got {weight!r}")
    H = weight * penalty_matrix(item)
    theta = item.pack()
    grad = H @ theta
    return 0.5 * float(theta @ grad), grad, H
