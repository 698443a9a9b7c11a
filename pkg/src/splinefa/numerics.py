"""Shared numerical substrate: cubic B-spline bases on the unit interval,
difference matrices, and Gauss-Legendre rules.

All bases are clamped (open uniform) cubic splines on [0, 1] with equally
spaced interior knots, so a basis is fully determined by its size ``K``.
Evaluation uses the stable triangular recurrence over the active knot span,
with ``x = 1`` assigned to the last span so the basis still sums to one at
the right endpoint.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .exceptions import ConfigurationError, DomainError

DEGREE = 3


def _clamped_knots(size: int) -> np.ndarray:
    # size + DEGREE + 1 knots; interior knots equally spaced in (0, 1)
    interior = np.arange(1, size - DEGREE) / (size - DEGREE)
    return np.concatenate([np.zeros(DEGREE + 1), interior, np.ones(DEGREE + 1)])


@dataclass(frozen=True)
class BasisSet:
    """Clamped cubic B-spline basis of ``size`` functions on [0, 1].

    Attributes
    ----------
    size : int
        Number of basis functions (at least 4; 4 is the Bernstein case).
    knots : ndarray
        The full clamped knot vector, length ``size + 4``.
    """

    size: int
    knots: np.ndarray = field(repr=False)

    def design_matrix(self, x) -> np.ndarray:
        """Evaluate all basis functions at ``x``.

        Parameters
        ----------
        x : array_like
            Points in [0, 1].

        Returns
        -------
        ndarray of shape (len(x), size)
            Row ``i`` holds the basis values at ``x[i]``; each row sums to 1
            and has at most 4 nonzero entries.
        """
        x = np.atleast_1d(np.asarray(x, dtype=float))
        if x.ndim != 1:
            raise ConfigurationError("basis evaluation expects a 1-d array")
        if x.size and (x.min() < 0.0 or x.max() > 1.0):
            raise DomainError("basis evaluation points must lie in [0, 1]")
        p = DEGREE
        t = self.knots
        # active span per point; clip sends x=0 to span p and x=1 to the last
        span = np.searchsorted(t, x, side="right") - 1
        span = np.clip(span, p, self.size - 1)

        n = x.size
        vals = np.zeros((n, p + 1))
        vals[:, 0] = 1.0
        left = np.empty((n, p + 1))
        right = np.empty((n, p + 1))
        for j in range(1, p + 1):
            left[:, j] = x - t[span + 1 - j]
            right[:, j] = t[span + j] - x
            saved = np.zeros(n)
            for r in range(j):
                denom = right[:, r + 1] + left[:, j - r]
                temp = vals[:, r] / denom
                vals[:, r] = saved + right[:, r + 1] * temp
                saved = left[:, j - r] * temp
            vals[:, j] = saved

        out = np.zeros((n, self.size))
        cols = span[:, None] - p + np.arange(p + 1)[None, :]
        np.put_along_axis(out, cols, vals, axis=1)
        return out

    def evaluate(self, x: float) -> np.ndarray:
        """Basis values at a single point, shape (size,)."""
        return self.design_matrix([x])[0]

    @property
    def integrals(self) -> np.ndarray:
        """Integrals of each basis function over [0, 1].

        Closed form for a degree-3 basis: ``(t[k+4] - t[k]) / 4``. The
        integrals are positive and sum to one.
        """
        t = self.knots
        return (t[DEGREE + 1:] - t[:-(DEGREE + 1)]) / (DEGREE + 1)


def build_basis(size: int) -> BasisSet:
    """Construct the clamped cubic basis with ``size`` functions.

    ``size = 4`` has no interior knots and coincides with the cubic
    Bernstein basis; ``size = 13`` places interior knots at i/10.
    """
    if int(size) != size or size < 4:
        raise ConfigurationError(f"basis size must be an integer >= 4, got {size!r}")
    size = int(size)
    return BasisSet(size=size, knots=_clamped_knots(size))


def difference_matrix(order: int, size: int) -> np.ndarray:
    """Banded difference matrix of the given order.

    The order-1 matrix has rows with stencil (1, -1) and shape
    ``(size-1, size)``; order 2 composes two first differences and has
    stencil (1, -2, 1). By convention the order-1 matrix of size 1 is the
    1x1 identity, which keeps dichotomous-item constraint algebra uniform.
    """
    if order not in (1, 2):
        raise ConfigurationError(f"difference order must be 1 or 2, got {order!r}")
    if size < 1:
        raise ConfigurationError(f"difference matrix needs size >= 1, got {size!r}")
    if order == 1 and size == 1:
        return np.ones((1, 1))
    if size <= order:
        raise ConfigurationError(
            f"difference matrix of order {order} needs size > {order}, got {size}"
        )
    eye = np.eye(size)
    out = eye
    for _ in range(order):
        out = out[:-1] - out[1:]
    return out


@dataclass(frozen=True)
class QuadratureRule:
    """Nodes and weights for integration over [0, 1]."""

    nodes: np.ndarray
    weights: np.ndarray

    def __len__(self) -> int:
        return self.nodes.size

    def integrate(self, values: np.ndarray) -> float:
        """Weighted sum of function values given at the nodes."""
        return float(np.dot(self.weights, values))


def gauss_legendre_unit(q: int) -> QuadratureRule:
    """Gauss-Legendre rule with ``q`` points rescaled from [-1, 1] to [0, 1].

    Exact for polynomials up to degree ``2q - 1``; weights are positive and
    sum to one.
    """
    if int(q) != q or q < 1:
        raise ConfigurationError(f"quadrature size must be a positive integer, got {q!r}")
    x, w = np.polynomial.legendre.leggauss(int(q))
    return QuadratureRule(nodes=(x + 1.0) / 2.0, weights=w / 2.0)


@dataclass(frozen=True)
class TensorRule:
    """Product rule over the unit square built from two 1-d rules."""

    rule1: QuadratureRule
    rule2: QuadratureRule

    @property
    def weight_grid(self) -> np.ndarray:
        """Outer product of the 1-d weights, shape (len(rule1), len(rule2))."""
        return np.outer(self.rule1.weights, self.rule2.weights)

    @property
    def nodes(self) -> np.ndarray:
        """All node pairs, shape (len(rule1) * len(rule2), 2), first axis fast."""
        a, b = np.meshgrid(self.rule1.nodes, self.rule2.nodes, indexing="ij")
        return np.column_stack([a.ravel(), b.ravel()])

    @property
    def weights(self) -> np.ndarray:
        """Flattened product weights matching :attr:`nodes`."""
        return self.weight_grid.ravel()

    def integrate(self, values: np.ndarray) -> float:
        """Integrate values given on the node grid (either shape)."""
        grid = np.asarray(values).reshape(len(self.rule1), len(self.rule2))
        return float(np.sum(self.weight_grid * grid))


def tensor_rule(rule1: QuadratureRule, rule2: QuadratureRule | None = None) -> TensorRule:
    """Product quadrature over [0, 1]^2 from one or two 1-d rules."""
    return TensorRule(rule1=rule1, rule2=rule1 if rule2 is None else rule2)


def logsumexp_weighted(logv: np.ndarray, weights: np.ndarray, axis=None):
    """log(sum(weights * exp(logv))) with a max shift along ``axis``.

    Weights must be nonnegative; zero weights are handled by masking rather
    than log(0).
    """
    logv = np.asarray(logv, dtype=float)
    shift = np.max(logv, axis=axis, keepdims=True)
    shift = np.where(np.isfinite(shift), shift, 0.0)
    total = np.sum(weights * np.exp(logv - shift), axis=axis)
    with np.errstate(divide="ignore"):
        out = np.log(total) + np.squeeze(shift, axis=axis)
    return out
