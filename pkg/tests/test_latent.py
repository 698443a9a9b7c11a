"""Copula density, constraints, penalty, transformed joint, dependence index.

Oracles: per-knot-span composite Gauss rules for unit-interval integrals,
wide-interval Gauss rules for plane integrals, an explicit stencil loop for
the penalty, and Monte Carlo slice means on a bivariate normal for the
dependence index.
"""

import numpy as np
import pytest
from numpy.testing import assert_allclose
from scipy.special import ndtr, ndtri
from scipy.stats import norm

from splinefa.estimation import solve_copula_subproblem
from splinefa.exceptions import ConfigurationError
from splinefa.latent import (
    CopulaModel,
    LatentDensity,
    conditional_mean_curve,
    copula_constraints,
    copula_density,
    copula_penalty,
    copula_penalty_matrix,
    eta_squared,
    fit_copula_least_squares,
    independence_copula,
    transformed_joint_density,
)
from splinefa.numerics import build_basis, gauss_legendre_unit

QUAD = gauss_legendre_unit(21)
RHO = 0.6


def gaussian_copula(u, v, rho=RHO):
    z1, z2 = ndtri(u), ndtri(v)
    q = (rho * rho * (z1 * z1 + z2 * z2) - 2 * rho * z1 * z2) / (2 * (1 - rho * rho))
    return np.exp(-q) / np.sqrt(1.0 - rho * rho)


def random_feasible_copula(basis, rng, scale=0.5):
    """Independence plus a feasible-subspace perturbation, kept nonnegative."""
    cons = copula_constraints(basis)
    Z = cons.nullspace()
    theta0 = independence_copula(basis).pack()
    step = Z @ (scale * rng.normal(size=Z.shape[1]))
    while (theta0 + step).min() < 0.0:
        step *= 0.5
    copula = independence_copula(basis).with_packed(theta0 + step)
    assert_allclose(cons.A @ copula.pack(), cons.b, atol=1e-10)
    return copula


def spanwise_integral(basis, values_fn):
    """Exact integral over [0,1] of a piecewise cubic in the basis knots."""
    nodes5, w5 = np.polynomial.legendre.leggauss(5)
    total = 0.0
    spans = np.unique(basis.knots)
    for a, b in zip(spans[:-1], spans[1:]):
        x = (a + b) / 2 + (b - a) / 2 * nodes5
        total += (b - a) / 2 * np.dot(w5, values_fn(x))
    return total


def wide_rule(basis, per_segment=30, half_width=8.0):
    """Composite Gauss rule over [-w, w] split at knot preimages.

    The transformed joint density is smooth between the points where the
    normal CDF crosses an interior knot, so a per-segment rule integrates
    it to near machine accuracy.
    """
    interior = np.unique(basis.knots)[1:-1]
    cuts = np.concatenate([[-half_width], ndtri(interior), [half_width]])
    nodes, w = np.polynomial.legendre.leggauss(per_segment)
    zs, ws = [], []
    for a, b in zip(cuts[:-1], cuts[1:]):
        zs.append((a + b) / 2 + (b - a) / 2 * nodes)
        ws.append((b - a) / 2 * w)
    return np.concatenate(zs), np.concatenate(ws)


class TestCopulaModel:
    def test_shape_validated(self):
        with pytest.raises(ConfigurationError):
            CopulaModel(basis=build_basis(5), xi=np.ones((4, 5)))

    def test_pack_round_trip(self):
        rng = np.random.default_rng(1)
        copula = independence_copula(build_basis(6))
        theta = rng.random(36)
        assert_allclose(copula.with_packed(theta).pack(), theta, atol=0)

    def test_density_grid_matches_pointwise(self):
        rng = np.random.default_rng(2)
        copula = random_feasible_copula(build_basis(5), rng)
        a = np.array([0.1, 0.4])
        b = np.array([0.3, 0.8, 0.9])
        grid = copula.density_grid(a, b)
        for i, x1 in enumerate(a):
            for j, x2 in enumerate(b):
                assert abs(grid[i, j] - copula_density(copula, x1, x2)[0]) < 1e-14


class TestCopulaDensity:
    def test_independence_is_flat(self):
        copula = independence_copula(build_basis(7))
        rng = np.random.default_rng(3)
        assert_allclose(
            copula_density(copula, rng.random(25), rng.random(25)), 1.0, atol=1e-13
        )

    def test_row_integrals_are_one(self):
        rng = np.random.default_rng(4)
        copula = random_feasible_copula(build_basis(7), rng)
        for x2 in np.linspace(0.03, 0.97, 10):
            total = spanwise_integral(
                copula.basis,
                lambda x1: copula_density(copula, x1, np.full(x1.size, x2)),
            )
            assert abs(total - 1.0) < 1e-8

    def test_column_integrals_are_one(self):
        rng = np.random.default_rng(5)
        copula = random_feasible_copula(build_basis(6), rng)
        for x1 in np.linspace(0.05, 0.95, 10):
            total = spanwise_integral(
                copula.basis,
                lambda x2: copula_density(copula, np.full(x2.size, x1), x2),
            )
            assert abs(total - 1.0) < 1e-8

    def test_nonnegative_on_grid(self):
        rng = np.random.default_rng(6)
        copula = random_feasible_copula(build_basis(5), rng)
        g = np.linspace(0.0, 1.0, 41)
        assert copula.density_grid(g, g).min() >= -1e-12


class TestCopulaConstraints:
    def test_independence_feasible(self):
        cons = copula_constraints(build_basis(6))
        theta = independence_copula(build_basis(6)).pack()
        assert_allclose(cons.A @ theta, cons.b, atol=1e-12)
        assert (cons.G @ theta).min() >= 0.0

    def test_zero_matrix_violates_equalities(self):
        cons = copula_constraints(build_basis(5))
        assert np.abs(cons.A @ np.zeros(25) - cons.b).max() > 0.9

    def test_row_count_and_rank(self):
        for K in (4, 7, 13):
            cons = copula_constraints(build_basis(K))
            assert cons.A.shape == (2 * K - 1, K * K)
            assert np.linalg.matrix_rank(cons.A) == 2 * K - 1
            assert cons.G.shape == (K * K, K * K)

    def test_full_two_sided_system_has_one_redundancy(self):
        K = 6
        kappa = build_basis(K).integrals
        rows = np.kron(kappa[None, :], np.eye(K))
        cols = np.kron(np.eye(K), kappa[None, :])
        full = np.vstack([rows, cols])
        assert np.linalg.matrix_rank(full) == 2 * K - 1


def copula_penalty_by_loops(xi, weight):
    total = 0.0
    K = xi.shape[0]
    for l in range(K):
        for k in range(K - 2):
            total += (xi[k, l] - 2 * xi[k + 1, l] + xi[k + 2, l]) ** 2
    for k in range(K):
        for l in range(K - 2):
            total += (xi[k, l] - 2 * xi[k, l + 1] + xi[k, l + 2]) ** 2
    return 0.5 * weight * total


class TestCopulaPenalty:
    def test_independence_unpenalized(self):
        value, grad, _ = copula_penalty(independence_copula(build_basis(7)), 3.0)
        assert value == 0.0
        assert_allclose(grad, 0.0, atol=1e-12)

    def test_bilinear_sheet_unpenalized(self):
        K = 6
        idx = np.arange(K, dtype=float)
        xi = 1.0 + np.add.outer(0.3 * idx, -0.2 * idx)
        value = copula_penalty(CopulaModel(basis=build_basis(K), xi=xi), 2.0)[0]
        assert value < 1e-12

    def test_matches_loop_stencil(self):
        rng = np.random.default_rng(7)
        xi = rng.normal(size=(6, 6))
        copula = CopulaModel(basis=build_basis(6), xi=xi)
        value = copula_penalty(copula, 0.8)[0]
        assert abs(value - copula_penalty_by_loops(xi, 0.8)) < 1e-10

    def test_nonpositive_weight_rejected(self):
        copula = independence_copula(build_basis(5))
        for bad in (0.0, -2.0):
            with pytest.raises(ConfigurationError):
                copula_penalty(copula, bad)

    def test_hessian_constant_psd(self):
        basis = build_basis(5)
        H = copula_penalty(independence_copula(basis), 1.5)[2]
        assert_allclose(H, 1.5 * copula_penalty_matrix(basis), atol=0)
        assert np.linalg.eigvalsh(H).min() > -1e-10


class TestTransformedJoint:
    def test_independence_at_origin(self):
        copula = independence_copula(build_basis(5))
        h = transformed_joint_density(copula, np.array(0.0), np.array(0.0))
        assert abs(h - 1.0 / (2.0 * np.pi)) < 1e-12

    def test_independence_factorizes(self):
        copula = independence_copula(build_basis(6))
        z = np.linspace(-3.0, 3.0, 13)
        g1, g2 = np.meshgrid(z, z, indexing="ij")
        h = transformed_joint_density(copula, g1, g2)
        assert_allclose(h, np.outer(norm.pdf(z), norm.pdf(z)), atol=1e-12)

    def test_plane_integral_is_one(self):
        rng = np.random.default_rng(8)
        copula = random_feasible_copula(build_basis(6), rng)
        z, w = wide_rule(copula.basis)
        g1, g2 = np.meshgrid(z, z, indexing="ij")
        h = transformed_joint_density(copula, g1, g2)
        assert abs(w @ h @ w - 1.0) < 1e-6

    def test_marginals_are_standard_normal(self):
        rng = np.random.default_rng(9)
        copula = random_feasible_copula(build_basis(7), rng)
        z, w = wide_rule(copula.basis)
        for z1 in np.linspace(-2.5, 2.5, 20):
            g1 = np.full(z.size, z1)
            marginal = np.dot(transformed_joint_density(copula, g1, z), w)
            assert abs(marginal - norm.pdf(z1)) < 1e-6

    def test_latent_density_wrapper(self):
        rng = np.random.default_rng(10)
        copula = random_feasible_copula(build_basis(5), rng)
        lat = LatentDensity(copula=copula)
        z = np.array([-0.7, 0.2, 1.4])
        assert_allclose(
            lat.density(z, z[::-1]),
            transformed_joint_density(copula, z, z[::-1]),
            atol=0,
        )
        assert_allclose(lat.marginal(z), norm.pdf(z), atol=0)

    def test_nonnegative(self):
        rng = np.random.default_rng(11)
        copula = random_feasible_copula(build_basis(5), rng)
        z = np.linspace(-4, 4, 33)
        g1, g2 = np.meshgrid(z, z, indexing="ij")
        assert transformed_joint_density(copula, g1, g2).min() >= 0.0


def reverse_eta_squared(copula, quad):
    """Dependence index with the conditioning direction swapped, by loops."""
    zstar = ndtri(quad.nodes)
    total = 0.0
    for b, v in enumerate(quad.nodes):
        m = 0.0
        for a, u in enumerate(quad.nodes):
            m += quad.weights[a] * zstar[a] * copula_density(copula, u, v)[0]
        total += quad.weights[b] * m * m
    return total


class TestEtaSquared:
    def test_independence_gives_zero(self):
        assert eta_squared(independence_copula(build_basis(7)), QUAD) < 1e-16

    def test_bounded(self):
        rng = np.random.default_rng(12)
        for _ in range(5):
            copula = random_feasible_copula(build_basis(6), rng)
            value = eta_squared(copula, QUAD)
            assert 0.0 <= value <= 1.0

    def test_transpose_equals_reverse_direction(self):
        rng = np.random.default_rng(13)
        copula = random_feasible_copula(build_basis(5), rng)
        quad = gauss_legendre_unit(9)
        flipped = CopulaModel(basis=copula.basis, xi=copula.xi.T)
        assert abs(eta_squared(flipped, quad) - reverse_eta_squared(copula, quad)) < 1e-12

    def test_symmetric_copula_direction_free(self):
        copula = fit_copula_least_squares(build_basis(9), gaussian_copula)
        flipped = CopulaModel(basis=copula.basis, xi=copula.xi.T)
        assert abs(eta_squared(copula, QUAD) - eta_squared(flipped, QUAD)) < 1e-10

    def test_gaussian_target_matches_monte_carlo_oracle(self):
        copula = fit_copula_least_squares(build_basis(13), gaussian_copula)
        fitted = eta_squared(copula, QUAD)
        rng = np.random.default_rng(99)
        z1 = rng.normal(size=1_000_000)
        z2 = RHO * z1 + np.sqrt(1 - RHO * RHO) * rng.normal(size=1_000_000)
        order = np.argsort(z1)
        slice_means = np.array([z2[s].mean() for s in np.array_split(order, 200)])
        oracle = slice_means.var()
        assert abs(oracle - RHO * RHO) < 0.01
        assert abs(fitted - oracle) < 0.03

    def test_fitted_conditional_mean_tracks_regression_line(self):
        copula = fit_copula_least_squares(build_basis(13), gaussian_copula)
        u = np.linspace(0.05, 0.95, 19)
        curve = conditional_mean_curve(copula, u, QUAD)
        assert np.all(np.diff(curve) > 0.0)
        assert np.abs(curve - RHO * ndtri(u)).max() < 0.05

    def test_dependence_capture_grows_with_basis_size(self):
        # max-likelihood fit to node-quantized draws from the rho = 0.6
        # bivariate normal; richer bases recover more of rho^2 = 0.36
        rng = np.random.default_rng(42)
        n = 10_000
        z1 = rng.normal(size=n)
        z2 = RHO * z1 + np.sqrt(1 - RHO * RHO) * rng.normal(size=n)
        edges = (QUAD.nodes[:-1] + QUAD.nodes[1:]) / 2
        pooled = np.zeros((len(QUAD), len(QUAD)))
        np.add.at(
            pooled,
            (np.searchsorted(edges, ndtr(z1)), np.searchsorted(edges, ndtr(z2))),
            1.0,
        )
        values = []
        for K in (5, 9, 13):
            copula = solve_copula_subproblem(
                independence_copula(build_basis(K)), pooled, 1e-3, QUAD
            )
            values.append(eta_squared(copula, QUAD))
        assert values[0] < values[1] < values[2]
        assert abs(values[2] - RHO * RHO) < 0.05
