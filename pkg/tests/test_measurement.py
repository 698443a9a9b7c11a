"""Single-item conditional models: kernels, densities, constraints, penalty.

Kernel values and penalties are checked against naive scalar loops, the
linear-kernel density against its closed-form normalizer, and constraint
systems against direct stencil arithmetic.
"""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose

from splinefa.exceptions import ConfigurationError, DomainError
from splinefa.measurement import (
    CONTINUOUS,
    DISCRETE,
    ItemModel,
    blank_item,
    continuous_density,
    discrete_irf,
    equality_constraints,
    item_penalty,
    log_kernel,
    monotonicity_constraints,
    penalty_matrix,
)
from splinefa.numerics import build_basis, gauss_legendre_unit

QUAD = gauss_legendre_unit(21)


def make_item(kind, k=5, n_categories=None, monotone=False, name="it"):
    return blank_item(
        name, kind, "slowness" if kind == CONTINUOUS else "ability",
        build_basis(k), n_categories=n_categories, monotone=monotone,
    )


def random_feasible(item, rng, scale=1.0, x0=0.5, y0=0.5):
    """Random coefficients projected onto the equality-feasible subspace."""
    Z = equality_constraints(item, x0, y0).nullspace()
    return item.with_packed(Z @ (scale * rng.normal(size=Z.shape[1])))


def kernel_by_loops(item, x, y):
    """Independent scalar evaluation of psi(y)' alpha + psi(y)' B phi(x)."""
    psi = item.response_design([y])[0]
    phi = item.basis.evaluate(x)
    total = 0.0
    for l in range(item.n_effects):
        inner = item.alpha[l]
        for k in range(item.basis.size):
            inner += item.coef[l, k] * phi[k]
        total += psi[l] * inner
    return total


class TestLogKernel:
    def test_zero_coefficients_give_zero_everywhere(self):
        item = make_item(CONTINUOUS)
        for x, y in [(0.0, 0.3), (0.5, 0.5), (1.0, 0.9)]:
            assert log_kernel(item, x, [y])[0] == 0.0

    def test_vanishes_at_reference_point(self):
        rng = np.random.default_rng(21)
        for _ in range(10):
            item = random_feasible(make_item(CONTINUOUS, k=6), rng)
            assert abs(log_kernel(item, 0.5, [0.5])[0]) < 1e-8

    def test_matches_naive_double_sum(self):
        rng = np.random.default_rng(22)
        cont = random_feasible(make_item(CONTINUOUS, k=6), rng)
        disc = random_feasible(make_item(DISCRETE, k=5, n_categories=4), rng)
        for item, ys in [(cont, rng.random(5)), (disc, [0, 1, 2, 3])]:
            for x in rng.random(5):
                for y in ys:
                    assert abs(log_kernel(item, x, [y])[0] - kernel_by_loops(item, x, y)) < 1e-12

    def test_discrete_reference_category_contributes_zero(self):
        rng = np.random.default_rng(23)
        item = random_feasible(make_item(DISCRETE, k=5, n_categories=3), rng)
        assert log_kernel(item, 0.37, [0])[0] == 0.0


class TestContinuousDensity:
    def test_zero_coefficients_give_uniform(self):
        dens = continuous_density(make_item(CONTINUOUS), 0.3, QUAD)
        assert_allclose(dens(np.linspace(0, 1, 11)), np.ones(11), atol=1e-14)

    def test_normalizes_for_random_feasible_models(self):
        rng = np.random.default_rng(31)
        for _ in range(20):
            item = random_feasible(make_item(CONTINUOUS, k=7), rng)
            x = rng.random()
            dens = continuous_density(item, x, QUAD)
            assert abs(QUAD.integrate(dens(QUAD.nodes)) - 1.0) < 1e-10

    def test_linear_kernel_matches_closed_form(self):
        # alpha at centered Greville points reproduces g(x, y) = y - 1/2,
        # whose normalized density is e^y / (e - 1)
        basis = build_basis(6)
        t = basis.knots
        greville = (t[1:-3] + t[2:-2] + t[3:-1]) / 3.0
        item = ItemModel(
            name="lin", kind=CONTINUOUS, factor="slowness", basis=basis,
            alpha=greville - 0.5, coef=np.zeros((6, 6)),
        )
        ys = np.linspace(0.0, 1.0, 17)
        for x in (0.1, 0.6):
            dens = continuous_density(item, x, QUAD)
            assert_allclose(dens(ys), np.exp(ys) / (np.e - 1.0), atol=1e-8)

    def test_invariant_to_x_only_kernel_shifts(self):
        # adding a constant row pattern to B adds a pure function of x,
        # which the normalizer must absorb exactly
        rng = np.random.default_rng(32)
        item = random_feasible(make_item(CONTINUOUS, k=5), rng)
        shifted = ItemModel(
            name=item.name, kind=item.kind, factor=item.factor, basis=item.basis,
            alpha=item.alpha, coef=item.coef + np.outer(np.ones(5), rng.normal(size=5)),
        )
        ys = np.linspace(0.0, 1.0, 9)
        for x in (0.0, 0.25, 0.8):
            assert_allclose(
                continuous_density(item, x, QUAD)(ys),
                continuous_density(shifted, x, QUAD)(ys),
                atol=1e-12,
            )

    def test_rejects_discrete_item(self):
        with pytest.raises(ConfigurationError):
            continuous_density(make_item(DISCRETE, n_categories=2), 0.5, QUAD)


class TestDiscreteIrf:
    def test_zero_coefficients_give_equal_categories(self):
        item = make_item(DISCRETE, n_categories=3)
        assert_allclose(discrete_irf(item, 0.42), np.full(3, 1.0 / 3.0))

    def test_dichotomous_log3_intercept(self):
        item = make_item(DISCRETE, n_categories=2)
        item = ItemModel(
            name=item.name, kind=DISCRETE, factor=item.factor, basis=item.basis,
            alpha=np.array([np.log(3.0)]), coef=np.zeros((1, 5)), n_categories=2,
        )
        for x in (0.0, 0.5, 1.0):
            assert_allclose(discrete_irf(item, x), [0.25, 0.75], atol=1e-14)

    def test_random_probabilities_sum_to_one(self):
        rng = np.random.default_rng(41)
        for _ in range(20):
            item = random_feasible(make_item(DISCRETE, k=6, n_categories=5), rng)
            p = discrete_irf(item, rng.random())
            assert p.min() > 0.0
            assert abs(p.sum() - 1.0) < 1e-14

    def test_rejects_continuous_item(self):
        with pytest.raises(ConfigurationError):
            discrete_irf(make_item(CONTINUOUS), 0.5)


class TestEqualityConstraints:
    def test_origin_is_feasible(self):
        for item in (make_item(CONTINUOUS), make_item(DISCRETE, n_categories=3)):
            cons = equality_constraints(item)
            assert_allclose(cons.A @ item.pack(), cons.b, atol=0)

    def test_continuous_row_count_before_reduction(self):
        item = make_item(CONTINUOUS, k=4)
        cons = equality_constraints(item)
        assert cons.A.shape == (1 + 4 + 4, item.n_coef)

    def test_bernstein_alpha_row(self):
        item = make_item(CONTINUOUS, k=4)
        row = equality_constraints(item, y0=0.5).A[0]
        assert_allclose(row[:4], [0.125, 0.375, 0.375, 0.125], atol=1e-15)
        assert_allclose(row[4:], 0.0, atol=0)

    def test_reduced_rows_have_full_rank(self):
        for item in (
            make_item(CONTINUOUS, k=5),
            make_item(DISCRETE, k=5, n_categories=4),
        ):
            reduced = equality_constraints(item).independent_rows()
            assert np.linalg.matrix_rank(reduced.A) == reduced.A.shape[0]

    def test_continuous_system_has_one_redundancy(self):
        item = make_item(CONTINUOUS, k=6)
        cons = equality_constraints(item)
        # the alpha row is independent; the two interaction blocks share
        # the row/column through (y0, x0), losing exactly one rank
        assert np.linalg.matrix_rank(cons.A) == cons.A.shape[0] - 1

    def test_feasible_points_satisfy_side_conditions(self):
        rng = np.random.default_rng(51)
        item = random_feasible(make_item(CONTINUOUS, k=6), rng, x0=0.3, y0=0.7)
        psi0 = item.basis.evaluate(0.7)
        phi0 = item.basis.evaluate(0.3)
        assert abs(psi0 @ item.alpha) < 1e-8
        assert_allclose(item.coef @ phi0, 0.0, atol=1e-8)
        assert_allclose(item.coef.T @ psi0, 0.0, atol=1e-8)


def mixed_differences_by_loops(item):
    """Forward differences of B over both axes, computed by explicit loops."""
    B = item.coef
    L, K = B.shape
    if item.kind == CONTINUOUS:
        vals = []
        for k in range(K - 1):
            for l in range(L - 1):
                vals.append(
                    (B[l + 1, k + 1] - B[l, k + 1]) - (B[l + 1, k] - B[l, k])
                )
        return np.array(vals)
    rows = np.vstack([np.zeros(K), B])  # structural reference category row
    vals = []
    for k in range(K - 1):
        for a in range(1, rows.shape[0]):
            vals.append(
                (rows[a, k + 1] - rows[a - 1, k + 1]) - (rows[a, k] - rows[a - 1, k])
            )
    return np.array(vals)


class TestMonotonicityConstraints:
    def test_zero_interaction_sits_on_the_boundary(self):
        item = make_item(CONTINUOUS, monotone=True)
        G = monotonicity_constraints(item)
        assert_allclose(G @ item.pack(), 0.0, atol=0)

    def test_row_counts(self):
        assert monotonicity_constraints(make_item(CONTINUOUS, k=5)).shape[0] == 16
        assert monotonicity_constraints(
            make_item(DISCRETE, k=5, n_categories=4)
        ).shape[0] == 12

    def test_dichotomous_reduces_to_forward_differences(self):
        item = make_item(DISCRETE, k=6, n_categories=2)
        beta = np.array([0.0, 0.2, 0.5, 0.9, 1.4, 2.0])
        item = item.with_packed(np.concatenate([item.alpha, beta]))
        slack = monotonicity_constraints(item) @ item.pack()
        assert_allclose(slack, np.diff(beta), atol=1e-12)
        assert slack.min() > 0.0

    def test_corner_violation_is_caught(self):
        item = make_item(CONTINUOUS, k=4)
        B = np.zeros((4, 4))
        B[0, 1] = 1.0  # lone off-diagonal bump makes one mixed difference negative
        item = item.with_packed(np.concatenate([item.alpha, B.ravel(order="F")]))
        slack = monotonicity_constraints(item) @ item.pack()
        assert slack.min() < 0.0

    def test_matches_loop_stencil(self):
        rng = np.random.default_rng(61)
        for item in (
            make_item(CONTINUOUS, k=5),
            make_item(DISCRETE, k=6, n_categories=3),
        ):
            theta = rng.normal(size=item.n_coef)
            item = item.with_packed(theta)
            slack = monotonicity_constraints(item) @ item.pack()
            assert_allclose(np.sort(slack), np.sort(mixed_differences_by_loops(item)), atol=1e-12)

    def test_feasible_interaction_gives_likelihood_ratio_monotonicity(self):
        # a doubly increasing coefficient sheet keeps every 2x2 density
        # determinant nonnegative
        basis = build_basis(5)
        u = np.linspace(0.0, 1.0, 5)
        item = ItemModel(
            name="mono", kind=CONTINUOUS, factor="slowness", basis=basis,
            alpha=np.zeros(5), coef=1.5 * np.outer(u - u[2], u - u[2]),
            monotone=True,
        )
        assert (monotonicity_constraints(item) @ item.pack()).min() >= -1e-12
        xs = np.linspace(0.0, 1.0, 7)
        ys = np.linspace(0.0, 1.0, 7)
        dens = np.array([continuous_density(item, x, QUAD)(ys) for x in xs])
        for i in range(6):
            for j in range(6):
                det = dens[i + 1, j + 1] * dens[i, j] - dens[i + 1, j] * dens[i, j + 1]
                assert det >= -1e-8


def penalty_by_loops(item, weight):
    """Naive second-difference roughness sum."""
    total = 0.0
    if item.kind == CONTINUOUS:
        a = item.alpha
        for l in range(a.size - 2):
            total += (a[l] - 2 * a[l + 1] + a[l + 2]) ** 2
    B = item.coef
    L, K = B.shape
    for k in range(K):  # down each column (response direction)
        if item.kind == CONTINUOUS:
            for l in range(L - 2):
                total += (B[l, k] - 2 * B[l + 1, k] + B[l + 2, k]) ** 2
    for l in range(L):  # along each row (latent direction)
        for k in range(K - 2):
            total += (B[l, k] - 2 * B[l, k + 1] + B[l, k + 2]) ** 2
    return 0.5 * weight * total


class TestItemPenalty:
    def test_zero_coefficients_have_zero_penalty(self):
        value, grad, hess = item_penalty(make_item(CONTINUOUS), 2.0)
        assert value == 0.0
        assert_allclose(grad, 0.0, atol=0)
        eigs = np.linalg.eigvalsh(hess)
        assert eigs.min() > -1e-10

    def test_affine_alpha_is_free(self):
        item = make_item(CONTINUOUS, k=6)
        alpha = 0.3 - 1.2 * np.arange(6)
        item = item.with_packed(np.concatenate([alpha, np.zeros(36)]))
        assert item_penalty(item, 5.0)[0] < 1e-12

    def test_matches_naive_roughness_sum(self):
        rng = np.random.default_rng(71)
        for item in (
            make_item(CONTINUOUS, k=6),
            make_item(DISCRETE, k=5, n_categories=4),
        ):
            item = item.with_packed(rng.normal(size=item.n_coef))
            value = item_penalty(item, 0.7)[0]
            assert abs(value - penalty_by_loops(item, 0.7)) < 1e-10

    def test_discrete_intercepts_unpenalized(self):
        item = make_item(DISCRETE, k=5, n_categories=3)
        item = item.with_packed(
            np.concatenate([np.array([4.0, -3.0]), np.zeros(10)])
        )
        assert item_penalty(item, 9.0)[0] == 0.0

    def test_gradient_matches_central_differences(self):
        rng = np.random.default_rng(72)
        item = make_item(CONTINUOUS, k=5).with_packed(rng.normal(size=30))
        value, grad, _ = item_penalty(item, 1.3)
        h = 1e-6
        for i in rng.choice(30, size=10, replace=False):
            theta = item.pack()
            up, dn = theta.copy(), theta.copy()
            up[i] += h
            dn[i] -= h
            fd = (
                item_penalty(item.with_packed(up), 1.3)[0]
                - item_penalty(item.with_packed(dn), 1.3)[0]
            ) / (2 * h)
            denom = max(abs(grad[i]), 1e-8)
            assert abs(fd - grad[i]) / denom < 1e-6

    def test_nonpositive_weight_rejected(self):
        for bad in (0.0, -1.0):
            with pytest.raises(ConfigurationError):
                item_penalty(make_item(CONTINUOUS), bad)

    def test_hessian_constant_and_psd(self):
        rng = np.random.default_rng(73)
        item = make_item(DISCRETE, k=5, n_categories=3)
        h0 = item_penalty(item, 2.0)[2]
        h1 = item_penalty(item.with_packed(rng.normal(size=item.n_coef)), 2.0)[2]
        assert_allclose(h0, h1, atol=0)
        assert np.linalg.eigvalsh(h0).min() > -1e-10
        assert_allclose(h0, 2.0 * penalty_matrix(item), atol=0)


class TestItemModel:
    @settings(max_examples=50, deadline=None)
    @given(st.integers(min_value=4, max_value=9), st.integers(min_value=0, max_value=2**32 - 1))
    def test_pack_round_trip(self, k, seed):
        rng = np.random.default_rng(seed)
        item = make_item(CONTINUOUS, k=k)
        theta = rng.normal(size=item.n_coef)
        assert_allclose(item.with_packed(theta).pack(), theta, atol=0)

    def test_bad_category_codes_rejected(self):
        item = make_item(DISCRETE, n_categories=3)
        for bad in ([3], [-1], [0.5]):
            with pytest.raises(DomainError):
                item.response_design(bad)

    def test_blank_item_shape_validation(self):
        with pytest.raises(ConfigurationError):
            blank_item("x", DISCRETE, "ability", build_basis(5), n_categories=1)
        with pytest.raises(ConfigurationError):
            blank_item("x", "weird", "ability", build_basis(5))
