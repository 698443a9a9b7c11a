"""EM fitting: ascent, fixed points, constraint contracts, determinism.

The no-structure example uses a frozen simulated data set (uniform
continuous responses, fair-coin discrete responses); the subproblem drift
example is checked against a hand-rolled one-parameter Newton recursion.
"""

import numpy as np
import pytest
from numpy.testing import assert_allclose

from splinefa.data import ColumnInfo
from splinefa.estimation import (
    FitConfig,
    em_fit,
    solve_copula_subproblem,
    solve_item_subproblem,
)
from splinefa.exceptions import ConfigurationError
from splinefa.latent import copula_density, eta_squared, independence_copula
from splinefa.likelihood import PenaltyWeights, build_model
from splinefa.measurement import (
    blank_item,
    continuous_density,
    discrete_irf,
    equality_constraints,
    monotonicity_constraints,
)
from splinefa.numerics import build_basis, gauss_legendre_unit
from splinefa.simulate import default_truth, simulate

DENSE = gauss_legendre_unit(41)


def flat_battery():
    return [
        ColumnInfo("a_rt", "continuous", "slowness", monotone=True),
        ColumnInfo("b_rt", "continuous", "slowness", monotone=True),
        ColumnInfo("a", "discrete", "ability", n_categories=2, monotone=True),
        ColumnInfo("b", "discrete", "ability", n_categories=2, monotone=True),
    ]


def flat_data(seed, n=500):
    rng = np.random.default_rng(seed)
    return np.column_stack([
        rng.random(n),
        rng.random(n),
        (rng.random(n) < 0.5).astype(float),
        (rng.random(n) < 0.5).astype(float),
    ])


def sup_distance_from_flat(model):
    """Worst relative deviation of any fitted conditional from uniformity."""
    worst = 0.0
    xs = np.linspace(0.05, 0.95, 19)
    ys = np.linspace(0.0, 1.0, 21)
    for item in model.items:
        for x in xs:
            if item.kind == "continuous":
                d = continuous_density(item, x, DENSE)(ys)
                worst = max(worst, float(np.max(np.abs(d - 1.0))))
            else:
                p = discrete_irf(item, x)
                worst = max(worst, float(np.max(np.abs(p - 0.5) / 0.5)))
    return worst


def check_feasibility(model, tol=1e-8):
    for item in model.items:
        cons = equality_constraints(item)
        assert np.abs(cons.A @ item.pack() - cons.b).max() < tol, item.name
        if item.monotone:
            slack = monotonicity_constraints(item) @ item.pack()
            assert slack.min() > -tol, item.name
    xi = model.copula.xi
    kappa = model.copula.kappa
    assert np.abs(xi @ kappa - 1.0).max() < tol
    assert np.abs(xi.T @ kappa - 1.0).max() < tol
    assert xi.min() > -1e-10


def structured_fit(seed=3, n=400):
    truth = default_truth(n_pairs=3, rho=0.5)
    data, _ = simulate(truth, n, seed=seed)
    model = build_model(data.columns, basis_size=5, quadrature_size=11)
    w = PenaltyWeights(0.05, 0.05, 0.05)
    config = FitConfig(max_em_iterations=100)
    return em_fit(model, data.values, w, config), data, w, config


class TestFitConfig:
    def test_validation(self):
        with pytest.raises(ConfigurationError):
            FitConfig(em_tolerance=0.0)
        with pytest.raises(ConfigurationError):
            FitConfig(qp_tolerance=-1e-9)
        with pytest.raises(ConfigurationError):
            FitConfig(max_em_iterations=0)
        with pytest.raises(ConfigurationError):
            FitConfig(mstep_steps=0)
        with pytest.raises(ConfigurationError):
            FitConfig(x0=1.2)


class TestItemSubproblem:
    def test_optimal_entry_is_a_fixed_point(self):
        rng = np.random.default_rng(21)
        item = blank_item("it", "continuous", "slowness", build_basis(5))
        quad = gauss_legendre_unit(9)
        y = rng.random(40)
        W = rng.random((40, 9))
        W /= W.sum(axis=1, keepdims=True)
        first = solve_item_subproblem(item, W, y, 0.1, quad, max_steps=80)
        again = solve_item_subproblem(first, W, y, 0.1, quad, max_steps=80)
        assert np.abs(again.pack() - first.pack()).max() < 1e-8

    def test_all_ones_drift_matches_newton_oracle(self):
        # single-node weights and all-1 responses push the log-odds at that
        # node along the one-parameter Newton recursion a -> a + 1 + e^(-a);
        # the heavy curvature penalty pins every other direction
        item = blank_item("it", "discrete", "ability", build_basis(4), n_categories=2)
        quad = gauss_legendre_unit(9)
        y = np.ones(30)
        W = np.zeros((30, 9))
        W[:, 5] = 1.0
        phi_star = item.basis.evaluate(quad.nodes[5])

        def oracle(steps):
            a = 0.0
            for _ in range(steps):
                a += 1.0 + np.exp(-a)
            return a

        last = 0.0
        for steps in (1, 2, 5):
            out = solve_item_subproblem(item, W, y, 1e6, quad, max_steps=steps)
            eta = float(out.alpha[0] + out.coef[0] @ phi_star)
            assert abs(eta - oracle(steps)) < 1e-4
            assert eta > last  # drifts upward as long as steps allow
            last = eta

    def test_objective_increases_from_zero_start(self):
        from splinefa.likelihood import (
            FactorModel,
            ModelTables,
            item_estep_stats,
            item_qvalue,
        )
        from splinefa.estimation import _indep_for
        from splinefa.measurement import item_penalty

        rng = np.random.default_rng(22)
        item = blank_item("it", "discrete", "ability", build_basis(4), n_categories=2)
        quad = gauss_legendre_unit(9)
        y = np.ones(30)
        W = np.zeros((30, 9))
        W[:, 5] = 1.0
        out = solve_item_subproblem(item, W, y, 1e-3, quad, max_steps=6)
        stub = FactorModel(items=[item], copula=_indep_for(item), quad=quad)
        tables = ModelTables(stub, y.reshape(-1, 1))
        stats = item_estep_stats(item, tables, 0, W)

        def qobj(candidate):
            value = item_qvalue(candidate, stats, tables.phi_nodes, tables.psi_quad, quad)
            return value - 30 * item_penalty(candidate, 1e-3)[0]

        assert qobj(out) > qobj(item)

    def test_monotone_item_respects_inequalities(self):
        rng = np.random.default_rng(23)
        item = blank_item(
            "it", "continuous", "slowness", build_basis(5), monotone=True
        )
        quad = gauss_legendre_unit(9)
        # weights tying large responses to high nodes invite a steep fit
        y = np.sort(rng.random(60))
        W = np.zeros((60, 9))
        W[np.arange(60), np.minimum((y * 9).astype(int), 8)] = 1.0
        out = solve_item_subproblem(item, W, y, 1e-3, quad, max_steps=40)
        slack = monotonicity_constraints(out) @ out.pack()
        assert slack.min() > -1e-8
        cons = equality_constraints(out)
        assert np.abs(cons.A @ out.pack() - cons.b).max() < 1e-8
        assert np.any(out.coef != 0.0)


class TestCopulaSubproblem:
    def test_independence_is_a_fixed_point_under_tensor_weights(self):
        quad = gauss_legendre_unit(15)
        copula = independence_copula(build_basis(7))
        pooled = 200.0 * np.outer(quad.weights, quad.weights)
        out = solve_copula_subproblem(copula, pooled, 0.5, quad)
        assert_allclose(out.xi, 1.0, atol=1e-8)

    def test_diagonal_weights_raise_diagonal_mass(self):
        quad = gauss_legendre_unit(21)
        copula = independence_copula(build_basis(7))
        pooled = 100.0 * np.diag(quad.weights)
        out = solve_copula_subproblem(copula, pooled, 1e-2, quad)
        diag_mass = float(quad.weights @ copula_density(out, quad.nodes, quad.nodes))
        assert diag_mass > 1.0

    def test_returned_copula_is_feasible(self):
        rng = np.random.default_rng(24)
        quad = gauss_legendre_unit(15)
        copula = independence_copula(build_basis(6))
        pooled = rng.random((15, 15))
        pooled *= 80.0 / pooled.sum()
        out = solve_copula_subproblem(copula, pooled, 1e-2, quad)
        assert np.abs(out.xi @ out.kappa - 1.0).max() < 1e-8
        assert np.abs(out.xi.T @ out.kappa - 1.0).max() < 1e-8
        assert out.xi.min() > -1e-10


class TestEmFit:
    def test_no_structure_data_yields_flat_fit(self):
        # frozen draw: at n = 500 the unpenalized intercepts and the
        # curvature-free tilt direction track sampling noise, so the sup
        # criterion is a property of the realized sample; this seed has
        # comfortable margin (0.04 against the 0.1 bound)
        values = flat_data(seed=10)
        model = build_model(flat_battery(), basis_size=7, quadrature_size=15)
        fit = em_fit(model, values, PenaltyWeights(1.0, 1.0, 1.0))
        assert fit.converged
        assert sup_distance_from_flat(fit.model) < 0.1
        assert eta_squared(fit.model.copula, fit.model.quad) < 0.05
        check_feasibility(fit.model)

    def test_trace_monotone_and_convergent_on_structured_data(self):
        fit, _, _, config = structured_fit()
        assert fit.converged
        assert np.all(np.diff(fit.trace) > -1e-8)
        assert abs(fit.trace[-1] - fit.trace[-2]) < config.em_tolerance
        assert fit.n_iterations == fit.trace.size - 1
        check_feasibility(fit.model)

    def test_restart_at_optimum_converges_immediately(self):
        fit, data, w, config = structured_fit()
        again = em_fit(fit.model, data.values, w, config)
        assert again.converged
        assert again.n_iterations <= 5
        assert np.all(np.diff(again.trace) < config.em_tolerance)

    def test_bit_identical_reruns(self):
        first, data, w, config = structured_fit()
        second = em_fit(
            build_model(data.columns, basis_size=5, quadrature_size=11),
            data.values,
            w,
            config,
        )
        assert np.array_equal(first.trace, second.trace)
        for a, b in zip(first.model.items, second.model.items):
            assert np.array_equal(a.pack(), b.pack())
        assert np.array_equal(first.model.copula.xi, second.model.copula.xi)

    def test_copula_freeze_option(self):
        values = flat_data(seed=4, n=150)
        model = build_model(flat_battery(), basis_size=5, quadrature_size=9)
        fit = em_fit(
            model,
            values,
            PenaltyWeights(1.0, 1.0, 1.0),
            FitConfig(update_copula=False, max_em_iterations=20),
        )
        assert_allclose(fit.model.copula.xi, 1.0, atol=0)

    def test_multiple_mstep_passes_keep_ascent(self):
        truth = default_truth(n_pairs=3, rho=0.5)
        data, _ = simulate(truth, 250, seed=6)
        model = build_model(data.columns, basis_size=5, quadrature_size=9)
        fit = em_fit(
            model,
            data.values,
            PenaltyWeights(0.05, 0.05, 0.05),
            FitConfig(mstep_steps=3, max_em_iterations=60),
        )
        assert np.all(np.diff(fit.trace) > -1e-8)

    def test_empty_data_rejected(self):
        model = build_model(flat_battery(), basis_size=5, quadrature_size=9)
        with pytest.raises(ConfigurationError):
            em_fit(model, np.zeros((0, 4)), PenaltyWeights(1.0, 1.0, 1.0))
