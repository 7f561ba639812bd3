import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from eslasso.es import (
    ESConvergenceError,
    ESFit,
    UnidentifiedCoordinateError,
    auxiliary_response,
    es_objective,
    fit_es_lasso,
    fit_es_least_squares,
    fit_es_path,
    kkt_certificate,
    lambda_grid,
    lambda_max,
    lemma3_gap,
    predict_es,
    soft_threshold,
)
from eslasso.features import DesignMatrix

from oracles import grid_zoom_es_oracle


def make_design(rng, n, p):
    return DesignMatrix(np.column_stack([np.ones(n), rng.normal(size=(n, p - 1))]))


class TestAuxiliaryResponse:
    def test_equality_leaves_quantile(self):
        aux = auxiliary_response(np.array([1.0]), np.array([1.0]), 0.1)
        assert aux.values[0] == 1.0

    def test_exceedance_amplified(self):
        aux = auxiliary_response(np.array([-2.0]), np.array([-1.0]), 0.25)
        assert aux.values[0] == pytest.approx(-5.0)

    def test_median_case(self):
        aux = auxiliary_response(np.array([0.0]), np.array([1.0]), 0.5)
        assert aux.values[0] == pytest.approx(-1.0)

    @given(
        y=st.floats(-50, 50),
        q=st.floats(-50, 50),
        tau=st.sampled_from([0.025, 0.1, 0.5, 0.9]),
    )
    def test_never_above_quantile(self, y, q, tau):
        aux = auxiliary_response(np.array([y]), np.array([q]), tau)
        assert aux.values[0] <= q
        if y >= q:
            assert aux.values[0] == q

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            auxiliary_response(np.zeros(3), np.zeros(4), 0.1)

    def test_csv_export(self, tmp_path, rng):
        aux = auxiliary_response(rng.normal(size=5), rng.normal(size=5), 0.1)
        out = tmp_path / "aux.csv"
        aux.to_csv(out)
        lines = out.read_text().strip().splitlines()
        assert lines[0] == "auxiliary,quantile"
        assert len(lines) == 6


class TestSoftThreshold:
    def test_positive(self):
        assert soft_threshold(3.0, 1.0) == 2.0

    def test_inside_band(self):
        assert soft_threshold(-0.5, 1.0) == 0.0

    def test_identity_at_zero(self, rng):
        z = rng.normal(size=20)
        np.testing.assert_array_equal(soft_threshold(z, 0.0), z)


class TestFitESLasso:
    def test_unpenalized_matches_ols(self, rng):
        X = make_design(rng, 50, 3)
        y = X.values @ np.array([1.0, -0.5, 2.0]) + rng.normal(size=50)
        aux = auxiliary_response(y, np.full(50, np.quantile(y, 0.1)), 0.1)
        fit = fit_es_lasso(X, aux, 0.0)
        ols, *_ = np.linalg.lstsq(X.values, aux.values, rcond=None)
        assert np.max(np.abs(fit.coefficients - ols)) < 1e-6

    def test_full_shrinkage_at_lambda_max(self, rng):
        X = make_design(rng, 60, 4)
        aux = auxiliary_response(rng.normal(size=60), rng.normal(size=60), 0.25)
        top = lambda_max(X, aux)
        fit = fit_es_lasso(X, aux, top * 1.0000001)
        np.testing.assert_array_equal(fit.coefficients, np.zeros(4))
        assert kkt_certificate(fit, X, aux) == 0.0

    def test_orthogonal_design_closed_form(self, rng):
        n = 64
        q, _ = np.linalg.qr(rng.normal(size=(n, 3)))
        values = q * np.sqrt(n)  # orthogonal columns with unit mean square
        X = DesignMatrix(values)
        y = values @ np.array([1.0, 0.05, -0.6]) + 0.1 * rng.normal(size=n)
        aux = auxiliary_response(y, y - 1.0, 0.5)  # no exceedances: aux = y - 1
        lam = 0.08
        fit = fit_es_lasso(X, aux, lam)
        col_sq = np.sum(values**2, axis=0)
        closed = np.array([
            soft_threshold(values[:, i] @ aux.values, lam * X.scales[i] * n / 2.0)
            / col_sq[i]
            for i in range(3)
        ])
        assert np.max(np.abs(fit.coefficients - closed)) < 1e-8

    def test_objective_beats_grid_oracle(self, rng):
        for _ in range(10):
            n = int(rng.integers(8, 21))
            p = int(rng.integers(1, 4))
            X = make_design(rng, n, p)
            y = X.values @ rng.normal(size=p) + rng.normal(size=n)
            aux = auxiliary_response(y, y - rng.uniform(0.5, 2.0), 0.25)
            lam = float(rng.uniform(0.01, 1.0))
            fit = fit_es_lasso(X, aux, lam)
            _, oracle_obj = grid_zoom_es_oracle(X.values, X.scales, aux.values, lam)
            assert fit.objective <= oracle_obj + 1e-6

    def test_zero_column_unpenalized_rejected(self, rng):
        values = np.column_stack([np.ones(10), np.zeros(10)])
        aux = auxiliary_response(rng.normal(size=10), rng.normal(size=10), 0.5)
        with pytest.raises(UnidentifiedCoordinateError):
            fit_es_lasso(DesignMatrix(values), aux, 0.0)

    def test_zero_column_pinned_when_penalized(self, rng):
        values = np.column_stack([np.ones(20), rng.normal(size=20), np.zeros(20)])
        aux = auxiliary_response(rng.normal(size=20), rng.normal(size=20), 0.5)
        fit = fit_es_lasso(DesignMatrix(values), aux, 0.1)
        assert fit.coefficients[2] == 0.0
        assert fit.converged

    def test_objective_field_recomputes(self, rng):
        X = make_design(rng, 40, 3)
        aux = auxiliary_response(rng.normal(size=40), rng.normal(size=40), 0.1)
        fit = fit_es_lasso(X, aux, 0.3)
        assert fit.objective == pytest.approx(
            es_objective(fit.coefficients, X, aux, 0.3), rel=1e-10
        )

    def test_objective_nonincreasing_per_cycle(self, rng):
        X = make_design(rng, 80, 5)
        y = X.values @ rng.normal(size=5) + rng.normal(size=80)
        aux = auxiliary_response(y, X.values @ rng.normal(size=5), 0.1)
        fit = fit_es_lasso(X, aux, 0.05)
        diffs = np.diff(fit.objective_path)
        assert np.all(diffs <= 1e-12 * (1.0 + np.abs(fit.objective_path[:-1])))

    def test_active_set(self, rng):
        X = make_design(rng, 50, 4)
        aux = auxiliary_response(rng.normal(size=50), rng.normal(size=50), 0.25)
        fit = fit_es_lasso(X, aux, lambda_max(X, aux) * 0.5)
        np.testing.assert_array_equal(fit.active_set, np.flatnonzero(fit.coefficients))

    def test_nonconvergence_carries_best_iterate(self, rng):
        X = make_design(rng, 60, 5)
        y = X.values @ rng.normal(size=5) + rng.normal(size=60)
        aux = auxiliary_response(y, X.values @ rng.normal(size=5), 0.2)
        with pytest.raises(ESConvergenceError) as excinfo:
            fit_es_lasso(X, aux, 0.01, max_iter=1)
        assert excinfo.value.fit.coefficients.shape == (5,)

    def test_path_warm_starts_do_not_hurt(self, rng):
        X = make_design(rng, 70, 4)
        y = X.values @ rng.normal(size=4) + rng.normal(size=70)
        aux = auxiliary_response(y, X.values @ rng.normal(size=4), 0.1)
        grid = lambda_grid(lambda_max(X, aux), n_points=12, ratio=1e-3)
        warm = fit_es_path(X, aux, grid, warm_starts=True)
        for lam, fit in zip(grid, warm):
            cold = fit_es_lasso(X, aux, float(lam))
            assert fit.objective <= cold.objective + 1e-8


class TestKKT:
    def test_converged_fit_within_budget(self, rng):
        X = make_design(rng, 60, 4)
        y = X.values @ rng.normal(size=4) + rng.normal(size=60)
        aux = auxiliary_response(y, X.values @ rng.normal(size=4), 0.1)
        fit = fit_es_lasso(X, aux, 0.2)
        assert fit.kkt_violation <= 1e-6 * (1.0 + np.max(np.abs(aux.values)))

    def test_perturbation_positive(self, rng):
        X = make_design(rng, 60, 4)
        aux = auxiliary_response(rng.normal(size=60), rng.normal(size=60), 0.25)
        fit = fit_es_lasso(X, aux, 0.1)
        bumped = fit.coefficients.copy()
        bumped[0] += 0.05
        assert kkt_certificate((bumped, 0.1), X, aux) > 0.0


class TestLeastSquaresRoute:
    def test_matches_lstsq_and_certifies(self, rng):
        X = make_design(rng, 50, 4)
        y = X.values @ rng.normal(size=4) + rng.normal(size=50)
        aux = auxiliary_response(y, X.values @ rng.normal(size=4), 0.1)
        fit = fit_es_least_squares(X, aux)
        ols, *_ = np.linalg.lstsq(X.values, aux.values, rcond=None)
        np.testing.assert_allclose(fit.coefficients, ols, atol=1e-8)
        assert fit.converged
        assert fit.kkt_violation <= 1e-6 * (1.0 + np.max(np.abs(aux.values)))


class TestLemma3:
    def test_identical_quantiles(self, rng):
        y = rng.normal(size=20)
        q = rng.normal(size=20)
        assert lemma3_gap(y, q, q, 0.1) == (0.0, 0.0)

    def test_random_instances_never_violate(self, rng):
        for tau in (0.025, 0.1, 0.5):
            for _ in range(200):
                n = int(rng.integers(1, 30))
                y = rng.normal(size=n) * 3
                q = rng.normal(size=n) * 2
                q_hat = rng.normal(size=n) * 2
                lhs, rhs = lemma3_gap(y, q, q_hat, tau)
                assert lhs <= rhs

    def test_hand_computed_single_point(self):
        # tau=0.5, Y=0, Q=1, Qhat=2: tilde = 1 + 2*(0-1) = -1,
        # hat = 2 + 2*(0-2) = -2, lhs = 1, rhs = 9 * 1
        lhs, rhs = lemma3_gap(np.array([0.0]), np.array([1.0]), np.array([2.0]), 0.5)
        assert lhs == pytest.approx(1.0)
        assert rhs == pytest.approx(9.0)
        assert lhs <= rhs


class TestPredict:
    def test_zero_coefficients(self, rng):
        fit = ESFit(np.zeros(3), 0.0, 0.0, 0.0, 0)
        np.testing.assert_array_equal(predict_es(fit, rng.normal(size=(7, 3))), np.zeros(7))

    def test_identity_rows(self):
        fit = ESFit(np.array([0.5, 1.0, -2.0]), 0.0, 0.0, 0.0, 0)
        np.testing.assert_allclose(predict_es(fit, np.eye(3)), fit.coefficients)

    def test_dimension_mismatch(self, rng):
        fit = ESFit(np.zeros(3), 0.0, 0.0, 0.0, 0)
        with pytest.raises(ValueError):
            predict_es(fit, rng.normal(size=(5, 2)))

    def test_recovers_noiseless_shortfall(self, rng):
        X = make_design(rng, 40, 3)
        gamma = np.array([0.2, -1.0, 0.4])
        aux = auxiliary_response(X.values @ gamma, X.values @ gamma, 0.1)
        fit = fit_es_lasso(X, aux, 0.0)
        np.testing.assert_allclose(predict_es(fit, X), X.values @ gamma, atol=1e-6)


class TestGridAndSerialization:
    def test_lambda_grid_shape(self):
        grid = lambda_grid(10.0)
        assert grid.size == 100
        assert grid[0] == 10.0
        assert grid[-1] == pytest.approx(10.0 * 1e-4)
        assert np.all(np.diff(grid) < 0)

    def test_json_roundtrip(self, rng):
        X = make_design(rng, 30, 3)
        aux = auxiliary_response(rng.normal(size=30), rng.normal(size=30), 0.25)
        fit = fit_es_lasso(X, aux, 0.2)
        back = ESFit.from_dict(fit.to_dict())
        np.testing.assert_allclose(back.coefficients, fit.coefficients)
        assert back.penalty == fit.penalty
        assert back.kkt_violation == fit.kkt_violation
