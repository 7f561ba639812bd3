import numpy as np
import pytest

from eslasso.features import DesignMatrix
from eslasso.quantile import (
    QuantileConvergenceError,
    QuantileFit,
    check_loss,
    fit_penalized_quantile,
    nu_max,
    predict_quantile,
    quantile_certificate,
    quantile_objective,
)

from oracles import lp_quantile_oracle


def make_design(rng, n, p):
    values = np.column_stack([np.ones(n), rng.normal(size=(n, p - 1))]) if p > 1 \
        else np.ones((n, 1))
    return DesignMatrix(values)


class TestCheckLoss:
    def test_median_half_absolute(self):
        assert check_loss(0.5, 2.0) == 1.0

    def test_tail_level(self):
        assert check_loss(0.025, -1.0) == pytest.approx(0.975)

    def test_zero_residual(self):
        for tau in (0.025, 0.5, 0.9):
            assert check_loss(tau, 0.0) == 0.0

    def test_nonnegative_and_slopes(self, rng):
        r = rng.normal(size=100)
        loss = check_loss(0.3, r)
        assert np.all(loss >= 0)
        np.testing.assert_allclose(loss[r > 0], 0.3 * r[r > 0])
        np.testing.assert_allclose(loss[r < 0], -0.7 * r[r < 0])

    def test_bad_tau(self):
        with pytest.raises(ValueError):
            check_loss(1.0, 0.5)


class TestFit:
    def test_constant_response_perfect_fit(self, rng):
        X = make_design(rng, 40, 3)
        y = np.full(40, 2.5)
        fit = fit_penalized_quantile(X, y, 0.3, 0.0)
        assert fit.objective == pytest.approx(0.0, abs=1e-7)
        assert fit.coefficients[0] == pytest.approx(2.5, abs=1e-6)
        np.testing.assert_allclose(fit.coefficients[1:], 0.0, atol=1e-6)

    def test_full_shrinkage_at_nu_max(self, rng):
        X = make_design(rng, 60, 4)
        y = rng.normal(size=60) + 1.0
        bound = nu_max(X, y, 0.25)
        fit = fit_penalized_quantile(X, y, 0.25, bound * 1.000001)
        np.testing.assert_array_equal(fit.coefficients[1:], np.zeros(3))
        heavy = fit_penalized_quantile(X, y, 0.25, bound * 3.0)
        np.testing.assert_array_equal(heavy.coefficients, np.zeros(4))

    def test_recovers_line_and_matches_lp(self, rng):
        n = 200
        x1 = rng.normal(size=n)
        X = DesignMatrix(np.column_stack([np.ones(n), x1]))
        y = 1.0 + 2.0 * x1 + rng.normal(size=n)
        fit = fit_penalized_quantile(X, y, 0.5, 0.0)
        assert np.max(np.abs(fit.coefficients - np.array([1.0, 2.0]))) < 0.3
        _, lp_obj = lp_quantile_oracle(X.values, X.scales, y, 0.5, 0.0)
        assert fit.objective <= lp_obj + 1e-6
        assert fit.certificate <= 1e-4

    def test_oracle_equivalence_small_instances(self, rng):
        for _ in range(25):
            n = int(rng.integers(15, 51))
            p = int(rng.integers(1, 4))
            X = make_design(rng, n, p)
            y = X.values @ rng.normal(size=p) + rng.standard_t(4, size=n)
            tau = float(rng.choice([0.1, 0.5, 0.9]))
            nu = float(rng.choice([0.0, 0.2, 2.0]))
            fit = fit_penalized_quantile(X, y, tau, nu)
            _, lp_obj = lp_quantile_oracle(X.values, X.scales, y, tau, nu)
            assert fit.objective <= lp_obj + 1e-6

    def test_objective_field_recomputes(self, rng):
        X = make_design(rng, 80, 3)
        y = X.values @ np.array([0.5, 1.0, -1.0]) + rng.normal(size=80)
        fit = fit_penalized_quantile(X, y, 0.2, 0.7)
        recomputed = quantile_objective(fit.coefficients, X, y, 0.2, 0.7)
        assert fit.objective == pytest.approx(recomputed, rel=1e-8)

    def test_objective_path_nonincreasing(self, rng):
        X = make_design(rng, 100, 4)
        y = X.values @ rng.normal(size=4) + rng.normal(size=100)
        fit = fit_penalized_quantile(X, y, 0.1, 0.5)
        diffs = np.diff(fit.objective_path)
        assert np.all(diffs <= 1e-9 * (1.0 + np.abs(fit.objective_path[:-1])))

    def test_penalty_monotonicity(self, rng):
        X = make_design(rng, 80, 4)
        y = X.values @ rng.normal(size=4) + rng.normal(size=80)
        norms = []
        for nu in (0.1, 0.5, 2.0, 8.0):
            fit = fit_penalized_quantile(X, y, 0.3, nu)
            norms.append(np.sum(X.scales * np.abs(fit.coefficients)))
        for lighter, heavier in zip(norms, norms[1:]):
            assert heavier <= lighter + 1e-6

    def test_coverage_intercept_only(self, rng):
        n = 2000
        X = DesignMatrix(np.ones((n, 1)))
        y = rng.normal(size=n)
        for tau in (0.1, 0.5):
            fit = fit_penalized_quantile(X, y, tau, 0.0)
            frac = np.mean(y < fit.coefficients[0])
            assert abs(frac - tau) <= 2.0 / np.sqrt(n)

    def test_nonconvergence_carries_best_iterate(self, rng):
        X = make_design(rng, 120, 5)
        y = X.values @ rng.normal(size=5) + rng.normal(size=120)
        with pytest.raises(QuantileConvergenceError) as excinfo:
            fit_penalized_quantile(X, y, 0.1, 0.05, max_iter=3, lp_fallback=False)
        partial = excinfo.value.fit
        assert partial.converged is False
        assert partial.coefficients.shape == (5,)
        soft = fit_penalized_quantile(
            X, y, 0.1, 0.05, max_iter=3, lp_fallback=False, raise_on_failure=False
        )
        assert soft.converged is False

    def test_input_validation(self, rng):
        X = make_design(rng, 20, 2)
        y = rng.normal(size=20)
        with pytest.raises(ValueError):
            fit_penalized_quantile(X, y, 1.2, 0.0)
        with pytest.raises(ValueError):
            fit_penalized_quantile(X, y, 0.5, -1.0)
        bad = y.copy()
        bad[3] = np.nan
        with pytest.raises(ValueError):
            fit_penalized_quantile(X, bad, 0.5, 0.0)

    def test_warm_start_agrees_with_cold(self, rng):
        X = make_design(rng, 90, 4)
        y = X.values @ rng.normal(size=4) + rng.normal(size=90)
        cold = fit_penalized_quantile(X, y, 0.2, 1.0)
        warm = fit_penalized_quantile(
            X, y, 0.2, 1.0,
            coef0=fit_penalized_quantile(X, y, 0.2, 2.0).coefficients,
        )
        assert warm.objective == pytest.approx(cold.objective, rel=1e-6, abs=1e-8)


class TestCertificate:
    def test_zero_at_optimum(self, rng):
        X = make_design(rng, 50, 3)
        y = X.values @ rng.normal(size=3) + rng.normal(size=50)
        fit = fit_penalized_quantile(X, y, 0.3, 0.4)
        assert quantile_certificate(fit, X, y) <= fit.certificate + 1e-12

    def test_perturbation_strictly_positive(self, rng):
        X = make_design(rng, 50, 3)
        y = X.values @ rng.normal(size=3) + rng.normal(size=50)
        fit = fit_penalized_quantile(X, y, 0.3, 0.4)
        bumped = fit.coefficients.copy()
        bumped[1] += 0.1
        assert quantile_certificate((bumped, 0.3, 0.4), X, y) > 0.0

    def test_solver_certificate_within_budget(self, rng):
        n = 200
        x1 = rng.normal(size=n)
        X = DesignMatrix(np.column_stack([np.ones(n), x1]))
        y = 1.0 + 2.0 * x1 + rng.normal(size=n)
        fit = fit_penalized_quantile(X, y, 0.5, 0.0)
        assert fit.certificate <= 1e-4


class TestPredict:
    def test_zero_coefficients(self, rng):
        X = make_design(rng, 10, 3)
        fit = QuantileFit(np.zeros(3), 0.5, 0.0, 0.0, 0.0, 0)
        np.testing.assert_array_equal(predict_quantile(fit, X), np.zeros(10))

    def test_identity_rows_return_coefficients(self):
        fit = QuantileFit(np.array([1.5, -2.0, 0.5]), 0.5, 0.0, 0.0, 0.0, 0)
        preds = predict_quantile(fit, np.eye(3))
        np.testing.assert_allclose(preds, fit.coefficients)

    def test_dimension_mismatch(self, rng):
        fit = QuantileFit(np.zeros(3), 0.5, 0.0, 0.0, 0.0, 0)
        with pytest.raises(ValueError):
            predict_quantile(fit, rng.normal(size=(5, 4)))

    def test_noiseless_median_recovery(self, rng):
        n = 60
        x1 = rng.normal(size=n)
        X = DesignMatrix(np.column_stack([np.ones(n), x1]))
        y = 0.5 - 1.5 * x1
        fit = fit_penalized_quantile(X, y, 0.5, 0.0)
        np.testing.assert_allclose(predict_quantile(fit, X), y, atol=1e-6)


class TestSerialization:
    def test_json_roundtrip(self, rng):
        X = make_design(rng, 40, 3)
        y = X.values @ rng.normal(size=3) + rng.normal(size=40)
        fit = fit_penalized_quantile(X, y, 0.25, 0.3)
        back = QuantileFit.from_dict(fit.to_dict())
        np.testing.assert_allclose(back.coefficients, fit.coefficients)
        assert back.tau == fit.tau
        assert back.penalty == fit.penalty
        assert back.certificate == fit.certificate
