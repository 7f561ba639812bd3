"""Expected-shortfall LASSO: auxiliary response and weighted-L1 least squares.

The tail expectation of Y below its conditional tau-quantile is the
conditional mean of the auxiliary variable

    Yhat_t = Qhat_t + (1/tau) * 1{Y_t < Qhat_t} * (Y_t - Qhat_t),

so the shortfall coefficients solve a least-squares problem in Yhat.  The
penalized estimator minimizes

    (1/T) ||Yhat - X gamma||_2^2 + lambda * sum_i sigma_i |gamma_i|,

with sigma_i the empirical root mean square of column i; the intercept is
penalized with sigma = 1 like any other coordinate.  Fitting is cyclic
coordinate descent with exact scalar updates and a KKT stopping rule.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np

from .features import DesignMatrix


class ESConvergenceError(RuntimeError):
    """Coordinate descent failed to certify; carries the best iterate."""

    def __init__(self, message: str, fit: "ESFit"):
        super().__init__(message)
        self.fit = fit

    def __reduce__(self):
        return (type(self), (self.args[0], self.fit))


class UnidentifiedCoordinateError(ValueError):
    """A zero column cannot be fit without a penalty pinning it."""


@dataclass(frozen=True)
class AuxiliaryResponse:
    """Auxiliary shortfall response built from a response and quantile predictions."""

    values: np.ndarray
    tau: float
    source_quantiles: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        quantiles = np.asarray(self.source_quantiles, dtype=float)
        values.setflags(write=False)
        quantiles.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "source_quantiles", quantiles)

    def __len__(self) -> int:
        return self.values.shape[0]

    def to_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["auxiliary", "quantile"])
            for v, q in zip(self.values, self.source_quantiles):
                writer.writerow([repr(float(v)), repr(float(q))])


def auxiliary_response(Y, Q_hat, tau: float) -> AuxiliaryResponse:
    """Elementwise Qhat + (1/tau) 1{Y < Qhat} (Y - Qhat), strict inequality."""
    if not 0.0 < tau < 1.0:
        raise ValueError(f"quantile level must lie in (0, 1), got {tau}")
    y = np.asarray(Y, dtype=float)
    q = np.asarray(Q_hat, dtype=float)
    if y.shape != q.shape:
        raise ValueError(f"length mismatch: response {y.shape}, quantiles {q.shape}")
    values = q + (y < q) * (y - q) / tau
    return AuxiliaryResponse(values=values, tau=tau, source_quantiles=q)


def soft_threshold(z, t):
    """sign(z) * max(|z| - t, 0); the scalar LASSO update kernel."""
    z = np.asarray(z, dtype=float)
    out = np.sign(z) * np.maximum(np.abs(z) - t, 0.0)
    return out if out.ndim else float(out)


@dataclass
class ESFit:
    """Result of the penalized (or plain) least-squares shortfall fit."""

    coefficients: np.ndarray
    penalty: float
    objective: float
    kkt_violation: float
    iterations: int
    converged: bool = True
    objective_path: np.ndarray = field(default=None, repr=False)  # type: ignore[assignment]

    @property
    def active_set(self) -> np.ndarray:
        return np.flatnonzero(self.coefficients != 0.0)

    def predict(self, X_new) -> np.ndarray:
        return predict_es(self, X_new)

    def to_dict(self) -> dict:
        return {
            "coefficients": np.asarray(self.coefficients).tolist(),
            "penalty": self.penalty,
            "objective": self.objective,
            "kkt_violation": self.kkt_violation,
            "active_set": self.active_set.tolist(),
            "iterations": self.iterations,
            "converged": self.converged,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, payload: dict) -> "ESFit":
        return cls(
            coefficients=np.asarray(payload["coefficients"], dtype=float),
            penalty=float(payload["penalty"]),
            objective=float(payload["objective"]),
            kkt_violation=float(payload["kkt_violation"]),
            iterations=int(payload["iterations"]),
            converged=bool(payload["converged"]),
        )


def es_objective(coef, X, y_aux, lam: float) -> float:
    """(1/T)||Yhat - X gamma||^2 + lam * sum_i sigma_i |gamma_i|."""
    values, scales, y = _unpack(X, y_aux)
    r = y - values @ np.asarray(coef, dtype=float)
    return float(r @ r / values.shape[0] + lam * np.sum(scales * np.abs(coef)))


def kkt_certificate(fit, X, y_aux) -> float:
    """Max KKT violation: |g_i + lam sigma_i sign| on the active set,
    max(|g_i| - lam sigma_i, 0) off it, with g = (2/T) X'(X gamma - Yhat)."""
    if isinstance(fit, ESFit):
        coef, lam = fit.coefficients, fit.penalty
    else:
        coef, lam = fit
    values, scales, y = _unpack(X, y_aux)
    coef = np.asarray(coef, dtype=float)
    g = 2.0 * values.T @ (values @ coef - y) / values.shape[0]
    thresh = lam * scales
    active = coef != 0.0
    viol = np.where(
        active,
        np.abs(g + thresh * np.sign(coef)),
        np.maximum(np.abs(g) - thresh, 0.0),
    )
    return float(viol.max())


def lambda_max(X, y_aux) -> float:
    """Smallest penalty at which the all-zero coefficient vector is optimal."""
    values, scales, y = _unpack(X, y_aux)
    g = 2.0 * np.abs(values.T @ y) / values.shape[0]
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(scales > 0.0, g / scales, 0.0)
    return float(ratio.max())


def lambda_grid(lam_max: float, n_points: int = 100, ratio: float = 1e-4) -> np.ndarray:
    """Geometric grid from lam_max down to lam_max * ratio, descending."""
    if lam_max <= 0:
        raise ValueError("lambda_max must be positive to build a grid")
    if n_points < 1:
        raise ValueError("grid needs at least one point")
    if n_points == 1:
        return np.array([lam_max])
    return lam_max * ratio ** (np.arange(n_points) / (n_points - 1))


def fit_es_lasso(
    X,
    y_aux,
    lam: float,
    *,
    tol: float = None,
    max_iter: int = 50000,
    coef0=None,
    raise_on_failure: bool = True,
) -> ESFit:
    """Cyclic coordinate descent on the penalized shortfall objective.

    Each coordinate update is the exact scalar minimizer: the partial
    residual correlation soft-thresholded at lam * sigma_i * T / (2 sum_t
    X_it^2) and scaled by the column mean square.  Stops when the max
    coordinate change and the KKT violation both fall under tolerance.
    """
    values, scales, y = _unpack(X, y_aux)
    if lam < 0:
        raise ValueError(f"penalty must be nonnegative, got {lam}")
    n_rows, n_cols = values.shape
    gram = values.T @ values
    col_sq = np.diag(gram).copy()
    if lam == 0.0 and np.any(col_sq == 0.0):
        raise UnidentifiedCoordinateError(
            "zero column with zero penalty leaves a coordinate unidentified"
        )
    scale = 1.0 + float(np.max(np.abs(y))) if y.size else 1.0
    if tol is None:
        tol = 1e-6 * scale

    coef = np.zeros(n_cols) if coef0 is None else np.asarray(coef0, dtype=float).copy()
    if coef.shape != (n_cols,):
        raise ValueError("warm start has the wrong dimension")
    xty = values.T @ y
    yty = float(y @ y)
    thresh = lam * scales * n_rows / 2.0
    live = np.flatnonzero(col_sq > 0.0)

    # Covariance-mode coordinate descent: the running gradient
    # g = X'X coef - X'y makes each exact scalar update O(p), with a
    # periodic exact refresh against floating-point drift.
    grad = gram @ coef - xty

    def objective_now() -> float:
        quad = yty - 2.0 * float(xty @ coef) + float(coef @ (gram @ coef))
        return max(quad, 0.0) / n_rows + lam * float(np.sum(scales * np.abs(coef)))

    objective_path = [objective_now()]
    iterations = 0
    converged = False
    live_list = [int(i) for i in live]
    while iterations < max_iter:
        max_change = 0.0
        for i in live_list:
            old = coef[i]
            rho = old * col_sq[i] - grad[i]
            mag = abs(rho) - thresh[i]
            new = 0.0 if mag <= 0.0 else (mag if rho > 0.0 else -mag) / col_sq[i]
            if new != old:
                grad += gram[:, i] * (new - old)
                coef[i] = new
                change = abs(new - old)
                if change > max_change:
                    max_change = change
        iterations += 1
        objective_path.append(objective_now())
        if iterations % 128 == 0:
            grad = gram @ coef - xty
        if max_change < 1e-8 * (1.0 + float(np.max(np.abs(coef)))):
            grad = gram @ coef - xty
            if kkt_certificate((coef, lam), X, y_aux) <= tol:
                converged = True
                break

    fit = ESFit(
        coefficients=coef,
        penalty=lam,
        objective=es_objective(coef, X, y_aux, lam),
        kkt_violation=kkt_certificate((coef, lam), X, y_aux),
        iterations=iterations,
        converged=converged,
        objective_path=np.asarray(objective_path),
    )
    if not converged and raise_on_failure:
        raise ESConvergenceError(
            f"coordinate descent did not certify tolerance {tol:.3e} "
            f"(violation {fit.kkt_violation:.3e} after {iterations} cycles)",
            fit,
        )
    return fit


def fit_es_least_squares(X, y_aux, *, tol: float = None) -> ESFit:
    """Unpenalized shortfall fit by direct least squares.

    The exact solver for the lam = 0 case; iterative refinement keeps the
    gradient certificate tight even on badly conditioned designs, where
    coordinate descent would need prohibitively many cycles.
    """
    values, scales, y = _unpack(X, y_aux)
    scale = 1.0 + float(np.max(np.abs(y))) if y.size else 1.0
    if tol is None:
        tol = 1e-6 * scale
    coef, *_ = np.linalg.lstsq(values, y, rcond=None)
    for _ in range(3):
        if kkt_certificate((coef, 0.0), X, y_aux) <= 0.5 * tol:
            break
        delta, *_ = np.linalg.lstsq(values, y - values @ coef, rcond=None)
        coef = coef + delta
    viol = kkt_certificate((coef, 0.0), X, y_aux)
    return ESFit(
        coefficients=coef,
        penalty=0.0,
        objective=es_objective(coef, X, y_aux, 0.0),
        kkt_violation=viol,
        iterations=1,
        converged=viol <= tol,
    )


def fit_es_path(X, y_aux, lambdas, *, warm_starts: bool = True, **kwargs) -> list[ESFit]:
    """Fit a descending penalty grid, warm-starting each point from the last."""
    lambdas = np.asarray(lambdas, dtype=float)
    if np.any(np.diff(lambdas) > 0):
        raise ValueError("penalty grid must be sorted descending")
    fits = []
    coef0 = None
    for lam in lambdas:
        fit = fit_es_lasso(X, y_aux, float(lam), coef0=coef0, **kwargs)
        fits.append(fit)
        if warm_starts:
            coef0 = fit.coefficients
    return fits


def predict_es(fit: ESFit, X_new) -> np.ndarray:
    """Linear predictions X_new @ coefficients."""
    values = X_new.values if isinstance(X_new, DesignMatrix) else np.asarray(X_new, dtype=float)
    coef = np.asarray(fit.coefficients, dtype=float)
    if values.ndim != 2 or values.shape[1] != coef.shape[0]:
        raise ValueError(
            f"prediction matrix has shape {values.shape}, expected (*, {coef.shape[0]})"
        )
    return values @ coef


def lemma3_gap(Y, Q, Q_hat, tau: float) -> tuple[float, float]:
    """Squared auxiliary-response gap and its quantile-gap bound.

    lhs = (1/T)||Yhat - Ytilde||^2 built from the two quantile vectors,
    rhs = (1 + 1/tau)^2 (1/T)||Qhat - Q||^2; lhs <= rhs always, because
    the auxiliary transform is (1 + 1/tau)-Lipschitz in its quantile
    argument for every ordering of (y, q, q').
    """
    y = np.asarray(Y, dtype=float)
    q = np.asarray(Q, dtype=float)
    q_hat = np.asarray(Q_hat, dtype=float)
    tilde = auxiliary_response(y, q, tau).values
    hat = auxiliary_response(y, q_hat, tau).values
    n = y.shape[0]
    lhs = float(np.sum((hat - tilde) ** 2) / n)
    rhs = float((1.0 + 1.0 / tau) ** 2 * np.sum((q_hat - q) ** 2) / n)
    return lhs, rhs


def _unpack(X, y_aux):
    if isinstance(X, DesignMatrix):
        values, scales = X.values, X.scales
    else:
        values = np.asarray(X, dtype=float)
        from .features import column_scales

        scales = column_scales(values)
    y = y_aux.values if isinstance(y_aux, AuxiliaryResponse) else np.asarray(y_aux, dtype=float)
    if y.ndim != 1 or y.shape[0] != values.shape[0]:
        raise ValueError("auxiliary response length must match the design matrix")
    if not (np.all(np.isfinite(values)) and np.all(np.isfinite(y))):
        raise ValueError("inputs contain non-finite entries")
    return values, scales, y
