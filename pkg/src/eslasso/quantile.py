"""Weighted-L1 penalized quantile regression with a subgradient certificate.

The objective is

    sum_t rho_tau(Y_t - X_t'alpha) + nu * sum_i sigma_i |alpha_i|,

with rho_tau the check loss and sigma_i the empirical root mean square of
column i (the intercept has sigma = 1 and is penalized like any other
coordinate).  The solver smooths the check loss with a shrinking
half-width and runs a majorize-minimize proximal gradient scheme on each
smoothed problem, warm-starting across smoothing levels.  Convergence is
declared on the *unsmoothed* objective via an interval-subgradient
certificate, optionally after polishing the iterate onto the interpolated
observations.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse
from scipy.optimize import linprog

from .features import DesignMatrix


class QuantileConvergenceError(RuntimeError):
    """Solver failed to certify optimality; carries the best iterate found."""

    def __init__(self, message: str, fit: "QuantileFit"):
        super().__init__(message)
        self.fit = fit

    def __reduce__(self):
        return (type(self), (self.args[0], self.fit))


@dataclass
class QuantileFit:
    """Result of a penalized quantile regression fit."""

    coefficients: np.ndarray
    tau: float
    penalty: float
    objective: float
    certificate: float
    iterations: int
    converged: bool = True
    objective_path: np.ndarray = field(default=None, repr=False)  # type: ignore[assignment]

    def predict(self, X_new) -> np.ndarray:
        return predict_quantile(self, X_new)

    def to_dict(self) -> dict:
        return {
            "coefficients": np.asarray(self.coefficients).tolist(),
            "tau": self.tau,
            "penalty": self.penalty,
            "objective": self.objective,
            "certificate": self.certificate,
            "iterations": self.iterations,
            "converged": self.converged,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, payload: dict) -> "QuantileFit":
        return cls(
            coefficients=np.asarray(payload["coefficients"], dtype=float),
            tau=float(payload["tau"]),
            penalty=float(payload["penalty"]),
            objective=float(payload["objective"]),
            certificate=float(payload["certificate"]),
            iterations=int(payload["iterations"]),
            converged=bool(payload["converged"]),
        )


def check_loss(tau: float, residual):
    """Check (tick) loss rho_tau(r) = (tau - 1{r < 0}) * r.

    Nonnegative, zero at zero, slope tau for positive residuals and
    tau - 1 for negative ones.  Ties at r = 0 carry slope tau.
    """
    _validate_tau(tau)
    r = np.asarray(residual, dtype=float)
    out = (tau - (r < 0.0)) * r
    return out if out.ndim else float(out)


def quantile_objective(coef, X, y, tau: float, nu: float) -> float:
    """Unsmoothed penalized objective at a coefficient vector."""
    values, scales = _design(X)
    r = np.asarray(y, dtype=float) - values @ np.asarray(coef, dtype=float)
    return float(np.sum(check_loss(tau, r)) + nu * np.sum(scales * np.abs(coef)))


def quantile_certificate(fit, X, y, *, kink_tol: float = None, zero_tol: float = 0.0) -> float:
    """Max coordinate distance from 0 to the objective's subdifferential, / T.

    Residuals with |r| <= kink_tol are treated as sitting at the check-loss
    kink and contribute the interval-valued subgradient; coefficients with
    |coef| <= zero_tol contribute the interval [-nu*sigma_i, nu*sigma_i].
    Returns 0 exactly when 0 lies in every coordinate interval.
    """
    if isinstance(fit, QuantileFit):
        coef, tau, nu = fit.coefficients, fit.tau, fit.penalty
    else:
        coef, tau, nu = fit
    values, scales = _design(X)
    y = np.asarray(y, dtype=float)
    if kink_tol is None:
        kink_tol = 1e-8 * (1.0 + np.max(np.abs(y)))
    coef = np.asarray(coef, dtype=float)
    r = y - values @ coef
    at_kink = np.abs(r) <= kink_tol
    lo, hi = _loss_subgradient_interval(values, r, tau, at_kink)
    w = nu * scales
    active = np.abs(coef) > zero_tol
    sgn = np.sign(coef)
    lo = lo + np.where(active, w * sgn, -w)
    hi = hi + np.where(active, w * sgn, w)
    dist = np.maximum(0.0, np.maximum(lo, -hi))
    return float(dist.max() / values.shape[0])


def predict_quantile(fit: QuantileFit, X_new) -> np.ndarray:
    """Linear predictions X_new @ coefficients."""
    values = X_new.values if isinstance(X_new, DesignMatrix) else np.asarray(X_new, dtype=float)
    coef = np.asarray(fit.coefficients, dtype=float)
    if values.ndim != 2 or values.shape[1] != coef.shape[0]:
        raise ValueError(
            f"prediction matrix has shape {values.shape}, expected (*, {coef.shape[0]})"
        )
    return values @ coef


def nu_max(X, y, tau: float) -> float:
    """Smallest penalty at which the all-zero coefficient vector is optimal."""
    values, scales = _design(X)
    y = np.asarray(y, dtype=float)
    _validate_tau(tau)
    lo, hi = _loss_subgradient_interval(values, y, tau, y == 0.0)
    need = np.maximum(0.0, np.maximum(lo, -hi))
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(scales > 0.0, need / scales, 0.0)
    return float(ratio.max())


def fit_penalized_quantile(
    X,
    y,
    tau: float,
    nu: float,
    *,
    tol: float = None,
    max_iter: int = 10000,
    coef0=None,
    raise_on_failure: bool = True,
    lp_fallback: bool = True,
) -> QuantileFit:
    """Fit the weighted-L1 penalized quantile regression.

    Parameters
    ----------
    X : DesignMatrix (or plain 2-d array, scales computed on the fly)
    y : response vector
    tau : quantile level in (0, 1)
    nu : penalty level, >= 0
    tol : certificate tolerance; defaults to 1e-6 * (1 + max|y|)
    max_iter : total inner-iteration budget across smoothing levels
    coef0 : optional warm start
    raise_on_failure : raise QuantileConvergenceError on non-convergence
        instead of returning the best iterate flagged converged=False.
    lp_fallback : when the smoothing scheme exhausts its budget without
        certifying (near-degenerate vertices under heavy collinearity),
        re-solve the equivalent linear program once and keep the better
        iterate.
    """
    values, scales = _design(X)
    y = np.asarray(y, dtype=float)
    _validate_tau(tau)
    if nu < 0:
        raise ValueError(f"penalty must be nonnegative, got {nu}")
    if y.ndim != 1 or y.shape[0] != values.shape[0]:
        raise ValueError("response length must match the design matrix")
    if not np.all(np.isfinite(y)):
        raise ValueError("response contains non-finite entries")
    n_rows, n_cols = values.shape

    scale = 1.0 + float(np.max(np.abs(y))) if y.size else 1.0
    if tol is None:
        tol = 1e-6 * scale
    kink_tol = 1e-8 * scale
    weights = nu * scales

    warm = coef0 is not None
    coef = np.zeros(n_cols) if coef0 is None else np.asarray(coef0, dtype=float).copy()
    if coef.shape != (n_cols,):
        raise ValueError("warm start has the wrong dimension")

    # Smoothing half-widths shrink to below the kink-classification tolerance,
    # where the smoothed stationarity measure bounds the certificate.  The
    # per-coordinate certificate alone cannot prove optimality (kink-row
    # subgradients couple the coordinates), so every level is visited and
    # termination rests on the final level's stationarity.
    h_start = 0.02 * scale if warm else 0.2 * scale
    h_floor = kink_tol / 2.0
    h_levels = []
    h = h_start
    while h > h_floor:
        h_levels.append(h)
        h = h / 5.0
    h_levels.append(h_floor)

    objective_path = []
    iterations = 0
    grad_target = 0.3 * tol * n_rows

    col_sq = np.sum(values**2, axis=0)
    reached_floor = False
    zone_handoff = None
    for h in h_levels:
        if iterations >= max_iter:
            break
        at_floor = h <= h_floor
        coef, iterations, hit_target, zone_handoff = _solve_level(
            values, y, tau, weights, coef, h,
            grad_target=grad_target,
            phi_max=float(col_sq.max()) / (2.0 * h) + 1e-12,
            iterations=iterations,
            max_iter=max_iter,
            level_budget=max_iter if at_floor else min(150, max_iter),
            objective_path=objective_path,
            zone_init=zone_handoff,
        )
        if at_floor:
            reached_floor = hit_target

    certificate = quantile_certificate((coef, tau, nu), X, y, kink_tol=kink_tol)
    converged = reached_floor and certificate <= tol
    if not converged and lp_fallback:
        lp_coef = _lp_solve(values, scales, y, tau, nu)
        if lp_coef is not None:
            lp_obj = quantile_objective(lp_coef, X, y, tau, nu)
            lp_cert = quantile_certificate((lp_coef, tau, nu), X, y, kink_tol=kink_tol)
            if lp_obj <= quantile_objective(coef, X, y, tau, nu) and lp_cert <= tol:
                coef = lp_coef
                certificate = lp_cert
                converged = True
                objective_path.append(lp_obj)
    fit = QuantileFit(
        coefficients=coef,
        tau=tau,
        penalty=nu,
        objective=quantile_objective(coef, X, y, tau, nu),
        certificate=certificate,
        iterations=iterations,
        converged=converged,
        objective_path=np.asarray(objective_path),
    )
    if not converged and raise_on_failure:
        raise QuantileConvergenceError(
            f"quantile solver did not certify tolerance {tol:.3e} "
            f"(certificate {certificate:.3e} after {iterations} iterations)",
            fit,
        )
    return fit


# -- internals ---------------------------------------------------------------


def _validate_tau(tau: float):
    if not 0.0 < tau < 1.0:
        raise ValueError(f"quantile level must lie in (0, 1), got {tau}")


def _design(X):
    if isinstance(X, DesignMatrix):
        return X.values, X.scales
    values = np.asarray(X, dtype=float)
    if values.ndim != 2:
        raise ValueError("design must be a DesignMatrix or 2-d array")
    from .features import column_scales

    return values, column_scales(values)


def _loss_subgradient_interval(values, r, tau, at_kink):
    """Coordinatewise interval [lo, hi] of the check-loss subdifferential."""
    off = ~at_kink
    psi = tau - (r[off] < 0.0)
    base = -values[off].T @ psi
    if np.any(at_kink):
        vk = values[at_kink]
        lo_part = np.minimum(-tau * vk, (1.0 - tau) * vk).sum(axis=0)
        hi_part = np.maximum(-tau * vk, (1.0 - tau) * vk).sum(axis=0)
    else:
        lo_part = hi_part = 0.0
    return base + lo_part, base + hi_part


def _smoothed_loss(r, tau, h):
    """Check loss convolved with a uniform kernel of half-width h.

    Quadratic on |r| < h, identical to the check loss outside; an upper
    bound on the check loss that decreases pointwise as h shrinks.
    """
    out = (tau - (r < 0.0)) * r
    inner = np.abs(r) < h
    ri = r[inner]
    out[inner] = (tau - 0.5) * ri + ri**2 / (4.0 * h) + h / 4.0
    return out


def _smoothed_score(r, tau, h):
    return np.clip((tau - 0.5) + r / (2.0 * h), tau - 1.0, tau)


def _soft(z, t):
    return np.sign(z) * np.maximum(np.abs(z) - t, 0.0)


def _lp_solve(values, scales, y, tau, nu):
    """Exact solve of the equivalent linear program (positive-part split)."""
    n_rows, n_cols = values.shape
    cost = np.concatenate([
        nu * scales, nu * scales, tau * np.ones(n_rows), (1.0 - tau) * np.ones(n_rows)
    ])
    vs = sparse.csr_matrix(values)
    eye = sparse.eye(n_rows, format="csr")
    a_eq = sparse.hstack([vs, -vs, eye, -eye], format="csr")
    try:
        res = linprog(cost, A_eq=a_eq, b_eq=y, bounds=(0.0, None), method="highs")
    except ValueError:
        return None
    if res.status != 0:
        return None
    return res.x[:n_cols] - res.x[n_cols : 2 * n_cols]


def _smoothed_objective(values, y, tau, weights, coef, h):
    r = y - values @ coef
    return float(np.sum(_smoothed_loss(r, tau, h)) + np.sum(weights * np.abs(coef)))


def _solve_level(values, y, tau, weights, coef, h, *, grad_target, phi_max,
                 iterations, max_iter, level_budget, objective_path, zone_init=None):
    """Solve one smoothing level to stationarity grad_target.

    Alternates damped Newton steps on the smoothed problem (piecewise
    quadratic, solved essentially exactly once the interpolation pattern is
    known) with chunks of majorize-minimize proximal gradient steps, which
    repair a mis-identified pattern.  The minimizer path keeps a stable
    pattern as the half-width shrinks (zone residuals scale like c*h), so
    the previous level's zone is used for the first Newton model.  Accepted
    steps never increase the smoothed objective.
    """
    objective_path.append(_smoothed_objective(values, y, tau, weights, coef, h))
    spent = 0
    zone_override = zone_init
    while spent < level_budget and iterations < max_iter:
        for _ in range(6):
            coef, newton_hit, improved = _newton_refine(
                values, y, tau, weights, coef, h,
                grad_target=grad_target, objective_path=objective_path,
                zone_override=zone_override,
            )
            zone_override = None
            iterations += 1
            spent += 1
            if newton_hit:
                return coef, iterations, True, np.abs(y - values @ coef) < h
            if not improved:
                break
        chunk = min(40, level_budget - spent, max_iter - iterations)
        if chunk <= 0:
            break
        coef, used, hit = _prox_descent(
            values, y, tau, weights, coef, h,
            grad_target=grad_target, phi_max=phi_max, budget=chunk,
            objective_path=objective_path,
        )
        spent += used + 1
        iterations += used
        if hit:
            return coef, iterations, True, np.abs(y - values @ coef) < h
    r = y - values @ coef
    grad = -(values.T @ _smoothed_score(r, tau, h))
    hit = _stationarity(grad, coef, weights) <= grad_target
    return coef, iterations, hit, np.abs(r) < h


def _prox_descent(values, y, tau, weights, coef, h, *, grad_target, phi_max,
                  budget, objective_path):
    """Monotone proximal-gradient steps with BB-informed backtracking."""
    r = y - values @ coef
    phi0 = min(phi_max, max(1e-10, float(np.mean(values**2)) / (2.0 * h)))
    prev_coef = None
    prev_grad = None
    for it in range(budget):
        grad = -(values.T @ _smoothed_score(r, tau, h))
        if _stationarity(grad, coef, weights) <= grad_target:
            return coef, it, True
        phi = phi0
        if prev_coef is not None:
            d_coef = coef - prev_coef
            d_grad = grad - prev_grad
            den = float(d_coef @ d_coef)
            if den > 0:
                bb = float(d_coef @ d_grad) / den
                if np.isfinite(bb) and bb > 0:
                    phi = min(max(bb, 1e-10), phi_max)
        loss0 = float(np.sum(_smoothed_loss(r, tau, h)))
        while True:
            cand = _soft(coef - grad / phi, weights / phi)
            delta = cand - coef
            r_cand = y - values @ cand
            loss1 = float(np.sum(_smoothed_loss(r_cand, tau, h)))
            bound = loss0 + float(grad @ delta) + 0.5 * phi * float(delta @ delta)
            if loss1 <= bound + 1e-12 * (1.0 + abs(loss0)) or phi >= phi_max:
                break
            phi = min(phi * 4.0, phi_max)
        prev_coef, prev_grad = coef, grad
        coef, r = cand, r_cand
        objective_path.append(loss1 + float(np.sum(weights * np.abs(coef))))
        if float(np.max(np.abs(delta))) <= 1e-16 * (1.0 + float(np.max(np.abs(coef)))):
            grad = -(values.T @ _smoothed_score(r, tau, h))
            return coef, it + 1, _stationarity(grad, coef, weights) <= grad_target
    return coef, budget, False


def _newton_refine(values, y, tau, weights, coef, h, *, grad_target,
                   objective_path, zone_override=None):
    """One damped Newton step on the piecewise-quadratic smoothed problem.

    Within a pattern (zone rows x active coefficients) the stationarity
    conditions are linear, so a full step lands on the level optimum when
    the pattern is correct.  The model zone defaults to the rows currently
    inside the smoothing zone but can be overridden with the pattern
    converged at the previous level.  A backtracking line search keeps the
    smoothed objective nonincreasing; steps that cannot improve are
    discarded.
    """
    r = y - values @ coef
    penalized = bool(weights.any())
    support = np.flatnonzero(coef != 0.0) if penalized else np.arange(coef.size)
    if support.size == 0:
        return coef, False, False
    if zone_override is not None:
        zone = zone_override.copy()
    else:
        zone = np.abs(r) < h
    # A stationary pattern needs at least as many zone rows as active
    # coefficients; extend the model zone with the smallest residuals (the
    # candidate interpolation basis) when the smoothing zone is thinner.
    deficit = support.size - int(np.count_nonzero(zone))
    if deficit > 0:
        outside = np.flatnonzero(~zone)
        order = np.argsort(np.abs(r[outside]), kind="stable")
        zone[outside[order[:deficit]]] = True
    obj0 = objective_path[-1]

    psi = np.where(zone, (tau - 0.5) + r / (2.0 * h), tau - (r < 0.0))
    grad = -(values.T @ psi)
    resid = grad[support] + weights[support] * np.sign(coef[support])
    vz = values[np.ix_(zone, support)]
    hess = vz.T @ vz / (2.0 * h)
    try:
        step, *_ = np.linalg.lstsq(hess, resid, rcond=None)
    except np.linalg.LinAlgError:
        return coef, False, False
    if not np.all(np.isfinite(step)):
        return coef, False, False
    unresolved = resid - hess @ step

    if float(np.max(np.abs(unresolved))) > 1e-9 * (1.0 + float(np.max(np.abs(resid)))):
        # Zone rows cannot resolve the stationarity residual: its component
        # in the null space of the zone rows is a strict descent direction
        # along which zone residuals stay put and the objective is linear.
        # Walking to the first pattern event (a row entering the zone or a
        # penalized coefficient reaching zero) is a simplex-like pivot.
        cand = _pivot_move(values, y, tau, weights, coef, h, r, support, unresolved, obj0)
        if cand is not None:
            coef, obj1 = cand
            objective_path.append(obj1)
            r_new = y - values @ coef
            g_new = -(values.T @ _smoothed_score(r_new, tau, h))
            hit = _stationarity(g_new, coef, weights) <= grad_target
            return coef, hit, obj1 < obj0 - 1e-14 * (1.0 + abs(obj0))
        return coef, False, False

    scale_step = 1.0
    for _ in range(12):
        cand = coef.copy()
        cand[support] = coef[support] - scale_step * step
        obj1 = _smoothed_objective(values, y, tau, weights, cand, h)
        if obj1 <= obj0:
            r_cand = y - values @ cand
            g_cand = -(values.T @ _smoothed_score(r_cand, tau, h))
            objective_path.append(obj1)
            hit = _stationarity(g_cand, cand, weights) <= grad_target
            return cand, hit, obj1 < obj0 - 1e-14 * (1.0 + abs(obj0))
        scale_step *= 0.5
    return coef, False, False


def _pivot_move(values, y, tau, weights, coef, h, r, support, unresolved, obj0):
    """Exact ray search along the zone-null descent direction.

    The direction leaves zone-row residuals unchanged, so the smoothed
    objective is linear with negative slope until the first event: a
    non-zone row hitting the zone boundary or a penalized coefficient
    crossing zero.  Returns (new_coef, new_objective) or None.
    """
    direction = np.zeros_like(coef)
    direction[support] = -unresolved
    dr = values @ direction
    ts = []
    pen = weights[support] > 0.0
    move = direction[support] != 0.0
    idx = support[pen & move]
    if idx.size:
        t_zero = -coef[idx] / direction[idx]
        ts.extend(t_zero[t_zero > 1e-15].tolist())
    out = np.abs(r) >= h
    dr_out = dr[out]
    r_out = r[out]
    with np.errstate(divide="ignore", invalid="ignore"):
        for boundary in (h, -h):
            t_row = (r_out - boundary) / dr_out
            ts.extend(t_row[np.isfinite(t_row) & (t_row > 1e-15)].tolist())
    norm_dir = float(np.max(np.abs(direction)))
    if norm_dir == 0.0:
        return None
    t_cap = (1.0 + float(np.max(np.abs(coef)))) / norm_dir
    t_star = min(min(ts), t_cap) if ts else t_cap
    for _ in range(8):
        cand = coef + t_star * direction
        obj1 = _smoothed_objective(values, y, tau, weights, cand, h)
        if obj1 <= obj0:
            return cand, obj1
        t_star *= 0.5
    return None


def _stationarity(grad, coef, weights):
    """Distance to prox-stationarity of the smoothed problem (unnormalized)."""
    active = coef != 0.0
    viol = np.where(
        active,
        np.abs(grad + weights * np.sign(coef)),
        np.maximum(np.abs(grad) - weights, 0.0),
    )
    return float(viol.max())


