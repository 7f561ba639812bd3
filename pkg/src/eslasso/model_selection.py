"""Blocked cross-validation for penalty selection and out-of-sample losses.

Folds are consecutive blocks in time order, matching the dependence
structure of the data; remainder observations go to the earliest folds.
Quantile fits are scored by tick loss, shortfall fits by the squared error
against the auxiliary response built from the held-out quantile
predictions.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from . import es as es_mod
from . import quantile as q_mod
from .features import DesignMatrix
from .quantile import check_loss


@dataclass(frozen=True)
class CVPlan:
    """k contiguous, disjoint folds covering range(T) in time order."""

    T: int
    k: int
    folds: tuple[range, ...]

    def train_indices(self, fold: int) -> np.ndarray:
        held = self.folds[fold]
        return np.array(
            [t for t in range(self.T) if t < held.start or t >= held.stop], dtype=int
        )


def blocked_folds(T: int, k: int) -> CVPlan:
    """Split range(T) into k consecutive blocks with sizes differing by <= 1.

    The remainder goes to the earliest folds, so T = 11, k = 5 gives sizes
    (3, 2, 2, 2, 2).
    """
    if k > T:
        raise ValueError(f"cannot split {T} observations into {k} folds")
    if k < 2:
        raise ValueError(f"need at least 2 folds, got {k}")
    base, extra = divmod(T, k)
    folds = []
    start = 0
    for j in range(k):
        size = base + (1 if j < extra else 0)
        folds.append(range(start, start + size))
        start += size
    return CVPlan(T=T, k=k, folds=tuple(folds))


def mean_tick_loss(Y, Q_hat, tau: float, *, per_observation: bool = False) -> float:
    """Tick loss sum_t rho_tau(Y_t - Qhat_t) over the supplied periods.

    The headline number is the sum over the evaluation set; pass
    per_observation=True for the mean instead.
    """
    y = np.asarray(Y, dtype=float)
    q = np.asarray(Q_hat, dtype=float)
    if y.shape != q.shape:
        raise ValueError("response and predictions must have equal length")
    total = float(np.sum(check_loss(tau, y - q)))
    return total / y.shape[0] if per_observation else total


def es_mse(Y, Q_hat, ES_hat, tau: float, *, per_observation: bool = False) -> float:
    """Squared shortfall prediction error sum_t (Yhat_t - EShat_t)^2.

    Yhat is the auxiliary response built from the supplied quantile
    predictions.
    """
    y = np.asarray(Y, dtype=float)
    q = np.asarray(Q_hat, dtype=float)
    e = np.asarray(ES_hat, dtype=float)
    if not (y.shape == q.shape == e.shape):
        raise ValueError("response, quantile, and shortfall series must have equal length")
    aux = es_mod.auxiliary_response(y, q, tau).values
    total = float(np.sum((aux - e) ** 2))
    return total / y.shape[0] if per_observation else total


@dataclass
class CVResult:
    """Chosen penalty plus the fold-by-penalty held-out loss table."""

    chosen: float
    grid: np.ndarray
    fold_losses: np.ndarray  # shape (len(grid), k)

    @property
    def mean_losses(self) -> np.ndarray:
        return self.fold_losses.mean(axis=1)

    def to_csv(self, path):
        k = self.fold_losses.shape[1]
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["penalty"] + [f"fold_{j}" for j in range(k)] + ["mean"])
            for g, row, m in zip(self.grid, self.fold_losses, self.mean_losses):
                writer.writerow(
                    [repr(float(g))] + [repr(float(v)) for v in row] + [repr(float(m))]
                )


def cross_validate(fitter, X: DesignMatrix, y, tau: float, grid, plan: CVPlan) -> CVResult:
    """Average held-out loss per grid point; ties go to the larger penalty.

    The fitter sees only training rows when fitting (penalty scales are
    recomputed per training split) and scores its model on the held-out
    block.  The grid must be sorted descending so warm starts walk the
    path from the most to the least regularized fit.
    """
    grid = np.asarray(grid, dtype=float)
    if grid.size == 0:
        raise ValueError("penalty grid is empty")
    if np.any(np.diff(grid) > 0):
        raise ValueError("penalty grid must be sorted descending")
    y = np.asarray(y, dtype=float)
    losses = np.empty((grid.size, plan.k))
    for j, fold in enumerate(plan.folds):
        train_idx = plan.train_indices(j)
        test_idx = np.arange(fold.start, fold.stop)
        X_train = X.take(train_idx)
        y_train = y[train_idx]
        X_test = X.values[test_idx]
        y_test = y[test_idx]
        penalty = float(grid[0])
        try:
            ctx = fitter.begin_fold(X_train, y_train, tau)
            model = None
            for g, penalty in enumerate(grid):
                model = fitter.fit(ctx, float(penalty), warm_start=model)
                losses[g, j] = fitter.heldout_loss(ctx, model, X_test, y_test, tau)
        except Exception as exc:
            raise RuntimeError(
                f"cross-validation fit failed in fold {j} at penalty {penalty}"
            ) from exc
    means = losses.mean(axis=1)
    chosen = float(grid[int(np.argmin(means))])  # first minimum = largest penalty
    return CVResult(chosen=chosen, grid=grid, fold_losses=losses)


class _QuantileFitter:
    """Per-fold penalized quantile fits scored by per-observation tick loss."""

    def __init__(self, **fit_kwargs):
        self.fit_kwargs = fit_kwargs

    def begin_fold(self, X_train, y_train, tau):
        return (X_train, y_train, tau)

    def fit(self, ctx, penalty, warm_start=None):
        X_train, y_train, tau = ctx
        coef0 = warm_start.coefficients if warm_start is not None else None
        return q_mod.fit_penalized_quantile(
            X_train, y_train, tau, penalty, coef0=coef0, **self.fit_kwargs
        )

    def heldout_loss(self, ctx, model, X_test, y_test, tau):
        return mean_tick_loss(y_test, X_test @ model.coefficients, tau, per_observation=True)


class _ESFitter:
    """Shortfall-stage fitter: the quantile stage is refit per training split.

    The quantile penalty is fixed (chosen by its own cross-validation
    beforehand); each fold fits the quantile model once on the training
    block, builds the in-fold auxiliary response, and then walks the
    shortfall penalty grid.  Held-out scoring uses the fold quantile
    model's held-out predictions inside the auxiliary response.
    """

    def __init__(self, quantile_penalty: float, *, quantile_kwargs=None, **fit_kwargs):
        self.quantile_penalty = quantile_penalty
        self.quantile_kwargs = quantile_kwargs or {}
        self.fit_kwargs = fit_kwargs

    def begin_fold(self, X_train, y_train, tau):
        q_fit = q_mod.fit_penalized_quantile(
            X_train, y_train, tau, self.quantile_penalty, **self.quantile_kwargs
        )
        aux = es_mod.auxiliary_response(y_train, X_train.values @ q_fit.coefficients, tau)
        return (X_train, aux, q_fit)

    def fit(self, ctx, penalty, warm_start=None):
        X_train, aux, _ = ctx
        coef0 = warm_start.coefficients if warm_start is not None else None
        return es_mod.fit_es_lasso(X_train, aux, penalty, coef0=coef0, **self.fit_kwargs)

    def heldout_loss(self, ctx, model, X_test, y_test, tau):
        _, _, q_fit = ctx
        q_pred = X_test @ q_fit.coefficients
        es_pred = X_test @ model.coefficients
        return es_mse(y_test, q_pred, es_pred, tau, per_observation=True)


def cv_quantile_penalty(X, y, tau, grid, plan, **fit_kwargs) -> CVResult:
    """Select the quantile penalty by blocked cross-validation."""
    return cross_validate(_QuantileFitter(**fit_kwargs), X, y, tau, grid, plan)


def cv_es_penalty(X, y, tau, quantile_penalty, grid, plan, **fit_kwargs) -> CVResult:
    """Select the shortfall penalty, refitting the quantile stage per split."""
    fitter = _ESFitter(quantile_penalty, **fit_kwargs)
    return cross_validate(fitter, X, y, tau, grid, plan)
