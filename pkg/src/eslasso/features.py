"""Chebyshev polynomial dictionaries and penalty scales for design matrices.

Raw regressors are rescaled onto [-1, 1] over a per-column approximation
interval and expanded with Chebyshev polynomials up to a chosen degree.
Values falling outside the interval (e.g. test data transformed with
training intervals) are handled by the hyperbolic extension of the
polynomials, which keeps the transform total and continuous on the reals.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class DegenerateIntervalError(ValueError):
    """Raised when a raw column has no spread (interval lower == upper)."""


class DegenerateColumnError(ValueError):
    """Raised when a transformed column has zero variance and cannot be scaled."""


@dataclass(frozen=True)
class ApproximationInterval:
    """Endpoints [lower, upper] used to map one raw regressor onto [-1, 1]."""

    lower: float
    upper: float

    def __post_init__(self):
        if not np.isfinite(self.lower) or not np.isfinite(self.upper):
            raise DegenerateIntervalError(
                f"interval endpoints must be finite, got [{self.lower}, {self.upper}]"
            )
        if not self.lower < self.upper:
            raise DegenerateIntervalError(
                f"interval must satisfy lower < upper, got [{self.lower}, {self.upper}]"
            )

    @property
    def width(self) -> float:
        return self.upper - self.lower


def rescale_to_interval(s, interval: ApproximationInterval):
    """Affinely map s from [lower, upper] onto [-1, 1].

    Monotone increasing; lower maps to -1, upper to +1.  Accepts scalars or
    arrays.  Values outside the interval map outside [-1, 1].
    """
    s = np.asarray(s, dtype=float)
    out = (2.0 * s - interval.lower - interval.upper) / interval.width
    return out if out.ndim else float(out)


def chebyshev_value(k: int, s_tilde):
    """Degree-k Chebyshev polynomial evaluated on the whole real line.

    Uses cos(k*arccos(x)) on [-1, 1] and the hyperbolic-cosine extension
    cosh(k*arcosh(|x|)) with sign (-1)^k for x < -1, so the function is the
    usual polynomial T_k everywhere and continuous across the interval
    endpoints.
    """
    if k < 0:
        raise ValueError(f"polynomial degree must be nonnegative, got {k}")
    x = np.asarray(s_tilde, dtype=float)
    scalar = x.ndim == 0
    x = np.atleast_1d(x)
    out = np.empty_like(x)
    inside = np.abs(x) <= 1.0
    above = x > 1.0
    below = x < -1.0
    out[inside] = np.cos(k * np.arccos(x[inside]))
    out[above] = np.cosh(k * np.arccosh(x[above]))
    out[below] = (-1.0) ** k * np.cosh(k * np.arccosh(-x[below]))
    return float(out[0]) if scalar else out


def chebyshev_recurrence(k: int, s_tilde):
    """T_k via the three-term recurrence T_k = 2x*T_{k-1} - T_{k-2}.

    Independent route to the same polynomial; used to cross-check the
    branch formula in tests.
    """
    x = np.asarray(s_tilde, dtype=float)
    t_prev = np.ones_like(x)
    if k == 0:
        return t_prev
    t_cur = x.copy()
    for _ in range(k - 1):
        t_prev, t_cur = t_cur, 2.0 * x * t_cur - t_prev
    return t_cur


def column_scales(values: np.ndarray) -> np.ndarray:
    """Per-column empirical root mean squares sqrt((1/T) sum_t X_it^2)."""
    values = np.asarray(values, dtype=float)
    return np.sqrt(np.mean(values**2, axis=0))


@dataclass(frozen=True)
class DesignMatrix:
    """T x p regressor matrix with intercept flag and penalty scales.

    scales[i]^2 = (1/T) sum_t values[t, i]^2; an intercept column of ones
    therefore has scale exactly 1.  The array is marked read-only after
    construction so instances can be shared across threads.
    """

    values: np.ndarray
    has_intercept: bool = True
    scales: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        values = np.ascontiguousarray(np.asarray(self.values, dtype=float))
        if values.ndim != 2:
            raise ValueError(f"design matrix must be 2-d, got shape {values.shape}")
        if not np.all(np.isfinite(values)):
            raise ValueError("design matrix contains non-finite entries")
        scales = self.scales
        if scales is None:
            scales = column_scales(values)
        else:
            scales = np.asarray(scales, dtype=float)
            if scales.shape != (values.shape[1],):
                raise ValueError("scales must have one entry per column")
        values.setflags(write=False)
        scales.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "scales", scales)

    @property
    def n_rows(self) -> int:
        return self.values.shape[0]

    @property
    def n_columns(self) -> int:
        return self.values.shape[1]

    def take(self, rows) -> "DesignMatrix":
        """Row subset with penalty scales recomputed on the subsample."""
        sub = self.values[np.asarray(rows)]
        return DesignMatrix(sub, has_intercept=self.has_intercept)

    def require_no_zero_columns(self):
        dead = np.flatnonzero(self.scales == 0.0)
        if dead.size:
            raise DegenerateColumnError(
                f"columns {dead.tolist()} are entirely zero and cannot be fit"
            )


@dataclass(frozen=True)
class ChebyshevDictionary:
    """Chebyshev feature map: intercept plus degree-1..K transforms per raw column.

    Column ordering is fixed: column 0 is the intercept, then columns
    1..K are the transforms of raw column 0, columns K+1..2K of raw
    column 1, and so on.  Sparsity indices are therefore reproducible.
    """

    degree: int
    intervals: tuple[ApproximationInterval, ...]

    def __post_init__(self):
        if self.degree < 1:
            raise ValueError(f"degree must be a positive integer, got {self.degree}")
        object.__setattr__(self, "intervals", tuple(self.intervals))

    @property
    def raw_dim(self) -> int:
        return len(self.intervals)

    @property
    def n_columns(self) -> int:
        return 1 + self.raw_dim * self.degree

    def column_index(self, raw_column: int, k: int) -> int:
        """Dictionary column holding the degree-k transform of a raw column."""
        if not 0 <= raw_column < self.raw_dim:
            raise IndexError(f"raw column {raw_column} out of range")
        if not 1 <= k <= self.degree:
            raise IndexError(f"transform degree {k} out of range 1..{self.degree}")
        return 1 + raw_column * self.degree + (k - 1)

    def transform(self, raw: np.ndarray) -> np.ndarray:
        """Evaluate the dictionary on raw data (rows are periods)."""
        raw = _as_raw_matrix(raw)
        if raw.shape[1] != self.raw_dim:
            raise ValueError(
                f"raw matrix has {raw.shape[1]} columns, dictionary expects {self.raw_dim}"
            )
        t = raw.shape[0]
        out = np.empty((t, self.n_columns))
        out[:, 0] = 1.0
        for i, interval in enumerate(self.intervals):
            s_tilde = rescale_to_interval(raw[:, i], interval)
            for k in range(1, self.degree + 1):
                out[:, self.column_index(i, k)] = chebyshev_value(k, s_tilde)
        return out

    def to_json(self) -> str:
        payload = {
            "degree": self.degree,
            "intervals": [[iv.lower, iv.upper] for iv in self.intervals],
            "ordering": "intercept first, then degree 1..K per raw column in raw order",
        }
        return json.dumps(payload, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "ChebyshevDictionary":
        payload = json.loads(text)
        intervals = tuple(ApproximationInterval(a, b) for a, b in payload["intervals"])
        return cls(degree=int(payload["degree"]), intervals=intervals)


def _as_raw_matrix(raw) -> np.ndarray:
    raw = np.asarray(raw, dtype=float)
    if raw.ndim == 1:
        raw = raw[:, None]
    if raw.ndim != 2:
        raise ValueError(f"raw data must be 1-d or 2-d, got shape {raw.shape}")
    if not np.all(np.isfinite(raw)):
        raise ValueError("raw data contains non-finite entries")
    return raw


def fit_intervals(raw: np.ndarray) -> tuple[ApproximationInterval, ...]:
    """Per-column [min, max] approximation intervals from the data."""
    raw = _as_raw_matrix(raw)
    intervals = []
    for i in range(raw.shape[1]):
        lo, hi = float(raw[:, i].min()), float(raw[:, i].max())
        if lo == hi:
            raise DegenerateIntervalError(
                f"raw column {i} is constant ({lo}); cannot form an approximation interval"
            )
        intervals.append(ApproximationInterval(lo, hi))
    return tuple(intervals)


def build_dictionary(raw, degree: int, intervals=None):
    """Fit a Chebyshev dictionary on raw data and return its design matrix.

    When `intervals` is omitted they are taken as the per-column min/max of
    the supplied data.  The fitted dictionary is returned so test data can
    be transformed with the training intervals; out-of-range test values
    are covered by the hyperbolic branches.
    """
    raw = _as_raw_matrix(raw)
    if raw.shape[0] < 2:
        raise ValueError(f"need at least 2 rows to build a dictionary, got {raw.shape[0]}")
    if intervals is None:
        intervals = fit_intervals(raw)
    else:
        intervals = tuple(intervals)
        if len(intervals) != raw.shape[1]:
            raise ValueError("need one interval per raw column")
    dictionary = ChebyshevDictionary(degree=degree, intervals=intervals)
    values = dictionary.transform(raw)
    return dictionary, DesignMatrix(values, has_intercept=True)


@dataclass(frozen=True)
class SimulationDictionary:
    """Chebyshev dictionary with the shift-and-standardize manipulation.

    Non-intercept columns are (T_k + 1) / divisor, which keeps them
    nonnegative on the approximation interval and puts the transforms of
    different raw columns on a common scale.
    """

    base: ChebyshevDictionary
    divisors: np.ndarray

    def __post_init__(self):
        divisors = np.asarray(self.divisors, dtype=float)
        if divisors.shape != (self.base.n_columns,):
            raise ValueError("need one divisor per dictionary column")
        divisors.setflags(write=False)
        object.__setattr__(self, "divisors", divisors)

    def transform(self, raw) -> np.ndarray:
        values = self.base.transform(raw)
        values[:, 1:] = (values[:, 1:] + 1.0) / self.divisors[1:]
        return values


def simulation_dictionary(raw, degree: int, intervals=None, scale_divisors=None):
    """Build the shifted/standardized dictionary variant used for simulated data.

    Each non-intercept column is shifted by +1 and divided by its standard
    deviation over the supplied sample; pass `scale_divisors` (and the
    fitted `intervals`) to reuse a previous fit on out-of-sample data.
    Returns (SimulationDictionary, DesignMatrix).
    """
    base, plain = build_dictionary(raw, degree, intervals=intervals)
    shifted = plain.values.copy()
    shifted[:, 1:] += 1.0
    if scale_divisors is None:
        divisors = np.ones(base.n_columns)
        divisors[1:] = shifted[:, 1:].std(axis=0)
        dead = np.flatnonzero(divisors == 0.0)
        if dead.size:
            raise DegenerateColumnError(
                f"transformed columns {dead.tolist()} have zero variance"
            )
    else:
        divisors = np.asarray(scale_divisors, dtype=float)
        if np.any(divisors <= 0.0):
            raise DegenerateColumnError("scale divisors must be strictly positive")
    shifted[:, 1:] /= divisors[1:]
    sim = SimulationDictionary(base=base, divisors=divisors)
    return sim, DesignMatrix(shifted, has_intercept=True)


def load_matrix_csv(path, has_header: bool | None = None):
    """Read a numeric matrix from CSV, sniffing an optional header row.

    Returns (matrix, column_names) where column_names is None for
    headerless files.
    """
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        rows = [row for row in csv.reader(fh) if row]
    if not rows:
        raise ValueError(f"{path}: empty CSV")
    if has_header is None:
        has_header = not _all_numeric(rows[0])
    names = None
    if has_header:
        names = [c.strip() for c in rows[0]]
        rows = rows[1:]
    if not rows:
        raise ValueError(f"{path}: no data rows")
    try:
        matrix = np.array([[float(c) for c in row] for row in rows])
    except ValueError as exc:
        raise ValueError(f"{path}: non-numeric entry in data rows") from exc
    return matrix, names


def _all_numeric(row) -> bool:
    try:
        for cell in row:
            float(cell)
    except ValueError:
        return False
    return True
