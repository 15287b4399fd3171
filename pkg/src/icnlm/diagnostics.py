"""Calibration, coverage and accuracy diagnostics for predictive distributions."""

from __future__ import annotations

import io
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import LengthMismatch, MalformedInterval, PitOutOfRange, ValidationError

ACCURACY_I_DEGREES = 6.0
ACCURACY_II_DEGREES = 2.0
LEVEL_GRID = np.round(np.arange(1, 100) / 100, 2)
MARGINAL_GRID_POINTS = 201


@dataclass(frozen=True, eq=False)
class Curve:
    """Named columns of equal length, sorted by the first column."""

    columns: tuple
    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        if values.ndim != 2 or values.shape[1] != len(self.columns):
            raise ValidationError("curve values must have one column per name")
        object.__setattr__(self, "values", values)

    def __getitem__(self, name) -> np.ndarray:
        return self.values[:, self.columns.index(name)]

    def __len__(self):
        return self.values.shape[0]

    def to_tsv(self) -> str:
        buf = io.StringIO()
        buf.write("\t".join(self.columns) + "\n")
        for row in self.values:
            buf.write("\t".join(_fmt(v) for v in row) + "\n")
        return buf.getvalue()


def _fmt(v) -> str:
    return "NA" if v is None or not np.isfinite(v) else repr(float(v))


@dataclass(frozen=True)
class PointMetrics:
    mae: float
    mse: float
    accuracy_I: float
    accuracy_II: float


def _check_lengths(a, b, what="inputs"):
    a = np.asarray(a, dtype=float).ravel()
    b = np.asarray(b, dtype=float).ravel()
    if a.size != b.size:
        raise LengthMismatch(f"{what} differ in length: {a.size} vs {b.size}")
    return a, b


def marginal_grid(y, n_points: int = MARGINAL_GRID_POINTS) -> np.ndarray:
    """Equispaced grid over the response range widened by 5% on each side."""
    y = np.asarray(y, dtype=float)
    lo, hi = float(np.min(y)), float(np.max(y))
    pad = 0.05 * (hi - lo)
    return np.linspace(lo - pad, hi + pad, n_points)


def marginal_calibration(cdfs, y, grid) -> Curve:
    """Average predictive CDF against the empirical CDF of ``y``.

    Parameters
    ----------
    cdfs : ndarray of shape (n, len(grid)) or sequence of callables
        Predictive CDFs of each observation, either already evaluated on
        ``grid`` or as functions of a grid vector.
    y : array_like
        Responses defining the empirical CDF.
    grid : array_like
    """
    y = np.asarray(y, dtype=float).ravel()
    grid = np.sort(np.asarray(grid, dtype=float).ravel())
    if callable(cdfs) or (isinstance(cdfs, (list, tuple)) and cdfs and callable(cdfs[0])):
        funcs = [cdfs] * y.size if callable(cdfs) else cdfs
        if len(funcs) != y.size:
            raise LengthMismatch(f"{len(funcs)} predictive CDFs for {y.size} responses")
        matrix = np.array([np.asarray(f(grid), dtype=float) for f in funcs])
    else:
        matrix = np.asarray(cdfs, dtype=float)
        if matrix.ndim != 2 or matrix.shape[0] != y.size:
            raise LengthMismatch(f"CDF matrix has shape {matrix.shape} for {y.size} responses")
        if matrix.shape[1] != grid.size:
            raise LengthMismatch(f"CDF matrix has {matrix.shape[1]} columns for {grid.size} grid points")
    # sorting each column first makes the mean independent of row order
    average = np.sort(matrix, axis=0).mean(axis=0)
    empirical = np.searchsorted(np.sort(y), grid, side="right") / y.size
    return Curve(("y", "average_predictive_cdf", "empirical_cdf"), np.column_stack([grid, average, empirical]))


def sup_gap(curve: Curve) -> float:
    """Sup-norm distance between the two CDF columns of a marginal curve."""
    return float(np.max(np.abs(curve["average_predictive_cdf"] - curve["empirical_cdf"])))


def _check_pit(pit):
    pit = np.asarray(pit, dtype=float).ravel()
    if np.any(~(pit >= 0) | ~(pit <= 1)):
        raise PitOutOfRange("PIT values must lie in [0, 1]")
    return pit


def probabilistic_calibration(pit, levels=LEVEL_GRID) -> Curve:
    """Observed frequency of ``u_i <= p`` and its deviation from ``p``."""
    pit = np.sort(_check_pit(pit))
    levels = np.sort(np.asarray(levels, dtype=float).ravel())
    observed = np.searchsorted(pit, levels, side="right") / pit.size
    return Curve(("nominal", "observed", "deviation"), np.column_stack([levels, observed, observed - levels]))


def ks_statistic(pit) -> float:
    """Kolmogorov-Smirnov distance between the PIT sample and U(0, 1)."""
    u = np.sort(_check_pit(pit))
    n = u.size
    ranks = np.arange(1, n + 1) / n
    return float(max(np.max(ranks - u), np.max(u - (ranks - 1.0 / n))))


def coverage(lower, upper, y, levels=None) -> Curve:
    """Fraction of ``y`` within each interval.

    ``lower`` and ``upper`` have shape ``(n, L)`` with one column per
    nominal level (or ``(n,)`` for a single level).
    """
    y = np.asarray(y, dtype=float).ravel()
    lower = np.asarray(lower, dtype=float)
    upper = np.asarray(upper, dtype=float)
    lower = lower[:, None] if lower.ndim == 1 else lower
    upper = upper[:, None] if upper.ndim == 1 else upper
    if lower.shape != upper.shape or lower.shape[0] != y.size:
        raise LengthMismatch(f"interval bounds {lower.shape}/{upper.shape} for {y.size} responses")
    if np.any(lower > upper):
        i, j = np.argwhere(lower > upper)[0]
        raise MalformedInterval(f"lower bound exceeds upper bound at row {i}, level {j}")
    if levels is None:
        levels = LEVEL_GRID if lower.shape[1] == LEVEL_GRID.size else np.arange(lower.shape[1], dtype=float)
    levels = np.asarray(levels, dtype=float).ravel()
    if levels.size != lower.shape[1]:
        raise LengthMismatch("one nominal level per interval column is required")
    inside = (y[:, None] >= lower) & (y[:, None] <= upper)
    order = np.argsort(levels, kind="stable")
    observed = inside.mean(axis=0)
    return Curve(("nominal", "observed"), np.column_stack([levels[order], observed[order]]))


def point_metrics(y_hat, y) -> PointMetrics:
    """MAE, MSE and the two accuracy rates.

    Accuracy I counts ``|e| < 6`` (strict); Accuracy II counts ``|e| <= 2``.
    """
    y_hat, y = _check_lengths(y_hat, y, "predictions and responses")
    if y.size == 0:
        raise LengthMismatch("no observations")
    err = np.abs(y_hat - y)
    return PointMetrics(
        mae=math.fsum(err) / err.size,
        mse=math.fsum(err * err) / err.size,
        accuracy_I=float(np.mean(err < ACCURACY_I_DEGREES)),
        accuracy_II=float(np.mean(err <= ACCURACY_II_DEGREES)),
    )


def error_vs_variance(errors_sq, variances, thresholds) -> Curve:
    """MSE over observations with predictive variance ``<= nu``, per threshold.

    Thresholds that retain nothing give a NaN MSE and zero retained fraction.
    """
    errors_sq, variances = _check_lengths(errors_sq, variances, "squared errors and variances")
    if np.any(variances < 0):
        raise ValidationError("variances must be non-negative")
    thresholds = np.sort(np.asarray(thresholds, dtype=float).ravel())
    kept = np.array([np.count_nonzero(variances <= nu) for nu in thresholds], dtype=int)
    # fsum keeps the result independent of observation order
    mse = np.array([
        math.fsum(errors_sq[variances <= nu]) / k if k else np.nan
        for nu, k in zip(thresholds, kept)
    ])
    frac = kept / max(variances.size, 1)
    return Curve(("threshold", "mse", "retained_fraction"), np.column_stack([thresholds, mse, frac]))


def default_thresholds(variances, n_points: int = 100) -> np.ndarray:
    """Variance thresholds at evenly spaced empirical quantiles."""
    return np.quantile(np.asarray(variances, dtype=float), np.linspace(0.01, 1.0, n_points))


@dataclass(frozen=True, eq=False)
class CalibrationReport:
    marginal_curve: Curve
    pit_curve: Curve
    coverage_curve: Curve
    metrics: PointMetrics
    error_variance_curve: Curve
    extras: dict = field(default_factory=dict)

    def summary(self) -> dict:
        out = {
            "units": "degrees (accuracy thresholds 6 and 2)",
            "mae": self.metrics.mae,
            "mse": self.metrics.mse,
            "accuracy_I": self.metrics.accuracy_I,
            "accuracy_II": self.metrics.accuracy_II,
            "marginal_sup_gap": sup_gap(self.marginal_curve),
            "pit_max_abs_deviation": float(np.max(np.abs(self.pit_curve["deviation"]))),
            "coverage_max_abs_deviation": float(
                np.max(np.abs(self.coverage_curve["observed"] - self.coverage_curve["nominal"]))
            ),
        }
        for key, value in self.extras.items():
            if np.isscalar(value):
                out[key] = value
        return out

    def to_text(self) -> str:
        lines = []
        for key, value in self.summary().items():
            lines.append(f"{key}\t{_fmt(value) if isinstance(value, float) else value}")
        return "\n".join(lines) + "\n"

    def write(self, directory) -> list:
        """Write ``report.txt`` and one TSV per curve into ``directory``."""
        out = Path(directory)
        out.mkdir(parents=True, exist_ok=True)
        files = {
            "report.txt": self.to_text(),
            "marginal_calibration.tsv": self.marginal_curve.to_tsv(),
            "probabilistic_calibration.tsv": self.pit_curve.to_tsv(),
            "coverage.tsv": self.coverage_curve.to_tsv(),
            "error_vs_variance.tsv": self.error_variance_curve.to_tsv(),
        }
        for name, text in files.items():
            (out / name).write_text(text)
        return [out / name for name in files]
