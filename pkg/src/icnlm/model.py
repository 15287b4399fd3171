"""End-to-end pipeline: fit the margin, run inference, predict, diagnose."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import diagnostics, hmc, predictive, vi
from .copula_model import PriorSpec
from .data_io import Dataset
from .errors import ValidationError
from .marginal import fit_kde
from .predictive import FittedModel

log = logging.getLogger(__name__)

PREDICTION_COLUMNS = ("id", "mean", "variance", "q05", "q50", "q95")


@dataclass(frozen=True)
class ViSettings:
    k: int = 3
    M: int = 50
    max_iter: int = vi.DEFAULT_MAX_ITER
    seed: int = 0

    def __post_init__(self):
        if self.k < 1:
            raise ValidationError(f"k must be >= 1, got {self.k}")
        if self.M < 1:
            raise ValidationError(f"M must be >= 1, got {self.M}")
        if self.max_iter < 1:
            raise ValidationError(f"max_iter must be >= 1, got {self.max_iter}")


@dataclass(frozen=True, eq=False)
class FitResult:
    model: FittedModel
    log_lines: list = field(default_factory=list)


def fit_model(dataset: Dataset, spec: PriorSpec, method: str, settings, bandwidth=None,
              fixed_hyper=None) -> FitResult:
    """Fit the margin, transform to pseudo responses and run HMC or VI.

    ``settings`` is an :class:`~icnlm.hmc.HmcSettings` for ``method="hmc"``
    and a :class:`ViSettings` for ``method="vi"``.
    """
    margin = fit_kde(dataset.responses, bandwidth=bandwidth)
    z = margin.to_pseudo(dataset.responses)
    if method == "hmc":
        if not isinstance(settings, hmc.HmcSettings):
            raise ValidationError("hmc needs HmcSettings")
        fit = hmc.sample(z, dataset.basis, spec, settings, fixed_hyper=fixed_hyper)
        lines = [
            f"method\thmc",
            f"accept_rate\t{fit.accept_rate!r}",
            f"mean_accept_prob\t{fit.diagnostics['mean_accept_prob']!r}",
            f"step_size\t{fit.step_size!r}",
            f"n_divergent\t{fit.n_divergent}",
            f"min_ess\t{float(fit.ess.min())!r}",
        ]
        seed = settings.seed
    elif method == "vi":
        if not isinstance(settings, ViSettings):
            raise ValidationError("vi needs ViSettings")
        fit = vi.fit(z, dataset.basis, spec, k=settings.k, M=settings.M,
                     max_iter=settings.max_iter, seed=settings.seed, fixed_hyper=fixed_hyper)
        lines = [
            "method\tvi",
            f"iterations\t{fit.iterations_run}",
            f"converged\t{fit.converged}",
            f"final_elbo\t{float(fit.elbo_trace[-1])!r}",
            "elbo_trace",
        ] + [repr(float(v)) for v in fit.elbo_trace]
        seed = settings.seed
    else:
        raise ValidationError(f"method must be 'hmc' or 'vi', got {method!r}")
    model = FittedModel(margin, spec, fit, dataset.p,
                        None if fixed_hyper is None else np.atleast_1d(np.asarray(fixed_hyper, float)), seed)
    return FitResult(model, lines)


def predict_table(model: FittedModel, basis, ids=None, alpha=None) -> dict:
    """Per-query summaries: mean, variance, 5/50/95% quantiles, optional interval."""
    basis = np.atleast_2d(np.asarray(basis, dtype=float))
    pp = model.posterior_at(basis)
    mean, var = predictive.mean_and_variance(pp, exact=False)
    q = predictive.quantile(pp, np.array([0.05, 0.5, 0.95]), exact=False)
    table = {
        "id": list(ids) if ids is not None else [str(i + 1) for i in range(basis.shape[0])],
        "mean": mean,
        "variance": var,
        "q05": q[:, 0],
        "q50": q[:, 1],
        "q95": q[:, 2],
    }
    if alpha is not None:
        lower, upper = predictive.interval(pp, alpha, exact=False)
        table["lower"] = lower
        table["upper"] = upper
    return table


def write_predictions(path, table: dict) -> None:
    columns = [c for c in PREDICTION_COLUMNS + ("lower", "upper") if c in table]
    lines = ["\t".join(columns)]
    for i in range(len(table["id"])):
        row = [str(table["id"][i])] + [repr(float(table[c][i])) for c in columns[1:]]
        lines.append("\t".join(row))
    Path(path).write_text("\n".join(lines) + "\n")


def diagnose(model: FittedModel, dataset: Dataset, levels=diagnostics.LEVEL_GRID,
             thresholds=None) -> diagnostics.CalibrationReport:
    """Evaluate calibration and accuracy of ``model`` on ``dataset``."""
    y = dataset.responses
    pp = model.posterior_at(dataset.basis)
    margin = model.margin

    grid = diagnostics.marginal_grid(y)
    cdf_matrix = predictive.cdf_from_scores(pp, margin.normal_score(grid))
    marginal = diagnostics.marginal_calibration(cdf_matrix, y, grid)

    u = predictive.pit(pp, y)
    pit_curve = diagnostics.probabilistic_calibration(u, levels)

    levels = np.asarray(levels, dtype=float)
    probs = np.concatenate([(1 - levels) / 2, (1 + levels) / 2])
    q = predictive.quantile(pp, probs, exact=False)
    L = levels.size
    cover = diagnostics.coverage(q[:, :L], q[:, L:], y, levels)

    mean, var = predictive.mean_and_variance(pp, exact=False)
    metrics = diagnostics.point_metrics(mean, y)
    err_sq = (mean - y) ** 2
    if thresholds is None:
        thresholds = diagnostics.default_thresholds(var)
    ev = diagnostics.error_vs_variance(err_sq, var, thresholds)

    n = y.size
    s_plugin = predictive.plugin_scale(dataset.basis, model.fit, model.spec, model.fixed_hyper)
    extras = {
        "n": n,
        "method": model.method,
        "prior": model.spec.kind.value,
        "ks_statistic": diagnostics.ks_statistic(u),
        "ks_critical_5pct": 1.36 / np.sqrt(n),
        "mean_s_hat": float(np.mean(pp.s_hat)),
        "mean_s_plugin": float(np.mean(s_plugin)),
    }
    return diagnostics.CalibrationReport(marginal, pit_curve, cover, metrics, ev, extras)
