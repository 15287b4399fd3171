"""Predictive densities, quantiles, intervals and moments.

A predictive distribution is summarised by a location ``m`` and scale
``s`` on the normal-score scale together with the fitted margin ``F_Y``:

    p(y0 | x0) = p_Y(y0) / phi(z0) * phi((z0 - m) / s) / s,   z0 = Phi^{-1}(F_Y(y0))

CDF and quantiles are monotone transforms of a normal CDF, so both are
closed form given the margin's normal score and its inverse.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.integrate import trapezoid
from scipy.special import ndtr, ndtri

from .copula_model import PriorKind, PriorSpec, _prior_variances
from .errors import DimensionMismatch, ProbabilityOutOfRange, ValidationError
from .hmc import PosteriorDraws
from .marginal import MarginalEstimate
from .vi import VariationalFit

LOG_SQRT_2PI = 0.5 * float(np.log(2.0 * np.pi))
QUAD_POINTS = 2001
QUAD_HALF_WIDTH = 8.0
# query rows per chunk when averaging over MCMC draws
_DRAW_CHUNK = 4_000_000


@dataclass(frozen=True, eq=False)
class PredictivePosterior:
    """Predictive distribution(s) at one query or a batch of queries.

    ``m_hat`` and ``s_hat`` are scalars or equal-length vectors.
    """

    m_hat: np.ndarray
    s_hat: np.ndarray
    margin: MarginalEstimate

    def __post_init__(self):
        m = np.asarray(self.m_hat, dtype=float)
        s = np.asarray(self.s_hat, dtype=float)
        if m.shape != s.shape:
            raise DimensionMismatch(f"m_hat shape {m.shape} differs from s_hat shape {s.shape}")
        if not np.all(np.isfinite(m)):
            raise ValidationError("m_hat must be finite")
        if np.any(~(s > 0) | ~(s <= 1)):
            raise ValidationError("s_hat must lie in (0, 1]")
        object.__setattr__(self, "m_hat", m)
        object.__setattr__(self, "s_hat", s)

    @property
    def size(self) -> int:
        return self.m_hat.size

    def __getitem__(self, i) -> "PredictivePosterior":
        return PredictivePosterior(self.m_hat[i], self.s_hat[i], self.margin)


def _as_rows(x0, p):
    x0 = np.asarray(x0, dtype=float)
    single = x0.ndim == 1
    rows = np.atleast_2d(x0)
    if rows.ndim != 2 or rows.shape[1] != p:
        raise DimensionMismatch(f"expected basis rows of length {p}, got shape {x0.shape}")
    return rows, single


def _split(theta, spec, p, fixed_hyper):
    theta = np.atleast_2d(theta)
    if fixed_hyper is not None:
        fixed_hyper = np.atleast_1d(np.asarray(fixed_hyper, dtype=float))
        if theta.shape[1] != p:
            raise DimensionMismatch(f"draws have {theta.shape[1]} columns, expected {p}")
        hyper = np.broadcast_to(fixed_hyper, (theta.shape[0], fixed_hyper.size))
    else:
        if theta.shape[1] != spec.dim(p):
            raise DimensionMismatch(
                f"draws have {theta.shape[1]} columns, the {spec.kind.value} prior needs {spec.dim(p)}"
            )
        hyper = theta[:, p:]
    with np.errstate(over="ignore"):
        v = _prior_variances(spec, hyper, p)
    return theta[:, :p], v


def location_scale(x0, fit, spec: PriorSpec, fixed_hyper=None):
    """``(m_hat, s_hat)`` for basis row(s) ``x0``.

    MCMC output: ``s_hat = mean_j s0_j`` and ``m_hat = psi' mean_j(s0_j beta_j)``.
    VI output: plug-in at the variational mean,
    ``s_hat = s0(mu)`` and ``m_hat = s_hat psi' beta(mu)``.
    """
    if isinstance(fit, PosteriorDraws):
        draws = fit.draws
    elif isinstance(fit, VariationalFit):
        draws = fit.params.mu[None, :]
    else:
        raise ValidationError(f"unsupported fit type {type(fit).__name__}")
    beta, v = _split(draws, spec, _infer_p(draws, spec, fixed_hyper), fixed_hyper)
    rows, single = _as_rows(x0, beta.shape[1])
    sq = rows * rows
    J = beta.shape[0]
    m_hat = np.empty(rows.shape[0])
    s_hat = np.empty(rows.shape[0])
    step = max(1, _DRAW_CHUNK // J)
    for start in range(0, rows.shape[0], step):
        chunk = slice(start, start + step)
        s0 = 1.0 / np.sqrt(1.0 + sq[chunk] @ v.T)  # (q, J)
        s_hat[chunk] = s0.mean(axis=1)
        m_hat[chunk] = np.mean(s0 * (rows[chunk] @ beta.T), axis=1)
    if single:
        return float(m_hat[0]), float(s_hat[0])
    return m_hat, s_hat


def plugin_scale(x0, fit, spec: PriorSpec, fixed_hyper=None):
    """``s0`` evaluated at posterior-mean hyperparameters (diagnostic only)."""
    mean = fit.mean() if isinstance(fit, PosteriorDraws) else fit.params.mu
    p = _infer_p(mean[None, :], spec, fixed_hyper)
    _, v = _split(mean[None, :], spec, p, fixed_hyper)
    rows, single = _as_rows(x0, p)
    s0 = 1.0 / np.sqrt(1.0 + (rows * rows) @ v[0])
    return float(s0[0]) if single else s0


def _infer_p(draws, spec, fixed_hyper):
    width = draws.shape[1]
    if fixed_hyper is not None:
        return width
    # ridge: p + 1 columns; horseshoe: 2p + 1
    p = width - 1 if spec.kind is PriorKind.RIDGE else (width - 1) // 2
    if p < 1 or spec.dim(p) != width:
        raise DimensionMismatch(f"{width} parameter columns do not fit the {spec.kind.value} prior")
    return p


def posterior_at(x0, fit, spec: PriorSpec, margin: MarginalEstimate,
                 fixed_hyper=None) -> PredictivePosterior:
    """Predictive distribution at basis row(s) ``x0``."""
    m_hat, s_hat = location_scale(x0, fit, spec, fixed_hyper)
    return PredictivePosterior(m_hat, s_hat, margin)


def _broadcast(pp, values):
    # queries along the first axis, evaluation points along the last
    values = np.asarray(values, dtype=float)
    if pp.m_hat.ndim == 0:
        return pp.m_hat, pp.s_hat, values
    return pp.m_hat[:, None], pp.s_hat[:, None], values


def density(pp: PredictivePosterior, y0):
    """Predictive density at ``y0``.

    For batched ``pp`` with ``q`` queries, ``y0`` of shape ``(k,)`` gives a
    ``(q, k)`` result.
    """
    m, s, y0 = _broadcast(pp, y0)
    z0, pdf = pp.margin.score_and_pdf(y0)
    u = (z0 - m) / s
    with np.errstate(divide="ignore"):
        log_dens = np.log(pdf) + 0.5 * z0 * z0 - 0.5 * u * u - np.log(s)
    return np.exp(log_dens)


def cdf(pp: PredictivePosterior, y0):
    m, s, y0 = _broadcast(pp, y0)
    return ndtr((pp.margin.normal_score(y0) - m) / s)


def cdf_from_scores(pp: PredictivePosterior, scores):
    """Predictive CDF given precomputed margin normal scores of the points."""
    m, s, scores = _broadcast(pp, scores)
    return ndtr((scores - m) / s)


def quantile(pp: PredictivePosterior, p, exact: bool = True):
    """``F_Y^{-1}(Phi(m + s Phi^{-1}(p)))``.

    ``exact=False`` uses the margin's cached inverse spline.
    """
    p = np.asarray(p, dtype=float)
    if np.any(~(p > 0) | ~(p < 1)):
        raise ProbabilityOutOfRange("probabilities must lie in (0, 1)")
    m, s, p = _broadcast(pp, p)
    return pp.margin.inverse_normal_score(m + s * ndtri(p), exact=exact)


def interval(pp: PredictivePosterior, alpha: float, exact: bool = True):
    """Central ``1 - alpha`` prediction interval ``(q(alpha/2), q(1 - alpha/2))``."""
    if not 0 < alpha < 1:
        raise ProbabilityOutOfRange(f"alpha must lie in (0, 1), got {alpha}")
    bounds = quantile(pp, np.array([alpha / 2, 1 - alpha / 2]), exact=exact)
    return bounds[..., 0], bounds[..., 1]


def mean_and_variance(pp: PredictivePosterior, n_points: int = QUAD_POINTS, exact: bool = True):
    """Predictive mean and variance by trapezoid quadrature in ``z0``.

    The grid spans ``m +- 8 s`` with ``n_points`` nodes; the variance is
    clamped at zero.
    """
    if n_points < 3:
        raise ValidationError("n_points must be >= 3")
    t = np.linspace(-QUAD_HALF_WIDTH, QUAD_HALF_WIDTH, n_points)
    w = np.exp(-0.5 * t * t - LOG_SQRT_2PI)
    m, s, _ = _broadcast(pp, t)
    y = pp.margin.inverse_normal_score(m + s * t, exact=exact)
    mean = trapezoid(y * w, t, axis=-1)
    second = trapezoid(y * y * w, t, axis=-1)
    var = np.maximum(second - mean * mean, 0.0)
    if np.ndim(mean) == 0:
        return float(mean), float(var)
    return mean, var


def density_grid(margin: MarginalEstimate, n_points: int = 20001) -> np.ndarray:
    """Equispaced grid over the margin's extended support."""
    lo, hi = margin.support
    return np.linspace(lo, hi, n_points)


@dataclass(frozen=True, eq=False)
class FittedModel:
    """Margin, prior and posterior bundled for prediction and persistence."""

    margin: MarginalEstimate
    spec: PriorSpec
    fit: PosteriorDraws | VariationalFit
    p: int
    fixed_hyper: np.ndarray | None = None
    seed: int | None = None

    def __post_init__(self):
        width = self.fit.draws.shape[1] if isinstance(self.fit, PosteriorDraws) else self.fit.params.dim
        expected = self.p if self.fixed_hyper is not None else self.spec.dim(self.p)
        if width != expected:
            raise DimensionMismatch(f"fit has {width} parameters, expected {expected}")

    @property
    def method(self) -> str:
        return "hmc" if isinstance(self.fit, PosteriorDraws) else "vi"

    def posterior_at(self, x0) -> PredictivePosterior:
        return posterior_at(x0, self.fit, self.spec, self.margin, self.fixed_hyper)


def pit(pp: PredictivePosterior, y):
    """Elementwise PIT ``F_i(y_i)`` for a batch with one response per query."""
    y = np.asarray(y, dtype=float)
    if y.shape != pp.m_hat.shape:
        raise DimensionMismatch(f"{y.size} responses for {pp.size} queries")
    return ndtr((pp.margin.normal_score(y) - pp.m_hat) / pp.s_hat)
