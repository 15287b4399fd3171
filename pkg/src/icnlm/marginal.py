"""Gaussian-kernel estimate of the invariant response margin.

The margin is the only place where response units appear; everything
downstream works on the normal-score scale ``z = Phi^{-1}(F_Y(y))``.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy.interpolate import CubicSpline
from scipy.special import ndtr, ndtri

from .errors import (
    DegenerateSample,
    EmptySample,
    NonPositiveBandwidth,
    ProbabilityOutOfRange,
)

DEFAULT_CLAMP = 1e-7
_SQRT_2PI = np.sqrt(2.0 * np.pi)
# kernel-matrix entries evaluated per chunk
_CHUNK = 2_000_000
# normal scores beyond this underflow Phi in double precision
_Z_LIMIT = 37.0
# knots for the cached F^{-1}(Phi(z)) spline used by batch prediction
_TABLE_RANGE = 12.0
_TABLE_KNOTS = 4801


def silverman_bandwidth(y) -> float:
    """Silverman's rule of thumb ``0.9 min(sd, IQR/1.34) n^(-1/5)``."""
    y = np.asarray(y, dtype=float)
    # work on range-scaled values so tiny spreads do not underflow when squared
    scale = np.ptp(y)
    u = (y - y.min()) / scale if scale > 0 else y
    sd = np.std(u, ddof=1) * (scale if scale > 0 else 1.0)
    q75, q25 = np.percentile(y, [75, 25])
    spread = min(sd, (q75 - q25) / 1.34)
    if spread <= 0:
        # heavy ties can zero the IQR while sd stays positive
        spread = sd
    return 0.9 * spread * y.size ** (-0.2)


def fit_kde(y, bandwidth: float | None = None, clamp: float = DEFAULT_CLAMP) -> "MarginalEstimate":
    """Fit the response margin with a Gaussian kernel density estimate.

    Parameters
    ----------
    y : array_like
        Observed responses.
    bandwidth : float, optional
        Kernel standard deviation in response units. Silverman's rule is
        used when omitted.
    clamp : float
        CDF outputs are clamped to ``[clamp, 1 - clamp]``.
    """
    y = np.asarray(y, dtype=float).ravel()
    if y.size < 2:
        raise EmptySample(f"need at least 2 responses, got {y.size}")
    if not np.all(np.isfinite(y)):
        raise DegenerateSample("responses must be finite")
    if np.ptp(y) == 0:
        raise DegenerateSample("all responses are equal")
    if bandwidth is None:
        bandwidth = silverman_bandwidth(y)
        if not bandwidth > 0:
            raise DegenerateSample("response spread is too small for a positive bandwidth")
    elif not bandwidth > 0:
        raise NonPositiveBandwidth(f"bandwidth must be > 0, got {bandwidth}")
    return MarginalEstimate(np.sort(y), float(bandwidth), float(clamp))


@dataclass(frozen=True, eq=False)
class MarginalEstimate:
    """Kernel mixture ``(1/n) sum_i N(y_i, h^2)`` with clamped CDF."""

    sample: np.ndarray
    bandwidth: float
    support_clamp: float = DEFAULT_CLAMP

    def __post_init__(self):
        sample = np.sort(np.asarray(self.sample, dtype=float).ravel())
        sample.setflags(write=False)
        object.__setattr__(self, "sample", sample)
        if sample.size < 2:
            raise EmptySample(f"need at least 2 responses, got {sample.size}")
        if np.ptp(sample) == 0:
            raise DegenerateSample("all responses are equal")
        if not self.bandwidth > 0:
            raise NonPositiveBandwidth(f"bandwidth must be > 0, got {self.bandwidth}")
        if not 0 < self.support_clamp < 0.5:
            raise ValueError("support_clamp must lie in (0, 0.5)")

    @property
    def n(self) -> int:
        return self.sample.size

    @property
    def support(self) -> tuple[float, float]:
        """Extended grid bounds ``[min - 10h, max + 10h]``."""
        h = self.bandwidth
        return float(self.sample[0] - 10 * h), float(self.sample[-1] + 10 * h)

    # -- kernel sums -------------------------------------------------------

    def _kernel_sum(self, y, kernel):
        y = np.asarray(y, dtype=float)
        flat = y.ravel()
        out = np.empty(flat.size)
        step = max(1, _CHUNK // self.n)
        h = self.bandwidth
        for start in range(0, flat.size, step):
            u = (flat[start:start + step, None] - self.sample[None, :]) / h
            out[start:start + step] = kernel(u).mean(axis=1)
        return out.reshape(y.shape)

    def pdf(self, y):
        """Kernel density ``(1/(n h)) sum_i phi((y - y_i)/h)``."""
        dens = self._kernel_sum(y, lambda u: np.exp(-0.5 * u * u))
        return dens / (_SQRT_2PI * self.bandwidth)

    def raw_cdf(self, y):
        """Unclamped mixture CDF."""
        return self._kernel_sum(y, ndtr)

    def raw_sf(self, y):
        """Unclamped mixture survival function, accurate in the upper tail."""
        return self._kernel_sum(y, lambda u: ndtr(-u))

    def cdf(self, y):
        eps = self.support_clamp
        return np.clip(self.raw_cdf(y), eps, 1.0 - eps)

    def to_pseudo(self, y):
        """Pseudo responses ``Phi^{-1}(cdf(y))``; finite thanks to the clamp."""
        return ndtri(self.cdf(y))

    def normal_score(self, y):
        """Unclamped ``Phi^{-1}(F_Y(y))``.

        Uses the survival function above the median so the upper tail keeps
        full precision. Values are limited to +-37 where Phi underflows.
        """
        y = np.asarray(y, dtype=float)
        cdf = self.raw_cdf(y)
        sf = self.raw_sf(y)
        with np.errstate(divide="ignore"):
            z = np.where(cdf <= 0.5, ndtri(cdf), -ndtri(sf))
        return np.clip(z, -_Z_LIMIT, _Z_LIMIT)

    def score_and_pdf(self, y):
        """``(normal_score(y), pdf(y))`` from one pass over the kernel matrix."""
        y = np.asarray(y, dtype=float)
        shape = y.shape
        y = y.ravel()
        score = np.empty(y.size)
        dens = np.empty(y.size)
        step = max(1, _CHUNK // self.n)
        h = self.bandwidth
        for start in range(0, y.size, step):
            u = (y[start:start + step, None] - self.sample[None, :]) / h
            cdf = ndtr(u).mean(axis=1)
            upper = cdf > 0.5
            with np.errstate(divide="ignore"):
                z = ndtri(cdf)
                if upper.any():
                    z[upper] = -ndtri(ndtr(-u[upper]).mean(axis=1))
            score[start:start + step] = z
            dens[start:start + step] = np.exp(-0.5 * u * u).mean(axis=1)
        dens /= _SQRT_2PI * h
        return np.clip(score, -_Z_LIMIT, _Z_LIMIT).reshape(shape), dens.reshape(shape)

    # -- inversion ---------------------------------------------------------

    def inverse_normal_score(self, z, exact: bool = True):
        """Solve ``normal_score(y) = z`` for y.

        With ``exact=False`` a cubic spline through exact solutions on a
        fixed z-grid is used inside ``|z| <= 12``; this is the batch path.
        """
        z = np.asarray(z, dtype=float)
        if exact:
            return self._solve_normal_score(z)
        table = self._spline
        out = np.empty(z.shape)
        inside = np.abs(z) <= _TABLE_RANGE
        out[inside] = table(z[inside])
        if not np.all(inside):
            out[~inside] = self._solve_normal_score(z[~inside])
        return out

    @cached_property
    def _spline(self):
        knots = np.linspace(-_TABLE_RANGE, _TABLE_RANGE, _TABLE_KNOTS)
        return CubicSpline(knots, self._solve_normal_score(knots))

    def quantile(self, p, exact: bool = True):
        """Inverse of the (unclamped) CDF.

        Raises
        ------
        ProbabilityOutOfRange
            If any ``p`` is outside the open unit interval.
        """
        p = np.asarray(p, dtype=float)
        if np.any(~(p > 0) | ~(p < 1)):
            raise ProbabilityOutOfRange("probabilities must lie in (0, 1)")
        return self.inverse_normal_score(ndtri(p), exact=exact)

    def _solve_normal_score(self, z):
        # Safeguarded Newton on a bracket: bisect whenever the Newton
        # iterate leaves the current bracket.
        z = np.clip(np.asarray(z, dtype=float), -_Z_LIMIT, _Z_LIMIT)
        shape = z.shape
        z = z.ravel()
        lo_b, hi_b = self.support
        width = hi_b - lo_b
        if z.size:
            step = width
            while self.normal_score(lo_b) > z.min():
                lo_b -= step
                step *= 2
            step = width
            while self.normal_score(hi_b) < z.max():
                hi_b += step
                step *= 2
        lo = np.full(z.shape, lo_b)
        hi = np.full(z.shape, hi_b)

        # start from the empirical quantile of the sample
        y = np.clip(np.quantile(self.sample, ndtr(z)), lo, hi)
        active = np.ones(z.shape, dtype=bool)
        for _ in range(200):
            idx = np.flatnonzero(active)
            if idx.size == 0:
                break
            ya = y[idx]
            score, dens = self.score_and_pdf(ya)
            f = score - z[idx]
            below = f < 0
            lo[idx[below]] = ya[below]
            hi[idx[~below]] = ya[~below]
            # d score / dy = pdf(y) / phi(score)
            slope = dens * _SQRT_2PI * np.exp(0.5 * score * score)
            with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
                newton = ya - f / slope
            la, ha = lo[idx], hi[idx]
            ok = np.isfinite(newton) & (newton >= la) & (newton <= ha)
            scale = np.maximum(1.0, np.abs(ya))
            done = (np.abs(f) < 1e-13) | (ha - la < 4e-16 * scale)
            y[idx] = np.where(done, ya, np.where(ok, newton, 0.5 * (la + ha)))
            active[idx[done]] = False
        return y.reshape(shape)
