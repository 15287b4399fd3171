"""Gaussian variational approximation with factored covariance.

``q(theta) = N(mu, U U' + D^2)`` where ``U`` is a ``dim x k`` lower
triangular factor and ``D = diag(d)``. The ELBO is maximised by stochastic
gradient ascent with reparameterised gradients and ADADELTA step sizes.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .copula_model import LogPosterior, PriorSpec
from .errors import DimensionMismatch, NonFiniteElbo, SingularCovariance, ValidationError

log = logging.getLogger(__name__)

LOG_2PI = float(np.log(2.0 * np.pi))
ADADELTA_RHO = 0.95
ADADELTA_EPS = 1e-6
INIT_DIAG = 0.1
CONVERGENCE_WINDOW = 100
CONVERGENCE_RTOL = 1e-4
DEFAULT_MAX_ITER = 20000


@dataclass(frozen=True, eq=False)
class VariationalParams:
    mu: np.ndarray
    factor: np.ndarray
    diag: np.ndarray

    def __post_init__(self):
        mu = np.asarray(self.mu, dtype=float).ravel()
        factor = np.asarray(self.factor, dtype=float)
        if factor.ndim == 1:
            factor = factor[:, None]
        diag = np.asarray(self.diag, dtype=float).ravel()
        dim, k = factor.shape
        if mu.size != dim or diag.size != dim:
            raise DimensionMismatch(
                f"mu ({mu.size}), factor rows ({dim}) and diag ({diag.size}) must agree"
            )
        if not 1 <= k <= dim:
            raise DimensionMismatch(f"need 1 <= k <= {dim}, got k={k}")
        if np.any(factor[~_lower_mask(dim, k)] != 0):
            raise DimensionMismatch("factor entries above the diagonal must be zero")
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "factor", factor)
        object.__setattr__(self, "diag", diag)

    @property
    def dim(self) -> int:
        return self.mu.size

    @property
    def k(self) -> int:
        return self.factor.shape[1]

    def covariance(self) -> np.ndarray:
        return self.factor @ self.factor.T + np.diag(self.diag ** 2)

    def sd(self) -> np.ndarray:
        return np.sqrt(np.sum(self.factor ** 2, axis=1) + self.diag ** 2)

    def pack(self) -> np.ndarray:
        """``lambda = (mu, vech(U), d)``; vech stacks the lower triangle by column."""
        return np.concatenate([self.mu, self.factor.T[_lower_mask(self.dim, self.k).T], self.diag])

    @classmethod
    def unpack(cls, lam, dim: int, k: int) -> "VariationalParams":
        lam = np.asarray(lam, dtype=float)
        n_factor = _n_vech(dim, k)
        factor_t = np.zeros((k, dim))
        factor_t[_lower_mask(dim, k).T] = lam[dim:dim + n_factor]
        return cls(lam[:dim].copy(), factor_t.T.copy(), lam[dim + n_factor:].copy())

    @classmethod
    def initial(cls, dim: int, k: int, diag: float = INIT_DIAG) -> "VariationalParams":
        return cls(np.zeros(dim), np.zeros((dim, k)), np.full(dim, diag))


def _lower_mask(dim, k):
    return np.tril(np.ones((dim, k), dtype=bool))


def _n_vech(dim, k):
    return int(_lower_mask(dim, k).sum())


@dataclass(frozen=True, eq=False)
class VariationalFit:
    params: VariationalParams
    elbo_trace: np.ndarray
    iterations_run: int
    converged: bool

    def mean(self) -> np.ndarray:
        return self.params.mu

    def sd(self) -> np.ndarray:
        return self.params.sd()


def sample_param(lam: VariationalParams, xi, delta) -> np.ndarray:
    """Reparameterised draw ``mu + U xi + d * delta``.

    ``xi`` and ``delta`` may carry a leading batch axis.
    """
    xi = np.asarray(xi, dtype=float)
    delta = np.asarray(delta, dtype=float)
    if xi.shape[-1] != lam.k or delta.shape[-1] != lam.dim:
        raise DimensionMismatch(
            f"expected xi of length {lam.k} and delta of length {lam.dim}, "
            f"got {xi.shape[-1]} and {delta.shape[-1]}"
        )
    return lam.mu + xi @ lam.factor.T + lam.diag * delta


class _Woodbury:
    # inverse and log-determinant of U U' + D^2 in O(dim k^2)

    def __init__(self, lam: VariationalParams):
        d2 = lam.diag ** 2
        self.dense = None
        if np.any(d2 == 0):
            cov = lam.covariance()
            try:
                chol = np.linalg.cholesky(cov)
            except np.linalg.LinAlgError:
                raise SingularCovariance("covariance U U' + D^2 is singular") from None
            self.dense = chol
            self.logdet = 2.0 * np.sum(np.log(np.diag(chol)))
            return
        self.inv_d2 = 1.0 / d2
        w = lam.factor * self.inv_d2[:, None]  # D^-2 U
        inner = np.eye(lam.k) + lam.factor.T @ w
        self.inner_chol = np.linalg.cholesky(inner)
        self.w = w
        self.logdet = np.sum(np.log(d2)) + 2.0 * np.sum(np.log(np.diag(self.inner_chol)))

    def solve(self, x):
        # x: (m, dim) rows -> rows of Sigma^{-1} x
        if self.dense is not None:
            y = np.linalg.solve(self.dense, x.T)
            return np.linalg.solve(self.dense.T, y).T
        t = x @ self.w  # (m, k)
        t = np.linalg.solve(self.inner_chol.T, np.linalg.solve(self.inner_chol, t.T)).T
        return x * self.inv_d2 - t @ self.w.T


def log_q(lam: VariationalParams, theta) -> np.ndarray | float:
    """Log density of ``q`` at ``theta`` (one point or a batch of rows)."""
    theta = np.asarray(theta, dtype=float)
    single = theta.ndim == 1
    values, _ = _log_q_and_grad(lam, np.atleast_2d(theta))
    return float(values[0]) if single else values


def _log_q_and_grad(lam, theta):
    wb = _Woodbury(lam)
    dev = theta - lam.mu
    sol = wb.solve(dev)
    quad = np.sum(dev * sol, axis=1)
    values = -0.5 * (lam.dim * LOG_2PI + wb.logdet + quad)
    return values, -sol


def _draw_noise(rng, M, lam):
    xi = rng.standard_normal((M, lam.k))
    delta = rng.standard_normal((M, lam.dim))
    return xi, delta


def _estimates(lam, logh_grad, xi, delta):
    thetas = sample_param(lam, xi, delta)
    logh, grad_h = logh_grad(thetas)
    logq, grad_q = _log_q_and_grad(lam, thetas)
    g = grad_h - grad_q
    M = xi.shape[0]
    grad_mu = g.mean(axis=0)
    grad_factor = np.tril(g.T @ xi / M)
    grad_diag = np.mean(g * delta, axis=0)
    elbo = float(np.mean(logh - logq))
    return elbo, grad_mu, grad_factor, grad_diag


def elbo_estimate(lam: VariationalParams, logh, M: int, seed) -> float:
    """Monte-Carlo ELBO ``mean(log h - log q)`` over ``M`` reparameterised draws.

    ``logh`` maps a batch of parameter rows to log target values.
    """
    if M < 1:
        raise ValidationError("M must be >= 1")
    rng = np.random.default_rng(seed)
    xi, delta = _draw_noise(rng, M, lam)
    thetas = sample_param(lam, xi, delta)
    return float(np.mean(np.asarray(logh(thetas)) - log_q(lam, thetas)))


def elbo_gradient_estimate(lam: VariationalParams, logh_grad, M: int, seed):
    """Reparameterisation gradient of the ELBO.

    ``logh_grad`` maps a batch of rows to ``(log h, grad log h)``. Returns
    the gradient blocks ``(mu, factor, diag)``; the factor block is lower
    triangular, matching ``vech``.
    """
    if M < 1:
        raise ValidationError("M must be >= 1")
    rng = np.random.default_rng(seed)
    xi, delta = _draw_noise(rng, M, lam)
    _, g_mu, g_factor, g_diag = _estimates(lam, logh_grad, xi, delta)
    return g_mu, g_factor, g_diag


@dataclass(frozen=True, eq=False)
class AdadeltaState:
    sq_grad: np.ndarray
    sq_step: np.ndarray
    rho: float = ADADELTA_RHO
    eps: float = ADADELTA_EPS

    @classmethod
    def zeros(cls, size: int, rho: float = ADADELTA_RHO, eps: float = ADADELTA_EPS):
        return cls(np.zeros(size), np.zeros(size), rho, eps)


def adadelta_step(state: AdadeltaState, gradient):
    """One ADADELTA update for gradient *ascent*.

    Returns the new state and the step to add to the parameters.
    """
    g = np.asarray(gradient, dtype=float)
    rho, eps = state.rho, state.eps
    sq_grad = rho * state.sq_grad + (1.0 - rho) * g * g
    step = np.sqrt(state.sq_step + eps) / np.sqrt(sq_grad + eps) * g
    sq_step = rho * state.sq_step + (1.0 - rho) * step * step
    return AdadeltaState(sq_grad, sq_step, rho, eps), step


def _has_converged(trace, window=CONVERGENCE_WINDOW, rtol=CONVERGENCE_RTOL):
    # two consecutive non-overlapping window means agree to rtol
    if len(trace) < 2 * window:
        return False
    last = np.mean(trace[-window:])
    prev = np.mean(trace[-2 * window:-window])
    return abs(last - prev) < rtol * abs(last)


def fit_target(logh_grad, dim: int, k: int, M: int = 50, max_iter: int = DEFAULT_MAX_ITER,
               seed=0, init: VariationalParams | None = None) -> VariationalFit:
    """Run the SGA loop against any batched ``logh_grad`` target."""
    if k < 1 or k > dim:
        raise ValidationError(f"k must lie in [1, {dim}], got {k}")
    if M < 1:
        raise ValidationError("M must be >= 1")
    if max_iter < 1:
        raise ValidationError("max_iter must be >= 1")
    rng = np.random.default_rng(seed)
    lam = VariationalParams.initial(dim, k) if init is None else init
    mask = _lower_mask(dim, k)
    packed = lam.pack()
    state = AdadeltaState.zeros(packed.size)
    trace = []
    converged = False
    for it in range(max_iter):
        xi, delta = _draw_noise(rng, M, lam)
        with np.errstate(over="ignore", invalid="ignore"):
            elbo, g_mu, g_factor, g_diag = _estimates(lam, logh_grad, xi, delta)
        grad = np.concatenate([g_mu, g_factor.T[mask.T], g_diag])
        if not (np.isfinite(elbo) and np.all(np.isfinite(grad))):
            raise NonFiniteElbo(f"non-finite ELBO or gradient at iteration {it}", state=lam)
        trace.append(elbo)
        state, step = adadelta_step(state, grad)
        packed = packed + step
        lam = VariationalParams.unpack(packed, dim, k)
        if _has_converged(trace):
            converged = True
            break
    log.debug("VI stopped after %d iterations (converged=%s)", len(trace), converged)
    return VariationalFit(lam, np.asarray(trace), len(trace), converged)


def fit(z, B, spec: PriorSpec, k: int = 3, M: int = 50, max_iter: int = DEFAULT_MAX_ITER,
        seed=0, fixed_hyper=None) -> VariationalFit:
    """Fit the factored Gaussian approximation to the IC-NLM posterior."""
    target = LogPosterior(z, B, spec, fixed_hyper=fixed_hyper)
    return fit_target(target.logp_and_grad_batch, target.dim, k, M, max_iter, seed)
