"""Implicit-copula neural linear model: priors, scaling factors, likelihood.

The working parameter vector is ``theta = (beta, hyper)`` with

* Ridge:     ``hyper = (log tau^2,)``
* Horseshoe: ``hyper = (log lambda_1^2, ..., log lambda_p^2, log tau)``

The prior covariance of ``beta`` is diagonal with entries ``v_j`` (``tau^2``
for ridge, ``lambda_j^2`` for horseshoe). Each observation has scaling
factor ``s_i = (1 + sum_j psi_ij^2 v_j)^(-1/2)`` and conditional density
``z_i | beta, theta ~ N(s_i psi_i' beta, s_i^2)``.

All log densities are evaluated in the transformed space, so the log
Jacobians of the exp transforms are part of :func:`log_prior`.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np
from scipy.special import expit

from .errors import LengthMismatch, SpecMismatch, NonFiniteValue, ZeroColumn

LOG_2PI = float(np.log(2.0 * np.pi))
LOG_PI = float(np.log(np.pi))
RIDGE_SHAPE = 0.5
DEFAULT_NU = 2.5
# lambda_j | tau is half-Cauchy with scale tau (not tau^2)
HALF_CAUCHY_LOCAL_SCALE = "tau"


class PriorKind(str, Enum):
    RIDGE = "ridge"
    HORSESHOE = "horseshoe"


@dataclass(frozen=True)
class PriorSpec:
    """Shrinkage prior on the basis weights.

    ``nu`` is the Weibull scale of the ridge hyperprior ``tau^2 ~ WB(1/2, nu)``
    and is ignored for the horseshoe.
    """

    kind: PriorKind = PriorKind.RIDGE
    nu: float = DEFAULT_NU

    def __post_init__(self):
        object.__setattr__(self, "kind", PriorKind(self.kind))
        if self.kind is PriorKind.RIDGE and not self.nu > 0:
            raise SpecMismatch(f"ridge prior needs nu > 0, got {self.nu}")

    @classmethod
    def ridge(cls, nu: float = DEFAULT_NU) -> "PriorSpec":
        return cls(PriorKind.RIDGE, nu)

    @classmethod
    def horseshoe(cls) -> "PriorSpec":
        return cls(PriorKind.HORSESHOE)

    def n_hyper(self, p: int) -> int:
        return 1 if self.kind is PriorKind.RIDGE else p + 1

    def dim(self, p: int) -> int:
        """Length ``p_theta`` of the working parameter vector."""
        return p + self.n_hyper(p)


@dataclass(frozen=True, eq=False)
class ParamVector:
    beta: np.ndarray
    hyper: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "beta", np.atleast_1d(np.asarray(self.beta, dtype=float)))
        object.__setattr__(self, "hyper", np.atleast_1d(np.asarray(self.hyper, dtype=float)))

    @property
    def p(self) -> int:
        return self.beta.size

    def flat(self) -> np.ndarray:
        return np.concatenate([self.beta, self.hyper])

    @classmethod
    def from_flat(cls, theta, p: int) -> "ParamVector":
        theta = np.asarray(theta, dtype=float)
        return cls(theta[:p].copy(), theta[p:].copy())

    @classmethod
    def zeros(cls, spec: PriorSpec, p: int) -> "ParamVector":
        return cls(np.zeros(p), np.zeros(spec.n_hyper(p)))


def validate_basis(B) -> np.ndarray:
    """Return ``B`` as a float matrix after basis-matrix checks."""
    B = np.asarray(B, dtype=float)
    if B.ndim == 1:
        B = B[:, None]
    if B.ndim != 2 or B.shape[0] < 1 or B.shape[1] < 1:
        raise LengthMismatch(f"basis matrix must be n x p with n, p >= 1, got shape {B.shape}")
    bad = ~np.isfinite(B)
    if bad.any():
        i, j = np.argwhere(bad)[0]
        raise NonFiniteValue("non-finite basis entry", line=int(i) + 1, column=int(j) + 1)
    zero = np.flatnonzero(~B.any(axis=0))
    if zero.size:
        raise ZeroColumn(f"basis column {int(zero[0])} is identically zero")
    return B


def _check(spec: PriorSpec, params: ParamVector, p: int | None = None):
    p = params.p if p is None else p
    if params.p != p:
        raise SpecMismatch(f"beta has length {params.p}, basis has {p} columns")
    if params.hyper.size != spec.n_hyper(p):
        raise SpecMismatch(
            f"{spec.kind.value} prior with p={p} needs {spec.n_hyper(p)} hyperparameters, "
            f"got {params.hyper.size}"
        )


def precision_diag(spec: PriorSpec, params: ParamVector) -> np.ndarray:
    """Diagonal of ``P(theta)^{-1}``, i.e. the prior variances of beta."""
    _check(spec, params)
    with np.errstate(over="ignore"):
        return _prior_variances(spec, params.hyper[None, :], params.p)[0]


def _prior_variances(spec, hyper, p):
    # hyper: (m, n_hyper) -> (m, p); callers own the floating-point error state
    if spec.kind is PriorKind.RIDGE:
        return np.repeat(np.exp(hyper[:, :1]), p, axis=1)
    return np.exp(hyper[:, :p])


def scaling_factors(B, spec: PriorSpec, params: ParamVector) -> np.ndarray:
    """``s_i = (1 + psi_i' P^{-1} psi_i)^(-1/2)`` for every row of ``B``."""
    B = np.asarray(B, dtype=float)
    B = B[None, :] if B.ndim == 1 else B
    _check(spec, params, B.shape[1])
    with np.errstate(over="ignore"):
        v = _prior_variances(spec, params.hyper[None, :], params.p)[0]
        return 1.0 / np.sqrt(1.0 + (B * B) @ v)


def log_conditional_likelihood(z, B, spec: PriorSpec, params: ParamVector) -> float:
    """Gaussian factor ``log phi_n(z; S B beta, S^2)`` of the conditional likelihood.

    The parameter-free factor ``prod p_Y(y_i)/phi_1(z_i)`` is not included.
    """
    target = LogPosterior(z, B, spec)
    _check(spec, params, target.p)
    return float(target.evaluate(params.flat()[None, :])[1][0])


def log_prior(spec: PriorSpec, params: ParamVector) -> float:
    _check(spec, params)
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        value, _ = _log_prior_terms(spec, params.beta[None, :], params.hyper[None, :])
    return float(value[0])


def log_posterior_unnorm(z, B, spec: PriorSpec, params: ParamVector) -> float:
    target = LogPosterior(z, B, spec)
    _check(spec, params, target.p)
    return float(target.logp(params.flat()))


def grad_log_posterior(z, B, spec: PriorSpec, params: ParamVector) -> np.ndarray:
    """Analytic gradient of :func:`log_posterior_unnorm` in the working space."""
    target = LogPosterior(z, B, spec)
    _check(spec, params, target.p)
    return target.logp_and_grad(params.flat())[1]


def _log_prior_terms(spec, beta, hyper):
    """Log prior (with transform Jacobians) and its gradient, batched over rows."""
    m, p = beta.shape
    grad = np.zeros((m, p + hyper.shape[1]))
    if spec.kind is PriorKind.RIDGE:
        eta = hyper[:, 0]
        tau2 = np.exp(eta)
        ss = np.sum(beta * beta, axis=1)
        value = -0.5 * p * LOG_2PI - 0.5 * p * eta - 0.5 * ss / tau2
        grad[:, :p] = -beta / tau2[:, None]
        d_eta = -0.5 * p + 0.5 * ss / tau2
        # tau^2 ~ Weibull(shape a, scale nu); log-Jacobian of exp is +eta
        a, b = RIDGE_SHAPE, spec.nu
        w = eta - np.log(b)
        value = value + np.log(a / b) + (a - 1.0) * w - np.exp(a * w) + eta
        d_eta = d_eta + a - a * np.exp(a * w)
        grad[:, p] = d_eta
    else:
        eta = hyper[:, :p]
        omega = hyper[:, p]
        lam2 = np.exp(eta)
        value = np.sum(-0.5 * LOG_2PI - 0.5 * eta - 0.5 * beta * beta / lam2, axis=1)
        grad[:, :p] = -beta / lam2
        d_eta = -0.5 + 0.5 * beta * beta / lam2
        # lambda_j | tau ~ HC(0, tau), expressed in log lambda_j^2
        u = eta - 2.0 * omega[:, None]
        value = value + np.sum(-LOG_PI - omega[:, None] - np.logaddexp(0.0, u) + 0.5 * eta, axis=1)
        sig = expit(u)
        d_eta = d_eta + 0.5 - sig
        d_omega = np.sum(-1.0 + 2.0 * sig, axis=1)
        # tau ~ HC(0, 1), expressed in log tau
        value = value + np.log(2.0) - LOG_PI - np.logaddexp(0.0, 2.0 * omega) + omega
        d_omega = d_omega + 1.0 - 2.0 * expit(2.0 * omega)
        grad[:, p:2 * p] = d_eta
        grad[:, 2 * p] = d_omega
    return value, grad


class LogPosterior:
    """Unnormalized log posterior ``log p(theta | x, y)`` as an HMC / VI target.

    Parameters
    ----------
    z : array_like, shape (n,)
        Pseudo responses.
    B : array_like, shape (n, p)
        Basis matrix.
    spec : PriorSpec
    fixed_hyper : array_like, optional
        Freeze the hyperparameters at these working-space values. The target
        is then a function of ``beta`` only, an exact Gaussian.
    """

    def __init__(self, z, B, spec: PriorSpec, fixed_hyper=None):
        B = np.asarray(B, dtype=float)
        B = B[:, None] if B.ndim == 1 else B
        z = np.asarray(z, dtype=float).ravel()
        if z.size != B.shape[0]:
            raise LengthMismatch(f"z has {z.size} entries, basis has {B.shape[0]} rows")
        self.z = z
        self.B = B
        self.B2 = B * B
        self.row_sq = self.B2.sum(axis=1)
        self.spec = spec
        self.n, self.p = B.shape
        if fixed_hyper is not None:
            fixed_hyper = np.atleast_1d(np.asarray(fixed_hyper, dtype=float))
            if fixed_hyper.size != spec.n_hyper(self.p):
                raise SpecMismatch("fixed_hyper has the wrong length")
        self.fixed_hyper = fixed_hyper
        if fixed_hyper is not None:
            # hyperparameters frozen: s_i and the prior variances are constants
            h = fixed_hyper[None, :]
            with np.errstate(over="ignore"):
                self._v = _prior_variances(spec, h, self.p)[0]
            self._root = np.sqrt(1.0 + self.B2 @ self._v)
            self._zroot = self.z * self._root
            with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
                zero, _ = _log_prior_terms(spec, np.zeros((1, self.p)), h)
            self._prior_const = float(zero[0])
            self._lik_const = float(np.sum(-0.5 * LOG_2PI + np.log(self._root)))

    @property
    def dim(self) -> int:
        return self.p if self.fixed_hyper is not None else self.spec.dim(self.p)

    def evaluate(self, theta):
        """Batched evaluation.

        Returns ``(logp, loglik, grad)`` for ``theta`` of shape ``(m, dim)``;
        ``grad`` is with respect to the free coordinates only.
        """
        theta = np.atleast_2d(np.asarray(theta, dtype=float))
        if theta.shape[1] != self.dim:
            raise SpecMismatch(f"expected parameter dimension {self.dim}, got {theta.shape[1]}")
        p = self.p
        beta = theta[:, :p]
        if self.fixed_hyper is not None:
            r = self._zroot[None, :] - beta @ self.B.T
            quad = -0.5 * np.sum(r * r, axis=1)
            loglik = self._lik_const + quad
            prior = self._prior_const - 0.5 * np.sum(beta * beta / self._v, axis=1)
            grad = r @ self.B - beta / self._v
            return loglik + prior, loglik, grad
        hyper = theta[:, p:]

        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            v = _prior_variances(self.spec, hyper, p)
            if self.spec.kind is PriorKind.RIDGE:
                q = v[:, :1] * self.row_sq[None, :]
            else:
                q = v @ self.B2.T
            root = np.sqrt(1.0 + q)  # 1 / s_i
            r = self.z[None, :] * root - beta @ self.B.T
            loglik = np.sum(-0.5 * LOG_2PI + np.log(root) - 0.5 * r * r, axis=1)

            grad = np.empty((theta.shape[0], self.spec.dim(p)))
            grad[:, :p] = r @ self.B
            # d loglik / d q_i = (s_i^2 - r_i z_i s_i) / 2
            dq = 0.5 * (1.0 / (1.0 + q) - r * self.z[None, :] / root)
            if self.spec.kind is PriorKind.RIDGE:
                grad[:, p] = np.sum(dq * q, axis=1)
            else:
                grad[:, p:2 * p] = v * (dq @ self.B2)
                grad[:, 2 * p] = 0.0

            prior, prior_grad = _log_prior_terms(self.spec, beta, hyper)
            grad += prior_grad
        return loglik + prior, loglik, grad

    def logp(self, theta) -> float:
        return float(self.evaluate(theta)[0][0])

    def logp_and_grad(self, theta):
        logp, _, grad = self.evaluate(theta)
        return float(logp[0]), grad[0]

    def logp_and_grad_batch(self, thetas):
        logp, _, grad = self.evaluate(thetas)
        return logp, grad


def conditional_beta_posterior(z, B, spec: PriorSpec, hyper):
    """Exact Gaussian posterior of beta with hyperparameters held fixed.

    With ``s`` fixed the likelihood is ``sum_i -(z_i/s_i - psi_i' beta)^2 / 2``,
    so beta has precision ``B'B + P`` and mean ``(B'B + P)^{-1} B'(z/s)``.

    Returns
    -------
    mean, cov : ndarray
    """
    B = np.asarray(B, dtype=float)
    B = B[:, None] if B.ndim == 1 else B
    z = np.asarray(z, dtype=float)
    p = B.shape[1]
    params = ParamVector(np.zeros(p), hyper)
    _check(spec, params, p)
    v = precision_diag(spec, params)
    s = scaling_factors(B, spec, params)
    precision = B.T @ B + np.diag(1.0 / v)
    chol = np.linalg.cholesky(precision)
    cov = np.linalg.inv(precision)
    cov = 0.5 * (cov + cov.T)
    rhs = B.T @ (z / s)
    mean = np.linalg.solve(chol.T, np.linalg.solve(chol, rhs))
    return mean, cov


def log_evidence_fixed_hyper(z, B, spec: PriorSpec, hyper) -> float:
    """``log int exp(log_posterior_unnorm) d beta`` with hyperparameters fixed.

    The integrand is an exact Gaussian kernel in beta, so the integral is
    its peak value times ``(2 pi)^{p/2} |cov|^{1/2}``.
    """
    mean, cov = conditional_beta_posterior(z, B, spec, hyper)
    target = LogPosterior(z, B, spec, fixed_hyper=hyper)
    peak = target.logp(mean)
    sign, logdet = np.linalg.slogdet(cov)
    return peak + 0.5 * mean.size * LOG_2PI + 0.5 * logdet
