"""Hamiltonian Monte Carlo with dual-averaging step-size adaptation."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .copula_model import LogPosterior, PriorSpec
from .errors import AdaptationFailure, NonFiniteTrajectory, ValidationError

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class HmcSettings:
    n_burnin: int = 2000
    n_keep: int = 10000
    leapfrog_steps: int = 50
    initial_step: float = 0.01
    target_accept: float = 0.8
    mass_diag: np.ndarray | None = None
    seed: int = 0
    # each trajectory uses step * U(1 - jitter, 1 + jitter) to break periodicity
    step_jitter: float = 0.2

    def __post_init__(self):
        if self.n_keep < 1:
            raise ValidationError("n_keep must be >= 1")
        if self.n_burnin < 0:
            raise ValidationError("n_burnin must be >= 0")
        if self.leapfrog_steps < 1:
            raise ValidationError("leapfrog_steps must be >= 1")
        if not self.initial_step > 0:
            raise ValidationError("initial_step must be > 0")
        if not 0 <= self.step_jitter < 1:
            raise ValidationError("step_jitter must lie in [0, 1)")
        if not 0 < self.target_accept < 1:
            raise ValidationError("target_accept must lie in (0, 1)")
        if self.mass_diag is not None:
            mass = np.asarray(self.mass_diag, dtype=float)
            if np.any(~(mass > 0)):
                raise ValidationError("mass_diag entries must be > 0")
            object.__setattr__(self, "mass_diag", mass)


@dataclass(frozen=True, eq=False)
class PosteriorDraws:
    """Retained HMC iterates, one row per draw."""

    draws: np.ndarray
    accept_rate: float
    ess: np.ndarray
    step_size: float = float("nan")
    n_divergent: int = 0
    diagnostics: dict = field(default_factory=dict)

    @property
    def n_draws(self) -> int:
        return self.draws.shape[0]

    def mean(self) -> np.ndarray:
        return self.draws.mean(axis=0)

    def sd(self) -> np.ndarray:
        return self.draws.std(axis=0, ddof=1)

    def mcse(self) -> np.ndarray:
        """Monte-Carlo standard error of the posterior mean, per coordinate."""
        return self.sd() / np.sqrt(self.ess)


def leapfrog(position, momentum, step: float, steps: int,
             gradient: Callable[[np.ndarray], np.ndarray], inv_mass=None):
    """Integrate Hamiltonian dynamics for ``steps`` leapfrog steps.

    ``gradient`` returns the gradient of the log target. Raises
    :class:`NonFiniteTrajectory` as soon as any coordinate becomes
    non-finite.
    """
    x = np.array(position, dtype=float)
    r = np.array(momentum, dtype=float)
    if steps == 0:
        return x, r
    grad = gradient(x)
    x, r, _ = _integrate(x, r, grad, step, steps, lambda q: (0.0, gradient(q)), inv_mass)
    return x, r


def _integrate(x, r, grad, step, steps, logp_and_grad, inv_mass):
    inv_mass = 1.0 if inv_mass is None else inv_mass
    logp = None
    r = r + 0.5 * step * grad
    for i in range(steps):
        x = x + step * inv_mass * r
        logp, grad = logp_and_grad(x)
        if i < steps - 1:
            r = r + step * grad
        else:
            r = r + 0.5 * step * grad
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(r))):
            raise NonFiniteTrajectory(f"trajectory diverged at leapfrog step {i + 1}")
    return x, r, (logp, grad)


class _DualAveraging:
    # Hoffman & Gelman (2014) step-size adaptation
    gamma, t0, kappa = 0.05, 10.0, 0.75

    def __init__(self, step, target):
        self.mu = np.log(10.0 * step)
        self.target = target
        self.h_bar = 0.0
        self.log_step = np.log(step)
        self.log_step_bar = 0.0
        self.t = 0

    def update(self, accept_prob):
        self.t += 1
        t = self.t
        eta = 1.0 / (t + self.t0)
        self.h_bar = (1.0 - eta) * self.h_bar + eta * (self.target - accept_prob)
        self.log_step = self.mu - np.sqrt(t) / self.gamma * self.h_bar
        w = t ** (-self.kappa)
        self.log_step_bar = w * self.log_step + (1.0 - w) * self.log_step_bar
        return np.exp(self.log_step)

    @property
    def final_step(self):
        return float(np.exp(self.log_step_bar))


def run_chain(target, settings: HmcSettings, initial=None) -> PosteriorDraws:
    """Run one HMC chain on any target exposing ``dim`` and ``logp_and_grad``."""
    dim = target.dim
    rng = np.random.default_rng(settings.seed)
    mass = np.ones(dim) if settings.mass_diag is None else settings.mass_diag
    if mass.size != dim:
        raise ValidationError(f"mass_diag has length {mass.size}, target dimension is {dim}")
    inv_mass = 1.0 / mass
    sqrt_mass = np.sqrt(mass)

    x = np.zeros(dim) if initial is None else np.array(initial, dtype=float)
    logp, grad = target.logp_and_grad(x)
    if not (np.isfinite(logp) and np.all(np.isfinite(grad))):
        raise ValidationError("log posterior is not finite at the initial point")

    step = settings.initial_step
    adapt = _DualAveraging(step, settings.target_accept)
    L = settings.leapfrog_steps
    n_total = settings.n_burnin + settings.n_keep
    draws = np.empty((settings.n_keep, dim))
    accept_probs = np.empty(n_total)
    n_divergent = 0
    n_accepted = 0

    for it in range(n_total):
        r0 = sqrt_mass * rng.standard_normal(dim)
        eps = step * (1.0 + settings.step_jitter * (2.0 * rng.random() - 1.0))
        h0 = logp - 0.5 * np.sum(inv_mass * r0 * r0)
        try:
            x1, r1, (logp1, grad1) = _integrate(x, r0, grad, eps, L, target.logp_and_grad, inv_mass)
            with np.errstate(over="ignore", invalid="ignore"):
                h1 = logp1 - 0.5 * np.sum(inv_mass * r1 * r1)
            if np.isfinite(h1):
                accept_prob = float(np.exp(min(0.0, h1 - h0)))
            else:
                n_divergent += 1
                accept_prob = 0.0
        except NonFiniteTrajectory:
            n_divergent += 1
            accept_prob = 0.0
        # uniform drawn every iteration so the stream does not depend on divergences
        u = rng.random()
        accept_probs[it] = accept_prob
        if u < accept_prob:
            x, logp, grad = x1, logp1, grad1
            if it >= settings.n_burnin:
                n_accepted += 1

        if it < settings.n_burnin:
            step = adapt.update(accept_prob)
            if it == settings.n_burnin - 1:
                step = adapt.final_step
                tail = accept_probs[max(0, it - settings.n_burnin // 10):it + 1]
                if tail.mean() < 0.01:
                    raise AdaptationFailure(
                        f"mean acceptance {tail.mean():.4f} at the end of burn-in"
                    )
                log.debug("adapted step size %.4g", step)
        else:
            draws[it - settings.n_burnin] = x

    keep_probs = accept_probs[settings.n_burnin:]
    return PosteriorDraws(
        draws=draws,
        accept_rate=n_accepted / settings.n_keep,
        ess=effective_sample_size(draws),
        step_size=float(step),
        n_divergent=n_divergent,
        diagnostics={"mean_accept_prob": float(keep_probs.mean())},
    )


def sample(z, B, spec: PriorSpec, settings: HmcSettings, fixed_hyper=None) -> PosteriorDraws:
    """Sample the IC-NLM posterior, starting at ``beta = 0, hyper = 0``.

    With ``fixed_hyper`` the hyperparameters are frozen and only beta is
    sampled; the draws then have ``p`` columns.
    """
    target = LogPosterior(z, B, spec, fixed_hyper=fixed_hyper)
    return run_chain(target, settings)


def effective_sample_size(draws) -> np.ndarray:
    """Per-column ESS using Geyer's initial monotone sequence estimator."""
    x = np.asarray(draws, dtype=float)
    x = x[:, None] if x.ndim == 1 else x
    n, d = x.shape
    out = np.empty(d)
    if n < 4:
        out[:] = n
        return out
    centered = x - x.mean(axis=0)
    size = 1 << int(np.ceil(np.log2(2 * n)))
    f = np.fft.rfft(centered, n=size, axis=0)
    acov = np.fft.irfft(f * np.conj(f), n=size, axis=0)[:n] / n
    for j in range(d):
        if acov[0, j] <= 0:
            out[j] = n
            continue
        rho = acov[:, j] / acov[0, j]
        # sums of adjacent pairs, truncated at the first negative pair
        pairs = rho[: n - n % 2].reshape(-1, 2).sum(axis=1)
        neg = np.flatnonzero(pairs < 0)
        pairs = pairs[: neg[0]] if neg.size else pairs
        pairs = np.minimum.accumulate(pairs)
        tau = -1.0 + 2.0 * pairs.sum()
        out[j] = n / max(tau, 1.0 / np.log10(max(n, 10)))
    return out
