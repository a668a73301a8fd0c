"""Conditional paths and their regression targets.

A conditional Gaussian measure path is ``m_t N(eta_t, sigma_t^2 I)``. Its
probability-flow drift, growth rate and score are

    u = (sigma'_t / sigma_t) (x - eta_t) + eta'_t
    g = d/dt log m_t
    s = -(x - eta_t) / sigma_t^2

The Poisson-Brownian bridge between ``m0 delta_x0`` and ``m1 delta_x1`` is
the instance ``eta_t = (1-t) x0 + t x1``, ``sigma_t = nu sqrt(t (1-t))``,
``m_t = m0^(1-t) m1^t``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

FD_STEP = 1e-6


class DomainError(ValueError):
    pass


@dataclass
class BridgeBatch:
    """Training tuples drawn from conditional paths (one row per sample)."""

    t: np.ndarray
    x: np.ndarray
    u_target: np.ndarray
    g_target: np.ndarray
    eps_target: np.ndarray
    mass_weight: np.ndarray

    def __len__(self):
        return self.t.shape[0]

    @staticmethod
    def concat(batches) -> "BridgeBatch":
        return BridgeBatch(*(np.concatenate([getattr(b, f) for b in batches])
                             for f in ("t", "x", "u_target", "g_target", "eps_target", "mass_weight")))


def score_weight(t, nu):
    """Score-loss weight ``nu * sqrt(t (1 - t))``; makes ``weight * s_target = -eps``."""
    t = np.asarray(t, dtype=np.float64)
    return nu * np.sqrt(np.clip(t * (1.0 - t), 0.0, None))


def sample_pb_bridge(x0, x1, m0, m1, nu, t, rng=None, eps=None) -> BridgeBatch:
    """Draw points on Poisson-Brownian bridges and their conditional targets.

    Parameters
    ----------
    x0, x1 : array, shape (n, d) or (d,)
        Bridge endpoints.
    m0, m1 : array, shape (n,) or scalar
        Endpoint masses, both positive.
    nu : float
        Diffusion scale of the reference Brownian motion.
    t : array, shape (n,) or scalar
        Times strictly inside (0, 1).
    rng : numpy Generator, optional
        Source of the Gaussian noise when ``eps`` is not given.
    eps : array, shape (n, d), optional
        Standard-normal noise to use instead of drawing it.

    Returns
    -------
    BridgeBatch
        ``x = eta_t + nu sqrt(t(1-t)) eps``; ``u_target`` is the
        probability-flow drift, ``g_target = log m1 - log m0``,
        ``eps_target = eps`` and ``mass_weight = m_t / m0 = (m1/m0)^t``.
    """
    x0 = np.atleast_2d(np.asarray(x0, dtype=np.float64))
    x1 = np.atleast_2d(np.asarray(x1, dtype=np.float64))
    n, d = x0.shape
    t = np.broadcast_to(np.asarray(t, dtype=np.float64), (n,)).copy()
    m0 = np.broadcast_to(np.asarray(m0, dtype=np.float64), (n,))
    m1 = np.broadcast_to(np.asarray(m1, dtype=np.float64), (n,))
    if np.any(t <= 0) or np.any(t >= 1):
        raise DomainError("bridge time must lie strictly inside (0, 1)")
    if np.any(m0 <= 0) or np.any(m1 <= 0):
        raise DomainError("bridge masses must be positive")
    if eps is None:
        if rng is None:
            raise ValueError("need rng or eps")
        eps = rng.standard_normal((n, d))
    eps = np.asarray(eps, dtype=np.float64).reshape(n, d)
    tc = t[:, None]
    eta = (1.0 - tc) * x0 + tc * x1
    sd = nu * np.sqrt(tc * (1.0 - tc))
    x = eta + sd * eps
    u = (1.0 - 2.0 * tc) / (2.0 * tc * (1.0 - tc)) * (x - eta) + (x1 - x0)
    log_ratio = np.log(m1) - np.log(m0)
    return BridgeBatch(t, x, u, log_ratio, eps, np.exp(t * log_ratio))


@dataclass
class CgmpSpec:
    """Conditional Gaussian measure path given by callables of t.

    ``eta(t) -> (d,)``, ``sigma(t) -> float``, ``mass(t) -> float``. Analytic
    derivatives ``d_eta``, ``d_sigma`` and ``d_log_mass`` are optional; missing
    ones fall back to central differences with step ``FD_STEP``.
    """

    eta: Callable
    sigma: Callable
    mass: Callable
    d_eta: Optional[Callable] = None
    d_sigma: Optional[Callable] = None
    d_log_mass: Optional[Callable] = None

    def eta_dot(self, t):
        if self.d_eta is not None:
            return np.asarray(self.d_eta(t), dtype=np.float64)
        h = FD_STEP
        return (np.asarray(self.eta(t + h)) - np.asarray(self.eta(t - h))) / (2 * h)

    def sigma_dot(self, t):
        if self.d_sigma is not None:
            return float(self.d_sigma(t))
        h = FD_STEP
        return (self.sigma(t + h) - self.sigma(t - h)) / (2 * h)

    def log_mass_dot(self, t):
        if self.d_log_mass is not None:
            return float(self.d_log_mass(t))
        h = FD_STEP
        return (np.log(self.mass(t + h)) - np.log(self.mass(t - h))) / (2 * h)


def pb_bridge_spec(x0, x1, m0, m1, nu) -> CgmpSpec:
    """The Poisson-Brownian bridge as a CgmpSpec with analytic derivatives."""
    x0 = np.asarray(x0, dtype=np.float64)
    x1 = np.asarray(x1, dtype=np.float64)
    r = float(np.log(m1) - np.log(m0))
    return CgmpSpec(
        eta=lambda t: (1 - t) * x0 + t * x1,
        sigma=lambda t: nu * np.sqrt(t * (1 - t)),
        mass=lambda t: m0 ** (1 - t) * m1**t,
        d_eta=lambda t: x1 - x0,
        d_sigma=lambda t: nu * (1 - 2 * t) / (2 * np.sqrt(t * (1 - t))),
        d_log_mass=lambda t: r,
    )


def cgmp_targets(spec: CgmpSpec, t: float, x):
    """Conditional drift, growth and score of a CGMP at time ``t``.

    ``x`` may be one point ``(d,)`` or a batch ``(n, d)``.
    """
    sigma = float(spec.sigma(t))
    if not sigma > 0:
        raise DomainError(f"sigma_t = {sigma} is not positive at t = {t}")
    x = np.asarray(x, dtype=np.float64)
    eta = np.asarray(spec.eta(t), dtype=np.float64)
    diff = x - eta
    u = spec.sigma_dot(t) / sigma * diff + spec.eta_dot(t)
    g = spec.log_mass_dot(t)
    s = -diff / sigma**2
    return u, g, s


def _log_gauss(x, eta, sigma):
    d = x.shape[-1]
    return -0.5 * np.sum((x - eta) ** 2, axis=-1) / sigma**2 - d * np.log(sigma) - 0.5 * d * np.log(2 * np.pi)


@dataclass
class MarginalTargets:
    u: np.ndarray
    g: float
    s: np.ndarray
    density: float
    underflow: bool = False


def marginal_targets_oracle(conditions, t: float, x) -> MarginalTargets:
    """Posterior-weighted mixture of conditional targets at one point.

    ``conditions`` is a sequence of ``(weight, CgmpSpec)``; the marginal
    measure is ``sum_z weight_z m_t(z) N(x; eta_t(z), sigma_t(z)^2 I)``.
    """
    if not conditions:
        raise ValueError("need at least one condition")
    x = np.asarray(x, dtype=np.float64)
    logw, us, gs, ss = [], [], [], []
    for weight, spec in conditions:
        sigma = float(spec.sigma(t))
        logw.append(np.log(weight) + np.log(spec.mass(t)) + _log_gauss(x, np.asarray(spec.eta(t)), sigma))
        u, g, s = cgmp_targets(spec, t, x)
        us.append(u)
        gs.append(g)
        ss.append(s)
    logw = np.asarray(logw, dtype=np.float64)
    top = logw.max()
    if not np.isfinite(top):
        d = x.shape[-1]
        return MarginalTargets(np.zeros(d), 0.0, np.zeros(d), 0.0, underflow=True)
    post = np.exp(logw - top)
    density = float(post.sum() * np.exp(top))
    post /= post.sum()
    u = np.tensordot(post, np.asarray(us), axes=1)
    g = float(post @ np.asarray(gs))
    s = np.tensordot(post, np.asarray(ss), axes=1)
    return MarginalTargets(u, g, s, density, underflow=density == 0.0)


def poisson_bridge_counts(n0: int, n1: int, t: float, size: int, rng) -> np.ndarray:
    """Integer Poisson-bridge reference: ``n0 + Binomial(n1 - n0, t)``."""
    if n1 < n0:
        raise ValueError("need n0 <= n1")
    return n0 + rng.binomial(n1 - n0, t, size=size)
