"""Rice likelihood, the Poisson-Gamma augmentation and reinforced Poisson laws.

A Rice variable ``Y`` with amplitude ``nu`` and noise variance ``sigma2`` can be
generated by drawing a latent count ``N ~ Poisson(nu**2 / (2 sigma2))`` and then
``Y**2 ~ Gamma(N + 1, scale=2 sigma2)``. Given ``Y`` the count follows a
reinforced Poisson law with pmf proportional to ``tau**(2n) / (n!)**2``.
"""

from dataclasses import dataclass

import numpy as np
from scipy.special import gammaln

from ._validation import as_float_array

__all__ = [
    "RiceParams",
    "ReinforcedPoisson",
    "AugmentedPair",
    "log_bessel_i0",
    "rice_log_density",
    "sample_augmented",
    "reinforced_poisson_logpmf",
    "reinforced_poisson_mean",
    "sample_reinforced_poisson",
    "conditional_n_given_y",
    "reinforced_tau",
]

_SERIES_CUTOFF = 20.0
_SERIES_TERMS = 80
_ASYMPTOTIC_TERMS = 30
_ALPHA_FLOOR = 1e-8


def _asymptotic_coefficients(n_terms):
    # c_k = ((2k-1)!!)^2 / (k! 8^k), built by the ratio (2k+1)^2 / (8 (k+1))
    c = np.empty(n_terms)
    c[0] = 1.0
    for k in range(n_terms - 1):
        c[k + 1] = c[k] * (2 * k + 1) ** 2 / (8.0 * (k + 1))
    return c


_ASYMPTOTIC_C = _asymptotic_coefficients(_ASYMPTOTIC_TERMS)


def log_bessel_i0(z):
    """Logarithm of the modified Bessel function of the first kind, order 0.

    Parameters
    ----------
    z : float or array_like
        Non-negative, finite arguments.

    Returns
    -------
    float or ndarray
        ``log I0(z)``, evaluated without overflow for arbitrarily large ``z``.

    Notes
    -----
    Below ``z = 20`` the power series ``sum (z**2/4)**k / (k!)**2`` is summed
    directly; every term is positive so the relative error stays at a few ulp.
    Above the cutoff the scaled asymptotic expansion
    ``z - log(2 pi z)/2 + log(sum_k c_k z**-k)`` is used with 30 terms, which
    at ``z = 20`` is already exact to machine precision.
    """
    arr = np.asarray(z, dtype=float)
    if np.any(~np.isfinite(arr)) or np.any(arr < 0):
        raise ValueError("log_bessel_i0 requires finite, non-negative arguments")
    scalar = arr.ndim == 0
    arr = np.atleast_1d(arr)
    out = np.empty_like(arr)

    small = arr < _SERIES_CUTOFF
    if np.any(small):
        q = 0.25 * arr[small] ** 2
        term = np.ones_like(q)
        total = np.ones_like(q)
        for k in range(1, _SERIES_TERMS):
            term = term * q / (k * k)
            total = total + term
        out[small] = np.log(total)

    large = ~small
    if np.any(large):
        x = arr[large]
        inv = 1.0 / x
        # Horner evaluation of sum c_k inv**k
        acc = np.full_like(x, _ASYMPTOTIC_C[-1])
        for c in _ASYMPTOTIC_C[-2::-1]:
            acc = acc * inv + c
        out[large] = x - 0.5 * np.log(2.0 * np.pi * x) + np.log(acc)

    return out[0] if scalar else out


@dataclass(frozen=True)
class RiceParams:
    """Amplitude ``nu`` and noise variance ``sigma2`` of a Rice law."""

    nu: float
    sigma2: float

    def __post_init__(self):
        if not np.isfinite(self.nu) or self.nu < 0:
            raise ValueError("nu must be finite and non-negative")
        if not np.isfinite(self.sigma2) or self.sigma2 <= 0:
            raise ValueError("sigma2 must be finite and positive")

    @property
    def t(self):
        """Poisson mean of the latent count, ``nu**2 / (2 sigma2)``."""
        return self.nu**2 / (2.0 * self.sigma2)


@dataclass(frozen=True)
class ReinforcedPoisson:
    """Reinforced Poisson law with pmf ``tau**(2n) / ((n!)**2 I0(2 tau))``.

    ``tau`` may be a scalar or an array of parameters, one per acquisition.
    """

    tau: object

    def __post_init__(self):
        tau = np.asarray(self.tau, dtype=float)
        if np.any(~np.isfinite(tau)) or np.any(tau < 0):
            raise ValueError("tau must be finite and non-negative")

    def logpmf(self, n):
        return reinforced_poisson_logpmf(n, self.tau)

    def pmf(self, n):
        return np.exp(self.logpmf(n))

    def mean(self):
        return reinforced_poisson_mean(self.tau)

    def sample(self, rng, size=None, method="rejection"):
        return sample_reinforced_poisson(self.tau, rng, size=size, method=method)


@dataclass(frozen=True)
class AugmentedPair:
    """A latent count ``n`` together with the magnitude ``y`` it generated."""

    n: object
    y: object


def rice_log_density(y, nu, sigma2):
    """Log density of the Rice law.

    Parameters
    ----------
    y : float or array_like
        Non-negative magnitudes.
    nu : float or array_like
        Signal amplitude, broadcast against ``y``.
    sigma2 : float or array_like
        Positive noise variance.

    Returns
    -------
    float or ndarray
        ``log(y/sigma2) - (y**2 + nu**2)/(2 sigma2) + log I0(y nu / sigma2)``.
        Entries with ``y == 0`` give ``-inf``.
    """
    y = np.asarray(y, dtype=float)
    nu = np.asarray(nu, dtype=float)
    sigma2 = np.asarray(sigma2, dtype=float)
    if np.any(~np.isfinite(y)) or np.any(y < 0):
        raise ValueError("y must be finite and non-negative")
    if np.any(~np.isfinite(nu)) or np.any(nu < 0):
        raise ValueError("nu must be finite and non-negative")
    if np.any(~np.isfinite(sigma2)) or np.any(sigma2 <= 0):
        raise ValueError("sigma2 must be finite and positive")
    y, nu, sigma2 = np.broadcast_arrays(y, nu, sigma2)
    with np.errstate(divide="ignore"):
        out = (
            np.log(y / sigma2)
            - (y * y + nu * nu) / (2.0 * sigma2)
            + log_bessel_i0(y * nu / sigma2)
        )
    return out[()] if out.ndim == 0 else out


def sample_augmented(params, rng, size=None):
    """Draw ``(N, Y)`` from the Poisson-Gamma representation of a Rice law.

    Parameters
    ----------
    params : RiceParams
    rng : numpy.random.Generator
    size : int or tuple, optional
        Number of independent pairs; ``None`` returns scalars.

    Returns
    -------
    AugmentedPair
    """
    n = rng.poisson(params.t, size=size)
    x = rng.gamma(np.asarray(n) + 1.0, 2.0 * params.sigma2)
    return AugmentedPair(n=n, y=np.sqrt(x))


def reinforced_poisson_logpmf(n, tau):
    """Log pmf ``2 n log tau - 2 log n! - log I0(2 tau)``.

    ``tau = 0`` is the point mass at zero.
    """
    n = np.asarray(n)
    tau = np.asarray(tau, dtype=float)
    if np.any(tau < 0) or np.any(~np.isfinite(tau)):
        raise ValueError("tau must be finite and non-negative")
    if np.any(n < 0) or np.any(n != np.floor(n)):
        raise ValueError("n must be a non-negative integer")
    n, tau = np.broadcast_arrays(n.astype(float), tau)
    out = np.where(n == 0, 0.0, -np.inf)
    pos = tau > 0
    if np.any(pos):
        t = tau[pos]
        k = n[pos]
        out = out.copy()
        out[pos] = 2.0 * k * np.log(t) - 2.0 * gammaln(k + 1.0) - log_bessel_i0(2.0 * t)
    return out[()] if out.ndim == 0 else out


def reinforced_poisson_mean(tau):
    """Mean ``tau I1(2 tau) / I0(2 tau)`` evaluated with scaled Bessel functions."""
    from scipy.special import i0e, i1e

    tau = np.asarray(tau, dtype=float)
    return tau * i1e(2.0 * tau) / i0e(2.0 * tau)


def reinforced_tau(y, linpred, sigma2):
    """Parameter ``y exp(linpred) / (2 sigma2)`` of the count given ``Y = y``."""
    return np.asarray(y) * np.exp(linpred) / (2.0 * np.asarray(sigma2))


def conditional_n_given_y(y, linpred, sigma2):
    """Reinforced Poisson law of the latent count given the magnitude.

    Parameters
    ----------
    y : float or array_like
        Non-negative magnitudes; ``y = 0`` gives the point mass at zero.
    linpred : float or array_like
        Linear predictor ``Z theta`` (log amplitude).
    sigma2 : float or array_like
        Positive noise variance.

    Returns
    -------
    ReinforcedPoisson
    """
    y = as_float_array(y, "y")
    linpred = as_float_array(linpred, "linpred")
    if np.any(y < 0):
        raise ValueError("y must be non-negative")
    if np.any(np.asarray(sigma2) <= 0):
        raise ValueError("sigma2 must be positive")
    tau = reinforced_tau(y, linpred, sigma2)
    return ReinforcedPoisson(tau=tau[()] if np.ndim(tau) == 0 else tau)


def sample_reinforced_poisson(tau, rng, size=None, method="rejection"):
    """Exact draws from reinforced Poisson laws.

    Parameters
    ----------
    tau : float or array_like
        Non-negative parameters. With ``size=None`` one draw per entry.
    rng : numpy.random.Generator
    size : int or tuple, optional
        Output shape for a scalar ``tau``.
    method : {"rejection", "inversion", "coincidence"}
        ``"rejection"`` uses a Poisson(alpha) proposal with ``alpha = tau``
        and the envelope constant taken at the Poisson mode. ``"inversion"``
        walks the cumulative pmf from zero. ``"coincidence"`` draws a Poisson
        count and keeps it with probability equal to a second Poisson pmf at
        the same value; it is simple but slow and meant for testing.

    Returns
    -------
    int or ndarray of int64
    """
    tau = np.asarray(tau, dtype=float)
    if np.any(tau < 0) or np.any(~np.isfinite(tau)):
        raise ValueError("tau must be finite and non-negative")
    if size is not None:
        tau = np.broadcast_to(tau, size)
    scalar = tau.ndim == 0
    flat = np.ascontiguousarray(tau, dtype=float).reshape(-1)
    if method == "rejection":
        out = _sample_rejection(flat, rng)
    elif method == "inversion":
        out = _sample_inversion(flat, rng)
    elif method == "coincidence":
        out = _sample_coincidence(flat, rng)
    else:
        raise ValueError(f"unknown method {method!r}")
    out = out.reshape(tau.shape)
    return int(out[()]) if scalar else out


def _sample_rejection(tau, rng):
    out = np.zeros(tau.shape, dtype=np.int64)
    pending = np.flatnonzero(tau > 0)
    if pending.size == 0:
        return out
    t = tau[pending]
    alpha = np.maximum(t, _ALPHA_FLOOR)
    # target / proposal ratio is proportional to r**n / n! with r = tau**2/alpha
    log_r = 2.0 * np.log(t) - np.log(alpha)
    mode = np.floor(np.exp(log_r))
    log_peak = mode * log_r - gammaln(mode + 1.0)
    while pending.size:
        n = rng.poisson(alpha)
        log_u = np.log(rng.random(pending.size))
        ok = log_u <= n * log_r - gammaln(n + 1.0) - log_peak
        out[pending[ok]] = n[ok]
        keep = ~ok
        pending, alpha, log_r, log_peak = pending[keep], alpha[keep], log_r[keep], log_peak[keep]
    return out


def _sample_inversion(tau, rng):
    out = np.zeros(tau.shape, dtype=np.int64)
    pending = np.flatnonzero(tau > 0)
    if pending.size == 0:
        return out
    t = tau[pending]
    if t.max() > 300:
        raise ValueError("inversion sampling is limited to tau <= 300")
    u = rng.random(pending.size)
    # pmf recursion p(n) = p(n-1) tau^2 / n^2, started in log space
    p = np.exp(-log_bessel_i0(2.0 * t))
    cdf = p.copy()
    n = np.zeros(pending.size, dtype=np.int64)
    t2 = t * t
    active = u > cdf
    # the tail beyond 10 tau + 50 carries no mass representable in float64
    limit = int(10 * t.max() + 50)
    k = 0
    while np.any(active) and k < limit:
        k += 1
        p = np.where(active, p * t2 / (k * k), p)
        cdf = np.where(active, cdf + p, cdf)
        n = np.where(active, k, n)
        active = active & (u > cdf)
    out[pending] = n
    return out


def _sample_coincidence(tau, rng):
    out = np.zeros(tau.shape, dtype=np.int64)
    pending = np.flatnonzero(tau > 0)
    t = tau[pending]
    while pending.size:
        n = rng.poisson(t)
        log_accept = -t + n * np.log(t) - gammaln(n + 1.0)
        ok = np.log(rng.random(pending.size)) <= log_accept
        out[pending[ok]] = n[ok]
        pending, t = pending[~ok], t[~ok]
    return out
