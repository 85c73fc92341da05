"""Poisson GLM full conditional of the regression parameters.

Given latent counts ``N_i`` and noise variance ``sigma2``, the regression
vector ``theta`` of one voxel has log conditional density

    ell(theta) = 2 sum_i N_i Z_i theta - sum_i exp(2 Z_i theta) / (2 sigma2)

up to a constant. It is concave with negative Hessian (and Fisher
information) ``I(theta) = (2/sigma2) sum_i exp(2 Z_i theta) Z_i^T Z_i``.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

__all__ = [
    "LaplaceProposal",
    "poisson_log_conditional",
    "poisson_gradient",
    "fisher_information",
    "fisher_scoring",
    "fisher_scoring_batch",
    "hastings_log_ratio",
    "scaled_condition_number",
]

_LINE_SEARCH_HALVINGS = 20
_COND_LIMIT = 1e12


def _check_shapes(theta, counts, Z):
    Z = np.asarray(Z, dtype=float)
    theta = np.asarray(theta, dtype=float)
    counts = np.asarray(counts, dtype=float)
    if Z.ndim != 2:
        raise ValueError("Z must be a 2-d design matrix")
    if theta.shape[-1] != Z.shape[1]:
        raise ValueError(f"theta has {theta.shape[-1]} entries, Z has {Z.shape[1]} columns")
    if counts.shape[-1] != Z.shape[0]:
        raise ValueError(f"counts has {counts.shape[-1]} entries, Z has {Z.shape[0]} rows")
    return theta, counts, Z


def poisson_log_conditional(theta, counts, sigma2, Z):
    """Log full conditional of ``theta`` up to an additive constant.

    Parameters
    ----------
    theta : array_like, shape (..., p)
    counts : array_like, shape (..., m)
    sigma2 : float or array_like, shape (...)
    Z : array_like, shape (m, p)

    Returns
    -------
    float or ndarray, shape (...)
    """
    theta, counts, Z = _check_shapes(theta, counts, Z)
    eta = theta @ Z.T
    # overshooting trial steps evaluate to -inf and are rejected by the line search
    with np.errstate(over="ignore"):
        out = 2.0 * np.sum(counts * eta, axis=-1) - np.sum(np.exp(2.0 * eta), axis=-1) / (
            2.0 * np.asarray(sigma2, dtype=float))
    return out[()] if np.ndim(out) == 0 else out


def poisson_gradient(theta, counts, sigma2, Z):
    """Gradient ``2 sum N_i Z_i - (1/sigma2) sum exp(2 Z_i theta) Z_i``."""
    theta, counts, Z = _check_shapes(theta, counts, Z)
    sigma2 = np.asarray(sigma2, dtype=float)[..., None]
    w = 2.0 * counts - np.exp(2.0 * (theta @ Z.T)) / sigma2
    return w @ Z


def fisher_information(theta, sigma2, Z):
    """Fisher information ``(2/sigma2) sum exp(2 Z_i theta) Z_i^T Z_i``.

    Parameters
    ----------
    theta : array_like, shape (..., p)
    sigma2 : float or array_like, shape (...)
    Z : array_like, shape (m, p)

    Returns
    -------
    ndarray, shape (..., p, p)
    """
    Z = np.asarray(Z, dtype=float)
    theta = np.asarray(theta, dtype=float)
    sigma2 = np.asarray(sigma2, dtype=float)[..., None]
    w = 2.0 * np.exp(2.0 * (theta @ Z.T)) / sigma2
    return np.einsum("...i,ij,ik->...jk", w, Z, Z)


def scaled_condition_number(info):
    """Condition number of ``info`` after symmetric diagonal (Jacobi) scaling."""
    info = np.asarray(info, dtype=float)
    d = np.sqrt(np.abs(np.diagonal(info, axis1=-2, axis2=-1)))
    d = np.where(d > 0, d, 1.0)
    scaled = info / (d[..., :, None] * d[..., None, :])
    lam = np.linalg.eigvalsh(scaled)
    lo = lam[..., 0]
    hi = lam[..., -1]
    with np.errstate(divide="ignore"):
        return np.where(lo > 0, hi / np.where(lo > 0, lo, 1.0), np.inf)


@dataclass
class LaplaceProposal:
    """Gaussian proposal centred at a scoring iterate.

    Attributes
    ----------
    mode : ndarray, shape (p,)
        Full parameter vector; ``mode[0]`` is the frozen ``theta0`` when
        ``fixed_s0`` is set.
    precision : ndarray
        ``(p, p)`` information, or the reduced ``(p-1, p-1)`` block over the
        tensor coefficients when ``fixed_s0`` is set.
    fixed_s0 : bool
    converged : bool
    n_iter : int
    history : tuple of float
        Objective value after each accepted iterate.
    inflation : float
        Covariance multiplier; the effective precision is ``precision / inflation``.
    """

    mode: np.ndarray
    precision: np.ndarray
    fixed_s0: bool = False
    converged: bool = True
    n_iter: int = 0
    history: tuple = field(default=(), repr=False)
    inflation: float = 1.0
    reason: str = ""

    @property
    def free(self):
        return slice(1, None) if self.fixed_s0 else slice(None)

    def _chol(self):
        prec = np.asarray(self.precision, dtype=float) / self.inflation
        try:
            return linalg.cholesky(prec, lower=True)
        except linalg.LinAlgError:
            raise linalg.LinAlgError("proposal precision is not positive definite") from None

    def logpdf(self, theta):
        """Log density of ``theta`` (frozen coordinate must match the mode)."""
        theta = np.asarray(theta, dtype=float)
        L = self._chol()
        r = theta[self.free] - self.mode[self.free]
        y = L.T @ r
        k = L.shape[0]
        return float(np.sum(np.log(np.diag(L))) - 0.5 * k * np.log(2 * np.pi) - 0.5 * y @ y)

    def sample(self, rng):
        """Draw a full parameter vector from the proposal."""
        L = self._chol()
        z = rng.standard_normal(L.shape[0])
        out = np.array(self.mode, dtype=float)
        out[self.free] = out[self.free] + linalg.solve_triangular(L.T, z, lower=False)
        return out


def fisher_scoring(theta0, counts, sigma2, Z, tol=1e-8, max_iter=50, fixed_s0=False):
    """Maximize the Poisson GLM conditional by Fisher scoring.

    Parameters
    ----------
    theta0 : array_like, shape (p,)
        Starting point. With ``fixed_s0`` its first entry is kept.
    counts : array_like, shape (m,)
    sigma2 : float
    Z : array_like, shape (m, p)
    tol : float
        Convergence threshold on the Newton decrement
        ``sqrt(g^T I^-1 g)``, the gradient norm in the information metric.
    max_iter : int
    fixed_s0 : bool
        Freeze ``theta0[0]`` and return the reduced information.

    Returns
    -------
    LaplaceProposal
        ``converged`` is False when the iteration limit is reached, the
        information is numerically singular, or no finite maximizer exists.

    Notes
    -----
    Each scoring step is followed by up to 20 halvings until the objective
    does not decrease, so the iterates ascend monotonically.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    theta, counts, Z = _check_shapes(theta0, counts, Z)
    theta = theta.astype(float).copy()
    if not (np.isfinite(sigma2) and sigma2 > 0):
        raise ValueError("sigma2 must be positive")
    fixed = bool(fixed_s0)
    free = slice(1, None) if fixed else slice(None)

    def obj(t):
        return float(poisson_log_conditional(t, counts, sigma2, Z))

    def result(conv, it, reason=""):
        info = fisher_information(theta, sigma2, Z)[free, free]
        return LaplaceProposal(theta, info, fixed, conv, it, tuple(history), reason=reason)

    f = obj(theta)
    history = [f]
    if np.sum(counts) == 0:
        # no finite stationary point: the intercept runs off to -inf
        return result(False, 0, "all counts are zero")
    for it in range(max_iter + 1):
        g = poisson_gradient(theta, counts, sigma2, Z)[free]
        info = fisher_information(theta, sigma2, Z)[free, free]
        try:
            c = linalg.cho_factor(info, lower=True)
        except linalg.LinAlgError:
            return result(False, it, "singular information")
        step = linalg.cho_solve(c, g)
        dec = float(g @ step)
        if np.sqrt(max(dec, 0.0)) < tol:
            if scaled_condition_number(info) > _COND_LIMIT:
                return result(False, it, "ill-conditioned information")
            return result(True, it)
        if it == max_iter:
            break
        t = 1.0
        slack = 1e-12 * (1.0 + abs(f))
        for _ in range(_LINE_SEARCH_HALVINGS + 1):
            cand = theta.copy()
            cand[free] += t * step
            fc = obj(cand)
            if np.isfinite(fc) and fc >= f - slack:
                break
            t *= 0.5
        else:
            return result(False, it, "line search failed")
        theta, f = cand, fc
        history.append(f)
        if not np.all(np.isfinite(theta)):
            return result(False, it, "non-finite iterate")
    return result(False, max_iter, "iteration limit")


def fisher_scoring_batch(theta0, counts, sigma2, Z, tol=1e-8, max_iter=50, fixed_s0=None):
    """Fisher scoring for many independent voxels sharing one design.

    Parameters
    ----------
    theta0 : ndarray, shape (n, p)
    counts : ndarray, shape (n, m)
    sigma2 : ndarray, shape (n,)
    Z : ndarray, shape (m, p)
    tol, max_iter : see :func:`fisher_scoring`
    fixed_s0 : ndarray of bool, shape (n,), optional
        Voxels whose intercept is frozen.

    Returns
    -------
    modes : ndarray, shape (n, p)
    info : ndarray, shape (n, p, p)
        Information at the modes; for frozen voxels the intercept row and
        column are zero.
    converged : ndarray of bool, shape (n,)

    Notes
    -----
    Every voxel follows the iteration of :func:`fisher_scoring`; results
    agree with it up to rounding in the linear solves.
    """
    theta = np.array(theta0, dtype=float)
    counts = np.asarray(counts, dtype=float)
    sigma2 = np.asarray(sigma2, dtype=float)
    n, p = theta.shape
    fixed = np.zeros(n, dtype=bool) if fixed_s0 is None else np.asarray(fixed_s0, dtype=bool)
    ZZ = np.einsum("ij,ik->ijk", Z, Z).reshape(Z.shape[0], p * p)

    def obj(t, N, s2):
        eta = t @ Z.T
        return 2.0 * np.sum(N * eta, axis=1) - np.sum(np.exp(2.0 * eta), axis=1) / (2.0 * s2)

    def grad_info(t, N, s2, fx):
        e2 = np.exp(2.0 * (t @ Z.T)) / s2[:, None]
        g = (2.0 * N - e2) @ Z
        info = ((2.0 * e2) @ ZZ).reshape(-1, p, p)
        if np.any(fx):
            g[fx, 0] = 0.0
            info[fx, 0, :] = 0.0
            info[fx, :, 0] = 0.0
        return g, info

    def regularized(info, fx):
        out = info.copy()
        out[fx, 0, 0] = 1.0
        return out

    converged = np.zeros(n, dtype=bool)
    active = np.sum(counts, axis=1) > 0
    f = obj(theta, counts, sigma2)
    for it in range(max_iter + 1):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        t_a, N_a, s_a, fx_a = theta[idx], counts[idx], sigma2[idx], fixed[idx]
        g, info = grad_info(t_a, N_a, s_a, fx_a)
        A = regularized(info, fx_a)
        step, ok = _batched_pd_solve(A, g)
        dec = np.where(ok, np.einsum("ij,ij->i", g, np.where(ok[:, None], step, 0.0)), np.inf)
        done = ok & (np.sqrt(np.maximum(dec, 0.0)) < tol)
        if np.any(done):
            good = scaled_condition_number(A[done]) <= _COND_LIMIT
            converged[idx[done]] = good
        stop = done | ~ok
        active[idx[stop]] = False
        if it == max_iter:
            break
        go = ~stop
        if not np.any(go):
            continue
        idx_g = idx[go]
        t_g, st_g, f_g = t_a[go], step[go], f[idx_g]
        N_g, s_g = N_a[go], s_a[go]
        slack = 1e-12 * (1.0 + np.abs(f_g))
        tstep = np.ones(idx_g.size)
        accepted = np.zeros(idx_g.size, dtype=bool)
        new_t = t_g.copy()
        new_f = f_g.copy()
        for _ in range(_LINE_SEARCH_HALVINGS + 1):
            pend = ~accepted
            cand = t_g[pend] + tstep[pend, None] * st_g[pend]
            fc = obj(cand, N_g[pend], s_g[pend])
            good = np.isfinite(fc) & (fc >= f_g[pend] - slack[pend])
            sel = np.flatnonzero(pend)[good]
            new_t[sel] = cand[good]
            new_f[sel] = fc[good]
            accepted[sel] = True
            if np.all(accepted):
                break
            tstep[~accepted] *= 0.5
        theta[idx_g] = new_t
        f[idx_g] = new_f
        active[idx_g[~accepted]] = False
        bad = ~np.all(np.isfinite(theta[idx_g]), axis=1)
        active[idx_g[bad]] = False
    _, info = grad_info(theta, counts, sigma2, fixed)
    return theta, info, converged


def _batched_pd_solve(A, b):
    """Solve ``A x = b`` for a stack of matrices; flags non-PD members."""
    n = A.shape[0]
    x = np.zeros_like(b)
    ok = np.ones(n, dtype=bool)
    try:
        # the factorization only certifies positive definiteness
        np.linalg.cholesky(A)
        x = np.linalg.solve(A, b[..., None])[..., 0]
        ok = np.all(np.isfinite(x), axis=1)
        return x, ok
    except np.linalg.LinAlgError:
        pass
    for i in range(n):
        try:
            c = linalg.cho_factor(A[i], lower=True)
            x[i] = linalg.cho_solve(c, b[i])
        except linalg.LinAlgError:
            ok[i] = False
    return x, ok & np.all(np.isfinite(x), axis=1)


def hastings_log_ratio(theta, theta_tilde, prop_fwd, prop_bwd, counts, sigma2, Z):
    """Log Metropolis-Hastings ratio for a Laplace-proposal move.

    Parameters
    ----------
    theta, theta_tilde : array_like, shape (p,)
        Current and proposed parameters.
    prop_fwd : LaplaceProposal
        Proposal built at ``theta`` that generated ``theta_tilde``.
    prop_bwd : LaplaceProposal
        Proposal built at ``theta_tilde``, evaluated at ``theta``. Passing the
        same object as ``prop_fwd`` gives the single-scoring ratio.
    counts, sigma2, Z
        Arguments of :func:`poisson_log_conditional`.

    Returns
    -------
    float
        ``ell(theta_tilde) - ell(theta) + log q_bwd(theta) - log q_fwd(theta_tilde)``.
        The Gaussian normalizers carry the ``sqrt(det I_bwd / det I_fwd)`` factor.
    """
    lt = poisson_log_conditional(theta_tilde, counts, sigma2, Z)
    l0 = poisson_log_conditional(theta, counts, sigma2, Z)
    return float(lt - l0 + prop_bwd.logpdf(theta) - prop_fwd.logpdf(theta_tilde))
