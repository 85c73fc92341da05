"""Gibbs-Metropolis sampler for Rician tensor fields.

One cycle performs, in order,

1. block updates of the regression field ``theta``: within a schedule step
   the blocks are non-adjacent and are updated from the same snapshot of
   their boundaries, each with a Gaussian proposal whose precision combines
   the field prior and per-voxel Fisher information;
2. Gibbs draws of the noise variance of every voxel;
3. a Gamma update of ``theta0`` in every voxel;
4. Gibbs draws of the prior hyperparameters.

Latent counts are regenerated from their reinforced Poisson conditionals
at the start of every update that needs them. Each block, each schedule
step and each per-voxel sweep draws from its own random stream keyed by
``(seed, cycle, kind, step, index)``, so results do not depend on the number
of worker threads.
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import linalg

from .design import ModelSpec, positive_mask
from .glm import fisher_scoring_batch
from .priors import (
    VoxelGraph,
    default_hyper,
    edge_quadratic_forms,
    field_precision,
    field_prior_energy,
    hyper_from_components,
    hyper_names,
    hyper_values,
    precision_components,
)
from .rice import rice_log_density, sample_reinforced_poisson

__all__ = [
    "ChainConfig",
    "ChainState",
    "ChainResult",
    "ChainAborted",
    "BlockPartition",
    "partition_blocks",
    "block_rng",
    "sample_counts",
    "update_counts",
    "update_sigma2",
    "update_theta0",
    "update_theta_block",
    "block_gaussian_mh",
    "update_hyper",
    "update_hyper_2nd",
    "update_hyper_4th",
    "update_hyper_sh",
    "hyper_gamma_parameters",
    "auto_burn_in",
    "run_chain",
    "run_chain_arrays",
    "write_trace",
    "write_summary",
    "read_summary",
    "PosteriorSummary",
]

log = logging.getLogger(__name__)

_KIND_BLOCK, _KIND_SIGMA, _KIND_THETA0, _KIND_HYPER, _KIND_COUNTS = 0, 1, 2, 3, 4


class ChainAborted(RuntimeError):
    """Raised when the chain state becomes non-finite.

    Attributes
    ----------
    state : ChainState
        Last state before the failure.
    """

    def __init__(self, message, state):
        super().__init__(message)
        self.state = state


@dataclass(frozen=True)
class ChainConfig:
    """Settings of the Gibbs-Metropolis chain.

    Parameters
    ----------
    cycles : int
        Number of full cycles.
    burn_in : int or "auto"
        Cycles discarded before averaging. ``"auto"`` picks the first cycle
        after which a 500-cycle window of the log posterior shows no trend
        (slope t-statistic below 2).
    thin : int
        Store one sample every ``thin`` cycles.
    block_radius : int
        Graph radius of the update blocks; 0 gives single-voxel blocks.
    seed : int
    positivity : {"counting", "constrained"}
        ``"constrained"`` rejects proposals with negative diffusivity;
        ``"counting"`` leaves the chain unconstrained and reports the
        fraction of positive stored draws.
    rho : float
        Pairwise precision of ``theta0``; 0 is a flat prior.
    hyper_mode : {"estimated", "fixed"}
    hyper : IsoPrecision2, IsoPrecision4, PowerSpectrum or None
        Fixed hyperparameters, or the starting point when estimated.
    scoring : {"double", "single"}
        ``"double"`` rebuilds the proposal at the candidate for the reverse
        density; ``"single"`` reuses the forward proposal.
    theta0_update : {"joint", "separate"}
        Whether ``theta0`` moves with the tensor in block updates or only
        through its Gamma conditional.
    inflation : float
        Proposal covariance multiplier.
    workers : int
        Threads used for the per-block linear algebra.
    scoring_tol, scoring_max_iter
        Fisher scoring controls.
    update_sigma2 : bool
        Disable to hold the noise variance fixed.
    """

    cycles: int = 1000
    burn_in: object = "auto"
    thin: int = 10
    block_radius: int = 2
    seed: int = 0
    positivity: str = "counting"
    rho: float = 0.0
    hyper_mode: str = "estimated"
    hyper: object = None
    scoring: str = "double"
    theta0_update: str = "joint"
    inflation: float = 1.0
    workers: int = 1
    scoring_tol: float = 1e-8
    scoring_max_iter: int = 50
    update_sigma2: bool = True

    def __post_init__(self):
        if not isinstance(self.cycles, (int, np.integer)) or self.cycles < 0:
            raise ValueError("cycles must be a non-negative integer")
        if self.burn_in != "auto":
            if not isinstance(self.burn_in, (int, np.integer)) or self.burn_in < 0:
                raise ValueError("burn_in must be a non-negative integer or 'auto'")
        if not isinstance(self.thin, (int, np.integer)) or self.thin < 1:
            raise ValueError("thin must be a positive integer")
        if not isinstance(self.block_radius, (int, np.integer)) or self.block_radius < 0:
            raise ValueError("block_radius must be a non-negative integer")
        if self.positivity not in ("counting", "constrained"):
            raise ValueError("positivity must be 'counting' or 'constrained'")
        if self.hyper_mode not in ("estimated", "fixed"):
            raise ValueError("hyper_mode must be 'estimated' or 'fixed'")
        if self.scoring not in ("double", "single"):
            raise ValueError("scoring must be 'double' or 'single'")
        if self.theta0_update not in ("joint", "separate"):
            raise ValueError("theta0_update must be 'joint' or 'separate'")
        if not (self.inflation > 0 and np.isfinite(self.inflation)):
            raise ValueError("inflation must be positive")
        if self.rho < 0 or not np.isfinite(self.rho):
            raise ValueError("rho must be non-negative")
        if not isinstance(self.workers, (int, np.integer)) or self.workers < 1:
            raise ValueError("workers must be a positive integer")
        if self.hyper_mode == "fixed" and self.hyper is None:
            raise ValueError("fixed hyperparameters need explicit values")


@dataclass
class ChainState:
    """Current values of the chain.

    Attributes
    ----------
    theta : ndarray, shape (n, p)
    sigma2 : ndarray, shape (n,)
    hyper : IsoPrecision2, IsoPrecision4, PowerSpectrum or None
    cycle : int
    rng_seed : int
    """

    theta: np.ndarray
    sigma2: np.ndarray
    hyper: object
    cycle: int = 0
    rng_seed: int = 0

    def __post_init__(self):
        self.theta = np.array(self.theta, dtype=float)
        self.sigma2 = np.array(self.sigma2, dtype=float)
        if self.theta.ndim != 2 or self.sigma2.shape != (self.theta.shape[0],):
            raise ValueError("theta must be (n, p) and sigma2 (n,)")
        if np.any(self.sigma2 <= 0):
            raise ValueError("sigma2 must be positive")


def block_rng(seed, cycle, kind, step=0, index=0):
    """Random generator for one ``(seed, cycle, kind, step, index)`` key."""
    ss = np.random.SeedSequence(int(seed), spawn_key=(int(cycle), int(kind), int(step), int(index)))
    return np.random.Generator(np.random.PCG64(ss))


# ---------------------------------------------------------------------------
# block partition


@dataclass
class BlockPartition:
    """Blocks of one cycle, grouped into schedule steps.

    Attributes
    ----------
    steps : list of list of ndarray
        ``steps[s]`` lists the voxel index arrays updated concurrently in
        step ``s``. Blocks of one step are pairwise non-adjacent and every
        voxel belongs to exactly one block of the cycle.
    shift : int
        Offset of the centre ordering for this cycle.
    """

    steps: list
    shift: int = 0

    @property
    def blocks(self):
        return [b for step in self.steps for b in step]


def _balls(graph, r):
    # graph-distance balls of radius r around every vertex
    n = graph.n_vertices
    out = []
    for c in range(n):
        seen = {c}
        frontier = [c]
        for _ in range(r):
            nxt = []
            for v in frontier:
                for w in graph.neighbors(v):
                    w = int(w)
                    if w not in seen:
                        seen.add(w)
                        nxt.append(w)
            frontier = nxt
        out.append(np.array(sorted(seen), dtype=np.int64))
    return out


_PARTITION_CACHE = {}


def partition_blocks(graph, r, cycle):
    """Greedy packing of non-adjacent graph balls for one cycle.

    Parameters
    ----------
    graph : VoxelGraph
    r : int
        Ball radius in graph distance.
    cycle : int
        Cycle index; centres are visited in lexicographic order of
        ``((x - s) mod (2r+1), (y - s) mod (2r+1), (z - s) mod (2r+1), x, y, z)``
        with ``s = cycle mod (2r+1)``, so block boundaries move between cycles.

    Returns
    -------
    BlockPartition

    Notes
    -----
    ``r = 0`` gives single voxels in two steps coloured by coordinate parity.
    For ``r > 0`` each step scans the remaining voxels in centre order and
    keeps ``ball(c, r)`` restricted to voxels that are neither updated yet
    nor adjacent to a block already chosen in the step.
    """
    if r < 0:
        raise ValueError("r must be non-negative")
    period = 2 * r + 1
    s = int(cycle) % period
    key = (id(graph), graph.n_vertices, r, s)
    hit = _PARTITION_CACHE.get(key)
    if hit is not None and hit[0] is graph:
        return hit[1]
    n = graph.n_vertices
    coords = graph.coords
    if r == 0:
        parity = coords.sum(axis=1) % 2
        steps = []
        for colour in ((0, 1) if s == 0 else (0, 1)):
            members = np.flatnonzero(parity == colour)
            if members.size:
                steps.append([np.array([v]) for v in members])
        part = BlockPartition(steps, s)
    else:
        balls = _balls(graph, r)
        shifted = (coords - s) % period
        order = np.lexsort(tuple(coords[:, k] for k in (2, 1, 0))
                           + tuple(shifted[:, k] for k in (2, 1, 0)))
        covered = np.zeros(n, dtype=bool)
        steps = []
        while not covered.all():
            blocked = covered.copy()
            step = []
            for c in order:
                if blocked[c]:
                    continue
                ball = balls[c]
                members = ball[~blocked[ball]]
                step.append(members)
                covered[members] = True
                blocked[members] = True
                for v in members:
                    blocked[graph.neighbors(v)] = True
            steps.append(step)
        part = BlockPartition(steps, s)
    _PARTITION_CACHE[key] = (graph, part)
    return part


# ---------------------------------------------------------------------------
# per-voxel Gibbs updates


def sample_counts(Y, theta, sigma2, Z, rng):
    """Draw latent counts from their reinforced Poisson conditionals.

    Parameters
    ----------
    Y : ndarray, shape (n, m)
    theta : ndarray, shape (n, p)
    sigma2 : ndarray, shape (n,)
    Z : ndarray, shape (m, p)
    rng : numpy.random.Generator

    Returns
    -------
    ndarray of int64, shape (n, m)
    """
    tau = Y * np.exp(theta @ Z.T) / (2.0 * sigma2[:, None])
    return sample_reinforced_poisson(tau, rng)


def update_counts(v, state, data, rng):
    """Fresh latent counts for voxel(s) ``v`` given the current state."""
    v = np.atleast_1d(v)
    return sample_counts(data.Y[v], state.theta[v], state.sigma2[v], data.Z, rng)


def sigma2_parameters(Y, theta, counts, Z):
    """Inverse-gamma shape ``sum(2N+1)`` and rate ``sum(Y^2 + exp(2 Z theta))/2``."""
    shape = np.sum(2.0 * counts + 1.0, axis=-1)
    rate = 0.5 * np.sum(Y * Y + np.exp(2.0 * (theta @ Z.T)), axis=-1)
    return shape, rate


def update_sigma2(v, state, data, rng, counts=None):
    """Gibbs draw of the noise variance of voxel(s) ``v``.

    Parameters
    ----------
    v : int or array_like of int
    state : ChainState
    data : _Problem or object with ``Y`` and ``Z``
    rng : numpy.random.Generator
    counts : ndarray, optional
        Current latent counts; regenerated when omitted.

    Returns
    -------
    ndarray
        New values, also written into ``state.sigma2``.
    """
    v = np.atleast_1d(v)
    if data.Z.shape[0] == 0:
        raise ValueError("no measurements")
    if counts is None:
        counts = update_counts(v, state, data, rng)
    shape, rate = sigma2_parameters(data.Y[v], state.theta[v], counts, data.Z)
    new = rate / rng.gamma(shape)
    state.sigma2[v] = new
    return new


def theta0_parameters(theta, sigma2, counts, Z):
    """Gamma shape ``a = sum N`` and rate ``b`` of ``S0^2`` given the tensor."""
    a = np.sum(counts, axis=-1).astype(float)
    eta_d = theta[..., 1:] @ Z[:, 1:].T
    b = np.sum(np.exp(2.0 * eta_d), axis=-1) / (2.0 * sigma2)
    return a, b


def update_theta0(v, state, data, rng, counts=None, rho=0.0, graph=None):
    """Gamma update of the log baseline signal of voxel(s) ``v``.

    ``xi = S0^2 ~ Gamma(a, b)`` and ``theta0 = log(xi)/2``. Voxels with
    ``a = 0`` are skipped. With ``rho > 0`` the Gamma draw is used as an
    independence proposal accepted with the ratio of the pairwise prior.
    Voxels sharing an edge must not be passed together when ``rho > 0``.

    Returns
    -------
    ndarray of bool
        Which voxels changed.
    """
    v = np.atleast_1d(v)
    if counts is None:
        counts = update_counts(v, state, data, rng)
    a, b = theta0_parameters(state.theta[v], state.sigma2[v], counts, data.Z)
    ok = a > 0
    xi = np.ones(v.shape)
    xi[ok] = rng.gamma(a[ok], 1.0 / b[ok])
    new = 0.5 * np.log(xi)
    if rho > 0 and graph is not None:
        u = rng.random(v.shape)
        for i, vox in enumerate(v):
            if not ok[i]:
                continue
            nb = graph.neighbors(vox)
            t_nb = state.theta[nb, 0]
            old = state.theta[vox, 0]
            dlog = -0.5 * rho * (np.sum((new[i] - t_nb) ** 2) - np.sum((old - t_nb) ** 2))
            if not (np.log(u[i]) < dlog):
                ok[i] = False
    state.theta[v[ok], 0] = new[ok]
    return ok


# ---------------------------------------------------------------------------
# block proposals


def _gauss_logpdf(L, x, mu):
    # L lower Cholesky factor of the precision
    y = L.T @ (x - mu)
    k = L.shape[0]
    return float(np.sum(np.log(np.diag(L))) - 0.5 * k * np.log(2.0 * np.pi) - 0.5 * y @ y)


@dataclass
class _BlockGeometry:
    W: np.ndarray
    deg: np.ndarray
    inner: np.ndarray       # local index pairs (i, j), i < j, edges inside W
    outer_local: np.ndarray  # local index of W endpoint for edges leaving W
    outer_nb: np.ndarray     # global index of the outside endpoint
    edge_a: np.ndarray       # global edges with at least one endpoint in W
    edge_b: np.ndarray


def _geometry(graph, W):
    W = np.asarray(W, dtype=np.int64)
    local = {int(v): i for i, v in enumerate(W)}
    inner, outer_l, outer_n, ea, eb = [], [], [], [], []
    for i, v in enumerate(W):
        for w in graph.neighbors(v):
            w = int(w)
            j = local.get(w)
            if j is None:
                outer_l.append(i)
                outer_n.append(w)
                ea.append(int(v))
                eb.append(w)
            elif j > i:
                inner.append((i, j))
                ea.append(int(v))
                eb.append(w)
    return _BlockGeometry(
        W, graph.degree[W].astype(float),
        np.array(inner, dtype=np.int64).reshape(-1, 2),
        np.array(outer_l, dtype=np.int64), np.array(outer_n, dtype=np.int64),
        np.array(ea, dtype=np.int64), np.array(eb, dtype=np.int64))


def _assemble(geo, theta, omega, modes, infos, frozen):
    """Precision ``Psi`` and linear term of the block proposal, reduced to
    the free coordinates, plus the index of those coordinates."""
    k = geo.W.size
    p = omega.shape[0]
    Psi = np.zeros((k, p, k, p))
    ar = np.arange(k)
    Psi[ar, :, ar, :] = geo.deg[:, None, None] * omega + infos
    if geo.inner.size:
        Psi[geo.inner[:, 0], :, geo.inner[:, 1], :] = -omega
        Psi[geo.inner[:, 1], :, geo.inner[:, 0], :] = -omega
    xi = np.einsum("kij,kj->ki", infos, modes)
    if geo.outer_local.size:
        nb_sum = np.zeros((k, p))
        np.add.at(nb_sum, geo.outer_local, theta[geo.outer_nb])
        xi += nb_sum @ omega.T
    Psi = Psi.reshape(k * p, k * p)
    xi = xi.reshape(-1)
    free = np.ones(k * p, dtype=bool)
    if np.any(frozen):
        free[np.flatnonzero(frozen) * p] = False
        fixed_idx = np.flatnonzero(~free)
        xi = xi[free] - Psi[np.ix_(free, fixed_idx)] @ theta[geo.W].reshape(-1)[fixed_idx]
        Psi = Psi[np.ix_(free, free)]
    return Psi, xi, free


def _block_log_target(geo, theta_block, theta, omega, loglik_vals):
    # per-voxel likelihood plus prior over edges touching the block
    d_in = theta_block[geo.inner[:, 0]] - theta_block[geo.inner[:, 1]]
    d_out = theta_block[geo.outer_local] - theta[geo.outer_nb]
    d = np.concatenate([d_in, d_out])
    prior = -0.5 * float(np.einsum("ei,ij,ej->", d, omega, d)) if d.size else 0.0
    return float(np.sum(loglik_vals)) + prior


def _proposal(Psi, xi, inflation):
    L = np.linalg.cholesky(Psi / inflation)
    # mean solves Psi mu = xi
    mu = linalg.cho_solve((L, True), xi / inflation, check_finite=False)
    return L, mu


def block_gaussian_mh(W, theta, graph, omega, laplace, loglik, rng, *,
                      scoring="double", inflation=1.0, admissible=None):
    """One Metropolis-Hastings update of a block with a Gaussian proposal.

    Parameters
    ----------
    W : array_like of int
        Voxels of the block.
    theta : ndarray, shape (n, p)
        Current field; updated in place on acceptance.
    graph : VoxelGraph
    omega : ndarray, shape (p, p)
        Pairwise precision.
    laplace : callable
        ``laplace(theta_W) -> (modes, infos, frozen, ok)`` returning per-voxel
        modes ``(k, p)``, information ``(k, p, p)``, a boolean mask of frozen
        intercepts and a success flag.
    loglik : callable
        ``loglik(theta_W) -> (k,)`` per-voxel log likelihood.
    rng : numpy.random.Generator
    scoring : {"double", "single"}
    inflation : float
    admissible : callable, optional
        ``admissible(theta_W) -> bool``; inadmissible proposals are rejected.

    Returns
    -------
    accepted : bool
    log_ratio : float
    reason : str
    """
    geo = W if isinstance(W, _BlockGeometry) else _geometry(graph, W)
    cur = theta[geo.W].copy()
    modes, infos, frozen, ok = laplace(cur)
    st = _forward_stage(geo, theta, omega, (modes, infos, frozen, ok), rng, inflation,
                        admissible)
    if st.status != "ok":
        return False, -np.inf, st.status
    bwd = laplace(st.prop) if scoring == "double" else None
    ok, reason, log_r = _backward_stage(geo, theta, omega, st, bwd, loglik, scoring,
                                        admissible, frozen)
    if ok:
        theta[geo.W] = st.prop
    return ok, log_r, reason


def _poisson_loglik(theta_W, counts, sigma2, Z):
    eta = theta_W @ Z.T
    return 2.0 * np.sum(counts * eta, axis=1) - np.sum(np.exp(2.0 * eta), axis=1) / (2.0 * sigma2)


def _poisson_laplace(theta_W, counts, sigma2, Z, tol, max_iter, separate):
    # joint scoring first; failed voxels retry with the intercept frozen
    k = theta_W.shape[0]
    fixed = np.full(k, bool(separate))
    modes, infos, conv = fisher_scoring_batch(theta_W, counts, sigma2, Z, tol, max_iter, fixed)
    if not separate and not conv.all():
        bad = np.flatnonzero(~conv)
        fixed[bad] = True
        m2, i2, c2 = fisher_scoring_batch(theta_W[bad], counts[bad], sigma2[bad], Z,
                                          tol, max_iter, fixed[bad])
        modes[bad], infos[bad], conv[bad] = m2, i2, c2
    # frozen intercepts stay at their current value
    modes[fixed, 0] = theta_W[fixed, 0]
    return modes, infos, fixed, bool(conv.all())


def update_theta_block(W, state, data, rng, opts=None):
    """Metropolis-Hastings block update of the regression field.

    Parameters
    ----------
    W : array_like of int
        Voxels of the block.
    state : ChainState
    data : _Problem
        Bundle with ``Y``, ``Z``, ``graph`` and ``spec``.
    rng : numpy.random.Generator
    opts : ChainConfig, optional

    Returns
    -------
    accepted : bool
    log_ratio : float
    reason : str
    """
    opts = opts or ChainConfig()
    W = np.asarray(W, dtype=np.int64)
    omega = field_precision(data.spec, state.hyper, opts.rho) if data.spec else data.omega
    counts = sample_counts(data.Y[W], state.theta[W], state.sigma2[W], data.Z, rng)
    s2 = state.sigma2[W]
    separate = opts.theta0_update == "separate"

    def laplace(tw):
        return _poisson_laplace(tw, counts, s2, data.Z, opts.scoring_tol,
                                opts.scoring_max_iter, separate)

    def loglik(tw):
        return _poisson_loglik(tw, counts, s2, data.Z)

    admissible = None
    if opts.positivity == "constrained" and data.spec is not None:
        spec = data.spec
        admissible = lambda tw: bool(np.all(positive_mask(spec, tw[:, 1:])))  # noqa: E731
    return block_gaussian_mh(W, state.theta, data.graph, omega, laplace, loglik, rng,
                             scoring=opts.scoring, inflation=opts.inflation,
                             admissible=admissible)


# ---------------------------------------------------------------------------
# hyperparameters


def hyper_gamma_parameters(spec, theta, graph):
    """Shapes and rates of the Gamma full conditionals of the hyperparameters.

    Parameters
    ----------
    spec : ModelSpec
    theta : ndarray, shape (n, 1 + d)
        Full parameter field; only the tensor part enters.
    graph : VoxelGraph

    Returns
    -------
    names : list of str
    shapes : ndarray
        ``rank_k |V| / 2`` per component.
    rates : ndarray
        ``(1/2) sum_{v~w} delta^T Omega_k delta`` per component.
    """
    comps = precision_components(spec)
    n = graph.n_vertices
    names = [c[0] for c in comps]
    shapes = np.array([c[3] * n / 2.0 for c in comps])
    rates = 0.5 * edge_quadratic_forms(np.asarray(theta)[:, 1:], graph, [c[2] for c in comps])
    return names, shapes, rates


def update_hyper(spec, theta, graph, hyper, rng, rho=0.0):
    """Gibbs draw of all hyperparameter components; zero rates are skipped."""
    names, shapes, rates = hyper_gamma_parameters(spec, theta, graph)
    current = [c[1] for c in precision_components(spec, hyper)]
    new = []
    for name, a, b, old in zip(names, shapes, rates, current):
        if not (b > 0):
            log.warning("zero rate for %s (constant field); update skipped", name)
            new.append(old)
            continue
        new.append(rng.gamma(a, 1.0 / b))
    return hyper_from_components(spec, new, rho)


def update_hyper_2nd(theta, graph, hyper, rng):
    """``delta ~ Gamma(|V|/2, .)``, ``eta ~ Gamma(5|V|/2, .)``, ``lam = (delta - eta)/3``."""
    return update_hyper(ModelSpec("tensor2"), theta, graph, hyper, rng)


def update_hyper_4th(theta, graph, hyper, rng):
    """Independent Gamma draws of ``alpha, beta, delta`` mapped back to ``(eta, lam, gamma)``."""
    return update_hyper(ModelSpec("tensor4"), theta, graph, hyper, rng)


def update_hyper_sh(theta, graph, hyper, rng, order=None):
    """Gamma draws of the inverse power spectrum, one per harmonic degree."""
    order = hyper.order if order is None else order
    return update_hyper(ModelSpec("sh", order), theta, graph, hyper, rng, rho=hyper.rho)


# ---------------------------------------------------------------------------
# chain driver


@dataclass
class _Problem:
    Y: np.ndarray
    Z: np.ndarray
    graph: VoxelGraph
    spec: object
    omega: np.ndarray = None
    positive_y: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        self.Y = np.asarray(self.Y, dtype=float)
        self.Z = np.asarray(self.Z, dtype=float)
        self.positive_y = self.Y > 0


@dataclass
class ChainResult:
    """Posterior summaries, traces and stored draws of a chain run.

    Attributes
    ----------
    spec : ModelSpec or None
    config : ChainConfig
    burn_in : int
    n_averaged : int
        Number of cycles contributing to the means.
    theta_mean, theta_sd : ndarray, shape (n, p)
    sigma2_mean, sigma2_sd : ndarray, shape (n,)
    hyper_mean, hyper_sd : dict
    acceptance : ndarray, shape (n,)
        Fraction of accepted block proposals per voxel after burn-in.
    positive_fraction : ndarray, shape (n,)
    trace : dict of ndarray
        Per-cycle ``cycle``, ``loglik``, ``logprior``, hyperparameters and
        ``acceptance``.
    samples_theta : ndarray, shape (S, n, p)
    samples_sigma2 : ndarray, shape (S, n)
    sample_cycles : ndarray, shape (S,)
        Stored draws after burn-in, every ``thin`` cycles.
    state : ChainState
        Final state.
    diagnostics : dict
    """

    spec: object
    config: ChainConfig
    burn_in: int
    n_averaged: int
    theta_mean: np.ndarray
    theta_sd: np.ndarray
    sigma2_mean: np.ndarray
    sigma2_sd: np.ndarray
    hyper_mean: dict
    hyper_sd: dict
    acceptance: np.ndarray
    positive_fraction: np.ndarray
    trace: dict
    samples_theta: np.ndarray
    samples_sigma2: np.ndarray
    sample_cycles: np.ndarray
    state: ChainState
    diagnostics: dict = field(default_factory=dict)
    coords: np.ndarray = None
    grid_shape: tuple = None


def auto_burn_in(logpost, window=500, stride=10):
    """First cycle after which the log posterior has no detectable trend.

    Scans start points in steps of ``stride`` and returns the first one where
    the least-squares slope over the next ``window`` values (or all remaining
    values when fewer) has ``|t| < 2``. Falls back to half the run.
    """
    lp = np.asarray(logpost, dtype=float)
    n = lp.size
    if n < 3:
        return 0
    for start in range(0, n - 2, stride):
        seg = lp[start:start + window]
        if seg.size < min(window, 20) and start > 0:
            break
        x = np.arange(seg.size, dtype=float)
        x -= x.mean()
        y = seg - seg.mean()
        sxx = x @ x
        slope = (x @ y) / sxx
        resid = y - slope * x
        dof = max(seg.size - 2, 1)
        se = math.sqrt(max(resid @ resid / dof, 0.0) / sxx)
        if se == 0.0:
            if slope == 0.0:
                return start
            continue
        if abs(slope / se) < 2.0:
            return start
    return n // 2


def _rice_loglik(data, theta, sigma2):
    nu = np.exp(theta @ data.Z.T)
    y = data.Y
    pos = data.positive_y
    vals = np.zeros_like(y)
    s2 = np.broadcast_to(sigma2[:, None], y.shape)
    vals[pos] = rice_log_density(y[pos], nu[pos], s2[pos])
    return float(vals.sum())


def _log_prior(data, state, rho, energy_omega):
    lp = -float(np.sum(np.log(state.sigma2)))
    if data.graph.edges.size and energy_omega is not None:
        lp -= field_prior_energy(state.theta, data.graph, energy_omega)
        if data.spec is not None and state.hyper is not None:
            n = data.graph.n_vertices
            for _, val, _, rank in precision_components(data.spec, state.hyper):
                lp += 0.5 * rank * n * math.log(val)
    return lp


def run_chain_arrays(Y, Z, graph, spec, config, theta_init, sigma2_init, omega=None,
                     coords=None, grid_shape=None):
    """Run the sampler on raw arrays.

    Parameters
    ----------
    Y : ndarray, shape (n, m)
        Magnitudes of the ``n`` voxels.
    Z : ndarray, shape (m, p)
        Shared design matrix.
    graph : VoxelGraph
    spec : ModelSpec or None
        ``None`` runs with a fixed pairwise precision ``omega`` and no
        hyperparameter or positivity handling (useful for reduced models).
    config : ChainConfig
    theta_init : ndarray, shape (n, p)
    sigma2_init : ndarray, shape (n,)
    omega : ndarray, shape (p, p), optional
        Required when ``spec`` is None.

    Returns
    -------
    ChainResult
    """
    data = _Problem(Y, Z, graph, spec, omega)
    n, p = np.shape(theta_init)
    if data.Y.shape[0] != n or data.Z.shape[1] != p:
        raise ValueError("inconsistent shapes of Y, Z and theta_init")
    if spec is None and omega is None:
        raise ValueError("omega is required without a model specification")
    cfg = config
    estimate = spec is not None and cfg.hyper_mode == "estimated"

    hyper = cfg.hyper
    if spec is not None and hyper is None:
        hyper = _initial_hyper(spec, theta_init, graph, cfg.rho)
    if spec is not None and spec.family == "sh" and hyper is not None:
        hyper = replace(hyper, rho=cfg.rho)
    state = ChainState(theta_init, sigma2_init, hyper, 0, cfg.seed)

    def current_omega():
        if spec is None:
            return np.asarray(omega, dtype=float)
        return field_precision(spec, state.hyper, cfg.rho)

    names = list(hyper_names(spec)) if spec is not None else []
    C = cfg.cycles
    trace = {"cycle": np.arange(1, C + 1), "loglik": np.zeros(C), "logprior": np.zeros(C),
             "acceptance": np.zeros(C)}
    for nm in names:
        trace[nm] = np.zeros(C)
    accepted = np.zeros((C, n), dtype=np.uint8)
    attempted = np.zeros((C, n), dtype=np.uint8)
    fixed_burn = cfg.burn_in if cfg.burn_in != "auto" else None
    sums = _Accumulator(n, p, names)
    store_t, store_s, store_c, store_h = [], [], [], []
    diag = {"skipped_blocks": 0, "frozen_intercepts": 0, "reasons": {}}

    pool = ThreadPoolExecutor(max_workers=cfg.workers) if cfg.workers > 1 else None
    separate = cfg.theta0_update == "separate"
    try:
        for c in range(C):
            state.cycle = c
            om = current_omega()
            part = partition_blocks(graph, cfg.block_radius, c)
            frozen_cycle = np.zeros(n, dtype=bool)
            for s_idx, step in enumerate(part.steps):
                _run_step(data, state, cfg, om, step, s_idx, c, pool, accepted[c],
                          attempted[c], frozen_cycle, diag, separate)
            # noise variances
            if cfg.update_sigma2:
                rng = block_rng(cfg.seed, c, _KIND_SIGMA)
                allv = np.arange(n)
                counts = update_counts(allv, state, data, rng)
                update_sigma2(allv, state, data, rng, counts)
            # Gibbs step for every intercept, so voxels frozen during the
            # block updates still move; restricting it to them would make the
            # choice of kernel depend on the current state
            diag["frozen_intercepts"] += int(frozen_cycle.sum())
            _theta0_sweep(data, state, cfg, np.arange(n), c)
            if estimate:
                state.hyper = update_hyper(spec, state.theta, graph, state.hyper,
                                           block_rng(cfg.seed, c, _KIND_HYPER), cfg.rho)
            if not (np.all(np.isfinite(state.theta)) and np.all(np.isfinite(state.sigma2))
                    and np.all(state.sigma2 > 0)):
                raise ChainAborted(f"non-finite state at cycle {c}", state)
            ll = _rice_loglik(data, state.theta, state.sigma2)
            trace["loglik"][c] = ll
            trace["logprior"][c] = _log_prior(data, state, cfg.rho, current_omega())
            att = attempted[c].sum()
            trace["acceptance"][c] = accepted[c].sum() / att if att else 0.0
            hv = hyper_values(spec, state.hyper) if spec is not None else ()
            for nm, val in zip(names, hv):
                trace[nm][c] = val
            if fixed_burn is not None and c >= fixed_burn:
                sums.add(state, hv)
            if (c + 1) % cfg.thin == 0:
                store_t.append(state.theta.copy())
                store_s.append(state.sigma2.copy())
                store_c.append(c + 1)
                store_h.append(hv)
    finally:
        if pool is not None:
            pool.shutdown()

    state.cycle = C
    burn = fixed_burn if fixed_burn is not None else auto_burn_in(
        trace["loglik"] + trace["logprior"])
    burn = min(burn, C)
    keep = [i for i, cyc in enumerate(store_c) if cyc > burn]
    samples_t = np.array([store_t[i] for i in keep]).reshape(len(keep), n, p)
    samples_s = np.array([store_s[i] for i in keep]).reshape(len(keep), n)
    sample_cycles = np.array([store_c[i] for i in keep], dtype=np.int64)

    if C == 0 or burn >= C:
        # nothing averaged: report the current state
        theta_mean, theta_sd = state.theta.copy(), np.zeros((n, p))
        s2_mean, s2_sd = state.sigma2.copy(), np.zeros(n)
        hv = hyper_values(spec, state.hyper) if spec is not None else ()
        h_mean = {nm: float(v) for nm, v in zip(names, hv)}
        h_sd = {nm: 0.0 for nm in names}
        n_avg = 0
    elif fixed_burn is not None:
        theta_mean, theta_sd, s2_mean, s2_sd, h_mean, h_sd = sums.result()
        n_avg = sums.count
    else:
        theta_mean = samples_t.mean(axis=0)
        theta_sd = samples_t.std(axis=0)
        s2_mean = samples_s.mean(axis=0)
        s2_sd = samples_s.std(axis=0)
        hs = np.array([store_h[i] for i in keep], dtype=float).reshape(len(keep), len(names))
        h_mean = {nm: float(hs[:, j].mean()) for j, nm in enumerate(names)}
        h_sd = {nm: float(hs[:, j].std()) for j, nm in enumerate(names)}
        n_avg = len(keep)
    att = attempted[burn:].sum(axis=0)
    acc = accepted[burn:].sum(axis=0)
    acceptance = np.where(att > 0, acc / np.maximum(att, 1), 0.0)

    if spec is None:
        positive = np.ones(n)
    elif samples_t.shape[0]:
        flat = samples_t[:, :, 1:].reshape(-1, spec.d)
        positive = positive_mask(spec, flat).reshape(samples_t.shape[0], n).mean(axis=0)
    else:
        positive = positive_mask(spec, state.theta[:, 1:]).astype(float)

    return ChainResult(
        spec=spec, config=cfg, burn_in=int(burn), n_averaged=int(n_avg),
        theta_mean=theta_mean, theta_sd=theta_sd, sigma2_mean=s2_mean, sigma2_sd=s2_sd,
        hyper_mean=h_mean, hyper_sd=h_sd, acceptance=acceptance,
        positive_fraction=positive, trace=trace, samples_theta=samples_t,
        samples_sigma2=samples_s, sample_cycles=sample_cycles, state=state,
        diagnostics=diag, coords=coords, grid_shape=grid_shape)


class _Accumulator:
    """Running means and variances (Welford) of the post burn-in cycles."""

    def __init__(self, n, p, names):
        self.count = 0
        self.mt = np.zeros((n, p))
        self.m2t = np.zeros((n, p))
        self.ms = np.zeros(n)
        self.m2s = np.zeros(n)
        self.names = names
        self.mh = np.zeros(len(names))
        self.m2h = np.zeros(len(names))

    def add(self, state, hv):
        self.count += 1
        k = self.count
        for attr, attr2, x in (("mt", "m2t", state.theta), ("ms", "m2s", state.sigma2),
                               ("mh", "m2h", np.asarray(hv, dtype=float))):
            m = getattr(self, attr)
            d = x - m
            m = m + d / k
            setattr(self, attr, m)
            setattr(self, attr2, getattr(self, attr2) + d * (x - m))

    def result(self):
        k = max(self.count, 1)
        sd = lambda m2: np.sqrt(np.maximum(m2 / k, 0.0))  # noqa: E731
        h_mean = {nm: float(v) for nm, v in zip(self.names, self.mh)}
        h_sd = {nm: float(v) for nm, v in zip(self.names, sd(self.m2h))}
        return self.mt, sd(self.m2t), self.ms, sd(self.m2s), h_mean, h_sd


def _initial_hyper(spec, theta, graph, rho):
    # conditional mean of each component given the initial field
    names, shapes, rates = hyper_gamma_parameters(spec, theta, graph)
    if graph.edges.shape[0] == 0 or np.any(rates <= 0):
        scale = float(np.median(np.abs(theta[:, 1:]))) or 1.0
        return default_hyper(spec, scale, rho)
    return hyper_from_components(spec, shapes / rates, rho)


def _theta0_sweep(data, state, cfg, voxels, cycle):
    rng = block_rng(cfg.seed, cycle, _KIND_THETA0)
    if cfg.rho > 0:
        parity = data.graph.coords[voxels].sum(axis=1) % 2
        groups = [voxels[parity == 0], voxels[parity == 1]]
    else:
        groups = [voxels]
    for g in groups:
        if g.size:
            counts = update_counts(g, state, data, rng)
            update_theta0(g, state, data, rng, counts, rho=cfg.rho, graph=data.graph)


_GEOMETRY_CACHE = {}


def _cached_geometry(graph, W):
    key = (id(graph), W.tobytes())
    hit = _GEOMETRY_CACHE.get(key)
    if hit is not None and hit[0] is graph:
        return hit[1]
    geo = _geometry(graph, W)
    if len(_GEOMETRY_CACHE) > 200000:
        _GEOMETRY_CACHE.clear()
    _GEOMETRY_CACHE[key] = (graph, geo)
    return geo


def _run_step(data, state, cfg, omega, step, s_idx, cycle, pool, acc_row, att_row,
              frozen_cycle, diag, separate):
    """Update all blocks of one schedule step from a common snapshot.

    Scoring is vectorized over every voxel of the step; the per-block
    assembly, draws and accept decisions use per-block random streams.
    """
    Z = data.Z
    spec = data.spec
    nb = len(step)
    geos = [_cached_geometry(data.graph, np.asarray(W, dtype=np.int64)) for W in step]
    rngs = [block_rng(cfg.seed, cycle, _KIND_BLOCK, s_idx, b) for b in range(nb)]
    allW = np.concatenate([g.W for g in geos])
    offsets = np.cumsum([0] + [g.W.size for g in geos])
    # counts for the whole step come from one stream drawn by the controller
    counts = sample_counts(data.Y[allW], state.theta[allW], state.sigma2[allW], Z,
                           block_rng(cfg.seed, cycle, _KIND_COUNTS, s_idx))
    s2 = state.sigma2[allW]
    cur = state.theta[allW].copy()
    tol, mx = cfg.scoring_tol, cfg.scoring_max_iter

    def laplace_all(tw):
        fixed = np.full(tw.shape[0], separate)
        modes, infos, conv = fisher_scoring_batch(tw, counts, s2, Z, tol, mx, fixed)
        if not separate and not conv.all():
            bad = np.flatnonzero(~conv)
            fixed[bad] = True
            m2, i2, c2 = fisher_scoring_batch(tw[bad], counts[bad], s2[bad], Z, tol, mx,
                                              fixed[bad])
            modes[bad], infos[bad], conv[bad] = m2, i2, c2
        modes[fixed, 0] = tw[fixed, 0]
        return modes, infos, fixed, conv

    fm, fi, ff, fc = laplace_all(cur)

    admissible = None
    if cfg.positivity == "constrained" and spec is not None:
        admissible = lambda tw: bool(np.all(positive_mask(spec, tw[:, 1:])))  # noqa: E731

    def sl(arr, b):
        return arr[offsets[b]:offsets[b + 1]]

    # forward stage: proposals for every block
    def forward(b):
        g = geos[b]
        fwd = (sl(fm, b), sl(fi, b), sl(ff, b), bool(sl(fc, b).all()))
        return _forward_stage(g, state.theta, omega, fwd, rngs[b], cfg.inflation, admissible)

    if pool is not None:
        stage1 = list(pool.map(forward, range(nb)))
    else:
        stage1 = [forward(b) for b in range(nb)]

    # backward scoring for all candidates at once
    need = [b for b in range(nb) if stage1[b].status == "ok" and cfg.scoring == "double"]
    bwd = {}
    if need:
        cand = np.concatenate([stage1[b].prop for b in need])
        idx = np.concatenate([np.arange(offsets[b], offsets[b + 1]) for b in need])
        sub_counts = counts[idx]
        sub_s2 = s2[idx]
        fixed = np.full(idx.size, separate)
        modes, infos, conv = fisher_scoring_batch(cand, sub_counts, sub_s2, Z, tol, mx, fixed)
        if not separate and not conv.all():
            bad = np.flatnonzero(~conv)
            fixed[bad] = True
            m2, i2, c2 = fisher_scoring_batch(cand[bad], sub_counts[bad], sub_s2[bad], Z,
                                              tol, mx, fixed[bad])
            modes[bad], infos[bad], conv[bad] = m2, i2, c2
        modes[fixed, 0] = cand[fixed, 0]
        pos = 0
        for b in need:
            k = geos[b].W.size
            bwd[b] = (modes[pos:pos + k], infos[pos:pos + k], fixed[pos:pos + k],
                      bool(conv[pos:pos + k].all()))
            pos += k

    def finish(b):
        g = geos[b]
        c_b = sl(counts, b)
        s_b = sl(s2, b)
        loglik = lambda tw: _poisson_loglik(tw, c_b, s_b, Z)  # noqa: E731
        return _backward_stage(g, state.theta, omega, stage1[b], bwd.get(b), loglik,
                               cfg.scoring, admissible, sl(ff, b))

    if pool is not None:
        outcomes = list(pool.map(finish, range(nb)))
    else:
        outcomes = [finish(b) for b in range(nb)]

    for b, (ok, reason, _) in enumerate(outcomes):
        g = geos[b]
        att_row[g.W] = 1
        if ok:
            acc_row[g.W] = 1
            state.theta[g.W] = stage1[b].prop
        if reason not in ("accepted", "rejected"):
            diag["skipped_blocks"] += 1
            diag["reasons"][reason] = diag["reasons"].get(reason, 0) + 1
        frozen_cycle[g.W] |= sl(ff, b)


@dataclass
class _Stage1:
    status: str
    prop: np.ndarray = None
    L: np.ndarray = None
    mu: np.ndarray = None
    x_new: np.ndarray = None
    free: np.ndarray = None
    u: float = 0.0
    inflation: float = 1.0


def _forward_stage(geo, theta, omega, fwd, rng, inflation, admissible):
    modes, infos, frozen, ok = fwd
    k = geo.W.size
    p = omega.shape[0]
    if not ok:
        return _Stage1("forward scoring failed")
    Psi, xi, free = _assemble(geo, theta, omega, modes, infos, frozen)
    try:
        L, mu = _proposal(Psi, xi, inflation)
    except linalg.LinAlgError:
        return _Stage1("proposal precision not positive definite")
    z = rng.standard_normal(mu.size)
    x_new = mu + linalg.solve_triangular(L.T, z, lower=False, check_finite=False)
    cur = theta[geo.W]
    prop = cur.reshape(-1).copy()
    prop[free] = x_new
    prop = prop.reshape(k, p)
    u = rng.random()
    if admissible is not None and not admissible(prop):
        return _Stage1("inadmissible proposal")
    return _Stage1("ok", prop, L, mu, x_new, free, u, inflation)


def _backward_stage(geo, theta, omega, st, bwd, loglik, scoring, admissible, frozen):
    """Hastings ratio and accept decision; returns ``(accepted, reason, log_ratio)``."""
    if st.status != "ok":
        return False, st.status, -np.inf
    cur = theta[geo.W]
    log_q_fwd = _gauss_logpdf(st.L, st.x_new, st.mu)
    if scoring == "single":
        log_q_bwd = _gauss_logpdf(st.L, cur.reshape(-1)[st.free], st.mu)
    else:
        b_modes, b_infos, b_frozen, b_ok = bwd
        if not b_ok:
            return False, "backward scoring failed", -np.inf
        if np.any(b_frozen != frozen):
            return False, "frozen intercepts differ", -np.inf
        # boundary and frozen coordinates are shared by both directions
        Psi_b, xi_b, free_b = _assemble(geo, theta, omega, b_modes, b_infos, b_frozen)
        try:
            L_b, mu_b = _proposal(Psi_b, xi_b, st.inflation)
        except linalg.LinAlgError:
            return False, "reverse precision not positive definite", -np.inf
        log_q_bwd = _gauss_logpdf(L_b, cur.reshape(-1)[free_b], mu_b)
    lt_new = _block_log_target(geo, st.prop, theta, omega, loglik(st.prop))
    if admissible is not None and not admissible(cur):
        log_r = np.inf
    else:
        lt_cur = _block_log_target(geo, cur, theta, omega, loglik(cur))
        log_r = lt_new - lt_cur + log_q_bwd - log_q_fwd
    if np.isnan(log_r):
        return False, "undefined ratio", log_r
    acc = bool(np.log(st.u) < log_r)
    return acc, ("accepted" if acc else "rejected"), float(log_r)


def run_chain(data, spec, config, init=None, b_max=5000.0):
    """Run the sampler on a dataset.

    Parameters
    ----------
    data : Dataset
    spec : ModelSpec
    config : ChainConfig
    init : (theta, sigma2), optional
        Starting values; the WLS initializer is used when omitted.
    b_max : float
        Largest b-value used by the initializer.

    Returns
    -------
    ChainResult
    """
    from .dataio import wls_initialize

    if init is None:
        theta, sigma2, _ = wls_initialize(data, spec, b_max)
    else:
        theta, sigma2 = (np.array(a, dtype=float) for a in init)
    return run_chain_arrays(data.Y, data.design(spec), data.graph, spec, config, theta,
                            sigma2, coords=data.coords, grid_shape=data.dims)


# ---------------------------------------------------------------------------
# output files


def _fmt(x):
    return repr(float(x))


def write_trace(path, result):
    """Write one tab-separated row per cycle.

    Columns: ``cycle loglik logprior <hyperparameters...> acceptance``.
    """
    tr = result.trace
    names = [k for k in tr if k not in ("cycle", "loglik", "logprior", "acceptance")]
    cols = ["cycle", "loglik", "logprior"] + names + ["acceptance"]
    with open(path, "w", encoding="ascii") as fh:
        fh.write("\t".join(cols) + "\n")
        for i in range(len(tr["cycle"])):
            row = [str(int(tr["cycle"][i]))] + [_fmt(tr[c][i]) for c in cols[1:]]
            fh.write("\t".join(row) + "\n")


@dataclass
class PosteriorSummary:
    """Contents of a summary file.

    Attributes
    ----------
    header : dict of str
    spec : ModelSpec
    grid_shape : tuple of int
    coords : ndarray of int, shape (n, 3)
    theta_mean, theta_sd : ndarray, shape (n, p)
    sigma2_mean, sigma2_sd, acceptance, positive_fraction : ndarray, shape (n,)
    hyper : dict
        ``name -> (mean, sd)``.
    """

    header: dict
    spec: ModelSpec
    grid_shape: tuple
    coords: np.ndarray
    theta_mean: np.ndarray
    theta_sd: np.ndarray
    sigma2_mean: np.ndarray
    sigma2_sd: np.ndarray
    acceptance: np.ndarray
    positive_fraction: np.ndarray
    hyper: dict


def write_summary(path, result):
    """Write posterior means and SDs per voxel.

    The file starts with ``key = value`` lines (``format``, ``model``,
    ``grid``, ``n_voxels``, ``n_params``, ``cycles``, ``burn_in``, ``thin``,
    ``n_averaged``, ``seed``, ``positivity``), then ``hyper <name> <mean>
    <sd>`` lines, a ``columns = ...`` line and, after a ``data`` line, one
    tab-separated row per voxel: ``x y z``, posterior means of theta, their
    SDs, ``sigma2_mean sigma2_sd acceptance positive_fraction``.
    Floats are written with round-trip precision.
    """
    spec = result.spec
    cfg = result.config
    n, p = result.theta_mean.shape
    labels = ["theta0"] + list(spec.labels if spec is not None else
                               [f"c{j}" for j in range(1, p)])
    coords = result.coords if result.coords is not None else np.column_stack(
        [np.arange(n), np.zeros(n, int), np.zeros(n, int)])
    grid = result.grid_shape or (n, 1, 1)
    cols = (["x", "y", "z"] + [f"{c}_mean" for c in labels] + [f"{c}_sd" for c in labels]
            + ["sigma2_mean", "sigma2_sd", "acceptance", "positive_fraction"])
    lines = [
        "# ricedti posterior summary",
        "format = 1",
        f"model = {spec if spec is not None else 'custom'}",
        "grid = " + " ".join(str(int(g)) for g in grid),
        f"n_voxels = {n}",
        f"n_params = {p}",
        f"cycles = {cfg.cycles}",
        f"burn_in = {result.burn_in}",
        f"thin = {cfg.thin}",
        f"n_averaged = {result.n_averaged}",
        f"seed = {cfg.seed}",
        f"positivity = {cfg.positivity}",
    ]
    for name in result.hyper_mean:
        lines.append(f"hyper {name} {_fmt(result.hyper_mean[name])} "
                     f"{_fmt(result.hyper_sd[name])}")
    lines.append("columns = " + " ".join(cols))
    lines.append("data")
    with open(path, "w", encoding="ascii") as fh:
        fh.write("\n".join(lines) + "\n")
        for v in range(n):
            vals = ([str(int(c)) for c in coords[v]]
                    + [_fmt(x) for x in result.theta_mean[v]]
                    + [_fmt(x) for x in result.theta_sd[v]]
                    + [_fmt(result.sigma2_mean[v]), _fmt(result.sigma2_sd[v]),
                       _fmt(result.acceptance[v]), _fmt(result.positive_fraction[v])])
            fh.write("\t".join(vals) + "\n")


def read_summary(path):
    """Parse a file written by :func:`write_summary`.

    Returns
    -------
    PosteriorSummary
    """
    header, hyper = {}, {}
    rows = []
    in_data = False
    with open(path, encoding="ascii") as fh:
        for lineno, line in enumerate(fh, start=1):
            text = line.strip()
            if in_data:
                if text:
                    rows.append((lineno, text.split("\t")))
                continue
            if not text or text.startswith("#"):
                continue
            if text == "data":
                in_data = True
            elif text.startswith("hyper "):
                parts = text.split()
                if len(parts) != 4:
                    raise ValueError(f"{path}:{lineno}: malformed hyperparameter line")
                hyper[parts[1]] = (float(parts[2]), float(parts[3]))
            elif "=" in text:
                k, v = (s.strip() for s in text.split("=", 1))
                header[k] = v
            else:
                raise ValueError(f"{path}:{lineno}: unexpected line")
    for key in ("model", "grid", "n_voxels", "n_params", "columns"):
        if key not in header:
            raise ValueError(f"{path}: missing '{key}'")
    n, p = int(header["n_voxels"]), int(header["n_params"])
    ncol = len(header["columns"].split())
    if len(rows) != n:
        raise ValueError(f"{path}: expected {n} data rows, found {len(rows)}")
    arr = np.zeros((n, ncol))
    for i, (lineno, parts) in enumerate(rows):
        if len(parts) != ncol:
            raise ValueError(f"{path}:{lineno}: expected {ncol} columns, got {len(parts)}")
        try:
            arr[i] = [float(x) for x in parts]
        except ValueError as exc:
            raise ValueError(f"{path}:{lineno}: {exc}") from None
    model = header["model"]
    spec = None if model == "custom" else ModelSpec.parse(model)
    return PosteriorSummary(
        header=header, spec=spec,
        grid_shape=tuple(int(g) for g in header["grid"].split()),
        coords=arr[:, :3].astype(np.int64),
        theta_mean=arr[:, 3:3 + p], theta_sd=arr[:, 3 + p:3 + 2 * p],
        sigma2_mean=arr[:, 3 + 2 * p], sigma2_sd=arr[:, 4 + 2 * p],
        acceptance=arr[:, 5 + 2 * p], positive_fraction=arr[:, 6 + 2 * p],
        hyper=hyper)
