"""Isotropic Gaussian priors for tensors and pairwise-difference field priors.

The precision of a single tensor is linear in its hyperparameters, so every
family is stored as a sum ``Omega = sum_k h_k Omega_k`` of fixed matrices.
The coefficients ``h_k`` are the quantities with conjugate Gamma updates:
``(delta, eta)`` for Tensor2, ``(alpha, beta, delta)`` for Tensor4 and the
inverse power spectrum ``a_{2l}^-2`` for spherical harmonics.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy import sparse

from .design import dhat, sh_indices, tensor2_matrix

__all__ = [
    "IsoPrecision2",
    "IsoPrecision4",
    "PowerSpectrum",
    "VoxelGraph",
    "omega_2nd",
    "omega_4th",
    "omega_sh",
    "tensor_precision",
    "field_precision",
    "g_invariant",
    "iso_log_density",
    "iso_log_normalizer",
    "field_prior_energy",
    "edge_quadratic_forms",
    "spectrum_to_precision",
    "precision_components",
    "hyper_from_components",
    "hyper_values",
    "hyper_names",
    "default_hyper",
]


@dataclass(frozen=True)
class IsoPrecision2:
    """Isotropic precision of a Tensor2: ``eta > 0`` and ``lam > -eta/3``."""

    eta: float
    lam: float

    def __post_init__(self):
        if not (np.isfinite(self.eta) and np.isfinite(self.lam)):
            raise ValueError("hyperparameters must be finite")
        if self.eta <= 0:
            raise ValueError("eta must be positive")
        if self.eta + 3.0 * self.lam <= 0:
            raise ValueError("lambda must exceed -eta/3")

    @property
    def delta(self):
        return self.eta + 3.0 * self.lam


@dataclass(frozen=True)
class IsoPrecision4:
    """Isotropic precision of a Tensor4 with parameters ``(eta, lam, gamma)``.

    The admissible region is exactly ``alpha, beta, delta > 0`` with
    ``alpha = gamma + eta``, ``beta = 3 eta - 4 gamma`` and
    ``delta = 3 eta + 8 gamma + 15 lam``.
    """

    eta: float
    lam: float
    gamma: float

    def __post_init__(self):
        if not all(np.isfinite(x) for x in (self.eta, self.lam, self.gamma)):
            raise ValueError("hyperparameters must be finite")
        if self.eta <= 0:
            raise ValueError("eta must be positive")
        if not (-self.eta < self.gamma < 0.75 * self.eta):
            raise ValueError("gamma must lie in (-eta, 3 eta / 4)")
        if self.lam <= -(self.eta / 5.0 + 8.0 * self.gamma / 15.0):
            raise ValueError("lambda must exceed -(eta/5 + 8 gamma/15)")

    @property
    def alpha(self):
        return self.gamma + self.eta

    @property
    def beta(self):
        return 3.0 * self.eta - 4.0 * self.gamma

    @property
    def delta(self):
        return 3.0 * self.eta + 8.0 * self.gamma + 15.0 * self.lam

    @classmethod
    def from_abd(cls, alpha, beta, delta):
        """Invert the ``(alpha, beta, delta)`` reparametrization."""
        eta = (beta + 4.0 * alpha) / 7.0
        lam = (7.0 * delta + 5.0 * beta - 36.0 * alpha) / 105.0
        gamma = (3.0 * alpha - beta) / 7.0
        return cls(eta, lam, gamma)


@dataclass(frozen=True)
class PowerSpectrum:
    """Angular power spectrum ``(a_0^2, a_2^2, ..., a_2n^2)`` and ``rho``."""

    a2l_sq: tuple
    rho: float = 0.0

    def __post_init__(self):
        a = tuple(float(x) for x in np.atleast_1d(self.a2l_sq))
        if not a:
            raise ValueError("the spectrum needs at least one degree")
        if any(not np.isfinite(x) or x <= 0 for x in a):
            raise ValueError("spectrum entries must be positive")
        if not np.isfinite(self.rho) or self.rho < 0:
            raise ValueError("rho must be non-negative")
        object.__setattr__(self, "a2l_sq", a)

    @property
    def order(self):
        return len(self.a2l_sq) - 1


# ---------------------------------------------------------------------------
# voxel graph


@dataclass
class VoxelGraph:
    """Six-neighbourhood graph of the voxels inside a mask.

    Voxels are numbered in C order of the grid restricted to the mask.

    Attributes
    ----------
    shape : tuple of int
    coords : ndarray, shape (n, 3)
    edges : ndarray, shape (n_edges, 2)
        Unordered pairs ``(v, w)`` with ``v < w``.
    indptr, indices : ndarray
        Compressed adjacency lists.
    """

    shape: tuple
    coords: np.ndarray
    edges: np.ndarray
    indptr: np.ndarray = field(repr=False)
    indices: np.ndarray = field(repr=False)

    @classmethod
    def from_mask(cls, mask):
        mask = np.asarray(mask, dtype=bool)
        if mask.ndim != 3:
            raise ValueError("mask must be a 3-d array")
        coords = np.argwhere(mask)
        ids = -np.ones(mask.shape, dtype=np.int64)
        ids[mask] = np.arange(coords.shape[0])
        pairs = []
        for axis in range(3):
            lo = [slice(None)] * 3
            hi = [slice(None)] * 3
            lo[axis] = slice(0, -1)
            hi[axis] = slice(1, None)
            a = ids[tuple(lo)]
            b = ids[tuple(hi)]
            keep = (a >= 0) & (b >= 0)
            pairs.append(np.column_stack([a[keep], b[keep]]))
        edges = np.concatenate(pairs) if pairs else np.zeros((0, 2), dtype=np.int64)
        edges = np.sort(edges, axis=1)
        edges = edges[np.lexsort((edges[:, 1], edges[:, 0]))]
        return cls._build(mask.shape, coords, edges)

    @classmethod
    def from_edges(cls, n, edges):
        """Graph on ``n`` abstract vertices from a list of unordered pairs."""
        edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
        if np.any(edges[:, 0] == edges[:, 1]):
            raise ValueError("self-edges are not allowed")
        edges = np.unique(np.sort(edges, axis=1), axis=0)
        coords = np.column_stack([np.arange(n), np.zeros(n, int), np.zeros(n, int)])
        return cls._build((n, 1, 1), coords, edges)

    @classmethod
    def _build(cls, shape, coords, edges):
        n = coords.shape[0]
        both = np.concatenate([edges, edges[:, ::-1]])
        A = sparse.csr_matrix(
            (np.ones(both.shape[0]), (both[:, 0], both[:, 1])), shape=(n, n))
        A.sort_indices()
        return cls(tuple(int(s) for s in shape), coords, edges,
                   A.indptr.astype(np.int64), A.indices.astype(np.int64))

    @property
    def n_vertices(self):
        return self.coords.shape[0]

    def neighbors(self, v):
        return self.indices[self.indptr[v]:self.indptr[v + 1]]

    @property
    def degree(self):
        return np.diff(self.indptr)

    def adjacency(self):
        n = self.n_vertices
        data = np.ones(self.indices.shape[0])
        return sparse.csr_matrix((data, self.indices, self.indptr), shape=(n, n))


# ---------------------------------------------------------------------------
# single-tensor precision matrices


def _omega2_raw(eta, lam):
    om = np.zeros((6, 6))
    om[:3, :3] = lam
    om[np.arange(3), np.arange(3)] = eta + lam
    om[np.arange(3, 6), np.arange(3, 6)] = 2.0 * eta
    return om


def omega_2nd(p):
    """6x6 precision of the isotropic Tensor2 law in Tensor2 coefficient order."""
    if not isinstance(p, IsoPrecision2):
        raise TypeError("expected IsoPrecision2")
    return _omega2_raw(p.eta, p.lam)


# positions of the printed off-diagonal block ordering within the Tensor4 layout
_OFFDIAG_ORDER = np.array([9, 10, 11, 12, 13, 14, 6, 7, 8])


def _omega4_raw(eta, lam, gamma):
    e, l, g = eta, lam, gamma
    a = np.array([
        [e + l, l + g, l + g, 2 * l, 2 * l, 2 * l + 2 * g],
        [l + g, e + l, l + g, 2 * l, 2 * l + 2 * g, 2 * l],
        [l + g, l + g, e + l, 2 * l + 2 * g, 2 * l, 2 * l],
        [2 * l, 2 * l, 2 * l + 2 * g, 6 * e + 6 * g + 4 * l, 4 * l + 2 * g, 4 * l + 2 * g],
        [2 * l, 2 * l + 2 * g, 2 * l, 4 * l + 2 * g, 6 * e + 6 * g + 4 * l, 4 * l + 2 * g],
        [2 * l + 2 * g, 2 * l, 2 * l, 4 * l + 2 * g, 4 * l + 2 * g, 6 * e + 6 * g + 4 * l],
    ])
    d4, g4, c = 4 * e, 4 * g, 12 * e + 8 * g
    b = np.array([
        [d4, 0, -g4, 0, 0, 0, 0, 0, -g4],
        [0, d4, 0, 0, -g4, 0, 0, -g4, 0],
        [-g4, 0, d4, 0, 0, 0, 0, 0, -g4],
        [0, 0, 0, d4, 0, -g4, -g4, 0, 0],
        [0, -g4, 0, 0, d4, 0, 0, -g4, 0],
        [0, 0, 0, -g4, 0, d4, -g4, 0, 0],
        [0, 0, 0, -g4, 0, -g4, c, 0, 0],
        [0, -g4, 0, 0, -g4, 0, 0, c, 0],
        [-g4, 0, -g4, 0, 0, 0, 0, 0, c],
    ])
    om = np.zeros((15, 15))
    om[:6, :6] = a
    om[np.ix_(_OFFDIAG_ORDER, _OFFDIAG_ORDER)] = b
    return om


def omega_4th(p):
    """15x15 precision of the isotropic Tensor4 law in Tensor4 coefficient order."""
    if not isinstance(p, IsoPrecision4):
        raise TypeError("expected IsoPrecision4")
    return _omega4_raw(p.eta, p.lam, p.gamma)


def _sh_degree_of(n):
    return np.array([l // 2 for l, _ in sh_indices(n)])


def omega_sh(p, n=None):
    """Diagonal precision ``a_{2l}^-2`` of SH coefficients up to order ``n``."""
    if n is None:
        n = p.order
    if len(p.a2l_sq) != n + 1:
        raise ValueError(f"spectrum has {len(p.a2l_sq)} degrees, order {n} needs {n + 1}")
    inv = 1.0 / np.asarray(p.a2l_sq)
    return np.diag(inv[_sh_degree_of(n)])


def tensor_precision(spec, hyper):
    """Precision of the diffusivity coefficients for the family of ``spec``."""
    if spec.family == "tensor2":
        return omega_2nd(hyper)
    if spec.family == "tensor4":
        return omega_4th(hyper)
    return omega_sh(hyper, spec.sh_order)


def field_precision(spec, hyper, rho=0.0):
    """Block-diagonal ``(rho, Omega_D)`` acting on full parameter vectors."""
    om = np.zeros((spec.n_params, spec.n_params))
    om[0, 0] = float(rho)
    om[1:, 1:] = tensor_precision(spec, hyper)
    return om


# ---------------------------------------------------------------------------
# Gamma-conjugate decomposition


def _components(spec):
    # (name, basis matrix, rank) with Omega_D = sum value_k * basis_k
    if spec.family == "tensor2":
        # eta (Omega_eta - Omega_lam/3) + delta Omega_lam/3
        om_eta = _omega2_raw(1.0, 0.0)
        om_lam = _omega2_raw(0.0, 1.0)
        return [("delta", om_lam / 3.0, 1), ("eta", om_eta - om_lam / 3.0, 5)]
    if spec.family == "tensor4":
        return [
            ("alpha", _omega4_raw(4.0 / 7.0, -36.0 / 105.0, 3.0 / 7.0), 9),
            ("beta", _omega4_raw(1.0 / 7.0, 5.0 / 105.0, -1.0 / 7.0), 5),
            ("delta", _omega4_raw(0.0, 7.0 / 105.0, 0.0), 1),
        ]
    deg = _sh_degree_of(spec.sh_order)
    out = []
    for l in range(spec.sh_order + 1):
        out.append((f"a{2 * l}^-2", np.diag((deg == l).astype(float)), 4 * l + 1))
    return out


def precision_components(spec, hyper=None):
    """Linear decomposition of ``Omega_D`` into Gamma-conjugate pieces.

    Returns
    -------
    list of (name, value, basis, rank)
        ``value`` is None when ``hyper`` is not given. ``Omega_D`` equals
        ``sum value * basis``; ``rank`` is the rank of ``basis``.
    """
    comps = _components(spec)
    if hyper is None:
        return [(name, None, basis, rank) for name, basis, rank in comps]
    if spec.family == "tensor2":
        vals = [hyper.delta, hyper.eta]
    elif spec.family == "tensor4":
        vals = [hyper.alpha, hyper.beta, hyper.delta]
    else:
        vals = [1.0 / a for a in hyper.a2l_sq]
    return [(name, v, basis, rank) for (name, basis, rank), v in zip(comps, vals)]


def hyper_from_components(spec, values, rho=0.0):
    """Rebuild the hyperparameter object from component values."""
    values = [float(v) for v in values]
    if spec.family == "tensor2":
        delta, eta = values
        return IsoPrecision2(eta, (delta - eta) / 3.0)
    if spec.family == "tensor4":
        return IsoPrecision4.from_abd(*values)
    return PowerSpectrum(tuple(1.0 / v for v in values), rho)


def hyper_names(spec):
    """Reported hyperparameter names."""
    if spec.family == "tensor2":
        return ("eta", "lambda")
    if spec.family == "tensor4":
        return ("eta", "lambda", "gamma")
    return tuple(f"a{2 * l}^2" for l in range(spec.sh_order + 1))


def hyper_values(spec, hyper):
    """Reported hyperparameter values, matching :func:`hyper_names`."""
    if spec.family == "tensor2":
        return (hyper.eta, hyper.lam)
    if spec.family == "tensor4":
        return (hyper.eta, hyper.lam, hyper.gamma)
    return tuple(hyper.a2l_sq)


def default_hyper(spec, scale=1.0, rho=0.0):
    """Weak isotropic precision ``1/scale**2`` used when nothing is known."""
    h = 1.0 / scale**2
    if spec.family == "tensor2":
        return IsoPrecision2(h, 0.0)
    if spec.family == "tensor4":
        return IsoPrecision4(h, 0.0, 0.0)
    return PowerSpectrum(tuple([scale**2] * (spec.sh_order + 1)), rho)


# ---------------------------------------------------------------------------
# invariants and densities


def g_invariant(D):
    """Rotation-invariant quadratic polynomial of a Tensor4.

    Parameters
    ----------
    D : array_like, shape (..., 15)

    Notes
    -----
    Together with ``trace(dhat(D)**2)`` and ``trace(dhat(D))**2`` it spans the
    isotropic quadratic forms; the precision matrix satisfies
    ``D Omega D = eta tr(dhat^2) + lam tr(dhat)^2 + 2 gamma g(D)``.
    """
    D = np.asarray(D, dtype=float)
    (a, b, c, ab, ac, bc, x123, y123, z123,
     a12, a13, b12, b23, c13, c23) = np.moveaxis(D, -1, 0)
    # a=D1111 b=D2222 c=D3333 ab=D1122 ac=D1133 bc=D2233
    # x123=D1123 y123=D1223 z123=D1233 a12=D1112 a13=D1113 b12=D1222
    # b23=D2223 c13=D1333 c23=D2333
    return (
        a * (b + c) + b * c
        + 3.0 * (ab**2 + ac**2 + bc**2)
        + 2.0 * (ab * c + ac * b + bc * a + ab * (ac + bc) + bc * ac)
        + 4.0 * (
            z123 * (z123 - b12 - a12)
            + y123 * (y123 - a13 - c13)
            + x123 * (x123 - c23 - b23)
            - b12 * a12 - a13 * c13 - b23 * c23
        )
    )


def iso_log_normalizer(spec, hyper):
    """Log of the printed normalizing constant of the isotropic Gaussian."""
    if spec.family == "tensor2":
        return (2.5 * np.log(hyper.eta) + 0.5 * np.log(hyper.delta)
                - 3.0 * np.log(np.pi * np.sqrt(2.0)))
    if spec.family == "tensor4":
        return 3.0 * np.log(2.0) + 0.5 * (
            9 * np.log(hyper.alpha) + 5 * np.log(hyper.beta) + np.log(hyper.delta)
            - 15 * np.log(np.pi))
    prec = np.diag(omega_sh(hyper, spec.sh_order))
    return 0.5 * np.sum(np.log(prec)) - 0.5 * prec.size * np.log(2.0 * np.pi)


def iso_log_density(spec, coeffs, hyper):
    """Log density of the zero-mean isotropic Gaussian law of a tensor.

    Parameters
    ----------
    spec : ModelSpec
    coeffs : array_like, shape (..., d)
    hyper : IsoPrecision2, IsoPrecision4 or PowerSpectrum

    Returns
    -------
    float or ndarray
    """
    coeffs = np.asarray(coeffs, dtype=float)
    if spec.family == "tensor2":
        M = tensor2_matrix(coeffs)
        tr = np.trace(M, axis1=-2, axis2=-1)
        quad = hyper.eta * np.sum(M * M, axis=(-2, -1)) + hyper.lam * tr**2
    elif spec.family == "tensor4":
        H = dhat(coeffs)
        tr = np.trace(H, axis1=-2, axis2=-1)
        quad = (hyper.eta * np.sum(H * H, axis=(-2, -1)) + hyper.lam * tr**2
                + 2.0 * hyper.gamma * g_invariant(coeffs))
    else:
        om = tensor_precision(spec, hyper)
        quad = np.einsum("...i,ij,...j->...", coeffs, om, coeffs)
    return iso_log_normalizer(spec, hyper) - 0.5 * quad


def edge_quadratic_forms(field, graph, bases):
    """Sums ``sum_edges delta^T B delta`` for each matrix ``B`` in ``bases``."""
    field = np.asarray(field, dtype=float)
    if graph.edges.shape[0] == 0:
        return np.zeros(len(bases))
    delta = field[graph.edges[:, 0]] - field[graph.edges[:, 1]]
    S = delta.T @ delta
    return np.array([np.sum(S * B) for B in bases])


def field_prior_energy(field, graph, omega):
    """Pairwise-difference energy ``1/2 sum_{v~w} (t_v - t_w) Omega (t_v - t_w)``.

    Parameters
    ----------
    field : array_like, shape (n, p)
    graph : VoxelGraph
    omega : array_like, shape (p, p)

    Returns
    -------
    float
    """
    field = np.asarray(field, dtype=float)
    if field.shape[0] != graph.n_vertices:
        raise ValueError("field and graph sizes differ")
    if graph.edges.shape[0] == 0:
        return 0.0
    delta = field[graph.edges[:, 0]] - field[graph.edges[:, 1]]
    return 0.5 * float(np.einsum("ei,ij,ej->", delta, omega, delta))


def spectrum_to_precision(s, spec):
    """Isotropic precision implied by an angular power spectrum.

    Parameters
    ----------
    s : PowerSpectrum
        ``(a_0^2, a_2^2)`` for Tensor2 or ``(a_0^2, a_2^2, a_4^2)`` for Tensor4.
    spec : ModelSpec
        Tensor family receiving the result.
    """
    pi = np.pi
    if spec.family == "tensor2":
        if len(s.a2l_sq) != 2:
            raise ValueError("Tensor2 needs a spectrum (a0^2, a2^2)")
        i0, i2 = 1.0 / s.a2l_sq[0], 1.0 / s.a2l_sq[1]
        eta = 8 * pi / 15 * i2
        lam = 4 * pi / 9 * i0 - 8 * pi / 45 * i2
        return IsoPrecision2(eta, lam)
    if spec.family == "tensor4":
        if len(s.a2l_sq) != 3:
            raise ValueError("Tensor4 needs a spectrum (a0^2, a2^2, a4^2)")
        i0, i2, i4 = (1.0 / a for a in s.a2l_sq)
        eta = 48 * pi / 245 * i2 + 128 * pi / 2205 * i4
        lam = 4 * pi / 25 * i0 + 16 * pi / 245 * i2 - 128 * pi / 3675 * i4
        gamma = -48 * pi / 245 * i2 + 32 * pi / 735 * i4
        return IsoPrecision4(eta, lam, gamma)
    raise ValueError("spectrum_to_precision targets a tensor family")
