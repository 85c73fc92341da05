"""Model specifications, design matrices and tensor algebra.

Coefficient layouts
-------------------
Tensor2 : ``(D11, D22, D33, D12, D13, D23)``.
Tensor4 : ``(D1111, D2222, D3333, D1122, D1133, D2233, D1123, D1223, D1233,
D1112, D1113, D1222, D2223, D1333, D2333)``.
SH(n) : even degrees ``l = 0, 2, ..., 2n``, ``m`` from ``-l`` to ``l``.

A full parameter vector is ``theta = (log S0, coefficients)`` and the design
row for an acquisition with unit direction ``u`` and b-value ``b`` is
``(1, -b * basis(u))`` so that ``Z @ theta = log S0 - b d(u)``.
"""

from dataclasses import dataclass
from functools import lru_cache
from itertools import combinations_with_replacement
from math import factorial

import numpy as np
from scipy.special import lpmv

from ._validation import as_float_array, check_int


__all__ = [
    "TENSOR2_LABELS",
    "TENSOR4_LABELS",
    "ModelSpec",
    "GradientScheme",
    "TABLE3_DIRECTIONS",
    "TABLE2_BVALUES",
    "protocol_scheme",
    "build_design_row_2nd",
    "build_design_row_4th",
    "build_design_row_sh",
    "design_matrix",
    "basis_matrix",
    "diffusivity",
    "real_spherical_harmonic",
    "tensor_sh_bijection",
    "tensor2_matrix",
    "tensor2_from_matrix",
    "tensor4_full",
    "tensor4_from_full",
    "dhat",
    "rotate_tensor2",
    "rotate_tensor4",
    "random_rotation",
    "PositivityResult",
    "positivity_check",
    "min_diffusivity",
    "fa_md_2nd",
    "project_4th_to_2nd",
    "md_4th",
    "to_tensor2",
    "to_tensor4",
    "fibonacci_sphere",
]

TENSOR2_LABELS = ("D11", "D22", "D33", "D12", "D13", "D23")
TENSOR4_LABELS = (
    "D1111", "D2222", "D3333", "D1122", "D1133", "D2233",
    "D1123", "D1223", "D1233",
    "D1112", "D1113", "D1222", "D2223", "D1333", "D2333",
)

# zero-based index tuples and multiplicities (number of distinct permutations)
_T2_INDEX = tuple(tuple(int(c) - 1 for c in lab[1:]) for lab in TENSOR2_LABELS)
_T4_INDEX = tuple(tuple(int(c) - 1 for c in lab[1:]) for lab in TENSOR4_LABELS)


def _multiplicity(idx):
    counts = np.bincount(idx, minlength=3)
    out = factorial(len(idx))
    for c in counts:
        out //= factorial(int(c))
    return out


_T2_MULT = np.array([_multiplicity(i) for i in _T2_INDEX], dtype=float)
_T4_MULT = np.array([_multiplicity(i) for i in _T4_INDEX], dtype=float)

_FAMILIES = ("tensor2", "tensor4", "sh")


@dataclass(frozen=True)
class ModelSpec:
    """Diffusivity model family.

    Parameters
    ----------
    family : {"tensor2", "tensor4", "sh"}
    sh_order : int
        Truncation order ``n`` of the even spherical-harmonic expansion; only
        used by the ``"sh"`` family, where degrees ``0, 2, ..., 2n`` appear.
    """

    family: str = "tensor2"
    sh_order: int = 0

    def __post_init__(self):
        family = str(self.family).lower()
        if family not in _FAMILIES:
            raise ValueError(f"family must be one of {_FAMILIES}, got {self.family!r}")
        object.__setattr__(self, "family", family)
        check_int(self.sh_order, "sh_order", minimum=0)
        if family != "sh":
            object.__setattr__(self, "sh_order", 0)

    @property
    def d(self):
        """Number of diffusivity coefficients."""
        if self.family == "tensor2":
            return 6
        if self.family == "tensor4":
            return 15
        n = self.sh_order
        return (2 * n + 1) * (n + 1)

    @property
    def n_params(self):
        return 1 + self.d

    @property
    def degree(self):
        """Polynomial degree of the diffusivity on the sphere."""
        if self.family == "tensor2":
            return 2
        if self.family == "tensor4":
            return 4
        return 2 * self.sh_order

    @property
    def labels(self):
        if self.family == "tensor2":
            return TENSOR2_LABELS
        if self.family == "tensor4":
            return TENSOR4_LABELS
        return tuple(f"Y{l},{m}" for l, m in sh_indices(self.sh_order))

    def __str__(self):
        return f"sh{self.sh_order}" if self.family == "sh" else self.family

    @classmethod
    def parse(cls, text):
        """Parse ``"tensor2"``, ``"tensor4"`` or ``"sh<n>"``."""
        text = str(text).strip().lower()
        if text.startswith("sh"):
            order = text[2:] or "0"
            try:
                return cls("sh", int(order))
            except ValueError:
                raise ValueError(f"bad SH model name {text!r}") from None
        return cls(text)


def sh_indices(n):
    """List of ``(l, m)`` for even ``l <= 2n``, ``m`` ascending."""
    return [(l, m) for l in range(0, 2 * n + 1, 2) for m in range(-l, l + 1)]


# ---------------------------------------------------------------------------
# gradient schemes

# 32 gradient directions of the reference protocol, printed to four decimals
TABLE3_DIRECTIONS = np.array([
    [-0.5000, -0.5000, -0.7071], [-0.5000, -0.5000, 0.7071],
    [0.7071, -0.7071, -0.0000], [-0.6533, -0.2706, -0.7071],
    [-0.2087, -0.6756, -0.7071], [0.0197, -0.7068, -0.7071],
    [0.4212, -0.5679, -0.7071], [0.6899, -0.1549, -0.7071],
    [-0.6535, -0.2707, -0.7069], [-0.2929, -0.7071, -0.6436],
    [0.2945, -0.7064, -0.6436], [0.5150, -0.4861, -0.7061],
    [0.7071, -0.2929, -0.6436], [-0.7071, -0.4725, -0.5261],
    [-0.4725, -0.7071, -0.5261], [0.5555, -0.6439, -0.5261],
    [0.7071, -0.4725, -0.5261], [-0.7071, -0.7071, -0.0002],
    [-0.7071, -0.4725, 0.5261], [0.7071, -0.4725, 0.5261],
    [0.4725, -0.7071, 0.5261], [-0.7071, -0.7071, 0.0078],
    [-0.6364, -0.4252, 0.6436], [-0.7060, -0.7060, 0.0547],
    [-0.2929, -0.7071, 0.6436], [0.2929, -0.7071, 0.6436],
    [0.7071, -0.7071, 0.0078], [0.7071, -0.2929, 0.6436],
    [-0.7063, -0.7063, 0.0489], [0.0347, -0.7063, 0.7071],
    [0.7071, -0.7071, 0.0115], [0.7071, 0.0000, 0.7071],
])

TABLE2_BVALUES = np.array([
    0.0, 62.0, 249.0, 560.0, 996.0, 1556.0, 2240.0, 3049.0, 3982.0,
    5040.0, 6222.0, 7529.0, 8960.0, 10516.0, 12196.0, 14000.0,
])


@dataclass
class GradientScheme:
    """Acquisition protocol: unit directions, b-values and repeat counts.

    Parameters
    ----------
    directions : array_like, shape (k, 3)
        Unit gradient directions. Rows with ``b == 0`` may hold any vector.
    bvalues : array_like, shape (k,)
        Non-negative b-values in s/mm^2.
    repeats : array_like of int, shape (k,), optional
        Number of acquisitions per row, default 1.
    """

    directions: np.ndarray
    bvalues: np.ndarray
    repeats: np.ndarray = None

    def __post_init__(self):
        u = as_float_array(self.directions, "directions")
        if u.ndim == 1:
            u = u[None, :]
        if u.ndim != 2 or u.shape[1] != 3:
            raise ValueError(f"directions must have shape (k, 3), got {u.shape}")
        b = as_float_array(self.bvalues, "bvalues").reshape(-1)
        if b.shape[0] != u.shape[0]:
            raise ValueError("directions and bvalues differ in length")
        if np.any(b < 0):
            raise ValueError("b-values must be non-negative")
        norms = np.linalg.norm(u, axis=1)
        bad = (b > 0) & (np.abs(norms - 1.0) > 1e-6)
        if np.any(bad):
            raise ValueError(
                f"direction {int(np.flatnonzero(bad)[0])} is not a unit vector"
            )
        if self.repeats is None:
            rep = np.ones(b.shape[0], dtype=np.int64)
        else:
            rep = np.asarray(self.repeats).reshape(-1)
            if rep.shape[0] != b.shape[0] or np.any(rep < 1) or np.any(rep != np.round(rep)):
                raise ValueError("repeats must be positive integers, one per row")
            rep = rep.astype(np.int64)
        self.directions = u
        self.bvalues = b
        self.repeats = rep

    def __len__(self):
        return self.directions.shape[0]

    @property
    def n_acquisitions(self):
        return int(self.repeats.sum())

    def expand(self):
        """Per-acquisition arrays ``(u, b)`` with repeats unrolled.

        Directions with ``b > 0`` are renormalized to unit length; zero-b rows
        get the zero vector since they do not enter the model.
        """
        u = np.repeat(self.directions, self.repeats, axis=0)
        b = np.repeat(self.bvalues, self.repeats)
        norms = np.linalg.norm(u, axis=1)
        unit = np.zeros_like(u)
        pos = (b > 0) & (norms > 0)
        unit[pos] = u[pos] / norms[pos, None]
        return unit, b

    def summary(self):
        """Short human-readable description."""
        shells = np.unique(self.bvalues)
        dirs = np.unique(np.round(self.directions[self.bvalues > 0], 6), axis=0)
        return (
            f"{len(self)} rows, {self.n_acquisitions} acquisitions, "
            f"{len(dirs)} directions, {len(shells)} b-values "
            f"({shells.min():g}-{shells.max():g} s/mm^2)"
        )

    def to_file(self, path):
        """Write the table ``ux uy uz b repeats``, one row per line."""
        with open(path, "w", encoding="ascii") as fh:
            fh.write("# ux uy uz b repeats\n")
            for (x, y, z), b, r in zip(self.directions, self.bvalues, self.repeats):
                fh.write(f"{float(x)!r} {float(y)!r} {float(z)!r} {float(b)!r} {int(r)}\n")

    @classmethod
    def from_file(cls, path):
        """Read a scheme table; blank lines and ``#`` comments are skipped."""
        rows = []
        with open(path, encoding="ascii") as fh:
            for lineno, line in enumerate(fh, start=1):
                text = line.split("#", 1)[0].strip()
                if not text:
                    continue
                parts = text.split()
                if len(parts) not in (4, 5):
                    raise ValueError(f"{path}:{lineno}: expected 4 or 5 columns, got {len(parts)}")
                try:
                    vals = [float(p) for p in parts[:4]]
                    rep = int(parts[4]) if len(parts) == 5 else 1
                except ValueError as exc:
                    raise ValueError(f"{path}:{lineno}: {exc}") from None
                rows.append(vals + [rep])
        if not rows:
            raise ValueError(f"{path}: empty gradient scheme")
        arr = np.array(rows, dtype=float)
        try:
            return cls(arr[:, :3], arr[:, 3], arr[:, 4].astype(np.int64))
        except ValueError as exc:
            raise ValueError(f"{path}: {exc}") from None


def protocol_scheme(slice_index=3, normalize=True):
    """Reference protocol built from the printed directions and b-values.

    Parameters
    ----------
    slice_index : {1, 2, 3, 4}
        Slices 1-2 repeat every acquisition three times, slice 4 twice and
        slice 3 three times up to b = 996 and twice above.
    normalize : bool
        Rescale the four-decimal directions to exact unit length.
    """
    if slice_index not in (1, 2, 3, 4):
        raise ValueError("slice_index must be 1, 2, 3 or 4")
    dirs = TABLE3_DIRECTIONS.copy()
    if normalize:
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)

    def reps(b):
        if slice_index in (1, 2):
            return 3
        if slice_index == 4:
            return 2
        return 3 if b <= 996 else 2

    u = [[1.0, 0.0, 0.0]]
    bv = [0.0]
    rp = [reps(0.0)]
    for b in TABLE2_BVALUES[1:]:
        u.extend(dirs.tolist())
        bv.extend([b] * len(dirs))
        rp.extend([reps(b)] * len(dirs))
    return GradientScheme(np.array(u), np.array(bv), np.array(rp))


# ---------------------------------------------------------------------------
# bases and design rows


def _monomials(u, index):
    u = np.asarray(u, dtype=float)
    out = np.ones(u.shape[:-1] + (len(index),))
    for k, idx in enumerate(index):
        for i in idx:
            out[..., k] = out[..., k] * u[..., i]
    return out


def real_spherical_harmonic(l, m, u):
    """Real, orthonormal spherical harmonic of even degree ``l``.

    Parameters
    ----------
    l : int
        Even, non-negative degree.
    m : int
        Order in ``[-l, l]``; negative orders carry ``sin(|m| phi)``.
    u : array_like, shape (..., 3)
        Unit vectors.

    Returns
    -------
    ndarray, shape (...)

    Notes
    -----
    No Condon-Shortley phase is applied, so for example
    ``Y_{2,1} = sqrt(15/pi) x z / 2`` and ``Y_{2,-2} = sqrt(15/pi) x y / 2``.
    """
    l = check_int(l, "l", minimum=0)
    m = check_int(m, "m")
    if l % 2:
        raise ValueError("only even degrees are supported")
    if abs(m) > l:
        raise ValueError(f"|m| must not exceed l, got l={l}, m={m}")
    u = np.asarray(u, dtype=float)
    return _real_sh(l, m, u)


def _real_sh(l, m, u):
    x, y, z = u[..., 0], u[..., 1], u[..., 2]
    cos_t = np.clip(z, -1.0, 1.0)
    phi = np.arctan2(y, x)
    am = abs(m)
    norm = np.sqrt((2 * l + 1) / (4 * np.pi) * factorial(l - am) / factorial(l + am))
    # scipy's lpmv includes the (-1)^m phase; remove it
    leg = (-1) ** am * lpmv(am, l, cos_t)
    if m == 0:
        return norm * leg
    if m > 0:
        return np.sqrt(2.0) * norm * leg * np.cos(am * phi)
    return np.sqrt(2.0) * norm * leg * np.sin(am * phi)


def fibonacci_sphere(n, half=False):
    """Quasi-uniform points on the unit sphere (Fibonacci lattice).

    With ``half=True`` only the upper hemisphere ``z >= 0`` is covered, which
    suffices for antipodally symmetric functions.
    """
    n = check_int(n, "n", minimum=1)
    i = np.arange(n) + 0.5
    z = 1.0 - i / n if half else 1.0 - 2.0 * i / n
    r = np.sqrt(np.clip(1.0 - z * z, 0.0, None))
    phi = np.pi * (3.0 - np.sqrt(5.0)) * i
    return np.column_stack([r * np.cos(phi), r * np.sin(phi), z])


def basis_matrix(spec, u):
    """Matrix ``M`` with ``d(u) = M @ coeffs`` for unit directions ``u``.

    Parameters
    ----------
    spec : ModelSpec
    u : array_like, shape (k, 3)

    Returns
    -------
    ndarray, shape (k, spec.d)
    """
    u = np.atleast_2d(np.asarray(u, dtype=float))
    if spec.family == "tensor2":
        return _monomials(u, _T2_INDEX) * _T2_MULT
    if spec.family == "tensor4":
        return _monomials(u, _T4_INDEX) * _T4_MULT
    cols = [_real_sh(l, m, u) for l, m in sh_indices(spec.sh_order)]
    return np.stack(cols, axis=-1)


def build_design_row_2nd(q):
    """Design row ``(1, -qx^2/2, -qy^2/2, -qz^2/2, -qx qy, -qx qz, -qy qz)``.

    The wave vector ``q`` carries the b-value through ``b = |q|^2 / 2``.
    """
    q = as_float_array(q, "q", ndim=1)
    if q.shape != (3,):
        raise ValueError("q must be a 3-vector")
    qx, qy, qz = q
    return np.array([1.0, -qx * qx / 2, -qy * qy / 2, -qz * qz / 2,
                     -qx * qy, -qx * qz, -qy * qz])


def _check_direction(u, b):
    u = as_float_array(u, "u", ndim=1)
    b = float(b)
    if not np.isfinite(b) or b < 0:
        raise ValueError("b must be finite and non-negative")
    if u.shape != (3,):
        raise ValueError("u must be a 3-vector")
    if b > 0 and abs(np.linalg.norm(u) - 1.0) > 1e-6:
        raise ValueError("u must be a unit vector when b > 0")
    return u, b


def build_design_row_4th(u, b):
    """Design row ``(1, -b * w_k * u-monomial_k)`` for the 4th-order tensor."""
    u, b = _check_direction(u, b)
    row = np.empty(16)
    row[0] = 1.0
    row[1:] = -b * basis_matrix(ModelSpec("tensor4"), u)[0]
    return row


def build_design_row_sh(u, b, n):
    """Design row ``(1, -b Y_{l,m}(u), ...)`` over even degrees up to ``2n``."""
    u, b = _check_direction(u, b)
    spec = ModelSpec("sh", check_int(n, "n", minimum=0))
    row = np.empty(1 + spec.d)
    row[0] = 1.0
    row[1:] = -b * basis_matrix(spec, u)[0]
    return row


def design_matrix(spec, scheme):
    """Stacked design rows for every acquisition of ``scheme``.

    Returns
    -------
    ndarray, shape (n_acquisitions, 1 + spec.d)
    """
    u, b = scheme.expand()
    Z = np.empty((len(b), spec.n_params))
    Z[:, 0] = 1.0
    Z[:, 1:] = -b[:, None] * basis_matrix(spec, u)
    Z[b == 0, 1:] = 0.0
    return Z


def diffusivity(spec, coeffs, u):
    """Evaluate ``d(u)`` for coefficient vectors of shape (..., d)."""
    coeffs = np.asarray(coeffs, dtype=float)
    return coeffs @ basis_matrix(spec, u).T


# ---------------------------------------------------------------------------
# homogeneous polynomial representation used for minimization and the bijection


@lru_cache(maxsize=None)
def _exponents(degree):
    exps = []
    for combo in combinations_with_replacement(range(3), degree):
        exps.append(tuple(np.bincount(combo, minlength=3)))
    return np.array(exps, dtype=np.int64)


def _powers(u, degree):
    # P[..., i, k] = u_i ** k for k = 0..degree
    u = np.asarray(u, dtype=float)
    P = np.empty(u.shape + (degree + 1,))
    P[..., 0] = 1.0
    for k in range(1, degree + 1):
        P[..., k] = P[..., k - 1] * u
    return P


def _monomial_values(u, degree):
    e = _exponents(degree)
    P = _powers(u, degree)
    return P[..., 0, e[:, 0]] * P[..., 1, e[:, 1]] * P[..., 2, e[:, 2]]


def _monomial_gradient(u, degree):
    e = _exponents(degree)
    P = _powers(u, degree)
    em = np.maximum(e - 1, 0)
    g0 = e[:, 0] * P[..., 0, em[:, 0]] * P[..., 1, e[:, 1]] * P[..., 2, e[:, 2]]
    g1 = e[:, 1] * P[..., 0, e[:, 0]] * P[..., 1, em[:, 1]] * P[..., 2, e[:, 2]]
    g2 = e[:, 2] * P[..., 0, e[:, 0]] * P[..., 1, e[:, 1]] * P[..., 2, em[:, 2]]
    return np.stack([g0, g1, g2], axis=-1)


@lru_cache(maxsize=None)
def _to_monomial_matrix(family, sh_order):
    """Matrix ``T`` with monomial coefficients ``c = coeffs @ T``.

    Computed by exact interpolation at quasi-uniform points: the space of
    homogeneous polynomials of a given degree restricts injectively to the
    sphere and both sides are polynomials of that degree.
    """
    spec = ModelSpec(family, sh_order)
    deg = spec.degree
    n_mono = len(_exponents(deg))
    pts = fibonacci_sphere(max(8 * n_mono, 64))
    M = _monomial_values(pts, deg)
    # lower SH degrees are implicitly homogenized by |u|^2 = 1 on the sphere
    F = basis_matrix(spec, pts)
    T, *_ = np.linalg.lstsq(M, F, rcond=None)
    T = T.T
    T[np.abs(T) < 1e-14 * np.abs(T).max()] = 0.0
    T.setflags(write=False)
    return T


def tensor_sh_bijection(spec):
    """Matrix ``B`` with tensor coefficients ``D = theta @ B``.

    Parameters
    ----------
    spec : ModelSpec
        ``tensor2`` (SH order 1, six coefficients) or ``tensor4`` (SH order 2).

    Returns
    -------
    ndarray, shape (d, d)
        Row ``j`` holds the tensor coefficients of the ``j``-th real harmonic
        in :func:`sh_indices` order; columns follow the tensor layout.
    """
    if spec.family == "sh":
        raise ValueError("the bijection maps SH coefficients to a tensor family")
    return _bijection(spec.family).copy()


@lru_cache(maxsize=None)
def _bijection(family):
    tspec = ModelSpec(family)
    order = 1 if family == "tensor2" else 2
    sh = ModelSpec("sh", order)
    pts = fibonacci_sphere(400)
    A = basis_matrix(tspec, pts)
    F = basis_matrix(sh, pts)
    B, *_ = np.linalg.lstsq(A, F, rcond=None)
    B = B.T
    B[np.abs(B) < 1e-13] = 0.0
    B.setflags(write=False)
    return B


def to_tensor4(spec, coeffs):
    """Express coefficients of any family of degree <= 4 as a Tensor4."""
    coeffs = np.asarray(coeffs, dtype=float)
    if spec.family == "tensor4":
        return coeffs.copy()
    if spec.family == "tensor2":
        # multiply by |u|^2: D_ijkl is the symmetrization of D_ij delta_kl
        full = tensor2_matrix(coeffs)
        eye = np.eye(3)
        t = np.einsum("...ij,kl->...ijkl", full, eye)
        return tensor4_from_full(_symmetrize4(t))
    if spec.sh_order > 2:
        raise ValueError("SH expansions above order 2 have no Tensor4 form")
    if spec.sh_order == 2:
        return coeffs @ _bijection("tensor4")
    return to_tensor4(ModelSpec("tensor2"), to_tensor2(spec, coeffs))


def to_tensor2(spec, coeffs):
    """Second-order summary of any family.

    Tensor2 is returned unchanged, Tensor4 is projected linearly and SH
    coefficients keep only their degree 0 and 2 harmonics.
    """
    coeffs = np.asarray(coeffs, dtype=float)
    if spec.family == "tensor2":
        return coeffs.copy()
    if spec.family == "tensor4":
        return project_4th_to_2nd(coeffs)
    if spec.sh_order == 0:
        iso = coeffs[..., :1] / (2.0 * np.sqrt(np.pi))
        zero = np.zeros(coeffs.shape[:-1] + (3,))
        return np.concatenate([iso, iso, iso, zero], axis=-1)
    return coeffs[..., :6] @ _bijection("tensor2")


# ---------------------------------------------------------------------------
# tensor algebra


def tensor2_matrix(D):
    """Symmetric 3x3 matrix (or stack) from six Tensor2 coefficients."""
    D = np.asarray(D, dtype=float)
    out = np.empty(D.shape[:-1] + (3, 3))
    for k, (i, j) in enumerate(_T2_INDEX):
        out[..., i, j] = D[..., k]
        out[..., j, i] = D[..., k]
    return out


def tensor2_from_matrix(M):
    M = np.asarray(M, dtype=float)
    return np.stack([M[..., i, j] for i, j in _T2_INDEX], axis=-1)


def _symmetrize4(t):
    import itertools

    perms = list(itertools.permutations(range(4)))
    lead = t.ndim - 4
    acc = np.zeros_like(t)
    for p in perms:
        acc = acc + np.transpose(t, tuple(range(lead)) + tuple(lead + q for q in p))
    return acc / len(perms)


def tensor4_full(D):
    """Totally symmetric 3x3x3x3 array (or stack) from 15 coefficients."""
    import itertools

    D = np.asarray(D, dtype=float)
    out = np.empty(D.shape[:-1] + (3, 3, 3, 3))
    for k, idx in enumerate(_T4_INDEX):
        for p in set(itertools.permutations(idx)):
            out[(Ellipsis,) + p] = D[..., k]
    return out


def tensor4_from_full(T):
    T = np.asarray(T, dtype=float)
    return np.stack([T[(Ellipsis,) + idx] for idx in _T4_INDEX], axis=-1)


_PAIRS = ((0, 0), (1, 1), (2, 2), (0, 1), (0, 2), (1, 2))
_PAIR_W = np.array([1.0, 1.0, 1.0, np.sqrt(2.0), np.sqrt(2.0), np.sqrt(2.0)])


def dhat(D):
    """Symmetric 6x6 matrix of a Tensor4 in the basis ``(11, 22, 33, 12, 13, 23)``.

    Off-diagonal pairs carry a ``sqrt(2)`` weight so that
    ``d(u) = v^T dhat(D) v`` with ``v = (u1^2, u2^2, u3^2, sqrt2 u1u2, sqrt2 u1u3, sqrt2 u2u3)``.
    """
    T = tensor4_full(D)
    out = np.empty(T.shape[:-4] + (6, 6))
    for a, (i, j) in enumerate(_PAIRS):
        for b, (k, l) in enumerate(_PAIRS):
            out[..., a, b] = _PAIR_W[a] * _PAIR_W[b] * T[..., i, j, k, l]
    return out


def rotate_tensor2(D, R):
    """Coefficients of ``R D R^T``, so that ``d'(R u) = d(u)``."""
    M = tensor2_matrix(D)
    return tensor2_from_matrix(R @ M @ R.T)


def rotate_tensor4(D, R):
    """Coefficients of the rotated Tensor4 under the 4-index action of ``R``."""
    T = tensor4_full(D)
    T = np.einsum("ai,bj,ck,dl,...ijkl->...abcd", R, R, R, R, T)
    return tensor4_from_full(T)


def random_rotation(rng):
    """Uniformly distributed rotation matrix (Haar measure on SO(3))."""
    from scipy.spatial.transform import Rotation

    return Rotation.random(random_state=rng).as_matrix()


# ---------------------------------------------------------------------------
# positivity


@dataclass(frozen=True)
class PositivityResult:
    """Outcome of a positivity check.

    Attributes
    ----------
    positive : bool
    min_value : float
        Minimum diffusivity found over the unit sphere (a bound when the
        semidefinite certificate was used).
    certified : str
        ``"eigen"`` (Tensor2 eigenvalues), ``"dhat"`` (positive semidefinite
        6x6 matrix) or ``"sphere"`` (numerical minimization).
    converged : bool
        False when the sphere minimization hit its iteration limit.
    """

    positive: bool
    min_value: float
    certified: str
    converged: bool = True

    @property
    def status(self):
        return "Positive" if self.positive else "Negative"


_START_POINTS = fibonacci_sphere(32, half=True)
_GRID_POINTS = fibonacci_sphere(4000, half=True)


def _monomial_hessian(u, degree):
    e = _exponents(degree)
    P = _powers(u, degree)
    H = np.empty(P.shape[:-2] + (len(e), 3, 3))
    for i in range(3):
        for j in range(i, 3):
            f = e[:, i] * (e[:, j] - (1 if i == j else 0))
            ex = e.copy()
            ex[:, i] -= 1
            ex[:, j] -= 1
            ex = np.maximum(ex, 0)
            val = f * P[..., 0, ex[:, 0]] * P[..., 1, ex[:, 1]] * P[..., 2, ex[:, 2]]
            H[..., i, j] = val
            H[..., j, i] = val
    return H


def _tangent_basis(u):
    # e1, e2 orthonormal and orthogonal to u
    a = np.zeros_like(u)
    k = np.argmin(np.abs(u), axis=-1)
    np.put_along_axis(a, k[..., None], 1.0, axis=-1)
    e1 = np.cross(u, a)
    e1 /= np.linalg.norm(e1, axis=-1, keepdims=True)
    e2 = np.cross(u, e1)
    return e1, e2


def min_diffusivity(spec, coeffs, max_iter=50):
    """Minimum of ``d(u)`` over the unit sphere.

    Thirty-two quasi-random starts plus the best point of a dense grid are
    refined by a regularized Riemannian Newton iteration with backtracking,
    so every accepted step decreases ``d``.

    Parameters
    ----------
    spec : ModelSpec
    coeffs : array_like, shape (..., d)
    max_iter : int
        Iteration cap for each start.

    Returns
    -------
    min_value : ndarray, shape (...)
    argmin : ndarray, shape (..., 3)
    converged : ndarray of bool, shape (...)
        Whether the Riemannian gradient vanished (relative ``1e-8``) at the
        returned point.
    """
    coeffs = np.asarray(coeffs, dtype=float)
    lead = coeffs.shape[:-1]
    c = coeffs.reshape(-1, spec.d) @ _to_monomial_matrix(spec.family, spec.sh_order)
    deg = spec.degree
    nv = c.shape[0]
    if deg == 0:
        val = c[:, 0]
        return (val.reshape(lead), np.tile([0.0, 0.0, 1.0], lead + (1,)),
                np.ones(lead, dtype=bool))

    grid_vals = c @ _monomial_values(_GRID_POINTS, deg).T
    best_grid = np.argmin(grid_vals, axis=1)
    u = np.concatenate(
        [np.broadcast_to(_START_POINTS, (nv,) + _START_POINTS.shape),
         _GRID_POINTS[best_grid][:, None, :]], axis=1).copy()
    cc = c[:, None, :]
    scale = np.maximum(np.abs(c).max(axis=1), 1e-300)[:, None]

    def value(x):
        return np.einsum("...k,...k->...", _monomial_values(x, deg), cc)

    f = value(u)
    done = np.zeros(f.shape, dtype=bool)
    for _ in range(max_iter):
        g = np.einsum("...kj,...k->...j", _monomial_gradient(u, deg), cc)
        H = np.einsum("...kij,...k->...ij", _monomial_hessian(u, deg), cc)
        e1, e2 = _tangent_basis(u)
        gt = np.stack([np.sum(g * e1, -1), np.sum(g * e2, -1)], axis=-1)
        done |= np.linalg.norm(gt, axis=-1) <= 1e-10 * scale
        if np.all(done):
            break
        He1 = np.einsum("...ij,...j->...i", H, e1)
        He2 = np.einsum("...ij,...j->...i", H, e2)
        kf = deg * f
        h11 = np.sum(e1 * He1, -1) - kf
        h12 = np.sum(e1 * He2, -1)
        h22 = np.sum(e2 * He2, -1) - kf
        # shift the 2x2 Riemannian Hessian to be safely positive definite
        half_tr = 0.5 * (h11 + h22)
        rad = np.sqrt(0.25 * (h11 - h22) ** 2 + h12**2)
        lam_min = half_tr - rad
        mu = np.maximum(0.0, -lam_min) + 1e-6 * scale
        a11, a22 = h11 + mu, h22 + mu
        det = a11 * a22 - h12 * h12
        x1 = -(a22 * gt[..., 0] - h12 * gt[..., 1]) / det
        x2 = -(-h12 * gt[..., 0] + a11 * gt[..., 1]) / det
        step = x1[..., None] * e1 + x2[..., None] * e2
        norm = np.linalg.norm(step, axis=-1, keepdims=True)
        step = step * np.minimum(1.0, 0.5 / np.maximum(norm, 1e-300))
        t = np.ones(f.shape)
        accepted = done.copy()
        new_u = u.copy()
        new_f = f.copy()
        for _ in range(20):
            cand = u + t[..., None] * step
            cand /= np.linalg.norm(cand, axis=-1, keepdims=True)
            fc = value(cand)
            ok = ~accepted & (fc <= f)
            new_u[ok] = cand[ok]
            new_f[ok] = fc[ok]
            accepted |= ok
            if np.all(accepted):
                break
            t = np.where(accepted, t, 0.5 * t)
        # no decrease even for tiny steps: stationary up to rounding
        done |= ~accepted | (f - new_f <= 1e-15 * scale)
        u, f = new_u, new_f
    k = np.argmin(f, axis=1)
    rows = np.arange(nv)
    fmin = np.minimum(f[rows, k], grid_vals[rows, best_grid])
    umin = u[rows, k]
    g = np.einsum("nkj,nk->nj", _monomial_gradient(umin, deg), c)
    g_tan = g - np.sum(g * umin, axis=-1, keepdims=True) * umin
    converged = np.linalg.norm(g_tan, axis=-1) <= 1e-8 * scale[:, 0]
    return fmin.reshape(lead), umin.reshape(lead + (3,)), converged.reshape(lead)


def positivity_check(spec, coeffs, tol=None):
    """Decide whether the diffusivity is non-negative on the whole sphere.

    Parameters
    ----------
    spec : ModelSpec
    coeffs : array_like, shape (d,)
    tol : float, optional
        Absolute tolerance; defaults to ``1e-12`` times the largest absolute
        coefficient.

    Returns
    -------
    PositivityResult
    """
    coeffs = as_float_array(coeffs, "coeffs", ndim=1)
    if coeffs.shape[0] != spec.d:
        raise ValueError(f"expected {spec.d} coefficients, got {coeffs.shape[0]}")
    scale = float(np.abs(coeffs).max()) if coeffs.size else 0.0
    if tol is None:
        tol = 1e-12 * scale
    if spec.family == "tensor2":
        lam = np.linalg.eigvalsh(tensor2_matrix(coeffs))
        return PositivityResult(bool(lam[0] >= -tol), float(lam[0]), "eigen")
    if spec.family == "tensor4" or (spec.family == "sh" and spec.sh_order <= 2):
        if spec.family == "sh" and spec.sh_order <= 1:
            D2 = to_tensor2(spec, coeffs)
            lam = np.linalg.eigvalsh(tensor2_matrix(D2))
            return PositivityResult(bool(lam[0] >= -tol), float(lam[0]), "eigen")
        D4 = to_tensor4(spec, coeffs)
        lam = np.linalg.eigvalsh(dhat(D4))
        if lam[0] >= -tol:
            # v^T dhat v >= lam_min |v|^2 and |v| = 1 on the sphere
            return PositivityResult(True, float(lam[0]), "dhat")
    fmin, _, conv = min_diffusivity(spec, coeffs)
    return PositivityResult(bool(fmin >= -tol), float(fmin), "sphere", bool(conv))


def positive_mask(spec, coeffs):
    """Vectorized positivity for a stack of coefficient vectors, shape (n, d)."""
    coeffs = np.atleast_2d(np.asarray(coeffs, dtype=float))
    n = coeffs.shape[0]
    scale = np.abs(coeffs).max(axis=1)
    tol = 1e-12 * scale
    if spec.family == "tensor2" or (spec.family == "sh" and spec.sh_order <= 1):
        D2 = to_tensor2(spec, coeffs)
        lam = np.linalg.eigvalsh(tensor2_matrix(D2))[:, 0]
        return lam >= -tol
    out = np.zeros(n, dtype=bool)
    todo = np.arange(n)
    if spec.family == "tensor4" or spec.sh_order == 2:
        lam = np.linalg.eigvalsh(dhat(to_tensor4(spec, coeffs)))[:, 0]
        out = lam >= -tol
        todo = np.flatnonzero(~out)
    if todo.size:
        # a negative grid value settles the case without refinement
        c = coeffs[todo] @ _to_monomial_matrix(spec.family, spec.sh_order)
        grid_min = (c @ _monomial_values(_GRID_POINTS, spec.degree).T).min(axis=1)
        todo = todo[grid_min >= -tol[todo]]
    if todo.size:
        fmin, _, _ = min_diffusivity(spec, coeffs[todo])
        out[todo] = fmin >= -tol[todo]
    return out


# ---------------------------------------------------------------------------
# scalar maps


def fa_md_2nd(D):
    """Fractional anisotropy and mean diffusivity of Tensor2 coefficients.

    Parameters
    ----------
    D : array_like, shape (..., 6)

    Returns
    -------
    fa, md : ndarray or float
        ``FA = sqrt(3 sum (l_i - MD)^2) / sqrt(2 sum l_i^2)``, zero when all
        eigenvalues vanish.
    """
    D = np.asarray(D, dtype=float)
    lam = np.linalg.eigvalsh(tensor2_matrix(D))
    md = lam.mean(axis=-1)
    num = np.sqrt(3.0 * np.sum((lam - md[..., None]) ** 2, axis=-1))
    den = np.sqrt(2.0 * np.sum(lam * lam, axis=-1))
    with np.errstate(invalid="ignore", divide="ignore"):
        fa = np.where(den > 0, num / np.where(den > 0, den, 1.0), 0.0)
    if fa.ndim == 0:
        return float(fa), float(md)
    return fa, md


def principal_direction(D):
    """Unit eigenvector of the largest eigenvalue for Tensor2 coefficients."""
    w, V = np.linalg.eigh(tensor2_matrix(D))
    return V[..., :, -1]


def project_4th_to_2nd(D):
    """Linear map from Tensor4 to Tensor2 coefficients.

    The result is the Tensor2 whose diffusivity equals the degree 0 and 2
    spherical-harmonic part of the Tensor4 diffusivity.
    """
    D = np.asarray(D, dtype=float)
    (d1111, d2222, d3333, d1122, d1133, d2233, d1123, d1223, d1233,
     d1112, d1113, d1222, d2223, d1333, d2333) = np.moveaxis(D, -1, 0)
    c = 3.0 / 35.0
    e = 6.0 / 7.0
    out = np.stack([
        c * (9 * d1111 + 8 * d1122 + 8 * d1133 - d2222 - d3333 - 2 * d2233),
        c * (9 * d2222 + 8 * d1122 + 8 * d2233 - d1111 - d3333 - 2 * d1133),
        c * (9 * d3333 + 8 * d1133 + 8 * d2233 - d1111 - d2222 - 2 * d1122),
        e * (d1112 + d1222 + d1233),
        e * (d1113 + d1333 + d1223),
        e * (d2223 + d2333 + d1123),
    ], axis=-1)
    return out


def md_4th(D):
    """Mean diffusivity of a Tensor4: ``trace(dhat(D)) / 5``."""
    D = np.asarray(D, dtype=float)
    tr = D[..., 0] + D[..., 1] + D[..., 2] + 2.0 * (D[..., 3] + D[..., 4] + D[..., 5])
    return tr / 5.0
