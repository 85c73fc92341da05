"""Datasets, synthetic phantoms and the log-normal WLS initializer.

On-disk layout of a dataset with stem ``name``::

    name.hdr        key = value text header (documented in save_dataset)
    name.mask       uint8 grid, C order, 1 inside the mask
    name.f32        little-endian float32 magnitudes, voxel-major in mask order
    name.scheme     gradient table ``ux uy uz b repeats``
"""

import os
from dataclasses import dataclass, field

import numpy as np

from .design import (
    GradientScheme,
    ModelSpec,
    TABLE3_DIRECTIONS,
    design_matrix,
    positive_mask,
    principal_direction,
    to_tensor4,
)
from .priors import VoxelGraph

__all__ = [
    "Dataset",
    "PhantomSpec",
    "PhantomTruth",
    "phantom_scheme",
    "simulate_phantom",
    "standard_phantom",
    "wls_initialize",
    "save_dataset",
    "load_dataset",
    "FORMAT_VERSION",
]

FORMAT_VERSION = 1
_T4 = ModelSpec("tensor4")


@dataclass
class Dataset:
    """Magnitude measurements on a masked voxel grid.

    Parameters
    ----------
    dims : tuple of 3 int
    voxel_size : tuple of 3 float
        Millimetres.
    mask : ndarray of bool, shape ``dims``
    scheme : GradientScheme
    Y : ndarray, shape (n_voxels, n_acquisitions)
        Magnitudes of the masked voxels in C order. Values are stored at
        float32 precision so that files round-trip exactly.
    quantized : bool
        Whether the magnitudes were floored to integers.
    """

    dims: tuple
    voxel_size: tuple
    mask: np.ndarray
    scheme: GradientScheme
    Y: np.ndarray
    quantized: bool = False
    _graph: VoxelGraph = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        if len(self.dims) != 3 or min(self.dims) < 1:
            raise ValueError("dims must be three positive integers")
        self.voxel_size = tuple(float(s) for s in self.voxel_size)
        if len(self.voxel_size) != 3 or min(self.voxel_size) <= 0:
            raise ValueError("voxel_size must be three positive reals")
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.mask.shape != self.dims:
            raise ValueError(f"mask shape {self.mask.shape} does not match dims {self.dims}")
        Y = np.asarray(self.Y, dtype=np.float32).astype(np.float64)
        m = self.scheme.n_acquisitions
        if Y.shape != (int(self.mask.sum()), m):
            raise ValueError(
                f"measurements have shape {Y.shape}, expected ({int(self.mask.sum())}, {m})")
        if not np.all(np.isfinite(Y)) or np.any(Y < 0):
            raise ValueError("measurements must be finite and non-negative")
        self.Y = Y

    @property
    def n_voxels(self):
        return self.Y.shape[0]

    @property
    def coords(self):
        return np.argwhere(self.mask)

    @property
    def graph(self):
        if self._graph is None:
            self._graph = VoxelGraph.from_mask(self.mask)
        return self._graph

    def design(self, spec):
        """Design matrix of the scheme for ``spec``."""
        return design_matrix(spec, self.scheme)


@dataclass
class PhantomSpec:
    """Ground truth of a synthetic dataset.

    Parameters
    ----------
    model : ModelSpec
        Family of ``coeffs``.
    coeffs : ndarray, shape ``dims + (d,)``
        True diffusivity coefficients.
    s0 : ndarray, shape ``dims``
        Noise-free signal at ``b = 0``.
    sigma2 : ndarray, shape ``dims``
        Noise variance per voxel (zero gives noiseless data).
    mask : ndarray of bool, optional
        Defaults to the whole grid.
    quantize : bool
        Floor magnitudes to integers.
    voxel_size : tuple of 3 float
    """

    model: ModelSpec
    coeffs: np.ndarray
    s0: np.ndarray
    sigma2: np.ndarray
    mask: np.ndarray = None
    quantize: bool = False
    voxel_size: tuple = (2.0, 2.0, 2.0)

    def __post_init__(self):
        self.coeffs = np.asarray(self.coeffs, dtype=float)
        dims = self.coeffs.shape[:-1]
        if len(dims) != 3 or self.coeffs.shape[-1] != self.model.d:
            raise ValueError(f"coeffs must have shape (nx, ny, nz, {self.model.d})")
        self.s0 = np.broadcast_to(np.asarray(self.s0, dtype=float), dims).copy()
        self.sigma2 = np.broadcast_to(np.asarray(self.sigma2, dtype=float), dims).copy()
        if np.any(self.s0 <= 0):
            raise ValueError("s0 must be positive")
        if np.any(self.sigma2 < 0):
            raise ValueError("sigma2 must be non-negative")
        self.mask = np.ones(dims, dtype=bool) if self.mask is None else np.asarray(self.mask, bool)
        if self.mask.shape != dims:
            raise ValueError("mask shape does not match coeffs")
        ok = positive_mask(self.model, self.coeffs[self.mask])
        if not np.all(ok):
            raise ValueError(f"{int((~ok).sum())} ground-truth tensors are not positive")

    @property
    def dims(self):
        return self.coeffs.shape[:-1]

    def theta(self):
        """True regression vectors ``(log s0, coeffs)`` of the masked voxels."""
        return np.column_stack([np.log(self.s0[self.mask]), self.coeffs[self.mask]])


@dataclass
class PhantomTruth:
    """Labels and directions of the standard phantom.

    Attributes
    ----------
    labels : ndarray of int, shape ``dims``
        0 free water, 1 fibre along x, 2 fibre along y, 3 crossing.
    directions : ndarray, shape ``dims + (3,)``
        Fibre direction (zero outside single-fibre regions).
    """

    labels: np.ndarray
    directions: np.ndarray

    LABEL_NAMES = ("water", "fiber_x", "fiber_y", "crossing")


def phantom_scheme():
    """Thirty-two directions on three shells (500, 1500, 3000 s/mm^2)."""
    dirs = TABLE3_DIRECTIONS / np.linalg.norm(TABLE3_DIRECTIONS, axis=1, keepdims=True)
    u = np.tile(dirs, (3, 1))
    b = np.repeat([500.0, 1500.0, 3000.0], dirs.shape[0])
    return GradientScheme(u, b)


def standard_phantom(sigma=50.0, s0=1000.0, dims=(16, 16, 2), band=(5, 11),
                     lam_par=1.7e-3, lam_perp=0.3e-3, water=3.0e-3, quantize=False):
    """Two straight fibre bundles crossing at right angles.

    Parameters
    ----------
    sigma : float
        Noise standard deviation; SNR is ``s0 / sigma``.
    s0 : float
    dims : tuple of 3 int
    band : (int, int)
        Half-open index range of both bundles: the x-bundle occupies rows
        ``y in band``, the y-bundle columns ``x in band``.
    lam_par, lam_perp : float
        Axial and radial diffusivities of a bundle (mm^2/s).
    water : float
        Isotropic diffusivity outside the bundles.
    quantize : bool

    Returns
    -------
    spec : PhantomSpec
        Tensor4 ground truth; single-fibre voxels hold the Tensor4 form of a
        Tensor2, crossing voxels ``lam_perp + (lam_par - lam_perp)(x^4 + y^4)``.
    truth : PhantomTruth
    """
    nx, ny, nz = dims
    lo, hi = band
    ix, iy = np.meshgrid(np.arange(nx), np.arange(ny), indexing="ij")
    in_x = (iy >= lo) & (iy < hi)
    in_y = (ix >= lo) & (ix < hi)
    lab2 = np.zeros((nx, ny), dtype=np.int64)
    lab2[in_x] = 1
    lab2[in_y] = 2
    lab2[in_x & in_y] = 3
    labels = np.repeat(lab2[:, :, None], nz, axis=2)

    t2 = ModelSpec("tensor2")
    iso = to_tensor4(t2, [water, water, water, 0, 0, 0])
    fx = to_tensor4(t2, [lam_par, lam_perp, lam_perp, 0, 0, 0])
    fy = to_tensor4(t2, [lam_perp, lam_par, lam_perp, 0, 0, 0])
    cross = to_tensor4(t2, [lam_perp] * 3 + [0, 0, 0])
    cross[0] += lam_par - lam_perp
    cross[1] += lam_par - lam_perp
    table = np.stack([iso, fx, fy, cross])
    coeffs = table[labels]
    directions = np.zeros(dims + (3,))
    directions[labels == 1] = (1.0, 0.0, 0.0)
    directions[labels == 2] = (0.0, 1.0, 0.0)
    spec = PhantomSpec(_T4, coeffs, s0, sigma**2, quantize=quantize)
    return spec, PhantomTruth(labels, directions)


def simulate_phantom(spec, scheme, seed):
    """Rician magnitudes under the exact forward model.

    ``Y = |exp(Z theta) + e1 + i e2|`` with independent ``N(0, sigma2)``
    parts, optionally floored to integers.

    Parameters
    ----------
    spec : PhantomSpec
    scheme : GradientScheme
    seed : int

    Returns
    -------
    Dataset
    """
    if not isinstance(scheme, GradientScheme):
        raise TypeError("scheme must be a GradientScheme")
    Z = design_matrix(spec.model, scheme)
    nu = np.exp(spec.theta() @ Z.T)
    sd = np.sqrt(spec.sigma2[spec.mask])[:, None]
    rng = np.random.default_rng(seed)
    e = rng.standard_normal((2,) + nu.shape)
    Y = np.hypot(nu + sd * e[0], sd * e[1])
    if spec.quantize:
        Y = np.floor(Y)
    return Dataset(spec.dims, spec.voxel_size, spec.mask, scheme, Y, bool(spec.quantize))


# ---------------------------------------------------------------------------
# initializer


def _wls_voxel(y, Z, max_iter, tol):
    """Iterated WLS on ``log y``; returns ``(theta, sigma2, ok)``."""
    k, p = Z.shape
    if k <= p or np.linalg.matrix_rank(Z) < p:
        return None, None, False
    ly = np.log(y)
    theta, *_ = np.linalg.lstsq(Z, ly, rcond=None)
    for _ in range(max_iter):
        eta = Z @ theta
        # relative weights exp(2 Z theta) / max, clipped against underflow
        w = np.exp(2.0 * (eta - eta.max()))
        w = np.clip(w, 1e-6, 1e6)
        sw = np.sqrt(w)
        new, *_ = np.linalg.lstsq(Z * sw[:, None], ly * sw, rcond=None)
        step = np.max(np.abs(new - theta))
        theta = new
        if step < tol:
            break
    eta = Z @ theta
    r = ly - eta
    sigma2 = float(np.sum(np.exp(2.0 * eta) * r * r) / (k - p))
    return theta, sigma2, True


def wls_initialize(data, spec, b_max=5000.0, max_iter=50, tol=1e-12):
    """Log-normal weighted least squares starting values.

    ``log Y`` is treated as Gaussian with mean ``Z theta`` and variance
    ``sigma2 exp(-2 Z theta)``; the weights are refreshed from the current
    fit until the estimate stops moving. Zero magnitudes and b-values above
    ``b_max`` are discarded.

    Parameters
    ----------
    data : Dataset
    spec : ModelSpec
    b_max : float
    max_iter : int
    tol : float
        Stop when no coefficient changes by more than ``tol``.

    Returns
    -------
    theta : ndarray, shape (n, p)
    sigma2 : ndarray, shape (n,)
    flagged : ndarray of bool, shape (n,)
        Voxels whose filtered design was rank deficient; they copy the
        nearest successful voxel.
    """
    Z = design_matrix(spec, data.scheme)
    _, b = data.scheme.expand()
    keep_b = b <= b_max
    n, p = data.n_voxels, Z.shape[1]
    theta = np.zeros((n, p))
    sigma2 = np.ones(n)
    ok = np.zeros(n, dtype=bool)
    for v in range(n):
        sel = keep_b & (data.Y[v] > 0)
        t, s2, good = _wls_voxel(data.Y[v, sel], Z[sel], max_iter, tol)
        if good and np.all(np.isfinite(t)) and np.isfinite(s2):
            theta[v] = t
            sigma2[v] = max(s2, np.finfo(float).tiny)
            ok[v] = True
    if not ok.any():
        raise ValueError("no voxel has enough usable measurements for the initializer")
    flagged = ~ok
    if flagged.any():
        coords = data.coords.astype(float)
        good_idx = np.flatnonzero(ok)
        for v in np.flatnonzero(flagged):
            d2 = np.sum((coords[good_idx] - coords[v]) ** 2, axis=1)
            src = good_idx[np.argmin(d2)]
            theta[v] = theta[src]
            sigma2[v] = sigma2[src]
    return theta, sigma2, flagged


def fiber_direction_error(coeffs_t2, truth_dirs):
    """Angle in degrees between principal eigenvectors and true directions."""
    e = principal_direction(coeffs_t2)
    c = np.abs(np.sum(e * truth_dirs, axis=-1))
    return np.degrees(np.arccos(np.clip(c, 0.0, 1.0)))


# ---------------------------------------------------------------------------
# files


def _paths(path):
    stem = os.fspath(path)
    if stem.endswith(".hdr"):
        stem = stem[:-4]
    return stem + ".hdr", stem + ".mask", stem + ".f32", stem + ".scheme"


def save_dataset(data, path):
    """Write ``data`` to ``path.hdr`` and its companion files.

    Header keys: ``format``, ``dims`` (3 ints), ``voxel_size`` (3 floats),
    ``n_voxels``, ``n_acquisitions``, ``quantized`` (0/1) and the companion
    file names ``mask``, ``data``, ``scheme`` relative to the header.
    """
    hdr, mpath, dpath, spath = _paths(path)
    data.scheme.to_file(spath)
    data.mask.astype(np.uint8).tofile(mpath)
    data.Y.astype("<f4").tofile(dpath)
    lines = [
        "# ricedti dataset",
        f"format = {FORMAT_VERSION}",
        "dims = " + " ".join(str(d) for d in data.dims),
        "voxel_size = " + " ".join(repr(s) for s in data.voxel_size),
        f"n_voxels = {data.n_voxels}",
        f"n_acquisitions = {data.scheme.n_acquisitions}",
        f"quantized = {int(data.quantized)}",
        f"mask = {os.path.basename(mpath)}",
        f"data = {os.path.basename(dpath)}",
        f"scheme = {os.path.basename(spath)}",
    ]
    with open(hdr, "w", encoding="ascii") as fh:
        fh.write("\n".join(lines) + "\n")
    return hdr


_HEADER_KEYS = ("format", "dims", "voxel_size", "n_voxels", "n_acquisitions",
                "quantized", "mask", "data", "scheme")


def _read_header(hdr):
    out = {}
    with open(hdr, encoding="ascii") as fh:
        for lineno, line in enumerate(fh, start=1):
            text = line.split("#", 1)[0].strip()
            if not text:
                continue
            if "=" not in text:
                raise ValueError(f"{hdr}:{lineno}: expected 'key = value'")
            key, val = (s.strip() for s in text.split("=", 1))
            if key not in _HEADER_KEYS:
                raise ValueError(f"{hdr}:{lineno}: unknown key '{key}'")
            try:
                if key in ("dims",):
                    val = tuple(int(x) for x in val.split())
                    if len(val) != 3:
                        raise ValueError("need three values")
                elif key == "voxel_size":
                    val = tuple(float(x) for x in val.split())
                    if len(val) != 3:
                        raise ValueError("need three values")
                elif key in ("format", "n_voxels", "n_acquisitions", "quantized"):
                    val = int(val)
            except ValueError as exc:
                raise ValueError(f"{hdr}:{lineno}: bad value for '{key}': {exc}") from None
            out[key] = val
    missing = [k for k in _HEADER_KEYS if k not in out]
    if missing:
        raise ValueError(f"{hdr}: missing keys {', '.join(missing)}")
    if out["format"] != FORMAT_VERSION:
        raise ValueError(f"{hdr}: unsupported format {out['format']}")
    return out


def _read_raw(path, dtype, count):
    expected = count * np.dtype(dtype).itemsize
    size = os.path.getsize(path)
    if size != expected:
        raise ValueError(f"{path}: expected {expected} bytes, found {size} (offset {min(size, expected)})")
    return np.fromfile(path, dtype=dtype, count=count)


def load_dataset(path):
    """Read a dataset written by :func:`save_dataset`.

    Raises
    ------
    ValueError
        On malformed headers (with line numbers) or companion files of the
        wrong size; no partial dataset is returned.
    """
    hdr = _paths(path)[0]
    h = _read_header(hdr)
    base = os.path.dirname(hdr)
    scheme = GradientScheme.from_file(os.path.join(base, h["scheme"]))
    if scheme.n_acquisitions != h["n_acquisitions"]:
        raise ValueError(f"{hdr}: scheme has {scheme.n_acquisitions} acquisitions, "
                         f"header says {h['n_acquisitions']}")
    dims = h["dims"]
    mask = _read_raw(os.path.join(base, h["mask"]), np.uint8, int(np.prod(dims)))
    if np.any(mask > 1):
        raise ValueError(f"{h['mask']}: mask bytes must be 0 or 1")
    mask = mask.reshape(dims).astype(bool)
    n = int(mask.sum())
    if n != h["n_voxels"]:
        raise ValueError(f"{hdr}: mask holds {n} voxels, header says {h['n_voxels']}")
    Y = _read_raw(os.path.join(base, h["data"]), "<f4", n * h["n_acquisitions"])
    Y = Y.reshape(n, h["n_acquisitions"])
    return Dataset(dims, h["voxel_size"], mask, scheme, Y, bool(h["quantized"]))
