"""Model comparison, scalar maps and diffusivity profiles."""

import os
from dataclasses import dataclass, field

import numpy as np

from .design import (
    ModelSpec,
    diffusivity,
    fa_md_2nd,
    principal_direction,
    to_tensor2,
)
from .rice import rice_log_density

__all__ = [
    "DicReport",
    "dic_from_deviance",
    "compute_dic",
    "rice_deviance",
    "scalar_map",
    "MAP_KINDS",
    "export_maps",
    "load_map_table",
    "read_pgm",
    "icosphere",
    "mesh_neighbors",
    "export_profiles",
    "profile_values",
    "profile_maxima",
    "principal_rgb",
    "acceptance_histogram",
    "max_axis_separation",
    "read_profiles",
    "summary_maps",
]

MAP_KINDS = ("FA", "MD", "acceptance", "sigma2")


@dataclass
class DicReport:
    """Deviance information criterion.

    Attributes
    ----------
    dic : float
        ``2 * mean_deviance - deviance_at_mean``.
    n_eff : float
        ``mean_deviance - deviance_at_mean``, so ``dic = mean_deviance + n_eff``.
    mean_deviance : float
    deviance_at_mean : float
    scope : str
        ``"field"`` or ``"voxel"``.
    n_samples : int
    n_excluded : int
        Zero magnitudes left out of the deviance (their Rice density is 0).
    per_voxel : dict of ndarray
        ``dic``, ``n_eff``, ``mean_deviance`` and ``deviance_at_mean`` per voxel.
    """

    dic: float
    n_eff: float
    mean_deviance: float
    deviance_at_mean: float
    scope: str = "field"
    n_samples: int = 0
    n_excluded: int = 0
    per_voxel: dict = field(default_factory=dict, repr=False)

    def format(self):
        """Plain-text report."""
        lines = [
            f"scope            {self.scope}",
            f"samples          {self.n_samples}",
            f"mean deviance    {self.mean_deviance!r}",
            f"deviance at mean {self.deviance_at_mean!r}",
            f"n_eff            {self.n_eff!r}",
            f"DIC              {self.dic!r}",
        ]
        if self.n_excluded:
            lines.append(f"excluded zeros   {self.n_excluded}")
        return "\n".join(lines) + "\n"


def dic_from_deviance(deviances, deviance_at_mean, scope="field"):
    """DIC from deviance draws and the deviance at the posterior mean.

    Parameters
    ----------
    deviances : array_like, shape (S,)
    deviance_at_mean : float
    """
    dev = np.asarray(deviances, dtype=float).reshape(-1)
    if dev.size < 2:
        raise ValueError("DIC needs at least 2 posterior samples")
    mean = float(dev.mean())
    at = float(deviance_at_mean)
    return DicReport(2.0 * mean - at, mean - at, mean, at, scope, dev.size)


def rice_deviance(theta, sigma2, Y, Z):
    """Per-voxel deviance ``-2 sum log p(Y | theta, sigma2)`` over ``Y > 0``.

    Parameters
    ----------
    theta : ndarray, shape (..., n, p)
    sigma2 : ndarray, shape (..., n)
    Y : ndarray, shape (n, m)
    Z : ndarray, shape (m, p)

    Returns
    -------
    ndarray, shape (..., n)
    """
    theta = np.asarray(theta, dtype=float)
    sigma2 = np.asarray(sigma2, dtype=float)
    pos = Y > 0
    nu = np.exp(theta @ Z.T)
    y = np.where(pos, Y, 1.0)
    ld = rice_log_density(y, nu, sigma2[..., None])
    return -2.0 * np.sum(np.where(pos, ld, 0.0), axis=-1)


def compute_dic(samples_theta, samples_sigma2, Y, Z):
    """Field and per-voxel DIC under the exact Rice likelihood.

    The plug-in point is the posterior mean of ``(theta, sigma2)``.

    Parameters
    ----------
    samples_theta : ndarray, shape (S, n, p)
    samples_sigma2 : ndarray, shape (S, n)
    Y : ndarray, shape (n, m)
    Z : ndarray, shape (m, p)

    Returns
    -------
    DicReport
        Field-level values; ``per_voxel`` holds the voxel-level ones.
    """
    st = np.asarray(samples_theta, dtype=float)
    ss = np.asarray(samples_sigma2, dtype=float)
    if st.ndim != 3 or st.shape[0] < 2:
        raise ValueError("DIC needs at least 2 posterior samples")
    Y = np.asarray(Y, dtype=float)
    dev = np.stack([rice_deviance(st[s], ss[s], Y, Z) for s in range(st.shape[0])])
    at = rice_deviance(st.mean(axis=0), ss.mean(axis=0), Y, Z)
    rep = dic_from_deviance(dev.sum(axis=1), at.sum())
    mean_v = dev.mean(axis=0)
    rep.per_voxel = {
        "dic": 2.0 * mean_v - at,
        "n_eff": mean_v - at,
        "mean_deviance": mean_v,
        "deviance_at_mean": at,
    }
    rep.n_excluded = int(np.sum(Y <= 0))
    return rep


def acceptance_histogram(acceptance, bins=10):
    """Counts of voxels per acceptance-rate bin on ``[0, 1]``."""
    counts, edges = np.histogram(np.asarray(acceptance, dtype=float), bins=bins, range=(0.0, 1.0))
    return edges, counts


# ---------------------------------------------------------------------------
# maps


def scalar_map(kind, spec, theta_mean, sigma2=None, acceptance=None):
    """Per-voxel scalar values of one map kind.

    ``FA`` and ``MD`` use the second-order part of the diffusivity for
    Tensor4 and SH fits.
    """
    if kind not in MAP_KINDS:
        raise ValueError(f"kind must be one of {MAP_KINDS}")
    if kind in ("FA", "MD"):
        fa, md = fa_md_2nd(to_tensor2(spec, np.asarray(theta_mean)[:, 1:]))
        return np.atleast_1d(fa if kind == "FA" else md)
    if kind == "sigma2":
        return np.asarray(sigma2, dtype=float)
    return np.asarray(acceptance, dtype=float)


def _write_pgm(path, img16):
    h, w = img16.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n65535\n".encode("ascii"))
        fh.write(img16.astype(">u2").tobytes())


def read_pgm(path):
    """Read a binary 16-bit graymap written by :func:`export_maps`."""
    with open(path, "rb") as fh:
        raw = fh.read()
    parts = raw.split(b"\n", 3)
    if len(parts) < 4 or parts[0] != b"P5":
        raise ValueError(f"{path}: not a binary graymap")
    w, h = (int(x) for x in parts[1].split())
    if int(parts[2]) != 65535:
        raise ValueError(f"{path}: expected 16-bit data")
    data = np.frombuffer(parts[3], dtype=">u2")
    if data.size != w * h:
        raise ValueError(f"{path}: truncated image")
    return data.reshape(h, w).astype(np.uint16)


def export_maps(values, coords, grid_shape, kind, prefix):
    """Write a scalar map as one 16-bit graymap per slice plus a table.

    Parameters
    ----------
    values : ndarray, shape (n,)
    coords : ndarray of int, shape (n, 3)
    grid_shape : tuple of 3 int
    kind : str
        Used in the file names.
    prefix : str
        Output path prefix; files are ``{prefix}_{kind}_z{k:03d}.pgm`` and
        ``{prefix}_{kind}.tsv``.

    Returns
    -------
    list of str
        Written paths, table last.

    Notes
    -----
    Image rows index ``y`` and columns ``x``. Values map linearly from
    ``[min, max]`` to ``[0, 65535]`` (a constant map is all zeros); voxels
    outside the mask are 0. The table records ``min`` and ``max`` in its
    header and the exact values per voxel.
    """
    values = np.asarray(values, dtype=float)
    coords = np.asarray(coords, dtype=np.int64)
    if values.shape[0] != coords.shape[0]:
        raise ValueError("values and coords differ in length")
    lo, hi = float(values.min()), float(values.max())
    span = hi - lo
    scaled = np.zeros(values.shape) if span == 0 else (values - lo) / span
    q = np.round(scaled * 65535).astype(np.uint16)
    nx, ny, nz = grid_shape
    paths = []
    for k in range(nz):
        img = np.zeros((ny, nx), dtype=np.uint16)
        sel = coords[:, 2] == k
        img[coords[sel, 1], coords[sel, 0]] = q[sel]
        p = f"{prefix}_{kind}_z{k:03d}.pgm"
        _write_pgm(p, img)
        paths.append(p)
    table = f"{prefix}_{kind}.tsv"
    with open(table, "w", encoding="ascii") as fh:
        fh.write(f"# kind = {kind}\n# min = {lo!r}\n# max = {hi!r}\n")
        fh.write("x\ty\tz\tvalue\n")
        for (x, y, z), v in zip(coords, values):
            fh.write(f"{x}\t{y}\t{z}\t{float(v)!r}\n")
    paths.append(table)
    return paths


def load_map_table(path):
    """Read a map table; returns ``(coords, values, meta)``."""
    meta, rows = {}, []
    with open(path, encoding="ascii") as fh:
        for lineno, line in enumerate(fh, start=1):
            text = line.strip()
            if not text:
                continue
            if text.startswith("#"):
                k, _, v = text[1:].partition("=")
                meta[k.strip()] = v.strip()
                continue
            if text.startswith("x"):
                continue
            parts = text.split("\t")
            if len(parts) != 4:
                raise ValueError(f"{path}:{lineno}: expected 4 columns")
            rows.append(parts)
    arr = np.array(rows, dtype=object).reshape(-1, 4)
    coords = arr[:, :3].astype(np.int64)
    values = np.array([float(v) for v in arr[:, 3]])
    return coords, values, meta


# ---------------------------------------------------------------------------
# profiles


def icosphere(subdivisions=3):
    """Vertices and faces of a subdivided icosahedron on the unit sphere.

    ``subdivisions = k`` gives ``10 * 4**k + 2`` vertices.
    """
    t = (1.0 + np.sqrt(5.0)) / 2.0
    verts = [(-1, t, 0), (1, t, 0), (-1, -t, 0), (1, -t, 0),
             (0, -1, t), (0, 1, t), (0, -1, -t), (0, 1, -t),
             (t, 0, -1), (t, 0, 1), (-t, 0, -1), (-t, 0, 1)]
    faces = [(0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
             (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
             (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
             (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1)]
    verts = [np.array(v, dtype=float) / np.linalg.norm(v) for v in verts]
    for _ in range(subdivisions):
        cache = {}

        def mid(a, b):
            key = (min(a, b), max(a, b))
            if key not in cache:
                m = verts[a] + verts[b]
                verts.append(m / np.linalg.norm(m))
                cache[key] = len(verts) - 1
            return cache[key]

        new = []
        for a, b, c in faces:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            new += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = new
    return np.array(verts), np.array(faces, dtype=np.int64)


def mesh_neighbors(faces, n_vertices):
    """Adjacency lists of a triangle mesh."""
    nb = [set() for _ in range(n_vertices)]
    for a, b, c in faces:
        nb[a].update((b, c))
        nb[b].update((a, c))
        nb[c].update((a, b))
    return [np.array(sorted(s), dtype=np.int64) for s in nb]


def profile_values(spec, coeffs, vertices):
    """Diffusivity of every voxel at every mesh vertex, shape (n, V)."""
    return diffusivity(spec, np.atleast_2d(coeffs), vertices)


def profile_maxima(values, vertices, neighbors):
    """Directions of the local maxima of one profile.

    A vertex is a local maximum when its value is strictly larger than at
    every mesh neighbour. Antipodal pairs are merged, so each returned unit
    vector stands for an axis.

    Returns
    -------
    ndarray, shape (k, 3)
        Maxima sorted by decreasing value.
    """
    values = np.asarray(values, dtype=float)
    idx = [v for v in range(len(values)) if np.all(values[v] > values[neighbors[v]])]
    idx.sort(key=lambda v: -values[v])
    axes = []
    for v in idx:
        u = vertices[v]
        if all(abs(u @ a) < 1.0 - 1e-9 for a in axes):
            axes.append(u)
    return np.array(axes).reshape(-1, 3)


def max_axis_separation(axes):
    """Largest angle in degrees between two axes (0 with fewer than two)."""
    best = 0.0
    for i in range(len(axes)):
        for j in range(i + 1, len(axes)):
            c = min(abs(float(axes[i] @ axes[j])), 1.0)
            best = max(best, float(np.degrees(np.arccos(c))))
    return best


def principal_rgb(spec, coeffs):
    """Colour code of the principal direction, ``255 * |e1|`` as integers."""
    e = principal_direction(to_tensor2(spec, np.atleast_2d(coeffs)))
    return np.round(255.0 * np.abs(e)).astype(np.int64)


def export_profiles(spec, coeffs, coords, prefix, subdivisions=3):
    """Write diffusivity profiles sampled on an icosphere.

    Files: ``{prefix}_mesh.tsv`` holds the vertex list ``x y z`` (then the
    faces as ``f a b c``), and ``{prefix}_profiles.tsv`` holds one row per
    voxel: grid coordinates, the RGB code of the principal direction and the
    diffusivity at every vertex in mesh order.

    Returns
    -------
    mesh_path, profile_path : str
    """
    vertices, faces = icosphere(subdivisions)
    vals = profile_values(spec, coeffs, vertices)
    rgb = principal_rgb(spec, coeffs)
    mesh_path = f"{prefix}_mesh.tsv"
    with open(mesh_path, "w", encoding="ascii") as fh:
        fh.write(f"# icosphere subdivisions = {subdivisions}\n")
        for x, y, z in vertices:
            fh.write(f"v\t{float(x)!r}\t{float(y)!r}\t{float(z)!r}\n")
        for a, b, c in faces:
            fh.write(f"f\t{a}\t{b}\t{c}\n")
    prof_path = f"{prefix}_profiles.tsv"
    with open(prof_path, "w", encoding="ascii") as fh:
        fh.write(f"# model = {spec}\n# columns = x y z r g b d_0..d_{len(vertices) - 1}\n")
        for c, col, row in zip(np.asarray(coords), rgb, vals):
            fh.write("\t".join([str(int(v)) for v in c] + [str(int(v)) for v in col]
                               + [repr(float(v)) for v in row]) + "\n")
    return mesh_path, prof_path


def read_profiles(prefix):
    """Read files written by :func:`export_profiles`.

    Returns
    -------
    vertices, faces, coords, rgb, values
    """
    verts, faces = [], []
    with open(f"{prefix}_mesh.tsv", encoding="ascii") as fh:
        for line in fh:
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            if parts[0] == "v":
                verts.append([float(x) for x in parts[1:]])
            elif parts[0] == "f":
                faces.append([int(x) for x in parts[1:]])
    rows = []
    with open(f"{prefix}_profiles.tsv", encoding="ascii") as fh:
        for line in fh:
            if line.startswith("#") or not line.strip():
                continue
            rows.append(line.rstrip("\n").split("\t"))
    coords = np.array([[int(x) for x in r[:3]] for r in rows], dtype=np.int64).reshape(-1, 3)
    rgb = np.array([[int(x) for x in r[3:6]] for r in rows], dtype=np.int64).reshape(-1, 3)
    vals = np.array([[float(x) for x in r[6:]] for r in rows])
    return np.array(verts), np.array(faces, dtype=np.int64), coords, rgb, vals


def _ensure_dir(prefix):
    d = os.path.dirname(os.fspath(prefix))
    if d:
        os.makedirs(d, exist_ok=True)


def summary_maps(summary, prefix, kinds=MAP_KINDS):
    """Export every map kind of a posterior summary; returns written paths."""
    _ensure_dir(prefix)
    spec = summary.spec if summary.spec is not None else ModelSpec("tensor2")
    out = []
    for kind in kinds:
        vals = scalar_map(kind, spec, summary.theta_mean, summary.sigma2_mean,
                          summary.acceptance)
        out += export_maps(vals, summary.coords, summary.grid_shape, kind, prefix)
    return out
