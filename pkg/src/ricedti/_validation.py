"""Small input checks shared across modules."""

import numbers

import numpy as np


def as_float_array(x, name, *, ndim=None, finite=True):
    """Return ``x`` as a float64 array, checking dimension and finiteness."""
    arr = np.asarray(x, dtype=float)
    if ndim is not None and arr.ndim != ndim:
        raise ValueError(f"{name} must be {ndim}-dimensional, got shape {arr.shape}")
    if finite and not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} must be finite")
    return arr


def check_positive(x, name, *, allow_zero=False):
    """Check that every entry of ``x`` is positive (or non-negative)."""
    arr = as_float_array(x, name)
    bad = arr < 0 if allow_zero else arr <= 0
    if np.any(bad):
        kind = "non-negative" if allow_zero else "positive"
        raise ValueError(f"{name} must be {kind}")
    return arr


def check_int(x, name, *, minimum=None):
    """Check that ``x`` is an integer, optionally bounded below."""
    if isinstance(x, bool) or not isinstance(x, numbers.Integral):
        raise TypeError(f"{name} must be an integer, got {type(x).__name__}")
    if minimum is not None and x < minimum:
        raise ValueError(f"{name} must be >= {minimum}, got {x}")
    return int(x)


def check_choice(x, name, choices):
    if x not in choices:
        raise ValueError(f"{name} must be one of {sorted(choices)}, got {x!r}")
    return x


def check_unit_vectors(u, name="directions", tol=1e-6):
    """Return an (k, 3) array of unit vectors; rejects zero rows."""
    u = as_float_array(u, name)
    if u.ndim == 1:
        u = u[None, :]
    if u.ndim != 2 or u.shape[1] != 3:
        raise ValueError(f"{name} must have shape (k, 3), got {u.shape}")
    norms = np.linalg.norm(u, axis=1)
    if np.any(np.abs(norms - 1.0) > tol):
        raise ValueError(f"{name} must have unit norm (tolerance {tol})")
    return u / norms[:, None]
