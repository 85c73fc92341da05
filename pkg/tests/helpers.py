"""Shared oracles for the test suite."""

import numpy as np
from scipy import stats
from scipy.integrate import cumulative_trapezoid


def grid_cdf(grid, logdens):
    """Normalized CDF of an unnormalized log density tabulated on ``grid``."""
    dens = np.exp(logdens - np.max(logdens))
    cdf = cumulative_trapezoid(dens, grid, initial=0.0)
    return cdf / cdf[-1]


def grid_ks(draws, grid, logdens):
    """Kolmogorov-Smirnov statistic of ``draws`` against a grid density."""
    cdf = grid_cdf(grid, logdens)
    return stats.kstest(np.asarray(draws), lambda x: np.interp(x, grid, cdf)).statistic


def binned_tv(draws, grid, logdens, edges):
    """Total variation between the draw histogram and the grid law on ``edges``."""
    cdf = grid_cdf(grid, logdens)
    p = np.diff(np.interp(edges, grid, cdf))
    h = np.histogram(draws, bins=edges)[0] / len(draws)
    return 0.5 * np.sum(np.abs(h - p)) + 0.5 * abs(1.0 - p.sum())


def small_phantom(seed=3, dims=(4, 4, 1), band=(1, 3)):
    """Tiny crossing phantom with the standard 96-acquisition scheme."""
    from ricedti.dataio import phantom_scheme, simulate_phantom, standard_phantom

    spec, truth = standard_phantom(dims=dims, band=band)
    return simulate_phantom(spec, phantom_scheme(), seed), spec, truth


ACCEPTANCE = []


def report(criterion, passed, detail):
    """Record and print one acceptance line."""
    line = f"[{'PASS' if passed else 'FAIL'}] criterion {criterion}: {detail}"
    ACCEPTANCE.append(line)
    print(line)
    return passed
