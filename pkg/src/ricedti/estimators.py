"""Estimator-style wrappers around the initializer and the sampler."""

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .dataio import Dataset, wls_initialize
from .design import ModelSpec, design_matrix, to_tensor2, fa_md_2nd
from .sampler import ChainConfig, run_chain

__all__ = ["WLSTensorFit", "BayesianTensorFit"]


def _check_dataset(X):
    if not isinstance(X, Dataset):
        raise TypeError(f"expected a Dataset, got {type(X).__name__}")
    return X


class _TensorFitMixin:
    def predict(self, X=None):
        """Noise-free signal ``exp(Z theta)`` of every voxel.

        Parameters
        ----------
        X : Dataset or GradientScheme, optional
            Acquisitions to predict; defaults to those used in ``fit``.
        """
        check_is_fitted(self, "theta_")
        scheme = self.scheme_ if X is None else getattr(X, "scheme", X)
        Z = design_matrix(self.spec_, scheme)
        return np.exp(self.theta_ @ Z.T)

    def transform(self, X=None):
        """Per-voxel ``(FA, MD)`` of the second-order part, shape (n, 2)."""
        check_is_fitted(self, "theta_")
        fa, md = fa_md_2nd(to_tensor2(self.spec_, self.theta_[:, 1:]))
        return np.column_stack([np.atleast_1d(fa), np.atleast_1d(md)])


class WLSTensorFit(_TensorFitMixin, BaseEstimator):
    """Log-normal weighted least squares fit.

    Parameters
    ----------
    model : str
        ``"tensor2"``, ``"tensor4"`` or ``"sh<n>"``.
    b_max : float
        Largest b-value used.

    Attributes
    ----------
    theta_ : ndarray, shape (n, p)
    sigma2_ : ndarray, shape (n,)
    flagged_ : ndarray of bool
        Voxels filled from a neighbour.
    """

    def __init__(self, model="tensor2", b_max=5000.0):
        self.model = model
        self.b_max = b_max

    def fit(self, X, y=None):
        data = _check_dataset(X)
        self.spec_ = ModelSpec.parse(self.model)
        self.scheme_ = data.scheme
        self.theta_, self.sigma2_, self.flagged_ = wls_initialize(data, self.spec_, self.b_max)
        return self


class BayesianTensorFit(_TensorFitMixin, BaseEstimator):
    """Posterior means from the Gibbs-Metropolis sampler.

    Parameters mirror :class:`ricedti.sampler.ChainConfig`, plus ``model``
    and ``b_max`` of the initializer.

    Attributes
    ----------
    result_ : ChainResult
    theta_ : ndarray, shape (n, p)
        Posterior mean.
    sigma2_ : ndarray, shape (n,)
    hyper_ : dict
        Posterior means of the hyperparameters.
    """

    def __init__(self, model="tensor2", cycles=1000, burn_in="auto", thin=10,
                 block_radius=2, seed=0, positivity="counting", rho=0.0,
                 hyper_mode="estimated", hyper=None, scoring="double",
                 theta0_update="joint", inflation=1.0, workers=1, b_max=5000.0):
        self.model = model
        self.cycles = cycles
        self.burn_in = burn_in
        self.thin = thin
        self.block_radius = block_radius
        self.seed = seed
        self.positivity = positivity
        self.rho = rho
        self.hyper_mode = hyper_mode
        self.hyper = hyper
        self.scoring = scoring
        self.theta0_update = theta0_update
        self.inflation = inflation
        self.workers = workers
        self.b_max = b_max

    def _chain_config(self):
        params = self.get_params()
        params.pop("model")
        params.pop("b_max")
        return ChainConfig(**params)

    def fit(self, X, y=None, init=None):
        """Run the chain on dataset ``X``; ``init`` is ``(theta, sigma2)``."""
        data = _check_dataset(X)
        self.spec_ = ModelSpec.parse(self.model)
        self.scheme_ = data.scheme
        self.result_ = run_chain(data, self.spec_, self._chain_config(), init=init,
                                 b_max=self.b_max)
        self.theta_ = self.result_.theta_mean
        self.sigma2_ = self.result_.sigma2_mean
        self.hyper_ = dict(self.result_.hyper_mean)
        return self
