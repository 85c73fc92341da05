"""Bayesian estimation of diffusion tensor fields from Rician magnitude data."""

from .rice import (
    ReinforcedPoisson,
    RiceParams,
    log_bessel_i0,
    rice_log_density,
    sample_augmented,
    sample_reinforced_poisson,
)
from .design import (
    GradientScheme,
    ModelSpec,
    design_matrix,
    diffusivity,
    fa_md_2nd,
    positivity_check,
    protocol_scheme,
)
from .priors import (
    IsoPrecision2,
    IsoPrecision4,
    PowerSpectrum,
    VoxelGraph,
    field_precision,
    hyper_names,
)
from .glm import LaplaceProposal, fisher_scoring, fisher_scoring_batch
from .sampler import (
    ChainAborted,
    ChainConfig,
    ChainResult,
    read_summary,
    run_chain,
    run_chain_arrays,
    write_summary,
    write_trace,
)
from .dataio import (
    Dataset,
    load_dataset,
    phantom_scheme,
    save_dataset,
    simulate_phantom,
    standard_phantom,
    wls_initialize,
)
from .diagnostics import DicReport, compute_dic, export_maps, export_profiles
from .config import ConfigError, RunConfig
from .estimators import BayesianTensorFit, WLSTensorFit

__version__ = "0.1.0"

__all__ = [
    "ReinforcedPoisson", "RiceParams", "log_bessel_i0", "rice_log_density",
    "sample_augmented", "sample_reinforced_poisson",
    "GradientScheme", "ModelSpec", "design_matrix", "diffusivity", "fa_md_2nd",
    "positivity_check", "protocol_scheme",
    "IsoPrecision2", "IsoPrecision4", "PowerSpectrum", "VoxelGraph", "field_precision",
    "hyper_names",
    "LaplaceProposal", "fisher_scoring", "fisher_scoring_batch",
    "ChainAborted", "ChainConfig", "ChainResult", "read_summary", "run_chain",
    "run_chain_arrays", "write_summary", "write_trace",
    "Dataset", "load_dataset", "phantom_scheme", "save_dataset", "simulate_phantom",
    "standard_phantom", "wls_initialize",
    "DicReport", "compute_dic", "export_maps", "export_profiles",
    "ConfigError", "RunConfig",
    "BayesianTensorFit", "WLSTensorFit",
]
