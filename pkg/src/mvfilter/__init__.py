"""Iterative predictive filtering for multiverses of Bayesian hierarchical GLMs."""

from .config import (
    AxisSpec,
    ConfigError,
    DataSettings,
    FilterSettings,
    RunConfig,
    SamplerSettings,
    load_config,
    parse_config,
    parse_config_delta,
)
from .data import DataError, Dataset, load_dataset
from .multiverse import ModelSpec, Multiverse, MultiverseError, expand, extend, model_id
from .model import Model, ParameterVector, PriorScheme, build_design
from .sampler import (
    Draws,
    UnfittableError,
    estimate_parameterisation,
    refit_with_parameterisation,
    sample,
    sample_model,
)
from .diagnostics import ConvergenceReport, computation_verdict, diagnose, ess_bulk, ess_tail, rhat
from .psis import GpdFit, SmoothedWeights, fit_gpd, khat_threshold, min_sample_size, psis_smooth
from .cv import (
    ElpdComparison,
    ElpdResult,
    PointwiseLogLik,
    brute_force_loo,
    compare,
    extreme_observation_report,
    indistinguishable_set,
    integrated_loglik,
    loglik_matrix,
    psis_loo,
)
from .ppc import EcdfBand, PpcResult, ecdf_band, pit, ppc_verdict, replicate
from .pipeline import FilterReport, FitCache, refilter, run_filter, summarise_qoi

__version__ = "0.1.0"
