"""Bayesian deconvolution and Gaussian-process restoration of fibre-bundle images."""

from .model import (
    CoreMap,
    CouplingKernel,
    CovarianceParams,
    EstimateResult,
    Hyperparams,
    KernelParams,
    NumericalError,
    ParameterError,
    SpatialCovariance,
    add_noise,
    build_coupling_kernel,
    build_covariance,
    covariance_from_matrix,
    forward_apply,
    log_likelihood,
    log_posterior,
)

__version__ = "0.1.0"
