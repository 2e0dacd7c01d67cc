"""Small-time asymptotic expansions for differential equations driven by fBm."""

__version__ = "0.1.0"

from .expansion import ExpansionEstimate, estimate_cdf, estimate_expectation, weight_coefficients
from .fbm import HurstParams, PathEnsemble, SampleBatch, sample_endpoints
from .model import ModelSpec, build_model

__all__ = [
    "ExpansionEstimate", "HurstParams", "ModelSpec", "PathEnsemble", "SampleBatch",
    "build_model", "estimate_cdf", "estimate_expectation", "sample_endpoints",
    "weight_coefficients", "__version__",
]
