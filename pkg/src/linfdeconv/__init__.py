"""Robust peak-to-peak deconvolution filtering for Ito stochastic systems.

Synthesis and certification of filters that bound the ratio between the
mean-square peak of an estimation error and the mean-square peak of a
bounded disturbance, for linear systems with multiplicative noise and
polytopic parameter uncertainty, plus a sensor-fault reconstruction
pipeline built on the same machinery.
"""

from .model import (
    AugmentedSystem,
    DeconvolutionFilter,
    PolytopicModel,
    StochasticLtiSystem,
    build_augmented,
    combine_vertices,
    esms_lmi_check,
    esms_spectral_oracle,
    lambda_admissible_bound,
)

__version__ = "0.1.0"

__all__ = [
    "AugmentedSystem",
    "DeconvolutionFilter",
    "PolytopicModel",
    "StochasticLtiSystem",
    "build_augmented",
    "combine_vertices",
    "esms_lmi_check",
    "esms_spectral_oracle",
    "lambda_admissible_bound",
    "__version__",
]
