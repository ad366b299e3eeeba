"""Differentiable EM for Gaussian mixtures and MW2 gradient flows."""
from diffem.errors import (ArgumentError, DegenerateCovariance, MalformedImage, NotConverged,
                           SingularSystem)
from diffem.gmm import EmConfig, GmmParams, em_fit, em_trajectory, kmeanspp_init, sample_gmm
from diffem.kernels import BACKEND_NAME

__version__ = "0.1.0"

__all__ = [
    "ArgumentError", "DegenerateCovariance", "MalformedImage", "NotConverged", "SingularSystem",
    "EmConfig", "GmmParams", "em_fit", "em_trajectory", "kmeanspp_init", "sample_gmm",
    "BACKEND_NAME", "__version__",
]
