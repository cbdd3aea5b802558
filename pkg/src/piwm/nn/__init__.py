from . import autodiff
from .autodiff import Tensor
from .denoiser import Denoiser, DenoiserConfig, denoise
from .edm import EdmParams, edm_precondition
from .weights import (ConfigMismatchError, WeightsFormatError, load_weights,
                      save_weights)

__all__ = [
    "autodiff", "Tensor", "Denoiser", "DenoiserConfig", "denoise",
    "EdmParams", "edm_precondition", "ConfigMismatchError",
    "WeightsFormatError", "load_weights", "save_weights",
]
