"""Noise-level preconditioning for the denoiser.

The network never sees raw noise levels: inputs, skip path, output and the
noise embedding are rescaled by closed-form coefficients of sigma so that
training targets stay unit-scale across the whole noise range.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class EdmParams:
    sigma_data: float = 0.5
    p_mean: float = -0.4
    p_std: float = 1.2

    def __post_init__(self):
        if self.sigma_data <= 0:
            raise ValueError("sigma_data must be positive")
        if self.p_std <= 0:
            raise ValueError("p_std must be positive")


def edm_precondition(sigma, sigma_data: float):
    """(c_in, c_skip, c_out, c_noise) for scalar or array sigma > 0."""
    sigma = np.asarray(sigma, dtype=np.float64)
    if np.any(sigma <= 0):
        raise ValueError("sigma must be positive")
    s2 = sigma ** 2 + sigma_data ** 2
    c_in = 1.0 / np.sqrt(s2)
    c_skip = sigma_data ** 2 / s2
    c_out = sigma * sigma_data / np.sqrt(s2)
    c_noise = np.log(sigma) / 4.0
    return c_in, c_skip, c_out, c_noise
