"""Autoregressive rollout engine: noise schedule, warm-start initialization,
Euler denoising steps, and the sliding context window.

Warm start perturbs the previous clean frame with one Gaussian offset per
channel (rank-1 covariance across all pixels of that channel, no cross-channel
correlation) plus element-wise Gaussian noise, instead of drawing the canvas
from pure noise. It needs no retraining and only changes the canvas
initialization and where the schedule is entered.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import mask as M
from .nn.denoiser import Denoiser, denoise


@dataclass(frozen=True)
class SamplerConfig:
    n_steps: int = 3
    sigma_min: float = 0.002
    sigma_max: float = 20.0
    rho: float = 7.0
    warm_start: bool = False
    sigma_off: float = 0.1
    sigma_ew: float = 0.5
    ws_entry: str = "matched_sigma"   # matched_sigma | full_schedule

    def __post_init__(self):
        if not 0 < self.sigma_min < self.sigma_max:
            raise ValueError("need 0 < sigma_min < sigma_max")
        if self.n_steps < 1:
            raise ValueError("n_steps must be >= 1")
        if self.ws_entry not in ("matched_sigma", "full_schedule"):
            raise ValueError(f"unknown ws_entry {self.ws_entry!r}")


def karras_schedule(cfg: SamplerConfig) -> np.ndarray:
    """Strictly decreasing noise levels [sigma_0 ... sigma_{N-1}, 0]."""
    n = cfg.n_steps
    if n == 1:
        return np.array([cfg.sigma_max, 0.0])
    inv_rho = 1.0 / cfg.rho
    hi = cfg.sigma_max ** inv_rho
    lo = cfg.sigma_min ** inv_rho
    ks = np.arange(n, dtype=np.float64)
    sigmas = (hi + ks / (n - 1) * (lo - hi)) ** cfg.rho
    return np.append(sigmas, 0.0)


def warm_start_init(x_prev_clean: np.ndarray, cfg: SamplerConfig,
                    rng: np.random.Generator) -> np.ndarray:
    """Perturb the previous clean frame: per-channel global offset plus
    element-wise noise. Exact sampler of N(x_prev, sigma_off^2*blkdiag(11^T)
    + sigma_ew^2*I); no clamping."""
    channels = x_prev_clean.shape[-1]
    delta = rng.normal(0.0, cfg.sigma_off, channels)
    eps = rng.normal(0.0, cfg.sigma_ew, x_prev_clean.shape)
    return x_prev_clean + delta.reshape((1,) * (x_prev_clean.ndim - 1) + (channels,)) \
        + eps


@dataclass
class RolloutState:
    """Sliding window of L clean context frames plus the warm-start source."""

    context: list[np.ndarray]          # L frames (H, W, C), clean, newest last
    past_actions: list[int]            # L-1 actions; past_actions[j] acted on context[j]
    seed: int
    i: int = 0
    last_clean: np.ndarray | None = None
    prev_centroid: M.EgoCentroid | None = None

    def __post_init__(self):
        if len(self.past_actions) != len(self.context) - 1:
            raise ValueError("need exactly len(context)-1 past actions")
        self.context = [np.asarray(f, dtype=np.float32) for f in self.context]

    def rng_for_step(self, i: int) -> np.random.Generator:
        return np.random.Generator(
            np.random.PCG64(np.random.SeedSequence([self.seed & 0x7FFFFFFF, 0x50, i])))

    def advance(self, frame: np.ndarray, action: int) -> None:
        self.context = self.context[1:] + [frame]
        self.past_actions = self.past_actions[1:] + [int(action)]
        self.last_clean = frame
        self.i += 1


def _predictor(model):
    """Accept a Denoiser or a raw callable (x, sigma, context, actions, mask)."""
    if isinstance(model, Denoiser):
        return lambda x, s, ctx, acts, m: denoise(model, x, s, ctx, acts, m)
    if callable(model):
        return model
    raise TypeError(f"not a model or predictor callable: {type(model)}")


def denoise_next_frame(state: RolloutState, action: int, model,
                       mask_params: M.MaskParams | None,
                       cfg: SamplerConfig) -> tuple[np.ndarray, M.EgoCentroid | None]:
    """Generate the next frame; the context is conditioning only and is never
    written by the sampler. Returns (frame clamped to [0,1], centroid used)."""
    if not state.context:
        raise ValueError("empty context")
    predict = _predictor(model)
    newest = state.context[-1]
    mask, centroid = (None, None)
    if mask_params is not None and mask_params.mode != "none":
        mask, centroid = M.conditioning_mask(newest, mask_params, state.prev_centroid)
        mask = mask.astype(np.float32)

    sched = karras_schedule(cfg)
    n = cfg.n_steps
    rng = state.rng_for_step(state.i)
    if state.i > 0 and cfg.warm_start:
        x = warm_start_init(state.last_clean if state.last_clean is not None
                            else newest, cfg, rng).astype(np.float32)
        k0 = 0
        if cfg.ws_entry == "matched_sigma":
            s_ws = math.sqrt(cfg.sigma_off ** 2 + cfg.sigma_ew ** 2)
            below = np.nonzero(sched[:n] <= s_ws)[0]
            k0 = int(below[0]) if len(below) else n - 1
    else:
        x = (sched[0] * rng.standard_normal(newest.shape)).astype(np.float32)
        k0 = 0

    actions_vec = list(state.past_actions) + [int(action)]
    for k in range(k0, n):
        s_k, s_k1 = float(sched[k]), float(sched[k + 1])
        x0_hat = predict(x, s_k, state.context, actions_vec, mask)
        x = x + (s_k1 - s_k) * (x - x0_hat) / s_k
    return np.clip(x, 0.0, 1.0).astype(np.float32), centroid


def step_rollout(state: RolloutState, action: int, model,
                 mask_params: M.MaskParams | None, cfg: SamplerConfig) -> np.ndarray:
    """denoise_next_frame plus ring-buffer advance."""
    frame, centroid = denoise_next_frame(state, action, model, mask_params, cfg)
    if centroid is not None:
        state.prev_centroid = centroid
    state.advance(frame, action)
    return frame


def rollout(init_context, init_actions, actions, model, cfg: SamplerConfig,
            mask_params: M.MaskParams | None = None, seed: int = 0
            ) -> list[np.ndarray]:
    """Autoregressive generation of len(actions) frames from a teacher-started
    context of L frames and the L-1 actions taken between them."""
    state = RolloutState(context=list(init_context),
                         past_actions=[int(a) for a in init_actions], seed=seed)
    frames = []
    for a in actions:
        frames.append(step_rollout(state, int(a), model, mask_params, cfg))
    return frames
