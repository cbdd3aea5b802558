"""Hard/soft conditioning masks over BEV frames.

A mask field is a plain (h, w) float64 array. Hard masks are binary indicators
of ego (green-dominant) and surrounding (blue-dominant) vehicle pixels; the
soft mask modulates them with a peak-normalized ego-centered 2-D Gaussian and
a global 1-D Gaussian along the longitudinal axis, then clamps to [0, 1].
Static background stays exactly zero.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np


class EgoCentroid(NamedTuple):
    x: float
    y: float
    found: bool


@dataclass(frozen=True)
class MaskParams:
    mode: str = "soft"               # soft | hard | none
    w_ego: float = 0.8
    w_surr: float = 1.0
    sigma_x: float = 6.0             # px
    sigma_y: float = 3.0             # px
    sigma_global: float = 0.25       # fraction of mask width
    green_margin: float = 0.2
    blue_margin: float = 0.2
    target_h: int | None = None      # None: keep source resolution
    target_w: int | None = None

    def __post_init__(self):
        if self.mode not in ("soft", "hard", "none"):
            raise ValueError(f"unknown mask mode {self.mode!r}")
        if self.w_ego <= 0 or self.w_surr <= 0:
            raise ValueError("mask weights must be positive")
        if min(self.sigma_x, self.sigma_y, self.sigma_global) <= 0:
            raise ValueError("sigmas must be positive")


def classify_colors(frame: np.ndarray, params: MaskParams) -> tuple[np.ndarray, np.ndarray]:
    """Per-pixel ego/surrounding indicators from channel dominance.

    ego: G - max(R, B) > green_margin; surr: B - max(R, G) > blue_margin.
    Disjoint by construction for positive margins.
    """
    r, g, b = frame[..., 0], frame[..., 1], frame[..., 2]
    m_ego = (g - np.maximum(r, b)) > params.green_margin
    m_surr = (b - np.maximum(r, g)) > params.blue_margin
    return m_ego.astype(np.float64), m_surr.astype(np.float64)


def hard_mask(m_ego: np.ndarray, m_surr: np.ndarray) -> np.ndarray:
    """Element-wise OR of the two binary indicators."""
    if m_ego.shape != m_surr.shape:
        raise ValueError(f"shape mismatch: {m_ego.shape} vs {m_surr.shape}")
    return np.maximum(m_ego, m_surr)


def ego_centroid(m_ego: np.ndarray) -> EgoCentroid:
    """Arithmetic mean of ego pixel coordinates; found=False on an empty mask."""
    ys, xs = np.nonzero(m_ego)
    if len(xs) == 0:
        return EgoCentroid(0.0, 0.0, False)
    return EgoCentroid(float(xs.mean()), float(ys.mean()), True)


def ego_gaussian(centroid: EgoCentroid, sigma_x: float, sigma_y: float,
                 h: int, w: int) -> np.ndarray:
    """Peak-normalized 2-D Gaussian centered on the ego centroid (max value 1)."""
    if sigma_x <= 0 or sigma_y <= 0:
        raise ValueError("sigma must be positive")
    xs = np.arange(w, dtype=np.float64) - centroid.x
    ys = np.arange(h, dtype=np.float64) - centroid.y
    gx = np.exp(-(xs ** 2) / (2.0 * sigma_x ** 2))
    gy = np.exp(-(ys ** 2) / (2.0 * sigma_y ** 2))
    return gy[:, None] * gx[None, :]


def global_gaussian(x_ego: float, sigma_global: float, h: int, w: int) -> np.ndarray:
    """Peak-normalized 1-D Gaussian in x with std sigma_global * w, broadcast over rows."""
    if sigma_global <= 0:
        raise ValueError("sigma_global must be positive")
    xs = np.arange(w, dtype=np.float64) - x_ego
    gx = np.exp(-(xs ** 2) / (2.0 * (sigma_global * w) ** 2))
    return np.broadcast_to(gx[None, :], (h, w)).copy()


def _soft_mask_raw(frame: np.ndarray, params: MaskParams,
                   prev_centroid: EgoCentroid | None = None) -> tuple[np.ndarray, EgoCentroid]:
    """Unclamped composition; returns the centroid actually used."""
    h, w = frame.shape[:2]
    m_ego, m_surr = classify_colors(frame, params)
    c = ego_centroid(m_ego)
    if not c.found:
        # generated frames can transiently lose the ego; fall back to the last
        # known centroid, else the nominal ego anchor
        if prev_centroid is not None and prev_centroid.found:
            c = EgoCentroid(prev_centroid.x, prev_centroid.y, False)
        else:
            c = EgoCentroid(w / 4, h / 2, False)
    n_ego = ego_gaussian(EgoCentroid(c.x, c.y, True), params.sigma_x, params.sigma_y, h, w)
    n_global = global_gaussian(c.x, params.sigma_global, h, w)
    raw = (params.w_ego * m_ego * n_ego + params.w_surr * m_surr) * n_global
    return raw, c


def soft_mask(frame: np.ndarray, params: MaskParams,
              prev_centroid: EgoCentroid | None = None) -> np.ndarray:
    """Continuous [0,1] mask over dynamic-object pixels; background exactly 0."""
    raw, _ = _soft_mask_raw(frame, params, prev_centroid)
    return np.clip(raw, 0.0, 1.0)


def conditioning_mask(frame: np.ndarray, params: MaskParams,
                      prev_centroid: EgoCentroid | None = None
                      ) -> tuple[np.ndarray | None, EgoCentroid | None]:
    """Mask channel for the denoiser per params.mode, downsampled to target dims.

    Returns (mask, centroid_used); (None, None) when mode is "none".
    """
    if params.mode == "none":
        return None, None
    if params.mode == "hard":
        m_ego, m_surr = classify_colors(frame, params)
        m = hard_mask(m_ego, m_surr)
        c = ego_centroid(m_ego)
    else:
        m, c = _soft_mask_raw(frame, params, prev_centroid)
        m = np.clip(m, 0.0, 1.0)
    th = params.target_h if params.target_h is not None else m.shape[0]
    tw = params.target_w if params.target_w is not None else m.shape[1]
    return downsample_bicubic(m, th, tw), c


def _catmull_rom(s: np.ndarray) -> np.ndarray:
    """Cubic convolution kernel with a = -0.5."""
    a = -0.5
    s = np.abs(s)
    out = np.zeros_like(s)
    near = s <= 1.0
    far = (s > 1.0) & (s < 2.0)
    out[near] = (a + 2.0) * s[near] ** 3 - (a + 3.0) * s[near] ** 2 + 1.0
    out[far] = a * s[far] ** 3 - 5.0 * a * s[far] ** 2 + 8.0 * a * s[far] - 4.0 * a
    return out


def _resample_matrix(src: int, dst: int) -> np.ndarray:
    """(dst, src) bicubic weights, half-pixel centers, edge-clamped taps."""
    scale = src / dst
    centers = (np.arange(dst, dtype=np.float64) + 0.5) * scale - 0.5
    base = np.floor(centers)
    t = centers - base
    mat = np.zeros((dst, src), dtype=np.float64)
    offsets = np.array([-1.0, 0.0, 1.0, 2.0])
    weights = _catmull_rom(t[:, None] - offsets[None, :])
    for k in range(4):
        idx = np.clip(base + offsets[k], 0, src - 1).astype(np.int64)
        np.add.at(mat, (np.arange(dst), idx), weights[:, k])
    return mat


def downsample_bicubic(mask: np.ndarray, target_h: int, target_w: int) -> np.ndarray:
    """Separable Catmull-Rom downsampling, clamped to [0, 1].

    Identity (up to clamping) when the target matches the source dims.
    """
    if target_h < 1 or target_w < 1:
        raise ValueError("target dims must be >= 1")
    h, w = mask.shape
    if target_h > h or target_w > w:
        raise ValueError("only downsampling (target <= source) is supported")
    rows = _resample_matrix(h, target_h)
    cols = _resample_matrix(w, target_w)
    out = rows @ mask.astype(np.float64) @ cols.T
    return np.clip(out, 0.0, 1.0)
