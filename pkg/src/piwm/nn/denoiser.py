"""Action-conditioned denoiser: a small two-level UNet with FiLM modulation.

The network predicts the clean next frame from a noised frame, the last L
clean frames (channel-concatenated, plus an optional mask channel) and the L
actions. Noise level and actions drive per-block scale/shift modulation. The
output convolution is zero-initialized, so an untrained model returns exactly
c_skip * x_noisy.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .edm import edm_precondition


@dataclass(frozen=True)
class DenoiserConfig:
    history_len: int = 4
    frame_channels: int = 3
    base_width: int = 32
    embed_dim: int = 64
    mask_channels: int = 1        # 0 (no mask conditioning) or 1
    action_vocab: int = 5
    group_size: int = 8           # channels per normalization group
    # current action also enters as one-hot input planes: embedding-only
    # conditioning left small models action-blind
    action_planes: int = 1        # 0 or 1

    def __post_init__(self):
        if self.history_len < 1:
            raise ValueError("history_len must be >= 1")
        if self.mask_channels not in (0, 1):
            raise ValueError("mask_channels must be 0 or 1")
        if self.action_planes not in (0, 1):
            raise ValueError("action_planes must be 0 or 1")
        if self.base_width % self.group_size:
            raise ValueError("base_width must be a multiple of group_size")

    @property
    def in_channels(self) -> int:
        return (self.frame_channels * (self.history_len + 1) + self.mask_channels
                + self.action_planes * self.action_vocab)


class Denoiser:
    """Holds named parameters plus the forward graph builder."""

    def __init__(self, config: DenoiserConfig, seed: int = 0, dtype=np.float32,
                 sigma_data: float = 0.5):
        self.config = config
        self.dtype = np.dtype(dtype)
        self.sigma_data = float(sigma_data)
        self.params: dict[str, ad.Tensor] = {}
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 0xD0])))
        c = config
        w = c.base_width
        self._conv("stem", c.in_channels, w, rng)
        self._block("enc0", w, rng)
        self._conv("down", w, 2 * w, rng)
        self._block("mid0", 2 * w, rng)
        self._block("mid1", 2 * w, rng)
        self._conv("up", 2 * w, w, rng)
        self._block("dec0", w, rng)
        self._norm("out_norm", w)
        self._conv("head", w, c.frame_channels, rng, zero=True)
        self._p("act_table", rng.normal(0.0, 0.02,
                (c.history_len * c.action_vocab, c.embed_dim)))
        self._linear("emb0", c.embed_dim, c.embed_dim, rng)
        self._linear("emb1", c.embed_dim, c.embed_dim, rng)

    # ---- parameter construction -------------------------------------------

    def _p(self, name: str, data: np.ndarray) -> ad.Tensor:
        t = ad.param(np.asarray(data, dtype=self.dtype))
        self.params[name] = t
        return t

    def _conv(self, name: str, cin: int, cout: int, rng, zero: bool = False):
        std = np.sqrt(2.0 / (cin * 9))
        w = np.zeros((cout, cin, 3, 3)) if zero else rng.normal(0.0, std,
                                                                (cout, cin, 3, 3))
        self._p(f"{name}.w", w)
        self._p(f"{name}.b", np.zeros(cout))

    def _linear(self, name: str, fin: int, fout: int, rng, zero: bool = False):
        std = np.sqrt(2.0 / fin)
        w = np.zeros((fin, fout)) if zero else rng.normal(0.0, std, (fin, fout))
        self._p(f"{name}.w", w)
        self._p(f"{name}.b", np.zeros(fout))

    def _norm(self, name: str, ch: int):
        self._p(f"{name}.g", np.ones(ch))
        self._p(f"{name}.b", np.zeros(ch))

    def _block(self, name: str, ch: int, rng):
        self._norm(f"{name}.n1", ch)
        self._conv(f"{name}.c1", ch, ch, rng)
        # FiLM projection starts at zero: blocks begin as plain residuals
        self._linear(f"{name}.film", self.config.embed_dim, 2 * ch, rng, zero=True)
        self._norm(f"{name}.n2", ch)
        self._conv(f"{name}.c2", ch, ch, rng)

    def parameter_count(self) -> int:
        return sum(int(np.prod(t.shape)) for t in self.params.values())

    def astype(self, dtype) -> "Denoiser":
        """Copy with parameters cast to dtype (float64 for gradient checks)."""
        other = Denoiser(self.config, dtype=dtype, sigma_data=self.sigma_data)
        for k, t in self.params.items():
            other.params[k].data = t.data.astype(dtype)
        return other

    # ---- forward -------------------------------------------------------------

    def _groups(self, ch: int) -> int:
        return ch // self.config.group_size

    def _res_block(self, name: str, x: ad.Tensor, emb: ad.Tensor) -> ad.Tensor:
        p = self.params
        ch = x.shape[0]
        h = ad.silu(ad.group_norm(x, p[f"{name}.n1.g"], p[f"{name}.n1.b"],
                                  self._groups(ch)))
        h = ad.conv3x3(h, p[f"{name}.c1.w"], p[f"{name}.c1.b"])
        mod = ad.linear(emb, p[f"{name}.film.w"], p[f"{name}.film.b"])
        sc, sh = ad.split2(mod, axis=1)
        h = ad.film(ad.group_norm(h, p[f"{name}.n2.g"], p[f"{name}.n2.b"],
                                  self._groups(ch)), sc, sh)
        h = ad.silu(h)
        h = ad.conv3x3(h, p[f"{name}.c2.w"], p[f"{name}.c2.b"])
        return ad.add(x, h)

    def forward_batch(self, x_noisy: np.ndarray, sigma: np.ndarray,
                      context: np.ndarray, actions: np.ndarray,
                      mask: np.ndarray | None) -> ad.Tensor:
        """Denoised prediction as a graph tensor in (C, B, H, W) layout.

        x_noisy: (B, C, H, W); sigma: (B,); context: (B, L, C, H, W) clean
        frames oldest-to-newest; actions: (B, L) ints aligned with context;
        mask: (B, H, W) or None, required iff the config has a mask channel.
        """
        cfg = self.config
        p = self.params
        bsz, ch, hh, ww = x_noisy.shape
        if context.shape != (bsz, cfg.history_len, ch, hh, ww):
            raise ValueError(f"context shape {context.shape} incompatible")
        if cfg.mask_channels and mask is None:
            raise ValueError("this model expects a mask channel")
        if not cfg.mask_channels and mask is not None:
            raise ValueError("this model was built without a mask channel")

        c_in, c_skip, c_out, c_noise = edm_precondition(sigma, self.sigma_data)
        dt = self.dtype
        x_cb = np.ascontiguousarray(x_noisy.transpose(1, 0, 2, 3), dtype=dt)
        ctx_cb = np.ascontiguousarray(
            context.transpose(1, 2, 0, 3, 4).reshape(cfg.history_len * ch, bsz, hh, ww),
            dtype=dt)
        parts = [np.asarray(c_in, dt).reshape(1, -1, 1, 1) * x_cb, ctx_cb]
        if cfg.mask_channels:
            parts.append(np.ascontiguousarray(mask[None, :, :, :], dtype=dt))
        if cfg.action_planes:
            planes = np.zeros((cfg.action_vocab, bsz, hh, ww), dtype=dt)
            planes[np.asarray(actions)[:, -1], np.arange(bsz)] = 1.0
            parts.append(planes)
        x_in = ad.const(np.concatenate(parts, axis=0))

        emb_np = ad.sin_embedding(np.asarray(c_noise, np.float64).reshape(-1),
                                  cfg.embed_dim, dtype=dt)
        emb = ad.add(ad.const(emb_np),
                     ad.embed_sum(p["act_table"], actions, cfg.action_vocab))
        emb = ad.linear(emb, p["emb0.w"], p["emb0.b"])
        emb = ad.linear(ad.silu(emb), p["emb1.w"], p["emb1.b"])

        h = ad.conv3x3(x_in, p["stem.w"], p["stem.b"])
        h = self._res_block("enc0", h, emb)
        skip = h
        h = ad.avg_pool2(h)
        h = ad.conv3x3(h, p["down.w"], p["down.b"])
        h = self._res_block("mid0", h, emb)
        h = self._res_block("mid1", h, emb)
        h = ad.conv3x3(h, p["up.w"], p["up.b"])
        h = ad.upsample_nearest2(h)
        h = ad.add(h, skip)
        h = self._res_block("dec0", h, emb)
        h = ad.silu(ad.group_norm(h, p["out_norm.g"], p["out_norm.b"],
                                  self._groups(h.shape[0])))
        f_out = ad.conv3x3(h, p["head.w"], p["head.b"])

        x_noisy_t = ad.const(x_cb)
        pred = ad.add(ad.scale(x_noisy_t, np.asarray(c_skip, dt).reshape(1, -1, 1, 1)),
                      ad.scale(f_out, np.asarray(c_out, dt).reshape(1, -1, 1, 1)))
        return pred



def denoise(model: Denoiser, x_noisy: np.ndarray, sigma: float,
            context: list[np.ndarray] | np.ndarray, actions, mask=None) -> np.ndarray:
    """Single-frame denoising call. Frames are (H, W, C) in [0, 1] units."""
    ctx = np.stack(list(context))                      # (L, H, W, C)
    x = x_noisy.transpose(2, 0, 1)[None]               # (1, C, H, W)
    ctx_b = ctx.transpose(0, 3, 1, 2)[None]            # (1, L, C, H, W)
    act = np.asarray([int(a) for a in actions], dtype=np.int64)[None]
    mask_b = None if mask is None else np.asarray(mask)[None]
    pred = model.forward_batch(x, np.asarray([sigma], np.float64), ctx_b, act, mask_b)
    return np.ascontiguousarray(pred.data[:, 0].transpose(1, 2, 0))
