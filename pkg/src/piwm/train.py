"""Training loop: segment sampling, log-normal noise levels, corruption,
denoising, MSE loss, Adam, and an optional EMA shadow.

Determinism contract: every step draws its batch indices, noise levels and
corruption noise from a stream keyed by (seed, step), so resuming from a
checkpoint at step k replays the exact losses of an uninterrupted run.
"""

from __future__ import annotations

import json
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import mask as M
from .collect import Dataset
from .nn import autodiff as ad
from .nn.denoiser import Denoiser, DenoiserConfig
from .nn.edm import EdmParams
from .nn.weights import WEIGHTS_VERSION, WeightsFormatError, save_weights
from .sim import u8_to_frame

CKPT_MAGIC = b"PIWMCK"


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 1000
    batch_size: int = 16
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    ema_decay: float = 0.999
    use_ema: bool = True
    mask_mode: str = "soft"          # soft | hard | none
    edm: EdmParams = field(default_factory=EdmParams)
    seed: int = 0
    ckpt_every: int = 2000
    log_every: int = 50

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.mask_mode not in ("soft", "hard", "none"):
            raise ValueError(f"unknown mask_mode {self.mask_mode!r}")


@dataclass
class TrainBatch:
    contexts: np.ndarray            # (B, L, C, H, W) float32
    actions: np.ndarray             # (B, L) int64
    targets: np.ndarray             # (B, C, H, W) float32
    masks: np.ndarray | None        # (B, H, W) float32
    sigmas: np.ndarray              # (B,) float64


def _window_counts(dataset: Dataset, history_len: int) -> np.ndarray:
    return np.array([max(0, len(ep) - history_len) for ep in dataset.episodes])


def sample_segment(dataset: Dataset, history_len: int, rng: np.random.Generator):
    """Uniform window over all episodes: (context u8 (L,H,W,C), actions (L,), target u8)."""
    counts = _window_counts(dataset, history_len)
    total = int(counts.sum())
    if total == 0:
        raise ValueError(f"no episode is long enough for history_len={history_len}")
    k = int(rng.integers(total))
    cum = np.cumsum(counts)
    ep_idx = int(np.searchsorted(cum, k, side="right"))
    offset = k - (cum[ep_idx - 1] if ep_idx else 0)
    t_end = history_len - 1 + offset
    ep = dataset.episodes[ep_idx]
    ctx = ep.frames[t_end - history_len + 1:t_end + 1]
    acts = ep.actions[t_end - history_len + 1:t_end + 1].astype(np.int64)
    target = ep.frames[t_end + 1]
    return ctx, acts, target


def sample_noise_level(edm: EdmParams, rng: np.random.Generator) -> float:
    """sigma = exp(p_mean + p_std * z); the network's tau input equals sigma."""
    return float(np.exp(edm.p_mean + edm.p_std * rng.standard_normal()))


def make_batch(dataset: Dataset, cfg: TrainConfig, history_len: int,
               mask_params: M.MaskParams | None,
               rng: np.random.Generator) -> TrainBatch:
    ctxs, acts, tgts, masks, sigmas = [], [], [], [], []
    for _ in range(cfg.batch_size):
        ctx_u8, a, tgt_u8 = sample_segment(dataset, history_len, rng)
        ctx = u8_to_frame(ctx_u8)                      # (L, H, W, C)
        ctxs.append(ctx.transpose(0, 3, 1, 2))
        acts.append(a)
        tgts.append(u8_to_frame(tgt_u8).transpose(2, 0, 1))
        sigmas.append(sample_noise_level(cfg.edm, rng))
        if mask_params is not None:
            m, _ = M.conditioning_mask(ctx[-1], mask_params)
            masks.append(m.astype(np.float32))
    return TrainBatch(
        contexts=np.stack(ctxs), actions=np.stack(acts), targets=np.stack(tgts),
        masks=np.stack(masks) if masks else None,
        sigmas=np.asarray(sigmas, dtype=np.float64))


class AdamState:
    def __init__(self, model: Denoiser, cfg: TrainConfig):
        self.cfg = cfg
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in model.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in model.params.items()}

    def update(self, model: Denoiser) -> None:
        cfg = self.cfg
        self.t += 1
        b1t = 1.0 - cfg.beta1 ** self.t
        b2t = 1.0 - cfg.beta2 ** self.t
        for k, p in model.params.items():
            g = p.grad
            if g is None:
                continue
            m = self.m[k]
            v = self.v[k]
            m *= cfg.beta1
            m += (1.0 - cfg.beta1) * g
            v *= cfg.beta2
            v += (1.0 - cfg.beta2) * g * g
            p.data -= (cfg.learning_rate * (m / b1t)
                       / (np.sqrt(v / b2t) + cfg.adam_eps)).astype(p.data.dtype)


def training_step(model: Denoiser, batch: TrainBatch, opt: AdamState,
                  rng: np.random.Generator,
                  ema: dict[str, np.ndarray] | None = None):
    """One optimization step; returns (loss, aux) with the tensors needed to
    recompute the loss independently."""
    noise = rng.standard_normal(batch.targets.shape).astype(np.float32)
    x_tau = batch.targets + batch.sigmas.astype(np.float32)[:, None, None, None] * noise
    pred = model.forward_batch(x_tau, batch.sigmas, batch.contexts, batch.actions,
                               batch.masks)
    target_cb = np.ascontiguousarray(batch.targets.transpose(1, 0, 2, 3))
    loss_t = ad.mse(pred, target_cb)
    loss = float(loss_t.data)
    if not np.isfinite(loss):
        raise FloatingPointError(
            f"non-finite loss at opt step {opt.t + 1} (sigmas={batch.sigmas})")
    for p in model.params.values():
        p.grad = None
    loss_t.backward()
    opt.update(model)
    if ema is not None:
        d = opt.cfg.ema_decay
        for k, p in model.params.items():
            ema[k] *= d
            ema[k] += (1.0 - d) * p.data
    aux = {"pred": pred.data, "target": target_cb, "x_tau": x_tau, "noise": noise}
    return loss, aux


def _step_rng(seed: int, step: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 0xA11, step])))


@dataclass
class TrainResult:
    model_path: Path
    ckpt_path: Path
    metrics_path: Path
    final_loss: float
    losses: list[float]


def save_checkpoint(path: Path, model: Denoiser, opt: AdamState,
                    ema: dict | None, step: int) -> None:
    tensors: dict[str, np.ndarray] = {}
    for k, p in model.params.items():
        tensors[f"param.{k}"] = p.data
        tensors[f"adam_m.{k}"] = opt.m[k]
        tensors[f"adam_v.{k}"] = opt.v[k]
        if ema is not None:
            tensors[f"ema.{k}"] = ema[k]
    cfg = model.config
    parts = [CKPT_MAGIC, struct.pack("<II", WEIGHTS_VERSION, step),
             struct.pack("<IIIIIIBBf", cfg.history_len, cfg.base_width,
                         cfg.embed_dim, cfg.frame_channels, cfg.action_vocab,
                         cfg.group_size, cfg.mask_channels, cfg.action_planes,
                         model.sigma_data),
             struct.pack("<I", len(tensors))]
    for name, data in tensors.items():
        nb = name.encode()
        arr = np.ascontiguousarray(data, dtype="<f4")
        parts.append(struct.pack("<H", len(nb)) + nb + struct.pack("<B", arr.ndim)
                     + struct.pack(f"<{arr.ndim}I", *arr.shape) + arr.tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path: Path):
    raw = Path(path).read_bytes()
    if raw[:6] != CKPT_MAGIC:
        raise WeightsFormatError(f"{path}: bad checkpoint magic")
    version, step = struct.unpack_from("<II", raw, 6)
    off = 14
    hist, width, embed, ch, vocab, gsize, mask_ch, act_pl, sigma_data = \
        struct.unpack_from("<IIIIIIBBf", raw, off)
    off += struct.calcsize("<IIIIIIBBf")
    cfg = DenoiserConfig(history_len=hist, base_width=width, embed_dim=embed,
                         frame_channels=ch, action_vocab=vocab, mask_channels=mask_ch,
                         group_size=gsize, action_planes=act_pl)
    (count,) = struct.unpack_from("<I", raw, off)
    off += 4
    tensors = {}
    for _ in range(count):
        (nl,) = struct.unpack_from("<H", raw, off)
        off += 2
        name = raw[off:off + nl].decode()
        off += nl
        (nd,) = struct.unpack_from("<B", raw, off)
        off += 1
        dims = struct.unpack_from(f"<{nd}I", raw, off)
        off += 4 * nd
        n = int(np.prod(dims)) if nd else 1
        tensors[name] = np.frombuffer(raw, dtype="<f4", count=n,
                                      offset=off).reshape(dims).astype(np.float32)
        off += 4 * n
    return cfg, sigma_data, step, tensors


def train(dataset: Dataset, cfg: TrainConfig, out_path: str | Path,
          dn_config: DenoiserConfig | None = None,
          resume: str | Path | None = None) -> TrainResult:
    """Fixed-step training; writes the model, a resume checkpoint, and JSONL
    metrics {step, loss, ema_loss, wall_ms}."""
    if not dataset.episodes:
        raise ValueError("dataset is empty")
    out_path = Path(out_path)
    ckpt_path = out_path.with_suffix(out_path.suffix + ".ckpt")
    metrics_path = out_path.with_suffix(out_path.suffix + ".metrics.jsonl")

    mask_ch = 0 if cfg.mask_mode == "none" else 1
    if dn_config is None:
        dn_config = DenoiserConfig(mask_channels=mask_ch)
    elif dn_config.mask_channels != mask_ch:
        raise ValueError("dn_config.mask_channels inconsistent with mask_mode")
    mask_params = None if cfg.mask_mode == "none" else M.MaskParams(mode=cfg.mask_mode)

    if resume is not None:
        r_cfg, r_sigma, start_step, tensors = load_checkpoint(resume)
        if r_cfg != dn_config:
            raise WeightsFormatError("checkpoint config does not match request")
        model = Denoiser(r_cfg, seed=cfg.seed, sigma_data=r_sigma)
        opt = AdamState(model, cfg)
        opt.t = start_step
        ema = {} if cfg.use_ema else None
        for k in model.params:
            model.params[k].data = tensors[f"param.{k}"]
            opt.m[k] = tensors[f"adam_m.{k}"]
            opt.v[k] = tensors[f"adam_v.{k}"]
            if cfg.use_ema:
                ema[k] = tensors.get(f"ema.{k}", model.params[k].data.copy())
    else:
        start_step = 0
        model = Denoiser(dn_config, seed=cfg.seed, sigma_data=cfg.edm.sigma_data)
        opt = AdamState(model, cfg)
        ema = {k: p.data.copy() for k, p in model.params.items()} if cfg.use_ema \
            else None

    losses: list[float] = []
    ema_loss = None
    t_start = time.perf_counter()
    with open(metrics_path, "a" if resume else "w") as mf:
        for step in range(start_step, cfg.steps):
            rng = _step_rng(cfg.seed, step)
            batch = make_batch(dataset, cfg, dn_config.history_len, mask_params, rng)
            loss, _ = training_step(model, batch, opt, rng, ema)
            losses.append(loss)
            ema_loss = loss if ema_loss is None else 0.99 * ema_loss + 0.01 * loss
            if (step + 1) % cfg.log_every == 0 or step + 1 == cfg.steps:
                mf.write(json.dumps({
                    "step": step + 1, "loss": loss, "ema_loss": ema_loss,
                    "wall_ms": (time.perf_counter() - t_start) * 1e3}) + "\n")
            if (step + 1) % cfg.ckpt_every == 0:
                save_checkpoint(ckpt_path, model, opt, ema, step + 1)

    save_checkpoint(ckpt_path, model, opt, ema, cfg.steps)
    final = model
    if cfg.use_ema:
        final = Denoiser(dn_config, seed=cfg.seed, sigma_data=model.sigma_data)
        for k in final.params:
            final.params[k].data = ema[k].copy()
    save_weights(final, out_path)
    return TrainResult(model_path=out_path, ckpt_path=ckpt_path,
                       metrics_path=metrics_path,
                       final_loss=losses[-1] if losses else float("nan"),
                       losses=losses)
