"""Binary weights container (magic ``PIWMWT``), little-endian throughout.

Layout: magic | u32 version | config block | u32 tensor_count |
per tensor { u16 name_len | name utf8 | u8 ndim | u32 dims... | f32 data }.
Config block: u32 history_len | u32 base_width | u32 embed_dim |
u32 frame_channels | u32 action_vocab | u32 group_size | u8 mask_channels |
u8 action_planes | f32 sigma_data.
Tensor order is the model's parameter creation order, so save -> load -> save
round-trips to identical bytes.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .denoiser import Denoiser, DenoiserConfig

WEIGHTS_MAGIC = b"PIWMWT"
WEIGHTS_VERSION = 1
_CFG_FMT = "<IIIIIIBBf"


class WeightsFormatError(Exception):
    """Bad magic, version, truncation, or tensor mismatch."""


class ConfigMismatchError(WeightsFormatError):
    """Stored config incompatible with what the caller expects."""


def save_weights(model: Denoiser, path: str | Path) -> None:
    cfg = model.config
    parts = [WEIGHTS_MAGIC, struct.pack("<I", WEIGHTS_VERSION),
             struct.pack(_CFG_FMT, cfg.history_len, cfg.base_width, cfg.embed_dim,
                         cfg.frame_channels, cfg.action_vocab, cfg.group_size,
                         cfg.mask_channels, cfg.action_planes, model.sigma_data),
             struct.pack("<I", len(model.params))]
    for name, tensor in model.params.items():
        nb = name.encode()
        data = np.ascontiguousarray(tensor.data, dtype="<f4")
        parts.append(struct.pack("<H", len(nb)))
        parts.append(nb)
        parts.append(struct.pack("<B", data.ndim))
        parts.append(struct.pack(f"<{data.ndim}I", *data.shape))
        parts.append(data.tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_weights(path: str | Path,
                 expected_config: DenoiserConfig | None = None) -> Denoiser:
    raw = Path(path).read_bytes()
    if raw[:6] != WEIGHTS_MAGIC:
        raise WeightsFormatError(f"{path}: bad magic {raw[:6]!r}")
    try:
        (version,) = struct.unpack_from("<I", raw, 6)
        if version != WEIGHTS_VERSION:
            raise WeightsFormatError(f"{path}: unsupported version {version}")
        off = 10
        hist, width, embed, ch, vocab, gsize, mask_ch, act_pl, sigma_data = \
            struct.unpack_from(_CFG_FMT, raw, off)
        off += struct.calcsize(_CFG_FMT)
        cfg = DenoiserConfig(history_len=hist, base_width=width, embed_dim=embed,
                             frame_channels=ch, action_vocab=vocab,
                             mask_channels=mask_ch, group_size=gsize,
                             action_planes=act_pl)
        if expected_config is not None and cfg != expected_config:
            raise ConfigMismatchError(
                f"{path}: stored config {cfg} != expected {expected_config}")
        model = Denoiser(cfg, sigma_data=sigma_data)
        (count,) = struct.unpack_from("<I", raw, off)
        off += 4
        if count != len(model.params):
            raise WeightsFormatError(
                f"{path}: {count} tensors stored, model has {len(model.params)}")
        for _ in range(count):
            (name_len,) = struct.unpack_from("<H", raw, off)
            off += 2
            name = raw[off:off + name_len].decode()
            off += name_len
            (ndim,) = struct.unpack_from("<B", raw, off)
            off += 1
            dims = struct.unpack_from(f"<{ndim}I", raw, off)
            off += 4 * ndim
            n = int(np.prod(dims)) if ndim else 1
            if name not in model.params:
                raise WeightsFormatError(f"{path}: unknown tensor {name!r}")
            if tuple(dims) != model.params[name].shape:
                raise WeightsFormatError(
                    f"{path}: tensor {name!r} has dims {dims}, "
                    f"expected {model.params[name].shape}")
            end = off + 4 * n
            if end > len(raw):
                raise WeightsFormatError(f"{path}: truncated tensor data")
            model.params[name].data = np.frombuffer(
                raw, dtype="<f4", count=n, offset=off).reshape(dims).astype(np.float32)
            off += 4 * n
    except struct.error as exc:
        raise WeightsFormatError(f"{path}: truncated file") from exc
    return model
