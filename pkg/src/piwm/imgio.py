"""PNG encode/decode helpers shared by the CLI and the session server."""

from __future__ import annotations

import base64
import io
from pathlib import Path

import numpy as np
from PIL import Image

from .sim import frame_to_u8, u8_to_frame


def frame_to_png_bytes(frame: np.ndarray) -> bytes:
    """Lossless RGB PNG of a [0,1] float frame (u8-quantized, round half up)."""
    return u8_to_png_bytes(frame_to_u8(frame))


def u8_to_png_bytes(u8: np.ndarray) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(u8, mode="RGB").save(buf, format="PNG")
    return buf.getvalue()


def png_bytes_to_u8(data: bytes) -> np.ndarray:
    return np.asarray(Image.open(io.BytesIO(data)).convert("RGB"))


def png_bytes_to_frame(data: bytes) -> np.ndarray:
    return u8_to_frame(png_bytes_to_u8(data))


def frame_to_png_b64(frame: np.ndarray) -> str:
    return base64.b64encode(frame_to_png_bytes(frame)).decode("ascii")


def save_frame_png(frame: np.ndarray, path: str | Path) -> None:
    Path(path).write_bytes(frame_to_png_bytes(frame))


def load_frame_png(path: str | Path) -> np.ndarray:
    return png_bytes_to_frame(Path(path).read_bytes())


def save_gray_png(values: np.ndarray, path: str | Path) -> None:
    """8-bit grayscale PNG of a [0,1] field (value*255, rounded half up)."""
    u8 = np.clip(np.floor(values * 255.0 + 0.5), 0, 255).astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(u8, mode="L").save(buf, format="PNG")
    Path(path).write_bytes(buf.getvalue())
