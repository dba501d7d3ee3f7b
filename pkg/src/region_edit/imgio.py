"""PNG boundaries: [-1, 1] float tensors inside, 8-bit files outside."""

from __future__ import annotations

import io
from pathlib import Path

import numpy as np
import torch
from PIL import Image


def image_to_uint8(x) -> np.ndarray:
    """[-1, 1] float (H, W, 3) -> uint8 (H, W, 3)."""
    arr = x.detach().cpu().numpy() if isinstance(x, torch.Tensor) else np.asarray(x)
    return np.clip(np.round((arr + 1.0) * 127.5), 0, 255).astype(np.uint8)


def uint8_to_image(arr: np.ndarray) -> torch.Tensor:
    """uint8 (H, W, 3) -> [-1, 1] float32 (H, W, 3)."""
    return torch.from_numpy(arr.astype(np.float32) / 127.5 - 1.0)


def save_image_png(x, path) -> None:
    Image.fromarray(image_to_uint8(x), mode="RGB").save(Path(path), format="PNG")


def image_png_bytes(x) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(image_to_uint8(x), mode="RGB").save(buf, format="PNG")
    return buf.getvalue()


def load_image_png(src) -> torch.Tensor:
    """Load a PNG (path or bytes) as an RGB image tensor in [-1, 1]."""
    img = Image.open(io.BytesIO(src)) if isinstance(src, (bytes, bytearray)) else Image.open(src)
    return uint8_to_image(np.asarray(img.convert("RGB")))


def save_mask_png(m: np.ndarray, path) -> None:
    """Binary {0,1} mask -> single-channel 8-bit PNG with values {0, 255}."""
    Image.fromarray((np.asarray(m) > 0).astype(np.uint8) * 255, mode="L").save(
        Path(path), format="PNG"
    )


def mask_png_bytes(m: np.ndarray) -> bytes:
    buf = io.BytesIO()
    Image.fromarray((np.asarray(m) > 0).astype(np.uint8) * 255, mode="L").save(buf, format="PNG")
    return buf.getvalue()


def load_mask_png(src) -> np.ndarray:
    img = Image.open(io.BytesIO(src)) if isinstance(src, (bytes, bytearray)) else Image.open(src)
    return (np.asarray(img.convert("L")) >= 128).astype(np.uint8)


def soft_png_bytes(soft: np.ndarray) -> bytes:
    """Soft map in [0, 255] -> 8-bit grayscale PNG."""
    buf = io.BytesIO()
    arr = np.clip(np.round(np.asarray(soft)), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="L").save(buf, format="PNG")
    return buf.getvalue()


def save_soft_png(soft: np.ndarray, path) -> None:
    Path(path).write_bytes(soft_png_bytes(soft))
