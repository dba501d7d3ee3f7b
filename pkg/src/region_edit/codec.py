"""Latent-space boundary: autoencoder interface and mask resampling.

Images are (H, W, 3) tensors in [-1, 1]; latents are (h, w, c). The
identity codec reconstructs bit-exactly and is what makes the sampler's
out-of-mask preservation checks exact.
"""

from __future__ import annotations

import numpy as np
import torch

from .errors import ShapeMismatchError


class Codec:
    """encode/decode pair with a declared latent geometry."""

    #: spatial downsampling factor (pixels per latent cell along one axis)
    factor: int = 1
    #: number of latent channels
    latent_channels: int = 3

    def latent_shape_for(self, image_shape: tuple) -> tuple:
        h, w = image_shape[0], image_shape[1]
        if h % self.factor or w % self.factor:
            raise ShapeMismatchError(
                f"image shape {image_shape[:2]} not divisible by codec factor {self.factor}"
            )
        return (h // self.factor, w // self.factor, self.latent_channels)

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        raise NotImplementedError

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        raise NotImplementedError


class IdentityCodec(Codec):
    """Exact passthrough codec; latent space is pixel space."""

    factor = 1
    latent_channels = 3
    name = "identity"

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        return x

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        return torch.clamp(z, -1.0, 1.0)


def mask_to_latent(m, latent_shape: tuple):
    """Area-average a binary pixel mask down to latent resolution, re-binarize at 0.5.

    Requires the pixel resolution to be an integer multiple of the latent
    resolution so the averaging is exact block pooling (identity when the
    factor is 1). Accepts/returns numpy; value 1 iff block mean >= 0.5.
    """
    arr = np.asarray(m, dtype=np.float64)
    if arr.ndim != 2:
        raise ShapeMismatchError(f"mask must be 2-D, got shape {arr.shape}")
    H, W = arr.shape
    h, w = latent_shape[0], latent_shape[1]
    if H % h or W % w:
        raise ShapeMismatchError(f"pixel mask {arr.shape} not an integer multiple of latent {(h, w)}")
    fy, fx = H // h, W // w
    blocks = arr.reshape(h, fy, w, fx).mean(axis=(1, 3))
    return (blocks >= 0.5).astype(np.uint8)
