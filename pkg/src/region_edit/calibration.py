"""Cross-modal entity calibration: positioning text -> binary edit mask.

A text-conditioned segmentation decoder reads activations from a frozen
(or jointly trained, at toy scale) patch-token visual backbone and emits
a soft map on a 0..255 scale, binarized at threshold K.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .errors import ShapeMismatchError


@dataclass
class CalibrationConfig:
    """Extraction and projection geometry for the calibration stage.

    Defaults mirror a ViT-B/16 setup; the toy backbone overrides
    patch_size to 4 so a 32x32 image keeps the same token-grid proportion.
    """

    extraction_layers: list = field(default_factory=lambda: [3, 7, 9])
    embed_dim: int = 64
    patch_size: int = 16
    threshold: int = 150

    def __post_init__(self):
        if not 0 <= self.threshold <= 255:
            raise ValueError(f"threshold must be in [0, 255], got {self.threshold}")


def segment(x0: torch.Tensor, t1: str, backbone, decoder, cfg: CalibrationConfig) -> np.ndarray:
    """Soft segmentation map for the entity named by t1, in [0, 255].

    Pipeline: encode t1 to a conditioning vector; run the backbone and
    extract token activations at cfg.extraction_layers; decode with
    per-channel scale-and-shift modulation plus skip additions; project
    the final tokens (class token dropped) to an H x W map; squash
    logits through a logistic and scale to 0..255.
    """
    H, W = int(x0.shape[0]), int(x0.shape[1])
    P = backbone.patch_size
    if H % P or W % P:
        raise ShapeMismatchError(f"image {H}x{W} not divisible by patch size {P}")
    with torch.no_grad():
        cond = decoder.encode_condition(t1)
        acts = backbone.activations(x0, cfg.extraction_layers)
        logits = decoder.decode(acts, cond, (H, W))
        soft = 255.0 * torch.sigmoid(logits)
    return soft.detach().cpu().numpy().astype(np.float64)


def threshold_mask(soft: np.ndarray, K: int) -> np.ndarray:
    """Binary mask: pixel is 1 iff soft >= K (inclusive, so K=0 selects all)."""
    if not 0 <= K <= 255:
        raise ValueError(f"threshold K must be in [0, 255], got {K}")
    return (np.asarray(soft) >= K).astype(np.uint8)
