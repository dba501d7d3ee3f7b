"""Evaluation suite: text-image consistency, distribution distance, region
preservation, and harmonization.

All image arguments are (H, W, 3) tensors in [-1, 1]; masks are (H, W)
binary arrays. PSNR is reported on the 0..255 convention.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import scipy.linalg
import torch

from .errors import DegenerateEmbeddingError
from .guidance import normalize_embedding

#: documented stand-in for +inf dB when two images are identical
PSNR_SENTINEL_DB = 120.0


def mse(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return float(((a - b) ** 2).mean())


def psnr(a, b, peak: float = 255.0) -> float:
    """Peak signal-to-noise ratio in dB; sentinel value when a == b."""
    err = mse(a, b)
    if err == 0.0:
        return PSNR_SENTINEL_DB
    return float(10.0 * math.log10(peak**2 / err))


def _to_unit255(x) -> np.ndarray:
    arr = x.detach().cpu().numpy() if isinstance(x, torch.Tensor) else np.asarray(x)
    return (arr + 1.0) * 127.5


def clip_score(images: list, prompt: str, text_encoder, image_encoder) -> float:
    """Mean cosine similarity between image embeddings and the prompt's."""
    text = text_encoder.encode(prompt)
    tvec = text.values if text.normalized else normalize_embedding(text.values)
    sims = []
    with torch.no_grad():
        for img in images:
            emb = normalize_embedding(image_encoder.embed(img))
            if emb.shape != tvec.shape:
                raise DegenerateEmbeddingError(
                    f"embedding dims differ: image {tuple(emb.shape)} vs text {tuple(tvec.shape)}"
                )
            sims.append(float(torch.dot(emb, tvec)))
    return float(np.mean(sims))


def _features(images: list, feature_extractor) -> np.ndarray:
    feats = []
    with torch.no_grad():
        for img in images:
            v = feature_extractor(img)
            v = v.detach().cpu().numpy() if isinstance(v, torch.Tensor) else np.asarray(v)
            feats.append(np.asarray(v, dtype=np.float64).ravel())
    return np.stack(feats)


def frechet_distance(mu_a, cov_a, mu_b, cov_b, eps: float = 1e-10) -> Optional[float]:
    """||mu_a-mu_b||^2 + Tr(cov_a + cov_b - 2 (cov_a cov_b)^{1/2}); None if
    the matrix square root is numerically unusable."""
    diff = float(((mu_a - mu_b) ** 2).sum())
    prod, _ = scipy.linalg.sqrtm(cov_a @ cov_b, disp=False)
    if not np.isfinite(prod).all():
        return None
    if np.iscomplexobj(prod):
        if np.abs(prod.imag).max() > 1e-3:
            return None
        prod = prod.real
    val = diff + float(np.trace(cov_a) + np.trace(cov_b) - 2.0 * np.trace(prod))
    return max(val, 0.0) if val > -1e-6 else None


def sfid_detailed(set_a: list, set_b: list, feature_extractor, mode: str = "auto") -> tuple:
    """Simplified Fréchet distance between two image sets' features.

    mode "full" uses full covariances; "diag" the diagonal-covariance
    stabilization; "auto" tries full and falls back to diag when the
    square root is numerically unstable (singular/small-sample cases).
    Returns (value, engaged_mode).
    """
    if not set_a or not set_b:
        raise ValueError("both image sets must be non-empty")
    fa = _features(set_a, feature_extractor)
    fb = _features(set_b, feature_extractor)
    mu_a, mu_b = fa.mean(axis=0), fb.mean(axis=0)

    def diag_value() -> float:
        var_a = fa.var(axis=0)
        var_b = fb.var(axis=0)
        diff = float(((mu_a - mu_b) ** 2).sum())
        trace = float((var_a + var_b - 2.0 * np.sqrt(var_a * var_b)).sum())
        return max(diff + trace, 0.0)

    if mode == "diag":
        return diag_value(), "diag"
    ddof = 0 if min(len(set_a), len(set_b)) < 2 else 1
    cov_a = np.cov(fa, rowvar=False, ddof=ddof)
    cov_b = np.cov(fb, rowvar=False, ddof=ddof)
    cov_a = np.atleast_2d(cov_a)
    cov_b = np.atleast_2d(cov_b)
    val = frechet_distance(mu_a, cov_a, mu_b, cov_b)
    if val is not None:
        return val, "full"
    if mode == "full":
        raise FloatingPointError("full-covariance Fréchet distance is numerically unstable here")
    return diag_value(), "diag"


def sfid(set_a: list, set_b: list, feature_extractor, mode: str = "auto") -> float:
    return sfid_detailed(set_a, set_b, feature_extractor, mode)[0]


def preservation_lpips(x0, x_hat, m, perceptual_metric) -> float:
    """Perceptual distance restricted to outside the mask."""
    if not isinstance(m, torch.Tensor):
        m = torch.as_tensor(np.asarray(m))
    inv = (1.0 - m.to(x0.dtype)).unsqueeze(-1)
    with torch.no_grad():
        return float(perceptual_metric(x0 * inv, x_hat * inv))


class IdentityHarmonizer:
    """Fallback harmonizer: returns the input untouched."""

    name = "identity"

    def harmonize(self, image, mask):
        return image


def ih_score(x_hat, m, harmonizer) -> float:
    """PSNR between the harmonized and raw output, 0..255 scale, in dB."""
    harmonized = harmonizer.harmonize(x_hat, m)
    return psnr(_to_unit255(harmonized), _to_unit255(x_hat))


@dataclass
class MetricReport:
    clip_score: float
    sfid: float
    ih_score: float
    preservation_lpips: float
    per_image: list = field(default_factory=list)
    flags: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "clip_score": self.clip_score,
            "sfid": self.sfid,
            "ih_score": self.ih_score,
            "preservation_lpips": self.preservation_lpips,
            "per_image": self.per_image,
            "flags": self.flags,
        }


def evaluate_edits(
    originals: list,
    edited: list,
    masks: list,
    prompt: str,
    text_encoder,
    image_encoder,
    perceptual_metric: Callable,
    harmonizer=None,
) -> MetricReport:
    """Aggregate report over an edit suite; aggregates are per-image means
    (sfid is set-level by definition)."""
    if not (len(originals) == len(edited) == len(masks)):
        raise ValueError("originals, edited, and masks must have equal length")
    harmonizer = harmonizer or IdentityHarmonizer()
    per_image = []
    text = text_encoder.encode(prompt)
    tvec = text.values if text.normalized else normalize_embedding(text.values)
    with torch.no_grad():
        for x0, xh, m in zip(originals, edited, masks):
            emb = normalize_embedding(image_encoder.embed(xh))
            per_image.append(
                {
                    "clip_score": float(torch.dot(emb, tvec)),
                    "preservation_lpips": preservation_lpips(x0, xh, m, perceptual_metric),
                    "ih_score": ih_score(xh, m, harmonizer),
                }
            )
    value, mode = sfid_detailed(edited, originals, image_encoder.embed)
    flags = {"sfid_mode": mode, "harmonizer": getattr(harmonizer, "name", "external")}
    if mode == "diag":
        flags["sfid_stabilized"] = True
    return MetricReport(
        clip_score=float(np.mean([r["clip_score"] for r in per_image])),
        sfid=value,
        ih_score=float(np.mean([r["ih_score"] for r in per_image])),
        preservation_lpips=float(np.mean([r["preservation_lpips"] for r in per_image])),
        per_image=per_image,
        flags=flags,
    )
