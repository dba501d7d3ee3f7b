"""Steering math for guided sampling.

Classifier-free guidance combination, the region-masked text-image loss,
the non-editing-region-preserving loss, and the gradient shift of the
reverse-posterior mean. All losses follow the convention smaller = better
edit, so the mean is shifted in the descent direction.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import torch

from .errors import DegenerateEmbeddingError, GuidanceDivergenceError, ShapeMismatchError

_NORM_TOL = 1e-6


@dataclass
class GuidanceParams:
    """Sampling-time steering knobs.

    cfg_scale multiplies the conditional/unconditional noise gap;
    grad_scale multiplies the variance-weighted loss gradient. They are
    distinct scales with distinct defaults even though both steer.
    """

    cfg_scale: float = 5.0
    grad_scale: float = 150.0
    lambda1: float = 0.5
    lambda2: float = 0.5

    def __post_init__(self):
        for name in ("cfg_scale", "grad_scale", "lambda1", "lambda2"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0, got {getattr(self, name)}")

    def to_json(self) -> dict:
        return {
            "cfg_scale": self.cfg_scale,
            "grad_scale": self.grad_scale,
            "lambda1": self.lambda1,
            "lambda2": self.lambda2,
        }

    @classmethod
    def from_json(cls, rec: dict) -> "GuidanceParams":
        return cls(
            cfg_scale=float(rec.get("cfg_scale", 5.0)),
            grad_scale=float(rec.get("grad_scale", 150.0)),
            lambda1=float(rec.get("lambda1", 0.5)),
            lambda2=float(rec.get("lambda2", 0.5)),
        )


@dataclass
class EmbeddingVector:
    """A 1-D embedding; ``normalized`` asserts unit Euclidean norm."""

    values: torch.Tensor
    normalized: bool = False

    def __post_init__(self):
        if self.values.dim() != 1:
            raise ValueError(f"embedding must be 1-D, got shape {tuple(self.values.shape)}")
        if self.normalized:
            norm = float(torch.linalg.vector_norm(self.values))
            if abs(norm - 1.0) > _NORM_TOL:
                raise DegenerateEmbeddingError(f"normalized flag set but norm = {norm}")

    @property
    def dim(self) -> int:
        return self.values.shape[0]

    @classmethod
    def unit(cls, values: torch.Tensor) -> "EmbeddingVector":
        """Normalize to unit norm; zero-norm input is degenerate."""
        return cls(values=normalize_embedding(values), normalized=True)


def normalize_embedding(values: torch.Tensor) -> torch.Tensor:
    norm = torch.linalg.vector_norm(values)
    if float(norm.detach()) < _NORM_TOL:
        raise DegenerateEmbeddingError("cannot normalize a zero-norm embedding")
    return values / norm


@dataclass
class GuidanceEncoders:
    """The two pixel-space callables the losses need.

    image_encoder maps an (H, W, 3) image to a raw embedding vector;
    perceptual maps an image pair to a scalar distance.
    """

    image_encoder: Callable[[torch.Tensor], torch.Tensor]
    perceptual: Callable[[torch.Tensor, torch.Tensor], torch.Tensor]


def _check_shapes(a, b) -> None:
    if tuple(a.shape) != tuple(b.shape):
        raise ShapeMismatchError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def _mask_like(m, ref: torch.Tensor) -> torch.Tensor:
    """Mask as a tensor broadcastable over ref's trailing channel dim."""
    if not isinstance(m, torch.Tensor):
        m = torch.as_tensor(m)
    m = m.to(dtype=ref.dtype, device=ref.device)
    if m.dim() == ref.dim() - 1:
        m = m.unsqueeze(-1)
    return m


def combine_cfg(eps_uncond: torch.Tensor, eps_cond: torch.Tensor, cfg_scale: float) -> torch.Tensor:
    """eps_uncond + s*(eps_cond - eps_uncond); equals (1-s)*eps_uncond + s*eps_cond.

    The degenerate scales return their operand exactly (no rounding)."""
    _check_shapes(eps_uncond, eps_cond)
    if cfg_scale == 0.0:
        return eps_uncond
    if cfg_scale == 1.0:
        return eps_cond
    return eps_uncond + cfg_scale * (eps_cond - eps_uncond)


def clip_guidance(
    x_hat: torch.Tensor,
    t2_embedding: EmbeddingVector,
    m,
    image_encoder: Callable[[torch.Tensor], torch.Tensor],
) -> torch.Tensor:
    """1 - cosine(image embedding of the masked image, text embedding).

    The raw image embedding is normalized here, so the loss is invariant
    to positive rescaling of the encoder output and bounded in [0, 2].
    """
    mask = _mask_like(m, x_hat)
    emb = image_encoder(x_hat * mask)
    emb = normalize_embedding(emb)
    text = t2_embedding.values if t2_embedding.normalized else normalize_embedding(t2_embedding.values)
    return 1.0 - torch.dot(emb, text.to(emb.dtype))


def mse(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Mean squared pixelwise difference."""
    _check_shapes(a, b)
    return ((a - b) ** 2).mean()


def nerp_loss(
    x0: torch.Tensor,
    x_hat: torch.Tensor,
    m,
    lambda1: float,
    lambda2: float,
    perceptual_metric: Callable[[torch.Tensor, torch.Tensor], torch.Tensor],
) -> torch.Tensor:
    """Distance between the two images outside the mask.

    Both arguments are masked by (1 - m) before either distance, so edits
    inside the mask cannot move this loss.
    """
    _check_shapes(x0, x_hat)
    inv = 1.0 - _mask_like(m, x_hat)
    a = x0 * inv
    b = x_hat * inv
    return lambda1 * perceptual_metric(a, b) + lambda2 * mse(a, b)


def total_objective(
    x0: torch.Tensor,
    x_hat: torch.Tensor,
    t2_embedding: EmbeddingVector,
    m,
    params: GuidanceParams,
    encoders: GuidanceEncoders,
) -> torch.Tensor:
    """Region text loss plus out-of-region preservation loss; smaller = better."""
    return clip_guidance(x_hat, t2_embedding, m, encoders.image_encoder) + nerp_loss(
        x0, x_hat, m, params.lambda1, params.lambda2, encoders.perceptual
    )


def shift_mean(
    mu: torch.Tensor, variance: torch.Tensor, grad: torch.Tensor, grad_scale: float
) -> torch.Tensor:
    """Shift the reverse mean in the loss-descent direction.

    variance is the per-step posterior variance (std squared) broadcast to
    the latent shape; returns mu - grad_scale * variance * grad.
    """
    _check_shapes(mu, grad)
    if not torch.isfinite(grad).all():
        raise GuidanceDivergenceError("non-finite loss gradient")
    return mu - grad_scale * variance * grad
