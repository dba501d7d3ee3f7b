"""Guided reverse diffusion with per-step masked blending.

One edit run: segment the region from the positioning text, then walk the
reverse process from pure noise; at every step the latent is steered by
classifier-free guidance plus the gradient of the region losses, and the
out-of-mask cells are replaced with the forward-noised input chain so the
background is pinned to the input.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import torch

from .codec import mask_to_latent
from .errors import BundleGeometryError, GuidanceDivergenceError, ShapeMismatchError
from .guidance import GuidanceParams, clip_guidance, combine_cfg, nerp_loss, shift_mean
from .schedule import forward_noise, posterior_stats, stride_schedule
from .toyzoo.bundle import ModelBundle, resolve_codec
from .toyzoo.data import child_seed

#: threshold override that forces an empty mask (soft maps top out at 255)
FORCE_EMPTY_THRESHOLD = 256


@dataclass
class EditParams:
    """All sampling knobs; the seed fixes every random draw in the run."""

    steps: int = 100
    guidance: GuidanceParams = field(default_factory=GuidanceParams)
    threshold: int = 150
    seed: int = 0
    codec: str = "toy"
    record_trajectory: bool = True
    # ablation switches: per-step latent blending and the preservation loss
    use_blend: bool = True
    use_nerp: bool = True

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError(f"steps must be >= 1, got {self.steps}")
        if not 0 <= self.threshold <= FORCE_EMPTY_THRESHOLD:
            raise ValueError(
                f"threshold must be in [0, {FORCE_EMPTY_THRESHOLD}], got {self.threshold}"
            )

    def to_json(self) -> dict:
        return {
            "steps": self.steps,
            "guidance": self.guidance.to_json(),
            "threshold": self.threshold,
            "seed": self.seed,
            "codec": self.codec,
            "record_trajectory": self.record_trajectory,
            "use_blend": self.use_blend,
            "use_nerp": self.use_nerp,
        }

    @classmethod
    def from_json(cls, rec: dict) -> "EditParams":
        return cls(
            steps=int(rec.get("steps", 100)),
            guidance=GuidanceParams.from_json(rec.get("guidance", {})),
            threshold=int(rec.get("threshold", 150)),
            seed=int(rec.get("seed", 0)),
            codec=str(rec.get("codec", "toy")),
            record_trajectory=bool(rec.get("record_trajectory", True)),
            use_blend=bool(rec.get("use_blend", True)),
            use_nerp=bool(rec.get("use_nerp", True)),
        )


@dataclass
class EditResult:
    image: torch.Tensor  # (H, W, 3) in [-1, 1]
    mask: np.ndarray  # (H, W) uint8 {0, 1}
    soft_mask: np.ndarray  # (H, W) float in [0, 255]
    trace: list  # per step: {"t", "clip_loss", "nerp_loss", "latent_norm"}
    duration_s: float
    params: EditParams
    no_op_mask: bool
    latents: Optional[list] = None  # z-hat after each step, oldest first

    def trace_jsonl(self) -> str:
        import json

        return "\n".join(json.dumps(row) for row in self.trace) + ("\n" if self.trace else "")


def _require_finite(x: torch.Tensor, what: str, step: int) -> None:
    if not torch.isfinite(x).all():
        raise GuidanceDivergenceError(f"non-finite {what} at step {step}", step=step)


def _sampling_schedule(models: ModelBundle, steps: int):
    train = models.train_schedule()
    return stride_schedule(train, steps)


def _check_image(x0: torch.Tensor, models: ModelBundle) -> None:
    size = models.image_size
    if tuple(x0.shape) != (size, size, 3):
        raise ShapeMismatchError(
            f"input image shape {tuple(x0.shape)} does not match the bundle's {size}x{size}x3"
        )


def run_edit(
    x0: torch.Tensor,
    t1: str,
    t2: str,
    params: EditParams,
    models: ModelBundle,
    progress_cb: Optional[Callable[[int, float, float], None]] = None,
) -> EditResult:
    """Full text-driven regional edit of x0: locate via t1, synthesize t2."""
    start = time.perf_counter()
    _check_image(x0, models)
    codec = resolve_codec(params.codec, models)
    latent_shape = codec.latent_shape_for(tuple(x0.shape))
    if tuple(models.denoiser.latent_shape) != tuple(latent_shape):
        raise BundleGeometryError(
            f"denoiser latent {models.denoiser.latent_shape} incompatible with "
            f"codec {params.codec!r} latent {latent_shape}"
        )

    soft = models.segmenter.soft_mask(x0, t1)
    m = (soft >= params.threshold).astype(np.uint8)
    no_op = int(m.sum()) == 0
    m_latent = mask_to_latent(m, latent_shape)

    sched = _sampling_schedule(models, params.steps)
    with torch.no_grad():
        z0 = codec.encode(x0).detach()
    t2_emb = models.text_encoder.encode(t2)
    encoders = models.guidance_encoders()
    g = params.guidance

    blend_mask = torch.from_numpy(m_latent.astype(np.float32)).unsqueeze(-1)
    g_init = torch.Generator().manual_seed(child_seed(params.seed, "init"))
    g_post = torch.Generator().manual_seed(child_seed(params.seed, "posterior"))
    g_chain = torch.Generator().manual_seed(child_seed(params.seed, "chain"))

    z_hat = torch.randn(latent_shape, generator=g_init)
    trace: list = []
    latents: list = []

    for t in range(params.steps, 0, -1):
        _require_finite(z_hat, "latent", t)
        with torch.no_grad():
            eps_u, eps_c = models.denoiser.predict_pair(z_hat, sched.model_timestep(t), t2)
            eps_hat = combine_cfg(eps_u, eps_c, g.cfg_scale)
            mu, sigma = posterior_stats(z_hat, eps_hat, t, sched)
        sigma_scalar = float(sigma.flatten()[0])

        need_grad = g.grad_scale > 0
        clip_val = float("nan")
        nerp_val = float("nan")
        if need_grad:
            mu_leaf = mu.detach().requires_grad_(True)
            x_dec = codec.decode(mu_leaf)
            loss_clip = clip_guidance(x_dec, t2_emb, m, encoders.image_encoder)
            if params.use_nerp:
                loss_nerp = nerp_loss(x0, x_dec, m, g.lambda1, g.lambda2, encoders.perceptual)
            else:
                loss_nerp = x_dec.new_zeros(())
            total = loss_clip + loss_nerp
            (grad,) = torch.autograd.grad(total, mu_leaf)
            try:
                mu = shift_mean(mu, sigma**2, grad, g.grad_scale)
            except GuidanceDivergenceError as err:
                raise GuidanceDivergenceError(str(err), step=t) from None
            clip_val, nerp_val = float(loss_clip), float(loss_nerp)
        elif params.record_trajectory:
            with torch.no_grad():
                x_dec = codec.decode(mu)
                clip_val = float(clip_guidance(x_dec, t2_emb, m, encoders.image_encoder))
                if params.use_nerp:
                    nerp_val = float(
                        nerp_loss(x0, x_dec, m, g.lambda1, g.lambda2, encoders.perceptual)
                    )
                else:
                    nerp_val = 0.0

        with torch.no_grad():
            if sigma_scalar > 0:
                noise = torch.randn(latent_shape, generator=g_post)
                z_next = mu + sigma * noise
            else:
                z_next = mu
            chain_eps = torch.randn(latent_shape, generator=g_chain)
            if params.use_blend:
                z_chain = forward_noise(z0, t - 1, chain_eps, sched)
                z_next = z_next * blend_mask + z_chain * (1.0 - blend_mask)
            z_hat = z_next.detach()

        if params.record_trajectory:
            trace.append(
                {
                    "t": t,
                    "clip_loss": clip_val,
                    "nerp_loss": nerp_val,
                    "latent_norm": float(torch.linalg.vector_norm(z_hat)),
                }
            )
            latents.append(z_hat.clone())
        if progress_cb is not None:
            progress_cb(t, clip_val, nerp_val)

    _require_finite(z_hat, "final latent", 0)
    with torch.no_grad():
        image = codec.decode(z_hat).detach()

    return EditResult(
        image=image,
        mask=m,
        soft_mask=soft,
        trace=trace,
        duration_s=time.perf_counter() - start,
        params=params,
        no_op_mask=no_op,
        latents=latents if params.record_trajectory else None,
    )


def run_unguided(
    params: EditParams,
    models: ModelBundle,
    t2: Optional[str] = None,
    return_latents: bool = False,
):
    """Plain reverse diffusion: optional CFG, no mask, no gradient guidance.

    Draws from the same seeded init/posterior streams as run_edit, so a
    run_edit with an all-ones mask and zero grad_scale walks the identical
    trajectory at equal seed.
    """
    codec = resolve_codec(params.codec, models)
    size = models.image_size
    latent_shape = codec.latent_shape_for((size, size, 3))
    if tuple(models.denoiser.latent_shape) != tuple(latent_shape):
        raise BundleGeometryError(
            f"denoiser latent {models.denoiser.latent_shape} incompatible with "
            f"codec {params.codec!r} latent {latent_shape}"
        )
    sched = _sampling_schedule(models, params.steps)
    g_init = torch.Generator().manual_seed(child_seed(params.seed, "init"))
    g_post = torch.Generator().manual_seed(child_seed(params.seed, "posterior"))

    z_hat = torch.randn(latent_shape, generator=g_init)
    latents = []
    with torch.no_grad():
        for t in range(params.steps, 0, -1):
            _require_finite(z_hat, "latent", t)
            eps_u, eps_c = models.denoiser.predict_pair(z_hat, sched.model_timestep(t), t2)
            eps_hat = combine_cfg(eps_u, eps_c, params.guidance.cfg_scale)
            mu, sigma = posterior_stats(z_hat, eps_hat, t, sched)
            if float(sigma.flatten()[0]) > 0:
                noise = torch.randn(latent_shape, generator=g_post)
                z_hat = mu + sigma * noise
            else:
                z_hat = mu
            if return_latents:
                latents.append(z_hat.clone())
        _require_finite(z_hat, "final latent", 0)
        image = codec.decode(z_hat).detach()
    if return_latents:
        return image, latents
    return image
