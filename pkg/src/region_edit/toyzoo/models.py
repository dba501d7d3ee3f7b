"""Desk-scale trainable models: denoiser, autoencoder, embedders, segmenter.

Every component keeps the package-level tensor conventions at its surface
(images (H, W, 3), latents (h, w, c), both channel-last); NCHW only
inside the torch modules.
"""

from __future__ import annotations

import math
from typing import Optional

import numpy as np
import torch
from torch import nn

from ..calibration import CalibrationConfig, segment
from ..codec import Codec
from ..guidance import EmbeddingVector
from .data import EMPTY_CLASS_ID, IMAGE_SIZE, caption_class_id, child_seed

N_CLASSES = EMPTY_CLASS_ID + 1  # 9 caption classes + the empty-prompt token


def _hwc_to_nchw(x: torch.Tensor) -> torch.Tensor:
    return x.permute(2, 0, 1).unsqueeze(0)


def _nchw_to_hwc(x: torch.Tensor) -> torch.Tensor:
    return x.squeeze(0).permute(1, 2, 0)


def sinusoidal_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    """Standard transformer-style timestep features, shape (N, dim)."""
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float32) / half)
    args = t.float().unsqueeze(1) * freqs.unsqueeze(0)
    return torch.cat([torch.sin(args), torch.cos(args)], dim=1)


class _ResBlock(nn.Module):
    def __init__(self, ch: int, emb_dim: int):
        super().__init__()
        groups = 8 if ch % 8 == 0 else 1
        self.norm1 = nn.GroupNorm(groups, ch)
        self.conv1 = nn.Conv2d(ch, ch, 3, padding=1)
        self.emb_proj = nn.Linear(emb_dim, ch)
        self.norm2 = nn.GroupNorm(groups, ch)
        self.conv2 = nn.Conv2d(ch, ch, 3, padding=1)

    def forward(self, x, emb):
        h = self.conv1(torch.nn.functional.silu(self.norm1(x)))
        h = h + self.emb_proj(emb)[:, :, None, None]
        h = self.conv2(torch.nn.functional.silu(self.norm2(h)))
        return x + h


class DenoiserNet(nn.Module):
    """Small conditional UNet predicting forward-process noise."""

    def __init__(self, latent_channels: int, base: int = 48, emb_dim: int = 64):
        super().__init__()
        self.emb_dim = emb_dim
        self.time_mlp = nn.Sequential(nn.Linear(emb_dim, emb_dim), nn.SiLU(), nn.Linear(emb_dim, emb_dim))
        self.class_emb = nn.Embedding(N_CLASSES, emb_dim)
        self.conv_in = nn.Conv2d(latent_channels, base, 3, padding=1)
        self.down1 = _ResBlock(base, emb_dim)
        self.down2 = _ResBlock(base, emb_dim)
        self.downsample = nn.Conv2d(base, base * 2, 4, stride=2, padding=1)
        self.mid1 = _ResBlock(base * 2, emb_dim)
        self.mid2 = _ResBlock(base * 2, emb_dim)
        self.up_conv = nn.Conv2d(base * 2, base, 3, padding=1)
        self.merge = nn.Conv2d(base * 2, base, 3, padding=1)
        self.up1 = _ResBlock(base, emb_dim)
        self.out_norm = nn.GroupNorm(8 if base % 8 == 0 else 1, base)
        self.out_conv = nn.Conv2d(base, latent_channels, 3, padding=1)

    def forward(self, z: torch.Tensor, t: torch.Tensor, cls: torch.Tensor) -> torch.Tensor:
        emb = self.time_mlp(sinusoidal_embedding(t, self.emb_dim)) + self.class_emb(cls)
        h = self.conv_in(z)
        h = self.down1(h, emb)
        skip = self.down2(h, emb)
        h = self.downsample(skip)
        h = self.mid1(h, emb)
        h = self.mid2(h, emb)
        h = torch.nn.functional.interpolate(h, scale_factor=2, mode="nearest")
        h = self.up_conv(h)
        h = self.merge(torch.cat([h, skip], dim=1))
        h = self.up1(h, emb)
        return self.out_conv(torch.nn.functional.silu(self.out_norm(h)))


class ToyDenoiser:
    """Time- and text-conditioned noise predictor over (h, w, c) latents."""

    def __init__(self, latent_shape: tuple, schedule_json: dict, base: int = 48):
        self.latent_shape = tuple(latent_shape)
        self.schedule_json = dict(schedule_json)
        self.base = base
        self.net = DenoiserNet(latent_shape[2], base=base)

    def predict(self, z: torch.Tensor, t_model: int, caption: Optional[str]) -> torch.Tensor:
        cid = caption_class_id(caption)
        t = torch.tensor([t_model], dtype=torch.long)
        c = torch.tensor([cid], dtype=torch.long)
        return _nchw_to_hwc(self.net(_hwc_to_nchw(z), t, c))

    def predict_pair(self, z: torch.Tensor, t_model: int, caption: Optional[str]):
        """(unconditional, conditional) prediction in one batched forward."""
        cid = caption_class_id(caption)
        zz = _hwc_to_nchw(z).repeat(2, 1, 1, 1)
        t = torch.tensor([t_model, t_model], dtype=torch.long)
        c = torch.tensor([EMPTY_CLASS_ID, cid], dtype=torch.long)
        out = self.net(zz, t, c)
        return out[0].permute(1, 2, 0), out[1].permute(1, 2, 0)


class CodecNet(nn.Module):
    def __init__(self, latent_channels: int = 4):
        super().__init__()
        # downsample early, decode with sub-pixel convs: compute stays at
        # low resolution and upsampling is learned (sharper edges)
        self.enc = nn.Sequential(
            nn.Conv2d(3, 32, 4, stride=2, padding=1),
            nn.SiLU(),
            nn.Conv2d(32, 64, 4, stride=2, padding=1),
            nn.SiLU(),
            nn.Conv2d(64, 96, 3, padding=1),
            nn.SiLU(),
            nn.Conv2d(96, latent_channels, 3, padding=1),
        )
        self.dec = nn.Sequential(
            nn.Conv2d(latent_channels, 96, 3, padding=1),
            nn.SiLU(),
            nn.Conv2d(96, 96, 3, padding=1),
            nn.SiLU(),
            nn.Conv2d(96, 48 * 4, 3, padding=1),
            nn.PixelShuffle(2),
            nn.SiLU(),
            nn.Conv2d(48, 32 * 4, 3, padding=1),
            nn.PixelShuffle(2),
            nn.SiLU(),
            nn.Conv2d(32, 3, 3, padding=1),
            nn.Tanh(),
        )

    def forward(self, x):
        return self.dec(self.enc(x))


class ToyCodec(Codec):
    """4x-downsampling conv autoencoder with standardized latents."""

    factor = 4
    latent_channels = 4
    name = "toy"

    def __init__(self, net: Optional[CodecNet] = None):
        self.net = net or CodecNet(self.latent_channels)
        # per-channel standardization fitted after training
        self.latent_mean = torch.zeros(self.latent_channels)
        self.latent_std = torch.ones(self.latent_channels)

    def set_normalization(self, mean: torch.Tensor, std: torch.Tensor) -> None:
        self.latent_mean = mean.detach().clone()
        self.latent_std = std.detach().clone()

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        raw = self.net.enc(_hwc_to_nchw(x))
        z = (raw - self.latent_mean[None, :, None, None]) / self.latent_std[None, :, None, None]
        return _nchw_to_hwc(z)

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        raw = _hwc_to_nchw(z) * self.latent_std[None, :, None, None] + self.latent_mean[None, :, None, None]
        x = self.net.dec(raw)
        return torch.clamp(_nchw_to_hwc(x), -1.0, 1.0)


class ToyTextEncoder(nn.Module):
    """Caption-grammar embedding table plus an empty-prompt token."""

    def __init__(self, dim: int = 64):
        super().__init__()
        self.dim = dim
        self.table = nn.Embedding(N_CLASSES, dim)

    def class_embeddings(self, ids: torch.Tensor) -> torch.Tensor:
        return self.table(ids)

    def encode(self, text: Optional[str]) -> EmbeddingVector:
        cid = caption_class_id(text)
        with torch.no_grad():
            vec = self.table.weight[cid].clone()
        return EmbeddingVector.unit(vec)


class ToyImageEncoder(nn.Module):
    """Conv encoder used for text-image scoring and as the perceptual net."""

    def __init__(self, dim: int = 64):
        super().__init__()
        self.dim = dim
        self.conv1 = nn.Conv2d(3, 32, 3, stride=2, padding=1)
        self.conv2 = nn.Conv2d(32, 64, 3, stride=2, padding=1)
        self.conv3 = nn.Conv2d(64, 64, 3, stride=2, padding=1)
        self.head = nn.Linear(64, dim)

    def features(self, x: torch.Tensor) -> list:
        f1 = torch.nn.functional.silu(self.conv1(x))
        f2 = torch.nn.functional.silu(self.conv2(f1))
        f3 = torch.nn.functional.silu(self.conv3(f2))
        return [f1, f2, f3]

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        f3 = self.features(x)[-1]
        pooled = torch.nn.functional.adaptive_avg_pool2d(f3, 1).flatten(1)
        return self.head(pooled)

    def embed(self, image: torch.Tensor) -> torch.Tensor:
        """(H, W, 3) image -> raw (dim,) embedding; differentiable."""
        return self.forward(_hwc_to_nchw(image)).squeeze(0)


def perceptual_distance(encoder: ToyImageEncoder, a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Multi-layer unit-normalized feature distance (LPIPS-style, toy net)."""
    fa = encoder.features(_hwc_to_nchw(a))
    fb = encoder.features(_hwc_to_nchw(b))
    total = a.new_zeros(())
    for u, v in zip(fa, fb):
        un = u / torch.sqrt((u**2).sum(dim=1, keepdim=True) + 1e-8)
        vn = v / torch.sqrt((v**2).sum(dim=1, keepdim=True) + 1e-8)
        total = total + ((un - vn) ** 2).mean()
    return total


class _AttnBlock(nn.Module):
    def __init__(self, dim: int, heads: int = 4, mlp_ratio: float = 2.0):
        super().__init__()
        self.ln1 = nn.LayerNorm(dim)
        self.attn = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.ln2 = nn.LayerNorm(dim)
        hidden = int(dim * mlp_ratio)
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))

    def forward(self, x):
        h = self.ln1(x)
        x = x + self.attn(h, h, h, need_weights=False)[0]
        return x + self.mlp(self.ln2(x))


class ToyBackbone(nn.Module):
    """Patch-token transformer standing in for a frozen ViT backbone."""

    def __init__(self, image_size: int = IMAGE_SIZE, patch_size: int = 4, dim: int = 64, depth: int = 10):
        super().__init__()
        if image_size % patch_size:
            raise ValueError("image size must be divisible by patch size")
        self.image_size = image_size
        self.patch_size = patch_size
        self.dim = dim
        self.depth = depth
        n_tokens = (image_size // patch_size) ** 2
        self.patch_embed = nn.Conv2d(3, dim, patch_size, stride=patch_size)
        self.cls_token = nn.Parameter(torch.zeros(1, 1, dim))
        self.pos_emb = nn.Parameter(torch.zeros(1, 1 + n_tokens, dim))
        self.blocks = nn.ModuleList(_AttnBlock(dim) for _ in range(depth))
        nn.init.normal_(self.pos_emb, std=0.02)
        nn.init.normal_(self.cls_token, std=0.02)

    def _pos_emb_for(self, grid_h: int, grid_w: int) -> torch.Tensor:
        """Positional embeddings, bilinearly resampled for off-size inputs."""
        grid = self.image_size // self.patch_size
        if (grid_h, grid_w) == (grid, grid):
            return self.pos_emb
        patch_pos = self.pos_emb[:, 1:, :].reshape(1, grid, grid, self.dim).permute(0, 3, 1, 2)
        resized = torch.nn.functional.interpolate(
            patch_pos, size=(grid_h, grid_w), mode="bilinear", align_corners=False
        )
        resized = resized.permute(0, 2, 3, 1).reshape(1, grid_h * grid_w, self.dim)
        return torch.cat([self.pos_emb[:, :1, :], resized], dim=1)

    def run_layers(self, x_nchw: torch.Tensor, layers: list) -> list:
        """Token activations (N, 1+T, dim) after each requested block."""
        grid_h = x_nchw.shape[2] // self.patch_size
        grid_w = x_nchw.shape[3] // self.patch_size
        tok = self.patch_embed(x_nchw).flatten(2).transpose(1, 2)
        tok = torch.cat([self.cls_token.expand(tok.shape[0], -1, -1), tok], dim=1)
        tok = tok + self._pos_emb_for(grid_h, grid_w)
        wanted = set(layers)
        out = {}
        for i, block in enumerate(self.blocks):
            tok = block(tok)
            if i in wanted:
                out[i] = tok
        if len(out) != len(wanted):
            missing = sorted(wanted - out.keys())
            raise ValueError(f"extraction layers {missing} exceed backbone depth {self.depth}")
        return [out[i] for i in layers]

    def activations(self, image: torch.Tensor, layers: list) -> list:
        """Single (H, W, 3) image -> list of (1+T, dim) activations."""
        acts = self.run_layers(_hwc_to_nchw(image), layers)
        return [a.squeeze(0) for a in acts]


class SegDecoder(nn.Module):
    """Thin conditional decoder over backbone activations.

    Before each block the matching skip activation is added and the tokens
    are modulated by a learned per-channel scale-and-shift of the text
    conditioning vector; the last layer's patch tokens are linearly
    projected to patch_size^2 logits each and reassembled into a map.
    """

    def __init__(self, dim: int = 64, n_blocks: int = 3, patch_size: int = 4):
        super().__init__()
        self.dim = dim
        self.patch_size = patch_size
        self.cond_table = nn.Embedding(N_CLASSES, dim)
        self.skip_proj = nn.ModuleList(nn.Linear(dim, dim) for _ in range(n_blocks))
        self.film = nn.ModuleList(nn.Linear(dim, 2 * dim) for _ in range(n_blocks))
        self.blocks = nn.ModuleList(_AttnBlock(dim) for _ in range(n_blocks))
        self.head_norm = nn.LayerNorm(dim)
        self.head = nn.Linear(dim, patch_size * patch_size)

    def encode_condition(self, text: Optional[str]) -> torch.Tensor:
        return self.cond_table.weight[caption_class_id(text)]

    def decode_batch(self, acts: list, cond: torch.Tensor, out_hw: tuple) -> torch.Tensor:
        H, W = out_hw
        P = self.patch_size
        gh, gw = H // P, W // P
        x = torch.zeros_like(acts[0])
        for skip, proj, film, block in zip(acts, self.skip_proj, self.film, self.blocks):
            x = x + proj(skip)
            scale, shift = film(cond).unsqueeze(1).chunk(2, dim=-1)
            x = x * (1.0 + scale) + shift
            x = block(x)
        tokens = self.head(self.head_norm(x))[:, 1:, :]  # drop class token
        patches = tokens.reshape(-1, gh, gw, P, P)
        return patches.permute(0, 1, 3, 2, 4).reshape(-1, H, W)

    def decode(self, acts: list, cond: torch.Tensor, out_hw: tuple) -> torch.Tensor:
        batched = [a.unsqueeze(0) for a in acts]
        return self.decode_batch(batched, cond.unsqueeze(0), out_hw).squeeze(0)


class ToySegmenter:
    """Backbone + conditional decoder + extraction config, as one unit."""

    def __init__(self, backbone: Optional[ToyBackbone] = None, decoder: Optional[SegDecoder] = None,
                 cfg: Optional[CalibrationConfig] = None):
        self.backbone = backbone or ToyBackbone()
        self.decoder = decoder or SegDecoder(dim=self.backbone.dim, patch_size=self.backbone.patch_size)
        self.cfg = cfg or CalibrationConfig(patch_size=self.backbone.patch_size)

    @property
    def image_size(self) -> int:
        return self.backbone.image_size

    def soft_mask(self, image: torch.Tensor, text: str) -> np.ndarray:
        return segment(image, text, self.backbone, self.decoder, self.cfg)

    def modules(self) -> nn.ModuleList:
        return nn.ModuleList([self.backbone, self.decoder])


def random_bundle(seed: int, codec_kind: str = "toy"):
    """Untrained but fully wired bundle; weights seeded deterministically.

    Useful wherever contracts (not sample quality) are under test.
    """
    from ..codec import IdentityCodec
    from .bundle import ModelBundle, component_manifest

    torch.manual_seed(child_seed(seed, "random-bundle"))
    if codec_kind == "identity":
        codec = IdentityCodec()
        latent = (IMAGE_SIZE, IMAGE_SIZE, 3)
    elif codec_kind == "toy":
        codec = ToyCodec()
        latent = (IMAGE_SIZE // 4, IMAGE_SIZE // 4, 4)
    else:
        raise ValueError(f"unknown codec kind {codec_kind!r}")
    schedule_json = {"kind": "linear", "T": 1000, "beta_start": 1e-4, "beta_end": 0.02}
    denoiser = ToyDenoiser(latent, schedule_json, base=32)
    bundle = ModelBundle(
        denoiser=denoiser,
        codec=codec,
        text_encoder=ToyTextEncoder(),
        image_encoder=ToyImageEncoder(),
        segmenter=ToySegmenter(),
        manifests={
            name: component_manifest(name, "random", geometry, {})
            for name, geometry in (
                ("denoiser", {"latent": list(latent), "schedule": schedule_json, "base": 32}),
                ("codec", {"kind": codec_kind, "image_size": IMAGE_SIZE}),
                ("text_encoder", {"dim": 64}),
                ("image_encoder", {"dim": 64}),
                ("segmenter", {"image_size": IMAGE_SIZE, "patch_size": 4}),
            )
        },
    )
    bundle.check_geometry()
    return bundle
