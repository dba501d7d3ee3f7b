"""Training entrypoints for the toy model zoo.

Every entrypoint is deterministic given its seed: data order, init, and
noise draws all derive from per-purpose sub-seeds, so manifests (and
their content hashes) are stable across identical runs.
"""

from __future__ import annotations

import math
from typing import Optional

import numpy as np
import torch
from torch import nn

from ..calibration import CalibrationConfig
from ..codec import IdentityCodec
from ..schedule import NoiseSchedule, make_linear_schedule
from .bundle import ModelBundle, component_manifest, save_bundle
from .data import (
    EMPTY_CLASS_ID,
    IMAGE_SIZE,
    caption_class_id,
    child_seed,
    generate_dataset,
)
from .models import (
    CodecNet,
    SegDecoder,
    ToyBackbone,
    ToyCodec,
    ToyDenoiser,
    ToyImageEncoder,
    ToySegmenter,
    ToyTextEncoder,
)

VERSION = "0.1.0"


class TrainingDiverged(RuntimeError):
    """Loss became non-finite during training."""


def _check_finite(loss: torch.Tensor, what: str, step: int) -> float:
    val = float(loss.detach())
    if not math.isfinite(val):
        raise TrainingDiverged(f"{what} loss became {val} at step {step}")
    return val


def _split(dataset: list, holdout: float = 0.1) -> tuple:
    cut = max(1, int(len(dataset) * (1.0 - holdout)))
    return dataset[:cut], dataset[cut:]


def _stack_images(samples: list) -> torch.Tensor:
    return torch.stack([s.image for s in samples]).permute(0, 3, 1, 2).contiguous()


def _class_ids(samples: list) -> torch.Tensor:
    return torch.tensor([caption_class_id(s.caption) for s in samples], dtype=torch.long)


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for i in range(0, n, batch_size):
        yield torch.from_numpy(order[i : i + batch_size].copy())


def train_codec(dataset: list, epochs: int = 16, seed: int = 0) -> tuple:
    """Reconstruction-trained 4x autoencoder; returns (codec, manifest)."""
    train, val = _split(dataset)
    x_train, x_val = _stack_images(train), _stack_images(val)
    torch.manual_seed(child_seed(seed, "codec-init"))
    net = CodecNet()
    opt = torch.optim.Adam(net.parameters(), lr=3e-3)
    steps_per_epoch = (len(train) + 63) // 64
    lr_sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=epochs * steps_per_epoch)
    rng = np.random.default_rng(child_seed(seed, "codec-batches"))
    step = 0
    for _ in range(epochs):
        for idx in _batches(len(train), 64, rng):
            xb = x_train[idx]
            loss = ((net(xb) - xb) ** 2).mean()
            _check_finite(loss, "codec", step)
            opt.zero_grad()
            loss.backward()
            opt.step()
            lr_sched.step()
            step += 1
    net.eval()
    with torch.no_grad():
        val_mse = float(((net(x_val) - x_val) ** 2).mean())
        lat = net.enc(x_train)
        mean = lat.mean(dim=(0, 2, 3))
        std = lat.std(dim=(0, 2, 3)).clamp_min(1e-3)
    codec = ToyCodec(net)
    codec.set_normalization(mean, std)
    geometry = {
        "kind": "toy",
        "image_size": IMAGE_SIZE,
        "factor": ToyCodec.factor,
        "channels": ToyCodec.latent_channels,
    }
    metric = {"val_recon_mse": val_mse, "epochs": epochs, "n_train": len(train)}
    return codec, component_manifest("codec", VERSION, geometry, metric)


def train_denoiser(
    dataset: list,
    schedule: NoiseSchedule,
    epochs: int = 30,
    seed: int = 0,
    codec=None,
    prompt_dropout: float = 0.1,
    base: int = 48,
) -> tuple:
    """Noise-prediction MSE training with text conditioning and CFG dropout."""
    codec = codec if codec is not None else IdentityCodec()
    train, val = _split(dataset)
    with torch.no_grad():
        z_train = torch.stack([codec.encode(s.image) for s in train]).permute(0, 3, 1, 2)
        z_val = torch.stack([codec.encode(s.image) for s in val]).permute(0, 3, 1, 2)
    c_train, c_val = _class_ids(train), _class_ids(val)
    latent_shape = codec.latent_shape_for((IMAGE_SIZE, IMAGE_SIZE, 3))

    torch.manual_seed(child_seed(seed, "denoiser-init"))
    model = ToyDenoiser(latent_shape, schedule.to_json(), base=base)
    net = model.net
    opt = torch.optim.Adam(net.parameters(), lr=1e-3)
    rng = np.random.default_rng(child_seed(seed, "denoiser-batches"))
    gen = torch.Generator().manual_seed(child_seed(seed, "denoiser-noise"))

    sqrt_abar = torch.from_numpy(np.sqrt(schedule.alpha_bars)).float()
    sqrt_1m_abar = torch.from_numpy(np.sqrt(1.0 - schedule.alpha_bars)).float()

    # fixed validation noising so epoch-to-epoch losses are comparable
    val_gen = torch.Generator().manual_seed(child_seed(seed, "denoiser-val"))
    t_val = torch.randint(1, schedule.T + 1, (len(val),), generator=val_gen)
    eps_val = torch.randn(z_val.shape, generator=val_gen)
    zt_val = sqrt_abar[t_val][:, None, None, None] * z_val + sqrt_1m_abar[t_val][:, None, None, None] * eps_val

    def val_loss() -> float:
        net.eval()
        with torch.no_grad():
            pred = net(zt_val, t_val, c_val)
            out = float(((pred - eps_val) ** 2).mean())
        net.train()
        return out

    history = [val_loss()]
    step = 0
    for _ in range(epochs):
        for idx in _batches(len(train), 128, rng):
            z0 = z_train[idx]
            cls = c_train[idx].clone()
            drop = torch.rand(len(idx), generator=gen) < prompt_dropout
            cls[drop] = EMPTY_CLASS_ID
            t = torch.randint(1, schedule.T + 1, (len(idx),), generator=gen)
            eps = torch.randn(z0.shape, generator=gen)
            z_t = sqrt_abar[t][:, None, None, None] * z0 + sqrt_1m_abar[t][:, None, None, None] * eps
            loss = ((net(z_t, t, cls) - eps) ** 2).mean()
            _check_finite(loss, "denoiser", step)
            opt.zero_grad()
            loss.backward()
            opt.step()
            step += 1
        history.append(val_loss())
    net.eval()
    geometry = {"latent": list(latent_shape), "schedule": schedule.to_json(), "base": base}
    metric = {
        "val_eps_mse_initial": history[0],
        "val_eps_mse": history[-1],
        "val_eps_mse_history": history,
        "epochs": epochs,
    }
    return model, component_manifest("denoiser", VERSION, geometry, metric)


def _masked_images(samples: list) -> torch.Tensor:
    """Images with everything outside the caption's entity zeroed, matching
    how the guidance loss feeds masked crops to the image encoder."""
    out = []
    for s in samples:
        m = torch.from_numpy(s.gt_mask.astype(np.float32)).unsqueeze(-1)
        out.append(s.image * m)
    return torch.stack(out).permute(0, 3, 1, 2).contiguous()


def train_embedder(dataset: list, epochs: int = 30, seed: int = 0, dim: int = 64) -> tuple:
    """Contrastive caption/image training; returns (text, image, manifest).

    Trains on mask-isolated crops: the sampler always evaluates the image
    encoder on masked images, and two-entity images would otherwise make
    the caption target ambiguous."""
    train, val = _split(dataset)
    x_train, x_val = _masked_images(train), _masked_images(val)
    c_train, c_val = _class_ids(train), _class_ids(val)

    torch.manual_seed(child_seed(seed, "embedder-init"))
    text = ToyTextEncoder(dim)
    image = ToyImageEncoder(dim)
    opt = torch.optim.Adam(list(text.parameters()) + list(image.parameters()), lr=2e-3)
    rng = np.random.default_rng(child_seed(seed, "embedder-batches"))
    temperature = 0.07
    step = 0
    for _ in range(epochs):
        for idx in _batches(len(train), 64, rng):
            img_emb = torch.nn.functional.normalize(image(x_train[idx]), dim=1)
            txt_emb = torch.nn.functional.normalize(text.table.weight[:EMPTY_CLASS_ID], dim=1)
            logits = img_emb @ txt_emb.T / temperature
            loss = torch.nn.functional.cross_entropy(logits, c_train[idx])
            _check_finite(loss, "embedder", step)
            opt.zero_grad()
            loss.backward()
            opt.step()
            step += 1
    text.eval()
    image.eval()
    with torch.no_grad():
        img_emb = torch.nn.functional.normalize(image(x_val), dim=1)
        txt_emb = torch.nn.functional.normalize(text.table.weight[:EMPTY_CLASS_ID], dim=1)
        top1 = float((torch.argmax(img_emb @ txt_emb.T, dim=1) == c_val).float().mean())
    geometry = {"dim": dim}
    metric = {"retrieval_top1": top1, "epochs": epochs}
    return (
        text,
        image,
        component_manifest("text_encoder", VERSION, geometry, metric),
        component_manifest("image_encoder", VERSION, geometry, metric),
    )


def _segment_targets(samples: list, rng: np.random.Generator) -> tuple:
    """Pick (prompt class, target mask) per sample; mixes in distractor and
    absent-entity prompts so the decoder learns prompt dependence."""
    from .data import caption_for

    ids = []
    masks = []
    for s in samples:
        primary = caption_class_id(s.caption)
        u = rng.random()
        if s.distractor is not None and u < 0.15:
            dshape, dcolor = s.distractor
            ids.append(caption_class_id(caption_for(dcolor, dshape)))
            masks.append(s.distractor_mask)
        elif u < 0.3:
            present = {primary}
            if s.distractor is not None:
                dshape, dcolor = s.distractor
                present.add(caption_class_id(caption_for(dcolor, dshape)))
            absent = [k for k in range(EMPTY_CLASS_ID) if k not in present]
            ids.append(int(rng.choice(absent)))
            masks.append(np.zeros_like(s.gt_mask))
        else:
            ids.append(primary)
            masks.append(s.gt_mask)
    return (
        torch.tensor(ids, dtype=torch.long),
        torch.from_numpy(np.stack(masks).astype(np.float32)),
    )


def _median_iou(segmenter: ToySegmenter, samples: list, chunk: int = 64) -> float:
    backbone, decoder, cfg = segmenter.backbone, segmenter.decoder, segmenter.cfg
    size = backbone.image_size
    ious = []
    with torch.no_grad():
        for i in range(0, len(samples), chunk):
            batch = samples[i : i + chunk]
            x = _stack_images(batch)
            ids = _class_ids(batch)
            acts = backbone.run_layers(x, cfg.extraction_layers)
            logits = decoder.decode_batch(acts, decoder.cond_table(ids), (size, size))
            soft = 255.0 * torch.sigmoid(logits)
            pred = (soft > 127).numpy()
            for p, s in zip(pred, batch):
                gt = s.gt_mask.astype(bool)
                union = (p | gt).sum()
                ious.append(float((p & gt).sum() / union) if union else 1.0)
    return float(np.median(ious))


def _dice_loss(logits: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """Soft Dice over the batch; directly optimizes region overlap."""
    probs = torch.sigmoid(logits).flatten(1)
    tgt = targets.flatten(1)
    inter = (probs * tgt).sum(dim=1)
    denom = probs.sum(dim=1) + tgt.sum(dim=1)
    return (1.0 - (2.0 * inter + 1.0) / (denom + 1.0)).mean()


def train_segmenter(dataset: list, epochs: int = 14, seed: int = 0) -> tuple:
    """Joint backbone+decoder training, BCE + Dice on ground-truth masks."""
    train, val = _split(dataset)
    x_train = _stack_images(train)

    torch.manual_seed(child_seed(seed, "segmenter-init"))
    backbone = ToyBackbone(image_size=IMAGE_SIZE, patch_size=4, dim=64, depth=10)
    decoder = SegDecoder(dim=64, patch_size=4)
    cfg = CalibrationConfig(extraction_layers=[3, 7, 9], embed_dim=64, patch_size=4)
    params = list(backbone.parameters()) + list(decoder.parameters())
    opt = torch.optim.Adam(params, lr=2e-3)
    steps_per_epoch = (len(train) + 63) // 64
    lr_sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=epochs * steps_per_epoch)
    rng = np.random.default_rng(child_seed(seed, "segmenter-batches"))
    step = 0
    for _ in range(epochs):
        for idx in _batches(len(train), 64, rng):
            batch = [train[i] for i in idx.tolist()]
            ids, targets = _segment_targets(batch, rng)
            acts = backbone.run_layers(x_train[idx], cfg.extraction_layers)
            cond = decoder.cond_table(ids)
            logits = decoder.decode_batch(acts, cond, (IMAGE_SIZE, IMAGE_SIZE))
            loss = torch.nn.functional.binary_cross_entropy_with_logits(logits, targets)
            loss = loss + 0.5 * _dice_loss(logits, targets)
            _check_finite(loss, "segmenter", step)
            opt.zero_grad()
            loss.backward()
            opt.step()
            lr_sched.step()
            step += 1
    backbone.eval()
    decoder.eval()
    segmenter = ToySegmenter(backbone, decoder, cfg)
    iou = _median_iou(segmenter, val)
    geometry = {
        "image_size": IMAGE_SIZE,
        "patch_size": 4,
        "dim": 64,
        "depth": 10,
        "extraction_layers": cfg.extraction_layers,
        "threshold": cfg.threshold,
    }
    metric = {"median_iou": iou, "epochs": epochs}
    return segmenter, component_manifest("segmenter", VERSION, geometry, metric)


def train_all(
    seed: int,
    n_samples: int = 2048,
    out_dir: Optional[str] = None,
    epochs: Optional[dict] = None,
    log=None,
) -> ModelBundle:
    """Train the full bundle on one generated dataset; optionally save it."""
    epochs = epochs or {}
    say = log or (lambda msg: None)
    dataset = generate_dataset(n_samples, seed)
    say(f"dataset: {n_samples} samples")

    def kw(name):
        return {"epochs": epochs[name]} if name in epochs else {}

    codec, codec_manifest = train_codec(dataset, seed=seed, **kw("codec"))
    say(f"codec: val recon MSE {codec_manifest['metric']['val_recon_mse']:.5f}")

    schedule = make_linear_schedule(1000, 1e-4, 0.02)
    denoiser, den_manifest = train_denoiser(
        dataset, schedule, seed=seed, codec=codec, **kw("denoiser")
    )
    say(
        "denoiser: val eps MSE "
        f"{den_manifest['metric']['val_eps_mse_initial']:.4f} -> "
        f"{den_manifest['metric']['val_eps_mse']:.4f}"
    )

    text, image, text_manifest, image_manifest = train_embedder(
        dataset, seed=seed, **kw("embedder")
    )
    say(f"embedder: retrieval top-1 {text_manifest['metric']['retrieval_top1']:.3f}")

    segmenter, seg_manifest = train_segmenter(dataset, seed=seed, **kw("segmenter"))
    say(f"segmenter: median IoU {seg_manifest['metric']['median_iou']:.3f}")

    bundle = ModelBundle(
        denoiser=denoiser,
        codec=codec,
        text_encoder=text,
        image_encoder=image,
        segmenter=segmenter,
        manifests={
            "denoiser": den_manifest,
            "codec": codec_manifest,
            "text_encoder": text_manifest,
            "image_encoder": image_manifest,
            "segmenter": seg_manifest,
        },
    )
    bundle.check_geometry()
    if out_dir is not None:
        save_bundle(bundle, out_dir)
        say(f"saved bundle to {out_dir}")
    return bundle
