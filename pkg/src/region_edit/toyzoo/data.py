"""Procedural shapes-on-texture dataset with exact ground-truth masks.

Captions follow the grammar "a {color} {shape}" over 3 colors x 3 shapes
(9 classes). Images are 32x32x3 in [-1, 1]. Each sample names one primary
entity; half the images carry a second, differently-attributed entity so
segmentation training can learn prompt-dependence.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch

IMAGE_SIZE = 32
COLORS = ("red", "green", "blue")
SHAPES = ("square", "circle", "triangle")
CAPTION_CLASSES = tuple(f"a {c} {s}" for c in COLORS for s in SHAPES)
#: class id reserved for the empty prompt (classifier-free null token)
EMPTY_CLASS_ID = len(CAPTION_CLASSES)

_COLOR_VALUES = {
    "red": np.array([0.8, -0.8, -0.8]),
    "green": np.array([-0.8, 0.8, -0.8]),
    "blue": np.array([-0.8, -0.8, 0.8]),
}


def child_seed(seed: int, label: str) -> int:
    """Stable per-purpose sub-seed (independent of Python hash salting)."""
    digest = hashlib.sha256(f"{seed}:{label}".encode()).digest()
    return int.from_bytes(digest[:8], "little") % (2**63)


def caption_for(color: str, shape: str) -> str:
    return f"a {color} {shape}"


def parse_caption(text: Optional[str]) -> Optional[int]:
    """Caption -> class id; empty/None -> None; unknown wording raises."""
    if text is None or text.strip() == "":
        return None
    words = text.lower().replace(",", " ").split()
    colors = [c for c in COLORS if c in words]
    shapes = [s for s in SHAPES if s in words]
    if len(colors) != 1 or len(shapes) != 1:
        raise ValueError(
            f"caption {text!r} is outside the toy grammar 'a {{color}} {{shape}}' "
            f"with colors {COLORS} and shapes {SHAPES}"
        )
    return COLORS.index(colors[0]) * len(SHAPES) + SHAPES.index(shapes[0])


def caption_class_id(text: Optional[str]) -> int:
    """Like parse_caption but maps the empty prompt to EMPTY_CLASS_ID."""
    cid = parse_caption(text)
    return EMPTY_CLASS_ID if cid is None else cid


@dataclass
class ShapeSample:
    image: torch.Tensor  # (32, 32, 3) float32 in [-1, 1]
    caption: str
    gt_mask: np.ndarray  # (32, 32) uint8, exactly the primary entity's pixels
    attributes: tuple  # (shape, color) of the primary entity
    distractor: Optional[tuple] = None  # (shape, color) of the second entity
    distractor_mask: Optional[np.ndarray] = None


def _shape_mask(shape: str, cx: float, cy: float, r: float, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    if shape == "square":
        inside = (np.abs(xx - cx) <= r) & (np.abs(yy - cy) <= r)
    elif shape == "circle":
        inside = (xx - cx) ** 2 + (yy - cy) ** 2 <= r**2
    elif shape == "triangle":
        # upward triangle: apex (cx, cy-r), base corners (cx +- r, cy+r)
        top, bot = cy - r, cy + r
        inside = (yy >= top) & (yy <= bot)
        half_width = (yy - top) / (bot - top) * r
        inside &= np.abs(xx - cx) <= half_width
    else:
        raise ValueError(f"unknown shape {shape!r}")
    return inside.astype(np.uint8)


def _textured_background(rng: np.random.Generator, size: int) -> np.ndarray:
    base = rng.uniform(-0.35, 0.35)
    tint = rng.uniform(-0.12, 0.12, size=3)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) / (size - 1)
    gx, gy = rng.uniform(-0.3, 0.3, size=2)
    gradient = gx * (xx - 0.5) + gy * (yy - 0.5)
    noise = rng.normal(0.0, 0.02, size=(size, size, 3))
    img = base + tint[None, None, :] + gradient[:, :, None] + noise
    return np.clip(img, -0.6, 0.6)


def _place_entity(
    rng: np.random.Generator, size: int, forbidden: Optional[np.ndarray]
) -> tuple:
    """Center and radius for a new entity whose mask avoids `forbidden`."""
    for _ in range(60):
        r = rng.uniform(4.0, 7.5)
        cx = rng.uniform(r + 1.0, size - 2.0 - r)
        cy = rng.uniform(r + 1.0, size - 2.0 - r)
        if forbidden is None:
            return cx, cy, r
        # bounding circle of any shape of extent r (square corners reach r*sqrt(2))
        probe = _shape_mask("circle", cx, cy, r * 1.45 + 1.0, size)
        if not (probe & forbidden).any():
            return cx, cy, r
    raise RuntimeError("could not place a non-overlapping entity")


def _paint(img: np.ndarray, mask: np.ndarray, color: str, rng: np.random.Generator) -> None:
    fill = _COLOR_VALUES[color][None, :] + rng.normal(0.0, 0.03, size=(int(mask.sum()), 3))
    img[mask.astype(bool)] = np.clip(fill, -1.0, 1.0)


def generate_dataset(n: int, seed: int) -> list[ShapeSample]:
    """Deterministic list of n samples; stratified attribute marginals."""
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    rng = np.random.default_rng(child_seed(seed, "dataset"))
    # stratified class order keeps marginals near-uniform at any n
    classes = np.tile(np.arange(9), (n + 8) // 9)[:n]
    rng.shuffle(classes)
    samples = []
    for cid in classes:
        color = COLORS[cid // 3]
        shape = SHAPES[cid % 3]
        img = _textured_background(rng, IMAGE_SIZE)
        cx, cy, r = _place_entity(rng, IMAGE_SIZE, forbidden=None)
        gt = _shape_mask(shape, cx, cy, r, IMAGE_SIZE)
        _paint(img, gt, color, rng)

        distractor = None
        dmask = None
        if rng.random() < 0.5:
            others = [k for k in range(9) if k != cid]
            did = int(rng.choice(others))
            dcolor, dshape = COLORS[did // 3], SHAPES[did % 3]
            try:
                dcx, dcy, dr = _place_entity(rng, IMAGE_SIZE, forbidden=gt)
                dmask = _shape_mask(dshape, dcx, dcy, dr, IMAGE_SIZE)
                _paint(img, dmask, dcolor, rng)
                distractor = (dshape, dcolor)
            except RuntimeError:
                distractor, dmask = None, None

        samples.append(
            ShapeSample(
                image=torch.from_numpy(img.astype(np.float32)),
                caption=caption_for(color, shape),
                gt_mask=gt,
                attributes=(shape, color),
                distractor=distractor,
                distractor_mask=dmask,
            )
        )
    return samples
