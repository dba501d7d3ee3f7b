"""Checkpoint bundles: five components, each with a content-hashed manifest.

Layout: bundle/<component>/{weights.bin, manifest.json}. weights.bin is a
flat little-endian record of named tensors (not torch.save) so identical
training runs produce identical bytes and therefore identical hashes.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from ..calibration import CalibrationConfig
from ..codec import Codec, IdentityCodec
from ..errors import BundleGeometryError, ModelLoadError
from ..guidance import GuidanceEncoders
from ..schedule import NoiseSchedule, schedule_from_json
from .data import IMAGE_SIZE

_MAGIC = b"RETB1\n"
COMPONENTS = ("denoiser", "codec", "text_encoder", "image_encoder", "segmenter")


def serialize_tensors(tensors: dict) -> bytes:
    """Deterministic byte encoding of an ordered name->tensor mapping."""
    parts = [_MAGIC, struct.pack("<I", len(tensors))]
    for name, t in tensors.items():
        arr = t.detach().cpu().contiguous().numpy()
        name_b = name.encode()
        dtype_b = str(arr.dtype).encode()
        parts.append(struct.pack("<I", len(name_b)))
        parts.append(name_b)
        parts.append(struct.pack("<I", len(dtype_b)))
        parts.append(dtype_b)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}q", *arr.shape))
        data = arr.astype(arr.dtype.newbyteorder("<")).tobytes()
        parts.append(struct.pack("<Q", len(data)))
        parts.append(data)
    return b"".join(parts)


def deserialize_tensors(blob: bytes) -> dict:
    if not blob.startswith(_MAGIC):
        raise ModelLoadError("weights file has wrong magic header")
    off = len(_MAGIC)

    def take(fmt):
        nonlocal off
        size = struct.calcsize(fmt)
        vals = struct.unpack_from(fmt, blob, off)
        off += size
        return vals

    (count,) = take("<I")
    out = {}
    for _ in range(count):
        (name_len,) = take("<I")
        name = blob[off : off + name_len].decode()
        off += name_len
        (dtype_len,) = take("<I")
        dtype = blob[off : off + dtype_len].decode()
        off += dtype_len
        (ndim,) = take("<I")
        shape = take(f"<{ndim}q") if ndim else ()
        (nbytes,) = take("<Q")
        arr = np.frombuffer(blob[off : off + nbytes], dtype=np.dtype(dtype).newbyteorder("<"))
        off += nbytes
        out[name] = torch.from_numpy(arr.reshape(shape).copy())
    return out


def content_hash(blob: bytes) -> str:
    return hashlib.sha256(blob).hexdigest()


def component_manifest(name: str, version: str, geometry: dict, metric: dict, digest: str = "") -> dict:
    return {
        "name": name,
        "version": version,
        "geometry": geometry,
        "metric": metric,
        "content_hash": digest,
    }


@dataclass
class ModelBundle:
    """The five pluggable models plus their manifests."""

    denoiser: object
    codec: Codec
    text_encoder: object
    image_encoder: object
    segmenter: object
    manifests: dict = field(default_factory=dict)

    def check_geometry(self) -> None:
        """Fail loudly if components disagree on image/latent geometry."""
        size = self.segmenter.image_size
        latent = self.codec.latent_shape_for((size, size, 3))
        if tuple(self.denoiser.latent_shape) != tuple(latent):
            raise BundleGeometryError(
                f"denoiser latent {self.denoiser.latent_shape} != codec latent {latent} "
                f"for {size}x{size} images"
            )
        if self.text_encoder.dim != self.image_encoder.dim:
            raise BundleGeometryError(
                f"text dim {self.text_encoder.dim} != image dim {self.image_encoder.dim}"
            )

    @property
    def image_size(self) -> int:
        return self.segmenter.image_size

    def train_schedule(self) -> NoiseSchedule:
        return schedule_from_json(self.denoiser.schedule_json)

    def guidance_encoders(self) -> GuidanceEncoders:
        from .models import perceptual_distance

        return GuidanceEncoders(
            image_encoder=self.image_encoder.embed,
            perceptual=lambda a, b: perceptual_distance(self.image_encoder, a, b),
        )


def _component_tensors(name: str, bundle: ModelBundle) -> dict:
    from .models import ToyCodec

    if name == "denoiser":
        return bundle.denoiser.net.state_dict()
    if name == "codec":
        if isinstance(bundle.codec, IdentityCodec):
            return {}
        assert isinstance(bundle.codec, ToyCodec)
        tensors = {f"net.{k}": v for k, v in bundle.codec.net.state_dict().items()}
        tensors["latent_mean"] = bundle.codec.latent_mean
        tensors["latent_std"] = bundle.codec.latent_std
        return tensors
    if name == "text_encoder":
        return bundle.text_encoder.state_dict()
    if name == "image_encoder":
        return bundle.image_encoder.state_dict()
    if name == "segmenter":
        return bundle.segmenter.modules().state_dict()
    raise KeyError(name)


def save_bundle(bundle: ModelBundle, root) -> None:
    root = Path(root)
    for name in COMPONENTS:
        cdir = root / name
        cdir.mkdir(parents=True, exist_ok=True)
        blob = serialize_tensors(_component_tensors(name, bundle))
        manifest = dict(bundle.manifests.get(name) or component_manifest(name, "0.1.0", {}, {}))
        manifest["content_hash"] = content_hash(blob)
        (cdir / "weights.bin").write_bytes(blob)
        (cdir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
        bundle.manifests[name] = manifest


def _load_component_file(cdir: Path) -> tuple:
    manifest = json.loads((cdir / "manifest.json").read_text())
    blob = (cdir / "weights.bin").read_bytes()
    digest = content_hash(blob)
    if manifest.get("content_hash") and manifest["content_hash"] != digest:
        raise ModelLoadError(f"content hash mismatch for {cdir.name}: manifest says "
                             f"{manifest['content_hash'][:12]}…, file is {digest[:12]}…")
    return manifest, deserialize_tensors(blob)


def load_codec_component(cdir) -> Codec:
    """Load a codec from a component directory (also the external adapter)."""
    from .models import ToyCodec

    cdir = Path(cdir)
    if not (cdir / "manifest.json").exists():
        raise ModelLoadError(f"no codec manifest under {cdir}")
    manifest, tensors = _load_component_file(cdir)
    kind = manifest.get("geometry", {}).get("kind", "toy")
    if kind == "identity":
        return IdentityCodec()
    codec = ToyCodec()
    codec.net.load_state_dict(
        {k[len("net.") :]: v for k, v in tensors.items() if k.startswith("net.")}
    )
    codec.set_normalization(tensors["latent_mean"], tensors["latent_std"])
    return codec


def load_bundle(root) -> ModelBundle:
    from .models import SegDecoder, ToyBackbone, ToyDenoiser, ToyImageEncoder, ToySegmenter, ToyTextEncoder

    root = Path(root)
    if not root.exists():
        raise ModelLoadError(f"bundle directory {root} does not exist")
    manifests = {}
    tensors = {}
    for name in COMPONENTS:
        cdir = root / name
        if not cdir.exists():
            raise ModelLoadError(f"bundle at {root} is missing component {name!r}")
        manifests[name], tensors[name] = _load_component_file(cdir)

    den_geo = manifests["denoiser"]["geometry"]
    denoiser = ToyDenoiser(
        tuple(den_geo["latent"]), den_geo["schedule"], base=int(den_geo.get("base", 48))
    )
    denoiser.net.load_state_dict(tensors["denoiser"])

    codec = load_codec_component(root / "codec")

    text_encoder = ToyTextEncoder(dim=int(manifests["text_encoder"]["geometry"].get("dim", 64)))
    text_encoder.load_state_dict(tensors["text_encoder"])
    image_encoder = ToyImageEncoder(dim=int(manifests["image_encoder"]["geometry"].get("dim", 64)))
    image_encoder.load_state_dict(tensors["image_encoder"])

    seg_geo = manifests["segmenter"]["geometry"]
    backbone = ToyBackbone(
        image_size=int(seg_geo.get("image_size", IMAGE_SIZE)),
        patch_size=int(seg_geo.get("patch_size", 4)),
        dim=int(seg_geo.get("dim", 64)),
        depth=int(seg_geo.get("depth", 10)),
    )
    decoder = SegDecoder(dim=backbone.dim, patch_size=backbone.patch_size)
    cfg = CalibrationConfig(
        extraction_layers=list(seg_geo.get("extraction_layers", [3, 7, 9])),
        embed_dim=backbone.dim,
        patch_size=backbone.patch_size,
        threshold=int(seg_geo.get("threshold", 150)),
    )
    segmenter = ToySegmenter(backbone, decoder, cfg)
    segmenter.modules().load_state_dict(tensors["segmenter"])

    bundle = ModelBundle(
        denoiser=denoiser,
        codec=codec,
        text_encoder=text_encoder,
        image_encoder=image_encoder,
        segmenter=segmenter,
        manifests=manifests,
    )
    bundle.check_geometry()
    for module in (denoiser.net, text_encoder, image_encoder, segmenter.modules()):
        module.eval()
    return bundle


def resolve_codec(name: str, bundle: ModelBundle) -> Codec:
    """Codec selection by config name: identity | toy | external:<path>."""
    if name == "identity":
        return IdentityCodec()
    if name == "toy":
        return bundle.codec
    if name.startswith("external:"):
        return load_codec_component(name[len("external:") :])
    raise ModelLoadError(f"unknown codec name {name!r}")
