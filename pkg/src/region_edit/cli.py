"""Command-line surface: edit, mask preview, toy training, eval, serve.

Exit codes: 0 success, 1 usage, 2 model-load failure, 3 no-op mask,
4 guidance divergence. Precedence of settings: flags > --config file >
environment (REGION_EDIT_BUNDLE) > built-in defaults.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import imgio
from .errors import GuidanceDivergenceError, ModelLoadError
from .guidance import GuidanceParams
from .metrics import evaluate_edits
from .sampler import EditParams, run_edit
from .toyzoo import training
from .toyzoo.bundle import load_bundle, save_bundle
from .toyzoo.data import generate_dataset
from .toyzoo.models import perceptual_distance

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_MODEL_LOAD = 2
EXIT_NO_OP_MASK = 3
EXIT_DIVERGENCE = 4

SWEEP_THRESHOLDS = (0, 50, 100, 150, 200, 250)


class _Parser(argparse.ArgumentParser):
    """argparse defaults to exit code 2 on usage errors; we reserve 2 for
    model-load failures, so usage errors exit 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _build_parser() -> _Parser:
    parser = _Parser(prog="region-edit", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--bundle", help="bundle directory (default: $REGION_EDIT_BUNDLE)")
        p.add_argument("--config", help="JSON config file with default settings")
        p.add_argument("--json", action="store_true", help="machine-readable JSON output")

    p_edit = sub.add_parser("edit", help="run one text-driven regional edit")
    p_edit.add_argument("--image", required=True)
    p_edit.add_argument("--pos-text", required=True, help="positioning text t1")
    p_edit.add_argument("--target-text", required=True, help="target text t2")
    p_edit.add_argument("--steps", type=int)
    p_edit.add_argument("--cfg-scale", type=float)
    p_edit.add_argument("--grad-scale", type=float)
    p_edit.add_argument("--threshold", type=int)
    p_edit.add_argument("--lambda1", type=float)
    p_edit.add_argument("--lambda2", type=float)
    p_edit.add_argument("--seed", type=int)
    p_edit.add_argument("--codec", help="identity | toy | external:<path>")
    p_edit.add_argument("--no-blend", action="store_true", help="ablation: disable latent blending")
    p_edit.add_argument("--no-nerp", action="store_true", help="ablation: disable preservation loss")
    p_edit.add_argument("--out", default="edit_output")
    common(p_edit)

    p_mask = sub.add_parser("mask", help="segmentation-only mask preview")
    p_mask.add_argument("--image", required=True)
    p_mask.add_argument("--pos-text", required=True)
    p_mask.add_argument("--threshold", type=int)
    p_mask.add_argument("--sweep", action="store_true", help="emit masks over a threshold sweep plus an area CSV")
    p_mask.add_argument("--out", default="mask_output")
    common(p_mask)

    p_train = sub.add_parser("train", help="train toy components")
    p_train.add_argument("component", choices=["codec", "denoiser", "embedder", "segmenter", "all"])
    p_train.add_argument("--seed", type=int, default=0)
    p_train.add_argument("--samples", type=int, default=2048)
    p_train.add_argument("--epochs", type=int, help="override the component's default epoch count")
    p_train.add_argument("--out", default="bundle")
    common(p_train)

    p_eval = sub.add_parser("eval", help="metric report over an edit suite")
    p_eval.add_argument("--edited", required=True)
    p_eval.add_argument("--originals", required=True)
    p_eval.add_argument("--masks", required=True)
    p_eval.add_argument("--prompt", required=True)
    p_eval.add_argument("--out", help="write the report JSON here as well")
    common(p_eval)

    p_serve = sub.add_parser("serve", help="run the HTTP job service")
    p_serve.add_argument("--port", type=int)
    p_serve.add_argument("--data-dir")
    p_serve.add_argument("--workers", type=int, default=1)
    p_serve.add_argument("--studio-dir", help="serve built studio assets under /studio")
    common(p_serve)

    return parser


def _load_config(path) -> dict:
    if not path:
        return {}
    try:
        return json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from None


class UsageError(Exception):
    pass


def _setting(flag, config: dict, key: str, default):
    if flag is not None:
        return flag
    if key in config:
        return config[key]
    return default


def _resolve_bundle_path(args, config: dict):
    return _setting(args.bundle, config, "bundle", os.environ.get("REGION_EDIT_BUNDLE"))


def _load_bundle_or_exit(args, config: dict):
    path = _resolve_bundle_path(args, config)
    if not path:
        print("error: no bundle given (use --bundle, config, or REGION_EDIT_BUNDLE)", file=sys.stderr)
        raise SystemExit(EXIT_MODEL_LOAD)
    try:
        return load_bundle(path)
    except Exception as exc:
        print(f"error: failed to load bundle at {path}: {exc}", file=sys.stderr)
        raise SystemExit(EXIT_MODEL_LOAD) from None


def _edit_params(args, config: dict, parser) -> EditParams:
    threshold = int(_setting(args.threshold, config, "threshold", 150))
    if not 0 <= threshold <= 255:
        parser.error(f"--threshold must be in [0, 255], got {threshold}")
    steps = int(_setting(args.steps, config, "steps", 100))
    if steps < 1:
        parser.error(f"--steps must be >= 1, got {steps}")
    guidance = GuidanceParams(
        cfg_scale=float(_setting(args.cfg_scale, config, "cfg_scale", 5.0)),
        grad_scale=float(_setting(args.grad_scale, config, "grad_scale", 150.0)),
        lambda1=float(_setting(args.lambda1, config, "lambda1", 0.5)),
        lambda2=float(_setting(args.lambda2, config, "lambda2", 0.5)),
    )
    return EditParams(
        steps=steps,
        guidance=guidance,
        threshold=threshold,
        seed=int(_setting(args.seed, config, "seed", 0)),
        codec=str(_setting(args.codec, config, "codec", "toy")),
        use_blend=not args.no_blend,
        use_nerp=not args.no_nerp,
    )


def _cmd_edit(args, parser) -> int:
    config = _load_config(args.config)
    params = _edit_params(args, config, parser)
    if not Path(args.image).exists():
        parser.error(f"image {args.image} does not exist")
    bundle = _load_bundle_or_exit(args, config)
    x0 = imgio.load_image_png(args.image)
    try:
        result = run_edit(x0, args.pos_text, args.target_text, params, bundle)
    except GuidanceDivergenceError as exc:
        print(f"error: guidance divergence at step {exc.step}: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    imgio.save_image_png(result.image, out / "result.png")
    imgio.save_mask_png(result.mask, out / "mask.png")
    imgio.save_soft_png(result.soft_mask, out / "soft_mask.png")
    (out / "trace.jsonl").write_text(result.trace_jsonl())
    request = {"t1": args.pos_text, "t2": args.target_text, **params.to_json()}
    (out / "params.json").write_text(json.dumps(request, indent=2) + "\n")

    summary = {
        "out": str(out),
        "no_op_mask": result.no_op_mask,
        "mask_area_fraction": float(result.mask.mean()),
        "duration_s": result.duration_s,
        "final_clip_loss": result.trace[-1]["clip_loss"] if result.trace else None,
        "final_nerp_loss": result.trace[-1]["nerp_loss"] if result.trace else None,
    }
    if args.json:
        print(json.dumps(summary))
    else:
        print(f"wrote {out}/result.png (mask area {summary['mask_area_fraction']:.3f}, "
              f"{result.duration_s:.1f}s)")
        if result.no_op_mask:
            print("note: the positioning text matched nothing (no-op mask)")
    return EXIT_NO_OP_MASK if result.no_op_mask else EXIT_OK


def _cmd_mask(args, parser) -> int:
    config = _load_config(args.config)
    threshold = int(_setting(args.threshold, config, "threshold", 150))
    if not 0 <= threshold <= 255:
        parser.error(f"--threshold must be in [0, 255], got {threshold}")
    if not Path(args.image).exists():
        parser.error(f"image {args.image} does not exist")
    bundle = _load_bundle_or_exit(args, config)
    x0 = imgio.load_image_png(args.image)
    soft = bundle.segmenter.soft_mask(x0, args.pos_text)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    imgio.save_soft_png(soft, out / "soft_mask.png")
    mask = (soft >= threshold).astype(np.uint8)
    imgio.save_mask_png(mask, out / "mask.png")
    summary = {"out": str(out), "threshold": threshold, "area_fraction": float(mask.mean())}

    if args.sweep:
        areas = []
        for k in range(256):
            areas.append((k, float((soft >= k).mean())))
        with open(out / "area_vs_threshold.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["threshold", "area_fraction"])
            writer.writerows(areas)
        for k in SWEEP_THRESHOLDS:
            imgio.save_mask_png((soft >= k).astype(np.uint8), out / f"mask_k{k:03d}.png")
        summary["sweep"] = {str(k): float((soft >= k).mean()) for k in SWEEP_THRESHOLDS}

    print(json.dumps(summary) if args.json else
          f"wrote {out}/mask.png (area {summary['area_fraction']:.3f} at K={threshold})")
    return EXIT_OK


def _cmd_train(args, parser) -> int:
    config = _load_config(args.config)
    out = Path(_setting(None, config, "out", args.out))
    seed = args.seed
    say = (lambda msg: None) if args.json else print

    if args.component == "all":
        bundle = training.train_all(seed, n_samples=args.samples, out_dir=str(out), log=say)
        manifests = bundle.manifests
    else:
        dataset = generate_dataset(args.samples, seed)
        bundle_dir = out
        kwargs = {"epochs": args.epochs} if args.epochs else {}
        if args.component == "codec":
            codec, manifest = training.train_codec(dataset, seed=seed, **kwargs)
            _save_single(bundle_dir, "codec", codec=codec, manifest=manifest)
            manifests = {"codec": manifest}
        elif args.component == "denoiser":
            codec = _existing_codec(bundle_dir)
            from .schedule import make_linear_schedule

            schedule = make_linear_schedule(1000, 1e-4, 0.02)
            model, manifest = training.train_denoiser(dataset, schedule, seed=seed, codec=codec, **kwargs)
            _save_single(bundle_dir, "denoiser", denoiser=model, manifest=manifest)
            manifests = {"denoiser": manifest}
        elif args.component == "embedder":
            text, image, m_text, m_image = training.train_embedder(dataset, seed=seed, **kwargs)
            _save_single(bundle_dir, "text_encoder", text_encoder=text, manifest=m_text)
            _save_single(bundle_dir, "image_encoder", image_encoder=image, manifest=m_image)
            manifests = {"text_encoder": m_text, "image_encoder": m_image}
        else:
            segmenter, manifest = training.train_segmenter(dataset, seed=seed, **kwargs)
            _save_single(bundle_dir, "segmenter", segmenter=segmenter, manifest=manifest)
            manifests = {"segmenter": manifest}

    summary = {
        "out": str(out),
        "seed": seed,
        "metrics": {k: m["metric"] for k, m in manifests.items()},
        "hashes": {k: m["content_hash"] for k, m in manifests.items()},
    }
    if args.json:
        print(json.dumps(summary))
    else:
        for name, manifest in manifests.items():
            print(f"{name}: {manifest['metric']} hash={manifest['content_hash'][:12]}")
    return EXIT_OK


def _existing_codec(bundle_dir: Path):
    from .codec import IdentityCodec
    from .toyzoo.bundle import load_codec_component

    codec_dir = bundle_dir / "codec"
    if codec_dir.exists():
        return load_codec_component(codec_dir)
    return IdentityCodec()


def _save_single(bundle_dir: Path, name: str, manifest: dict, **component) -> None:
    from .toyzoo.bundle import content_hash, serialize_tensors, _component_tensors

    class _Shim:
        pass

    shim = _Shim()
    for key in ("denoiser", "codec", "text_encoder", "image_encoder", "segmenter"):
        setattr(shim, key, component.get(key))
    blob = serialize_tensors(_component_tensors(name, shim))
    cdir = bundle_dir / name
    cdir.mkdir(parents=True, exist_ok=True)
    manifest = dict(manifest)
    manifest["content_hash"] = content_hash(blob)
    (cdir / "weights.bin").write_bytes(blob)
    (cdir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


def _load_image_dir(path: str) -> dict:
    files = sorted(Path(path).glob("*.png"))
    if not files:
        raise UsageError(f"no PNG files under {path}")
    return {f.name: f for f in files}


def _cmd_eval(args, parser) -> int:
    config = _load_config(args.config)
    bundle = _load_bundle_or_exit(args, config)
    try:
        edited = _load_image_dir(args.edited)
        originals = _load_image_dir(args.originals)
        masks = _load_image_dir(args.masks)
    except UsageError as exc:
        parser.error(str(exc))
    names = sorted(set(edited) & set(originals) & set(masks))
    if not names:
        parser.error("no filenames shared by --edited, --originals, and --masks")
    report = evaluate_edits(
        originals=[imgio.load_image_png(originals[n]) for n in names],
        edited=[imgio.load_image_png(edited[n]) for n in names],
        masks=[imgio.load_mask_png(masks[n]) for n in names],
        prompt=args.prompt,
        text_encoder=bundle.text_encoder,
        image_encoder=bundle.image_encoder,
        perceptual_metric=lambda a, b: perceptual_distance(bundle.image_encoder, a, b),
    )
    payload = report.to_json()
    payload["n_images"] = len(names)
    text = json.dumps(payload, indent=None if args.json else 2)
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)
    return EXIT_OK


def _cmd_serve(args, parser) -> int:
    config = _load_config(args.config)
    from .service import create_app, serve

    path = _resolve_bundle_path(args, config)
    try:
        app = create_app(
            bundle_path=path,
            data_dir=_setting(args.data_dir, config, "data_dir", None),
            workers=args.workers,
            studio_dir=args.studio_dir,
        )
    except (ModelLoadError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MODEL_LOAD
    serve(app, port=args.port)
    return EXIT_OK


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "edit":
            return _cmd_edit(args, parser)
        if args.command == "mask":
            return _cmd_mask(args, parser)
        if args.command == "train":
            return _cmd_train(args, parser)
        if args.command == "eval":
            return _cmd_eval(args, parser)
        if args.command == "serve":
            return _cmd_serve(args, parser)
    except UsageError as exc:
        parser.error(str(exc))
    parser.error(f"unknown command {args.command!r}")
    return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
