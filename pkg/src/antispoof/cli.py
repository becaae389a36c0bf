"""Command-line entry point: ``antispoof <command> ...``.

Exit status is 0 on success, 2 on usage errors and 1 on runtime errors.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import archive, data, explain, training
from .imaging import read_image, resize_bilinear, to_uint8, write_image
from .models import PRESETS, ModelSpec, SpecError, build_model, parameter_count


class UsageError(Exception):
    pass


def load_config(path: str | Path) -> tuple[ModelSpec, training.TrainConfig]:
    """Parse ``{"model": <spec fields or preset name>, "train": <TrainConfig fields>}``."""
    try:
        cfg = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(cfg, dict):
        raise UsageError("config must be a JSON object")
    unknown = set(cfg) - {"model", "train"}
    if unknown:
        raise UsageError(f"unknown config keys: {sorted(unknown)}")
    model_part = cfg.get("model", "light_tiny")
    try:
        if isinstance(model_part, str):
            if model_part not in PRESETS:
                raise UsageError(f"unknown preset {model_part!r}; choose from {sorted(PRESETS)}")
            spec = PRESETS[model_part]()
        else:
            spec = ModelSpec.from_dict(model_part)
        train_cfg = training.TrainConfig.from_dict(cfg.get("train", {}))
    except (SpecError, ValueError, TypeError) as exc:
        raise UsageError(f"invalid config: {exc}") from exc
    return spec, train_cfg


def _cmd_prep(args) -> None:
    manifest, report = data.prepare_crops(args.source, args.out, policy=args.policy, size=args.size, stride=args.stride)
    print(f"frames={report.frames_in} crops={report.crops_out} rejected={report.rejections}")
    print(json.dumps(manifest.summary, sort_keys=True))


def _cmd_split(args) -> None:
    try:
        holdout = {int(s) for s in args.holdout.split(",") if s.strip()}
    except ValueError as exc:
        raise UsageError(f"--holdout expects comma-separated subject ids: {exc}") from exc
    manifest = data.read_manifest(args.manifest)
    parts = data.split_manifest(manifest, holdout, args.train_frac, args.seed)
    out = Path(args.manifest).parent
    for name, part in parts.items():
        data.write_manifest(part, out / f"{name}.jsonl")
        print(f"{name}: {len(part)} records, subjects {sorted(part.subjects)}")


def _cmd_train(args) -> None:
    spec, cfg = load_config(args.config)
    root = Path(args.data)
    paths = {k: root / f"{k}.jsonl" for k in ("train", "val", "test")}
    for k in ("train", "val"):
        if not paths[k].is_file():
            raise UsageError(f"{paths[k]} not found; run `antispoof split` first")
    train_m = data.read_manifest(paths["train"])
    val_m = data.read_manifest(paths["val"])
    test_m = data.read_manifest(paths["test"]) if paths["test"].is_file() else None
    model = build_model(spec, seed=cfg.seed)
    result = training.train(model, train_m, val_m, cfg, test_manifest=test_m)
    out = Path(args.out)
    archive.save_model(model, out)
    training.write_history_csv(result.history, out.with_suffix(".history.csv"))
    print(f"saved {out} ({parameter_count(model)} parameters); best epoch {result.best_epoch} val_f1={result.best_val_f1}")


def _cmd_eval(args) -> None:
    model = archive.load_model(args.model)
    manifest = data.read_manifest(args.manifest)
    report = training.evaluate(model, manifest, args.threshold, artifact_prefix=args.artifacts)
    print(report.confusion_text(), end="")


def _input_image(model, path) -> np.ndarray:
    h, w, _ = model.spec.input_shape
    pixels = read_image(path)
    if pixels.shape[:2] != (h, w):
        pixels = to_uint8(resize_bilinear(pixels, h, w))
    return pixels


def _cmd_explain(args) -> None:
    model = archive.load_model(args.model)
    if args.method == "kernels":
        grid = explain.dump_kernels(model, args.layer or "block_0/conv")
        write_image(args.out, grid.image)
        print(f"{grid.n_tiles} tiles in a {grid.rows}x{grid.cols} grid")
        return
    pixels = _input_image(model, args.image)
    x = pixels.astype(np.float32) / 255.0
    if args.method == "gradcam":
        heat = explain.grad_cam(model, x, args.layer, args.target_class)
    else:
        heat = explain.saliency(model, x, args.target_class)
    write_image(args.out, explain.overlay(heat, pixels, args.alpha))
    print(f"{args.method} map from {heat.source_layer} written to {args.out}")


def _cmd_quantize(args) -> None:
    model = archive.load_model(args.model)
    archive.write_archive(archive.quantize_model(model), args.out)
    print(archive.format_size_report(archive.size_report(args.model, args.out)))


def _cmd_inspect(args) -> None:
    arch = archive.read_archive(args.model)
    spec = arch.spec
    print(f"format version : {archive.VERSION}")
    if spec is not None:
        print(f"family         : {spec.family}  input {spec.input_shape}  alpha {spec.alpha}")
        print(f"backbone blocks: {len(spec.backbone)}  head {[h.units for h in spec.head]}")
    print(f"quantized      : {arch.quantized}")
    print(f"parameters     : {arch.parameter_count()}")
    print(f"tensors        : {len(arch.tensors)}")
    print(f"file bytes     : {Path(args.model).stat().st_size}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="antispoof", description="RGB face anti-spoofing toolkit")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prep", help="crop faces from frame directories and build a manifest")
    p.add_argument("--source", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--policy", choices=("reject_multi", "largest_only"), default="reject_multi")
    p.add_argument("--size", type=int, default=96)
    p.add_argument("--stride", type=int, default=1)
    p.set_defaults(func=_cmd_prep)

    p = sub.add_parser("split", help="person-disjoint train/val/test split")
    p.add_argument("--manifest", required=True)
    p.add_argument("--holdout", required=True, help="comma-separated subject ids")
    p.add_argument("--train-frac", type=float, default=0.8)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_split)

    p = sub.add_parser("train", help="train a model from a JSON config")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True, help="directory holding train.jsonl and val.jsonl")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="evaluate a model on a manifest")
    p.add_argument("--model", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--artifacts", help="prefix for confusion-matrix .txt/.ppm files")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("explain", help="Grad-CAM, saliency or kernel-grid images")
    p.add_argument("--model", required=True)
    p.add_argument("--image")
    p.add_argument("--method", choices=("gradcam", "saliency", "kernels"), required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--layer")
    p.add_argument("--target-class", type=int, choices=(0, 1), default=1)
    p.add_argument("--alpha", type=float, default=0.5)
    p.set_defaults(func=_cmd_explain)

    p = sub.add_parser("quantize", help="int8 post-training quantization")
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_quantize)

    p = sub.add_parser("inspect", help="summarize a model archive")
    p.add_argument("--model", required=True)
    p.set_defaults(func=_cmd_inspect)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    if args.command == "explain" and args.method != "kernels" and not args.image:
        parser.print_usage(sys.stderr)
        print("antispoof explain: --image is required for gradcam and saliency", file=sys.stderr)
        return 2
    try:
        args.func(args)
    except UsageError as exc:
        print(f"antispoof {args.command}: {exc}", file=sys.stderr)
        return 2
    except (archive.ArchiveError, data.DataError, training.TrainingError, explain.ExplainError,
            SpecError, OSError, ValueError) as exc:
        print(f"antispoof {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
