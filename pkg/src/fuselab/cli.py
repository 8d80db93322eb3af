"""Command-line entry point: ``fuselab <subcommand> ...``.

Exit codes: 0 success, 1 validation/config error, 2 I/O error (argparse also
uses 2 for usage errors).
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import time
from datetime import datetime, timezone
from pathlib import Path

from . import __version__
from .data_model import (
    CLASS_ORDER,
    DefectClass,
    _dump,
    import_yolo_txt,
    load_dataset,
    load_detections,
    save_dataset,
    save_detections,
)
from .errors import ConfigError, FuselabError
from .evaluator import EvalConfig, draw_overlays, evaluate
from .fusion import EnsembleConfig, fuse, save_fused, summed_runtime
from .preprocess import PreprocessConfig, augment_dataset, parse_op, preprocess_pipeline
from .simulator import load_profiles, simulate
from .splitter import SplitSpec, balanced_split
from .tuner import TuneSpec, tune_weights

METHOD_ALIASES = {"grid": "grid", "coord": "coordinate_ascent", "coordinate_ascent": "coordinate_ascent", "proportional": "proportional"}
OBJECTIVE_ALIASES = {"map50": "map_50", "map_50": "map_50", "map50_95": "map_50_95", "map_50_95": "map_50_95", "accuracy": "accuracy"}


def _digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


class Manifest:
    def __init__(self, args, inputs):
        self.args = args
        self.inputs = [str(p) for p in inputs]
        self.start = datetime.now(timezone.utc)
        self.extra: dict = {}

    def write(self, path) -> None:
        config = {k: v for k, v in vars(self.args).items() if k != "func"}
        doc = {
            "tool_version": __version__,
            "subcommand": self.args.command,
            "config": json.loads(json.dumps(config, default=str)),
            "inputs": {p: _digest(p) for p in self.inputs},
            "start_time": self.start.isoformat(),
            "end_time": datetime.now(timezone.utc).isoformat(),
            **self.extra,
        }
        _dump(doc, path)


def _manifest_path(out: Path) -> Path:
    return out / "manifest.json" if out.is_dir() else out.with_name(out.name + ".manifest.json")


def _read_config(path) -> dict:
    with open(path, encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON: {exc.msg}") from None
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: expected a JSON object")
    return doc


def _float_list(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"expected comma-separated numbers, got {text!r}") from None


# --------------------------------------------------------------------------
# subcommands


def cmd_preprocess(args) -> None:
    config = PreprocessConfig()
    if args.config:
        config = PreprocessConfig.from_dict(_read_config(args.config))
    if args.size is not None:
        config = PreprocessConfig(args.size, args.size, config.binarize)
    if args.binarize:
        config = PreprocessConfig(config.width, config.height, True)
    manifest = Manifest(args, [args.dataset] + ([args.config] if args.config else []))
    dataset = load_dataset(args.dataset)
    out = Path(args.out)
    index, summary = preprocess_pipeline(dataset, config, out / "images")
    save_dataset(index, out / "dataset.json")
    _dump(summary.to_dict(), out / "summary.json")
    for image_id, reason in summary.failures.items():
        print(f"warning: {image_id}: {reason}", file=sys.stderr)
    manifest.write(out / "manifest.json")


def cmd_augment(args) -> None:
    ops = [parse_op(tok) for tok in args.ops.split(",") if tok.strip()]
    manifest = Manifest(args, [args.dataset])
    dataset = load_dataset(args.dataset)
    out = Path(args.out)
    index, summary = augment_dataset(dataset, ops, out / "images", args.seed, args.per_image, not args.no_originals)
    save_dataset(index, out / "dataset.json")
    _dump(summary.to_dict(), out / "summary.json")
    for image_id, reason in summary.failures.items():
        print(f"warning: {image_id}: {reason}", file=sys.stderr)
    manifest.write(out / "manifest.json")


def cmd_split(args) -> None:
    spec = SplitSpec(args.train, args.val, args.test, args.seed)
    manifest = Manifest(args, [args.dataset])
    result = balanced_split(load_dataset(args.dataset), spec)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for name, part in result.parts().items():
        save_dataset(part, out / f"{name}.json")
    _dump(result.allocation_report(), out / "allocation.json")
    manifest.write(out / "manifest.json")


def cmd_simulate(args) -> None:
    manifest = Manifest(args, [args.dataset, args.profiles])
    gt = load_dataset(args.dataset)
    profiles = load_profiles(args.profiles)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for dset in simulate(gt, profiles, args.seed):
        save_detections(dset, out / f"{dset.model_id}.json")
    manifest.write(out / "manifest.json")


def _ensemble_config(args, model_ids) -> EnsembleConfig:
    if args.config:
        base = EnsembleConfig.from_dict(_read_config(args.config))
        weights = dict(base.model_weights)
    else:
        base = EnsembleConfig.uniform(model_ids)
        weights = dict(base.model_weights)
    if getattr(args, "weights", None):
        weights = EnsembleConfig.from_raw_weights(model_ids, _float_list(args.weights)).model_weights
    match_iou = args.match_iou if args.match_iou is not None else base.match_iou
    accept = args.accept if args.accept is not None else base.accept_threshold
    nms_t = base.dedup_nms
    if args.nms is not None:
        nms_t = None if args.nms == 0 else args.nms
    return EnsembleConfig(weights, match_iou, accept, nms_t)


def cmd_fuse(args) -> None:
    inputs = list(args.dets) + ([args.config] if args.config else []) + ([args.gt] if args.gt else [])
    manifest = Manifest(args, inputs)
    sets = [load_detections(p) for p in args.dets]
    config = _ensemble_config(args, [s.model_id for s in sets])
    extra = set(config.models) - {s.model_id for s in sets}
    if extra:
        raise ConfigError(f"weights given for models with no detections file: {sorted(extra)}")
    dataset = load_dataset(args.gt) if args.gt else None
    start = time.perf_counter()
    fused = fuse(sets, config, dataset)
    fusion_seconds = time.perf_counter() - start
    out = Path(args.out)
    save_fused(fused, out, summed_runtime(sets))
    manifest.extra = {"resolved_ensemble_config": config.to_dict(), "fusion_seconds": fusion_seconds}
    manifest.write(_manifest_path(out))


def cmd_eval(args) -> None:
    manifest = Manifest(args, [args.gt, args.dets])
    gt = load_dataset(args.gt)
    dets = load_detections(args.dets)
    if args.coco_range:
        config = EvalConfig.coco(score_threshold=args.score_threshold)
    else:
        config = EvalConfig((args.iou,), args.score_threshold)
    report = evaluate(gt, dets, config)
    out = Path(args.out)
    report.save(out)
    if args.csv:
        report.save_csv(args.csv)
    if args.overlays:
        draw_overlays(gt, dets.detections, args.overlays)
    manifest.write(_manifest_path(out))


def cmd_tune(args) -> None:
    manifest = Manifest(args, [args.gt] + list(args.dets))
    gt = load_dataset(args.gt)
    sets = [load_detections(p) for p in args.dets]
    base = _ensemble_config(args, [s.model_id for s in sets])
    spec = TuneSpec(
        method=METHOD_ALIASES.get(args.method, args.method),
        objective=OBJECTIVE_ALIASES.get(args.objective, args.objective),
        resolution=args.resolution,
        max_rounds=args.max_rounds,
        step=args.step,
        score_threshold=args.score_threshold,
    )
    result = tune_weights(gt, sets, spec, base)
    out = Path(args.out)
    _dump(result.config.to_dict(), out)
    result.save_trace(out.with_name(out.stem + ".trace.csv"))
    manifest.extra = {"objective_value": result.objective}
    manifest.write(_manifest_path(out))


def cmd_import_yolo(args) -> None:
    manifest = Manifest(args, [])
    classes = [DefectClass.parse(c) for c in args.classes.split(",")] if args.classes else list(CLASS_ORDER)
    index = import_yolo_txt(args.images, args.labels, classes)
    out = Path(args.out)
    save_dataset(index, out)
    manifest.write(_manifest_path(out))


# --------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = argparse.ArgumentParser(prog="fuselab", description=__doc__.splitlines()[0], formatter_class=fmt)
    parser.add_argument("--version", action="version", version=f"fuselab {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("preprocess", help="grayscale, optionally binarize, and resize images", formatter_class=fmt)
    p.add_argument("--dataset", required=True, help="native dataset JSON")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--size", type=int, default=None, help="square target size in pixels (config or 600)")
    p.add_argument("--binarize", action="store_true", help="apply Otsu binarization")
    p.add_argument("--config", default=None, help="JSON document with width/height/binarize")
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("augment", help="write augmented copies of a (training) dataset", formatter_class=fmt)
    p.add_argument("--dataset", required=True, help="native dataset JSON")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--ops", required=True, help="comma list of rot90|rot180|rot270|flip_h|flip_v|brightness:F|rescale:F")
    p.add_argument("--seed", type=int, default=0, help="random seed")
    p.add_argument("--per-image", type=int, default=1, help="augmented copies per image")
    p.add_argument("--no-originals", action="store_true", help="leave original images out of the output index")
    p.set_defaults(func=cmd_augment)

    p = sub.add_parser("split", help="balanced train/val/test split", formatter_class=fmt)
    p.add_argument("--dataset", required=True, help="native dataset JSON")
    p.add_argument("--out", required=True, help="output path")
    p.add_argument("--train", type=float, default=0.70, help="train fraction")
    p.add_argument("--val", type=float, default=0.15, help="validation fraction")
    p.add_argument("--test", type=float, default=0.15, help="test fraction")
    p.add_argument("--seed", type=int, default=0, help="random seed")
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("simulate", help="generate synthetic detections from ground truth", formatter_class=fmt)
    p.add_argument("--dataset", required=True, help="native dataset JSON")
    p.add_argument("--profiles", required=True, help="JSON list of detector profiles")
    p.add_argument("--seed", type=int, default=0, help="random seed")
    p.add_argument("--out", required=True, help="output directory, one file per model")
    p.set_defaults(func=cmd_simulate)

    def ensemble_flags(p, with_weights=True):
        if with_weights:
            p.add_argument("--weights", default=None, help="comma list of weights in --dets order (normalized)")
        p.add_argument("--config", default=None, help="ensemble config JSON; flags override it")
        p.add_argument("--match-iou", type=float, default=None, help="cross-model match IoU (config or 0.5)")
        p.add_argument("--accept", type=float, default=None, help="acceptance threshold (config or 0.25)")
        p.add_argument("--nms", type=float, default=None, help="dedup NMS IoU threshold; 0 disables (config or off)")

    p = sub.add_parser("fuse", help="weighted consensus fusion of detection files", formatter_class=fmt)
    p.add_argument("--dets", nargs="+", required=True, help="detection files, one per model")
    ensemble_flags(p)
    p.add_argument("--gt", default=None, help="dataset used to validate image ids")
    p.add_argument("--out", required=True, help="output path")
    p.set_defaults(func=cmd_fuse)

    p = sub.add_parser("eval", help="evaluate detections against ground truth", formatter_class=fmt)
    p.add_argument("--gt", required=True, help="ground-truth dataset")
    p.add_argument("--dets", required=True, help="detections file to score")
    group = p.add_mutually_exclusive_group()
    group.add_argument("--iou", type=float, default=0.5, help="single IoU threshold")
    group.add_argument("--coco-range", action="store_true", help="IoU thresholds 0.50:0.05:0.95")
    p.add_argument("--score-threshold", type=float, default=0.5, help="score cut for confusion metrics")
    p.add_argument("--overlays", default=None, help="directory for annotated PNG overlays")
    p.add_argument("--csv", default=None, help="optional per-class AP CSV path")
    p.add_argument("--out", required=True, help="output path")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("tune", help="tune ensemble weights on a validation set", formatter_class=fmt)
    p.add_argument("--gt", required=True, help="validation dataset")
    p.add_argument("--dets", nargs="+", required=True, help="detection files, one per model")
    p.add_argument("--method", choices=sorted(METHOD_ALIASES), default="grid", help="search method")
    p.add_argument("--objective", choices=sorted(OBJECTIVE_ALIASES), default="map50", help="metric to maximize")
    p.add_argument("--resolution", type=float, default=0.05, help="grid resolution")
    p.add_argument("--step", type=float, default=0.05, help="coordinate-ascent step")
    p.add_argument("--max-rounds", type=int, default=20, help="coordinate-ascent rounds")
    p.add_argument("--score-threshold", type=float, default=0.5, help="score cut for the accuracy objective")
    ensemble_flags(p, with_weights=False)
    p.add_argument("--out", required=True, help="winning ensemble config JSON")
    p.set_defaults(func=cmd_tune)

    p = sub.add_parser("import-yolo", help="build a dataset from YOLO txt labels", formatter_class=fmt)
    p.add_argument("--images", required=True, help="image directory")
    p.add_argument("--labels", required=True, help="YOLO label directory")
    p.add_argument("--classes", default=None, help="comma list mapping class index to defect class")
    p.add_argument("--out", required=True, help="output path")
    p.set_defaults(func=cmd_import_yolo)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr)
    try:
        args.func(args)
    except FuselabError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
