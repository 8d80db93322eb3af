"""End-to-end CLI walk-through on synthetic boards written as PNG files.

Creates WORKDIR with a dataset, then runs preprocess, augment, split,
simulate, tune, fuse and eval through the ``fuselab`` entry point.
"""

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from fuselab.cli import main as cli
from fuselab.data_model import DatasetIndex, ImageRecord, save_dataset
from fuselab.preprocess import RasterImage, write_image
from fuselab.simulator import synthetic_dataset

PROFILES = [
    {"model_id": "yolo_like", "miss_rate": 0.10, "fp_per_image": 0.5, "per_image_runtime": 0.020},
    {"model_id": "frcnn_like", "miss_rate": 0.15, "fp_per_image": 1.0, "per_image_runtime": 0.090},
    {"model_id": "ssd_like", "miss_rate": 0.20, "fp_per_image": 1.0, "per_image_runtime": 0.030},
    {"model_id": "retina_like", "miss_rate": 0.30, "fp_per_image": 1.5, "per_image_runtime": 0.060},
]


def render(img: ImageRecord, rng) -> RasterImage:
    px = np.full((img.height, img.width, 3), (40, 110, 60), dtype=np.uint8)
    px = np.clip(px + rng.integers(-12, 13, size=px.shape), 0, 255).astype(np.uint8)
    for obj in img.objects:
        b = obj.bbox
        px[int(b.y_min):int(b.y_max), int(b.x_min):int(b.x_max)] = (200, 170, 90)
    return RasterImage(px)


def step(*argv):
    print("$ fuselab", " ".join(str(a) for a in argv))
    code = cli([str(a) for a in argv])
    if code:
        sys.exit(code)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("workdir", type=Path)
    ap.add_argument("--images", type=int, default=60)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)
    wd = args.workdir
    (wd / "raw").mkdir(parents=True, exist_ok=True)

    gt = synthetic_dataset(args.images, args.seed, width=320, height=240, size_range=(12, 40), defect_free_fraction=0.1)
    rng = np.random.default_rng(args.seed)
    records = []
    for img in gt.images:
        path = wd / "raw" / f"{img.id}.png"
        write_image(render(img, rng), path)
        records.append(ImageRecord(img.id, str(path), img.width, img.height, img.objects))
    save_dataset(DatasetIndex(tuple(records)), wd / "dataset.json")
    (wd / "profiles.json").write_text(json.dumps(PROFILES, indent=2))

    step("preprocess", "--dataset", wd / "dataset.json", "--out", wd / "pre", "--size", 256)
    step("split", "--dataset", wd / "pre" / "dataset.json", "--out", wd / "split", "--seed", args.seed)
    step("augment", "--dataset", wd / "split" / "train.json", "--out", wd / "aug", "--ops", "rot90,flip_h,brightness:1.2", "--seed", args.seed)
    for part in ("val", "test"):
        step("simulate", "--dataset", wd / "split" / f"{part}.json", "--profiles", wd / "profiles.json", "--seed", args.seed, "--out", wd / "sim" / part)
    models = [p["model_id"] for p in PROFILES]
    step("tune", "--gt", wd / "split" / "val.json", "--dets", *[wd / "sim" / "val" / f"{m}.json" for m in models],
         "--resolution", 0.25, "--nms", 0.5, "--out", wd / "ensemble.json")
    step("fuse", "--dets", *[wd / "sim" / "test" / f"{m}.json" for m in models], "--config", wd / "ensemble.json",
         "--gt", wd / "split" / "test.json", "--out", wd / "fused.json")
    step("eval", "--gt", wd / "split" / "test.json", "--dets", wd / "fused.json", "--coco-range", "--out", wd / "report.json")

    report = json.loads((wd / "report.json").read_text())
    print(f"\ntest mAP@0.5 {report['map_50']:.4f}  mAP@[.5:.95] {report['map_50_95']:.4f}  accuracy {report['accuracy']:.4f}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
