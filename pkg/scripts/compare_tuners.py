"""Compare the three weight-tuning methods on simulated validation/test splits."""

import argparse
import sys
import time

from fuselab.evaluator import map_at
from fuselab.fusion import EnsembleConfig, fuse, to_detection_set
from fuselab.simulator import SimModelProfile, simulate, synthetic_dataset
from fuselab.splitter import SplitSpec, balanced_split
from fuselab.tuner import TuneSpec, tune_weights

from ensemble_gain_study import FP, MISS, restrict


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--images", type=int, default=300)
    ap.add_argument("--objective", default="map_50", choices=("map_50", "map_50_95", "accuracy"))
    args = ap.parse_args(argv)

    profiles = [SimModelProfile(f"m{i}", miss_rate=m, fp_per_image=f) for i, (m, f) in enumerate(zip(MISS, FP))]
    gt = synthetic_dataset(args.images, args.seed, defect_free_fraction=0.05)
    sets = simulate(gt, profiles, args.seed)
    split = balanced_split(gt, SplitSpec(0.70, 0.15, 0.15, args.seed))
    val_sets = [restrict(split.val, s) for s in sets]
    test_sets = [restrict(split.test, s) for s in sets]
    base = EnsembleConfig.uniform([p.model_id for p in profiles], dedup_nms=0.5)

    specs = {
        "uniform": None,
        "proportional": TuneSpec(method="proportional", objective=args.objective),
        "grid@0.1": TuneSpec(method="grid", resolution=0.1, objective=args.objective),
        "coord@0.05": TuneSpec(method="coordinate_ascent", step=0.05, objective=args.objective),
    }
    print(f"{'method':<14}{'val obj':>9}{'test mAP50':>12}{'secs':>7}  weights")
    for name, spec in specs.items():
        start = time.perf_counter()
        if spec is None:
            config, val_obj = base, float("nan")
        else:
            res = tune_weights(split.val, val_sets, spec, base)
            config, val_obj = res.config, res.objective
        test = map_at(split.test, to_detection_set(fuse(test_sets, config)).detections, 0.5)
        weights = ", ".join(f"{w:.2f}" for w in config.model_weights.values())
        print(f"{name:<14}{val_obj:>9.4f}{test:>12.4f}{time.perf_counter() - start:>7.2f}  [{weights}]")
    return 0


if __name__ == "__main__":
    sys.exit(main())
