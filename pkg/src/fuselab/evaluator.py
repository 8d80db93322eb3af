"""Detection metrics: greedy IoU matching, AP/mAP, confusion counts, timing."""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field
from typing import Mapping, Sequence

from .data_model import (
    CLASS_ORDER,
    DatasetIndex,
    DefectClass,
    Detection,
    DetectionSet,
    GroundTruthObject,
    _dump,
    check_detections_against,
)
from .errors import ConfigError, EvaluationError
from .geometry import BoundingBox, iou

EVAL_FORMAT = "fuselab-eval/1"
COCO_THRESHOLDS: tuple[float, ...] = tuple(t / 100 for t in range(50, 100, 5))


def threshold_key(t: float) -> str:
    return f"{t:.2f}"


@dataclass(frozen=True)
class EvalConfig:
    iou_thresholds: tuple[float, ...] = (0.5,)
    score_threshold: float = 0.5
    classes: tuple[DefectClass, ...] = CLASS_ORDER

    def __post_init__(self):
        ts = tuple(float(t) for t in self.iou_thresholds)
        if not ts:
            raise ConfigError("at least one IoU threshold is required")
        if any(not (0.0 < t <= 1.0) for t in ts):
            raise ConfigError(f"IoU thresholds must lie in (0, 1], got {ts}")
        if any(b <= a for a, b in zip(ts, ts[1:])):
            raise ConfigError(f"IoU thresholds must be strictly increasing, got {ts}")
        if not (0.0 <= self.score_threshold <= 1.0):
            raise ConfigError(f"score_threshold must be in [0, 1], got {self.score_threshold}")
        object.__setattr__(self, "iou_thresholds", ts)
        object.__setattr__(self, "classes", tuple(DefectClass.parse(c) for c in self.classes))

    @classmethod
    def coco(cls, **kwargs) -> "EvalConfig":
        return cls(iou_thresholds=COCO_THRESHOLDS, **kwargs)


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    def to_dict(self) -> dict:
        return {"tp": self.tp, "fp": self.fp, "fn": self.fn, "tn": self.tn}


# --------------------------------------------------------------------------
# matching


def _rank_key(d: Detection, i: int):
    return (-d.score, d.bbox.x_min, i)


def _greedy(det_boxes: Sequence[BoundingBox], gt_boxes: Sequence[BoundingBox], iou_t: float) -> list[int | None]:
    """Match boxes already in rank order; returns the gt index per detection."""
    taken = [False] * len(gt_boxes)
    out: list[int | None] = []
    for box in det_boxes:
        best, best_iou = None, iou_t
        for j, g in enumerate(gt_boxes):
            if taken[j]:
                continue
            v = iou(box, g)
            if v >= best_iou and (best is None or v > best_iou):
                best, best_iou = j, v
        if best is not None:
            taken[best] = True
        out.append(best)
    return out


def match_detections(
    dets: Sequence[Detection],
    gts: Sequence[GroundTruthObject],
    iou_t: float,
    class_aware: bool = True,
) -> list[tuple[Detection, int | None]]:
    """Greedy one-to-one matching on a single image.

    Detections are visited by descending score (ties: smaller ``x_min``, then
    input order). Each takes the still-unmatched ground truth with the highest
    IoU of at least ``iou_t`` (and the same class when ``class_aware``).
    Returns ``(detection, gt_index_or_None)`` in visiting order.
    """
    order = sorted(range(len(dets)), key=lambda i: _rank_key(dets[i], i))
    taken = [False] * len(gts)
    result = []
    for i in order:
        d = dets[i]
        best, best_iou = None, -1.0
        for j, g in enumerate(gts):
            if taken[j] or (class_aware and g.cls != d.cls):
                continue
            v = iou(d.bbox, g.bbox)
            if v >= iou_t and v > best_iou:
                best, best_iou = j, v
        if best is not None:
            taken[best] = True
        result.append((d, best))
    return result


# --------------------------------------------------------------------------
# average precision


def _ap_from_flags(flags: Sequence[bool], n_gt: int) -> float:
    """All-points interpolated AP from TP flags in rank order."""
    if n_gt == 0:
        raise EvaluationError("AP is undefined without ground truth")
    recall, precision = [], []
    tp = fp = 0
    for is_tp in flags:
        if is_tp:
            tp += 1
        else:
            fp += 1
        recall.append(tp / n_gt)
        precision.append(tp / (tp + fp))
    for i in range(len(precision) - 2, -1, -1):
        precision[i] = max(precision[i], precision[i + 1])
    ap, prev_r = 0.0, 0.0
    for r, p in zip(recall, precision):
        if r > prev_r:
            ap += (r - prev_r) * p
            prev_r = r
    return ap


def _ranked_flags(
    dets: Sequence[Detection], gts: Mapping[str, Sequence[BoundingBox]], iou_t: float
) -> list[bool]:
    order = sorted(range(len(dets)), key=lambda i: _rank_key(dets[i], i))
    per_image: dict[str, list[int]] = {}
    for i in order:
        per_image.setdefault(dets[i].image_id, []).append(i)
    is_tp = [False] * len(dets)
    for image_id, idxs in per_image.items():
        matches = _greedy([dets[i].bbox for i in idxs], gts.get(image_id, ()), iou_t)
        for i, m in zip(idxs, matches):
            is_tp[i] = m is not None
    return [is_tp[i] for i in order]


def average_precision(
    dets: Sequence[Detection], gts: Mapping[str, Sequence[BoundingBox]], iou_t: float
) -> float | None:
    """AP of one class across images.

    ``gts`` maps image id to that class's ground-truth boxes. Returns ``None``
    when there is no ground truth at all (the class is then left out of mAP).
    """
    n_gt = sum(len(v) for v in gts.values())
    if n_gt == 0:
        return None
    return _ap_from_flags(_ranked_flags(dets, gts, iou_t), n_gt)


def mean_ap(aps: Mapping[object, float | None] | Sequence[float | None]) -> float:
    values = list(aps.values()) if isinstance(aps, Mapping) else list(aps)
    defined = [a for a in values if a is not None]
    if not defined:
        raise EvaluationError("mAP is undefined: no class has ground truth")
    if all(a == defined[0] for a in defined):
        return defined[0]
    return sum(defined) / len(defined)


def _split_by_class(dataset: DatasetIndex, dets: Sequence[Detection], classes):
    gts = {c: {} for c in classes}
    for img in dataset.images:
        for obj in img.objects:
            if obj.cls in gts:
                gts[obj.cls].setdefault(img.id, []).append(obj.bbox)
    by_cls = {c: [] for c in classes}
    for d in dets:
        if d.cls in by_cls:
            by_cls[d.cls].append(d)
    return gts, by_cls


def per_class_ap(
    dataset: DatasetIndex, dets: Sequence[Detection], iou_t: float, classes=CLASS_ORDER
) -> dict[DefectClass, float | None]:
    gts, by_cls = _split_by_class(dataset, dets, classes)
    return {c: average_precision(by_cls[c], gts[c], iou_t) for c in classes}


def map_at(dataset: DatasetIndex, dets: Sequence[Detection], iou_t: float, classes=CLASS_ORDER) -> float:
    return mean_ap(per_class_ap(dataset, dets, iou_t, classes))


def map_range(
    dataset: DatasetIndex, dets: Sequence[Detection], thresholds: Sequence[float] = COCO_THRESHOLDS, classes=CLASS_ORDER
) -> float:
    """Mean of the single-threshold mAPs over ``thresholds`` (0.50:0.05:0.95 by default)."""
    maps = [map_at(dataset, dets, t, classes) for t in thresholds]
    return sum(maps) / len(maps)


# --------------------------------------------------------------------------
# confusion metrics


@dataclass(frozen=True)
class ConfusionResult:
    instance: ConfusionCounts
    image: ConfusionCounts
    accuracy: float
    precision: float
    recall: float
    flags: tuple[str, ...] = ()
    per_class: Mapping[DefectClass, ConfusionCounts] = field(default_factory=dict)


def rates(instance: ConfusionCounts, image: ConfusionCounts) -> tuple[float, float, float, tuple[str, ...]]:
    """Accuracy (image level), precision and recall (instance level).

    Empty denominators give 1.0 and add a flag naming the convention used.
    """
    flags = []
    if instance.tp + instance.fp == 0:
        precision = 1.0
        flags.append("precision_no_predictions")
    else:
        precision = instance.tp / (instance.tp + instance.fp)
    if instance.tp + instance.fn == 0:
        recall = 1.0
        flags.append("recall_no_ground_truth")
    else:
        recall = instance.tp / (instance.tp + instance.fn)
    total = image.tp + image.tn + image.fp + image.fn
    if total == 0:
        accuracy = 1.0
        flags.append("accuracy_no_images")
    else:
        accuracy = (image.tp + image.tn) / total
    return accuracy, precision, recall, tuple(flags)


def confusion_metrics(
    dataset: DatasetIndex,
    dets: Sequence[Detection],
    score_threshold: float = 0.5,
    iou_t: float = 0.5,
) -> ConfusionResult:
    kept = [d for d in dets if d.score >= score_threshold]
    by_image: dict[str, list[Detection]] = {}
    for d in kept:
        by_image.setdefault(d.image_id, []).append(d)

    tp = fp = fn = 0
    itp = ifp = ifn = itn = 0
    per_class = {c: [0, 0, 0] for c in CLASS_ORDER}
    for img in dataset.images:
        image_dets = by_image.get(img.id, [])
        matches = match_detections(image_dets, img.objects, iou_t)
        matched = set()
        for d, m in matches:
            if m is None:
                fp += 1
                per_class[d.cls][1] += 1
            else:
                tp += 1
                per_class[d.cls][0] += 1
                matched.add(m)
        for j, obj in enumerate(img.objects):
            if j not in matched:
                fn += 1
                per_class[obj.cls][2] += 1

        predicted, actual = bool(image_dets), bool(img.objects)
        if predicted and actual:
            itp += 1
        elif predicted:
            ifp += 1
        elif actual:
            ifn += 1
        else:
            itn += 1

    instance = ConfusionCounts(tp, fp, fn, 0)
    image = ConfusionCounts(itp, ifp, ifn, itn)
    accuracy, precision, recall, flags = rates(instance, image)
    return ConfusionResult(
        instance, image, accuracy, precision, recall, flags,
        {c: ConfusionCounts(*v) for c, v in per_class.items()},
    )


# --------------------------------------------------------------------------
# timing


def aggregate_runtime(sets: Sequence[DetectionSet], fusion_seconds: float | None = None) -> dict | None:
    """Mean seconds per image for each model and their sum.

    Sets without runtime data are skipped; ``None`` if no set has any.
    """
    per_model = {}
    for s in sets:
        rt = s.per_image_runtime_seconds
        if rt:
            per_model[s.model_id] = sum(rt.values()) / len(rt)
    if not per_model:
        return None
    total = sum(per_model.values())
    out = {"per_model": per_model, "sum_of_models": total}
    if fusion_seconds is not None:
        out["fusion_seconds"] = fusion_seconds
        out["ensemble"] = total + fusion_seconds
    return out


# --------------------------------------------------------------------------
# report


@dataclass
class EvalReport:
    iou_thresholds: tuple[float, ...]
    score_threshold: float
    classes: tuple[DefectClass, ...]
    ap: dict[DefectClass, dict[float, float | None]]
    map_per_threshold: dict[float, float | None]
    map_50: float | None
    map_50_95: float | None
    confusion: ConfusionResult
    mean_runtime_per_image: float | None = None

    @property
    def excluded_classes(self) -> list[DefectClass]:
        return [c for c in self.classes if all(v is None for v in self.ap[c].values())]

    def to_dict(self) -> dict:
        conf = self.confusion
        per_class = {}
        for c in self.classes:
            cc = conf.per_class.get(c, ConfusionCounts())
            p = cc.tp / (cc.tp + cc.fp) if cc.tp + cc.fp else None
            r = cc.tp / (cc.tp + cc.fn) if cc.tp + cc.fn else None
            f1 = 2 * p * r / (p + r) if p is not None and r is not None and p + r > 0 else None
            per_class[c.value] = {"tp": cc.tp, "fp": cc.fp, "fn": cc.fn, "precision": p, "recall": r, "f1": f1}
        doc = {
            "format": EVAL_FORMAT,
            "iou_thresholds": list(self.iou_thresholds),
            "score_threshold": self.score_threshold,
            "classes": [c.value for c in self.classes],
            "ap": {c.value: {threshold_key(t): v for t, v in self.ap[c].items()} for c in self.classes},
            "map_per_threshold": {threshold_key(t): v for t, v in self.map_per_threshold.items()},
            "map_50": self.map_50,
            "map_50_95": self.map_50_95,
            "excluded_classes": [c.value for c in self.excluded_classes],
            "confusion": conf.instance.to_dict(),
            "image_level_confusion": conf.image.to_dict(),
            "accuracy": conf.accuracy,
            "precision": conf.precision,
            "recall": conf.recall,
            "flags": list(conf.flags),
            "per_class": per_class,
        }
        if self.mean_runtime_per_image is not None:
            doc["mean_runtime_per_image"] = self.mean_runtime_per_image
        return doc

    def save(self, path: str | os.PathLike) -> None:
        _dump(self.to_dict(), path)

    def save_csv(self, path: str | os.PathLike) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["class"] + [threshold_key(t) for t in self.iou_thresholds])
            for c in self.classes:
                writer.writerow([c.value] + ["" if v is None else repr(v) for v in self.ap[c].values()])


def evaluate(
    dataset: DatasetIndex,
    detections: DetectionSet | Sequence[Detection],
    config: EvalConfig = EvalConfig(),
) -> EvalReport:
    if isinstance(detections, DetectionSet):
        dets = list(detections.detections)
        runtime = detections.per_image_runtime_seconds
    else:
        dets, runtime = list(detections), None
    check_detections_against(dataset, dets)

    gts, by_cls = _split_by_class(dataset, dets, config.classes)
    ap = {c: {} for c in config.classes}
    map_per_threshold: dict[float, float | None] = {}
    for t in config.iou_thresholds:
        aps = {c: average_precision(by_cls[c], gts[c], t) for c in config.classes}
        for c, v in aps.items():
            ap[c][t] = v
        try:
            map_per_threshold[t] = mean_ap(aps)
        except EvaluationError:
            map_per_threshold[t] = None

    map_50 = map_per_threshold.get(0.5)
    map_50_95 = None
    if all(t in map_per_threshold for t in COCO_THRESHOLDS):
        values = [map_per_threshold[t] for t in COCO_THRESHOLDS]
        if all(v is not None for v in values):
            map_50_95 = sum(values) / len(values)

    mean_runtime = sum(runtime.values()) / len(runtime) if runtime else None
    return EvalReport(
        config.iou_thresholds,
        config.score_threshold,
        config.classes,
        ap,
        map_per_threshold,
        map_50,
        map_50_95,
        confusion_metrics(dataset, dets, config.score_threshold),
        mean_runtime,
    )


def draw_overlays(
    dataset: DatasetIndex,
    dets: Sequence[Detection],
    out_dir: str | os.PathLike,
    score_threshold: float = 0.0,
) -> list[str]:
    """Write one PNG per image with ground truth (green) and detections (red)."""
    from pathlib import Path

    from PIL import Image, ImageDraw

    from .preprocess import safe_stem

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    by_image: dict[str, list[Detection]] = {}
    for d in dets:
        if d.score >= score_threshold:
            by_image.setdefault(d.image_id, []).append(d)
    written = []
    for img in dataset.images:
        try:
            canvas = Image.open(img.path).convert("RGB")
        except OSError:
            canvas = Image.new("RGB", (img.width, img.height), (0, 0, 0))
        draw = ImageDraw.Draw(canvas)
        for obj in img.objects:
            draw.rectangle(obj.bbox.as_list(), outline=(0, 200, 0))
        for d in by_image.get(img.id, []):
            draw.rectangle(d.bbox.as_list(), outline=(230, 30, 30))
            draw.text((d.bbox.x_min + 2, d.bbox.y_min + 2), f"{d.cls.value} {d.score:.2f}", fill=(230, 30, 30))
        path = out_dir / f"{safe_stem(img.id)}.png"
        canvas.save(path, format="PNG")
        written.append(str(path))
    return written
