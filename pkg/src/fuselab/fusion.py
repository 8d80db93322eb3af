"""Weighted consensus fusion of detections from several models.

Every box from every (positively weighted) model is kept as an *anchor*. For
each anchor the other models are searched for overlapping boxes, the best
score per class is taken from each model, and the class with the highest
weighted sum ``s = sum_m w_m * p_m(class)`` wins. The anchor is accepted when
``s`` reaches the acceptance threshold.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass
from typing import Mapping, Sequence

from .data_model import (
    DETECTIONS_FORMAT,
    DatasetIndex,
    DefectClass,
    Detection,
    DetectionSet,
    _dump,
    check_detections_against,
    detection_to_dict,
)
from .errors import ConfigError
from .geometry import BoundingBox, iou, nms

ENSEMBLE_MODEL_ID = "ensemble"

Support = dict[str, dict[DefectClass, float]]


@dataclass(frozen=True)
class EnsembleConfig:
    model_weights: Mapping[str, float]
    match_iou: float = 0.5
    accept_threshold: float = 0.25
    dedup_nms: float | None = None

    def __post_init__(self):
        weights = dict(self.model_weights)
        if not weights:
            raise ConfigError("ensemble needs at least one model weight")
        for model, w in weights.items():
            if not (isinstance(w, (int, float)) and math.isfinite(w) and w >= 0):
                raise ConfigError(f"weight for {model!r} must be a non-negative number, got {w!r}")
        total = sum(weights.values())
        if abs(total - 1.0) > 1e-9:
            raise ConfigError(f"model weights must sum to 1, got {total!r}")
        if not (0.0 < self.match_iou <= 1.0):
            raise ConfigError(f"match_iou must be in (0, 1], got {self.match_iou}")
        if not (0.0 <= self.accept_threshold <= 1.0):
            raise ConfigError(f"accept_threshold must be in [0, 1], got {self.accept_threshold}")
        if self.dedup_nms is not None and not (0.0 < self.dedup_nms <= 1.0):
            raise ConfigError(f"nms threshold must be in (0, 1], got {self.dedup_nms}")
        object.__setattr__(self, "model_weights", {m: float(w) for m, w in weights.items()})

    @classmethod
    def uniform(cls, model_ids: Sequence[str], **kwargs) -> "EnsembleConfig":
        n = len(model_ids)
        if n == 0:
            raise ConfigError("ensemble needs at least one model")
        return cls({m: 1.0 / n for m in model_ids}, **kwargs)

    @classmethod
    def from_raw_weights(cls, model_ids: Sequence[str], raw: Sequence[float], **kwargs) -> "EnsembleConfig":
        """Normalize arbitrary non-negative weights onto the simplex."""
        if len(model_ids) != len(raw):
            raise ConfigError(f"{len(raw)} weights given for {len(model_ids)} models")
        if any(not math.isfinite(w) or w < 0 for w in raw):
            raise ConfigError("weights must be finite and non-negative")
        total = sum(raw)
        if total <= 0:
            raise ConfigError("at least one weight must be positive")
        return cls({m: w / total for m, w in zip(model_ids, raw)}, **kwargs)

    def with_weights(self, weights: Mapping[str, float]) -> "EnsembleConfig":
        return EnsembleConfig(dict(weights), self.match_iou, self.accept_threshold, self.dedup_nms)

    @property
    def models(self) -> list[str]:
        return list(self.model_weights)

    def to_dict(self) -> dict:
        return {
            "model_weights": dict(self.model_weights),
            "match_iou": self.match_iou,
            "accept_threshold": self.accept_threshold,
            "dedup": None if self.dedup_nms is None else {"nms": self.dedup_nms},
        }

    @classmethod
    def from_dict(cls, doc: Mapping) -> "EnsembleConfig":
        if "model_weights" not in doc or not isinstance(doc["model_weights"], dict):
            raise ConfigError("ensemble config needs a 'model_weights' object")
        dedup = doc.get("dedup")
        if dedup is None or dedup == "off":
            nms_t = None
        elif isinstance(dedup, dict) and "nms" in dedup:
            nms_t = float(dedup["nms"])
        else:
            raise ConfigError(f"dedup must be null or {{'nms': threshold}}, got {dedup!r}")
        return cls(
            dict(doc["model_weights"]),
            match_iou=float(doc.get("match_iou", 0.5)),
            accept_threshold=float(doc.get("accept_threshold", 0.25)),
            dedup_nms=nms_t,
        )


@dataclass(frozen=True)
class FusedDetection:
    image_id: str
    cls: DefectClass
    bbox: BoundingBox
    consensus: float
    sources: tuple[tuple[str, float | None], ...]
    anchor_model: str


def _by_model_image(detection_sets: Sequence[DetectionSet]) -> dict[str, dict[str, list[Detection]]]:
    index: dict[str, dict[str, list[Detection]]] = {}
    for dset in detection_sets:
        per_image = index.setdefault(dset.model_id, {})
        for d in dset.detections:
            per_image.setdefault(d.image_id, []).append(d)
    return index


def _support(anchor: Detection, index, match_iou: float) -> Support:
    table: Support = {anchor.model_id: {anchor.cls: anchor.score}}
    for model_id, per_image in index.items():
        if model_id == anchor.model_id:
            continue
        best: dict[DefectClass, float] = {}
        for d in per_image.get(anchor.image_id, ()):
            if iou(anchor.bbox, d.bbox) >= match_iou and d.score > best.get(d.cls, -1.0):
                best[d.cls] = d.score
        if best:
            table[model_id] = best
    return table


def gather_support(anchor: Detection, detection_sets: Sequence[DetectionSet], match_iou: float) -> Support:
    """Best matching score per class from every model, for one anchor box.

    The anchor's own model contributes only the anchor itself. Other models
    contribute the maximum score among their boxes on the same image whose IoU
    with the anchor is at least ``match_iou``; models with no such box are
    left out of the table.
    """
    return _support(anchor, _by_model_image(detection_sets), match_iou)


def consensus_score(support: Mapping[str, float], weights: Mapping[str, float]) -> float:
    """Weighted sum of per-model scores for one class; absent models count as 0."""
    missing = [m for m in support if m not in weights]
    if missing:
        raise ConfigError(f"no weight configured for model {missing[0]!r}")
    s = 0.0
    for model, w in weights.items():
        s += w * support.get(model, 0.0)
    return min(max(s, 0.0), 1.0)


def _vote(anchor: Detection, support: Support, weights: Mapping[str, float]) -> tuple[DefectClass, float]:
    candidates = {anchor.cls}
    for table in support.values():
        candidates.update(table)
    best_cls, best_s = None, -1.0
    # Anchor class first, then canonical order: ties keep the anchor's own label.
    for c in sorted(candidates, key=lambda c: (c != anchor.cls, c.rank)):
        s = consensus_score({m: t[c] for m, t in support.items() if c in t}, weights)
        if s > best_s:
            best_cls, best_s = c, s
    return best_cls, best_s


@dataclass(frozen=True)
class PreparedFusion:
    """Weight-independent part of fusion: anchors with their support tables."""

    anchors: tuple[tuple[Detection, Support], ...]
    model_ids: tuple[str, ...]
    match_iou: float


def prepare(detection_sets: Sequence[DetectionSet], match_iou: float = 0.5) -> PreparedFusion:
    ids = [s.model_id for s in detection_sets]
    if len(set(ids)) != len(ids):
        raise ConfigError(f"duplicate model ids among detection sets: {ids}")
    index = _by_model_image(detection_sets)
    anchors = tuple(
        (d, _support(d, index, match_iou)) for dset in detection_sets for d in dset.detections
    )
    return PreparedFusion(anchors, tuple(ids), match_iou)


def fuse_prepared(prepared: PreparedFusion, config: EnsembleConfig) -> list[FusedDetection]:
    weights = config.model_weights
    missing = [m for m in prepared.model_ids if m not in weights]
    if missing:
        raise ConfigError(f"no weight configured for model {missing[0]!r}")
    if config.match_iou != prepared.match_iou:
        raise ConfigError("prepared fusion was built with a different match_iou")

    fused = []
    for anchor, support in prepared.anchors:
        # A zero-weight model is outside the ensemble: it casts no votes and seeds no boxes.
        if weights[anchor.model_id] == 0.0:
            continue
        cls, s = _vote(anchor, support, weights)
        if s < config.accept_threshold:
            continue
        sources = tuple((m, support.get(m, {}).get(cls)) for m in weights)
        fused.append(FusedDetection(anchor.image_id, cls, anchor.bbox, s, sources, anchor.model_id))

    fused.sort(key=lambda f: (f.image_id, -f.consensus, f.bbox.x_min))
    if config.dedup_nms is not None:
        fused = _dedup(fused, config.dedup_nms)
    return fused


def _dedup(fused: list[FusedDetection], threshold: float) -> list[FusedDetection]:
    out: list[FusedDetection] = []
    start = 0
    while start < len(fused):
        end = start
        while end < len(fused) and fused[end].image_id == fused[start].image_id:
            end += 1
        kept = nms([(f.bbox, f.consensus, f.cls, f) for f in fused[start:end]], threshold, class_aware=True)
        out.extend(item[3] for item in kept)
        start = end
    out.sort(key=lambda f: (f.image_id, -f.consensus, f.bbox.x_min))
    return out


def fuse(
    detection_sets: Sequence[DetectionSet],
    config: EnsembleConfig,
    dataset: DatasetIndex | None = None,
) -> list[FusedDetection]:
    """Fuse the given per-model detection sets.

    Output is sorted by image id, then descending consensus, then ``x_min``.
    When ``dataset`` is given every detection must reference one of its images.
    """
    if dataset is not None:
        for dset in detection_sets:
            check_detections_against(dataset, dset.detections)
    return fuse_prepared(prepare(detection_sets, config.match_iou), config)


def summed_runtime(detection_sets: Sequence[DetectionSet]) -> dict[str, float] | None:
    """Per-image runtime of the ensemble inputs (sum over models), if all sets report it."""
    if not detection_sets or any(s.per_image_runtime_seconds is None for s in detection_sets):
        return None
    total: dict[str, float] = {}
    for s in detection_sets:
        for image_id, t in s.per_image_runtime_seconds.items():
            total[image_id] = total.get(image_id, 0.0) + t
    return dict(sorted(total.items()))


def to_detection_set(fused: Sequence[FusedDetection], runtime: Mapping[str, float] | None = None) -> DetectionSet:
    """View fused output as an ordinary detection set (score = consensus)."""
    dets = tuple(
        Detection(f.image_id, f.cls, f.bbox, f.consensus, ENSEMBLE_MODEL_ID) for f in fused
    )
    return DetectionSet(ENSEMBLE_MODEL_ID, dets, None if runtime is None else dict(runtime))


def fused_to_dict(fused: Sequence[FusedDetection], runtime: Mapping[str, float] | None = None) -> dict:
    rows = []
    for f in fused:
        row = detection_to_dict(Detection(f.image_id, f.cls, f.bbox, f.consensus, ENSEMBLE_MODEL_ID))
        row["consensus"] = f.consensus
        row["sources"] = [{"model": m, "score": p} for m, p in f.sources]
        row["anchor_model"] = f.anchor_model
        rows.append(row)
    doc = {"format": DETECTIONS_FORMAT, "model": ENSEMBLE_MODEL_ID, "detections": rows}
    if runtime is not None:
        doc["runtime_seconds"] = dict(runtime)
    return doc


def save_fused(fused: Sequence[FusedDetection], path: str | os.PathLike, runtime: Mapping[str, float] | None = None) -> None:
    _dump(fused_to_dict(fused, runtime), path)
