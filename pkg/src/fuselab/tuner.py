"""Pick ensemble weights on a validation split."""

from __future__ import annotations

import csv
import itertools
import os
from dataclasses import dataclass, field
from typing import Callable, Sequence

from .data_model import DatasetIndex, DetectionSet
from .errors import ConfigError, EvaluationError
from .evaluator import COCO_THRESHOLDS, confusion_metrics, map_at
from .fusion import EnsembleConfig, fuse_prepared, prepare, to_detection_set

OBJECTIVES = ("map_50", "map_50_95", "accuracy")
METHODS = ("grid", "coordinate_ascent", "proportional")


@dataclass(frozen=True)
class TuneSpec:
    method: str = "grid"
    objective: str = "map_50"
    resolution: float = 0.05
    max_rounds: int = 20
    step: float = 0.05
    score_threshold: float = 0.5  # only used by the accuracy objective

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"unknown tuning method {self.method!r}; choose from {METHODS}")
        if self.objective not in OBJECTIVES:
            raise ConfigError(f"unknown objective {self.objective!r}; choose from {OBJECTIVES}")
        if not (0.0 < self.resolution <= 0.5):
            raise ConfigError(f"resolution must be in (0, 0.5], got {self.resolution}")
        if abs(1.0 / self.resolution - round(1.0 / self.resolution)) > 1e-9:
            raise ConfigError(f"resolution must divide 1 evenly, got {self.resolution}")
        if not (0.0 < self.step <= 0.5):
            raise ConfigError(f"step must be in (0, 0.5], got {self.step}")
        if self.max_rounds < 1:
            raise ConfigError("max_rounds must be at least 1")


@dataclass
class TuneResult:
    config: EnsembleConfig
    objective: float
    trace: list[tuple[tuple[float, ...], float, bool]] = field(default_factory=list)

    def save_trace(self, path: str | os.PathLike) -> None:
        models = self.config.models
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow([f"w_{m}" for m in models] + ["objective", "accepted"])
            for weights, value, accepted in self.trace:
                writer.writerow([repr(w) for w in weights] + [repr(value), int(accepted)])


def make_objective(val_gt: DatasetIndex, name: str, score_threshold: float = 0.5) -> Callable:
    """Return ``f(detections) -> float`` for the named objective."""
    if not val_gt.images:
        raise EvaluationError("validation set is empty")
    if name == "accuracy":
        return lambda dets: confusion_metrics(val_gt, dets, score_threshold).accuracy
    if not any(img.objects for img in val_gt.images):
        raise EvaluationError("objective undefined: validation set has no ground-truth objects")
    if name == "map_50":
        return lambda dets: map_at(val_gt, dets, 0.5)
    if name == "map_50_95":
        return lambda dets: sum(map_at(val_gt, dets, t) for t in COCO_THRESHOLDS) / len(COCO_THRESHOLDS)
    raise ConfigError(f"unknown objective {name!r}")


def simplex_grid(n_models: int, resolution: float) -> list[tuple[float, ...]]:
    """All weight vectors with coordinates on multiples of ``resolution``, lexicographic order."""
    steps = round(1.0 / resolution)
    out = []
    for combo in itertools.product(range(steps + 1), repeat=n_models):
        if sum(combo) == steps:
            out.append(tuple(k / steps for k in combo))
    return out


def proportional_weights(scores: Sequence[float]) -> list[float]:
    """``w_m = score_m / sum(scores)``; uniform if every score is zero."""
    if any(s < 0 for s in scores):
        raise ConfigError("objective scores must be non-negative")
    total = sum(scores)
    if total == 0:
        return [1.0 / len(scores)] * len(scores)
    return [s / total for s in scores]


def tune_weights(
    val_gt: DatasetIndex,
    detection_sets: Sequence[DetectionSet],
    spec: TuneSpec,
    base_config: EnsembleConfig | None = None,
) -> TuneResult:
    if not detection_sets:
        raise ConfigError("at least one detection set is required")
    models = [s.model_id for s in detection_sets]
    if base_config is None:
        base_config = EnsembleConfig.uniform(models)
    objective = make_objective(val_gt, spec.objective, spec.score_threshold)
    prepared = prepare(detection_sets, base_config.match_iou)

    def config_for(weights) -> EnsembleConfig:
        return EnsembleConfig(
            dict(zip(models, weights)), base_config.match_iou, base_config.accept_threshold, base_config.dedup_nms
        )

    def score(weights) -> float:
        fused = fuse_prepared(prepared, config_for(weights))
        return objective(to_detection_set(fused).detections)

    if len(models) == 1:
        w = (1.0,)
        value = score(w)
        return TuneResult(config_for(w), value, [(w, value, True)])

    if spec.method == "proportional":
        singles = [objective(s.detections) for s in detection_sets]
        w = tuple(proportional_weights(singles))
        value = score(w)
        trace = [(tuple(1.0 if j == i else 0.0 for j in range(len(models))), v, False) for i, v in enumerate(singles)]
        trace.append((w, value, True))
        return TuneResult(config_for(w), value, trace)

    if spec.method == "grid":
        best_w, best_v = None, float("-inf")
        trace = []
        for w in simplex_grid(len(models), spec.resolution):
            v = score(w)
            # Strict improvement only: the lexicographically smallest maximizer wins.
            improved = v > best_v
            if improved:
                best_w, best_v = w, v
            trace.append((w, v, improved))
        return TuneResult(config_for(best_w), best_v, trace)

    return _coordinate_ascent(models, score, spec, config_for)


def _coordinate_ascent(models, score, spec: TuneSpec, config_for) -> TuneResult:
    n = len(models)
    current = tuple([1.0 / n] * n)
    best = score(current)
    trace = [(current, best, True)]
    for _ in range(spec.max_rounds):
        improved_this_round = False
        for i in range(n):
            for sign in (1.0, -1.0):
                raw = list(current)
                raw[i] = max(0.0, raw[i] + sign * spec.step)
                total = sum(raw)
                if total <= 0:
                    continue
                candidate = tuple(x / total for x in raw)
                if candidate == current:
                    continue
                v = score(candidate)
                accepted = v > best
                trace.append((candidate, v, accepted))
                if accepted:
                    current, best = candidate, v
                    improved_this_round = True
        if not improved_this_round:
            break
    return TuneResult(config_for(current), best, trace)
