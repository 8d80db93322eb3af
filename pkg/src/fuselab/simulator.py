"""Seeded synthetic detectors that stand in for trained networks.

Each model perturbs the ground truth (misses, corner jitter, class confusion)
and adds Poisson false positives. Randomness comes from a Philox counter-based
generator keyed on ``(seed, stream, image index)``, so a model's output does
not depend on which other models are simulated alongside it.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np

from .data_model import CLASS_ORDER, DatasetIndex, Detection, DetectionSet
from .errors import ConfigError
from .geometry import BoundingBox

# A score distribution is either a constant or Beta(alpha, beta).
ScoreDist = Union[float, tuple[float, float]]

FP_MIN_SIDE = 10.0
FP_MAX_SIDE = 100.0
MIN_SIDE = 1e-3


def _check_dist(name: str, dist: ScoreDist) -> ScoreDist:
    if isinstance(dist, (int, float)):
        if not (0.0 <= dist <= 1.0):
            raise ConfigError(f"{name}: constant score must be in [0, 1], got {dist}")
        return float(dist)
    a, b = dist
    if not (a > 0 and b > 0 and math.isfinite(a) and math.isfinite(b)):
        raise ConfigError(f"{name}: Beta parameters must be positive, got {dist}")
    return (float(a), float(b))


@dataclass(frozen=True)
class SimModelProfile:
    model_id: str
    miss_rate: float = 0.1
    fp_per_image: float = 1.0
    loc_sigma: float = 2.0
    confusion_rate: float = 0.05
    tp_score: ScoreDist = (8.0, 2.0)
    fp_score: ScoreDist = (3.0, 7.0)
    per_image_runtime: float = 0.0
    stream: int | None = None  # defaults to the profile's position in the list

    def __post_init__(self):
        for name in ("miss_rate", "confusion_rate"):
            v = getattr(self, name)
            if not (0.0 <= v <= 1.0):
                raise ConfigError(f"{self.model_id}: {name} must be in [0, 1], got {v}")
        if not (self.fp_per_image >= 0 and math.isfinite(self.fp_per_image)):
            raise ConfigError(f"{self.model_id}: fp_per_image must be non-negative")
        if not (self.loc_sigma >= 0 and math.isfinite(self.loc_sigma)):
            raise ConfigError(f"{self.model_id}: loc_sigma must be finite and non-negative")
        if not (self.per_image_runtime >= 0 and math.isfinite(self.per_image_runtime)):
            raise ConfigError(f"{self.model_id}: per_image_runtime must be non-negative")
        if self.stream is not None and self.stream < 0:
            raise ConfigError(f"{self.model_id}: stream must be non-negative")
        object.__setattr__(self, "tp_score", _check_dist("tp_score", self.tp_score))
        object.__setattr__(self, "fp_score", _check_dist("fp_score", self.fp_score))

    @classmethod
    def from_dict(cls, doc: dict) -> "SimModelProfile":
        doc = dict(doc)
        for key in ("tp_score", "fp_score"):
            if isinstance(doc.get(key), list):
                doc[key] = tuple(doc[key])
        try:
            return cls(**doc)
        except TypeError as exc:
            raise ConfigError(f"bad simulator profile: {exc}") from None


def load_profiles(path: str | os.PathLike) -> list[SimModelProfile]:
    with open(path, encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON: {exc.msg}") from None
    rows = doc.get("profiles") if isinstance(doc, dict) else doc
    if not isinstance(rows, list) or not rows:
        raise ConfigError(f"{path}: expected a non-empty list of profiles")
    return [SimModelProfile.from_dict(r) for r in rows]


def _rng(seed: int, stream: int, image_index: int) -> np.random.Generator:
    key = np.random.SeedSequence([seed, stream, image_index]).generate_state(2, dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def _draw_score(rng: np.random.Generator, dist: ScoreDist) -> float:
    if isinstance(dist, float):
        rng.random()  # keep the stream layout independent of the distribution kind
        return dist
    return float(np.clip(rng.beta(*dist), 0.0, 1.0))


def _ordered(a: float, b: float, hi: float) -> tuple[float, float]:
    lo_v, hi_v = sorted((min(max(a, 0.0), hi), min(max(b, 0.0), hi)))
    if hi_v - lo_v < MIN_SIDE:
        # Jitter collapsed the box; widen it inside the image.
        if hi_v + MIN_SIDE <= hi:
            hi_v = lo_v + MIN_SIDE
        else:
            lo_v = hi_v - MIN_SIDE
    return lo_v, hi_v


def simulate_model(gt: DatasetIndex, profile: SimModelProfile, seed: int, stream: int) -> DetectionSet:
    dets = []
    n_classes = len(CLASS_ORDER)
    for image_index, img in enumerate(gt.images):
        rng = _rng(seed, stream, image_index)
        for obj in img.objects:
            # Fixed draws per object, whatever the outcome, so streams stay aligned.
            u_miss = rng.random()
            jitter = rng.normal(0.0, 1.0, size=4) * profile.loc_sigma
            u_conf = rng.random()
            other = int(rng.integers(n_classes - 1))
            score = _draw_score(rng, profile.tp_score)
            if u_miss < profile.miss_rate:
                continue
            b = obj.bbox
            x0, x1 = _ordered(b.x_min + jitter[0], b.x_max + jitter[2], float(img.width))
            y0, y1 = _ordered(b.y_min + jitter[1], b.y_max + jitter[3], float(img.height))
            cls = obj.cls
            if u_conf < profile.confusion_rate:
                others = [c for c in CLASS_ORDER if c != obj.cls]
                cls = others[other]
            dets.append(Detection(img.id, cls, BoundingBox(x0, y0, x1, y1), score, profile.model_id))

        for _ in range(int(rng.poisson(profile.fp_per_image))):
            w = min(rng.uniform(FP_MIN_SIDE, FP_MAX_SIDE), float(img.width))
            h = min(rng.uniform(FP_MIN_SIDE, FP_MAX_SIDE), float(img.height))
            x0 = rng.uniform(0.0, img.width - w)
            y0 = rng.uniform(0.0, img.height - h)
            cls = CLASS_ORDER[int(rng.integers(n_classes))]
            score = _draw_score(rng, profile.fp_score)
            box = BoundingBox(x0, y0, min(x0 + w, float(img.width)), min(y0 + h, float(img.height)))
            dets.append(Detection(img.id, cls, box, score, profile.model_id))

    runtime = {img.id: profile.per_image_runtime for img in gt.images}
    return DetectionSet(profile.model_id, tuple(dets), runtime)


def simulate(gt: DatasetIndex, profiles: Sequence[SimModelProfile], seed: int) -> list[DetectionSet]:
    """One detection set per profile, in profile order."""
    if not profiles:
        raise ConfigError("at least one simulator profile is required")
    ids = [p.model_id for p in profiles]
    if len(set(ids)) != len(ids):
        raise ConfigError(f"duplicate model ids in profiles: {ids}")
    return [
        simulate_model(gt, p, seed, p.stream if p.stream is not None else i)
        for i, p in enumerate(profiles)
    ]


# --------------------------------------------------------------------------
# synthetic ground truth


def synthetic_dataset(
    n_images: int,
    seed: int,
    width: int = 600,
    height: int = 600,
    objects_per_image: tuple[int, int] = (1, 5),
    class_weights: Sequence[float] | None = None,
    defect_free_fraction: float = 0.0,
    size_range: tuple[float, float] = (20.0, 80.0),
) -> DatasetIndex:
    """Random boxes on blank boards, for desk-scale experiments.

    Boxes inside one image do not overlap, so every object is separately
    detectable.
    """
    from .data_model import GroundTruthObject, ImageRecord

    rng = np.random.default_rng([seed, 0xD47A])
    probs = None
    if class_weights is not None:
        probs = np.asarray(class_weights, dtype=float)
        probs = probs / probs.sum()
    images = []
    for i in range(n_images):
        objects = []
        if rng.random() >= defect_free_fraction:
            n = int(rng.integers(objects_per_image[0], objects_per_image[1] + 1))
            placed: list[BoundingBox] = []
            for _ in range(n):
                for _attempt in range(50):
                    w = rng.uniform(*size_range)
                    h = rng.uniform(*size_range)
                    x0 = rng.uniform(0.0, width - w)
                    y0 = rng.uniform(0.0, height - h)
                    box = BoundingBox(x0, y0, x0 + w, y0 + h)
                    if all(
                        box.x_max <= p.x_min or p.x_max <= box.x_min or box.y_max <= p.y_min or p.y_max <= box.y_min
                        for p in placed
                    ):
                        placed.append(box)
                        cls = CLASS_ORDER[int(rng.choice(len(CLASS_ORDER), p=probs))]
                        objects.append(GroundTruthObject(cls, box))
                        break
        images.append(ImageRecord(f"img_{i:05d}", f"img_{i:05d}.png", width, height, tuple(objects)))
    return DatasetIndex(tuple(images))
