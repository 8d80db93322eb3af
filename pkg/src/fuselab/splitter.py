"""Balanced train/val/test split grouped by each image's dominant defect class."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass

import numpy as np

from .data_model import CLASS_ORDER, DatasetIndex, ImageRecord
from .errors import ConfigError

SPLITS = ("train", "val", "test")
DEFECT_FREE = "defect_free"
GROUP_ORDER = tuple(c.value for c in CLASS_ORDER) + (DEFECT_FREE,)


@dataclass(frozen=True)
class SplitSpec:
    train_fraction: float = 0.70
    val_fraction: float = 0.15
    test_fraction: float = 0.15
    seed: int = 0

    def __post_init__(self):
        fractions = (self.train_fraction, self.val_fraction, self.test_fraction)
        if any(not math.isfinite(f) or f < 0 for f in fractions):
            raise ConfigError(f"split fractions must be non-negative, got {fractions}")
        if abs(sum(fractions) - 1.0) > 1e-9:
            raise ConfigError(
                f"split fractions must sum to 1 (train + val + test = {sum(fractions):.6g})"
            )
        if not (0 <= self.seed < 2**64):
            raise ConfigError("seed must be an unsigned 64-bit integer")

    @property
    def fractions(self) -> tuple[float, float, float]:
        return (self.train_fraction, self.val_fraction, self.test_fraction)


@dataclass(frozen=True)
class SplitResult:
    train: DatasetIndex
    val: DatasetIndex
    test: DatasetIndex
    allocation: dict[str, dict[str, int]]

    def parts(self) -> dict[str, DatasetIndex]:
        return {"train": self.train, "val": self.val, "test": self.test}

    def allocation_report(self) -> dict:
        return {
            "groups": {g: dict(row) for g, row in self.allocation.items()},
            "totals": {name: len(part) for name, part in self.parts().items()},
        }


def dominant_class(image: ImageRecord) -> str:
    """Most frequent class in the image; ties go to the earlier canonical class."""
    if not image.objects:
        return DEFECT_FREE
    counts = Counter(obj.cls for obj in image.objects)
    best = max(CLASS_ORDER, key=lambda c: (counts.get(c, 0), -c.rank))
    return best.value


def largest_remainder(n: int, fractions: tuple[float, ...]) -> list[int]:
    """Integer allocation of ``n`` items closest to ``fraction * n``.

    Leftover items go to the largest fractional remainders; equal remainders
    favour the earlier split (train first).
    """
    quotas = [f * n for f in fractions]
    # Tolerance keeps 0.7 * 100 = 70.00000000000001 from reading as 70 + remainder.
    counts = [math.floor(q + 1e-9) for q in quotas]
    remainders = [round(q - c, 9) for q, c in zip(quotas, counts)]
    leftover = n - sum(counts)
    order = sorted(range(len(fractions)), key=lambda i: (-remainders[i], i))
    for i in order[:leftover]:
        counts[i] += 1
    return counts


def group_images(dataset: DatasetIndex) -> dict[str, list[ImageRecord]]:
    groups: dict[str, list[ImageRecord]] = {}
    for img in dataset.images:
        groups.setdefault(dominant_class(img), []).append(img)
    return {g: sorted(groups[g], key=lambda r: r.id) for g in GROUP_ORDER if g in groups}


def balanced_split(dataset: DatasetIndex, spec: SplitSpec) -> SplitResult:
    assignment: dict[str, str] = {}
    allocation: dict[str, dict[str, int]] = {}
    for group, members in group_images(dataset).items():
        # One stream per group so adding images to one group leaves the others alone.
        rng = np.random.default_rng([spec.seed, GROUP_ORDER.index(group)])
        perm = rng.permutation(len(members))
        counts = largest_remainder(len(members), spec.fractions)
        allocation[group] = {"total": len(members), **dict(zip(SPLITS, counts))}
        start = 0
        for name, count in zip(SPLITS, counts):
            for k in perm[start:start + count]:
                assignment[members[k].id] = name
            start += count

    parts = {
        name: DatasetIndex(tuple(img for img in dataset.images if assignment[img.id] == name))
        for name in SPLITS
    }
    return SplitResult(parts["train"], parts["val"], parts["test"], allocation)
