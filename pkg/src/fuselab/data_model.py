"""Core records (images, ground truth, detections) and their file formats.

Two native JSON formats are supported, ``fuselab-dataset/1`` and
``fuselab-detections/1``. Keys are always written in a fixed order and floats
use Python's shortest round-trip ``repr`` so ``load(save(x)) == x``.
"""

from __future__ import annotations

import enum
import json
import math
import os
import re
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

from .errors import ParseError, SchemaError, ValidationError
from .geometry import BoundingBox

DATASET_FORMAT = "fuselab-dataset/1"
DETECTIONS_FORMAT = "fuselab-detections/1"


class DefectClass(str, enum.Enum):
    MISSING_HOLE = "missing_hole"
    MOUSE_BITE = "mouse_bite"
    OPEN_CIRCUIT = "open_circuit"
    SHORT = "short"
    SPUR = "spur"
    SPURIOUS_COPPER = "spurious_copper"
    PINHOLE = "pinhole"
    SCRATCH = "scratch"

    @classmethod
    def parse(cls, text: "str | DefectClass") -> "DefectClass":
        """Case-insensitive lookup; spaces and hyphens count as underscores."""
        if isinstance(text, DefectClass):
            return text
        if not isinstance(text, str):
            raise ValidationError(f"class must be a string, got {type(text).__name__}")
        key = re.sub(r"[\s\-]+", "_", text.strip().lower())
        try:
            return cls(key)
        except ValueError:
            raise ValidationError(f"unknown defect class {text!r}") from None

    @property
    def rank(self) -> int:
        """Position in the canonical class order (used for tie-breaks)."""
        return CLASS_ORDER.index(self)

    def __str__(self) -> str:
        return self.value


CLASS_ORDER: tuple[DefectClass, ...] = tuple(DefectClass)


@dataclass(frozen=True)
class GroundTruthObject:
    cls: DefectClass
    bbox: BoundingBox


@dataclass(frozen=True)
class ImageRecord:
    id: str
    path: str
    width: int
    height: int
    objects: tuple[GroundTruthObject, ...] = ()

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise ValidationError(f"image {self.id!r}: width and height must be positive")
        for obj in self.objects:
            if not obj.bbox.within(self.width, self.height):
                raise ValidationError(
                    f"image {self.id!r}: bbox {obj.bbox.as_list()} outside "
                    f"{self.width}x{self.height} bounds"
                )


@dataclass(frozen=True)
class DatasetIndex:
    images: tuple[ImageRecord, ...] = ()

    def __post_init__(self):
        seen = set()
        for img in self.images:
            if img.id in seen:
                raise ValidationError(f"duplicate image id {img.id!r}")
            seen.add(img.id)

    @property
    def class_counts(self) -> dict[DefectClass, int]:
        counts = Counter(obj.cls for img in self.images for obj in img.objects)
        return {c: counts.get(c, 0) for c in CLASS_ORDER}

    @property
    def ids(self) -> list[str]:
        return [img.id for img in self.images]

    def by_id(self) -> dict[str, ImageRecord]:
        return {img.id: img for img in self.images}

    def __len__(self) -> int:
        return len(self.images)


@dataclass(frozen=True)
class Detection:
    image_id: str
    cls: DefectClass
    bbox: BoundingBox
    score: float
    model_id: str

    def __post_init__(self):
        if not (isinstance(self.score, (int, float)) and 0.0 <= self.score <= 1.0):
            raise ValidationError(
                f"detection on {self.image_id!r}: score {self.score!r} outside [0, 1]"
            )


@dataclass(frozen=True)
class DetectionSet:
    model_id: str
    detections: tuple[Detection, ...] = ()
    per_image_runtime_seconds: Mapping[str, float] | None = None

    def __post_init__(self):
        for d in self.detections:
            if d.model_id != self.model_id:
                raise ValidationError(
                    f"detection model {d.model_id!r} differs from set model {self.model_id!r}"
                )

    def __len__(self) -> int:
        return len(self.detections)


# --------------------------------------------------------------------------
# JSON helpers


def _dump(doc: Mapping[str, Any], path: str | os.PathLike) -> None:
    text = json.dumps(doc, indent=2, ensure_ascii=False, allow_nan=False)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(text + "\n")


def _read_json(path: str | os.PathLike) -> Any:
    with open(path, "r", encoding="utf-8") as fh:
        text = fh.read()
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: line {exc.lineno} col {exc.colno}: {exc.msg}") from None


def _field(obj: Any, key: str, kind, where: str):
    if not isinstance(obj, dict):
        raise SchemaError(f"{where}: expected an object")
    if key not in obj:
        raise SchemaError(f"{where}: missing field {key!r}")
    value = obj[key]
    if kind is float:
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
    elif kind is int:
        ok = isinstance(value, int) and not isinstance(value, bool)
    else:
        ok = isinstance(value, kind)
    if not ok:
        raise SchemaError(f"{where}: field {key!r} has wrong type {type(value).__name__}")
    return value


def _bbox(obj: dict, where: str) -> BoundingBox:
    raw = _field(obj, "bbox", list, where)
    if len(raw) != 4 or not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in raw):
        raise SchemaError(f"{where}: bbox must be a list of 4 numbers")
    try:
        return BoundingBox.from_list(raw)
    except ValidationError as exc:
        raise ValidationError(f"{where}: {exc}") from None


def _check_format(doc: Any, expected: str, path) -> None:
    fmt = _field(doc, "format", str, str(path))
    if fmt != expected:
        raise SchemaError(f"{path}: format {fmt!r}, expected {expected!r}")


# --------------------------------------------------------------------------
# dataset files


def dataset_from_dict(doc: Any, source: str = "<dataset>") -> DatasetIndex:
    _check_format(doc, DATASET_FORMAT, source)
    images = []
    for i, raw in enumerate(_field(doc, "images", list, source)):
        where = f"{source}: images[{i}]"
        image_id = _field(raw, "id", str, where)
        where = f"{source}: image {image_id!r}"
        objects = []
        for j, obj in enumerate(_field(raw, "objects", list, where)):
            owhere = f"{where} objects[{j}]"
            try:
                cls = DefectClass.parse(_field(obj, "class", str, owhere))
            except ValidationError as exc:
                raise ValidationError(f"{owhere}: {exc}") from None
            objects.append(GroundTruthObject(cls, _bbox(obj, owhere)))
        images.append(
            ImageRecord(
                id=image_id,
                path=_field(raw, "path", str, where),
                width=_field(raw, "width", int, where),
                height=_field(raw, "height", int, where),
                objects=tuple(objects),
            )
        )
    return DatasetIndex(tuple(images))


def dataset_to_dict(index: DatasetIndex) -> dict:
    return {
        "format": DATASET_FORMAT,
        "images": [
            {
                "id": img.id,
                "path": img.path,
                "width": img.width,
                "height": img.height,
                "objects": [
                    {"class": obj.cls.value, "bbox": obj.bbox.as_list()} for obj in img.objects
                ],
            }
            for img in index.images
        ],
    }


def load_dataset(path: str | os.PathLike) -> DatasetIndex:
    return dataset_from_dict(_read_json(path), str(path))


def save_dataset(index: DatasetIndex, path: str | os.PathLike) -> None:
    _dump(dataset_to_dict(index), path)


# --------------------------------------------------------------------------
# detection files


def detections_from_dict(doc: Any, source: str = "<detections>") -> DetectionSet:
    _check_format(doc, DETECTIONS_FORMAT, source)
    model_id = _field(doc, "model", str, source)
    dets = []
    for i, raw in enumerate(_field(doc, "detections", list, source)):
        where = f"{source}: detections[{i}]"
        try:
            dets.append(
                Detection(
                    image_id=_field(raw, "image_id", str, where),
                    cls=DefectClass.parse(_field(raw, "class", str, where)),
                    bbox=_bbox(raw, where),
                    score=float(_field(raw, "score", float, where)),
                    model_id=model_id,
                )
            )
        except ValidationError as exc:
            raise ValidationError(f"{where}: {exc}") from None
    runtime = None
    if doc.get("runtime_seconds") is not None:
        rt = _field(doc, "runtime_seconds", dict, source)
        runtime = {}
        for key, value in rt.items():
            if not isinstance(value, (int, float)) or isinstance(value, bool) or not math.isfinite(value) or value < 0:
                raise ValidationError(f"{source}: runtime for {key!r} must be a non-negative number")
            runtime[key] = float(value)
    return DetectionSet(model_id, tuple(dets), runtime)


def detection_to_dict(d: Detection) -> dict:
    return {
        "image_id": d.image_id,
        "class": d.cls.value,
        "bbox": d.bbox.as_list(),
        "score": d.score,
    }


def detections_to_dict(dset: DetectionSet, extras: Sequence[Mapping[str, Any]] | None = None) -> dict:
    """Serialize a set; ``extras`` holds optional per-detection extension fields."""
    rows = []
    for i, d in enumerate(dset.detections):
        row = detection_to_dict(d)
        if extras is not None:
            row.update(extras[i])
        rows.append(row)
    doc: dict[str, Any] = {"format": DETECTIONS_FORMAT, "model": dset.model_id, "detections": rows}
    if dset.per_image_runtime_seconds is not None:
        doc["runtime_seconds"] = dict(dset.per_image_runtime_seconds)
    return doc


def load_detections(path: str | os.PathLike) -> DetectionSet:
    return detections_from_dict(_read_json(path), str(path))


def save_detections(dset: DetectionSet, path: str | os.PathLike) -> None:
    _dump(detections_to_dict(dset), path)


def check_detections_against(dataset: DatasetIndex, dets: Iterable[Detection]) -> None:
    """Raise if any detection names an image the dataset does not contain."""
    known = set(dataset.ids)
    for d in dets:
        if d.image_id not in known:
            raise ValidationError(f"detection from {d.model_id!r} references unknown image {d.image_id!r}")


# --------------------------------------------------------------------------
# YOLO text labels

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff")


def parse_yolo_line(line: str, width: int, height: int, class_map: Sequence[DefectClass] | Mapping[int, DefectClass], where: str) -> GroundTruthObject:
    fields = line.split()
    if len(fields) != 5:
        raise ParseError(f"{where}: expected 5 fields, got {len(fields)}")
    try:
        index = int(fields[0])
        xc, yc, w, h = (float(v) for v in fields[1:])
    except ValueError:
        raise ParseError(f"{where}: non-numeric field") from None
    try:
        cls = class_map[index]
    except (IndexError, KeyError):
        raise ValidationError(f"{where}: class index {index} not in class map") from None
    if index < 0:
        raise ValidationError(f"{where}: class index {index} not in class map")
    for v in (xc, yc, w, h):
        if not (0.0 <= v <= 1.0):
            raise ValidationError(f"{where}: normalized value {v} outside [0, 1]")
    x_min = max(0.0, (xc - w / 2) * width)
    y_min = max(0.0, (yc - h / 2) * height)
    x_max = min(float(width), (xc + w / 2) * width)
    y_max = min(float(height), (yc + h / 2) * height)
    try:
        box = BoundingBox(x_min, y_min, x_max, y_max)
    except ValidationError as exc:
        raise ValidationError(f"{where}: {exc}") from None
    return GroundTruthObject(DefectClass.parse(cls), box)


def import_yolo_txt(
    image_dir: str | os.PathLike,
    label_dir: str | os.PathLike,
    class_map: Sequence[DefectClass] | Mapping[int, DefectClass] = CLASS_ORDER,
) -> DatasetIndex:
    """Build a dataset from YOLO ``class xc yc w h`` label files.

    Images without a label file are treated as defect-free. A label file
    without a matching image is an error.
    """
    from PIL import Image

    image_dir, label_dir = Path(image_dir), Path(label_dir)
    images = {p.stem: p for p in sorted(image_dir.iterdir()) if p.suffix.lower() in IMAGE_SUFFIXES}
    labels = {p.stem: p for p in sorted(label_dir.glob("*.txt"))}
    orphan = sorted(set(labels) - set(images))
    if orphan:
        raise ValidationError(f"label file {labels[orphan[0]]} has no matching image in {image_dir}")

    records = []
    for stem in sorted(images):
        path = images[stem]
        with Image.open(path) as im:
            width, height = im.size
        objects = []
        if stem in labels:
            lines = labels[stem].read_text(encoding="utf-8").splitlines()
            for lineno, line in enumerate(lines, start=1):
                if not line.strip():
                    continue
                objects.append(parse_yolo_line(line, width, height, class_map, f"{labels[stem]}:{lineno}"))
        records.append(ImageRecord(stem, str(path), width, height, tuple(objects)))
    return DatasetIndex(tuple(records))
