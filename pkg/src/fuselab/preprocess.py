"""Image normalization and augmentation with matching box transforms."""

from __future__ import annotations

import json
import logging
import math
import os
import re
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Sequence, Union

import numpy as np

from .data_model import DatasetIndex, GroundTruthObject, ImageRecord
from .errors import ConfigError, ValidationError
from .geometry import BoundingBox

log = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class RasterImage:
    """8-bit image. ``pixels`` has shape (H, W) for gray or (H, W, 3) for RGB."""

    pixels: np.ndarray

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.ndim == 3 and px.shape[2] == 1:
            px = px[:, :, 0]
        if px.ndim not in (2, 3) or (px.ndim == 3 and px.shape[2] != 3):
            raise ValidationError(f"unsupported pixel array shape {px.shape}")
        if px.shape[0] == 0 or px.shape[1] == 0:
            raise ValidationError("image must have positive width and height")
        if px.dtype != np.uint8:
            if np.any(px < 0) or np.any(px > 255):
                raise ValidationError("pixel values must lie in [0, 255]")
            px = px.astype(np.uint8)
        px = np.ascontiguousarray(px)
        px.setflags(write=False)
        object.__setattr__(self, "pixels", px)

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def channels(self) -> int:
        return 1 if self.pixels.ndim == 2 else 3

    def __eq__(self, other):
        if not isinstance(other, RasterImage):
            return NotImplemented
        return self.pixels.shape == other.pixels.shape and bool(np.array_equal(self.pixels, other.pixels))


def read_image(path: str | os.PathLike) -> RasterImage:
    from PIL import Image

    with Image.open(path) as im:
        if im.mode not in ("L", "RGB"):
            im = im.convert("RGB") if im.mode in ("RGBA", "P", "CMYK", "YCbCr", "LA") else im.convert("L")
        return RasterImage(np.array(im))


def write_image(img: RasterImage, path: str | os.PathLike) -> None:
    from PIL import Image

    Image.fromarray(img.pixels, mode="L" if img.channels == 1 else "RGB").save(path, format="PNG")


def _round_half_up(values: np.ndarray) -> np.ndarray:
    return np.floor(values + 0.5)


def to_grayscale(img: RasterImage) -> RasterImage:
    """Luma conversion ``round(0.299 R + 0.587 G + 0.114 B)``."""
    if img.channels != 3:
        raise ValidationError(f"to_grayscale expects 3 channels, got {img.channels}")
    rgb = img.pixels.astype(np.int64)
    # Integer arithmetic keeps the rounding exact.
    gray = (299 * rgb[..., 0] + 587 * rgb[..., 1] + 114 * rgb[..., 2] + 500) // 1000
    return RasterImage(np.clip(gray, 0, 255).astype(np.uint8))


def otsu_threshold(img: RasterImage) -> int:
    """Otsu threshold over the 256-bin histogram.

    Pixels ``<= t`` form the dark class. Ties in between-class variance go to
    the smallest ``t``. If every candidate has zero variance (a single-valued
    image) the threshold is the maximum pixel value, so everything maps to 0.
    """
    if img.channels != 1:
        raise ValidationError("otsu_threshold expects a grayscale image")
    hist = np.bincount(img.pixels.ravel(), minlength=256).tolist()
    total = sum(hist)
    total_sum = sum(i * h for i, h in enumerate(hist))

    best_t, best_var = None, Fraction(0)
    n0 = s0 = 0
    for t in range(256):
        n0 += hist[t]
        s0 += t * hist[t]
        n1 = total - n0
        if n0 == 0 or n1 == 0:
            continue
        # Between-class variance up to the constant factor 1 / total**2.
        var = Fraction((s0 * total - total_sum * n0) ** 2, n0 * n1)
        if var > best_var:
            best_t, best_var = t, var
    if best_t is None:
        return int(img.pixels.max())
    return best_t


def binarize_otsu(img: RasterImage) -> RasterImage:
    t = otsu_threshold(img)
    return RasterImage(np.where(img.pixels > t, 255, 0).astype(np.uint8))


def resize(img: RasterImage, target_w: int, target_h: int) -> RasterImage:
    """Bilinear resize with corner-aligned sampling and round-half-up output."""
    if target_w <= 0 or target_h <= 0:
        raise ConfigError(f"resize target must be positive, got {target_w}x{target_h}")
    if (target_w, target_h) == (img.width, img.height):
        return img

    def sample_positions(n_src: int, n_dst: int):
        if n_dst == 1 or n_src == 1:
            pos = np.zeros(n_dst)
        else:
            pos = np.arange(n_dst) * (n_src - 1) / (n_dst - 1)
        lo = np.clip(np.floor(pos).astype(np.int64), 0, n_src - 1)
        hi = np.minimum(lo + 1, n_src - 1)
        return lo, hi, pos - lo

    x0, x1, fx = sample_positions(img.width, target_w)
    y0, y1, fy = sample_positions(img.height, target_h)
    src = img.pixels.astype(np.float64)
    if img.channels == 3:
        fx = fx[None, :, None]
        fy = fy[:, None, None]
    else:
        fx = fx[None, :]
        fy = fy[:, None]
    top = src[y0][:, x0] * (1 - fx) + src[y0][:, x1] * fx
    bottom = src[y1][:, x0] * (1 - fx) + src[y1][:, x1] * fx
    out = top * (1 - fy) + bottom * fy
    return RasterImage(np.clip(_round_half_up(out), 0, 255).astype(np.uint8))


# --------------------------------------------------------------------------
# augmentation


@dataclass(frozen=True)
class Rotate:
    angle_degrees: int

    def __post_init__(self):
        if self.angle_degrees not in (90, 180, 270):
            raise ConfigError(f"rotation angle must be 90, 180 or 270, got {self.angle_degrees}")


@dataclass(frozen=True)
class FlipHorizontal:
    pass


@dataclass(frozen=True)
class FlipVertical:
    pass


@dataclass(frozen=True)
class Brightness:
    factor: float

    def __post_init__(self):
        if not (math.isfinite(self.factor) and self.factor > 0):
            raise ConfigError(f"brightness factor must be positive, got {self.factor}")


@dataclass(frozen=True)
class Rescale:
    factor: float

    def __post_init__(self):
        if not (math.isfinite(self.factor) and self.factor > 0):
            raise ConfigError(f"rescale factor must be positive, got {self.factor}")


AugmentOp = Union[Rotate, FlipHorizontal, FlipVertical, Brightness, Rescale]

_OP_PATTERN = re.compile(r"^(rot90|rot180|rot270|flip_h|flip_v|brightness:(.+)|rescale:(.+))$")


def parse_op(text: str) -> AugmentOp:
    """Parse a CLI op token such as ``rot90`` or ``brightness:1.5``."""
    token = text.strip().lower()
    m = _OP_PATTERN.match(token)
    if not m:
        raise ConfigError(f"unknown augmentation op {text!r}")
    if token.startswith("rot"):
        return Rotate(int(token[3:]))
    if token == "flip_h":
        return FlipHorizontal()
    if token == "flip_v":
        return FlipVertical()
    name, _, value = token.partition(":")
    try:
        factor = float(value)
    except ValueError:
        raise ConfigError(f"bad factor in {text!r}") from None
    return Brightness(factor) if name == "brightness" else Rescale(factor)


def op_name(op: AugmentOp) -> str:
    if isinstance(op, Rotate):
        return f"rot{op.angle_degrees}"
    if isinstance(op, FlipHorizontal):
        return "flip_h"
    if isinstance(op, FlipVertical):
        return "flip_v"
    if isinstance(op, Brightness):
        return f"brightness:{op.factor!r}"
    return f"rescale:{op.factor!r}"


def rescaled_size(width: int, height: int, factor: float) -> tuple[int, int]:
    # Ceil so scaled boxes always fit; the epsilon absorbs float noise like 110.00000000000001.
    def one(n):
        return max(1, math.ceil(n * factor - 1e-9))

    return one(width), one(height)


def _rot90_box(b: BoundingBox, h: int) -> BoundingBox:
    # (x, y) -> (H - y, x), then re-sort the corners.
    return BoundingBox(h - b.y_max, b.x_min, h - b.y_min, b.x_max)


def apply_augment(
    img: RasterImage, boxes: Sequence[GroundTruthObject], op: AugmentOp
) -> tuple[RasterImage, list[GroundTruthObject]]:
    w, h = img.width, img.height
    for obj in boxes:
        if not obj.bbox.within(w, h):
            raise ValidationError(f"box {obj.bbox.as_list()} outside {w}x{h} image")

    if isinstance(op, Rotate):
        out_img, out_boxes = img, list(boxes)
        for _ in range(op.angle_degrees // 90):
            height = out_img.height
            out_img = RasterImage(np.rot90(out_img.pixels, k=-1))
            out_boxes = [GroundTruthObject(o.cls, _rot90_box(o.bbox, height)) for o in out_boxes]
        return out_img, out_boxes
    if isinstance(op, FlipHorizontal):
        new = [
            GroundTruthObject(o.cls, BoundingBox(w - o.bbox.x_max, o.bbox.y_min, w - o.bbox.x_min, o.bbox.y_max))
            for o in boxes
        ]
        return RasterImage(img.pixels[:, ::-1]), new
    if isinstance(op, FlipVertical):
        new = [
            GroundTruthObject(o.cls, BoundingBox(o.bbox.x_min, h - o.bbox.y_max, o.bbox.x_max, h - o.bbox.y_min))
            for o in boxes
        ]
        return RasterImage(img.pixels[::-1, :]), new
    if isinstance(op, Brightness):
        px = _round_half_up(img.pixels.astype(np.float64) * op.factor)
        return RasterImage(np.clip(px, 0, 255).astype(np.uint8)), list(boxes)
    if isinstance(op, Rescale):
        new_w, new_h = rescaled_size(w, h, op.factor)
        f = op.factor
        new = [
            GroundTruthObject(
                o.cls,
                BoundingBox(o.bbox.x_min * f, o.bbox.y_min * f, min(o.bbox.x_max * f, new_w), min(o.bbox.y_max * f, new_h)),
            )
            for o in boxes
        ]
        return resize(img, new_w, new_h), new
    raise ConfigError(f"unsupported augmentation op {op!r}")


# --------------------------------------------------------------------------
# pipeline


@dataclass
class PreprocessConfig:
    width: int = 600
    height: int = 600
    binarize: bool = False

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise ConfigError(f"target size must be positive, got {self.width}x{self.height}")

    @classmethod
    def from_dict(cls, doc: dict) -> "PreprocessConfig":
        known = {"width", "height", "binarize", "size"}
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"unknown preprocess config keys: {sorted(unknown)}")
        doc = dict(doc)
        if "size" in doc:
            doc["width"] = doc["height"] = doc.pop("size")
        return cls(**doc)


@dataclass
class PipelineSummary:
    processed: list[str] = field(default_factory=list)
    failures: dict[str, str] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"processed": sorted(self.processed), "failures": dict(sorted(self.failures.items()))}


def safe_stem(image_id: str) -> str:
    return re.sub(r"[^A-Za-z0-9._-]+", "_", image_id)


def _scale_objects(objects, sx: float, sy: float, width: int, height: int):
    return tuple(
        GroundTruthObject(
            o.cls,
            BoundingBox(
                o.bbox.x_min * sx,
                o.bbox.y_min * sy,
                min(o.bbox.x_max * sx, float(width)),
                min(o.bbox.y_max * sy, float(height)),
            ),
        )
        for o in objects
    )


def preprocess_image(img: RasterImage, config: PreprocessConfig) -> RasterImage:
    if img.channels == 3:
        img = to_grayscale(img)
    if config.binarize:
        img = binarize_otsu(img)
    return resize(img, config.width, config.height)


def preprocess_pipeline(
    dataset: DatasetIndex, config: PreprocessConfig, out_dir: str | os.PathLike
) -> tuple[DatasetIndex, PipelineSummary]:
    """Grayscale, optionally binarize, and resize every image in ``dataset``.

    Unreadable images are logged in the summary and left out of the returned
    index; the rest of the dataset is still processed.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    summary = PipelineSummary()
    records = []
    for rec in sorted(dataset.images, key=lambda r: r.id):
        try:
            img = read_image(rec.path)
        except (OSError, ValueError) as exc:
            summary.failures[rec.id] = f"unreadable image {rec.path}: {exc}"
            log.warning("skipping %s: %s", rec.id, exc)
            continue
        if (img.width, img.height) != (rec.width, rec.height):
            summary.failures[rec.id] = (
                f"image is {img.width}x{img.height} but index says {rec.width}x{rec.height}"
            )
            continue
        out = preprocess_image(img, config)
        out_path = out_dir / f"{safe_stem(rec.id)}.png"
        write_image(out, out_path)
        sx, sy = config.width / rec.width, config.height / rec.height
        records.append(
            ImageRecord(
                rec.id, str(out_path), config.width, config.height,
                _scale_objects(rec.objects, sx, sy, config.width, config.height),
            )
        )
        summary.processed.append(rec.id)
    order = {img_id: i for i, img_id in enumerate(dataset.ids)}
    records.sort(key=lambda r: order[r.id])
    return DatasetIndex(tuple(records)), summary


def augment_dataset(
    dataset: DatasetIndex,
    ops: Sequence[AugmentOp],
    out_dir: str | os.PathLike,
    seed: int,
    per_image: int = 1,
    keep_originals: bool = True,
) -> tuple[DatasetIndex, PipelineSummary]:
    """Write ``per_image`` augmented copies of each image, ops drawn without replacement.

    Meant for the training split only. Augmented ids are ``<id>__<op>``.
    """
    if not ops:
        raise ConfigError("at least one augmentation op is required")
    if not (1 <= per_image <= len(ops)):
        raise ConfigError(f"per_image must be in [1, {len(ops)}], got {per_image}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    summary = PipelineSummary()
    records = []
    for index, rec in enumerate(dataset.images):
        try:
            img = read_image(rec.path)
        except (OSError, ValueError) as exc:
            summary.failures[rec.id] = f"unreadable image {rec.path}: {exc}"
            continue
        if keep_originals:
            records.append(rec)
        rng = np.random.default_rng([seed, index])
        chosen = sorted(rng.choice(len(ops), size=per_image, replace=False).tolist())
        for k in chosen:
            op = ops[k]
            new_img, new_boxes = apply_augment(img, rec.objects, op)
            new_id = f"{rec.id}__{op_name(op)}"
            out_path = out_dir / f"{safe_stem(new_id)}.png"
            write_image(new_img, out_path)
            records.append(ImageRecord(new_id, str(out_path), new_img.width, new_img.height, tuple(new_boxes)))
        summary.processed.append(rec.id)
    return DatasetIndex(tuple(records)), summary


def config_to_json(config: PreprocessConfig) -> str:
    return json.dumps(asdict(config))
