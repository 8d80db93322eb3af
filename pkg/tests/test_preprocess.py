from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays
from PIL import Image

from fuselab.data_model import DatasetIndex, DefectClass, GroundTruthObject, ImageRecord
from fuselab.errors import ConfigError, ValidationError
from fuselab.preprocess import (
    Brightness,
    FlipHorizontal,
    FlipVertical,
    PreprocessConfig,
    RasterImage,
    Rescale,
    Rotate,
    apply_augment,
    augment_dataset,
    binarize_otsu,
    otsu_threshold,
    parse_op,
    preprocess_pipeline,
    read_image,
    resize,
    to_grayscale,
    write_image,
)

from conftest import box
from strategies import boxes, classes


def gray(values):
    return RasterImage(np.asarray(values, dtype=np.uint8))


def otsu_oracle(pixels):
    """Exhaustive threshold search straight from the pixel list (exact rationals)."""
    values = [int(v) for v in np.asarray(pixels).ravel()]
    n = len(values)
    best_t, best = None, Fraction(0)
    for t in range(256):
        dark = [v for v in values if v <= t]
        light = [v for v in values if v > t]
        if not dark or not light:
            continue
        w0, w1 = Fraction(len(dark), n), Fraction(len(light), n)
        mu0, mu1 = Fraction(sum(dark), len(dark)), Fraction(sum(light), len(light))
        var = w0 * w1 * (mu0 - mu1) ** 2
        if var > best:
            best_t, best = t, var
    return max(values) if best_t is None else best_t


class TestGrayscale:
    @pytest.mark.parametrize("rgb, expected", [((255, 255, 255), 255), ((0, 0, 0), 0), ((255, 0, 0), 76)])
    def test_examples(self, rgb, expected):
        img = RasterImage(np.array([[rgb]], dtype=np.uint8))
        assert to_grayscale(img).pixels[0, 0] == expected

    def test_wrong_channels(self):
        with pytest.raises(ValidationError):
            to_grayscale(gray([[1, 2]]))


class TestOtsu:
    def test_constant(self):
        out = binarize_otsu(gray(np.full((4, 4), 128)))
        assert np.all(out.pixels == 0)

    def test_bimodal(self):
        px = np.array([20] * 50 + [200] * 50).reshape(10, 10)
        t = otsu_threshold(gray(px))
        assert 20 <= t < 200 and t == otsu_oracle(px)
        out = binarize_otsu(gray(px)).pixels
        assert np.all(out[px == 20] == 0) and np.all(out[px == 200] == 255)

    def test_binary_unchanged(self):
        px = np.array([[0, 255, 0], [255, 255, 0]])
        assert otsu_oracle(px) < 255
        assert binarize_otsu(gray(px)) == gray(px)

    @given(arrays(np.uint8, (6, 7)))
    def test_matches_oracle(self, px):
        assert otsu_threshold(gray(px)) == otsu_oracle(px)
        assert set(np.unique(binarize_otsu(gray(px)).pixels)) <= {0, 255}


class TestResize:
    def test_identity(self, rng):
        img = RasterImage(rng.integers(0, 256, (5, 7, 3), dtype=np.uint8))
        assert resize(img, 7, 5) == img

    def test_constant(self):
        out = resize(gray([[200]]), 9, 4)
        assert out.width == 9 and out.height == 4 and np.all(out.pixels == 200)

    def test_hand_interpolation(self):
        # Samples at 0, 1/3, 2/3, 1 between 0 and 255.
        assert resize(gray([[0, 255]]), 4, 1).pixels.tolist() == [[0, 85, 170, 255]]

    def test_bad_target(self):
        with pytest.raises(ConfigError):
            resize(gray([[1]]), 0, 3)

    @given(st.integers(1, 12), st.integers(1, 12), st.integers(1, 20), st.integers(1, 20))
    def test_exact_dims(self, w, h, tw, th):
        img = RasterImage(np.arange(w * h, dtype=np.uint8).reshape(h, w))
        out = resize(img, tw, th)
        assert (out.width, out.height) == (tw, th)


def obj(cls, *coords):
    return GroundTruthObject(DefectClass.parse(cls), box(*coords))


class TestAugment:
    def test_rot90_four_times(self, rng):
        img = RasterImage(rng.integers(0, 256, (4, 6), dtype=np.uint8))
        boxes_ = [obj("spur", 1, 0.5, 3, 2)]
        cur = (img, boxes_)
        for _ in range(4):
            cur = apply_augment(*cur, Rotate(90))
        assert cur[0] == img and cur[1] == boxes_

    def test_rot90_box_mapping(self):
        # 6 wide x 4 tall; (x, y) -> (H - y, x).
        img = gray(np.zeros((4, 6)))
        out_img, out = apply_augment(img, [obj("spur", 1, 0.5, 3, 2)], Rotate(90))
        assert (out_img.width, out_img.height) == (4, 6)
        assert out[0].bbox.as_list() == [2.0, 1.0, 3.5, 3.0]

    def test_rot90_pixels_follow_boxes(self):
        px = np.zeros((4, 6), np.uint8)
        px[1, 4] = 255  # pixel covering x in [4, 5), y in [1, 2)
        out_img, out = apply_augment(gray(px), [obj("spur", 4, 1, 5, 2)], Rotate(90))
        b = out[0].bbox
        assert out_img.pixels[int(b.y_min), int(b.x_min)] == 255

    def test_flip_horizontal_example(self):
        img = gray(np.zeros((600, 600)))
        _, out = apply_augment(img, [obj("spur", 120, 240, 180, 360)], FlipHorizontal())
        assert out[0].bbox.as_list() == [420.0, 240.0, 480.0, 360.0]

    def test_brightness(self):
        out, b = apply_augment(gray([[200, 10]]), [], Brightness(2.0))
        assert out.pixels.tolist() == [[255, 20]]

    def test_rescale(self):
        img = gray(np.zeros((100, 200)))
        out, b = apply_augment(img, [obj("spur", 10, 20, 30, 40)], Rescale(0.5))
        assert (out.width, out.height) == (100, 50)
        assert b[0].bbox.as_list() == [5.0, 10.0, 15.0, 20.0]

    @pytest.mark.parametrize("bad", [lambda: Rotate(45), lambda: Brightness(0), lambda: Rescale(-1), lambda: parse_op("shear")])
    def test_invalid_ops(self, bad):
        with pytest.raises(ConfigError):
            bad()

    def test_parse_ops(self):
        assert parse_op("rot270") == Rotate(270)
        assert parse_op("brightness:1.5") == Brightness(1.5)
        assert parse_op("flip_v") == FlipVertical()


@st.composite
def scenes(draw):
    w = draw(st.integers(2, 12))
    h = draw(st.integers(2, 12))
    px = draw(arrays(np.uint8, (h, w)))
    objs = draw(st.lists(st.builds(GroundTruthObject, classes, boxes(float(w), float(h))), max_size=3))
    return RasterImage(px), objs


ops = st.sampled_from([Rotate(90), Rotate(180), Rotate(270), FlipHorizontal(), FlipVertical()]) | st.builds(
    Brightness, st.floats(0.1, 3)
) | st.builds(Rescale, st.floats(0.2, 3))


@given(scenes(), ops)
def test_boxes_stay_valid_and_in_bounds(scene, op):
    img, objs = scene
    out_img, out = apply_augment(img, objs, op)
    assert len(out) == len(objs)
    for o in out:
        assert o.bbox.within(out_img.width, out_img.height)


@given(scenes(), st.sampled_from([FlipHorizontal(), FlipVertical()]))
def test_flips_are_involutions(scene, op):
    img, objs = scene
    once = apply_augment(img, objs, op)
    twice = apply_augment(*once, op)
    assert twice[0] == img
    for a, b in zip(twice[1], objs):
        assert a.cls == b.cls
        assert a.bbox.as_list() == pytest.approx(b.bbox.as_list(), abs=1e-9)


@given(scenes(), st.sampled_from([Rotate(90), Rotate(180), Rotate(270), FlipHorizontal(), FlipVertical()]))
def test_geometric_ops_preserve_pixel_multiset(scene, op):
    img, objs = scene
    out, _ = apply_augment(img, objs, op)
    assert sorted(out.pixels.ravel().tolist()) == sorted(img.pixels.ravel().tolist())


@given(scenes(), st.floats(0.25, 4))
def test_rescale_inverse_on_boxes(scene, f):
    img, objs = scene
    up = apply_augment(img, objs, Rescale(f))
    back = apply_augment(*up, Rescale(1 / f))
    for a, b in zip(back[1], objs):
        assert a.bbox.as_list() == pytest.approx(b.bbox.as_list(), abs=1e-6)


class TestPipeline:
    def dataset(self, tmp_path, px, objects=()):
        path = tmp_path / "in.png"
        Image.fromarray(px).save(path)
        h, w = px.shape[:2]
        return DatasetIndex((ImageRecord("b1", str(path), w, h, tuple(objects)),))

    def test_downscale_boxes(self, tmp_path, rng):
        px = rng.integers(0, 256, (1200, 1200, 3), dtype=np.uint8)
        ds = self.dataset(tmp_path, px, [obj("short", 0, 0, 1200, 1200)])
        out, summary = preprocess_pipeline(ds, PreprocessConfig(), tmp_path / "out")
        rec = out.images[0]
        assert (rec.width, rec.height) == (600, 600)
        assert rec.objects[0].bbox.as_list() == [0.0, 0.0, 600.0, 600.0]
        assert read_image(rec.path).pixels.shape == (600, 600)
        assert summary.failures == {}

    def test_noop_path(self, tmp_path, rng):
        px = rng.integers(0, 256, (600, 600), dtype=np.uint8)
        out, _ = preprocess_pipeline(self.dataset(tmp_path, px), PreprocessConfig(), tmp_path / "out")
        assert np.array_equal(read_image(out.images[0].path).pixels, px)

    def test_binarize(self, tmp_path, rng):
        px = rng.integers(0, 256, (60, 60), dtype=np.uint8)
        out, _ = preprocess_pipeline(self.dataset(tmp_path, px), PreprocessConfig(60, 60, True), tmp_path / "out")
        assert set(np.unique(read_image(out.images[0].path).pixels)) <= {0, 255}

    def test_empty(self, tmp_path):
        out, summary = preprocess_pipeline(DatasetIndex(), PreprocessConfig(), tmp_path / "out")
        assert len(out) == 0 and summary.failures == {}

    def test_unreadable_continues(self, tmp_path, rng):
        good = self.dataset(tmp_path, rng.integers(0, 256, (10, 10), dtype=np.uint8))
        bad = ImageRecord("missing", str(tmp_path / "nope.png"), 10, 10)
        ds = DatasetIndex(good.images + (bad,))
        out, summary = preprocess_pipeline(ds, PreprocessConfig(20, 20), tmp_path / "out")
        assert out.ids == ["b1"]
        assert "missing" in summary.failures

    def test_augment_dataset_deterministic(self, tmp_path, rng):
        ds = self.dataset(tmp_path, rng.integers(0, 256, (8, 10), dtype=np.uint8), [obj("spur", 1, 1, 4, 3)])
        ops_ = [Rotate(90), FlipHorizontal(), Brightness(1.2)]
        a, _ = augment_dataset(ds, ops_, tmp_path / "a", seed=3, per_image=2)
        b, _ = augment_dataset(ds, ops_, tmp_path / "b", seed=3, per_image=2)
        assert a.ids == b.ids and len(a) == 3
        for ra, rb in zip(a.images, b.images):
            assert read_image(ra.path) == read_image(rb.path)


def test_png_roundtrip(tmp_path, rng):
    img = RasterImage(rng.integers(0, 256, (5, 4, 3), dtype=np.uint8))
    write_image(img, tmp_path / "x.png")
    assert read_image(tmp_path / "x.png") == img
