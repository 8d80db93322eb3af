import os

import hypothesis
import numpy as np
import pytest

from fuselab.data_model import DatasetIndex, DefectClass, GroundTruthObject, ImageRecord
from fuselab.geometry import BoundingBox

hypothesis.settings.register_profile("ci", max_examples=200, deadline=None)
hypothesis.settings.register_profile("fast", max_examples=20, deadline=None)
hypothesis.settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "ci"))


def box(*coords):
    return BoundingBox(*map(float, coords))


def image(image_id, objects=(), width=600, height=600):
    objs = tuple(GroundTruthObject(DefectClass.parse(c), box(*b)) for c, b in objects)
    return ImageRecord(image_id, f"{image_id}.png", width, height, objs)


@pytest.fixture
def two_object_dataset():
    return DatasetIndex((image("a", [("missing_hole", (10, 10, 50, 50)), ("spur", (100, 100, 150, 180))]),))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
