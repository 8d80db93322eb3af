import json

import pytest

from fuselab.data_model import detections_to_dict
from fuselab.errors import ConfigError
from fuselab.evaluator import map_at
from fuselab.simulator import SimModelProfile, load_profiles, simulate, synthetic_dataset


@pytest.fixture(scope="module")
def gt():
    return synthetic_dataset(60, seed=2)


def as_bytes(sets):
    return [json.dumps(detections_to_dict(s)) for s in sets]


def test_everything_suppressed(gt):
    (s,) = simulate(gt, [SimModelProfile("m", miss_rate=1.0, fp_per_image=0)], seed=1)
    assert len(s) == 0


def test_perfect_detector(gt):
    p = SimModelProfile("m", miss_rate=0, fp_per_image=0, loc_sigma=0, confusion_rate=0, tp_score=1.0)
    (s,) = simulate(gt, [p], seed=1)
    assert [(d.image_id, d.cls, d.bbox) for d in s.detections] == [
        (img.id, o.cls, o.bbox) for img in gt.images for o in img.objects
    ]
    assert map_at(gt, s.detections, 0.5) == 1.0


def test_replay_and_order_independence(gt):
    a = SimModelProfile("a", stream=0)
    b = SimModelProfile("b", miss_rate=0.3, stream=1)
    first = simulate(gt, [a, b], seed=9)
    assert as_bytes(first) == as_bytes(simulate(gt, [a, b], seed=9))
    swapped = simulate(gt, [b, a], seed=9)
    assert as_bytes(swapped) == as_bytes(first[::-1])
    assert as_bytes(simulate(gt, [a, b], seed=10)) != as_bytes(first)


def test_stream_ignores_other_profiles(gt):
    a = SimModelProfile("a")
    alone = simulate(gt, [a, SimModelProfile("x", fp_per_image=0.1)], seed=4)[0]
    crowd = simulate(gt, [a, SimModelProfile("y", fp_per_image=5, miss_rate=0.9)], seed=4)[0]
    assert alone == crowd


def test_boxes_valid_and_in_bounds(gt):
    sets = simulate(gt, [SimModelProfile("m", loc_sigma=25, fp_per_image=3)], seed=5)
    dims = {img.id: (img.width, img.height) for img in gt.images}
    for d in sets[0].detections:
        assert d.bbox.within(*dims[d.image_id])
        assert 0 <= d.score <= 1


def test_miss_rate_statistics():
    big = synthetic_dataset(400, seed=3, objects_per_image=(2, 4))
    n_obj = sum(len(img.objects) for img in big.images)
    assert n_obj >= 1000
    (s,) = simulate(big, [SimModelProfile("m", miss_rate=0.2, fp_per_image=0, confusion_rate=0)], seed=8)
    assert 0.76 <= len(s) / n_obj <= 0.84


def test_runtime_map(gt):
    (s,) = simulate(gt, [SimModelProfile("m", per_image_runtime=0.06)], seed=0)
    assert s.per_image_runtime_seconds == {img.id: 0.06 for img in gt.images}


@pytest.mark.parametrize(
    "kwargs", [{"miss_rate": 1.5}, {"confusion_rate": -0.1}, {"fp_per_image": -1}, {"loc_sigma": float("inf")}, {"tp_score": (0, 1)}, {"tp_score": 1.2}]
)
def test_invalid_profiles(kwargs):
    with pytest.raises(ConfigError):
        SimModelProfile("m", **kwargs)


def test_duplicate_ids(gt):
    with pytest.raises(ConfigError):
        simulate(gt, [SimModelProfile("m"), SimModelProfile("m")], seed=0)


def test_load_profiles(tmp_path):
    path = tmp_path / "p.json"
    path.write_text(json.dumps([{"model_id": "a", "tp_score": [5, 2]}, {"model_id": "b", "tp_score": 1.0}]))
    a, b = load_profiles(path)
    assert a.tp_score == (5.0, 2.0) and b.tp_score == 1.0
    path.write_text(json.dumps([{"model_id": "a", "bogus": 1}]))
    with pytest.raises(ConfigError):
        load_profiles(path)
