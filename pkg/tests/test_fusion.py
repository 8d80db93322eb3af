import json

import pytest
from hypothesis import given, strategies as st

from fuselab.data_model import CLASS_ORDER, DatasetIndex, DefectClass, Detection, DetectionSet
from fuselab.errors import ConfigError, ValidationError
from fuselab.fusion import (
    EnsembleConfig,
    consensus_score,
    fuse,
    fused_to_dict,
    gather_support,
)
from fuselab.geometry import iou

from conftest import box, image
from strategies import boxes, classes, scores

SPUR, SHORT = DefectClass.SPUR, DefectClass.SHORT


def det(model, cls, coords, score, image_id="a"):
    return Detection(image_id, DefectClass.parse(cls), box(*coords), score, model)


def dset(model, *dets, runtime=None):
    return DetectionSet(model, tuple(dets), runtime)


class TestEnsembleConfig:
    def test_validation(self):
        with pytest.raises(ConfigError):
            EnsembleConfig({})
        with pytest.raises(ConfigError):
            EnsembleConfig({"a": 0.5, "b": 0.6})
        with pytest.raises(ConfigError):
            EnsembleConfig({"a": 1.5, "b": -0.5})
        with pytest.raises(ConfigError):
            EnsembleConfig({"a": 1.0}, match_iou=0.0)
        with pytest.raises(ConfigError):
            EnsembleConfig({"a": 1.0}, accept_threshold=1.1)

    def test_defaults_and_dict_roundtrip(self):
        cfg = EnsembleConfig.uniform(["a", "b", "c", "d"])
        assert cfg.match_iou == 0.5 and cfg.accept_threshold == 0.25 and cfg.dedup_nms is None
        cfg2 = EnsembleConfig.from_dict(json.loads(json.dumps(cfg.to_dict())))
        assert cfg2 == cfg


class TestGatherSupport:
    def test_single_model(self):
        a = det("A", "spur", (0, 0, 10, 10), 0.9)
        assert gather_support(a, [dset("A", a)], 0.5) == {"A": {SPUR: 0.9}}

    def test_iou_gate(self):
        a = det("A", "spur", (0, 0, 10, 10), 0.9)
        b = dset("B", det("B", "spur", (1, 0, 11, 10), 0.6), det("B", "spur", (100, 100, 110, 110), 0.99))
        assert gather_support(a, [dset("A", a), b], 0.5)["B"] == {SPUR: 0.6}

    def test_max_rule(self):
        a = det("A", "spur", (0, 0, 10, 10), 0.9)
        b = dset("B", det("B", "spur", (1, 0, 11, 10), 0.5), det("B", "spur", (0, 1, 10, 11), 0.7))
        assert gather_support(a, [dset("A", a), b], 0.5)["B"] == {SPUR: 0.7}

    def test_other_image_ignored(self):
        a = det("A", "spur", (0, 0, 10, 10), 0.9)
        b = dset("B", det("B", "spur", (0, 0, 10, 10), 0.8, image_id="other"))
        assert "B" not in gather_support(a, [dset("A", a), b], 0.5)

    def test_own_model_only_anchor(self):
        a = det("A", "spur", (0, 0, 10, 10), 0.9)
        twin = det("A", "short", (0, 0, 10, 10), 0.95)
        assert gather_support(a, [dset("A", a, twin)], 0.5) == {"A": {SPUR: 0.9}}


class TestConsensusScore:
    def test_one_hot(self):
        assert consensus_score({"m1": 0.9}, {"m1": 1.0, "m2": 0.0, "m3": 0.0, "m4": 0.0}) == 0.9

    def test_uniform(self):
        w = {f"m{i}": 0.25 for i in range(1, 5)}
        p = {"m1": 0.8, "m2": 0.6, "m3": 0.7, "m4": 0.9}
        assert consensus_score(p, w) == pytest.approx(0.75, abs=1e-15)

    def test_absent_is_zero(self):
        w = {"m1": 0.5, "m2": 0.5, "m3": 0.0, "m4": 0.0}
        assert consensus_score({"m1": 0.8}, w) == pytest.approx(0.40, abs=1e-15)

    def test_missing_weight(self):
        with pytest.raises(ConfigError, match="m9"):
            consensus_score({"m9": 0.5}, {"m1": 1.0})


class TestFuse:
    def test_single_model_degenerate(self):
        s = dset("A", det("A", "spur", (0, 0, 10, 10), 0.3), det("A", "short", (20, 20, 30, 30), 0.7))
        out = fuse([s], EnsembleConfig({"A": 1.0}, accept_threshold=0.0))
        assert sorted((f.cls, f.bbox, f.consensus) for f in out) == sorted((d.cls, d.bbox, d.score) for d in s.detections)

    def test_two_model_vote(self):
        a = dset("A", det("A", "spur", (0, 0, 10, 10), 0.9))
        b = dset("B", det("B", "short", (0, 0, 10, 10), 0.8))
        cfg = EnsembleConfig({"A": 0.5, "B": 0.5})
        out = fuse([a, b], cfg)
        assert len(out) == 2
        assert all(f.cls is SPUR and f.consensus == pytest.approx(0.45) for f in out)
        assert {f.anchor_model for f in out} == {"A", "B"}
        deduped = fuse([a, b], EnsembleConfig({"A": 0.5, "B": 0.5}, dedup_nms=0.5))
        assert len(deduped) == 1
        assert deduped[0].cls is SPUR and deduped[0].consensus == pytest.approx(0.45)
        assert dict(deduped[0].sources) == {"A": 0.9, "B": None}

    def test_threshold_one(self):
        a = dset("A", det("A", "spur", (0, 0, 10, 10), 0.99))
        b = dset("B", det("B", "spur", (0, 0, 10, 10), 0.98))
        assert fuse([a, b], EnsembleConfig({"A": 0.5, "B": 0.5}, accept_threshold=1.0)) == []

    def test_output_order(self):
        s = dset(
            "A",
            det("A", "spur", (50, 0, 60, 10), 0.5, "b"),
            det("A", "spur", (0, 0, 10, 10), 0.4, "a"),
            det("A", "spur", (30, 0, 40, 10), 0.9, "a"),
            det("A", "spur", (20, 0, 30, 10), 0.9, "a"),
        )
        out = fuse([s], EnsembleConfig({"A": 1.0}, accept_threshold=0.0))
        assert [(f.image_id, f.consensus, f.bbox.x_min) for f in out] == [
            ("a", 0.9, 20.0), ("a", 0.9, 30.0), ("a", 0.4, 0.0), ("b", 0.5, 50.0)]

    def test_unknown_image_with_index(self):
        s = dset("A", det("A", "spur", (0, 0, 10, 10), 0.5, "ghost"))
        with pytest.raises(ValidationError, match="ghost"):
            fuse([s], EnsembleConfig({"A": 1.0}), DatasetIndex((image("a"),)))

    def test_missing_weight_for_set(self):
        with pytest.raises(ConfigError):
            fuse([dset("A"), dset("B")], EnsembleConfig({"A": 1.0}))

    def test_fused_file_extension_fields(self):
        a = dset("A", det("A", "spur", (0, 0, 10, 10), 0.9))
        doc = fused_to_dict(fuse([a], EnsembleConfig({"A": 1.0})))
        row = doc["detections"][0]
        assert doc["model"] == "ensemble"
        assert list(row) == ["image_id", "class", "bbox", "score", "consensus", "sources", "anchor_model"]


MODELS = ["m0", "m1", "m2", "m3"]


@st.composite
def ensembles(draw):
    n_models = draw(st.integers(1, 4))
    sets = []
    for m in MODELS[:n_models]:
        dets = draw(st.lists(st.builds(Detection, st.sampled_from(["a", "b"]), classes, boxes(60, 60), scores, st.just(m)), max_size=5))
        sets.append(DetectionSet(m, tuple(dets)))
    raw = draw(st.lists(st.integers(0, 8), min_size=n_models, max_size=n_models).filter(lambda r: sum(r) > 0))
    return sets, raw


@given(ensembles(), st.floats(0, 1), st.floats(0.1, 1))
def test_consensus_invariants(ens, theta, match_iou):
    sets, raw = ens
    ids = [s.model_id for s in sets]
    cfg = EnsembleConfig.from_raw_weights(ids, raw, accept_threshold=theta, match_iou=match_iou)
    out = fuse(sets, cfg)
    all_scores = {s.model_id: [d.score for d in s.detections] for s in sets}
    for f in out:
        recomputed = sum(cfg.model_weights[m] * (p or 0.0) for m, p in f.sources)
        assert f.consensus == pytest.approx(recomputed, abs=1e-12)
        assert 0.0 <= f.consensus <= max(p or 0.0 for _, p in f.sources) + 1e-12
        assert f.consensus >= theta
    # no information loss: every positively weighted box is scored and kept unless below theta
    below = 0
    for s in sets:
        if cfg.model_weights[s.model_id] == 0:
            continue
        below += sum(1 for d in s.detections if _anchor_consensus(d, sets, cfg) < theta)
    n_positive = sum(len(s) for s in sets if cfg.model_weights[s.model_id] > 0)
    assert len(out) == n_positive - below
    assert fuse(sets, cfg) == out


def _anchor_consensus(anchor, sets, cfg):
    support = gather_support(anchor, sets, cfg.match_iou)
    cands = {anchor.cls} | {c for t in support.values() for c in t}
    return max(consensus_score({m: t[c] for m, t in support.items() if c in t}, cfg.model_weights) for c in cands)


@given(ensembles(), st.integers(0, 3))
def test_one_hot_reproduces_model(ens, pick):
    sets, _ = ens
    pick = pick % len(sets)
    cfg = EnsembleConfig({s.model_id: float(i == pick) for i, s in enumerate(sets)}, accept_threshold=0.0)
    out = fuse(sets, cfg)
    src = sets[pick].detections
    assert sorted((f.image_id, f.cls.rank, f.bbox.as_list(), f.consensus) for f in out) == sorted(
        (d.image_id, d.cls.rank, d.bbox.as_list(), d.score) for d in src
    )


@given(ensembles(), st.sampled_from([2.0, 4.0, 0.5, 8.0]))
def test_weight_scaling_invariance(ens, k):
    sets, raw = ens
    ids = [s.model_id for s in sets]
    a = fuse(sets, EnsembleConfig.from_raw_weights(ids, raw))
    b = fuse(sets, EnsembleConfig.from_raw_weights(ids, [k * r for r in raw]))
    assert a == b


@given(ensembles(), st.floats(0.1, 1))
def test_dedup_leaves_no_same_class_overlap(ens, t):
    sets, raw = ens
    cfg = EnsembleConfig.from_raw_weights([s.model_id for s in sets], raw, accept_threshold=0.0, dedup_nms=t)
    out = fuse(sets, cfg)
    for i, a in enumerate(out):
        for b in out[i + 1:]:
            if a.image_id == b.image_id and a.cls == b.cls:
                assert iou(a.bbox, b.bbox) < t
