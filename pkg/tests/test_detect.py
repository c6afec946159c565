import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from seqscene.detect import (
    Detection,
    DetectorNoiseConfig,
    initial_object_count,
    simulate_detections,
    threshold_proposals,
    uniform_confusion,
    visible_objects,
)
from seqscene.geometry import BBox2D, CameraIntrinsics, Label, project_bbox
from seqscene.models import build_models
from seqscene.world import default_camera_pose, generate_scene

CAM = CameraIntrinsics()
CAM_POSE = default_camera_pose()
REG, MODELS = build_models()
A, B, C = Label("A"), Label("B"), Label("C")


def _det(conf: dict, box=(0, 0, 10, 10), bc=1.0):
    return Detection(BBox2D(*box), bc, conf)


def test_threshold_example():
    out = threshold_proposals(_det({A: 0.9, B: 0.1, C: 0.05}), 0.1)
    assert out == [(A, 0.9), (B, 0.1)]


def test_threshold_single_and_ties():
    assert threshold_proposals(_det({A: 0.3}), 0.99) == [(A, 0.3)]
    assert len(threshold_proposals(_det({A: 0.2, B: 0.2, C: 0.2}), 0.9)) == 3
    with pytest.raises(ValueError):
        threshold_proposals(_det({A: 0.3}), 1.5)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=1, max_size=6), st.floats(0.01, 0.98), st.floats(0.01, 0.98))
def test_threshold_nonempty_and_monotone(confs, s1, s2):
    d = _det({Label(f"l{i}"): c for i, c in enumerate(confs)})
    lo, hi = sorted((s1, s2))
    a, b = threshold_proposals(d, lo), threshold_proposals(d, hi)
    assert len(b) >= 1
    assert {lab for lab, _ in b} <= {lab for lab, _ in a}
    best = max(confs)
    assert all(c >= best * lo for _, c in a)


def test_initial_object_count():
    assert initial_object_count([[(A, 1.0)], [(B, 1.0)], [(C, 1.0)]]) == 3
    assert initial_object_count([[(A, 0.6), (B, 0.4)]]) == 2
    assert initial_object_count([]) == 0


def test_detection_invariants():
    with pytest.raises(ValueError):
        _det({A: 1.2})
    with pytest.raises(ValueError):
        _det({})
    with pytest.raises(ValueError):
        _det({A: 0.5}, bc=1.5)


def test_noise_config_invariants():
    with pytest.raises(ValueError):
        DetectorNoiseConfig(confusion=np.array([[0.5, 0.4], [0.0, 1.0]]))
    with pytest.raises(ValueError):
        DetectorNoiseConfig(miss_rate=1.5)
    c = uniform_confusion(8, 0.9)
    np.testing.assert_allclose(c.sum(axis=1), 1.0, atol=1e-12)
    DetectorNoiseConfig(confusion=c)


def test_noiseless_detections_match_visible_boxes():
    world = generate_scene(REG, MODELS, 5, 4)
    dets = simulate_detections(world, CAM, DetectorNoiseConfig(), 0, REG, CAM_POSE)
    vis = visible_objects(world, CAM, CAM_POSE, 0.25)
    assert len(dets) == len(vis) >= 1
    for d, (i, box) in zip(dets, vis):
        obj = world.objects[i]
        assert d.truth == i
        assert d.bbox == project_bbox(obj.model, obj.pose, CAM, CAM_POSE) == box
        assert d.confidence(obj.model.label) == 1.0


def test_all_missed_no_fp_is_empty():
    world = generate_scene(REG, MODELS, 5, 4)
    assert simulate_detections(world, CAM, DetectorNoiseConfig(miss_rate=1.0), 0, REG, CAM_POSE) == []


def test_detections_reproducible():
    world = generate_scene(REG, MODELS, 5, 2)
    cfg = DetectorNoiseConfig(miss_rate=0.2, false_positive_rate=1.5, bbox_jitter_sigma=2,
                              confusion=uniform_confusion(len(REG), 0.8), confidence_concentration=10)
    a = simulate_detections(world, CAM, cfg, 11, REG, CAM_POSE)
    b = simulate_detections(world, CAM, cfg, 11, REG, CAM_POSE)
    assert a == b


class _StaticVisibility:
    """Swap the renderer-based visibility check for a fixed list, so the
    count statistics run fast."""

    def __init__(self, monkeypatch, world):
        import seqscene.detect as det

        vis = visible_objects(world, CAM, CAM_POSE, 0.25)
        monkeypatch.setattr(det, "visible_objects", lambda *a, **k: vis)
        self.count = len(vis)


def test_miss_rate_binomial(monkeypatch):
    # five well-separated objects: all visible
    world = generate_scene(REG, MODELS, 5, 4)
    vis = _StaticVisibility(monkeypatch, world)
    assert vis.count == 5
    cfg = DetectorNoiseConfig(miss_rate=0.2)
    counts = [len(simulate_detections(world, CAM, cfg, s, REG, CAM_POSE)) for s in range(10_000)]
    assert np.mean(counts) == pytest.approx(4.0, abs=0.05)


def test_false_positive_rate_poisson(monkeypatch):
    world = generate_scene(REG, MODELS, 1, 0)
    _StaticVisibility(monkeypatch, world)
    rate, n = 1.0, 4000
    cfg = DetectorNoiseConfig(miss_rate=1.0, false_positive_rate=rate)
    counts = [len(simulate_detections(world, CAM, cfg, s, REG, CAM_POSE)) for s in range(n)]
    # clipping can drop a box, so the mean may only fall short of the rate
    assert abs(np.mean(counts) - rate) <= 3 * np.sqrt(rate / n)
    assert all(d.spurious for d in simulate_detections(world, CAM, cfg, 1, REG, CAM_POSE))
