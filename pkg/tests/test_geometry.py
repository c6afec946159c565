import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from seqscene.geometry import (
    BBox2D,
    CameraIntrinsics,
    Category,
    Label,
    LabelRegistry,
    NotVisible,
    ObjectModel,
    ObjectState,
    Pose6D,
    SceneEstimate,
    compose,
    invert,
    iou,
    look_at,
    project_bbox,
    random_quaternions,
    wrap_angle,
)
from seqscene.models import make_box

angles = st.floats(-np.pi, np.pi, allow_nan=False)
coords = st.floats(-5, 5, allow_nan=False)


@st.composite
def poses(draw):
    t = [draw(coords) for _ in range(3)]
    q = np.array([draw(st.floats(-1, 1)) for _ in range(4)])
    if np.linalg.norm(q) < 1e-3:
        q = np.array([1.0, 0, 0, 0])
    return Pose6D(t, q)


@st.composite
def boxes(draw):
    x0 = draw(st.floats(-50, 50))
    y0 = draw(st.floats(-50, 50))
    return BBox2D(x0, y0, x0 + draw(st.floats(0.5, 60)), y0 + draw(st.floats(0.5, 60)))


def test_compose_identity_and_inverse():
    p = Pose6D.from_rpy([0.3, -0.2, 1.1], 0.4, -0.7, 2.0)
    assert compose(Pose6D.identity(), p).allclose(p)
    assert compose(p, invert(p)).allclose(Pose6D.identity())


def test_compose_translations_matches_matrix_product():
    got = compose(Pose6D.translate(1, 0, 0), Pose6D.translate(0, 2, 0))
    ref = Pose6D.translate(1, 0, 0).matrix() @ Pose6D.translate(0, 2, 0).matrix()
    assert got.allclose(Pose6D.translate(1, 2, 0))
    np.testing.assert_allclose(got.matrix(), ref, atol=1e-12)


def test_compose_matches_homogeneous_matrices_on_random_pairs():
    rng = np.random.default_rng(0)
    qs = random_quaternions(rng, 2000)
    ts = rng.uniform(-3, 3, (2000, 3))
    for k in range(1000):
        a, b = Pose6D(ts[2 * k], qs[2 * k]), Pose6D(ts[2 * k + 1], qs[2 * k + 1])
        np.testing.assert_allclose((a @ b).matrix(), a.matrix() @ b.matrix(), atol=1e-9)


@settings(max_examples=200, deadline=None)
@given(poses(), poses(), poses())
def test_compose_associative_and_unit_norm(a, b, c):
    left, right = (a @ b) @ c, a @ (b @ c)
    assert left.allclose(right, atol=1e-8)
    assert abs(np.linalg.norm(left.quaternion) - 1) < 1e-9


@settings(max_examples=300, deadline=None)
@given(angles, st.floats(-np.pi / 2 + 1e-3, np.pi / 2 - 1e-3), angles)
def test_rpy_round_trip(r, p, y):
    got = Pose6D.from_rpy([0, 0, 0], r, p, y).rpy()
    np.testing.assert_allclose(wrap_angle(got - [r, p, y]), 0, atol=1e-7)


def test_wrap_angle_examples():
    assert wrap_angle(np.radians(190)) == pytest.approx(np.radians(-170))
    assert abs(np.degrees(wrap_angle(np.radians(190)))) == pytest.approx(170)


def test_iou_examples():
    b = BBox2D(0, 0, 2, 2)
    assert iou(b, b) == 1.0
    assert iou(BBox2D(0, 0, 1, 1), BBox2D(2, 2, 3, 3)) == 0.0
    assert iou(b, BBox2D(1, 1, 3, 3)) == pytest.approx(1 / 7, abs=1e-9)


def _supersampled_iou(a: BBox2D, b: BBox2D, step: float) -> float:
    xs = np.arange(min(a.min_x, b.min_x), max(a.max_x, b.max_x), step) + step / 2
    ys = np.arange(min(a.min_y, b.min_y), max(a.max_y, b.max_y), step) + step / 2
    u, v = np.meshgrid(xs, ys)
    ina, inb = a.contains(u, v), b.contains(u, v)
    return np.count_nonzero(ina & inb) / np.count_nonzero(ina | inb)


def test_iou_matches_grid_counting_oracle():
    # 1000x supersampling of the unit pixel
    assert iou(BBox2D(0, 0, 2, 2), BBox2D(1, 1, 3, 3)) == pytest.approx(
        _supersampled_iou(BBox2D(0, 0, 2, 2), BBox2D(1, 1, 3, 3), 1e-3), abs=1e-6)
    rng = np.random.default_rng(3)
    for _ in range(20):
        x, y = rng.uniform(0, 5, 2)
        a = BBox2D(x, y, x + rng.uniform(1, 4), y + rng.uniform(1, 4))
        x, y = rng.uniform(0, 5, 2)
        b = BBox2D(x, y, x + rng.uniform(1, 4), y + rng.uniform(1, 4))
        assert iou(a, b) == pytest.approx(_supersampled_iou(a, b, 0.01), abs=0.01)


@settings(max_examples=300, deadline=None)
@given(boxes(), boxes())
def test_iou_symmetric_bounded_and_one_only_for_equal(a, b):
    v = iou(a, b)
    assert v == iou(b, a)
    assert 0.0 <= v <= 1.0
    if v >= 1 - 1e-12:
        np.testing.assert_allclose(a.as_tuple(), b.as_tuple(), atol=1e-6)


def test_bbox_rejects_degenerate():
    with pytest.raises(ValueError):
        BBox2D(0, 0, 0, 1)
    with pytest.raises(ValueError):
        BBox2D(0, 2, 1, 1)


def test_label_registry_unique():
    a = Label("a", Category.CLEANING)
    reg = LabelRegistry([a, Label("b")])
    assert reg.index("b") == 1 and reg["a"] is a
    with pytest.raises(ValueError):
        LabelRegistry([a, Label("a")])


def test_camera_invariants():
    with pytest.raises(ValueError):
        CameraIntrinsics(fx=0)
    with pytest.raises(ValueError):
        CameraIntrinsics(near=1.0, far=0.5)


def test_object_model_invariants():
    v = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0]], float)
    with pytest.raises(ValueError):
        ObjectModel(Label("x"), v, np.zeros((0, 3), int))
    with pytest.raises(ValueError):
        ObjectModel(Label("x"), np.array([[0, 0, 0], [1, 0, 0], [2, 0, 0]], float), [[0, 1, 2]])
    with pytest.raises(ValueError):
        ObjectModel(Label("x"), v, [[0, 1, 2]], bounding_radius=0.5)


def _unit_cube():
    return make_box(Label("cube"), 1.0, 1.0, 1.0)


def test_project_bbox_unit_cube_on_axis():
    cam = CameraIntrinsics(640, 480, 500, 500, 319.5, 239.5, 0.05, 10)
    box = project_bbox(_unit_cube(), Pose6D.translate(0, 0, 2), cam)
    # near face at z = 1.5 governs: half-width 500 * 0.5 / 1.5
    assert box.center == pytest.approx((cam.cx, cam.cy))
    assert box.width == pytest.approx(500 / 1.5)
    # per-vertex pinhole oracle
    pts = _unit_cube().vertices + [0, 0, 2]
    u = 500 * pts[:, 0] / pts[:, 2] + cam.cx
    assert box.min_x == pytest.approx(u.min()) and box.max_x == pytest.approx(u.max())


def test_project_bbox_behind_camera_and_shift():
    cam = CameraIntrinsics()
    with pytest.raises(NotVisible):
        project_bbox(_unit_cube(), Pose6D.translate(0, 0, -3), cam)
    a = project_bbox(make_box(Label("b"), 0.1, 0.1, 0.1), Pose6D.translate(0, 0, 1), cam)
    b = project_bbox(make_box(Label("b"), 0.1, 0.1, 0.1), Pose6D.translate(0.05, 0, 1), cam)
    assert b.center[0] > a.center[0]


def test_project_bbox_commutes_with_principal_point_shift():
    m = make_box(Label("b"), 0.1, 0.05, 0.08)
    p = Pose6D.from_rpy([0.02, -0.01, 0.8], 0.3, 0.2, 0.1)
    a = project_bbox(m, p, CameraIntrinsics())
    b = project_bbox(m, p, CameraIntrinsics(cx=159.5 + 7.0))
    assert b.min_x == pytest.approx(a.min_x + 7) and b.max_x == pytest.approx(a.max_x + 7)


def test_look_at_points_optical_axis_at_target():
    cam_pose = look_at([0, -0.45, 0.5], [0, 0, 0])
    target_cam = cam_pose.inverse().transform_points(np.zeros((1, 3)))[0]
    assert target_cam[:2] == pytest.approx([0, 0], abs=1e-12)
    assert target_cam[2] == pytest.approx(np.hypot(0.45, 0.5))


def test_scene_estimate_one_per_label_and_score_range():
    lab = Label("a")
    s = ObjectState(Pose6D(), BBox2D(0, 0, 1, 1), lab)
    assert SceneEstimate(((s, 0.5),)).k == 1
    with pytest.raises(ValueError):
        SceneEstimate(((s, 0.5), (s, 0.4)))
    with pytest.raises(ValueError):
        SceneEstimate(((s, 1.5),))
