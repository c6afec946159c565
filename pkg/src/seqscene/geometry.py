"""Poses, image boxes, cameras, labels and object containers.

Quaternions are stored scalar-first ``(w, x, y, z)``. Camera frames follow the
OpenCV convention (x right, y down, z forward) and pixel ``(a, b)`` has its
center at image coordinate ``(a, b)``, so an image of width ``W`` spans
``[-0.5, W - 0.5]`` horizontally.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.spatial.transform import Rotation


class NotVisible(Exception):
    """The object does not project into the image."""


# ---------------------------------------------------------------------------
# quaternion helpers (vectorized over leading axes)


def quat_normalize(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    # canonical hemisphere keeps equality checks stable
    return np.where(q[..., :1] < 0.0, -q, q)


def quat_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    aw, ax, ay, az = np.moveaxis(np.asarray(a, dtype=np.float64), -1, 0)
    bw, bx, by, bz = np.moveaxis(np.asarray(b, dtype=np.float64), -1, 0)
    return np.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        axis=-1,
    )


def quat_conjugate(q: np.ndarray) -> np.ndarray:
    return np.asarray(q, dtype=np.float64) * np.array([1.0, -1.0, -1.0, -1.0])


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    w, x, y, z = np.moveaxis(q, -1, 0)
    m = np.empty(q.shape[:-1] + (3, 3))
    m[..., 0, 0] = 1 - 2 * (y * y + z * z)
    m[..., 0, 1] = 2 * (x * y - w * z)
    m[..., 0, 2] = 2 * (x * z + w * y)
    m[..., 1, 0] = 2 * (x * y + w * z)
    m[..., 1, 1] = 1 - 2 * (x * x + z * z)
    m[..., 1, 2] = 2 * (y * z - w * x)
    m[..., 2, 0] = 2 * (x * z - w * y)
    m[..., 2, 1] = 2 * (y * z + w * x)
    m[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return m


def matrix_to_quat(m: np.ndarray) -> np.ndarray:
    xyzw = Rotation.from_matrix(np.asarray(m, dtype=np.float64)).as_quat()
    return quat_normalize(np.roll(xyzw, 1, axis=-1))


def quat_from_rotvec(v: np.ndarray) -> np.ndarray:
    """Exponential map from axis-angle vectors to unit quaternions."""
    v = np.asarray(v, dtype=np.float64)
    angle = np.linalg.norm(v, axis=-1, keepdims=True)
    half = 0.5 * angle
    # sin(x/2)/x with its series near zero
    small = angle < 1e-8
    scale = np.where(small, 0.5 - angle**2 / 48.0, np.sin(half) / np.where(small, 1.0, angle))
    return np.concatenate([np.cos(half), v * scale], axis=-1)


def random_quaternions(rng: np.random.Generator, n: int) -> np.ndarray:
    """Uniformly distributed rotations (Shoemake's subgroup method)."""
    u1, u2, u3 = rng.random((3, n))
    a, b = np.sqrt(1.0 - u1), np.sqrt(u1)
    q = np.stack(
        [
            b * np.cos(2 * np.pi * u3),
            a * np.sin(2 * np.pi * u2),
            a * np.cos(2 * np.pi * u2),
            b * np.sin(2 * np.pi * u3),
        ],
        axis=-1,
    )
    return quat_normalize(q)


def wrap_angle(a):
    """Wrap angles into [-pi, pi)."""
    return (np.asarray(a) + np.pi) % (2 * np.pi) - np.pi


# ---------------------------------------------------------------------------


def _frozen(a) -> np.ndarray:
    a = np.array(a, dtype=np.float64)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Pose6D:
    """Rigid transform mapping points from a child frame into a parent frame."""

    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    quaternion: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))

    def __post_init__(self):
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        q = np.asarray(self.quaternion, dtype=np.float64).reshape(4)
        if not (np.all(np.isfinite(t)) and np.all(np.isfinite(q))):
            raise ValueError("pose components must be finite")
        if np.linalg.norm(q) < 1e-12:
            raise ValueError("zero quaternion")
        object.__setattr__(self, "translation", _frozen(t))
        object.__setattr__(self, "quaternion", _frozen(quat_normalize(q)))

    @classmethod
    def identity(cls) -> Pose6D:
        return cls()

    @classmethod
    def translate(cls, x: float, y: float, z: float) -> Pose6D:
        return cls(np.array([x, y, z]))

    @classmethod
    def from_rpy(cls, translation, roll: float, pitch: float, yaw: float) -> Pose6D:
        """Build a pose from extrinsic x-y-z (roll, pitch, yaw) angles in radians."""
        xyzw = Rotation.from_euler("xyz", [roll, pitch, yaw]).as_quat()
        return cls(translation, np.roll(xyzw, 1))

    @classmethod
    def from_matrix(cls, m: np.ndarray) -> Pose6D:
        m = np.asarray(m, dtype=np.float64)
        return cls(m[:3, 3], matrix_to_quat(m[:3, :3]))

    @property
    def rotation(self) -> np.ndarray:
        return quat_to_matrix(self.quaternion)

    def rpy(self) -> np.ndarray:
        xyzw = np.roll(self.quaternion, -1)
        return Rotation.from_quat(xyzw).as_euler("xyz")

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def compose(self, other: Pose6D) -> Pose6D:
        """Return ``self ∘ other`` (apply ``other`` first)."""
        t = self.rotation @ other.translation + self.translation
        return Pose6D(t, quat_multiply(self.quaternion, other.quaternion))

    __matmul__ = compose

    def inverse(self) -> Pose6D:
        qc = quat_conjugate(self.quaternion)
        return Pose6D(-(quat_to_matrix(qc) @ self.translation), qc)

    def transform_points(self, pts: np.ndarray) -> np.ndarray:
        return np.asarray(pts, dtype=np.float64) @ self.rotation.T + self.translation

    def allclose(self, other: Pose6D, atol: float = 1e-9) -> bool:
        # q and -q are the same rotation
        dq = min(
            np.abs(self.quaternion - other.quaternion).max(),
            np.abs(self.quaternion + other.quaternion).max(),
        )
        return bool(np.abs(self.translation - other.translation).max() <= atol and dq <= atol)

    def __eq__(self, other):
        if not isinstance(other, Pose6D):
            return NotImplemented
        return bool(
            np.array_equal(self.translation, other.translation)
            and np.array_equal(self.quaternion, other.quaternion)
        )

    def __hash__(self):
        return hash((self.translation.tobytes(), self.quaternion.tobytes()))

    def __repr__(self):
        t = ", ".join(f"{v:.4f}" for v in self.translation)
        q = ", ".join(f"{v:.4f}" for v in self.quaternion)
        return f"Pose6D(t=[{t}], q=[{q}])"


def compose(a: Pose6D, b: Pose6D) -> Pose6D:
    return a.compose(b)


def invert(p: Pose6D) -> Pose6D:
    return p.inverse()


@dataclass(frozen=True)
class BBox2D:
    min_x: float
    min_y: float
    max_x: float
    max_y: float

    def __post_init__(self):
        vals = (self.min_x, self.min_y, self.max_x, self.max_y)
        if not all(np.isfinite(v) for v in vals):
            raise ValueError(f"non-finite box {vals}")
        if not (self.max_x > self.min_x and self.max_y > self.min_y):
            raise ValueError(f"degenerate box {vals}")
        for name, v in zip(("min_x", "min_y", "max_x", "max_y"), vals):
            object.__setattr__(self, name, float(v))

    @property
    def width(self) -> float:
        return self.max_x - self.min_x

    @property
    def height(self) -> float:
        return self.max_y - self.min_y

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def center(self) -> tuple[float, float]:
        return (0.5 * (self.min_x + self.max_x), 0.5 * (self.min_y + self.max_y))

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.min_x, self.min_y, self.max_x, self.max_y)

    def contains(self, u, v):
        """Half-open membership ``min <= u < max`` (same rule as cropping)."""
        return (u >= self.min_x) & (u < self.max_x) & (v >= self.min_y) & (v < self.max_y)

    def pixel_window(self, width: int, height: int) -> tuple[int, int, int, int]:
        """Integer pixel range ``(x0, y0, x1, y1)`` (exclusive end) of pixel
        centers inside the box, clipped to the image."""
        x0 = max(int(np.ceil(self.min_x)), 0)
        y0 = max(int(np.ceil(self.min_y)), 0)
        x1 = min(int(np.ceil(self.max_x)), width)
        y1 = min(int(np.ceil(self.max_y)), height)
        return x0, y0, x1, y1


def iou(a: BBox2D, b: BBox2D) -> float:
    iw = min(a.max_x, b.max_x) - max(a.min_x, b.min_x)
    ih = min(a.max_y, b.max_y) - max(a.min_y, b.min_y)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


class Category(str, enum.Enum):
    CLEANING = "cleaning"
    NON_CLEANING = "non_cleaning"


@dataclass(frozen=True)
class Label:
    identifier: str
    category: Category = Category.NON_CLEANING

    def __post_init__(self):
        object.__setattr__(self, "category", Category(self.category))

    def __str__(self):
        return self.identifier


class LabelRegistry:
    """Ordered collection of labels with unique identifiers."""

    def __init__(self, labels: Sequence[Label]):
        ids = [lab.identifier for lab in labels]
        dup = {i for i in ids if ids.count(i) > 1}
        if dup:
            raise ValueError(f"duplicate label identifiers: {sorted(dup)}")
        self._labels = list(labels)
        self._index = {lab.identifier: k for k, lab in enumerate(self._labels)}

    def __len__(self):
        return len(self._labels)

    def __iter__(self):
        return iter(self._labels)

    def __getitem__(self, key) -> Label:
        if isinstance(key, str):
            return self._labels[self._index[key]]
        return self._labels[key]

    def index(self, label: Label | str) -> int:
        return self._index[label if isinstance(label, str) else label.identifier]


@dataclass(frozen=True)
class CameraIntrinsics:
    width: int = 320
    height: int = 240
    fx: float = 262.5
    fy: float = 262.5
    cx: float = 159.5
    cy: float = 119.5
    near: float = 0.05
    far: float = 5.0

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise ValueError("image dimensions must be positive")
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 < self.near < self.far):
            raise ValueError("need 0 < near < far")

    def project(self, pts_cam: np.ndarray) -> np.ndarray:
        pts_cam = np.asarray(pts_cam, dtype=np.float64)
        z = pts_cam[..., 2]
        return np.stack(
            [self.fx * pts_cam[..., 0] / z + self.cx, self.fy * pts_cam[..., 1] / z + self.cy],
            axis=-1,
        )

    def image_box(self) -> BBox2D:
        return BBox2D(-0.5, -0.5, self.width - 0.5, self.height - 0.5)

    def scaled(self, factor: float) -> CameraIntrinsics:
        """Same field of view at ``factor`` times the resolution."""
        return CameraIntrinsics(
            width=int(round(self.width * factor)),
            height=int(round(self.height * factor)),
            fx=self.fx * factor,
            fy=self.fy * factor,
            cx=(self.cx + 0.5) * factor - 0.5,
            cy=(self.cy + 0.5) * factor - 0.5,
            near=self.near,
            far=self.far,
        )


def look_at(eye, target, up=(0.0, 0.0, 1.0)) -> Pose6D:
    """World pose of an OpenCV camera at ``eye`` looking at ``target``."""
    eye = np.asarray(eye, dtype=np.float64)
    z = np.asarray(target, dtype=np.float64) - eye
    z /= np.linalg.norm(z)
    x = np.cross(z, np.asarray(up, dtype=np.float64))
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    m = np.eye(4)
    m[:3, :3] = np.stack([x, y, z], axis=1)
    m[:3, 3] = eye
    return Pose6D.from_matrix(m)


@dataclass(frozen=True, eq=False)
class ObjectModel:
    """A labeled triangle mesh in its own frame (meters).

    ``symmetries`` holds object-frame rotations that leave the shape
    unchanged; pose-error metrics minimize over them. ``rest_offset`` is the
    height of the frame origin above a supporting plane when upright.
    """

    label: Label
    vertices: np.ndarray
    faces: np.ndarray
    bounding_radius: float = 0.0
    rest_offset: float = 0.0
    symmetries: np.ndarray = field(default_factory=lambda: np.eye(3)[None])

    def __post_init__(self):
        v = np.ascontiguousarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        f = np.ascontiguousarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if len(f) == 0:
            raise ValueError("mesh has no triangles")
        if f.min() < 0 or f.max() >= len(v):
            raise ValueError("face index out of range")
        tri = v[f]
        areas = 0.5 * np.linalg.norm(np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]), axis=1)
        if np.any(areas <= 1e-12):
            raise ValueError("degenerate triangle in mesh")
        extent = float(np.linalg.norm(v, axis=1).max())
        radius = self.bounding_radius or extent
        if extent > radius + 1e-12:
            raise ValueError(f"mesh extends to {extent:.4f} m beyond bounding radius {radius:.4f}")
        v.setflags(write=False)
        f.setflags(write=False)
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "faces", f)
        object.__setattr__(self, "bounding_radius", float(radius))
        sym = np.asarray(self.symmetries, dtype=np.float64).reshape(-1, 3, 3)
        object.__setattr__(self, "symmetries", sym)

    @property
    def triangles(self) -> np.ndarray:
        return self.vertices[self.faces]


@dataclass(frozen=True)
class ObjectState:
    pose: Pose6D
    bbox: BBox2D
    label: Label


@dataclass(frozen=True)
class SceneEstimate:
    objects: tuple[tuple[ObjectState, float], ...] = ()
    track_ids: tuple[int, ...] = ()

    def __post_init__(self):
        labels = [s.label.identifier for s, _ in self.objects]
        if len(set(labels)) != len(labels):
            raise ValueError("scene estimate holds more than one object per label")
        if self.track_ids and len(self.track_ids) != len(self.objects):
            raise ValueError("track_ids must align with objects")
        for _, score in self.objects:
            if not 0.0 <= score <= 1.0:
                raise ValueError(f"posterior score {score} outside [0, 1]")

    @property
    def k(self) -> int:
        return len(self.objects)


def project_bbox(
    model: ObjectModel, pose: Pose6D, cam: CameraIntrinsics, cam_pose: Pose6D | None = None
) -> BBox2D:
    """Tight image box of the mesh vertices in front of the near plane.

    ``pose`` is the object's pose in the world; ``cam_pose`` the camera's
    (identity when omitted, i.e. ``pose`` already in the camera frame).
    """
    if cam_pose is not None:
        pose = cam_pose.inverse() @ pose
    pts = pose.transform_points(model.vertices)
    pts = pts[pts[:, 2] > cam.near]
    if len(pts) == 0:
        raise NotVisible("all vertices behind the near plane")
    uv = cam.project(pts)
    lo = np.maximum(uv.min(axis=0), [-0.5, -0.5])
    hi = np.minimum(uv.max(axis=0), [cam.width - 0.5, cam.height - 0.5])
    if hi[0] <= lo[0] or hi[1] <= lo[1]:
        raise NotVisible("projection misses the image")
    return BBox2D(lo[0], lo[1], hi[0], hi[1])
