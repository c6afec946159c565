"""Software z-buffer depth rendering, backprojection and cropping.

Triangles are rasterized at pixel centers with the top-left fill rule; depth
is the camera-frame z, interpolated perspective-correctly (1/z is affine in
screen space). Triangles that cross the near plane are clipped in camera
space. Back faces are not culled.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path

import numba
import numpy as np

from .geometry import BBox2D, CameraIntrinsics, ObjectModel, Pose6D

EMPTY = np.inf

# the portable pool avoids probing for an unavailable TBB runtime
if "NUMBA_THREADING_LAYER" not in os.environ:
    numba.config.THREADING_LAYER = "workqueue"


class DimensionMismatch(ValueError):
    pass


class EmptyCrop(ValueError):
    pass


# ---------------------------------------------------------------------------
# kernels


@numba.njit(cache=True, inline="always")
def _edge(ax, ay, bx, by, px, py):
    return (bx - ax) * (py - ay) - (by - ay) * (px - ax)


@numba.njit(cache=True, inline="always")
def _top_left(ax, ay, bx, by):
    dy = by - ay
    return dy < 0.0 or (dy == 0.0 and bx - ax > 0.0)


@numba.njit(cache=True)
def _raster_screen_tri(u, v, iz, fx, fy, cx, cy, near, far, x0, y0, zbuf):
    """Rasterize one projected triangle into ``zbuf`` (window origin x0, y0).

    u, v: pixel coordinates of the 3 vertices; iz: their inverse depths.
    """
    h, w = zbuf.shape
    area = _edge(u[0], v[0], u[1], v[1], u[2], v[2])
    if area == 0.0 or not np.isfinite(area):
        return
    i0, i1, i2 = 0, 1, 2
    if area < 0.0:
        i1, i2 = 2, 1
        area = -area
    u0, v0, z0 = u[i0], v[i0], iz[i0]
    u1, v1, z1 = u[i1], v[i1], iz[i1]
    u2, v2, z2 = u[i2], v[i2], iz[i2]

    a_lo = max(int(np.ceil(min(u0, u1, u2))), x0)
    a_hi = min(int(np.floor(max(u0, u1, u2))), x0 + w - 1)
    b_lo = max(int(np.ceil(min(v0, v1, v2))), y0)
    b_hi = min(int(np.floor(max(v0, v1, v2))), y0 + h - 1)
    if a_lo > a_hi or b_lo > b_hi:
        return

    tl0 = _top_left(u1, v1, u2, v2)
    tl1 = _top_left(u2, v2, u0, v0)
    tl2 = _top_left(u0, v0, u1, v1)
    inv_area = 1.0 / area
    for b in range(b_lo, b_hi + 1):
        py = float(b)
        for a in range(a_lo, a_hi + 1):
            px = float(a)
            w0 = _edge(u1, v1, u2, v2, px, py)
            if w0 < 0.0 or (w0 == 0.0 and not tl0):
                continue
            w1 = _edge(u2, v2, u0, v0, px, py)
            if w1 < 0.0 or (w1 == 0.0 and not tl1):
                continue
            w2 = _edge(u0, v0, u1, v1, px, py)
            if w2 < 0.0 or (w2 == 0.0 and not tl2):
                continue
            inv_z = (w0 * z0 + w1 * z1 + w2 * z2) * inv_area
            if inv_z <= 0.0:
                continue
            z = 1.0 / inv_z
            if z <= near or z >= far:
                continue
            if z < zbuf[b - y0, a - x0]:
                zbuf[b - y0, a - x0] = z


@numba.njit(cache=True)
def _raster_mesh(pts, faces, fx, fy, cx, cy, near, far, x0, y0, zbuf):
    """Rasterize camera-frame vertices ``pts`` (V, 3) with ``faces`` (F, 3)."""
    u = np.empty(3)
    v = np.empty(3)
    iz = np.empty(3)
    poly = np.empty((4, 3))
    for f in range(faces.shape[0]):
        n_front = 0
        for k in range(3):
            if pts[faces[f, k], 2] >= near:
                n_front += 1
        if n_front == 0:
            continue
        if n_front == 3:
            for k in range(3):
                p = pts[faces[f, k]]
                iz[k] = 1.0 / p[2]
                u[k] = fx * p[0] * iz[k] + cx
                v[k] = fy * p[1] * iz[k] + cy
            _raster_screen_tri(u, v, iz, fx, fy, cx, cy, near, far, x0, y0, zbuf)
            continue
        # Sutherland-Hodgman against z = near
        m = 0
        for k in range(3):
            p = pts[faces[f, k]]
            q = pts[faces[f, (k + 1) % 3]]
            p_in = p[2] >= near
            q_in = q[2] >= near
            if p_in:
                poly[m, :] = p
                m += 1
            if p_in != q_in:
                t = (near - p[2]) / (q[2] - p[2])
                poly[m, :] = p + t * (q - p)
                poly[m, 2] = near
                m += 1
        for k in range(1, m - 1):
            for j in range(3):
                idx = 0 if j == 0 else k + j - 1
                iz[j] = 1.0 / poly[idx, 2]
                u[j] = fx * poly[idx, 0] * iz[j] + cx
                v[j] = fy * poly[idx, 1] * iz[j] + cy
            _raster_screen_tri(u, v, iz, fx, fy, cx, cy, near, far, x0, y0, zbuf)


@numba.njit(cache=True, parallel=True)
def _batch_inliers(rots, trans, verts, faces, fx, fy, cx, cy, near, far, x0, y0, obs, eps):
    """For each pose (camera frame) render the mesh into the observation window
    and count pixels whose rendered and observed points lie within ``eps``."""
    n = rots.shape[0]
    h, w = obs.shape[0], obs.shape[1]
    inliers = np.zeros(n, dtype=np.int64)
    rendered = np.zeros(n, dtype=np.int64)
    eps2 = eps * eps
    for i in numba.prange(n):
        pts = np.empty((verts.shape[0], 3))
        for k in range(verts.shape[0]):
            for r in range(3):
                pts[k, r] = (
                    rots[i, r, 0] * verts[k, 0]
                    + rots[i, r, 1] * verts[k, 1]
                    + rots[i, r, 2] * verts[k, 2]
                    + trans[i, r]
                )
        zbuf = np.full((h, w), np.inf)
        _raster_mesh(pts, faces, fx, fy, cx, cy, near, far, x0, y0, zbuf)
        cnt = 0
        ren = 0
        for b in range(h):
            ry = (b + y0 - cy) / fy
            for a in range(w):
                z = zbuf[b, a]
                if z == np.inf:
                    continue
                ren += 1
                ox = obs[b, a, 0]
                if ox != ox:  # NaN marks an invalid observed point
                    continue
                rx = (a + x0 - cx) / fx
                dx = rx * z - ox
                dy = ry * z - obs[b, a, 1]
                dz = z - obs[b, a, 2]
                if dx * dx + dy * dy + dz * dz < eps2:
                    cnt += 1
        inliers[i] = cnt
        rendered[i] = ren
    return inliers, rendered


# ---------------------------------------------------------------------------
# data types


@dataclass(frozen=True, eq=False)
class DepthImage:
    """Row-major depth in meters; ``inf`` marks pixels with no surface."""

    depth: np.ndarray
    near: float = 0.0
    far: float = np.inf

    @property
    def height(self) -> int:
        return self.depth.shape[0]

    @property
    def width(self) -> int:
        return self.depth.shape[1]

    @property
    def valid(self) -> np.ndarray:
        return np.isfinite(self.depth)

    def __eq__(self, other):
        if not isinstance(other, DepthImage):
            return NotImplemented
        return bool(np.array_equal(self.depth, other.depth))


@dataclass(frozen=True, eq=False)
class PointCloud:
    """Organized camera-frame cloud; invalid points are NaN.

    ``origin`` is the image pixel of ``points[0, 0]`` (non-zero after cropping).
    """

    points: np.ndarray
    origin: tuple[int, int] = (0, 0)

    @property
    def height(self) -> int:
        return self.points.shape[0]

    @property
    def width(self) -> int:
        return self.points.shape[1]

    @property
    def valid(self) -> np.ndarray:
        return ~np.isnan(self.points[..., 0])

    @property
    def valid_count(self) -> int:
        return int(self.valid.sum())

    def valid_points(self) -> np.ndarray:
        return self.points[self.valid]


def remove_below_height(cloud: PointCloud, cam_pose: Pose6D, height: float) -> PointCloud:
    """Invalidate points whose world z is below ``height`` (e.g. the known
    support plane plus a margin)."""
    world_z = cloud.points @ cam_pose.rotation[2] + cam_pose.translation[2]
    pts = cloud.points.copy()
    pts[world_z < height] = np.nan
    return PointCloud(pts, cloud.origin)


# ---------------------------------------------------------------------------


def _camera_frame_vertices(model: ObjectModel, pose: Pose6D, cam_pose: Pose6D | None):
    if cam_pose is not None:
        pose = cam_pose.inverse() @ pose
    return np.ascontiguousarray(pose.transform_points(model.vertices))


def _render_into(zbuf, pts, faces, cam: CameraIntrinsics, x0=0, y0=0):
    _raster_mesh(pts, faces, cam.fx, cam.fy, cam.cx, cam.cy, cam.near, cam.far, x0, y0, zbuf)


def render_depth(
    model: ObjectModel, pose: Pose6D, cam: CameraIntrinsics, cam_pose: Pose6D | None = None
) -> DepthImage:
    """Depth image of a single posed mesh."""
    return render_scene_depth([(model, pose)], cam, cam_pose)


def render_scene_depth(
    objects, cam: CameraIntrinsics, cam_pose: Pose6D | None = None
) -> DepthImage:
    """Depth image of several posed meshes sharing one z-buffer."""
    zbuf = np.full((cam.height, cam.width), EMPTY)
    for model, pose in objects:
        pts = _camera_frame_vertices(model, pose, cam_pose)
        _render_into(zbuf, pts, model.faces, cam)
    return DepthImage(zbuf, cam.near, cam.far)


def backproject(d: DepthImage, cam: CameraIntrinsics) -> PointCloud:
    if d.depth.shape != (cam.height, cam.width):
        raise DimensionMismatch(
            f"depth image is {d.width}x{d.height}, camera is {cam.width}x{cam.height}"
        )
    z = np.where(np.isfinite(d.depth), d.depth, np.nan)
    a = np.arange(cam.width, dtype=np.float64)[None, :]
    b = np.arange(cam.height, dtype=np.float64)[:, None]
    pts = np.stack([(a - cam.cx) * z / cam.fx, (b - cam.cy) * z / cam.fy, z], axis=-1)
    return PointCloud(pts)


def crop(cloud: PointCloud, box: BBox2D) -> PointCloud:
    """Sub-cloud of pixel centers inside ``box`` (half-open on the max side)."""
    ox, oy = cloud.origin
    local = BBox2D(box.min_x - ox, box.min_y - oy, box.max_x - ox, box.max_y - oy)
    x0, y0, x1, y1 = local.pixel_window(cloud.width, cloud.height)
    if x1 <= x0 or y1 <= y0:
        raise EmptyCrop(f"box {box.as_tuple()} misses the image")
    return PointCloud(cloud.points[y0:y1, x0:x1].copy(), (ox + x0, oy + y0))


def add_depth_noise(d: DepthImage, sigma: float, seed) -> DepthImage:
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    if sigma == 0:
        return DepthImage(d.depth.copy(), d.near, d.far)
    rng = np.random.default_rng(seed)
    noise = rng.normal(0.0, sigma, size=d.depth.shape)
    valid = np.isfinite(d.depth)
    out = d.depth.copy()
    # keep noisy depths strictly inside the clip range
    lo = np.nextafter(d.near, np.inf)
    hi = np.nextafter(d.far, -np.inf)
    out[valid] = np.clip(d.depth[valid] + noise[valid], lo, hi)
    return DepthImage(out, d.near, d.far)


def count_inliers(
    rotations: np.ndarray,
    translations: np.ndarray,
    model: ObjectModel,
    obs: PointCloud,
    cam: CameraIntrinsics,
    epsilon: float,
) -> tuple[np.ndarray, np.ndarray]:
    """Batched render-and-compare over camera-frame poses.

    Renders each pose only inside the window covered by ``obs`` and returns
    ``(inlier_counts, rendered_pixel_counts)``.
    """
    return _batch_inliers(
        np.ascontiguousarray(rotations, dtype=np.float64),
        np.ascontiguousarray(translations, dtype=np.float64),
        model.vertices,
        model.faces,
        cam.fx, cam.fy, cam.cx, cam.cy, cam.near, cam.far,
        obs.origin[0], obs.origin[1],
        np.ascontiguousarray(obs.points),
        float(epsilon),
    )


# ---------------------------------------------------------------------------
# debug export


def write_pgm(path, d: DepthImage) -> None:
    """16-bit binary PGM, depth in millimeters; empty pixels are 0."""
    mm = np.where(np.isfinite(d.depth), np.round(d.depth * 1000.0), 0.0)
    mm = np.clip(mm, 0, 65535).astype(">u2")
    header = f"P5\n{d.width} {d.height}\n65535\n".encode()
    Path(path).write_bytes(header + mm.tobytes())


def read_pgm(path) -> np.ndarray:
    """Inverse of :func:`write_pgm`; returns depth in meters (``inf`` empty)."""
    data = Path(path).read_bytes()
    parts = data.split(b"\n", 3)
    if parts[0] != b"P5":
        raise ValueError("not a binary PGM")
    w, h = (int(v) for v in parts[1].split())
    mm = np.frombuffer(parts[3], dtype=">u2").reshape(h, w).astype(np.float64)
    return np.where(mm > 0, mm / 1000.0, np.inf)


def write_cloud_ply(path, cloud: PointCloud) -> None:
    from .models import write_ply

    write_ply(path, cloud.valid_points())
