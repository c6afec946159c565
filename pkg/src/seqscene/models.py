"""Procedural primitive meshes (box, cylinder, L-shape) and ASCII PLY I/O."""

from __future__ import annotations

import itertools
from pathlib import Path

import numpy as np

from .geometry import Category, Label, LabelRegistry, ObjectModel

_CYLINDER_SEGMENTS = 24


def _cube_rotations() -> np.ndarray:
    """The 24 proper rotations permuting the coordinate axes (with signs)."""
    mats = []
    for perm in itertools.permutations(range(3)):
        for signs in itertools.product((1.0, -1.0), repeat=3):
            m = np.zeros((3, 3))
            for row, (col, s) in enumerate(zip(perm, signs)):
                m[row, col] = s
            if np.linalg.det(m) > 0:
                mats.append(m)
    return np.array(mats)


def _vertex_symmetries(vertices: np.ndarray, candidates: np.ndarray) -> np.ndarray:
    keep = []
    for r in candidates:
        moved = vertices @ r.T
        d = np.linalg.norm(moved[:, None, :] - vertices[None, :, :], axis=2)
        if np.all(d.min(axis=1) < 1e-9):
            keep.append(r)
    return np.array(keep)


def _rot_z(a: float) -> np.ndarray:
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def _extrude(polygon: np.ndarray, cap_tris: list[tuple[int, int, int]], height: float):
    """Prism from a counter-clockwise xy outline and its cap triangulation."""
    m = len(polygon)
    h = 0.5 * height
    bottom = np.column_stack([polygon, np.full(m, -h)])
    top = np.column_stack([polygon, np.full(m, h)])
    verts = np.vstack([bottom, top])
    faces = []
    for a, b, c in cap_tris:
        faces.append((m + a, m + b, m + c))
        faces.append((c, b, a))
    for i in range(m):
        j = (i + 1) % m
        faces.append((i, j, m + j))
        faces.append((i, m + j, m + i))
    return verts, np.array(faces)


def make_box(label: Label, sx: float, sy: float, sz: float) -> ObjectModel:
    hx, hy, hz = 0.5 * sx, 0.5 * sy, 0.5 * sz
    verts = np.array(
        [[x, y, z] for z in (-hz, hz) for y in (-hy, hy) for x in (-hx, hx)], dtype=np.float64
    )
    # outward winding per face
    faces = np.array(
        [
            [0, 2, 3], [0, 3, 1],  # z-
            [4, 5, 7], [4, 7, 6],  # z+
            [0, 1, 5], [0, 5, 4],  # y-
            [2, 6, 7], [2, 7, 3],  # y+
            [0, 4, 6], [0, 6, 2],  # x-
            [1, 3, 7], [1, 7, 5],  # x+
        ]
    )
    return ObjectModel(
        label,
        verts,
        faces,
        rest_offset=hz,
        symmetries=_vertex_symmetries(verts, _cube_rotations()),
    )


def make_cylinder(
    label: Label, radius: float, height: float, segments: int = _CYLINDER_SEGMENTS
) -> ObjectModel:
    ang = 2 * np.pi * np.arange(segments) / segments
    poly = radius * np.column_stack([np.cos(ang), np.sin(ang)])
    caps = [(0, i, i + 1) for i in range(1, segments - 1)]
    verts, faces = _extrude(poly, caps, height)
    flip = np.diag([1.0, -1.0, -1.0])
    spins = [_rot_z(a) for a in ang]
    sym = np.array(spins + [s @ flip for s in spins])
    return ObjectModel(label, verts, faces, rest_offset=0.5 * height, symmetries=sym)


def make_l_shape(
    label: Label, leg_x: float, leg_y: float, thickness: float, height: float
) -> ObjectModel:
    """An L-shaped plate lying flat: legs along +x and +y, extruded along z."""
    t = thickness
    poly = np.array([[0, 0], [leg_x, 0], [leg_x, t], [t, t], [t, leg_y], [0, leg_y]], float)
    poly -= 0.5 * np.array([leg_x, leg_y])
    caps = [(0, 1, 2), (0, 2, 3), (0, 3, 5), (3, 4, 5)]
    verts, faces = _extrude(poly, caps, height)
    return ObjectModel(
        label,
        verts,
        faces,
        rest_offset=0.5 * height,
        symmetries=_vertex_symmetries(verts, _cube_rotations()),
    )


def model_from_spec(label: Label, spec: dict) -> ObjectModel:
    kind = spec["shape"]
    if kind == "box":
        return make_box(label, *spec["size"])
    if kind == "cylinder":
        return make_cylinder(label, spec["radius"], spec["height"])
    if kind == "l_shape":
        return make_l_shape(label, spec["leg_x"], spec["leg_y"], spec["thickness"], spec["height"])
    raise ValueError(f"unknown shape {kind!r}")


DEFAULT_OBJECTS = {
    "tide": ("cleaning", {"shape": "box", "size": [0.10, 0.06, 0.12]}),
    "sponge": ("cleaning", {"shape": "box", "size": [0.09, 0.06, 0.035]}),
    "spray_bottle": ("cleaning", {"shape": "cylinder", "radius": 0.035, "height": 0.15}),
    "clorox": ("cleaning", {"shape": "cylinder", "radius": 0.045, "height": 0.10}),
    "sugar": ("non_cleaning", {"shape": "box", "size": [0.09, 0.07, 0.10]}),
    "toy": ("non_cleaning", {"shape": "l_shape", "leg_x": 0.10, "leg_y": 0.07, "thickness": 0.035, "height": 0.04}),
    "waterpot": ("non_cleaning", {"shape": "cylinder", "radius": 0.05, "height": 0.08}),
    "ranch": ("non_cleaning", {"shape": "l_shape", "leg_x": 0.08, "leg_y": 0.12, "thickness": 0.03, "height": 0.05}),
}


def build_models(objects: dict = DEFAULT_OBJECTS) -> tuple[LabelRegistry, dict[str, ObjectModel]]:
    labels = [Label(name, Category(cat)) for name, (cat, _) in objects.items()]
    registry = LabelRegistry(labels)
    models = {lab.identifier: model_from_spec(lab, objects[lab.identifier][1]) for lab in labels}
    return registry, models


# ---------------------------------------------------------------------------
# ASCII PLY


def write_ply(path, vertices: np.ndarray, faces: np.ndarray | None = None) -> None:
    vertices = np.asarray(vertices, dtype=np.float64).reshape(-1, 3)
    lines = ["ply", "format ascii 1.0", f"element vertex {len(vertices)}",
             "property float x", "property float y", "property float z"]
    if faces is not None:
        lines += [f"element face {len(faces)}", "property list uchar int vertex_indices"]
    lines.append("end_header")
    lines += [f"{x:.9g} {y:.9g} {z:.9g}" for x, y, z in vertices]
    if faces is not None:
        lines += [f"3 {a} {b} {c}" for a, b, c in np.asarray(faces)]
    Path(path).write_text("\n".join(lines) + "\n")


def read_ply(path) -> tuple[np.ndarray, np.ndarray]:
    """Read an ASCII PLY with a vertex list and (optionally) triangle faces."""
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0].strip() != "ply":
        raise ValueError(f"{path}: not a PLY file")
    n_vert = n_face = 0
    i = 1
    while lines[i].strip() != "end_header":
        parts = lines[i].split()
        if parts[:1] == ["format"] and parts[1] != "ascii":
            raise ValueError(f"{path}: only ASCII PLY is supported")
        if parts[:2] == ["element", "vertex"]:
            n_vert = int(parts[2])
        elif parts[:2] == ["element", "face"]:
            n_face = int(parts[2])
        i += 1
    body = lines[i + 1:]
    verts = np.array([[float(v) for v in ln.split()[:3]] for ln in body[:n_vert]]).reshape(-1, 3)
    faces = []
    for ln in body[n_vert:n_vert + n_face]:
        idx = [int(v) for v in ln.split()]
        if idx[0] != 3:
            raise ValueError(f"{path}: only triangular faces are supported")
        faces.append(idx[1:4])
    return verts, np.array(faces, dtype=np.int64).reshape(-1, 3)


def save_model(path, model: ObjectModel) -> None:
    write_ply(path, model.vertices, model.faces)


def load_model(path, label: Label, **kwargs) -> ObjectModel:
    verts, faces = read_ply(path)
    return ObjectModel(label, verts, faces, **kwargs)
