"""Synthetic detector/recognizer and confidence-ratio proposal thresholding."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import TYPE_CHECKING

import numpy as np

from .geometry import BBox2D, CameraIntrinsics, Label, LabelRegistry, NotVisible, Pose6D, project_bbox
from .render import render_depth, render_scene_depth

if TYPE_CHECKING:
    from .world import WorldState


@dataclass(frozen=True)
class Detection:
    """An image box with detection and per-label recognition confidences.

    ``truth`` is simulator bookkeeping (index of the generating world object,
    or ``None`` for a spurious box); the estimator never reads it.
    """

    bbox: BBox2D
    box_confidence: float
    label_confidences: dict[Label, float]
    truth: int | None = None

    def __post_init__(self):
        if not 0.0 <= self.box_confidence <= 1.0:
            raise ValueError("box_confidence must be in [0, 1]")
        if not self.label_confidences:
            raise ValueError("detection needs at least one label confidence")
        if any(not 0.0 <= c <= 1.0 for c in self.label_confidences.values()):
            raise ValueError("label confidences must be in [0, 1]")

    def confidence(self, label: Label) -> float:
        return self.label_confidences.get(label, 0.0)

    def top_labels(self, k: int = 3) -> list[tuple[Label, float]]:
        return sorted(self.label_confidences.items(), key=lambda kv: -kv[1])[:k]

    @property
    def spurious(self) -> bool:
        return self.truth is None


@dataclass(frozen=True)
class DetectorNoiseConfig:
    miss_rate: float = 0.0
    false_positive_rate: float = 0.0
    bbox_jitter_sigma: float = 0.0
    confusion: np.ndarray | None = None
    confidence_concentration: float = np.inf
    box_confidence_range: tuple[float, float] = (1.0, 1.0)
    fp_box_confidence_range: tuple[float, float] = (0.3, 0.8)
    min_visible_fraction: float = 0.25

    def __post_init__(self):
        if not 0.0 <= self.miss_rate <= 1.0:
            raise ValueError("miss_rate must be in [0, 1]")
        if self.false_positive_rate < 0:
            raise ValueError("false_positive_rate must be >= 0")
        if self.bbox_jitter_sigma < 0:
            raise ValueError("bbox_jitter_sigma must be >= 0")
        if not self.confidence_concentration > 0:
            raise ValueError("confidence_concentration must be > 0")
        if self.confusion is not None:
            c = np.asarray(self.confusion, dtype=np.float64)
            if c.ndim != 2 or c.shape[0] != c.shape[1] or np.any(c < 0):
                raise ValueError("confusion must be a square non-negative matrix")
            if np.any(np.abs(c.sum(axis=1) - 1.0) > 1e-9):
                raise ValueError("confusion rows must sum to 1")
            c.setflags(write=False)
            object.__setattr__(self, "confusion", c)
        for lo, hi in (self.box_confidence_range, self.fp_box_confidence_range):
            if not 0.0 <= lo <= hi <= 1.0:
                raise ValueError("confidence ranges must satisfy 0 <= lo <= hi <= 1")

    def confusion_matrix(self, n: int) -> np.ndarray:
        if self.confusion is None:
            return np.eye(n)
        if self.confusion.shape != (n, n):
            raise ValueError(f"confusion is {self.confusion.shape}, registry has {n} labels")
        return self.confusion


def uniform_confusion(n: int, accuracy: float) -> np.ndarray:
    """Confusion matrix keeping the true label with ``accuracy`` and
    spreading the rest evenly."""
    if n == 1:
        return np.ones((1, 1))
    off = (1.0 - accuracy) / (n - 1)
    return np.full((n, n), off) + np.eye(n) * (accuracy - off)


def _confidences(rng, n: int, peak: int | None, concentration: float) -> np.ndarray:
    if peak is None:
        return rng.dirichlet(np.ones(n))
    if np.isinf(concentration):
        out = np.zeros(n)
        out[peak] = 1.0
        return out
    alpha = np.ones(n)
    alpha[peak] += concentration
    return rng.dirichlet(alpha)


def _clip_box(x0, y0, x1, y1, cam: CameraIntrinsics) -> BBox2D | None:
    x0, x1 = max(x0, -0.5), min(x1, cam.width - 0.5)
    y0, y1 = max(y0, -0.5), min(y1, cam.height - 0.5)
    if x1 - x0 < 1.0 or y1 - y0 < 1.0:
        return None
    return BBox2D(x0, y0, x1, y1)


def visible_objects(
    world: WorldState, cam: CameraIntrinsics, cam_pose: Pose6D | None, min_visible_fraction: float
) -> list[tuple[int, BBox2D]]:
    """Indices and true boxes of world objects that are in view and not
    mostly occluded."""
    on_table = world.on_table_indices()
    if not on_table:
        return []
    scene = render_scene_depth(world.render_list(), cam, cam_pose).depth
    out = []
    for i in on_table:
        obj = world.objects[i]
        try:
            box = project_bbox(obj.model, obj.pose, cam, cam_pose)
        except NotVisible:
            continue
        own = render_depth(obj.model, obj.pose, cam, cam_pose).depth
        sil = np.isfinite(own)
        n_sil = int(sil.sum())
        if n_sil == 0:
            continue
        seen = int(np.count_nonzero(own[sil] <= scene[sil]))
        if seen / n_sil >= min_visible_fraction:
            out.append((i, box))
    return out


def simulate_detections(
    world: WorldState,
    cam: CameraIntrinsics,
    cfg: DetectorNoiseConfig,
    seed,
    registry: LabelRegistry,
    cam_pose: Pose6D | None = None,
) -> list[Detection]:
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    n_labels = len(registry)
    confusion = cfg.confusion_matrix(n_labels)
    labels = list(registry)
    dets = []
    for i, box in visible_objects(world, cam, cam_pose, cfg.min_visible_fraction):
        # fixed draw order per object keeps streams aligned across configs
        miss, drawn_u, conf_lo_u = rng.random(3)
        jitter = rng.normal(0.0, 1.0, 4) * cfg.bbox_jitter_sigma
        if miss < cfg.miss_rate:
            continue
        true_idx = registry.index(world.objects[i].model.label)
        drawn = int(np.searchsorted(np.cumsum(confusion[true_idx]), drawn_u, side="right"))
        drawn = min(drawn, n_labels - 1)
        jb = _clip_box(box.min_x + jitter[0], box.min_y + jitter[1],
                       box.max_x + jitter[2], box.max_y + jitter[3], cam)
        if jb is None:
            continue
        conf = _confidences(rng, n_labels, drawn, cfg.confidence_concentration)
        lo, hi = cfg.box_confidence_range
        dets.append(Detection(jb, float(lo + (hi - lo) * conf_lo_u),
                              dict(zip(labels, map(float, conf))), truth=i))

    for _ in range(rng.poisson(cfg.false_positive_rate)):
        w = cam.width * np.exp(rng.uniform(np.log(0.05), np.log(0.5)))
        h = w * np.exp(rng.uniform(np.log(0.5), np.log(2.0)))
        cx, cy = rng.uniform(-0.5, cam.width - 0.5), rng.uniform(-0.5, cam.height - 0.5)
        lo, hi = cfg.fp_box_confidence_range
        bc = float(rng.uniform(lo, hi))
        conf = _confidences(rng, n_labels, None, cfg.confidence_concentration)
        fb = _clip_box(cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2, cam)
        if fb is not None:
            dets.append(Detection(fb, bc, dict(zip(labels, map(float, conf))), truth=None))
    return dets


def threshold_proposals(d: Detection, sigma_c: float) -> list[tuple[Label, float]]:
    """Labels whose confidence is at least ``sigma_c`` times the best one,
    highest confidence first."""
    if not 0.0 < sigma_c < 1.0:
        raise ValueError("sigma_c must be in (0, 1)")
    best = max(d.label_confidences.values())
    kept = [(lab, c) for lab, c in d.label_confidences.items() if c >= best * sigma_c]
    return sorted(kept, key=lambda kv: -kv[1])


def initial_object_count(proposals: list[list[tuple[Label, float]]]) -> int:
    """Number of estimator seeds: one per surviving (box, label) pair."""
    return sum(len(p) for p in proposals)


def write_detections_csv(path, rows: list[tuple[int, Detection]]) -> None:
    """Log ``(frame, detection)`` pairs with the top-3 labels."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["frame", "min_x", "min_y", "max_x", "max_y", "box_confidence",
                    "label1", "conf1", "label2", "conf2", "label3", "conf3", "truth"])
        for frame, d in rows:
            top = d.top_labels(3)
            top += [(None, 0.0)] * (3 - len(top))
            w.writerow([frame, *(f"{v:.3f}" for v in d.bbox.as_tuple()), f"{d.box_confidence:.4f}",
                        *[x for lab, c in top for x in ((lab.identifier if lab else ""), f"{c:.4f}")],
                        "" if d.truth is None else d.truth])
