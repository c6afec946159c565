"""Pose-error, accuracy-grid, false-positive-rejection and completion metrics."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.transform import Rotation

from .geometry import ObjectModel, Pose6D, wrap_angle

# bounds used by the accuracy curve (meters, degrees)
TRANS_BOUNDS = (0.01, 0.05, 0.10, 0.20)
ROT_BOUNDS = (5.0, 10.0, 15.0, 20.0, 25.0, 30.0, 35.0, 40.0, 45.0)


def _symmetric_truths(gt: Pose6D, model: ObjectModel | None) -> list[np.ndarray]:
    if model is None:
        return [gt.rotation]
    return [gt.rotation @ s for s in model.symmetries]


def rotation_error(est: Pose6D, gt: Pose6D, model: ObjectModel | None = None,
                   metric: str = "per_axis") -> float:
    """Rotation error in degrees, minimised over the model's symmetries.

    ``per_axis`` is the largest wrapped roll/pitch/yaw difference;
    ``geodesic`` is the angle of the relative rotation.
    """
    if metric not in ("per_axis", "geodesic"):
        raise ValueError(f"unknown rotation metric {metric!r}")
    est_rot = Rotation.from_matrix(est.rotation)
    truths = Rotation.from_matrix(np.stack(_symmetric_truths(gt, model)))
    if metric == "per_axis":
        diff = wrap_angle(est_rot.as_euler("xyz")[None] - truths.as_euler("xyz"))
        best = np.abs(diff).max(axis=1).min()
    else:
        best = (truths.inv() * est_rot).magnitude().min()
    return float(np.degrees(best))


def translation_error(est: Pose6D, gt: Pose6D) -> float:
    return float(np.linalg.norm(est.translation - gt.translation))


@dataclass(frozen=True)
class PoseRecord:
    """One true-positive detection and the error of its best estimate
    (``None`` errors when no estimate exists)."""

    frame: int
    truth: int
    trans_error: float | None
    rot_error: float | None


def pose_accuracy(records: list[PoseRecord], trans_bound: float, rot_bound_deg: float) -> float:
    """Fraction of records with translation error below ``trans_bound`` and
    rotation error below ``rot_bound_deg``; 0 when there are no records."""
    if not records:
        return 0.0
    ok = sum(
        r.trans_error is not None and r.trans_error < trans_bound and r.rot_error < rot_bound_deg
        for r in records
    )
    return ok / len(records)


def accuracy_grid(records: list[PoseRecord], trans_bounds=TRANS_BOUNDS, rot_bounds=ROT_BOUNDS) -> np.ndarray:
    return np.array([[pose_accuracy(records, t, r) for r in rot_bounds] for t in trans_bounds])


def is_monotone(grid: np.ndarray) -> bool:
    return bool(np.all(np.diff(grid, axis=0) >= 0) and np.all(np.diff(grid, axis=1) >= 0))


@dataclass(frozen=True)
class RejectionRecord:
    frame: int
    spurious: int
    rejected: int


def fp_rejection_ratio(records: list[RejectionRecord]) -> float:
    """Rejected spurious detections over all spurious detections; 1.0 when
    no spurious detection occurred."""
    total = sum(r.spurious for r in records)
    if total == 0:
        return 1.0
    return sum(r.rejected for r in records) / total


@dataclass
class MetricsReport:
    pose_records: list[PoseRecord] = field(default_factory=list)
    rejection_records: list[RejectionRecord] = field(default_factory=list)
    completion: float | None = None
    trials: int = 0
    manipulation_errors: int = 0
    unrecovered_failures: int = 0
    trial_cap_hit: bool = False
    frames: int = 0

    @property
    def fp_rejection(self) -> float:
        return fp_rejection_ratio(self.rejection_records)

    @property
    def spurious_count(self) -> int:
        return sum(r.spurious for r in self.rejection_records)

    def grid(self) -> np.ndarray:
        return accuracy_grid(self.pose_records)
