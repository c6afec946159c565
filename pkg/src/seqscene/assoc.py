"""Greedy track-detection association and estimator lifecycle."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .detect import Detection
from .filter import ParticleSet
from .geometry import BBox2D, Label, iou


@dataclass
class Track:
    """One live object estimator."""

    id: int
    label: Label
    last_bbox: BBox2D
    particles: ParticleSet
    miss_count: int = 0
    last_posterior_score: float = 0.0
    # confidences of the detection matched (or spawned from) this frame
    detection_index: int | None = None
    box_confidence: float = 0.0
    label_confidence: float = 0.0
    bel: float = 0.0


@dataclass(frozen=True)
class AssociationParams:
    K: int = 3
    score_threshold: float = 0.05

    def __post_init__(self):
        if self.K < 1:
            raise ValueError("K must be >= 1")
        if self.score_threshold < 0:
            raise ValueError("score_threshold must be >= 0")


@dataclass
class AssociationResult:
    pairs: list[tuple[int, int, float]] = field(default_factory=list)  # (track id, det index, score)
    unmatched_tracks: list[int] = field(default_factory=list)
    unmatched_detections: list[int] = field(default_factory=list)


@dataclass(frozen=True)
class LifecycleEvent:
    track_id: int
    detection_index: int | None
    score: float
    event: str  # matched | missed | spawned | terminated


def matching_score(t: Track, d: Detection) -> float:
    return iou(t.last_bbox, d.bbox) * d.box_confidence * d.confidence(t.label)


def score_matrix(tracks: list[Track], detections: list[Detection]) -> np.ndarray:
    s = np.zeros((len(tracks), len(detections)))
    for i, t in enumerate(tracks):
        for j, d in enumerate(detections):
            s[i, j] = matching_score(t, d)
    return s


def greedy_match(s: np.ndarray) -> list[tuple[int, int]]:
    """Repeatedly take the global maximum and delete its row and column.

    Stops when no positive entry remains. Ties resolve to the lowest row,
    then the lowest column.
    """
    s = np.array(s, dtype=np.float64, copy=True)
    pairs = []
    if s.size == 0:
        return pairs
    while True:
        flat = int(np.argmax(s))  # first maximum in row-major order
        i, j = divmod(flat, s.shape[1])
        if not s[i, j] > 0:
            break
        pairs.append((i, j))
        s[i, :] = -1.0
        s[:, j] = -1.0
    return pairs


def greedy_associate(
    tracks: list[Track], detections: list[Detection], params: AssociationParams
) -> AssociationResult:
    order = sorted(range(len(tracks)), key=lambda k: tracks[k].id)
    ordered = [tracks[k] for k in order]
    s = score_matrix(ordered, detections)
    res = AssociationResult()
    for i, j in greedy_match(s):
        if s[i, j] > params.score_threshold:
            res.pairs.append((ordered[i].id, j, float(s[i, j])))
    paired_t = {p[0] for p in res.pairs}
    paired_d = {p[1] for p in res.pairs}
    res.unmatched_tracks = [t.id for t in ordered if t.id not in paired_t]
    res.unmatched_detections = [j for j in range(len(detections)) if j not in paired_d]
    return res


SpawnFn = Callable[[Detection, Label, int], "ParticleSet | None"]


def lifecycle_update(
    tracks: list[Track],
    result: AssociationResult,
    detections: list[Detection],
    proposals: list[list[tuple[Label, float]]],
    params: AssociationParams,
    spawn: SpawnFn,
    next_id: int,
) -> tuple[list[Track], list[LifecycleEvent], int]:
    """Apply an association result to the track set.

    ``proposals[j]`` lists the thresholded labels of detection ``j``;
    ``spawn(det, label, track_id)`` returns fresh particles or None when the
    box cannot seed an estimator. Returns the new track list, the events and
    the next free track id.
    """
    by_id = {t.id: t for t in tracks}
    events: list[LifecycleEvent] = []
    for t in tracks:
        t.detection_index = None

    for tid, j, score in result.pairs:
        t = by_id[tid]
        d = detections[j]
        t.miss_count = 0
        t.last_bbox = d.bbox
        t.detection_index = j
        t.box_confidence = d.box_confidence
        t.label_confidence = d.confidence(t.label)
        events.append(LifecycleEvent(tid, j, score, "matched"))

    alive = []
    for t in sorted(tracks, key=lambda t: t.id):
        if t.id in result.unmatched_tracks:
            t.miss_count += 1
            if t.miss_count >= params.K:
                events.append(LifecycleEvent(t.id, None, 0.0, "terminated"))
                continue
            events.append(LifecycleEvent(t.id, None, 0.0, "missed"))
        alive.append(t)

    for j in result.unmatched_detections:
        d = detections[j]
        for label, conf in proposals[j]:
            ps = spawn(d, label, next_id)
            if ps is None:
                continue
            alive.append(Track(next_id, label, d.bbox, ps, detection_index=j,
                               box_confidence=d.box_confidence, label_confidence=conf))
            events.append(LifecycleEvent(next_id, j, 0.0, "spawned"))
            next_id += 1
    return alive, events, next_id


def write_association_csv(path, rows: list[tuple[int, LifecycleEvent]]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["frame", "track_id", "detection_index", "score", "event"])
        for frame, e in rows:
            w.writerow([frame, e.track_id, "" if e.detection_index is None else e.detection_index,
                        f"{e.score:.6f}", e.event])
