"""Per-frame scene estimation loop, sorting policy and experiment runners."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .assoc import AssociationParams, LifecycleEvent, Track, greedy_associate, lifecycle_update
from .config import Runtime
from .detect import Detection, threshold_proposals
from .filter import (
    Action,
    ActionModelParams,
    DiffusionParams,
    EmptySupport,
    LikelihoodParams,
    Workspace,
    ZeroObservation,
    bel_value,
    init_particles,
    iterated_likelihood_weighting,
    map_estimate,
    posterior_score,
    predict,
)
from .geometry import (
    BBox2D,
    CameraIntrinsics,
    NotVisible,
    ObjectModel,
    ObjectState,
    Pose6D,
    SceneEstimate,
    iou,
    project_bbox,
)
from .metrics import MetricsReport, PoseRecord, RejectionRecord, rotation_error, translation_error
from .world import (
    Bin,
    Observation,
    ObjectStatus,
    Outcome,
    WorldState,
    execute_action,
    generate_scene,
    observe,
    resolve_target,
    substream,
)


class EmptyEstimate(ValueError):
    pass


@dataclass(frozen=True)
class FrameParams:
    n_particles: int = 625
    iterations: int = 25
    likelihood: LikelihoodParams = field(default_factory=LikelihoodParams)
    diffusion: DiffusionParams = field(default_factory=DiffusionParams)
    action_model: ActionModelParams = field(default_factory=ActionModelParams)
    association: AssociationParams = field(default_factory=AssociationParams)
    sigma_c: float = 0.1
    min_box_confidence: float = 0.0
    rejection_threshold: float = 0.1

    @classmethod
    def from_runtime(cls, rt: Runtime) -> FrameParams:
        c = rt.config
        return cls(
            n_particles=c.filter.n_particles,
            iterations=c.filter.iterations,
            likelihood=rt.likelihood,
            diffusion=rt.diffusion,
            action_model=rt.action_model,
            association=rt.association,
            sigma_c=c.detection.sigma_c,
            min_box_confidence=c.detection.min_box_confidence,
            rejection_threshold=c.detection.rejection_threshold,
        )


@dataclass
class TrackerState:
    tracks: list[Track] = field(default_factory=list)
    next_id: int = 0


@dataclass(frozen=True)
class TrackRow:
    track_id: int
    label: str
    detection_index: int | None
    bel: float
    score: float
    pose: Pose6D


@dataclass(frozen=True, eq=False)
class FrameRecord:
    frame: int
    detections: list[Detection]
    events: list[LifecycleEvent]
    tracks: list[TrackRow]
    estimate: SceneEstimate


def _spawner(models, cam, cam_pose, workspace, n, seed, frame):
    def spawn(det: Detection, label, track_id):
        try:
            return init_particles(det.bbox, cam, workspace, n, substream(seed, frame, track_id, "init"), cam_pose)
        except EmptySupport:
            return None
    return spawn


def sum_frame(
    state: TrackerState,
    obs: Observation,
    action: Action | None,
    params: FrameParams,
    models: dict[str, ObjectModel],
    cam: CameraIntrinsics,
    cam_pose: Pose6D,
    workspace: Workspace,
    seed: int,
    frame: int,
) -> tuple[SceneEstimate, FrameRecord]:
    """One estimation step; ``state`` is updated in place."""
    # action model
    if action is not None:
        for t in state.tracks:
            t.particles = predict(t.particles, action, t.id == action.target_index, params.action_model,
                                  substream(seed, frame, t.id, "predict"))

    dets = [d for d in obs.detections if d.box_confidence >= params.min_box_confidence]
    # keep original indices so records line up with the observation
    det_index = [j for j, d in enumerate(obs.detections) if d.box_confidence >= params.min_box_confidence]
    proposals = [threshold_proposals(d, params.sigma_c) for d in dets]

    result = greedy_associate(state.tracks, dets, params.association)
    spawn = _spawner(models, cam, cam_pose, workspace, params.n_particles, seed, frame)
    state.tracks, events, state.next_id = lifecycle_update(
        state.tracks, result, dets, proposals, params.association, spawn, state.next_id)

    rows = []
    for t in state.tracks:
        if t.detection_index is None:
            t.bel = 0.0
            t.last_posterior_score = 0.0
        else:
            model = models[t.label.identifier]
            # a set already refined on an earlier frame and not moved by the action continues the
            # annealing schedule instead of restarting from the wide initial sigmas
            moved = action is not None and t.id == action.target_index
            start = params.iterations if t.particles.scores is not None and not moved else 0
            try:
                t.particles = iterated_likelihood_weighting(
                    t.particles, model, obs.cloud, t.last_bbox, cam, params.likelihood, params.iterations,
                    params.diffusion, substream(seed, frame, t.id, "ilw"), cam_pose, workspace,
                    start_iteration=start)
                t.bel = bel_value(t.particles)
            except ZeroObservation:
                t.bel = 0.0
            t.last_posterior_score = posterior_score(t.box_confidence, t.label_confidence, t.bel)
        j = None if t.detection_index is None else det_index[t.detection_index]
        rows.append(TrackRow(t.id, t.label.identifier, j, t.bel, t.last_posterior_score,
                             map_estimate(t.particles)))

    estimate = select_estimate(state.tracks, params.rejection_threshold)
    events = [LifecycleEvent(e.track_id, None if e.detection_index is None else det_index[e.detection_index],
                             e.score, e.event) for e in events]
    return estimate, FrameRecord(frame, list(obs.detections), events, rows, estimate)


def select_estimate(tracks: list[Track], rejection_threshold: float) -> SceneEstimate:
    """Keep detection-supported tracks scoring above the threshold, at most
    one per detection and then one per label."""
    live = [t for t in tracks if t.detection_index is not None and t.last_posterior_score > rejection_threshold]
    live.sort(key=lambda t: (-t.last_posterior_score, t.id))
    used_det, used_label, kept = set(), set(), []
    for t in live:
        if t.detection_index in used_det or t.label.identifier in used_label:
            continue
        used_det.add(t.detection_index)
        used_label.add(t.label.identifier)
        kept.append(t)
    objects = tuple(
        (ObjectState(map_estimate(t.particles), t.last_bbox, t.label), t.last_posterior_score) for t in kept)
    return SceneEstimate(objects, tuple(t.id for t in kept))


def sorting_policy(estimate: SceneEstimate, bins: tuple[Bin, ...]) -> Action:
    """Pick the highest-scoring estimate (ties: lowest track id) and drop it
    into the bin of its category."""
    if estimate.k == 0:
        raise EmptyEstimate("nothing to sort")
    best = max(range(estimate.k), key=lambda i: (estimate.objects[i][1], -estimate.track_ids[i]))
    state = estimate.objects[best][0]
    target_bin = next(b for b in bins if b.category is state.label.category)
    return Action(estimate.track_ids[best], state.pose, target_bin.drop_pose)


# ---------------------------------------------------------------------------
# metrics hooks


def _true_boxes(world: WorldState, cam, cam_pose) -> dict[int, BBox2D]:
    out = {}
    for i in world.on_table_indices():
        o = world.objects[i]
        try:
            out[i] = project_bbox(o.model, o.pose, cam, cam_pose)
        except NotVisible:
            pass
    return out


def frame_pose_records(rec: FrameRecord, world: WorldState, cam, cam_pose, metric: str) -> list[PoseRecord]:
    """Error of the best track behind each true-positive detection."""
    boxes = _true_boxes(world, cam, cam_pose)
    out = []
    for j, d in enumerate(rec.detections):
        if d.truth is None or d.truth not in boxes or iou(d.bbox, boxes[d.truth]) <= 0.5:
            continue
        cands = [r for r in rec.tracks if r.detection_index == j]
        gt = world.objects[d.truth]
        if not cands:
            out.append(PoseRecord(rec.frame, d.truth, None, None))
            continue
        best = min(cands, key=lambda r: (-r.score, r.track_id))
        out.append(PoseRecord(rec.frame, d.truth, translation_error(best.pose, gt.pose),
                              rotation_error(best.pose, gt.pose, gt.model, metric)))
    return out


def frame_rejection_record(rec: FrameRecord) -> RejectionRecord:
    by_id = {r.track_id: r for r in rec.tracks}
    used = {by_id[tid].detection_index for tid in rec.estimate.track_ids}
    spurious = [j for j, d in enumerate(rec.detections) if d.spurious]
    return RejectionRecord(rec.frame, len(spurious), sum(j not in used for j in spurious))


# ---------------------------------------------------------------------------
# runners


@dataclass(frozen=True)
class TrialRecord:
    frame: int
    track_id: int
    target: int
    outcome: Outcome
    status_after: ObjectStatus


@dataclass(eq=False)
class RunResult:
    report: MetricsReport
    frames: list[FrameRecord]
    trials: list[TrialRecord]
    world: WorldState


def _observe(rt: Runtime, world: WorldState, seed: int, frame: int) -> Observation:
    return observe(world, rt.camera, rt.detector, rt.config.scene.depth_noise_sigma,
                   int(substream(seed, frame, "observe").integers(2**63)), rt.registry, rt.camera_pose,
                   rt.config.scene.support_margin)


def _scene(rt: Runtime, scene_seed: int) -> WorldState:
    return generate_scene(rt.registry, rt.models, rt.config.scene.object_count, substream(scene_seed, "scene"),
                          rt.table, rt.bins, rt.config.scene.tilt_sigma)


def run_single_scene(rt: Runtime, scene_seed: int, seed: int) -> RunResult:
    """Static scene observed for ``frames_per_scene`` frames, no actions."""
    params = FrameParams.from_runtime(rt)
    world = _scene(rt, scene_seed)
    # sensor, detector and filter draws depend on the (scene, seed) pair, so runs sharing a seed
    # across scenes stay independent
    run_seed = int(substream(scene_seed, seed, "run").integers(2**63))
    state = TrackerState()
    report = MetricsReport()
    frames = []
    for f in range(rt.config.sequence.frames_per_scene):
        obs = _observe(rt, world, run_seed, f)
        _, rec = sum_frame(state, obs, None, params, rt.models, rt.camera, rt.camera_pose, rt.workspace,
                           run_seed, f)
        frames.append(rec)
        report.pose_records += frame_pose_records(rec, world, rt.camera, rt.camera_pose, rt.config.rotation_metric)
        report.rejection_records.append(frame_rejection_record(rec))
    report.frames = len(frames)
    return RunResult(report, frames, [], world)


def unrecovered_failures(trials: list[TrialRecord]) -> int:
    """Failed grasps of an object left on the table that were never
    attempted again."""
    missing = 0
    for k, tr in enumerate(trials):
        if tr.outcome is Outcome.SUCCESS or tr.status_after is not ObjectStatus.ON_TABLE:
            continue
        if not any(later.target == tr.target for later in trials[k + 1:]):
            missing += 1
    return missing


def run_sequence(rt: Runtime, seed: int) -> RunResult:
    """Observe, estimate, act until every object has left the table, the
    trial cap is hit, or the estimate stays empty for too long."""
    params = FrameParams.from_runtime(rt)
    cfg = rt.config
    world = _scene(rt, seed)
    state = TrackerState()
    report = MetricsReport()
    frames: list[FrameRecord] = []
    trials: list[TrialRecord] = []
    action = None
    idle = 0
    frame = 0
    cap = cfg.trial_cap()
    while world.on_table_indices():
        if len(trials) >= cap:
            report.trial_cap_hit = True
            break
        obs = _observe(rt, world, seed, frame)
        est, rec = sum_frame(state, obs, action, params, rt.models, rt.camera, rt.camera_pose,
                             rt.workspace, seed, frame)
        frames.append(rec)
        report.pose_records += frame_pose_records(rec, world, rt.camera, rt.camera_pose, cfg.rotation_metric)
        report.rejection_records.append(frame_rejection_record(rec))
        frame += 1
        if est.k == 0:
            action = None
            idle += 1
            if idle >= cfg.sequence.max_idle_frames:
                break
            continue
        idle = 0
        action = sorting_policy(est, rt.bins)
        target = resolve_target(world, action.pick_pose)
        world, outcome, target = execute_action(world, action, rt.execution,
                                                substream(seed, rec.frame, "execute"), target)
        trials.append(TrialRecord(rec.frame, action.target_index, target, outcome, world.objects[target].status))

    n = len(world.objects)
    report.completion = world.status_counts()[ObjectStatus.SORTED] / n
    report.trials = len(trials)
    report.manipulation_errors = sum(t.outcome is not Outcome.SUCCESS for t in trials)
    report.unrecovered_failures = unrecovered_failures(trials)
    report.frames = len(frames)
    return RunResult(report, frames, trials, world)


def run(rt: Runtime, scene_seed: int, seed: int) -> RunResult:
    if rt.config.mode == "sequential":
        return run_sequence(rt, seed)
    return run_single_scene(rt, scene_seed, seed)


# ---------------------------------------------------------------------------
# output

TRACE_COLUMNS = ["frame", "event", "track_id", "label", "detection_index", "spurious",
                 "x", "y", "z", "roll", "pitch", "yaw", "bel", "score", "in_estimate", "outcome", "target"]


def write_trace(path, result: RunResult) -> None:
    """One row per track per frame, plus lifecycle events and manipulation
    trials."""
    trial_at = {t.frame: t for t in result.trials}
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TRACE_COLUMNS)
        blank = [""] * 6
        for rec in result.frames:
            chosen = set(rec.estimate.track_ids)
            for e in rec.events:
                w.writerow([rec.frame, e.event, e.track_id, "",
                            "" if e.detection_index is None else e.detection_index, "",
                            *blank, "", f"{e.score:.6f}", "", "", ""])
            for r in rec.tracks:
                spur = "" if r.detection_index is None else int(rec.detections[r.detection_index].spurious)
                w.writerow([rec.frame, "estimate", r.track_id, r.label,
                            "" if r.detection_index is None else r.detection_index, spur,
                            *(f"{v:.6f}" for v in r.pose.translation), *(f"{v:.6f}" for v in r.pose.rpy()),
                            f"{r.bel:.6f}", f"{r.score:.6f}", int(r.track_id in chosen), "", ""])
            t = trial_at.get(rec.frame)
            if t is not None:
                w.writerow([rec.frame, "action", t.track_id, "", "", "", *blank, "", "", "",
                            t.outcome.value, t.target])
