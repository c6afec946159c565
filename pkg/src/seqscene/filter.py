"""Per-object particle filter over 6DoF pose.

Particles live in the world frame. Observation likelihood is the fraction of
observed points (inside the detection box) reproduced, within ``epsilon``, by
the particle's rendered depth at the same pixel.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .geometry import (
    BBox2D,
    CameraIntrinsics,
    ObjectModel,
    Pose6D,
    quat_from_rotvec,
    quat_multiply,
    quat_normalize,
    quat_to_matrix,
    random_quaternions,
)
from .render import PointCloud, backproject, count_inliers, crop, render_depth


class EmptySupport(ValueError):
    """The box's viewing frustum does not intersect the workspace."""


class ZeroObservation(ValueError):
    """The cropped observation holds no valid points."""


@dataclass(frozen=True)
class Workspace:
    """Axis-aligned world-frame volume that object centers may occupy."""

    lo: tuple[float, float, float]
    hi: tuple[float, float, float]

    def __post_init__(self):
        if not all(h > l for l, h in zip(self.lo, self.hi)):
            raise ValueError("workspace must have positive extent")

    def contains(self, pts: np.ndarray) -> np.ndarray:
        pts = np.asarray(pts)
        return np.all((pts >= self.lo) & (pts <= self.hi), axis=-1)

    def corners(self) -> np.ndarray:
        return np.array([[x, y, z] for x in (self.lo[0], self.hi[0])
                         for y in (self.lo[1], self.hi[1]) for z in (self.lo[2], self.hi[2])])


@dataclass(frozen=True)
class LikelihoodParams:
    epsilon: float = 0.008

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")


@dataclass(frozen=True)
class ActionModelParams:
    sigma1: float = 0.04
    sigma2: float = 0.02
    sigma3: float = 0.01
    rot_sigma1: float = 0.4
    rot_sigma2: float = 0.2
    rot_sigma3: float = 0.1
    w1: float = 0.8
    w2: float = 0.2

    def __post_init__(self):
        if abs(self.w1 + self.w2 - 1.0) > 1e-9:
            raise ValueError("ActionModelParams: w1 + w2 must equal 1")
        if min(self.w1, self.w2) < 0:
            raise ValueError("ActionModelParams: mixture weights must be non-negative")
        sigmas = (self.sigma1, self.sigma2, self.sigma3, self.rot_sigma1, self.rot_sigma2, self.rot_sigma3)
        if min(sigmas) < 0:
            raise ValueError("ActionModelParams: sigmas must be non-negative")


@dataclass(frozen=True)
class DiffusionParams:
    """Zero-mean Gaussian diffusion for the bootstrap (likelihood-weighting)
    iterations, shrinking geometrically from the initial sigmas to the floors.

    ``flip_prob`` of the particles per iteration also take a random
    axis-permuting rotation, which lets the set hop between the near-symmetric
    orientation modes of box-like shapes.
    """

    trans_sigma: float = 0.01
    rot_sigma: float = 0.6
    decay: float = 0.92
    min_trans_sigma: float = 0.002
    min_rot_sigma: float = 0.02
    flip_prob: float = 0.1
    flip_trans_sigma: float = 0.0
    # weights use likelihood**sharpness; stored scores stay raw
    sharpness: float = 3.0

    def at(self, iteration: int) -> tuple[float, float]:
        f = self.decay**iteration
        return (
            max(self.trans_sigma * f, min(self.min_trans_sigma, self.trans_sigma)),
            max(self.rot_sigma * f, min(self.min_rot_sigma, self.rot_sigma)),
        )


@dataclass(frozen=True)
class Action:
    target_index: int
    pick_pose: Pose6D
    place_pose: Pose6D


@dataclass(frozen=True, eq=False)
class ParticleSet:
    """``n`` weighted pose hypotheses stored as arrays.

    ``scores`` holds the likelihood each particle received at the last
    reweighting (None before any observation).
    """

    positions: np.ndarray
    quaternions: np.ndarray
    weights: np.ndarray
    scores: np.ndarray | None = None
    degenerate: bool = False

    def __post_init__(self):
        n = len(self.positions)
        if n < 1:
            raise ValueError("particle set must be non-empty")
        if self.quaternions.shape != (n, 4) or self.weights.shape != (n,):
            raise ValueError("inconsistent particle array shapes")
        if np.any(self.weights < 0):
            raise ValueError("negative particle weight")

    def __len__(self):
        return len(self.positions)

    @property
    def n(self) -> int:
        return len(self.positions)

    def pose(self, j: int) -> Pose6D:
        return Pose6D(self.positions[j], self.quaternions[j])

    @property
    def poses(self) -> list[Pose6D]:
        return [self.pose(j) for j in range(self.n)]

    def rotations(self) -> np.ndarray:
        return quat_to_matrix(self.quaternions)

    def effective_sample_size(self) -> float:
        w = self.weights / self.weights.sum()
        return float(1.0 / np.sum(w * w))

    @classmethod
    def from_poses(cls, poses, weights=None) -> ParticleSet:
        n = len(poses)
        w = np.full(n, 1.0 / n) if weights is None else np.asarray(weights, dtype=np.float64)
        return cls(
            np.array([p.translation for p in poses]),
            np.array([p.quaternion for p in poses]),
            w,
        )


# ---------------------------------------------------------------------------


def _rng(seed) -> np.random.Generator:
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def init_particles(
    box: BBox2D,
    cam: CameraIntrinsics,
    workspace: Workspace,
    n: int,
    seed,
    cam_pose: Pose6D | None = None,
    max_batches: int = 200,
) -> ParticleSet:
    """Uniform positions over the box's frustum inside the workspace and
    uniform orientations; equal weights."""
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = _rng(seed)
    cam_pose = cam_pose or Pose6D.identity()
    x0, y0 = max(box.min_x, -0.5), max(box.min_y, -0.5)
    x1, y1 = min(box.max_x, cam.width - 0.5), min(box.max_y, cam.height - 0.5)
    if x1 <= x0 or y1 <= y0:
        raise EmptySupport("box lies outside the image")

    cam_from_world = cam_pose.inverse()
    zc = cam_from_world.transform_points(workspace.corners())[:, 2]
    z_lo, z_hi = max(zc.min(), cam.near), min(zc.max(), cam.far)
    if z_hi <= z_lo:
        raise EmptySupport("workspace is not in front of the camera")

    found = []
    total = 0
    batch = max(4 * n, 256)
    for _ in range(max_batches):
        u = rng.uniform(x0, x1, batch)
        v = rng.uniform(y0, y1, batch)
        # volume element of the frustum grows with z^2
        z = np.cbrt(z_lo**3 + rng.random(batch) * (z_hi**3 - z_lo**3))
        pc = np.stack([(u - cam.cx) * z / cam.fx, (v - cam.cy) * z / cam.fy, z], axis=1)
        pw = cam_pose.transform_points(pc)
        pw = pw[workspace.contains(pw)]
        found.append(pw)
        total += len(pw)
        if total >= n:
            break
    if total < n:
        raise EmptySupport(f"only {total} of {n} samples fell inside the workspace")
    positions = np.concatenate(found)[:n]
    return ParticleSet(positions, random_quaternions(rng, n), np.full(n, 1.0 / n))


def likelihood(
    q: Pose6D,
    model: ObjectModel,
    obs_cloud: PointCloud,
    box: BBox2D,
    cam: CameraIntrinsics,
    params: LikelihoodParams,
    cam_pose: Pose6D | None = None,
) -> float:
    """Inlier fraction for a single pose via a full render and backprojection."""
    obs = crop(obs_cloud, box)
    n_z = obs.valid_count
    if n_z == 0:
        raise ZeroObservation("no valid observed points in the box")
    rendered = backproject(render_depth(model, q, cam, cam_pose), cam)
    x0, y0 = obs.origin
    r = rendered.points[y0:y0 + obs.height, x0:x0 + obs.width]
    both = ~np.isnan(r[..., 0]) & obs.valid
    dist = np.linalg.norm(r[both] - obs.points[both], axis=1)
    return float(np.count_nonzero(dist < params.epsilon)) / n_z


def evaluate_likelihoods(
    ps: ParticleSet,
    model: ObjectModel,
    obs: PointCloud,
    cam: CameraIntrinsics,
    params: LikelihoodParams,
    cam_pose: Pose6D | None = None,
) -> np.ndarray:
    """Batched likelihood of every particle against an already-cropped cloud."""
    n_z = obs.valid_count
    if n_z == 0:
        raise ZeroObservation("no valid observed points in the box")
    rot = ps.rotations()
    trans = ps.positions
    if cam_pose is not None:
        inv = cam_pose.inverse()
        rot = inv.rotation @ rot
        trans = trans @ inv.rotation.T + inv.translation
    inliers, _ = count_inliers(rot, trans, model, obs, cam, params.epsilon)
    return inliers / n_z


def reweight(ps: ParticleSet, likelihoods, exponent: float = 1.0) -> ParticleSet:
    lik = np.asarray(likelihoods, dtype=np.float64)
    if lik.shape != (ps.n,):
        raise ValueError("need one likelihood per particle")
    if np.any(lik < 0):
        raise ValueError("likelihoods must be non-negative")
    w = ps.weights * lik**exponent
    total = w.sum()
    if total <= 0:
        return replace(ps, weights=np.full(ps.n, 1.0 / ps.n), scores=lik, degenerate=True)
    return replace(ps, weights=w / total, scores=lik, degenerate=False)


def systematic_indices(weights: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    n = len(weights)
    c = np.cumsum(weights)
    # trailing zero weights keep the last positive entry at exactly 1.0
    c = c / c[-1]
    positions = (rng.random() + np.arange(n)) / n
    return np.minimum(np.searchsorted(c, positions, side="right"), n - 1)


def resample(ps: ParticleSet, seed) -> ParticleSet:
    idx = systematic_indices(ps.weights, _rng(seed))
    return ParticleSet(
        ps.positions[idx],
        ps.quaternions[idx],
        np.full(ps.n, 1.0 / ps.n),
        None if ps.scores is None else ps.scores[idx],
    )


def _jitter_rotations(q: np.ndarray, sigma: float, rng: np.random.Generator) -> np.ndarray:
    if sigma == 0:
        return q.copy()
    dq = quat_from_rotvec(rng.normal(0.0, sigma, size=(len(q), 3)))
    return quat_normalize(quat_multiply(dq, q))


def diffuse(
    ps: ParticleSet,
    trans_sigma,
    rot_sigma,
    seed,
    workspace: Workspace | None = None,
) -> ParticleSet:
    """Zero-mean Gaussian translation and axis-angle rotation noise.

    Moves that would carry a particle out of the workspace are rejected
    (the particle keeps its position); particles already outside move freely.
    """
    rng = _rng(seed)
    ts = np.broadcast_to(np.asarray(trans_sigma, dtype=np.float64), (ps.n,))[:, None]
    rs = np.broadcast_to(np.asarray(rot_sigma, dtype=np.float64), (ps.n,))[:, None]
    pos = ps.positions + rng.normal(0.0, 1.0, size=ps.positions.shape) * ts
    if workspace is not None:
        stay = workspace.contains(ps.positions) & ~workspace.contains(pos)
        pos[stay] = ps.positions[stay]
    dq = quat_from_rotvec(rng.normal(0.0, 1.0, size=(ps.n, 3)) * rs)
    quat = quat_normalize(quat_multiply(dq, ps.quaternions))
    return replace(ps, positions=pos, quaternions=quat)


def _axis_flips() -> np.ndarray:
    from .models import _cube_rotations

    rots = _cube_rotations()
    keep = [r for r in rots if not np.allclose(r, np.eye(3))]
    from .geometry import matrix_to_quat

    return matrix_to_quat(np.array(keep))


_FLIPS = _axis_flips()


def flip(
    ps: ParticleSet, prob: float, seed, trans_sigma: float = 0.0, workspace: Workspace | None = None
) -> ParticleSet:
    """Rotate a random subset of particles by a random non-identity
    axis-permuting rotation in the object frame, jittering their position."""
    rng = _rng(seed)
    mask = rng.random(ps.n) < prob
    k = int(mask.sum())
    if k == 0:
        return ps
    g = _FLIPS[rng.integers(0, len(_FLIPS), k)]
    quat = ps.quaternions.copy()
    quat[mask] = quat_normalize(quat_multiply(quat[mask], g))
    pos = ps.positions.copy()
    moved = pos[mask] + rng.normal(0.0, trans_sigma, (k, 3))
    if workspace is not None:
        moved = np.where(workspace.contains(moved)[:, None], moved, pos[mask])
    pos[mask] = moved
    return replace(ps, positions=pos, quaternions=quat)


def iterated_likelihood_weighting(
    ps: ParticleSet,
    model: ObjectModel,
    obs_cloud: PointCloud,
    box: BBox2D,
    cam: CameraIntrinsics,
    params: LikelihoodParams,
    iterations: int = 25,
    diffusion: DiffusionParams | None = None,
    seed=0,
    cam_pose: Pose6D | None = None,
    workspace: Workspace | None = None,
    trace: list | None = None,
    start_iteration: int = 0,
) -> ParticleSet:
    """Bootstrap filtering against a single observation.

    Each round resamples (when weights are non-uniform), diffuses and
    reweights, so the returned set still carries its importance weights and
    ``map_estimate`` is meaningful. ``start_iteration`` offsets the diffusion
    schedule, so an already refined set can continue at small sigmas.
    """
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    diffusion = diffusion or DiffusionParams()
    obs = crop(obs_cloud, box)
    if obs.valid_count == 0:
        raise ZeroObservation("no valid observed points in the box")
    rng = _rng(seed)
    for it in range(iterations):
        if not np.all(ps.weights == ps.weights[0]):
            ps = resample(ps, rng)
        ts, rs = diffusion.at(start_iteration + it)
        ps = diffuse(ps, ts, rs, rng, workspace)
        if diffusion.flip_prob > 0:
            ps = flip(ps, diffusion.flip_prob, rng, diffusion.flip_trans_sigma, workspace)
        ps = reweight(ps, evaluate_likelihoods(ps, model, obs, cam, params, cam_pose), diffusion.sharpness)
        if trace is not None:
            j = int(np.argmax(ps.weights))
            trace.append({
                "iteration": it,
                "ess": ps.effective_sample_size(),
                "max_weight": float(ps.weights[j]),
                "best_likelihood": float(ps.scores[j]),
                "degenerate": ps.degenerate,
                "map_pose": ps.pose(j),
            })
    return ps


def predict(
    ps: ParticleSet,
    action: Action,
    is_target: bool,
    params: ActionModelParams,
    seed,
) -> ParticleSet:
    """Propagate particles through the pick-and-place action model.

    The target object lands near the place pose with probability ``w1`` and
    stays near its previous pose otherwise; other objects jitter in place.
    """
    rng = _rng(seed)
    n = ps.n
    pos = ps.positions.copy()
    quat = ps.quaternions.copy()
    if is_target:
        success = rng.random(n) < params.w1
        k = int(success.sum())
        place = action.place_pose
        pos[success] = place.translation + rng.normal(0.0, params.sigma1, size=(k, 3))
        quat[success] = _jitter_rotations(np.repeat(place.quaternion[None], k, 0), params.rot_sigma1, rng)
        fail = ~success
        pos[fail] += rng.normal(0.0, params.sigma2, size=(n - k, 3))
        quat[fail] = _jitter_rotations(quat[fail], params.rot_sigma2, rng)
    else:
        pos += rng.normal(0.0, params.sigma3, size=(n, 3))
        quat = _jitter_rotations(quat, params.rot_sigma3, rng)
    return replace(ps, positions=pos, quaternions=quat)


def map_index(ps: ParticleSet) -> int:
    return int(np.argmax(ps.weights))


def map_estimate(ps: ParticleSet) -> Pose6D:
    """Highest-weight particle; ties go to the lowest index."""
    return ps.pose(map_index(ps))


def bel_value(ps: ParticleSet) -> float:
    """Likelihood score of the MAP particle (0 before any observation)."""
    if ps.scores is None:
        return 0.0
    return float(ps.scores[map_index(ps)])


def posterior_score(box_conf: float, label_conf: float, bel: float) -> float:
    if min(box_conf, label_conf, bel) < 0:
        raise ValueError("posterior factors must be non-negative")
    return box_conf * label_conf * bel


def write_trace_csv(path, rows: list[dict]) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "ess", "max_weight", "best_likelihood", "degenerate",
                    "x", "y", "z", "roll", "pitch", "yaw"])
        for r in rows:
            p = r["map_pose"]
            w.writerow([r["iteration"], f"{r['ess']:.6g}", f"{r['max_weight']:.6g}",
                        f"{r['best_likelihood']:.6g}", int(r["degenerate"]),
                        *(f"{v:.6f}" for v in p.translation), *(f"{v:.6f}" for v in p.rpy())])
