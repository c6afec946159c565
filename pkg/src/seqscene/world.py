"""Ground-truth tabletop world: scene generation, noisy pick-and-place
execution and synthetic RGB-D observations."""

from __future__ import annotations

import enum
import zlib
from dataclasses import dataclass, field, replace

import numpy as np

from .detect import Detection, DetectorNoiseConfig, simulate_detections
from .filter import Action
from .geometry import (
    CameraIntrinsics,
    Category,
    Label,
    LabelRegistry,
    ObjectModel,
    Pose6D,
    look_at,
    quat_from_rotvec,
    quat_multiply,
)
from .models import make_box
from .render import DepthImage, PointCloud, add_depth_noise, backproject, remove_below_height, render_scene_depth


class PlacementFailure(RuntimeError):
    pass


class TargetAlreadySorted(ValueError):
    pass


def substream(seed: int, *keys) -> np.random.Generator:
    """Independent generator keyed by ``seed`` and a path of ints/strings."""
    key = [int(seed)]
    for k in keys:
        key.append(zlib.crc32(k.encode()) if isinstance(k, str) else int(k))
    return np.random.default_rng(np.random.SeedSequence(key))


class ObjectStatus(str, enum.Enum):
    ON_TABLE = "on_table"
    SORTED = "sorted"
    OFF_WORKSPACE = "off_workspace"


class Outcome(str, enum.Enum):
    SUCCESS = "success"
    FAIL_IN_PLACE = "fail_in_place"
    FAIL_FAR = "fail_far"


@dataclass(frozen=True)
class Bin:
    category: Category
    center: tuple[float, float]
    half_size: tuple[float, float]
    drop_height: float = 0.1

    @property
    def drop_pose(self) -> Pose6D:
        return Pose6D.translate(self.center[0], self.center[1], self.drop_height)

    def contains(self, xy) -> bool:
        return bool(np.all(np.abs(np.asarray(xy)[:2] - self.center) <= self.half_size))


@dataclass(frozen=True)
class Table:
    height: float = 0.0
    size: tuple[float, float] = (1.2, 0.9)
    placement_half_extent: tuple[float, float] = (0.2, 0.13)
    thickness: float = 0.02

    @property
    def model(self) -> ObjectModel:
        return _table_model(self.size, self.thickness)

    @property
    def pose(self) -> Pose6D:
        return Pose6D.translate(0.0, 0.0, self.height - 0.5 * self.thickness)

    def on_surface(self, xy) -> bool:
        return bool(np.all(np.abs(np.asarray(xy)[:2]) <= 0.5 * np.asarray(self.size)))


_TABLE_CACHE: dict = {}


def _table_model(size, thickness) -> ObjectModel:
    key = (tuple(size), thickness)
    if key not in _TABLE_CACHE:
        _TABLE_CACHE[key] = make_box(Label("table"), size[0], size[1], thickness)
    return _TABLE_CACHE[key]


def default_bins() -> tuple[Bin, ...]:
    # cleaning goes right (+x), non-cleaning left, both outside the camera view
    return (
        Bin(Category.CLEANING, (0.8, 0.0), (0.12, 0.15)),
        Bin(Category.NON_CLEANING, (-0.8, 0.0), (0.12, 0.15)),
    )


def default_camera_pose() -> Pose6D:
    return look_at([0.0, -0.45, 0.5], [0.0, 0.0, 0.0])


@dataclass(frozen=True)
class WorldObject:
    model: ObjectModel
    pose: Pose6D
    status: ObjectStatus = ObjectStatus.ON_TABLE

    @property
    def sorted_flag(self) -> bool:
        return self.status is ObjectStatus.SORTED


@dataclass(frozen=True)
class WorldState:
    objects: tuple[WorldObject, ...]
    table: Table = field(default_factory=Table)
    bins: tuple[Bin, ...] = field(default_factory=default_bins)
    t: int = 0

    def on_table_indices(self) -> list[int]:
        return [i for i, o in enumerate(self.objects) if o.status is ObjectStatus.ON_TABLE]

    def render_list(self) -> list[tuple[ObjectModel, Pose6D]]:
        items = [(self.table.model, self.table.pose)]
        items += [(self.objects[i].model, self.objects[i].pose) for i in self.on_table_indices()]
        return items

    def bin_for(self, category: Category) -> Bin:
        for b in self.bins:
            if b.category is category:
                return b
        raise KeyError(category)

    def status_counts(self) -> dict[ObjectStatus, int]:
        out = {s: 0 for s in ObjectStatus}
        for o in self.objects:
            out[o.status] += 1
        return out


def footprint_radius(model: ObjectModel) -> float:
    """Horizontal extent of the model about its vertical axis."""
    return float(np.linalg.norm(model.vertices[:, :2], axis=1).max())


def generate_scene(
    registry: LabelRegistry,
    models: dict[str, ObjectModel],
    count: int,
    seed,
    table: Table | None = None,
    bins: tuple[Bin, ...] | None = None,
    tilt_sigma: float = 0.02,
    max_attempts: int = 2000,
    clearance: float = 0.005,
) -> WorldState:
    """Scatter ``count`` distinct registry objects on the table with
    non-overlapping footprints; orientations are random yaw plus a small tilt.

    Positions are rejection-sampled one object at a time; when an object
    cannot be placed the whole layout is redrawn, up to ``max_attempts``
    position draws in total.
    """
    if count > len(registry):
        raise ValueError(f"cannot place {count} objects from a registry of {len(registry)}")
    table = table or Table()
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    chosen = [models[registry[int(i)].identifier] for i in rng.choice(len(registry), size=count, replace=False)]
    radii = [footprint_radius(m) + clearance for m in chosen]
    hx, hy = table.placement_half_extent
    budget = max_attempts
    xys: list[np.ndarray] = []
    while len(xys) < count:
        if budget <= 0:
            raise PlacementFailure(f"could not place {count} objects after {max_attempts} attempts")
        budget -= 1
        xy = rng.uniform([-hx, -hy], [hx, hy])
        k = len(xys)
        if all(np.linalg.norm(xy - p) >= radii[k] + radii[j] for j, p in enumerate(xys)):
            xys.append(xy)
        elif budget % 200 == 0:
            xys = []
    placed = []
    for model, xy in zip(chosen, xys):
        roll, pitch = rng.normal(0.0, tilt_sigma, 2)
        yaw = rng.uniform(-np.pi, np.pi)
        pose = Pose6D.from_rpy([xy[0], xy[1], table.height + model.rest_offset], roll, pitch, yaw)
        placed.append(WorldObject(model, pose))
    return WorldState(tuple(placed), table, bins or default_bins(), 0)


@dataclass(frozen=True)
class ExecutionNoiseConfig:
    pick_success_prob: float = 1.0
    place_sigma: float = 0.0
    fail_jitter_sigma: float = 0.0
    bystander_sigma: float = 0.0
    far_fail_prob: float = 0.0
    far_fail_sigma: float = 0.3

    def __post_init__(self):
        for name in ("pick_success_prob", "far_fail_prob"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must be in [0, 1]")
        for name in ("place_sigma", "fail_jitter_sigma", "bystander_sigma", "far_fail_sigma"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")


def resolve_target(world: WorldState, pick_pose: Pose6D) -> int:
    """Index of the on-table object closest to the commanded pick pose."""
    live = world.on_table_indices()
    if not live:
        raise TargetAlreadySorted("no object left on the table")
    d = [np.linalg.norm(world.objects[i].pose.translation - pick_pose.translation) for i in live]
    return live[int(np.argmin(d))]


def _on_table_pose(pose: Pose6D, xy, table: Table, model: ObjectModel) -> Pose6D:
    return Pose6D([xy[0], xy[1], table.height + model.rest_offset], pose.quaternion)


def execute_action(
    world: WorldState,
    action: Action,
    cfg: ExecutionNoiseConfig,
    seed,
    target: int | None = None,
) -> tuple[WorldState, Outcome, int]:
    """Apply a pick-and-place to the ground truth.

    ``target`` is the world object index; when omitted it is resolved from
    the pick pose. Returns the new world, the outcome and the target index.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    if target is None:
        target = resolve_target(world, action.pick_pose)
    if world.objects[target].status is not ObjectStatus.ON_TABLE:
        raise TargetAlreadySorted(f"object {target} is {world.objects[target].status.value}")

    u_success, u_far = rng.random(2)
    noise = rng.normal(0.0, 1.0, size=(len(world.objects), 3))
    yaw_far = rng.uniform(-np.pi, np.pi)

    objs = list(world.objects)
    obj = objs[target]
    if u_success < cfg.pick_success_prob:
        outcome = Outcome.SUCCESS
        place = action.place_pose
        pose = Pose6D(place.translation + cfg.place_sigma * noise[target], place.quaternion)
        in_bin = any(b.contains(pose.translation) for b in world.bins)
        if in_bin:
            status = ObjectStatus.SORTED
        elif world.table.on_surface(pose.translation):
            # no settling physics: it rests on the surface where it fell
            status = ObjectStatus.ON_TABLE
            pose = _on_table_pose(pose, pose.translation, world.table, obj.model)
        else:
            status = ObjectStatus.OFF_WORKSPACE
        objs[target] = WorldObject(obj.model, pose, status)
    elif u_far < cfg.far_fail_prob:
        outcome = Outcome.FAIL_FAR
        xy = obj.pose.translation[:2] + cfg.far_fail_sigma * noise[target, :2]
        spin = quat_from_rotvec(np.array([0.0, 0.0, yaw_far]))
        pose = Pose6D([xy[0], xy[1], obj.pose.translation[2]], quat_multiply(spin, obj.pose.quaternion))
        if world.table.on_surface(xy):
            objs[target] = WorldObject(obj.model, pose, ObjectStatus.ON_TABLE)
        else:
            # knocked onto the floor
            floor = Pose6D([xy[0], xy[1], world.table.height - 0.75], pose.quaternion)
            objs[target] = WorldObject(obj.model, floor, ObjectStatus.OFF_WORKSPACE)
    else:
        outcome = Outcome.FAIL_IN_PLACE
        if cfg.fail_jitter_sigma > 0:
            xy = obj.pose.translation[:2] + cfg.fail_jitter_sigma * noise[target, :2]
            objs[target] = replace(obj, pose=_on_table_pose(obj.pose, xy, world.table, obj.model))

    if cfg.bystander_sigma > 0:
        for i, o in enumerate(objs):
            if i != target and o.status is ObjectStatus.ON_TABLE:
                xy = o.pose.translation[:2] + cfg.bystander_sigma * noise[i, :2]
                objs[i] = replace(o, pose=_on_table_pose(o.pose, xy, world.table, o.model))
    return replace(world, objects=tuple(objs), t=world.t + 1), outcome, target


@dataclass(frozen=True, eq=False)
class Observation:
    depth: DepthImage
    cloud: PointCloud
    detections: list[Detection]


def observe(
    world: WorldState,
    cam: CameraIntrinsics,
    det_cfg: DetectorNoiseConfig,
    depth_sigma: float,
    seed: int,
    registry: LabelRegistry,
    cam_pose: Pose6D | None = None,
    support_margin: float | None = None,
) -> Observation:
    """Render, add sensor noise, backproject and detect.

    With ``support_margin`` set, cloud points less than that far above the
    table top are dropped (known support-plane removal); the depth image
    stays raw.
    """
    clean = render_scene_depth(world.render_list(), cam, cam_pose)
    depth = add_depth_noise(clean, depth_sigma, substream(seed, "depth"))
    cloud = backproject(depth, cam)
    if support_margin is not None:
        cloud = remove_below_height(cloud, cam_pose or Pose6D.identity(), world.table.height + support_margin)
    dets = simulate_detections(world, cam, det_cfg, substream(seed, "detect"), registry, cam_pose)
    return Observation(depth, cloud, dets)
