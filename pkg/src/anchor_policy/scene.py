"""Procedural tabletop scenes, analytic raycasting and the scripted expert.

The simulator is deliberately small:

- primitives are spheres and boxes resting on a rectangular table;
- rendering is exact ray/primitive intersection, one ray per pixel, from
  four fixed calibrated cameras;
- the robot is the toy dual arm from :mod:`anchor_policy.geometry`, moved by
  teleporting to commanded joint angles (no physics);
- grasping attaches an object to a gripper when the gripper closes within
  a tolerance of the object's grasp affordance.

Scenes are immutable snapshots: every operation returns a new scene.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
import json
import logging
import math
import threading
from typing import Any, Literal, Sequence

import numpy as np

from .config import TASK_NAMES, SceneConfig
from .errors import PlacementOverflow, Unreachable
from .geometry import (
    ARM_BASE_Y,
    LEFT_GRIPPER,
    LEFT_QPOS,
    LINK_LENGTHS,
    RIGHT_GRIPPER,
    RIGHT_QPOS,
    CameraModel,
    DualArm,
    Pose,
    decode_state,
    fk,
    look_at_camera,
    make_dual_arm,
    state_from_joints,
)
from .keypose import GRASP_PLACE_SEQUENCE, AnchorType, ExpertLog

logger = logging.getLogger(__name__)

SCENE_FORMAT_VERSION = 1
N_VIEWS = 4
RATE_HZ = 25.0

ShapeKind = Literal["sphere", "box"]
ArmSide = Literal["left", "right"]

TABLE_EXTENT = (-0.1, 0.75, -0.6, 0.6)  # x0, x1, y0, y1
APPROACH_OFFSET_M = 0.08
GRIPPER_RADIUS_M = 0.02
HOME_TOOL_XZ = (0.15, 0.35)

# Expert timing: mean joint speed for moves, frames for a gripper command,
# and rest frames appended to every module.
MOVE_SPEED_RAD_S = 0.8
MIN_MOVE_FRAMES = 6
GRIPPER_FRAMES = 8
SETTLE_FRAMES = 2
ACCEL_FRACTION = 0.25


@dataclass(frozen=True, slots=True, eq=False)
class SceneObject:
    object_id: str
    shape: ShapeKind
    size: tuple[float, ...]
    pose: Pose
    color: tuple[float, float, float]
    visible: bool = True
    critical: bool = False
    graspable: bool = False
    kind: str = "object"

    def __post_init__(self) -> None:
        expected = 1 if self.shape == "sphere" else 3
        if len(self.size) != expected or min(self.size) <= 0:
            raise ValueError(f"object '{self.object_id}' needs {expected} positive size values")

    @property
    def center(self) -> np.ndarray:
        return self.pose.position

    @property
    def half_height(self) -> float:
        return float(self.size[0] if self.shape == "sphere" else self.size[2])

    @property
    def footprint_radius(self) -> float:
        return float(self.size[0] if self.shape == "sphere" else math.hypot(self.size[0], self.size[1]))

    def moved_to(self, position: np.ndarray) -> "SceneObject":
        return replace(self, pose=Pose(np.asarray(position, dtype=np.float64), self.pose.rotation))


@dataclass(frozen=True, slots=True, eq=False)
class Affordance:
    """Grasp point relative to the object center, plus the approach direction."""

    object_id: str
    offset: np.ndarray
    approach: np.ndarray


@dataclass(frozen=True, slots=True, eq=False)
class Placement:
    """Where ``object_id`` has to end up, and which arm moves it."""

    object_id: str
    target: np.ndarray
    arm: ArmSide


@dataclass(frozen=True, slots=True, eq=False)
class Attachment:
    arm: ArmSide
    object_id: str
    offset: np.ndarray  # object center minus tool position at grasp time


@dataclass(frozen=True, slots=True, eq=False)
class Scene:
    task_id: int
    seed: int
    table_z: float
    objects: tuple[SceneObject, ...]
    affordances: tuple[Affordance, ...]
    placements: tuple[Placement, ...]
    cameras: tuple[CameraModel, ...]
    state: np.ndarray
    attachments: tuple[Attachment, ...] = ()
    table_extent: tuple[float, float, float, float] = TABLE_EXTENT
    table_color: tuple[float, float, float] = (0.55, 0.45, 0.35)
    background_color: tuple[float, float, float] = (0.2, 0.2, 0.25)
    far_clip: float = 100.0

    def __post_init__(self) -> None:
        if len(self.cameras) != N_VIEWS:
            raise ValueError(f"a scene has exactly {N_VIEWS} cameras")
        afforded = {a.object_id for a in self.affordances}
        for obj in self.objects:
            if obj.critical and obj.graspable and obj.object_id not in afforded:
                raise ValueError(f"graspable critical object '{obj.object_id}' has no affordance")

    def object(self, object_id: str) -> SceneObject:
        for obj in self.objects:
            if obj.object_id == object_id:
                return obj
        raise KeyError(object_id)

    def affordance(self, object_id: str) -> Affordance:
        for a in self.affordances:
            if a.object_id == object_id:
                return a
        raise KeyError(object_id)

    def grasp_point(self, object_id: str) -> np.ndarray:
        return self.object(object_id).center + self.affordance(object_id).offset

    def with_objects(self, objects: Sequence[SceneObject]) -> "Scene":
        return replace(self, objects=tuple(objects))


# ---------------------------------------------------------------------------
# Tasks


@dataclass(frozen=True, slots=True)
class ObjectTemplate:
    name: str
    shape: ShapeKind
    size: tuple[float, ...]
    color: tuple[float, float, float]


@dataclass(frozen=True, slots=True)
class TaskSpec:
    task_id: int
    name: str
    movers: tuple[ObjectTemplate, ...]
    # Optional block the (single) mover is stacked on.
    base: ObjectTemplate | None = None
    table_height_range: tuple[float, float] = (0.0, 0.08)
    clutter_range: tuple[int, int] = (0, 3)
    lighting_jitter: float = 0.15
    out_of_reach_prob: float = 0.0


_MOUSE = ObjectTemplate("mouse", "box", (0.05, 0.03, 0.02), (0.9, 0.15, 0.1))
_STAPLER = ObjectTemplate("stapler", "box", (0.07, 0.025, 0.025), (0.1, 0.2, 0.9))
_BELL = ObjectTemplate("bell", "sphere", (0.035,), (0.95, 0.8, 0.05))
_BLOCK = ObjectTemplate("block", "box", (0.03, 0.03, 0.03), (0.1, 0.8, 0.2))
_BALL = ObjectTemplate("ball", "sphere", (0.03,), (0.9, 0.1, 0.7))
_BASE_BLOCK = ObjectTemplate("base_block", "box", (0.045, 0.045, 0.03), (0.1, 0.7, 0.8))
_BLOCK_B = ObjectTemplate("block_b", "box", (0.03, 0.03, 0.03), (0.95, 0.5, 0.05))
_BALL_B = ObjectTemplate("ball_b", "sphere", (0.03,), (0.05, 0.9, 0.9))

_CATALOG: dict[str, tuple[tuple[ObjectTemplate, ...], ObjectTemplate | None]] = {
    "place_mouse": ((_MOUSE,), None),
    "place_stapler": ((_STAPLER,), None),
    "place_bell": ((_BELL,), None),
    "place_block": ((_BLOCK,), None),
    "place_ball": ((_BALL,), None),
    "stack_blocks": ((_BLOCK,), _BASE_BLOCK),
    "place_two_blocks": ((_BLOCK, _BLOCK_B), None),
    "sort_balls": ((_BALL, _BALL_B), None),
}

_PAD_COLOR = (0.95, 0.95, 0.95)
_PAD_HALF_HEIGHT = 0.004
_CLUTTER_SHAPES: tuple[tuple[ShapeKind, tuple[float, ...]], ...] = (
    ("box", (0.04, 0.04, 0.04)),
    ("box", (0.06, 0.03, 0.02)),
    ("sphere", (0.035,)),
    ("sphere", (0.025,)),
)


def task_spec(task: str | int, scene_cfg: SceneConfig | None = None, *, out_of_reach_prob: float = 0.0) -> TaskSpec:
    """Build the :class:`TaskSpec` for a task name or id."""

    cfg = scene_cfg or SceneConfig()
    name = TASK_NAMES[task] if isinstance(task, int) else task
    if name not in _CATALOG:
        raise ValueError(f"unknown task '{task}'")
    movers, base = _CATALOG[name]
    return TaskSpec(
        task_id=TASK_NAMES.index(name),
        name=name,
        movers=movers,
        base=base,
        table_height_range=cfg.table_height_range,
        clutter_range=cfg.clutter_range,
        lighting_jitter=cfg.lighting_jitter,
        out_of_reach_prob=out_of_reach_prob,
    )


def make_cameras(table_z: float, scene_cfg: SceneConfig | None = None) -> tuple[CameraModel, ...]:
    """Four calibrated cameras around the workspace."""

    cfg = scene_cfg or SceneConfig()
    target = (0.3, 0.0, table_z)
    eyes = (
        (1.05, 0.6, table_z + 0.75),
        (1.05, -0.6, table_z + 0.75),
        (0.35, 0.0, table_z + 1.1),
        (-0.25, 0.0, table_z + 0.8),
    )
    return tuple(
        look_at_camera(
            eye,
            target,
            width=cfg.image_width,
            height=cfg.image_height,
            focal_px=cfg.focal_px,
        )
        for eye in eyes
    )


def make_task_scene(
    spec: TaskSpec,
    seed: int,
    scene_cfg: SceneConfig | None = None,
    *,
    robot_critical: bool = True,
) -> Scene:
    """Sample a randomized scene for ``spec``; identical for identical seeds."""

    cfg = scene_cfg or SceneConfig()
    rng = np.random.default_rng(seed)

    low, high = spec.table_height_range
    table_z = float(rng.uniform(low, high))
    light = 1.0 + float(rng.uniform(-spec.lighting_jitter, spec.lighting_jitter))
    table_color = _jitter_color((0.55, 0.45, 0.35), light, rng, 0.05)
    background = _jitter_color((0.2, 0.2, 0.25), light, rng, 0.1)

    # (x, y, radius) footprints already on the table.
    occupied: list[tuple[float, float, float]] = []
    objects: list[SceneObject] = []
    affordances: list[Affordance] = []
    placements: list[Placement] = []

    sides: list[ArmSide] = ["left", "right"] if len(spec.movers) == 2 else [("left", "right")[int(rng.integers(2))]]
    for template, side in zip(spec.movers, sides):
        far = bool(rng.random() < spec.out_of_reach_prob)
        x, y = _place_footprint(rng, occupied, template, side, far=far)
        obj = _object_from_template(template, x, y, table_z, light, critical=True, graspable=True)
        objects.append(obj)
        occupied.append((x, y, obj.footprint_radius))
        affordances.append(
            Affordance(object_id=obj.object_id, offset=np.zeros(3), approach=np.array([0.0, 0.0, 1.0]))
        )

        if spec.base is not None:
            bx, by = _place_footprint(rng, occupied, spec.base, side, far=False)
            base = _object_from_template(spec.base, bx, by, table_z, light, critical=True, graspable=False)
            objects.append(base)
            occupied.append((bx, by, base.footprint_radius))
            target = np.array([bx, by, table_z + 2 * base.half_height + obj.half_height])
        else:
            tx, ty = _place_footprint(rng, occupied, template, side, far=False)
            pad = SceneObject(
                object_id=f"{obj.object_id}_pad",
                shape="box",
                size=(obj.footprint_radius + 0.01, obj.footprint_radius + 0.01, _PAD_HALF_HEIGHT),
                pose=Pose.from_translation((tx, ty, table_z + _PAD_HALF_HEIGHT)),
                color=_PAD_COLOR,
                critical=True,
                kind="pad",
            )
            objects.append(pad)
            occupied.append((tx, ty, pad.footprint_radius))
            target = np.array([tx, ty, table_z + obj.half_height])
        placements.append(Placement(object_id=obj.object_id, target=target, arm=side))

    n_clutter = int(rng.integers(spec.clutter_range[0], spec.clutter_range[1] + 1))
    for i in range(n_clutter):
        shape, size = _CLUTTER_SHAPES[int(rng.integers(len(_CLUTTER_SHAPES)))]
        template = ObjectTemplate(f"clutter_{i}", shape, size, _muted_color(rng))
        x, y = _place_footprint(rng, occupied, template, None, far=False)
        clutter = _object_from_template(template, x, y, table_z, light, critical=False, graspable=False)
        objects.append(replace(clutter, kind="clutter"))
        occupied.append((x, y, clutter.footprint_radius))

    robot = ROBOT
    state = home_state(robot)
    objects.extend(_gripper_objects(robot, state, critical=robot_critical))

    return Scene(
        task_id=spec.task_id,
        seed=int(seed),
        table_z=table_z,
        objects=tuple(objects),
        affordances=tuple(affordances),
        placements=tuple(placements),
        cameras=make_cameras(table_z, cfg),
        state=state,
        table_color=table_color,
        background_color=background,
        far_clip=cfg.far_clip_m,
    )


def _jitter_color(base: Sequence[float], light: float, rng: np.random.Generator, spread: float) -> tuple[float, float, float]:
    c = np.clip(np.asarray(base) * light + rng.uniform(-spread, spread, 3), 0.0, 1.0)
    return (float(c[0]), float(c[1]), float(c[2]))


def _muted_color(rng: np.random.Generator) -> tuple[float, float, float]:
    # Clutter stays in a low-saturation band so task objects remain distinct.
    grey = float(rng.uniform(0.3, 0.7))
    c = np.clip(grey + rng.uniform(-0.06, 0.06, 3), 0.0, 1.0)
    return (float(c[0]), float(c[1]), float(c[2]))


def _object_from_template(
    template: ObjectTemplate,
    x: float,
    y: float,
    table_z: float,
    light: float,
    *,
    critical: bool,
    graspable: bool,
) -> SceneObject:
    half = template.size[0] if template.shape == "sphere" else template.size[2]
    color = tuple(float(c) for c in np.clip(np.asarray(template.color) * light, 0.0, 1.0))
    return SceneObject(
        object_id=template.name,
        shape=template.shape,
        size=template.size,
        pose=Pose.from_translation((x, y, table_z + half)),
        color=color,  # type: ignore[arg-type]
        critical=critical,
        graspable=graspable,
    )


def _place_footprint(
    rng: np.random.Generator,
    occupied: list[tuple[float, float, float]],
    template: ObjectTemplate,
    side: ArmSide | None,
    *,
    far: bool,
) -> tuple[float, float]:
    radius = template.size[0] if template.shape == "sphere" else math.hypot(template.size[0], template.size[1])
    for _ in range(100):
        if far:
            x = float(rng.uniform(0.8, 0.95))
        elif side is None:
            x = float(rng.uniform(0.0, 0.65))
        else:
            x = float(rng.uniform(0.18, 0.32))

        if side is None:
            y = float(rng.uniform(-0.5, 0.5))
        else:
            sign = 1.0 if side == "left" else -1.0
            y = sign * float(rng.uniform(0.12, 0.42))

        if all(math.hypot(x - ox, y - oy) >= radius + orad + 0.01 for ox, oy, orad in occupied):
            return x, y
    raise PlacementOverflow(f"could not place '{template.name}' after 100 attempts")


# ---------------------------------------------------------------------------
# Robot


ROBOT: DualArm = make_dual_arm()


def reach_top_down(robot: DualArm, side: ArmSide, target: np.ndarray) -> np.ndarray:
    """Joint angles putting the tool tip at ``target`` pointing straight down.

    Closed-form for the toy arm: base yaw aims the arm plane at the target,
    the wrist pitch joint then sits one tool length above it and the
    shoulder/elbow pair is a two-link planar problem (elbow up).
    """

    l0, l1, l2, l3, l4, l5 = LINK_LENGTHS
    tool = l3 + l4 + l5
    base = robot.arm(side).base.position
    dx, dy = float(target[0] - base[0]), float(target[1] - base[1])
    yaw = math.atan2(dy, dx)
    r = math.hypot(dx, dy)

    # Wrist pitch joint relative to the shoulder, in the arm plane.
    px = r
    pz = float(target[2] + tool - (base[2] + l0))
    dist = math.hypot(px, pz)
    if not (abs(l1 - l2) + 0.01 <= dist <= l1 + l2 - 0.01) or r < 0.05:
        raise Unreachable(f"{side} arm cannot reach {np.round(target, 3).tolist()}")

    cos_elbow = (px * px + pz * pz - l1 * l1 - l2 * l2) / (2 * l1 * l2)
    theta2 = -math.acos(max(-1.0, min(1.0, cos_elbow)))
    theta1 = math.atan2(pz, px) - math.atan2(l2 * math.sin(theta2), l1 + l2 * math.cos(theta2))
    q2 = -theta1
    q3 = -theta2
    q4 = math.pi / 2 - q2 - q3
    q = np.array([yaw, q2, q3, q4, 0.0, 0.0])

    reached = fk(robot.arm(side), q).position
    if np.linalg.norm(reached - target) > 1e-6:
        raise Unreachable(f"{side} arm solution misses target by {np.linalg.norm(reached - target):.3g} m")
    return q


def _home_qpos(robot: DualArm, side: ArmSide) -> np.ndarray:
    base_y = ARM_BASE_Y if side == "left" else -ARM_BASE_Y
    x, z = HOME_TOOL_XZ
    return reach_top_down(robot, side, np.array([x, base_y, z]))


HOME_QPOS: dict[str, np.ndarray] = {side: _home_qpos(ROBOT, side) for side in ("left", "right")}


def home_state(robot: DualArm = ROBOT) -> np.ndarray:
    return state_from_joints(robot, HOME_QPOS["left"], 1.0, HOME_QPOS["right"], 1.0)


def tool_positions(robot: DualArm, state: np.ndarray) -> dict[str, np.ndarray]:
    return {
        "left": fk(robot.left, state[LEFT_QPOS]).position,
        "right": fk(robot.right, state[RIGHT_QPOS]).position,
    }


def _gripper_objects(robot: DualArm, state: np.ndarray, *, critical: bool) -> list[SceneObject]:
    tools = tool_positions(robot, state)
    return [
        SceneObject(
            object_id=f"{side}_gripper",
            shape="sphere",
            size=(GRIPPER_RADIUS_M,),
            pose=Pose.from_translation(tools[side]),
            color=(0.25, 0.25, 0.28),
            critical=critical,
            kind="robot",
        )
        for side in ("left", "right")
    ]


# ---------------------------------------------------------------------------
# Rendering


@dataclass(slots=True)
class RenderStats:
    """Process-wide count of raycast calls (used to check phase contracts)."""

    calls: int = 0
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def bump(self) -> None:
        with self._lock:
            self.calls += 1


RENDER_STATS = RenderStats()


def raycast_views(scene: Scene) -> list[tuple[np.ndarray, np.ndarray]]:
    """Render every camera: a list of (depth (H, W), rgb (H, W, 3)) pairs.

    Depth is the camera-frame z of the nearest hit among visible objects and
    the table; rays that hit nothing get ``scene.far_clip``.
    """

    RENDER_STATS.bump()
    return [render_camera(scene, cam) for cam in scene.cameras]


def render_camera(scene: Scene, cam: CameraModel) -> tuple[np.ndarray, np.ndarray]:
    h, w = cam.height, cam.width
    rays_cam = cam.pixel_rays().reshape(-1, 3)
    # World directions scaled so that the camera-frame z component is 1:
    # the ray parameter at a hit is then the depth itself.
    dirs = rays_cam @ cam.R
    origin = cam.center

    depth = np.full(dirs.shape[0], scene.far_clip)
    rgb = np.tile(np.asarray(scene.background_color, dtype=np.float64), (dirs.shape[0], 1))

    s_table = _intersect_table(scene, origin, dirs)
    hit = s_table < depth
    depth[hit] = s_table[hit]
    rgb[hit] = scene.table_color

    for obj in scene.objects:
        if not obj.visible:
            continue
        s_obj = intersect_object(obj, origin, dirs)
        hit = s_obj < depth
        depth[hit] = s_obj[hit]
        rgb[hit] = obj.color

    return depth.reshape(h, w), rgb.reshape(h, w, 3)


def _intersect_table(scene: Scene, origin: np.ndarray, dirs: np.ndarray) -> np.ndarray:
    x0, x1, y0, y1 = scene.table_extent
    s = np.full(dirs.shape[0], np.inf)
    dz = dirs[:, 2]
    ok = np.abs(dz) > 1e-12
    s_ok = (scene.table_z - origin[2]) / dz[ok]
    s[ok] = np.where(s_ok > 0, s_ok, np.inf)
    px = origin[0] + s * dirs[:, 0]
    py = origin[1] + s * dirs[:, 1]
    inside = np.isfinite(s) & (px >= x0) & (px <= x1) & (py >= y0) & (py <= y1)
    return np.where(inside, s, np.inf)


def intersect_object(obj: SceneObject, origin: np.ndarray, dirs: np.ndarray) -> np.ndarray:
    """Ray parameter of the first hit with ``obj`` for each direction (inf on miss)."""

    if obj.shape == "sphere":
        return _intersect_sphere(obj.center, obj.size[0], origin, dirs)
    return _intersect_box(obj.center, obj.pose.rotation, np.asarray(obj.size), origin, dirs)


def _intersect_sphere(center: np.ndarray, radius: float, origin: np.ndarray, dirs: np.ndarray) -> np.ndarray:
    oc = origin - center
    a = np.einsum("ij,ij->i", dirs, dirs)
    b = dirs @ oc
    c = float(oc @ oc) - radius * radius
    disc = b * b - a * c
    out = np.full(dirs.shape[0], np.inf)
    ok = disc >= 0
    root = np.sqrt(disc[ok])
    near = (-b[ok] - root) / a[ok]
    far = (-b[ok] + root) / a[ok]
    out[ok] = np.where(near > 0, near, np.where(far > 0, far, np.inf))
    return out


def _intersect_box(
    center: np.ndarray,
    rotation: np.ndarray,
    half: np.ndarray,
    origin: np.ndarray,
    dirs: np.ndarray,
) -> np.ndarray:
    o = rotation.T @ (origin - center)
    d = dirs @ rotation
    t_near = np.full(dirs.shape, -np.inf)
    t_far = np.full(dirs.shape, np.inf)
    for axis in range(3):
        da = d[:, axis]
        moving = np.abs(da) > 1e-15
        t1 = (-half[axis] - o[axis]) / np.where(moving, da, 1.0)
        t2 = (half[axis] - o[axis]) / np.where(moving, da, 1.0)
        lo = np.minimum(t1, t2)
        hi = np.maximum(t1, t2)
        inside_slab = abs(o[axis]) <= half[axis]
        t_near[:, axis] = np.where(moving, lo, -np.inf if inside_slab else np.inf)
        t_far[:, axis] = np.where(moving, hi, np.inf if inside_slab else -np.inf)
    enter = t_near.max(axis=1)
    leave = t_far.min(axis=1)
    hit = (enter <= leave) & (leave > 0)
    s = np.where(enter > 0, enter, leave)
    return np.where(hit, s, np.inf)


# ---------------------------------------------------------------------------
# Expert


def trapezoid_fraction(tau: float, accel_fraction: float = ACCEL_FRACTION) -> float:
    """Normalized progress along a trapezoidal speed profile, tau in [0, 1]."""

    f = accel_fraction
    v_peak = 1.0 / (1.0 - f)
    if tau <= 0.0:
        return 0.0
    if tau >= 1.0:
        return 1.0
    if tau < f:
        return v_peak * tau * tau / (2.0 * f)
    if tau <= 1.0 - f:
        return v_peak * (f / 2.0 + (tau - f))
    rest = 1.0 - tau
    return 1.0 - v_peak * rest * rest / (2.0 * f)


@dataclass(frozen=True, slots=True, eq=False)
class _Waypoint:
    kind: AnchorType
    left_q: np.ndarray
    left_grip: float
    right_q: np.ndarray
    right_grip: float


def plan_expert_anchors(scene: Scene, robot: DualArm = ROBOT) -> list[_Waypoint]:
    """Anchor targets derived from the affordances and placements.

    Each placement contributes the grasp-place sequence
    PG, TGO, TGC, PG, PP, TPC, TPO, PP, HM for its arm; the other arm rests
    at home with an open gripper.
    """

    waypoints: list[_Waypoint] = []
    for placement in scene.placements:
        side = placement.arm
        aff = scene.affordance(placement.object_id)
        grasp = scene.grasp_point(placement.object_id)
        place = placement.target + aff.offset
        pre_grasp = grasp + APPROACH_OFFSET_M * aff.approach
        pre_place = place + APPROACH_OFFSET_M * np.array([0.0, 0.0, 1.0])

        q_pg = reach_top_down(robot, side, pre_grasp)
        q_g = reach_top_down(robot, side, grasp)
        q_pp = reach_top_down(robot, side, pre_place)
        q_p = reach_top_down(robot, side, place)
        q_home = HOME_QPOS[side]

        targets = (
            (q_pg, 1.0),
            (q_g, 1.0),
            (q_g, 0.0),
            (q_pg, 0.0),
            (q_pp, 0.0),
            (q_p, 0.0),
            (q_p, 1.0),
            (q_pp, 1.0),
            (q_home, 1.0),
        )
        for kind, (q, grip) in zip(GRASP_PLACE_SEQUENCE, targets):
            if side == "left":
                waypoints.append(_Waypoint(kind, q, grip, HOME_QPOS["right"], 1.0))
            else:
                waypoints.append(_Waypoint(kind, HOME_QPOS["left"], 1.0, q, grip))
    return waypoints


def expert_rollout(scene: Scene, spec: TaskSpec | None = None, robot: DualArm = ROBOT) -> ExpertLog:
    """Dense 25 Hz expert trajectory with atomic-module tags.

    Moves follow a trapezoidal speed profile in joint space; gripper commands
    ramp the gripper linearly. Every module ends with a few rest frames at
    its target, and its last frame is the anchor. Raises
    :class:`Unreachable` when an anchor pose is outside the arm's reach.
    """

    waypoints = plan_expert_anchors(scene, robot)
    if spec is not None and spec.task_id != scene.task_id:
        raise ValueError("task spec does not match the scene")

    start = decode_state(scene.state)
    cur_lq, cur_lg = start.left_q, start.left_grip
    cur_rq, cur_rg = start.right_q, start.right_grip

    states = [scene.state.copy()]
    modules = [0]
    for m, wp in enumerate(waypoints):
        dq = max(
            float(np.max(np.abs(wp.left_q - cur_lq))),
            float(np.max(np.abs(wp.right_q - cur_rq))),
        )
        if dq > 1e-12:
            n = max(MIN_MOVE_FRAMES, int(math.ceil(dq / MOVE_SPEED_RAD_S * RATE_HZ)))
            for k in range(1, n + 1):
                if k == n:
                    lq, rq, lg, rg = wp.left_q, wp.right_q, wp.left_grip, wp.right_grip
                else:
                    s = trapezoid_fraction(k / n)
                    lq = cur_lq + (wp.left_q - cur_lq) * s
                    rq = cur_rq + (wp.right_q - cur_rq) * s
                    lg = cur_lg + (wp.left_grip - cur_lg) * s
                    rg = cur_rg + (wp.right_grip - cur_rg) * s
                states.append(state_from_joints(robot, lq, lg, rq, rg))
                modules.append(m)
        else:
            for k in range(1, GRIPPER_FRAMES + 1):
                s = k / GRIPPER_FRAMES
                lg = wp.left_grip if k == GRIPPER_FRAMES else cur_lg + (wp.left_grip - cur_lg) * s
                rg = wp.right_grip if k == GRIPPER_FRAMES else cur_rg + (wp.right_grip - cur_rg) * s
                states.append(state_from_joints(robot, wp.left_q, lg, wp.right_q, rg))
                modules.append(m)
        for _ in range(SETTLE_FRAMES):
            states.append(states[-1].copy())
            modules.append(m)
        cur_lq, cur_lg, cur_rq, cur_rg = wp.left_q, wp.left_grip, wp.right_q, wp.right_grip

    return ExpertLog(
        states=np.stack(states),
        module_index=np.asarray(modules, dtype=np.int64),
        module_types=tuple(wp.kind for wp in waypoints),
        rate_hz=RATE_HZ,
    )


# ---------------------------------------------------------------------------
# Execution


def execute_anchor(
    scene: Scene,
    anchor: np.ndarray,
    *,
    grasp_tolerance: float = 0.02,
    robot: DualArm = ROBOT,
) -> Scene:
    """Teleport both arms to the anchor's joints and apply gripper events.

    Only joints and grippers of ``anchor`` are used; end poses are recomputed
    with forward kinematics. Held objects move with their gripper. A gripper
    crossing below 0.5 attaches the nearest graspable object whose grasp
    point is within ``grasp_tolerance``; crossing above 0.5 releases the held
    object, which comes to rest on its support below.
    """

    a = np.asarray(anchor, dtype=np.float64)
    if a.shape != (32,) or not np.all(np.isfinite(a)):
        raise ValueError("anchor must be a finite 32-dim vector")

    grips = {
        "left": float(np.clip(a[LEFT_GRIPPER], 0.0, 1.0)),
        "right": float(np.clip(a[RIGHT_GRIPPER], 0.0, 1.0)),
    }
    prev_grips = {"left": float(scene.state[LEFT_GRIPPER]), "right": float(scene.state[RIGHT_GRIPPER])}
    state = state_from_joints(robot, a[LEFT_QPOS], grips["left"], a[RIGHT_QPOS], grips["right"])
    tools = tool_positions(robot, state)

    objects = {obj.object_id: obj for obj in scene.objects}
    attachments = {att.arm: att for att in scene.attachments}

    # Carry held objects along.
    for side, att in attachments.items():
        objects[att.object_id] = objects[att.object_id].moved_to(tools[side] + att.offset)

    for side in ("left", "right"):
        closing = prev_grips[side] >= 0.5 > grips[side]
        opening = prev_grips[side] < 0.5 <= grips[side]
        if closing and side not in attachments:
            held = {att.object_id for att in attachments.values()}
            best: tuple[float, str] | None = None
            for aff in scene.affordances:
                obj = objects[aff.object_id]
                if not obj.graspable or obj.object_id in held:
                    continue
                dist = float(np.linalg.norm(obj.center + aff.offset - tools[side]))
                if dist <= grasp_tolerance and (best is None or dist < best[0]):
                    best = (dist, obj.object_id)
            if best is not None:
                obj = objects[best[1]]
                attachments[side] = Attachment(side, obj.object_id, obj.center - tools[side])
                logger.debug("%s gripper grasped %s", side, obj.object_id)
        elif opening and side in attachments:
            att = attachments.pop(side)
            obj = objects[att.object_id]
            rest = obj.center.copy()
            rest[2] = _resting_z(scene, objects, obj)
            objects[att.object_id] = obj.moved_to(rest)
            logger.debug("%s gripper released %s", side, obj.object_id)

    for side in ("left", "right"):
        key = f"{side}_gripper"
        if key in objects:
            objects[key] = objects[key].moved_to(tools[side])

    return replace(
        scene,
        objects=tuple(objects[obj.object_id] for obj in scene.objects),
        state=state,
        attachments=tuple(attachments[s] for s in ("left", "right") if s in attachments),
    )


def _resting_z(scene: Scene, objects: dict[str, SceneObject], obj: SceneObject) -> float:
    """Center height of ``obj`` resting on the table or on a box beneath it."""

    support = scene.table_z
    x, y = float(obj.center[0]), float(obj.center[1])
    for other in objects.values():
        if other.object_id == obj.object_id or other.kind in {"robot", "pad"}:
            continue
        if other.shape != "box":
            continue
        hx, hy, hz = other.size
        if abs(x - other.center[0]) <= hx and abs(y - other.center[1]) <= hy:
            top = float(other.center[2] + hz)
            if top <= obj.center[2] + 1e-9:
                support = max(support, top)
    return support + obj.half_height


def check_success(scene: Scene, spec: TaskSpec | None = None, *, tolerance: float = 0.03) -> bool:
    """True when every placed object is within ``tolerance`` of its target
    and released by an open gripper."""

    if spec is not None and spec.task_id != scene.task_id:
        raise ValueError("task spec does not match the scene")
    held = {att.object_id for att in scene.attachments}
    grips = {"left": float(scene.state[LEFT_GRIPPER]), "right": float(scene.state[RIGHT_GRIPPER])}
    for placement in scene.placements:
        if placement.object_id in held or grips[placement.arm] < 0.5:
            return False
        dist = float(np.linalg.norm(scene.object(placement.object_id).center - placement.target))
        if dist > tolerance:
            return False
    return True


def scene_at_frame(scene: Scene, log: ExpertLog, t: int, *, grasp_tolerance: float = 0.02) -> Scene:
    """Scene as it looks at frame ``t`` of the expert trajectory."""

    current = scene
    for step in log.anchor_steps:
        if step >= t:
            break
        current = execute_anchor(current, log.states[step], grasp_tolerance=grasp_tolerance)
    return execute_anchor(current, log.states[t], grasp_tolerance=grasp_tolerance)


def perturb_state(
    state: np.ndarray,
    rng: np.random.Generator,
    *,
    max_translation: float = 0.05,
    max_rotation: float = 0.2,
    robot: DualArm = ROBOT,
) -> np.ndarray:
    """Push both arms off the expert pose by a bounded random joint offset.

    Joint offsets are uniform in [-max_rotation, max_rotation] and scaled
    down per arm until the tool moves at most ``max_translation``.
    """

    s = decode_state(state)
    arms = {"left": s.left_q, "right": s.right_q}
    perturbed: dict[str, np.ndarray] = {}
    for side in ("left", "right"):
        q = arms[side]
        delta = rng.uniform(-max_rotation, max_rotation, size=q.shape)
        start = fk(robot.arm(side), q).position
        moved = float(np.linalg.norm(fk(robot.arm(side), q + delta).position - start))
        if moved > max_translation:
            delta *= max_translation / moved
            # fk is not linear in the joints; shrink until the bound holds.
            while float(np.linalg.norm(fk(robot.arm(side), q + delta).position - start)) > max_translation:
                delta *= 0.9
        perturbed[side] = q + delta
    return state_from_joints(robot, perturbed["left"], s.left_grip, perturbed["right"], s.right_grip)


# ---------------------------------------------------------------------------
# Serialization


def scene_to_json(scene: Scene) -> dict[str, Any]:
    def pose(p: Pose) -> dict[str, Any]:
        return {"position": p.position.tolist(), "rotation": p.rotation.tolist()}

    return {
        "version": SCENE_FORMAT_VERSION,
        "task_id": scene.task_id,
        "seed": scene.seed,
        "table_z": scene.table_z,
        "table_extent": list(scene.table_extent),
        "table_color": list(scene.table_color),
        "background_color": list(scene.background_color),
        "far_clip": scene.far_clip,
        "objects": [
            {
                "id": o.object_id,
                "shape": o.shape,
                "size": list(o.size),
                "pose": pose(o.pose),
                "color": list(o.color),
                "visible": o.visible,
                "critical": o.critical,
                "graspable": o.graspable,
                "kind": o.kind,
            }
            for o in scene.objects
        ],
        "affordances": [
            {"id": a.object_id, "offset": a.offset.tolist(), "approach": a.approach.tolist()}
            for a in scene.affordances
        ],
        "placements": [
            {"id": p.object_id, "target": p.target.tolist(), "arm": p.arm} for p in scene.placements
        ],
        "cameras": [
            {"K": c.K.tolist(), "R": c.R.tolist(), "t": c.t.tolist(), "width": c.width, "height": c.height}
            for c in scene.cameras
        ],
        "state": scene.state.tolist(),
        "attachments": [
            {"arm": a.arm, "id": a.object_id, "offset": a.offset.tolist()} for a in scene.attachments
        ],
    }


def scene_from_json(data: dict[str, Any]) -> Scene:
    version = data.get("version")
    if version != SCENE_FORMAT_VERSION:
        raise ValueError(f"unsupported scene format version {version!r}")

    def pose(p: dict[str, Any]) -> Pose:
        return Pose(np.asarray(p["position"], dtype=np.float64), np.asarray(p["rotation"], dtype=np.float64))

    return Scene(
        task_id=int(data["task_id"]),
        seed=int(data["seed"]),
        table_z=float(data["table_z"]),
        table_extent=tuple(data["table_extent"]),
        table_color=tuple(data["table_color"]),
        background_color=tuple(data["background_color"]),
        far_clip=float(data["far_clip"]),
        objects=tuple(
            SceneObject(
                object_id=o["id"],
                shape=o["shape"],
                size=tuple(o["size"]),
                pose=pose(o["pose"]),
                color=tuple(o["color"]),
                visible=bool(o["visible"]),
                critical=bool(o["critical"]),
                graspable=bool(o["graspable"]),
                kind=str(o["kind"]),
            )
            for o in data["objects"]
        ),
        affordances=tuple(
            Affordance(a["id"], np.asarray(a["offset"], dtype=np.float64), np.asarray(a["approach"], dtype=np.float64))
            for a in data["affordances"]
        ),
        placements=tuple(
            Placement(p["id"], np.asarray(p["target"], dtype=np.float64), p["arm"]) for p in data["placements"]
        ),
        cameras=tuple(
            CameraModel(
                K=np.asarray(c["K"], dtype=np.float64),
                R=np.asarray(c["R"], dtype=np.float64),
                t=np.asarray(c["t"], dtype=np.float64),
                width=int(c["width"]),
                height=int(c["height"]),
            )
            for c in data["cameras"]
        ),
        state=np.asarray(data["state"], dtype=np.float64),
        attachments=tuple(
            Attachment(a["arm"], a["id"], np.asarray(a["offset"], dtype=np.float64)) for a in data["attachments"]
        ),
    )


def save_scene(scene: Scene, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fp:
        json.dump(scene_to_json(scene), fp, indent=2)


def load_scene(path: str) -> Scene:
    with open(path, "r", encoding="utf-8") as fp:
        return scene_from_json(json.load(fp))
