"""Rigid-body math, pinhole cameras, the 6D rotation form and the dual arm.

Conventions
- Points and directions are ``numpy`` arrays of shape (3,), float64.
- Rotation matrices are (3, 3) with orthonormal columns.
- Camera extrinsics map world to camera: ``p_cam = R @ p_world + t``.
  The camera looks along its +z axis, +x is image right, +y is image down.
- Pixel coordinates are integer pixel indices: ``u`` is the column,
  ``v`` the row. Pixel (cx, cy) sits exactly on the optical axis.

The 32-dim state vector layout::

    [0:6]   left qpos (rad)       [6]  left gripper (0 closed .. 1 open)
    [7:13]  right qpos (rad)      [13] right gripper
    [14:17] left end xyz (m)      [17:23] left rotation, first two columns
    [23:26] right end xyz (m)     [26:32] right rotation, first two columns

End poses are expressed in the world frame.
"""

from __future__ import annotations

from dataclasses import dataclass, field
import math
from typing import NamedTuple, Sequence

import numpy as np

from .errors import (
    BehindCamera,
    DegenerateRotation6D,
    GripperOutOfRange,
    NonPositiveDepth,
)

STATE_DIM = 32
EXECUTED_DIM = 14

LEFT_QPOS = slice(0, 6)
LEFT_GRIPPER = 6
RIGHT_QPOS = slice(7, 13)
RIGHT_GRIPPER = 13
LEFT_POS = slice(14, 17)
LEFT_ROT6 = slice(17, 23)
RIGHT_POS = slice(23, 26)
RIGHT_ROT6 = slice(26, 32)
GRIPPER_INDICES = (LEFT_GRIPPER, RIGHT_GRIPPER)

_ROT6_EPS = 1e-8


def as_vec3(values: Sequence[float] | np.ndarray) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64).reshape(3)
    if not np.all(np.isfinite(v)):
        raise ValueError("vector components must be finite")
    return v


def axis_angle(axis: Sequence[float] | np.ndarray, angle: float) -> np.ndarray:
    """Rotation matrix about a unit ``axis`` (Rodrigues)."""

    a = np.asarray(axis, dtype=np.float64)
    x, y, z = a
    c = math.cos(angle)
    s = math.sin(angle)
    C = 1.0 - c
    return np.array(
        [
            [c + x * x * C, x * y * C - z * s, x * z * C + y * s],
            [y * x * C + z * s, c + y * y * C, y * z * C - x * s],
            [z * x * C - y * s, z * y * C + x * s, c + z * z * C],
        ]
    )


def is_rotation(R: np.ndarray, tol: float = 1e-6) -> bool:
    R = np.asarray(R, dtype=np.float64)
    if R.shape != (3, 3):
        return False
    return bool(np.allclose(R.T @ R, np.eye(3), atol=tol) and abs(np.linalg.det(R) - 1.0) <= tol)


def rot_to_6d(R: np.ndarray) -> np.ndarray:
    """First two columns of ``R``, column-major: (R00, R10, R20, R01, R11, R21)."""

    R = np.asarray(R, dtype=np.float64)
    return np.concatenate([R[:, 0], R[:, 1]])


def rot_from_6d(r: Sequence[float] | np.ndarray) -> np.ndarray:
    """Rebuild a rotation from its 6D form by Gram-Schmidt.

    Raises :class:`DegenerateRotation6D` when the first column or the part of
    the second column orthogonal to it has (near) zero length.
    """

    r = np.asarray(r, dtype=np.float64).reshape(6)
    c1, c2 = r[:3], r[3:]
    n1 = np.linalg.norm(c1)
    if not n1 > _ROT6_EPS:
        raise DegenerateRotation6D(f"first column norm {n1:.3g} is too small")
    a = c1 / n1
    residual = c2 - np.dot(a, c2) * a
    n2 = np.linalg.norm(residual)
    if not n2 > _ROT6_EPS:
        raise DegenerateRotation6D(f"second column is parallel to the first (residual {n2:.3g})")
    b = residual / n2
    return np.stack([a, b, np.cross(a, b)], axis=1)


@dataclass(frozen=True, slots=True, eq=False)
class Pose:
    position: np.ndarray
    rotation: np.ndarray

    @staticmethod
    def identity() -> "Pose":
        return Pose(np.zeros(3), np.eye(3))

    @staticmethod
    def from_translation(xyz: Sequence[float]) -> "Pose":
        return Pose(as_vec3(xyz), np.eye(3))

    def compose(self, other: "Pose") -> "Pose":
        """``self * other``: ``other`` expressed in the frame of ``self``."""

        return Pose(self.position + self.rotation @ other.position, self.rotation @ other.rotation)

    def apply(self, point: np.ndarray) -> np.ndarray:
        return self.position + self.rotation @ point


# ---------------------------------------------------------------------------
# Camera


@dataclass(frozen=True, slots=True, eq=False)
class CameraModel:
    K: np.ndarray
    R: np.ndarray
    t: np.ndarray
    width: int
    height: int

    def __post_init__(self) -> None:
        fx, fy, cx, cy = self.fx, self.fy, self.cx, self.cy
        if not (fx > 0 and fy > 0):
            raise ValueError("camera focal lengths must be positive")
        if not (0 <= cx < self.width and 0 <= cy < self.height):
            raise ValueError("camera principal point must lie inside the image")
        if not is_rotation(self.R):
            raise ValueError("camera extrinsic rotation is not a valid rotation")

    @property
    def fx(self) -> float:
        return float(self.K[0, 0])

    @property
    def fy(self) -> float:
        return float(self.K[1, 1])

    @property
    def cx(self) -> float:
        return float(self.K[0, 2])

    @property
    def cy(self) -> float:
        return float(self.K[1, 2])

    @property
    def center(self) -> np.ndarray:
        """Camera position in the world frame."""

        return -self.R.T @ self.t

    def pixel_rays(self) -> np.ndarray:
        """Camera-frame ray for every pixel, shape (H, W, 3), with z == 1."""

        v, u = np.mgrid[0 : self.height, 0 : self.width].astype(np.float64)
        rays = np.empty((self.height, self.width, 3))
        rays[..., 0] = (u - self.cx) / self.fx
        rays[..., 1] = (v - self.cy) / self.fy
        rays[..., 2] = 1.0
        return rays


def intrinsics(fx: float, fy: float, cx: float, cy: float) -> np.ndarray:
    return np.array([[fx, 0.0, cx], [0.0, fy, cy], [0.0, 0.0, 1.0]])


def look_at_camera(
    eye: Sequence[float],
    target: Sequence[float],
    *,
    width: int,
    height: int,
    focal_px: float,
    up: Sequence[float] = (0.0, 0.0, 1.0),
) -> CameraModel:
    """Camera at ``eye`` looking at ``target`` with the principal point centered."""

    eye_v = as_vec3(eye)
    forward = as_vec3(target) - eye_v
    forward /= np.linalg.norm(forward)
    up_v = as_vec3(up)
    if abs(float(np.dot(forward, up_v))) > 1.0 - 1e-9:
        # Looking along the up axis: any horizontal right vector will do.
        up_v = np.array([1.0, 0.0, 0.0]) if abs(forward[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    right = np.cross(forward, up_v)
    right /= np.linalg.norm(right)
    down = np.cross(forward, right)
    R = np.stack([right, down, forward], axis=0)
    t = -R @ eye_v
    K = intrinsics(focal_px, focal_px, (width - 1) / 2.0, (height - 1) / 2.0)
    return CameraModel(K=K, R=R, t=t, width=width, height=height)


def project_pixel(cam: CameraModel, u: float, v: float, d: float) -> np.ndarray:
    """World point seen at pixel (u, v) with camera-frame depth ``d``."""

    if not d > 0:
        raise NonPositiveDepth(f"depth must be > 0, got {d}")
    p_cam = np.array([(u - cam.cx) / cam.fx * d, (v - cam.cy) / cam.fy * d, d])
    return cam.R.T @ (p_cam - cam.t)


def world_to_pixel(cam: CameraModel, p: Sequence[float] | np.ndarray) -> tuple[float, float, float]:
    """Inverse of :func:`project_pixel`: returns (u, v, depth)."""

    p_cam = cam.R @ np.asarray(p, dtype=np.float64) + cam.t
    z = float(p_cam[2])
    if not z > 0:
        raise BehindCamera(f"point has camera-frame z = {z:.6g}")
    u = cam.fx * p_cam[0] / z + cam.cx
    v = cam.fy * p_cam[1] / z + cam.cy
    return float(u), float(v), z


# ---------------------------------------------------------------------------
# Kinematics


@dataclass(frozen=True, slots=True, eq=False)
class KinematicChain:
    """Serial chain of revolute joints.

    Joint ``j`` first applies the fixed ``offsets[j]`` and then rotates about
    ``axes[j]`` by its angle. ``tool`` is applied after the last joint.
    """

    offsets: tuple[Pose, ...]
    axes: np.ndarray
    base: Pose = field(default_factory=Pose.identity)
    tool: Pose = field(default_factory=Pose.identity)

    def __post_init__(self) -> None:
        axes = np.asarray(self.axes, dtype=np.float64)
        if axes.shape != (len(self.offsets), 3):
            raise ValueError("one axis per joint offset is required")
        if not np.allclose(np.linalg.norm(axes, axis=1), 1.0, atol=1e-9):
            raise ValueError("joint axes must be unit vectors")

    @property
    def dof(self) -> int:
        return len(self.offsets)


def fk(chain: KinematicChain, qpos: Sequence[float] | np.ndarray) -> Pose:
    """Tool pose in the world frame for joint angles ``qpos``."""

    q = np.asarray(qpos, dtype=np.float64)
    if q.shape != (chain.dof,):
        raise ValueError(f"expected {chain.dof} joint angles, got shape {q.shape}")
    if not np.all(np.isfinite(q)):
        raise ValueError("joint angles must be finite")
    pose = chain.base
    for offset, axis, angle in zip(chain.offsets, chain.axes, q):
        pose = pose.compose(offset).compose(Pose(np.zeros(3), axis_angle(axis, float(angle))))
    return pose.compose(chain.tool)


# Link lengths of the toy arm: column, upper arm, forearm, wrist, wrist, tool.
LINK_LENGTHS = (0.25, 0.25, 0.2, 0.1, 0.1, 0.05)
ARM_BASE_Y = 0.3

_Z = (0.0, 0.0, 1.0)
_Y = (0.0, 1.0, 0.0)
_X = (1.0, 0.0, 0.0)


def make_arm(base_y: float) -> KinematicChain:
    """One arm of the toy dual-arm robot, mounted at (0, base_y, 0).

    Joints: base yaw (z), shoulder, elbow and wrist pitch (y), two tool rolls
    (x). The three pitch joints make a planar arm; the rolls leave the tool
    axis unchanged, so the tool tip sits 0.25 m past the wrist pitch joint.
    """

    l0, l1, l2, l3, l4, l5 = LINK_LENGTHS
    offsets = (
        Pose.identity(),
        Pose.from_translation((0.0, 0.0, l0)),
        Pose.from_translation((l1, 0.0, 0.0)),
        Pose.from_translation((l2, 0.0, 0.0)),
        Pose.from_translation((l3, 0.0, 0.0)),
        Pose.from_translation((l4, 0.0, 0.0)),
    )
    axes = np.array([_Z, _Y, _Y, _Y, _X, _X])
    return KinematicChain(
        offsets=offsets,
        axes=axes,
        base=Pose.from_translation((0.0, base_y, 0.0)),
        tool=Pose.from_translation((l5, 0.0, 0.0)),
    )


@dataclass(frozen=True, slots=True, eq=False)
class DualArm:
    left: KinematicChain
    right: KinematicChain

    def arm(self, side: str) -> KinematicChain:
        return self.left if side == "left" else self.right


def make_dual_arm() -> DualArm:
    """Two mirrored arms, bases at +0.3 m (left) and -0.3 m (right) on y."""

    return DualArm(left=make_arm(ARM_BASE_Y), right=make_arm(-ARM_BASE_Y))


# ---------------------------------------------------------------------------
# State vector


class DualArmState(NamedTuple):
    left_q: np.ndarray
    left_grip: float
    right_q: np.ndarray
    right_grip: float
    left_pose: Pose
    right_pose: Pose


def encode_state(
    left_q: Sequence[float] | np.ndarray,
    left_grip: float,
    right_q: Sequence[float] | np.ndarray,
    right_grip: float,
    left_pose: Pose,
    right_pose: Pose,
) -> np.ndarray:
    """Pack both arms into the 32-dim state/action vector."""

    for name, grip in (("left", left_grip), ("right", right_grip)):
        if not 0.0 <= grip <= 1.0:
            raise GripperOutOfRange(f"{name} gripper {grip} outside [0, 1]")
    v = np.empty(STATE_DIM)
    v[LEFT_QPOS] = np.asarray(left_q, dtype=np.float64)
    v[LEFT_GRIPPER] = left_grip
    v[RIGHT_QPOS] = np.asarray(right_q, dtype=np.float64)
    v[RIGHT_GRIPPER] = right_grip
    v[LEFT_POS] = left_pose.position
    v[LEFT_ROT6] = rot_to_6d(left_pose.rotation)
    v[RIGHT_POS] = right_pose.position
    v[RIGHT_ROT6] = rot_to_6d(right_pose.rotation)
    return v


def decode_state(v: Sequence[float] | np.ndarray) -> DualArmState:
    v = np.asarray(v, dtype=np.float64)
    if v.shape != (STATE_DIM,):
        raise ValueError(f"state vector must have shape ({STATE_DIM},), got {v.shape}")
    for name, idx in (("left", LEFT_GRIPPER), ("right", RIGHT_GRIPPER)):
        if not 0.0 <= v[idx] <= 1.0:
            raise GripperOutOfRange(f"{name} gripper {v[idx]} outside [0, 1]")
    return DualArmState(
        left_q=v[LEFT_QPOS].copy(),
        left_grip=float(v[LEFT_GRIPPER]),
        right_q=v[RIGHT_QPOS].copy(),
        right_grip=float(v[RIGHT_GRIPPER]),
        left_pose=Pose(v[LEFT_POS].copy(), rot_from_6d(v[LEFT_ROT6])),
        right_pose=Pose(v[RIGHT_POS].copy(), rot_from_6d(v[RIGHT_ROT6])),
    )


def state_from_joints(
    robot: DualArm,
    left_q: np.ndarray,
    left_grip: float,
    right_q: np.ndarray,
    right_grip: float,
) -> np.ndarray:
    """State vector whose end poses are ``fk`` of the given joints."""

    return encode_state(
        left_q,
        left_grip,
        right_q,
        right_grip,
        fk(robot.left, left_q),
        fk(robot.right, right_q),
    )


def fk_consistency_error(robot: DualArm, v: np.ndarray) -> float:
    """Largest difference between the embedded end poses and ``fk`` of the joints."""

    v = np.asarray(v, dtype=np.float64)
    left = fk(robot.left, v[LEFT_QPOS])
    right = fk(robot.right, v[RIGHT_QPOS])
    expected = np.concatenate(
        [left.position, rot_to_6d(left.rotation), right.position, rot_to_6d(right.rotation)]
    )
    embedded = np.concatenate([v[LEFT_POS], v[LEFT_ROT6], v[RIGHT_POS], v[RIGHT_ROT6]])
    return float(np.max(np.abs(expected - embedded)))
