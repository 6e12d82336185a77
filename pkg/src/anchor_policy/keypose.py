"""Action anchors (keyposes).

An anchor is a sparse kinematic state where the motion changes character:
reaching a pre-grasp pose, closing the gripper, lifting, and so on. Anchors
come from two sources:

- symbolic expert logs, where every atomic module (a move or a gripper
  command) is tagged and its last frame becomes the anchor;
- raw dense trajectories, where anchors are found as kinematic
  discontinuities: the arm slows to (near) rest before re-accelerating.

The policy is supervised with the next ``H`` anchors after the current
frame (:func:`future_anchor_window`).
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Iterable, Sequence

import numpy as np

from .errors import PastEnd, TooShort, UntaggedLog
from .geometry import LEFT_GRIPPER, LEFT_QPOS, RIGHT_GRIPPER, RIGHT_QPOS, STATE_DIM

DEFAULT_HORIZON = 8
DEFAULT_RATE_HZ = 25.0


class AnchorType(str, Enum):
    PG = "PG"  # pre-grasp: affordance centroid + approach offset
    TGO = "TGO"  # at the grasp pose, gripper open
    TGC = "TGC"  # at the grasp pose, gripper closed
    PP = "PP"  # pre-place: placement pose + approach offset
    TPC = "TPC"  # at the placement pose, gripper closed
    TPO = "TPO"  # at the placement pose, gripper open
    HM = "HM"  # home


GRASP_PLACE_SEQUENCE: tuple[AnchorType, ...] = (
    AnchorType.PG,
    AnchorType.TGO,
    AnchorType.TGC,
    AnchorType.PG,
    AnchorType.PP,
    AnchorType.TPC,
    AnchorType.TPO,
    AnchorType.PP,
    AnchorType.HM,
)


@dataclass(frozen=True, slots=True, eq=False)
class Anchor:
    timestep: int
    state: np.ndarray
    kind: AnchorType


@dataclass(frozen=True, slots=True, eq=False)
class AnchorSequence:
    anchors: tuple[Anchor, ...]

    def __post_init__(self) -> None:
        steps = [a.timestep for a in self.anchors]
        if any(b <= a for a, b in zip(steps, steps[1:])):
            raise ValueError("anchor timesteps must be strictly increasing")

    def __len__(self) -> int:
        return len(self.anchors)

    def __iter__(self):
        return iter(self.anchors)

    def __getitem__(self, index: int) -> Anchor:
        return self.anchors[index]

    @property
    def timesteps(self) -> list[int]:
        return [a.timestep for a in self.anchors]

    @property
    def kinds(self) -> list[AnchorType]:
        return [a.kind for a in self.anchors]

    def states(self) -> np.ndarray:
        return np.stack([a.state for a in self.anchors]) if self.anchors else np.zeros((0, STATE_DIM))


@dataclass(frozen=True, slots=True, eq=False)
class ExpertLog:
    """Dense expert trajectory with its atomic-module tags.

    ``module_index[t]`` is the module running at frame ``t`` and
    ``module_types[m]`` the anchor type that module ends in.
    """

    states: np.ndarray
    module_index: np.ndarray
    module_types: tuple[AnchorType, ...]
    rate_hz: float = DEFAULT_RATE_HZ

    @property
    def n_frames(self) -> int:
        return int(self.states.shape[0])

    @property
    def anchor_steps(self) -> list[int]:
        """Last frame of every contiguous module run."""

        idx = np.asarray(self.module_index)
        if idx.size == 0:
            return []
        ends = np.flatnonzero(idx[1:] != idx[:-1]).tolist()
        return [int(e) for e in ends] + [int(idx.size - 1)]


def tag_anchors_symbolic(log: ExpertLog) -> AnchorSequence:
    """One anchor at the terminal frame of each atomic module."""

    idx = np.asarray(log.module_index)
    if idx.size == 0 or not log.module_types or idx.shape[0] != log.states.shape[0]:
        raise UntaggedLog("expert log carries no atomic-module tags")

    anchors = []
    for step in log.anchor_steps:
        module = int(idx[step])
        if not 0 <= module < len(log.module_types):
            raise UntaggedLog(f"frame {step} refers to unknown module {module}")
        anchors.append(Anchor(timestep=step, state=log.states[step].copy(), kind=log.module_types[module]))
    return AnchorSequence(tuple(anchors))


def joint_speeds(states: np.ndarray, rate_hz: float = DEFAULT_RATE_HZ) -> np.ndarray:
    """Speed between consecutive frames over the 12 joints and both grippers.

    Entry ``t`` is ``|x[t+1] - x[t]| * rate``. Gripper commands move nothing
    in joint space, so the gripper channels are part of the norm; a
    close/open then shows up as motion that comes to rest like any other.
    """

    x = np.asarray(states, dtype=np.float64)
    cols = np.concatenate(
        [
            x[:, LEFT_QPOS],
            x[:, RIGHT_QPOS],
            x[:, [LEFT_GRIPPER, RIGHT_GRIPPER]],
        ],
        axis=1,
    )
    return np.linalg.norm(np.diff(cols, axis=0), axis=1) * rate_hz


def detect_anchors_kinematic(
    states: np.ndarray,
    v_thresh: float = 0.05,
    min_gap: int = 5,
    rate_hz: float = DEFAULT_RATE_HZ,
) -> list[int]:
    """Anchor frames of an untagged dense trajectory.

    Candidates are local minima of :func:`joint_speeds` below ``v_thresh``.
    Slowest candidates win (earlier frame on ties) and suppress others
    closer than ``min_gap`` frames. First and last frames are always kept.
    """

    x = np.asarray(states, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 3:
        raise TooShort("kinematic detection needs at least 3 frames")

    speed = joint_speeds(x, rate_hz)
    last = x.shape[0] - 1
    candidates = []
    for t in range(1, speed.shape[0]):
        s = speed[t]
        right = speed[t + 1] if t + 1 < speed.shape[0] else np.inf
        if s < v_thresh and s <= speed[t - 1] and s <= right:
            candidates.append(t)

    accepted: list[int] = []
    for t in sorted(candidates, key=lambda c: (speed[c], c)):
        if all(abs(t - a) >= min_gap for a in accepted):
            accepted.append(t)
    return sorted({0, last, *accepted})


def future_anchor_window(anchors: AnchorSequence, t: int, horizon: int = DEFAULT_HORIZON) -> np.ndarray:
    """Label block of the next ``horizon`` anchors strictly after frame ``t``.

    Missing rows at the end of the trajectory repeat the final anchor.
    """

    if len(anchors) == 0:
        raise PastEnd("trajectory has no anchors")
    last = anchors[len(anchors) - 1]
    if t > last.timestep:
        raise PastEnd(f"frame {t} is after the last anchor at {last.timestep}")

    upcoming = [a.state for a in anchors if a.timestep > t][:horizon]
    while len(upcoming) < horizon:
        upcoming.append(last.state)
    return np.stack(upcoming).astype(np.float64)


def interval_of(anchors: AnchorSequence, t: int) -> int:
    """Index ``k`` of the first anchor strictly after ``t``.

    Frames with the same ``k`` share one label block.
    """

    for k, a in enumerate(anchors):
        if a.timestep > t:
            return k
    return len(anchors)


def match_detections(symbolic: Iterable[int], detected: Sequence[int], tolerance: int = 2) -> list[bool]:
    """For every symbolic anchor, whether some detection lies within ``tolerance`` frames."""

    det = np.asarray(detected)
    return [bool(det.size and np.min(np.abs(det - s)) <= tolerance) for s in symbolic]
