"""Sparse-trajectory dataset construction.

Collection runs in two phases:

- the rollout phase runs the scripted expert without rendering, keeps only
  seeds the expert completes, and records where the anchors fall;
- the render phase replays accepted seeds and renders a couple of frames
  between consecutive anchors (plus, now and then, a perturbed off-policy
  frame), each paired with its future-anchor label block.

Frames inside one anchor interval share their label block, so rendering
more than a few of them buys little.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
import json
import logging
import math
from pathlib import Path
import struct
from typing import Any, Sequence

import numpy as np

from .config import TASK_NAMES, DatasetConfig, PerceptionConfig, RunConfig, SceneConfig, SegmentationConfig
from .errors import CorruptDataset, PlacementOverflow, Unreachable
from .geometry import STATE_DIM
from .keypose import (
    DEFAULT_HORIZON,
    AnchorSequence,
    detect_anchors_kinematic,
    future_anchor_window,
    match_detections,
    tag_anchors_symbolic,
)
from .pointcloud import pad_cyclic
from .router import sample_instruction
from .scene import (
    Scene,
    TaskSpec,
    check_success,
    execute_anchor,
    expert_rollout,
    make_task_scene,
    perturb_state,
    scene_at_frame,
    task_spec,
)
from .segmentation import label_scene
from .telemetry import EventPublisher, NoopEventPublisher

logger = logging.getLogger(__name__)

DATASET_MAGIC = b"ADP3"
DATASET_VERSION = 1
MANIFEST_NAME = "manifest.json"
POINT_CHANNELS = 12


@dataclass(frozen=True, slots=True)
class AcceptedConfig:
    task_id: int
    scene_seed: int
    attempt: int
    anchor_steps: tuple[int, ...]
    anchor_kinds: tuple[str, ...]
    n_frames: int
    instruction: str


@dataclass(frozen=True, slots=True)
class RolloutStats:
    attempts: int = 0
    accepted: int = 0
    unreachable: int = 0
    placement_failed: int = 0
    expert_failed: int = 0
    anchors_tagged: int = 0
    anchors_detected: int = 0

    @property
    def acceptance_rate(self) -> float:
        return self.accepted / self.attempts if self.attempts else 0.0

    @property
    def detection_recall(self) -> float:
        """Share of tagged anchors that kinematic detection also finds."""

        return self.anchors_detected / self.anchors_tagged if self.anchors_tagged else 0.0


def attempt_seed(global_seed: int, task_id: int, attempt: int) -> int:
    """Scene seed of one rollout attempt; independent of attempt order."""

    return int(np.random.SeedSequence([global_seed, task_id, attempt]).generate_state(1)[0])


def rollout_phase(
    spec: TaskSpec,
    n_attempts: int,
    seed: int = 0,
    scene_cfg: SceneConfig | None = None,
    *,
    robot_critical: bool = True,
    max_accepted: int | None = None,
    v_thresh: float = 0.05,
    min_gap: int = 5,
) -> tuple[list[AcceptedConfig], RolloutStats]:
    """Run the expert on ``n_attempts`` seeded scenes, keeping the ones it completes.

    Nothing is rendered. Seeds whose anchors are out of reach, whose objects
    cannot be placed, or whose open-loop replay fails are counted and dropped.
    """

    if n_attempts < 1:
        raise ValueError("rollout phase needs at least one attempt")
    scene_cfg = scene_cfg or SceneConfig()
    accepted: list[AcceptedConfig] = []
    counts = {"unreachable": 0, "placement_failed": 0, "expert_failed": 0, "anchors_tagged": 0, "anchors_detected": 0}
    attempts = 0
    for attempt in range(n_attempts):
        if max_accepted is not None and len(accepted) >= max_accepted:
            break
        attempts += 1
        scene_seed = attempt_seed(seed, spec.task_id, attempt)
        try:
            scene = make_task_scene(spec, scene_seed, scene_cfg, robot_critical=robot_critical)
            log = expert_rollout(scene, spec)
        except Unreachable:
            counts["unreachable"] += 1
            continue
        except PlacementOverflow:
            counts["placement_failed"] += 1
            continue

        anchors = tag_anchors_symbolic(log)
        final = scene
        for a in anchors:
            final = execute_anchor(final, a.state, grasp_tolerance=scene_cfg.grasp_tolerance_m)
        if not check_success(final, spec, tolerance=scene_cfg.success_tolerance_m):
            counts["expert_failed"] += 1
            continue

        detected = detect_anchors_kinematic(log.states, v_thresh, min_gap)
        counts["anchors_tagged"] += len(anchors)
        counts["anchors_detected"] += sum(match_detections(anchors.timesteps, detected))
        rng = np.random.default_rng(scene_seed)
        accepted.append(
            AcceptedConfig(
                task_id=spec.task_id,
                scene_seed=scene_seed,
                attempt=attempt,
                anchor_steps=tuple(anchors.timesteps),
                anchor_kinds=tuple(k.value for k in anchors.kinds),
                n_frames=log.n_frames,
                instruction=sample_instruction(spec.task_id, rng).text,
            )
        )
    stats = RolloutStats(attempts=attempts, accepted=len(accepted), **counts)
    logger.info(
        "rollout %s: %d/%d accepted (%d unreachable, %d placement, %d expert failures)",
        spec.name,
        stats.accepted,
        stats.attempts,
        stats.unreachable,
        stats.placement_failed,
        stats.expert_failed,
    )
    return accepted, stats


# ---------------------------------------------------------------------------
# Frame planning


@dataclass(frozen=True, slots=True)
class PlannedFrame:
    timestep: int
    interval: int  # index of the first anchor after ``timestep``
    dagger: bool = False


def plan_frames(
    anchor_steps: Sequence[int],
    rng: np.random.Generator,
    *,
    frames_per_interval: int = 2,
    dagger_p: float = 0.1,
    render_anchor_frames: bool = False,
    include_start_interval: bool = False,
) -> list[PlannedFrame]:
    """Which frames of one trajectory get rendered.

    Every open interval between consecutive anchors contributes up to
    ``frames_per_interval`` distinct frames drawn without replacement and,
    with probability ``dagger_p``, one extra perturbed frame. Frames are
    returned in timestep order, perturbed ones after clean ones at equal
    timesteps.
    """

    steps = list(anchor_steps)
    intervals: list[tuple[int, range]] = []
    if include_start_interval and steps:
        intervals.append((0, range(0, steps[0])))
    for k in range(1, len(steps)):
        intervals.append((k, range(steps[k - 1] + 1, steps[k])))

    planned: list[PlannedFrame] = []
    for k, frames in intervals:
        n = min(frames_per_interval, len(frames))
        if n:
            picks = rng.choice(len(frames), size=n, replace=False)
            planned.extend(PlannedFrame(frames[int(i)], k) for i in sorted(picks))
        if rng.random() < dagger_p and len(frames):
            planned.append(PlannedFrame(frames[int(rng.integers(len(frames)))], k, dagger=True))
    if render_anchor_frames:
        planned.extend(PlannedFrame(t, k + 1) for k, t in enumerate(steps[:-1]))
    return sorted(planned, key=lambda f: (f.timestep, f.dagger))


# ---------------------------------------------------------------------------
# Render phase


@dataclass(frozen=True, slots=True, eq=False)
class FrameRecord:
    points: np.ndarray  # (N, 12)
    proprio: np.ndarray  # (32,)
    labels: np.ndarray  # (H, 32)
    dagger: bool
    timestep: int
    instruction: str


@dataclass(frozen=True, slots=True, eq=False)
class Trajectory:
    traj_id: int
    task_id: int
    scene_seed: int
    frames: tuple[FrameRecord, ...]
    dense_frames: int = 0
    n_anchors: int = 0


def trajectory_rng(global_seed: int, traj_id: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([global_seed, 1, traj_id]))


def render_phase(
    config: AcceptedConfig,
    rng: np.random.Generator,
    *,
    dataset_cfg: DatasetConfig | None = None,
    scene_cfg: SceneConfig | None = None,
    perception: PerceptionConfig | None = None,
    seg_cfg: SegmentationConfig | None = None,
    horizon: int = DEFAULT_HORIZON,
) -> list[FrameRecord]:
    """Render the planned frames of one accepted configuration."""

    dataset_cfg = dataset_cfg or DatasetConfig()
    scene_cfg = scene_cfg or SceneConfig()
    perception = perception or PerceptionConfig()
    seg_cfg = seg_cfg or SegmentationConfig()

    spec = task_spec(config.task_id, scene_cfg)
    scene = make_task_scene(spec, config.scene_seed, scene_cfg, robot_critical=seg_cfg.robot_critical)
    log = expert_rollout(scene, spec)
    anchors = tag_anchors_symbolic(log)
    if tuple(anchors.timesteps) != config.anchor_steps:
        raise CorruptDataset(f"expert replay of seed {config.scene_seed} no longer matches its rollout")

    planned = plan_frames(
        config.anchor_steps,
        rng,
        frames_per_interval=dataset_cfg.frames_per_interval,
        dagger_p=dataset_cfg.dagger_p,
        render_anchor_frames=dataset_cfg.render_anchor_frames,
        include_start_interval=dataset_cfg.include_start_interval,
    )
    records = []
    for frame in planned:
        frame_scene = scene_at_frame(scene, log, frame.timestep, grasp_tolerance=scene_cfg.grasp_tolerance_m)
        if frame.dagger:
            off_policy = perturb_state(
                frame_scene.state,
                rng,
                max_translation=dataset_cfg.dagger_max_translation_m,
                max_rotation=dataset_cfg.dagger_max_rotation_rad,
            )
            frame_scene = execute_anchor(frame_scene, off_policy, grasp_tolerance=scene_cfg.grasp_tolerance_m)
        records.append(
            _render_record(
                frame_scene,
                anchors,
                frame,
                config.instruction,
                scene_cfg=scene_cfg,
                perception=perception,
                seg_cfg=seg_cfg,
                horizon=horizon,
                fps_seed=int(rng.integers(2**31)),
            )
        )
    return records


def _render_record(
    scene: Scene,
    anchors: AnchorSequence,
    frame: PlannedFrame,
    instruction: str,
    *,
    scene_cfg: SceneConfig,
    perception: PerceptionConfig,
    seg_cfg: SegmentationConfig,
    horizon: int,
    fps_seed: int,
) -> FrameRecord:
    labeled = label_scene(scene, scene_cfg, perception, seg_cfg, seed=fps_seed)
    cloud = pad_cyclic(labeled.cloud.with_channels(labeled.labels), perception.n_points)
    return FrameRecord(
        points=cloud.features,
        proprio=scene.state.copy(),
        labels=future_anchor_window(anchors, frame.timestep, horizon),
        dagger=frame.dagger,
        timestep=frame.timestep,
        instruction=instruction,
    )


@dataclass(frozen=True, slots=True)
class CompressionReport:
    dense_frames: int
    sparse_frames: int
    ratio: float


def compression_report(config: AcceptedConfig, frames_per_interval: int = 2) -> CompressionReport:
    """Dense 25 Hz frame count vs the clean frames the render phase keeps."""

    steps = config.anchor_steps
    sparse = sum(min(frames_per_interval, steps[k] - steps[k - 1] - 1) for k in range(1, len(steps)))
    ratio = config.n_frames / sparse if sparse else math.inf
    return CompressionReport(dense_frames=config.n_frames, sparse_frames=sparse, ratio=ratio)


# ---------------------------------------------------------------------------
# File format


def encode_trajectory(frames: Sequence[FrameRecord]) -> bytes:
    parts = [DATASET_MAGIC, struct.pack("<II", DATASET_VERSION, len(frames))]
    for f in frames:
        points = np.ascontiguousarray(f.points, dtype="<f4")
        if points.ndim != 2 or points.shape[1] != POINT_CHANNELS:
            raise ValueError(f"frame points must be (N, {POINT_CHANNELS}), got {points.shape}")
        labels = np.ascontiguousarray(f.labels, dtype="<f4")
        if labels.shape != (DEFAULT_HORIZON, STATE_DIM):
            raise ValueError(f"label block must be ({DEFAULT_HORIZON}, {STATE_DIM}), got {labels.shape}")
        text = f.instruction.encode("utf-8")
        parts.append(struct.pack("<I", points.shape[0]))
        parts.append(points.tobytes())
        parts.append(np.ascontiguousarray(f.proprio, dtype="<f4").tobytes())
        parts.append(labels.tobytes())
        parts.append(struct.pack("<BIH", int(f.dagger), int(f.timestep), len(text)))
        parts.append(text)
    return b"".join(parts)


def decode_trajectory(data: bytes) -> list[FrameRecord]:
    offset = 0

    def take(n: int) -> bytes:
        nonlocal offset
        if offset + n > len(data):
            raise CorruptDataset(f"trajectory file truncated at byte {offset}")
        chunk = data[offset : offset + n]
        offset += n
        return chunk

    if take(4) != DATASET_MAGIC:
        raise CorruptDataset("bad magic; not a trajectory file")
    version, count = struct.unpack("<II", take(8))
    if version != DATASET_VERSION:
        raise CorruptDataset(f"unsupported trajectory format version {version} (expected {DATASET_VERSION})")

    frames = []
    for _ in range(count):
        (n_points,) = struct.unpack("<I", take(4))
        points = np.frombuffer(take(4 * n_points * POINT_CHANNELS), dtype="<f4").reshape(n_points, POINT_CHANNELS)
        proprio = np.frombuffer(take(4 * STATE_DIM), dtype="<f4")
        labels = np.frombuffer(take(4 * DEFAULT_HORIZON * STATE_DIM), dtype="<f4").reshape(DEFAULT_HORIZON, STATE_DIM)
        dagger, timestep, text_len = struct.unpack("<BIH", take(7))
        try:
            text = take(text_len).decode("utf-8")
        except UnicodeDecodeError as e:
            raise CorruptDataset("instruction is not valid UTF-8") from e
        frames.append(
            FrameRecord(
                points=points.astype(np.float64),
                proprio=proprio.astype(np.float64),
                labels=labels.astype(np.float64),
                dagger=bool(dagger),
                timestep=int(timestep),
                instruction=text,
            )
        )
    if offset != len(data):
        raise CorruptDataset(f"{len(data) - offset} trailing bytes after the last frame")
    return frames


def trajectory_filename(traj_id: int) -> str:
    return f"traj_{traj_id:05d}.adp3"


@dataclass
class DatasetManifest:
    version: int = DATASET_VERSION
    tasks: list[str] = field(default_factory=lambda: list(TASK_NAMES))
    trajectories: list[dict[str, Any]] = field(default_factory=list)
    stats: dict[str, Any] = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"

    @staticmethod
    def from_json(text: str) -> "DatasetManifest":
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as e:
            raise CorruptDataset(f"manifest is not valid JSON: {e}") from e
        if raw.get("version") != DATASET_VERSION:
            raise CorruptDataset(f"unsupported manifest version {raw.get('version')!r}")
        return DatasetManifest(
            version=int(raw["version"]),
            tasks=list(raw.get("tasks") or []),
            trajectories=list(raw.get("trajectories") or []),
            stats=dict(raw.get("stats") or {}),
        )


def write_dataset(trajectories: Sequence[Trajectory], manifest: DatasetManifest, out_dir: str | Path) -> DatasetManifest:
    """Write one file per trajectory, then the manifest; returns the manifest written."""

    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)
    entries = []
    for traj in trajectories:
        name = trajectory_filename(traj.traj_id)
        (root / name).write_bytes(encode_trajectory(traj.frames))
        entries.append(
            {
                "id": traj.traj_id,
                "task": TASK_NAMES[traj.task_id],
                "frames": len(traj.frames),
                "dagger_frames": sum(1 for f in traj.frames if f.dagger),
                "file": name,
                "seed": traj.scene_seed,
                "dense_frames": traj.dense_frames,
                "anchors": traj.n_anchors,
            }
        )
    manifest = DatasetManifest(version=manifest.version, tasks=manifest.tasks, trajectories=entries, stats=manifest.stats)
    (root / MANIFEST_NAME).write_text(manifest.to_json(), encoding="utf-8")
    return manifest


def read_dataset(data_dir: str | Path) -> tuple[list[Trajectory], DatasetManifest]:
    root = Path(data_dir)
    path = root / MANIFEST_NAME
    if not path.exists():
        raise CorruptDataset(f"{root} has no {MANIFEST_NAME}")
    manifest = DatasetManifest.from_json(path.read_text(encoding="utf-8"))
    trajectories = []
    for entry in manifest.trajectories:
        file = root / str(entry["file"])
        if not file.exists():
            raise CorruptDataset(f"manifest lists missing file {entry['file']}")
        frames = decode_trajectory(file.read_bytes())
        if len(frames) != int(entry["frames"]):
            raise CorruptDataset(f"{entry['file']}: manifest says {entry['frames']} frames, file has {len(frames)}")
        trajectories.append(
            Trajectory(
                traj_id=int(entry["id"]),
                task_id=TASK_NAMES.index(entry["task"]),
                scene_seed=int(entry["seed"]),
                frames=tuple(frames),
                dense_frames=int(entry.get("dense_frames", 0)),
                n_anchors=int(entry.get("anchors", 0)),
            )
        )
    return trajectories, manifest


# ---------------------------------------------------------------------------
# Orchestration


def build_dataset(
    cfg: RunConfig,
    out_dir: str | Path,
    *,
    threads: int = 1,
    publisher: EventPublisher | None = None,
) -> DatasetManifest:
    """Both phases for every configured task, written to ``out_dir``.

    Trajectory ids and RNG streams are fixed before any rendering starts, so
    the output does not depend on ``threads``.
    """

    publisher = publisher or NoopEventPublisher()
    accepted: list[AcceptedConfig] = []
    rollout_stats: dict[str, dict[str, Any]] = {}
    for name in cfg.tasks:
        spec = task_spec(name, cfg.scene)
        configs, stats = rollout_phase(
            spec,
            cfg.dataset.max_attempts_per_task,
            cfg.seed,
            cfg.scene,
            robot_critical=cfg.segmentation.robot_critical,
            max_accepted=cfg.dataset.trajectories_per_task,
            v_thresh=cfg.dataset.anchor_v_thresh,
            min_gap=cfg.dataset.anchor_min_gap,
        )
        accepted.extend(configs)
        rollout_stats[name] = {
            **asdict(stats),
            "acceptance_rate": stats.acceptance_rate,
            "detection_recall": stats.detection_recall,
        }
        if len(configs) < cfg.dataset.trajectories_per_task:
            logger.warning(
                "task %s: only %d of %d trajectories accepted", name, len(configs), cfg.dataset.trajectories_per_task
            )

    def render(item: tuple[int, AcceptedConfig]) -> Trajectory:
        traj_id, config = item
        frames = render_phase(
            config,
            trajectory_rng(cfg.seed, traj_id),
            dataset_cfg=cfg.dataset,
            scene_cfg=cfg.scene,
            perception=cfg.perception,
            seg_cfg=cfg.segmentation,
            horizon=cfg.policy.horizon,
        )
        return Trajectory(
            traj_id=traj_id,
            task_id=config.task_id,
            scene_seed=config.scene_seed,
            frames=tuple(frames),
            dense_frames=config.n_frames,
            n_anchors=len(config.anchor_steps),
        )

    trajectories: list[Trajectory] = []
    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        for traj in pool.map(render, enumerate(accepted)):
            trajectories.append(traj)
            publisher.publish(
                "trajectory",
                step=traj.traj_id,
                data={"task": TASK_NAMES[traj.task_id], "frames": len(traj.frames)},
            )

    dense = sum(c.n_frames for c in accepted)
    sparse = sum(compression_report(c, cfg.dataset.frames_per_interval).sparse_frames for c in accepted)
    manifest = DatasetManifest(
        tasks=list(cfg.tasks),
        stats={
            "rollout": rollout_stats,
            "dense_frames": dense,
            "sparse_frames": sparse,
            "compression_ratio": dense / sparse if sparse else None,
            "seed": cfg.seed,
            "dagger_p": cfg.dataset.dagger_p,
        },
    )
    written = write_dataset(trajectories, manifest, out_dir)
    logger.info("wrote %d trajectories (%d frames) to %s", len(trajectories), sum(len(t.frames) for t in trajectories), out_dir)
    return written
