import numpy as np
import pytest

from anchor_policy.config import load_config
from anchor_policy.dataset import (
    DATASET_MAGIC,
    MANIFEST_NAME,
    AcceptedConfig,
    DatasetManifest,
    FrameRecord,
    attempt_seed,
    build_dataset,
    compression_report,
    decode_trajectory,
    encode_trajectory,
    plan_frames,
    read_dataset,
    rollout_phase,
    trajectory_filename,
)
from anchor_policy.errors import CorruptDataset
from anchor_policy.scene import RENDER_STATS, task_spec

TINY = [
    "--tasks=[place_ball]",
    "--scene.image_width=32",
    "--scene.image_height=24",
    "--scene.focal_px=30.0",
    "--perception.n_points=128",
    "--perception.knn_k=8",
    "--dataset.trajectories_per_task=2",
    "--dataset.max_attempts_per_task=10",
    "--dataset.dagger_p=0.5",
    "--dataset.include_start_interval=true",
]


def _frame(rng: np.random.Generator, n_points: int = 5, text: str = "put the ball in the bowl") -> FrameRecord:
    return FrameRecord(
        points=rng.standard_normal((n_points, 12)),
        proprio=rng.standard_normal(32),
        labels=rng.standard_normal((8, 32)),
        dagger=bool(rng.integers(2)),
        timestep=int(rng.integers(1000)),
        instruction=text,
    )


def test_plan_frames_count_rule() -> None:
    steps = [4, 10, 11, 30]
    rng = np.random.default_rng(0)
    planned = plan_frames(steps, rng, frames_per_interval=2, dagger_p=0.0)
    # Intervals (4, 10) and (11, 30) give two frames each; (10, 11) is empty.
    assert len(planned) == 4
    assert all(not f.dagger for f in planned)
    assert [f.interval for f in planned] == [1, 1, 3, 3]
    assert all(s not in steps for s in (f.timestep for f in planned))

    with_start = plan_frames(steps, np.random.default_rng(0), frames_per_interval=2, dagger_p=0.0, include_start_interval=True)
    assert len(with_start) == 6
    assert sum(1 for f in with_start if f.interval == 0 and f.timestep < 4) == 2

    anchors_too = plan_frames(steps, np.random.default_rng(0), frames_per_interval=1, dagger_p=0.0, render_anchor_frames=True)
    assert [f.timestep for f in anchors_too if f.timestep in steps] == [4, 10, 11]


def test_plan_frames_is_sorted_and_distinct_per_interval() -> None:
    planned = plan_frames(list(range(0, 200, 20)), np.random.default_rng(1), frames_per_interval=3, dagger_p=0.0)
    times = [f.timestep for f in planned]
    assert times == sorted(times)
    assert len(set(times)) == len(times)


def test_dagger_rate_matches_probability() -> None:
    n_intervals = 20_000
    steps = list(range(0, 10 * (n_intervals + 1), 10))
    planned = plan_frames(steps, np.random.default_rng(2), frames_per_interval=2, dagger_p=0.1)
    dagger = sum(1 for f in planned if f.dagger)
    assert abs(dagger / n_intervals - 0.1) < 0.01
    assert len(planned) - dagger == 2 * n_intervals


def test_compression_report() -> None:
    cfg = AcceptedConfig(
        task_id=0, scene_seed=1, attempt=0, anchor_steps=(5, 20, 21, 40), anchor_kinds=("PG",) * 4, n_frames=41, instruction=""
    )
    report = compression_report(cfg, frames_per_interval=2)
    assert report.sparse_frames == 4
    assert report.ratio == pytest.approx(41 / 4)


def test_attempt_seeds_are_distinct_and_stable() -> None:
    seeds = {attempt_seed(0, t, a) for t in range(8) for a in range(50)}
    assert len(seeds) == 400
    assert attempt_seed(3, 1, 2) == attempt_seed(3, 1, 2)


def test_rollout_phase_accepts_solved_scenes() -> None:
    spec = task_spec("place_bell")
    accepted, stats = rollout_phase(spec, 6, seed=0, max_accepted=3)
    assert stats.attempts <= 6
    assert stats.accepted == len(accepted) <= 3
    assert stats.accepted + stats.unreachable + stats.placement_failed + stats.expert_failed == stats.attempts
    for cfg in accepted:
        assert len(cfg.anchor_steps) == 9
        assert cfg.anchor_kinds[-1] == "HM"
        assert cfg.instruction
    assert stats.anchors_tagged == 9 * stats.accepted
    assert 0.0 <= stats.detection_recall <= 1.0


def test_rollout_phase_never_renders() -> None:
    before = RENDER_STATS.calls
    accepted, stats = rollout_phase(task_spec("place_ball"), 4, seed=2, max_accepted=2)
    assert stats.attempts >= 1 and stats.accepted == len(accepted)
    assert RENDER_STATS.calls == before


def test_trajectory_codec_round_trip_and_corruption() -> None:
    rng = np.random.default_rng(3)
    frames = [_frame(rng), _frame(rng, 7, "déplace la balle")]
    data = encode_trajectory(frames)
    assert data[:4] == DATASET_MAGIC
    back = decode_trajectory(data)
    assert len(back) == 2
    for a, b in zip(frames, back):
        assert np.allclose(a.points, b.points, atol=1e-6)
        assert np.allclose(a.labels, b.labels, atol=1e-6)
        assert (a.dagger, a.timestep, a.instruction) == (b.dagger, b.timestep, b.instruction)

    for cut in (3, 11, 40, len(data) - 1):
        with pytest.raises(CorruptDataset):
            decode_trajectory(data[:cut])
    with pytest.raises(CorruptDataset):
        decode_trajectory(b"NOPE" + data[4:])
    with pytest.raises(CorruptDataset):
        decode_trajectory(data + b"\x00\x00")


def test_encode_rejects_bad_shapes() -> None:
    rng = np.random.default_rng(4)
    bad = _frame(rng)
    with pytest.raises(ValueError):
        encode_trajectory([FrameRecord(bad.points[:, :11], bad.proprio, bad.labels, False, 0, "")])
    with pytest.raises(ValueError):
        encode_trajectory([FrameRecord(bad.points, bad.proprio, bad.labels[:4], False, 0, "")])


def test_manifest_rejects_garbage() -> None:
    with pytest.raises(CorruptDataset):
        DatasetManifest.from_json("{not json")
    with pytest.raises(CorruptDataset):
        DatasetManifest.from_json('{"version": 99}')


def test_build_dataset_small_run_is_reproducible(tmp_path) -> None:
    cfg = load_config(tmp_path / "missing.yaml", TINY)

    first = build_dataset(cfg, tmp_path / "a", threads=1)
    second = build_dataset(cfg, tmp_path / "b", threads=2)

    assert first.trajectories == second.trajectories
    assert len(first.trajectories) == 2
    for entry in first.trajectories:
        assert (tmp_path / "a" / entry["file"]).read_bytes() == (tmp_path / "b" / entry["file"]).read_bytes()

    trajectories, manifest = read_dataset(tmp_path / "a")
    assert [len(t.frames) for t in trajectories] == [e["frames"] for e in manifest.trajectories]
    for traj in trajectories:
        # Nine anchors, start interval included: at least two frames in each of nine intervals.
        assert len([f for f in traj.frames if not f.dagger]) >= 2 * 9
        for frame in traj.frames:
            assert frame.points.shape == (128, 12)
            assert frame.labels.shape == (8, 32)
            assert set(np.unique(frame.points[:, 11])) <= {0.0, 1.0}
    assert manifest.stats["compression_ratio"] > 1.0
    assert set(manifest.stats["rollout"]) == {"place_ball"}


def test_read_dataset_detects_missing_and_mismatched_files(tmp_path) -> None:
    with pytest.raises(CorruptDataset):
        read_dataset(tmp_path)

    rng = np.random.default_rng(5)
    (tmp_path / trajectory_filename(0)).write_bytes(encode_trajectory([_frame(rng)]))
    manifest = DatasetManifest(
        tasks=["place_ball"],
        trajectories=[{"id": 0, "task": "place_ball", "frames": 2, "file": trajectory_filename(0), "seed": 1}],
    )
    (tmp_path / MANIFEST_NAME).write_text(manifest.to_json(), encoding="utf-8")
    with pytest.raises(CorruptDataset):
        read_dataset(tmp_path)
