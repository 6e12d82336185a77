from __future__ import annotations

from datetime import datetime, timezone
import json

import pytest

from anchor_policy.reports import (
    bench_table,
    episodes_frame,
    loss_frame,
    parse_ts,
    read_events,
    success_table,
    supervision_table,
    to_records,
)


def test_parse_ts_accepts_zulu() -> None:
    assert parse_ts("2024-05-01T12:00:00Z") == datetime(2024, 5, 1, 12, tzinfo=timezone.utc)
    with pytest.raises(ValueError):
        parse_ts(12)


def test_loss_frame_indexes_by_epoch() -> None:
    df = loss_frame([{"epoch": 1, "loss": 2.0}, {"epoch": 2, "loss": 1.0, "val_error": 0.3}])
    assert list(df.index) == [1, 2]
    assert df.loc[2, "val_error"] == 0.3
    assert list(loss_frame([]).columns) == ["epoch", "loss"]
    assert list(loss_frame([{"loss": 1.0}, {"loss": 0.5}])["epoch"]) == [0, 1]


def test_bench_table_median_and_p95() -> None:
    samples = {"knn_tree_M1000": [0.001 * i for i in range(1, 21)], "fps": [0.5]}
    df = bench_table(samples).set_index("benchmark")
    assert df.loc["knn_tree_M1000", "reps"] == 20
    assert df.loc["knn_tree_M1000", "median_ms"] == pytest.approx(10.5)
    assert df.loc["knn_tree_M1000", "p95_ms"] == pytest.approx(19.05)
    assert df.loc["fps", "p95_ms"] == pytest.approx(500.0)
    assert bench_table({}).empty


def test_success_table_per_task() -> None:
    episodes = episodes_frame(
        [
            {"task": "place_ball", "episode": 0, "seed": 1, "success": True, "steps": 9, "terminated_by": "home", "wall_s": 1.0},
            {"task": "place_ball", "episode": 1, "seed": 2, "success": False, "steps": 40, "terminated_by": "cap", "wall_s": 2.0},
            {"task": "sort_balls", "episode": 0, "seed": 3, "success": True, "steps": 18, "terminated_by": "home", "wall_s": 3.0},
        ]
    )
    table = success_table(episodes).set_index("task")
    assert table.loc["place_ball", "episodes"] == 2
    assert table.loc["place_ball", "successes"] == 1
    assert table.loc["place_ball", "success_rate"] == pytest.approx(0.5)
    assert table.loc["place_ball", "mean_anchors"] == pytest.approx(24.5)
    assert table.loc["sort_balls", "wall_s"] == pytest.approx(3.0)
    assert success_table(episodes_frame([])).empty


def test_supervision_table_starts_at_epoch_one() -> None:
    df = supervision_table({"full": [0.3, 0.2, 0.1], "executed": [0.4, 0.35, 0.3]})
    assert list(df.index) == [1, 2, 3]
    assert df.index.name == "epoch"
    assert df.loc[3, "executed"] == pytest.approx(0.3)


def test_read_events_skips_malformed_lines(tmp_path) -> None:
    path = tmp_path / "events.jsonl"
    good = {"topic": "a/loss", "payload": {"ts": "2024-05-01T12:00:00Z", "kind": "loss", "run": "r", "step": 1, "data": {"loss": 0.5}}}
    path.write_text(
        "\n".join([json.dumps(good), "{not json", json.dumps({"topic": "a/x", "payload": "oops"}), "", json.dumps(good)]) + "\n"
    )
    df = read_events(path)
    assert len(df) == 2
    assert list(df["loss"]) == [0.5, 0.5]

    empty = tmp_path / "empty.jsonl"
    empty.write_text("garbage\n")
    assert read_events(empty).empty


def test_to_records_is_plain_json() -> None:
    rows = to_records(supervision_table({"full": [0.5]}))
    assert rows == [{"full": 0.5}]
