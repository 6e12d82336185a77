"""Tables built from run artifacts.

Everything here turns JSON-shaped records (loss histories, benchmark
samples, evaluation episodes, telemetry logs) into pandas DataFrames, so the
same helpers serve the command line and notebooks.
"""

from __future__ import annotations

from datetime import datetime, timezone
import json
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

import pandas as pd


def parse_ts(value: Any) -> datetime:
    """Parse event timestamps (``...Z`` ISO strings) into UTC datetimes."""

    if isinstance(value, datetime):
        return value.astimezone(timezone.utc)
    if not isinstance(value, str):
        raise ValueError("ts must be a string")
    if value.endswith("Z"):
        value = value[:-1] + "+00:00"
    return datetime.fromisoformat(value).astimezone(timezone.utc)


def loss_frame(history: Sequence[Mapping[str, Any]]) -> pd.DataFrame:
    """One row per epoch; columns are whatever the history entries carry."""

    if not history:
        return pd.DataFrame(columns=["epoch", "loss"])
    df = pd.DataFrame(list(history))
    if "epoch" not in df.columns:
        df.insert(0, "epoch", range(len(df)))
    return df.set_index("epoch", drop=False)


def bench_table(samples: Mapping[str, Sequence[float]]) -> pd.DataFrame:
    """Median and p95 (milliseconds) per benchmark from raw per-repetition seconds."""

    columns = ["benchmark", "reps", "median_ms", "p95_ms"]
    rows = [{"benchmark": name, "seconds": s} for name, values in samples.items() for s in values]
    if not rows:
        return pd.DataFrame(columns=columns)
    df = pd.DataFrame(rows)
    grouped = df.groupby("benchmark", sort=False)["seconds"]
    out = pd.DataFrame(
        {
            "reps": grouped.size(),
            "median_ms": grouped.median() * 1e3,
            "p95_ms": grouped.quantile(0.95) * 1e3,
        }
    )
    return out.reset_index()[columns]


def episodes_frame(episodes: Iterable[Mapping[str, Any]]) -> pd.DataFrame:
    columns = ["task", "episode", "seed", "success", "steps", "terminated_by", "wall_s"]
    rows = list(episodes)
    if not rows:
        return pd.DataFrame(columns=columns)
    return pd.DataFrame(rows)


def success_table(episodes: pd.DataFrame) -> pd.DataFrame:
    """Per-task episodes, successes, success rate, mean anchors executed and wall-clock."""

    columns = ["task", "episodes", "successes", "success_rate", "mean_anchors", "wall_s"]
    if episodes.empty:
        return pd.DataFrame(columns=columns)
    grouped = episodes.groupby("task", sort=False)
    out = pd.DataFrame(
        {
            "episodes": grouped.size(),
            "successes": grouped["success"].sum().astype(int),
            "mean_anchors": grouped["steps"].mean(),
            "wall_s": grouped["wall_s"].sum(),
        }
    )
    out["success_rate"] = out["successes"] / out["episodes"]
    return out.reset_index()[columns]


def supervision_table(curves: Mapping[str, Sequence[float]]) -> pd.DataFrame:
    """Validation error per epoch, one column per supervision variant."""

    df = pd.DataFrame({kind: pd.Series(list(values), dtype=float) for kind, values in curves.items()})
    df.index = pd.RangeIndex(1, len(df) + 1, name="epoch")
    return df


def read_events(path: str | Path) -> pd.DataFrame:
    """Telemetry payloads from a JSONL event log; malformed lines are skipped."""

    payloads = []
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError:
                continue
            if isinstance(obj, dict) and isinstance(obj.get("payload"), dict):
                payloads.append(obj["payload"])
    if not payloads:
        return pd.DataFrame(columns=["ts", "kind", "run", "step"])
    rows = [
        {"ts": parse_ts(p["ts"]), "kind": p.get("kind"), "run": p.get("run"), "step": p.get("step"), **(p.get("data") or {})}
        for p in payloads
        if "ts" in p
    ]
    df = pd.DataFrame(rows)
    df["ts"] = pd.to_datetime(df["ts"], utc=True)
    return df


def to_records(df: pd.DataFrame) -> list[dict[str, Any]]:
    """JSON-ready rows (numpy scalars converted)."""

    return json.loads(df.to_json(orient="records"))
