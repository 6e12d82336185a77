from __future__ import annotations

from dataclasses import asdict
from functools import partial
import json

import numpy as np
import pytest

from anchor_policy.__main__ import main
from anchor_policy.config import load_config
from anchor_policy.dataset import DATASET_MAGIC
from anchor_policy.diffusion import DiffusionPolicy, PolicyBundle, save_bundle
from anchor_policy.errors import CorruptDataset
from anchor_policy.geometry import EXECUTED_DIM, STATE_DIM
from anchor_policy.harness import (
    BundlePolicy,
    EvalReport,
    OraclePolicy,
    RandomPolicy,
    action_to_anchor,
    cmd_eval,
    cmd_inspect,
    derive_seed,
    evaluate,
    fresh_bundle_policy,
    history_table,
    run_episode,
)
from anchor_policy.router import Router
from anchor_policy.scene import home_state


def _cfg(tmp_path, *extra: str):
    return load_config(
        tmp_path / "missing.yaml",
        [
            "--tasks=[place_ball]",
            "--scene.image_width=32",
            "--scene.image_height=24",
            "--scene.focal_px=30.0",
            "--perception.n_points=64",
            "--perception.knn_k=8",
            "--policy.diffusion_steps=3",
            "--eval.episodes_per_task=2",
            f"--paths.reports_dir={tmp_path / 'reports'}",
            f"--paths.models_dir={tmp_path / 'models'}",
            *extra,
        ],
    )


def test_derive_seed_is_stable() -> None:
    assert derive_seed(1, 2, 3) == derive_seed(1, 2, 3)
    assert derive_seed(1, 2, 3) != derive_seed(1, 2, 4)


def test_action_to_anchor_rebuilds_end_poses() -> None:
    home = home_state()
    anchor = action_to_anchor(home[:EXECUTED_DIM])
    assert anchor.shape == (STATE_DIM,)
    np.testing.assert_allclose(anchor, home, atol=1e-9)
    with pytest.raises(ValueError):
        action_to_anchor(np.zeros(13))


def test_oracle_completes_episodes(tmp_path) -> None:
    cfg = _cfg(tmp_path)
    for episode in range(2):
        result = run_episode(OraclePolicy(), 4, episode, cfg)
        assert result.task == "place_ball"
        assert result.success
        assert result.terminated_by == "home"
        assert result.steps <= cfg.eval.step_cap


def test_random_policy_is_a_weak_baseline(tmp_path) -> None:
    cfg = _cfg(tmp_path, "--eval.step_cap=5")
    report, results = evaluate(RandomPolicy, cfg, episodes_per_task=3)
    assert report.policy == "random"
    assert report.episodes == 3
    assert report.average_success_rate < 1.0
    assert all(r.steps <= 5 for r in results)


def test_evaluation_is_thread_count_independent(tmp_path) -> None:
    cfg = _cfg(tmp_path)
    _, one = evaluate(OraclePolicy, cfg, threads=1)
    _, two = evaluate(OraclePolicy, cfg, threads=2)
    strip = lambda rs: [{k: v for k, v in asdict(r).items() if k != "wall_s"} for r in rs]
    assert strip(one) == strip(two)


def test_eval_report_round_trip_and_validation() -> None:
    report = EvalReport(
        policy="oracle",
        per_task={"place_ball": {"episodes": 2, "successes": 2, "success_rate": 1.0, "mean_anchors": 10.0, "wall_s": 0.1}},
        average_success_rate=1.0,
        episodes=2,
        wall_s=0.1,
    )
    assert EvalReport.from_json(report.to_json()) == report
    with pytest.raises(CorruptDataset):
        EvalReport.from_json("{}")
    raw = json.loads(report.to_json())
    raw["per_task"]["place_ball"]["successes"] = 3
    with pytest.raises(CorruptDataset):
        EvalReport.from_json(json.dumps(raw))
    raw["version"] = 99
    with pytest.raises(CorruptDataset):
        EvalReport.from_json(json.dumps(raw))


def test_cmd_eval_writes_reports(tmp_path) -> None:
    cfg = _cfg(tmp_path)
    report = cmd_eval(cfg, policy="oracle", episodes_per_task=1)
    assert report.per_task["place_ball"]["successes"] == 1
    written = tmp_path / "reports" / "eval_oracle.json"
    assert EvalReport.from_json(written.read_text()) == report
    summary = cmd_inspect(written)
    assert summary["kind"] == "eval_report"
    assert len(json.loads((tmp_path / "reports" / "eval_oracle_episodes.json").read_text())) == 1


def test_cmd_inspect_rejects_unknown_artifacts(tmp_path) -> None:
    other = tmp_path / "notes.txt"
    other.write_text("hello")
    with pytest.raises(CorruptDataset):
        cmd_inspect(other)
    with pytest.raises(CorruptDataset):
        cmd_inspect(tmp_path / "nope.adp3")
    with pytest.raises(CorruptDataset):
        cmd_inspect(tmp_path)


def test_inspect_bundle_lists_tensors(tmp_path) -> None:
    policy = DiffusionPolicy(np.random.default_rng(0), steps=3)
    save_bundle(PolicyBundle(policy=policy, router=Router(np.random.default_rng(0))), tmp_path / "bundle")
    summary = cmd_inspect(tmp_path / "bundle")
    assert summary["kind"] == "bundle"
    assert set(summary["tensors"]) == {"encoders", "denoiser", "router"}


@pytest.mark.slow
def test_untrained_bundle_runs_closed_loop(tmp_path) -> None:
    cfg = _cfg(tmp_path, "--eval.step_cap=2")
    policy = DiffusionPolicy(np.random.default_rng(0), steps=cfg.policy.diffusion_steps)
    bundle = PolicyBundle(policy=policy, router=Router(np.random.default_rng(0)))
    result = run_episode(BundlePolicy(bundle=bundle, cfg=cfg), 4, 0, cfg)
    assert result.steps <= 2


def test_history_table_renders() -> None:
    text = history_table([{"epoch": 1, "loss": 0.5}, {"epoch": 2, "loss": 0.25}])
    assert "epoch" in text and "0.25" in text


def test_main_exit_codes(tmp_path, capsys) -> None:
    missing = str(tmp_path / "missing.yaml")
    truncated = tmp_path / "traj_00000.adp3"
    truncated.write_bytes(DATASET_MAGIC + b"\x01\x00")
    assert main(["--config", missing, "inspect", str(truncated)]) == 3
    assert main(["--config", missing, "inspect", str(tmp_path / "notes.bin")]) == 3
    assert main(["--config", missing, "eval", "--dataset.dagger_p=1.5"]) == 2
    with pytest.raises(SystemExit) as exc:
        main(["--config", missing, "eval", "stray"])
    assert exc.value.code == 2


def test_main_eval_with_oracle(tmp_path, capsys) -> None:
    missing = str(tmp_path / "missing.yaml")
    code = main(
        [
            "--config",
            missing,
            "eval",
            "--policy",
            "oracle",
            "--episodes",
            "1",
            "--tasks=[place_ball]",
            f"--paths.reports_dir={tmp_path / 'reports'}",
            f"--telemetry.jsonl_path={tmp_path / 'events.jsonl'}",
        ]
    )
    assert code == 0
    out = capsys.readouterr().out
    assert "place_ball: 1/1" in out
    assert (tmp_path / "events.jsonl").read_text().count('"kind": "episode"') == 1


def test_bundle_evaluation_is_thread_count_independent(tmp_path) -> None:
    cfg = _cfg(tmp_path, "--eval.step_cap=2")
    policy = DiffusionPolicy(np.random.default_rng(1), steps=cfg.policy.diffusion_steps)
    bundle = PolicyBundle(policy=policy, router=Router(np.random.default_rng(1)))
    make_policy = partial(fresh_bundle_policy, bundle, cfg)

    _, one = evaluate(make_policy, cfg, threads=1)
    _, two = evaluate(make_policy, cfg, threads=2)
    strip = lambda rs: [{k: v for k, v in asdict(r).items() if k != "wall_s"} for r in rs]
    assert strip(one) == strip(two)
    # Episodes ran on copies; the shared bundle never saw a forward pass.
    assert policy.denoiser.stem._cols is None
    assert fresh_bundle_policy(bundle, cfg).bundle.policy is not policy
