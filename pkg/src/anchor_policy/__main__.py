from __future__ import annotations

import argparse
import json
import logging
from pathlib import Path
import sys

from .config import load_config
from .errors import AnchorPolicyError
from .harness import TRAIN_TARGETS, cmd_bench, cmd_eval, cmd_gen_data, cmd_inspect, cmd_train, history_table
from .telemetry import open_publisher

logger = logging.getLogger("anchor_policy")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="python -m anchor_policy",
        allow_abbrev=False,
        description="Keypose diffusion policy pipeline. Any config value can be overridden with --section.key=value.",
    )
    parser.add_argument("--config", type=str, default="config.yaml", help="YAML (or JSON) run configuration")
    parser.add_argument("--log-level", type=str, default="INFO", help="DEBUG, INFO, WARNING or ERROR")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("gen-data", help="Run the rollout and render phases and write the dataset")

    train = sub.add_parser("train", help="Train a model")
    train.add_argument("--target", choices=TRAIN_TARGETS, required=True)
    train.add_argument("--resume", type=Path, default=None, help="Policy checkpoint (.npz) to resume from")

    ev = sub.add_parser("eval", help="Closed-loop evaluation on fresh scenes")
    ev.add_argument("--bundle", type=Path, default=None, help="Bundle directory (default: <models_dir>/bundle)")
    ev.add_argument("--policy", choices=("bundle", "oracle", "random"), default=None)
    ev.add_argument("--episodes", type=int, default=None, help="Episodes per task")

    bench = sub.add_parser("bench", help="Micro-benchmarks, written as JSON")
    bench.add_argument("--reps", type=int, default=None)

    inspect = sub.add_parser("inspect", help="Validate and summarize a dataset, bundle, weight file or report")
    inspect.add_argument("path", type=Path)
    return parser


def _split_overrides(parser: argparse.ArgumentParser, extra: list[str]) -> list[str]:
    for item in extra:
        if not item.startswith("--") or "=" not in item:
            parser.error(f"unrecognized argument {item!r} (config overrides look like --section.key=value)")
    return extra


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    overrides = _split_overrides(parser, extra)
    logging.basicConfig(
        level=getattr(logging, str(args.log_level).upper(), logging.INFO),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )

    try:
        cfg = load_config(args.config, overrides)
        if args.command == "inspect":
            print(json.dumps(cmd_inspect(args.path), indent=2, sort_keys=True))
            return 0

        with open_publisher(cfg.telemetry, run=f"{args.command}-{cfg.seed}") as publisher:
            if args.command == "gen-data":
                manifest = cmd_gen_data(cfg, publisher=publisher)
                stats = manifest.stats
                print(f"dataset: {cfg.paths.dataset_dir} ({len(manifest.trajectories)} trajectories)")
                for task, row in stats.get("rollout", {}).items():
                    print(f"- {task}: accepted {row['accepted']}/{row['attempts']} ({row['acceptance_rate']:.0%})")
                ratio = stats.get("compression_ratio")
                print(f"frames: dense {stats.get('dense_frames')} -> sparse {stats.get('sparse_frames')}", end="")
                print(f" (x{ratio:.1f})" if ratio else "")
            elif args.command == "train":
                result = cmd_train(cfg, args.target, resume_from=args.resume, publisher=publisher)
                if args.target == "policy":
                    print(history_table(json.loads((cfg.paths.reports_dir / "policy_loss.json").read_text())["history"]))
                print(json.dumps(result, indent=2, sort_keys=True, default=str))
            elif args.command == "eval":
                report = cmd_eval(
                    cfg, bundle_dir=args.bundle, policy=args.policy, episodes_per_task=args.episodes, publisher=publisher
                )
                print(f"policy: {report.policy}  episodes: {report.episodes}  wall: {report.wall_s:.1f}s")
                for task, row in report.per_task.items():
                    print(f"- {task}: {row['successes']}/{row['episodes']} ({row['success_rate']:.0%})")
                print(f"average success rate: {report.average_success_rate:.1%}")
            elif args.command == "bench":
                result = cmd_bench(cfg, reps=args.reps)
                print(json.dumps(result["summary"], indent=2))
                print(f"knn tree faster than brute force from M={result['knn_tree_faster_from']}")
    except AnchorPolicyError as e:
        logger.error("%s: %s", type(e).__name__, e)
        return e.exit_code
    except OSError as e:
        logger.error("I/O failure: %s", e)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
