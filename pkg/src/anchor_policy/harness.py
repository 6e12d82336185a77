"""Pipeline commands: data generation, training, closed-loop evaluation,
benchmarks and artifact inspection.

The ``cmd_*`` functions do the work and return what they produced; the
command line in :mod:`anchor_policy.__main__` prints the summaries.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
import copy
from dataclasses import asdict, dataclass, field
from functools import partial
import json
import logging
from pathlib import Path
import time
from typing import Any, Callable, Protocol, Sequence
import zipfile

import numpy as np

from .config import TASK_NAMES, RunConfig, resolve_threads
from .dataset import (
    DATASET_MAGIC,
    MANIFEST_NAME,
    DatasetManifest,
    FrameRecord,
    build_dataset,
    decode_trajectory,
    read_dataset,
)
from .diffusion import (
    DiffusionPolicy,
    Observation,
    PolicyBundle,
    act,
    bundle_tensors,
    collate,
    load_bundle,
    save_bundle,
    split_trajectories,
    supervision_study,
    train_policy,
    train_step,
)
from .errors import ConfigError, CorruptDataset, CorruptWeights, InvariantViolation, PlacementOverflow, Unreachable
from .geometry import EXECUTED_DIM, LEFT_GRIPPER, LEFT_QPOS, RIGHT_GRIPPER, RIGHT_QPOS, STATE_DIM, state_from_joints
from .nn import WEIGHTS_MAGIC, Adam, load_weights
from .pointcloud import augment, fps, fps_indices, fuse_views, knn, knn_brute_force, pad_cyclic
from .reports import bench_table, episodes_frame, loss_frame, success_table, supervision_table, to_records
from .router import (
    gen_instructions,
    load_router,
    router_accuracy,
    sample_instruction,
    save_router,
    split_by_frame,
    train_router,
    write_corpus,
)
from .scene import (
    ROBOT,
    Scene,
    TaskSpec,
    check_success,
    execute_anchor,
    expert_rollout,
    home_state,
    make_task_scene,
    raycast_views,
    task_spec,
    tool_positions,
)
from .segmentation import (
    LabeledCloud,
    accuracy,
    label_scene,
    load_segmenter,
    observe,
    predict_labels,
    save_segmenter,
    train_segmenter,
    with_labels,
)
from .telemetry import EventPublisher, NoopEventPublisher

logger = logging.getLogger(__name__)

REPORT_VERSION = 1
SOLVABLE_RETRIES = 20


def derive_seed(*parts: int) -> int:
    return int(np.random.SeedSequence(list(parts)).generate_state(1)[0])


def _write_json(path: Path, data: Any) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


# ---------------------------------------------------------------------------
# Episode policies


class EpisodePolicy(Protocol):
    name: str

    def reset(self, scene: Scene, spec: TaskSpec, instruction: str) -> None: ...

    def act(self, scene: Scene, step: int, seed: int) -> np.ndarray: ...


def action_to_anchor(action: np.ndarray) -> np.ndarray:
    """Full 32-dim state for 14 executed values; end poses come from forward kinematics."""

    a = np.asarray(action, dtype=np.float64)
    if a.shape != (EXECUTED_DIM,):
        raise ValueError(f"expected {EXECUTED_DIM} action values, got shape {a.shape}")
    return state_from_joints(ROBOT, a[LEFT_QPOS], a[LEFT_GRIPPER], a[RIGHT_QPOS], a[RIGHT_GRIPPER])


@dataclass
class OraclePolicy:
    """Replays the expert's anchors in order, then holds the last one."""

    name: str = "oracle"
    _anchors: list[np.ndarray] = field(default_factory=list)

    def reset(self, scene: Scene, spec: TaskSpec, instruction: str) -> None:
        log = expert_rollout(scene, spec)
        self._anchors = [log.states[s] for s in log.anchor_steps]

    def act(self, scene: Scene, step: int, seed: int) -> np.ndarray:
        return self._anchors[min(step, len(self._anchors) - 1)][:EXECUTED_DIM].copy()


@dataclass
class RandomPolicy:
    """Uniform joints in [-pi, pi] and grippers in [0, 1]; the untrained baseline."""

    name: str = "random"

    def reset(self, scene: Scene, spec: TaskSpec, instruction: str) -> None:
        return

    def act(self, scene: Scene, step: int, seed: int) -> np.ndarray:
        rng = np.random.default_rng(seed)
        action = rng.uniform(-np.pi, np.pi, EXECUTED_DIM)
        action[LEFT_GRIPPER] = rng.uniform(0.0, 1.0)
        action[RIGHT_GRIPPER] = rng.uniform(0.0, 1.0)
        return action


@dataclass
class BundlePolicy:
    """The learned pipeline: observe, segment, route the instruction, sample, act."""

    bundle: PolicyBundle
    cfg: RunConfig
    name: str = "bundle"
    _instruction: str = ""

    def reset(self, scene: Scene, spec: TaskSpec, instruction: str) -> None:
        self._instruction = instruction

    def observation(self, scene: Scene, seed: int) -> Observation:
        n_points = self.cfg.perception.n_points
        if self.bundle.segmenter is not None:
            cloud = observe(scene, self.cfg.scene, self.cfg.perception, seed=seed)
            labels = predict_labels(self.bundle.segmenter, cloud)
        else:
            labeled = label_scene(scene, self.cfg.scene, self.cfg.perception, self.cfg.segmentation, seed=seed)
            cloud, labels = labeled.cloud, labeled.labels
        points = pad_cyclic(with_labels(cloud, labels), n_points).features
        return Observation(points=points, proprio=scene.state.copy())

    def act(self, scene: Scene, step: int, seed: int) -> np.ndarray:
        return act(self.bundle, self.observation(scene, seed), self._instruction, seed=seed)


def fresh_bundle_policy(bundle: PolicyBundle, cfg: RunConfig) -> BundlePolicy:
    # Layers cache forward values for backward; worker threads never share them.
    return BundlePolicy(bundle=copy.deepcopy(bundle), cfg=cfg)


# ---------------------------------------------------------------------------
# Evaluation


@dataclass(frozen=True, slots=True)
class EpisodeResult:
    task: str
    episode: int
    seed: int
    success: bool
    steps: int
    terminated_by: str
    wall_s: float


def solvable_scene(spec: TaskSpec, base_seed: int, episode: int, cfg: RunConfig) -> tuple[Scene, int]:
    """First scene in the episode's seed stream that the expert completes."""

    for retry in range(SOLVABLE_RETRIES):
        seed = derive_seed(base_seed, 3, spec.task_id, episode, retry)
        try:
            scene = make_task_scene(spec, seed, cfg.scene, robot_critical=cfg.segmentation.robot_critical)
            expert_rollout(scene, spec)
        except (Unreachable, PlacementOverflow):
            continue
        return scene, seed
    raise InvariantViolation(f"no solvable {spec.name} scene for episode {episode}")


def at_home(state: np.ndarray, home: dict[str, np.ndarray], tolerance: float) -> bool:
    tools = tool_positions(ROBOT, state)
    return all(float(np.linalg.norm(tools[side] - home[side])) <= tolerance for side in ("left", "right"))


def run_episode(policy: EpisodePolicy, task_id: int, episode: int, cfg: RunConfig) -> EpisodeResult:
    """Closed loop ``observe -> act -> execute`` until both tools rest at home or the step cap."""

    started = time.perf_counter()
    spec = task_spec(task_id, cfg.scene)
    scene, seed = solvable_scene(spec, cfg.eval.seed, episode, cfg)
    instruction = sample_instruction(task_id, np.random.default_rng(seed)).text
    policy.reset(scene, spec, instruction)

    home = tool_positions(ROBOT, home_state())
    patience = 0
    steps = 0
    terminated_by = "step_cap"
    for step in range(cfg.eval.step_cap):
        action = policy.act(scene, step, derive_seed(seed, step))
        scene = execute_anchor(scene, action_to_anchor(action), grasp_tolerance=cfg.scene.grasp_tolerance_m)
        steps += 1
        patience = patience + 1 if at_home(scene.state, home, cfg.eval.home_tolerance_m) else 0
        if patience >= cfg.eval.home_patience:
            terminated_by = "home"
            break

    return EpisodeResult(
        task=TASK_NAMES[task_id],
        episode=episode,
        seed=seed,
        success=check_success(scene, spec, tolerance=cfg.scene.success_tolerance_m),
        steps=steps,
        terminated_by=terminated_by,
        wall_s=time.perf_counter() - started,
    )


@dataclass
class EvalReport:
    policy: str
    per_task: dict[str, dict[str, Any]]
    average_success_rate: float
    episodes: int
    wall_s: float
    version: int = REPORT_VERSION

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"

    @staticmethod
    def from_json(text: str) -> "EvalReport":
        try:
            raw = json.loads(text)
            report = EvalReport(
                policy=str(raw["policy"]),
                per_task={str(k): dict(v) for k, v in raw["per_task"].items()},
                average_success_rate=float(raw["average_success_rate"]),
                episodes=int(raw["episodes"]),
                wall_s=float(raw["wall_s"]),
                version=int(raw["version"]),
            )
        except (json.JSONDecodeError, KeyError, TypeError, ValueError, AttributeError) as e:
            raise CorruptDataset(f"not an evaluation report: {e}") from e
        if report.version != REPORT_VERSION:
            raise CorruptDataset(f"unsupported report version {report.version}")
        for task, row in report.per_task.items():
            if int(row["successes"]) > int(row["episodes"]):
                raise CorruptDataset(f"{task}: more successes than episodes")
        return report


def evaluate(
    make_policy: Callable[[], EpisodePolicy],
    cfg: RunConfig,
    *,
    episodes_per_task: int | None = None,
    threads: int = 1,
    publisher: EventPublisher | None = None,
) -> tuple[EvalReport, list[EpisodeResult]]:
    """Run every (task, episode) pair with its own policy instance and seed stream."""

    publisher = publisher or NoopEventPublisher()
    n = cfg.eval.episodes_per_task if episodes_per_task is None else episodes_per_task
    jobs = [(TASK_NAMES.index(name), ep) for name in cfg.tasks for ep in range(n)]
    name = make_policy().name
    started = time.perf_counter()

    def run(job: tuple[int, int]) -> EpisodeResult:
        return run_episode(make_policy(), job[0], job[1], cfg)

    results: list[EpisodeResult] = []
    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        for i, result in enumerate(pool.map(run, jobs)):
            results.append(result)
            publisher.publish("episode", step=i, data=asdict(result))

    table = success_table(episodes_frame(asdict(r) for r in results))
    per_task = {row.pop("task"): row for row in to_records(table)}
    report = EvalReport(
        policy=name,
        per_task=per_task,
        average_success_rate=float(table["success_rate"].mean()) if len(table) else 0.0,
        episodes=len(results),
        wall_s=time.perf_counter() - started,
    )
    logger.info("evaluated %s: %d episodes, average success %.3f", name, len(results), report.average_success_rate)
    return report, results


# ---------------------------------------------------------------------------
# Commands


def cmd_gen_data(cfg: RunConfig, *, publisher: EventPublisher | None = None) -> DatasetManifest:
    return build_dataset(cfg, cfg.paths.dataset_dir, threads=resolve_threads(cfg), publisher=publisher)


def segmentation_scenes(cfg: RunConfig, n: int, *, threads: int = 1) -> list[LabeledCloud]:
    """Labeled observations of ``n`` random task scenes, tasks in rotation."""

    def render(i: int) -> LabeledCloud:
        task_id = TASK_NAMES.index(cfg.tasks[i % len(cfg.tasks)])
        spec = task_spec(task_id, cfg.scene)
        seed = derive_seed(cfg.seed, 4, i)
        scene = make_task_scene(spec, seed, cfg.scene, robot_critical=cfg.segmentation.robot_critical)
        return label_scene(scene, cfg.scene, cfg.perception, cfg.segmentation, seed=seed)

    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        return list(pool.map(render, range(n)))


def _train_segmenter(cfg: RunConfig, publisher: EventPublisher) -> dict[str, Any]:
    seg = cfg.segmentation
    data = segmentation_scenes(cfg, seg.n_scenes, threads=resolve_threads(cfg))
    n_test = max(1, len(data) // 10) if len(data) > 1 else 0
    train, test = data[: len(data) - n_test], data[len(data) - n_test :]
    model, history = train_segmenter(
        train, epochs=seg.epochs, seed=cfg.seed, lr=seg.lr, batch_points=seg.batch_points, hidden=seg.hidden
    )
    for epoch, loss in enumerate(history):
        publisher.publish("loss", step=epoch, data={"target": "segmenter", "loss": loss})
    path = cfg.paths.models_dir / "segmenter.adpw"
    path.parent.mkdir(parents=True, exist_ok=True)
    save_segmenter(model, path)
    acc = accuracy(model, test) if test else None
    _write_json(cfg.paths.reports_dir / "segmenter_loss.json", {"loss": history, "heldout_accuracy": acc})
    return {"model": str(path), "final_loss": history[-1], "heldout_accuracy": acc}


def _train_router(cfg: RunConfig, publisher: EventPublisher) -> dict[str, Any]:
    rc = cfg.router
    corpus = gen_instructions(rc.corpus_size, cfg.seed)
    cfg.paths.models_dir.mkdir(parents=True, exist_ok=True)
    write_corpus(corpus, cfg.paths.models_dir / "corpus.jsonl")
    train, test = split_by_frame(corpus, rc.holdout_fraction)
    model, history = train_router(train, epochs=rc.epochs, seed=cfg.seed, lr=rc.lr, batch_size=rc.batch_size)
    for epoch, loss in enumerate(history):
        publisher.publish("loss", step=epoch + 1, data={"target": "router", "loss": loss})
    path = cfg.paths.models_dir / "router.adpw"
    save_router(model, path)
    acc = router_accuracy(model, test) if test else None
    _write_json(cfg.paths.reports_dir / "router_loss.json", {"loss": history, "heldout_accuracy": acc})
    return {"model": str(path), "final_loss": history[-1], "heldout_accuracy": acc}


def _train_policy(cfg: RunConfig, publisher: EventPublisher, resume_from: Path | None) -> dict[str, Any]:
    router_path = cfg.paths.models_dir / "router.adpw"
    if not router_path.exists():
        raise ConfigError(f"{router_path} not found; run `train --target router` first")
    trajectories, _ = read_dataset(cfg.paths.dataset_dir)
    train, val = split_trajectories(trajectories, cfg.policy.validation_fraction, cfg.seed)
    policy, history = train_policy(
        train,
        cfg.policy,
        seed=cfg.seed,
        validation=val,
        checkpoint_dir=cfg.paths.models_dir / "checkpoints",
        resume_from=resume_from,
        publisher=publisher,
    )
    segmenter_path = cfg.paths.models_dir / "segmenter.adpw"
    segmenter = load_segmenter(segmenter_path) if segmenter_path.exists() else None
    if segmenter is None:
        logger.warning("no segmenter at %s; the bundle will use simulator labels at evaluation", segmenter_path)
    bundle_dir = save_bundle(
        PolicyBundle(policy=policy, router=load_router(router_path), segmenter=segmenter),
        cfg.paths.models_dir / "bundle",
    )
    _write_json(cfg.paths.reports_dir / "policy_loss.json", {"history": history})
    return {"bundle": str(bundle_dir), "final_loss": history[-1]["loss"] if history else None, "epochs": len(history)}


def _supervision_study(cfg: RunConfig, publisher: EventPublisher) -> dict[str, Any]:
    trajectories, _ = read_dataset(cfg.paths.dataset_dir)
    train, val = split_trajectories(trajectories, cfg.policy.validation_fraction, cfg.seed)
    curves = supervision_study(train, val, cfg.policy, seed=cfg.seed, publisher=publisher)
    table = supervision_table(curves)
    out = {"curves": curves, "table": to_records(table.reset_index())}
    _write_json(cfg.paths.reports_dir / "supervision_study.json", out)
    return out


TRAIN_TARGETS = ("segmenter", "router", "policy", "supervision-study")


def cmd_train(
    cfg: RunConfig,
    target: str,
    *,
    resume_from: Path | None = None,
    publisher: EventPublisher | None = None,
) -> dict[str, Any]:
    publisher = publisher or NoopEventPublisher()
    if target == "segmenter":
        return _train_segmenter(cfg, publisher)
    if target == "router":
        return _train_router(cfg, publisher)
    if target == "policy":
        return _train_policy(cfg, publisher, resume_from)
    if target == "supervision-study":
        return _supervision_study(cfg, publisher)
    raise ConfigError(f"unknown training target '{target}' (expected one of {', '.join(TRAIN_TARGETS)})")


def cmd_eval(
    cfg: RunConfig,
    *,
    bundle_dir: Path | None = None,
    policy: str | None = None,
    episodes_per_task: int | None = None,
    publisher: EventPublisher | None = None,
) -> EvalReport:
    """Closed-loop evaluation; datasets and bundles are only read."""

    kind = policy or cfg.eval.policy
    if kind == "oracle":
        make_policy: Callable[[], EpisodePolicy] = OraclePolicy
    elif kind == "random":
        make_policy = RandomPolicy
    elif kind == "bundle":
        bundle = load_bundle(bundle_dir or cfg.paths.models_dir / "bundle")
        make_policy = partial(fresh_bundle_policy, bundle, cfg)
    else:
        raise ConfigError(f"unknown evaluation policy '{kind}' (expected bundle, oracle or random)")

    report, results = evaluate(
        make_policy, cfg, episodes_per_task=episodes_per_task, threads=resolve_threads(cfg), publisher=publisher
    )
    out = cfg.paths.reports_dir / f"eval_{kind}.json"
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(report.to_json(), encoding="utf-8")
    _write_json(cfg.paths.reports_dir / f"eval_{kind}_episodes.json", [asdict(r) for r in results])
    return report


# ---------------------------------------------------------------------------
# Benchmarks


def _timed(fn: Callable[[], Any], reps: int) -> list[float]:
    out = []
    for _ in range(reps):
        started = time.perf_counter()
        fn()
        out.append(time.perf_counter() - started)
    return out


def _synthetic_frames(cfg: RunConfig, n: int, rng: np.random.Generator) -> list[tuple[int, FrameRecord]]:
    return [
        (
            i % len(TASK_NAMES),
            FrameRecord(
                points=rng.standard_normal((cfg.perception.n_points, 12)),
                proprio=rng.standard_normal(STATE_DIM),
                labels=rng.standard_normal((cfg.policy.horizon, STATE_DIM)),
                dagger=False,
                timestep=i,
                instruction="",
            ),
        )
        for i in range(n)
    ]


def cmd_bench(cfg: RunConfig, *, reps: int | None = None) -> dict[str, Any]:
    """Micro-benchmarks: per-frame perception, knn vs brute force, rendering, train step."""

    reps = reps or cfg.bench.reps
    rng = np.random.default_rng(cfg.seed)
    samples: dict[str, list[float]] = {}

    spec = task_spec(0, cfg.scene)
    scene = make_task_scene(spec, derive_seed(cfg.seed, 5), cfg.scene)
    views = raycast_views(scene)
    samples["render_4_views"] = _timed(lambda: raycast_views(scene), reps)

    def perceive() -> None:
        cloud = fuse_views([(cam, d, c) for cam, (d, c) in zip(scene.cameras, views)], far_clip=cfg.scene.far_clip_m)
        fps(augment(cloud, cfg.perception.knn_k), cfg.perception.n_points, seed=0)

    samples["fuse_augment_fps"] = _timed(perceive, reps)

    source = rng.uniform(-1.0, 1.0, (cfg.bench.fps_source_points, 3))
    samples[f"fps_{cfg.perception.n_points}_from_{cfg.bench.fps_source_points}"] = _timed(
        lambda: fps_indices(source, cfg.perception.n_points, seed=0), reps
    )

    crossover = None
    for m in cfg.bench.knn_sizes:
        pts = rng.uniform(-1.0, 1.0, (m, 3))
        tree = _timed(lambda: knn(pts, cfg.perception.knn_k), reps)
        brute = _timed(lambda: knn_brute_force(pts, cfg.perception.knn_k), reps)
        samples[f"knn_tree_{m}"] = tree
        samples[f"knn_brute_{m}"] = brute
        if crossover is None and np.median(tree) < np.median(brute):
            crossover = m

    policy = DiffusionPolicy(np.random.default_rng(cfg.seed), horizon=cfg.policy.horizon, steps=cfg.policy.diffusion_steps)
    opt = Adam(policy.parameters(), lr=cfg.policy.lr)
    batch = collate(_synthetic_frames(cfg, cfg.policy.batch_size, rng))
    samples["train_step"] = _timed(lambda: train_step(policy, opt, batch, rng), reps)

    result = {
        "reps": reps,
        "samples": samples,
        "summary": to_records(bench_table(samples)),
        "knn_tree_faster_from": crossover,
    }
    _write_json(cfg.paths.reports_dir / "bench.json", result)
    return result


# ---------------------------------------------------------------------------
# Inspection


def cmd_inspect(path: Path) -> dict[str, Any]:
    """Validated summary of a dataset, trajectory file, bundle, weight file, checkpoint or report."""

    path = Path(path)
    if path.is_dir():
        if (path / MANIFEST_NAME).exists():
            return _inspect_dataset(path)
        if (path / "VERSION").exists():
            load_bundle(path)
            return {"kind": "bundle", "path": str(path), "tensors": bundle_tensors(path)}
        raise CorruptDataset(f"{path} is neither a dataset nor a bundle")
    if not path.exists():
        raise CorruptDataset(f"{path} does not exist")

    data = path.read_bytes()
    if data[:4] == DATASET_MAGIC:
        frames = decode_trajectory(data)
        return {
            "kind": "trajectory",
            "path": str(path),
            "frames": len(frames),
            "dagger_frames": sum(1 for f in frames if f.dagger),
            "timesteps": [f.timestep for f in frames],
            "instruction": frames[0].instruction if frames else None,
        }
    if data[:4] == WEIGHTS_MAGIC:
        tensors = load_weights(path)
        return {"kind": "weights", "path": str(path), "tensors": {k: list(v.shape) for k, v in tensors.items()}}
    if path.suffix == ".npz":
        try:
            with np.load(path) as npz:
                shapes = {k: list(npz[k].shape) for k in npz.files}
        except (OSError, ValueError, EOFError, zipfile.BadZipFile) as e:
            raise CorruptWeights(f"cannot read checkpoint {path}: {e}") from e
        return {"kind": "checkpoint", "path": str(path), "tensors": shapes}
    if path.suffix == ".json":
        report = EvalReport.from_json(data.decode("utf-8", errors="replace"))
        return {"kind": "eval_report", "path": str(path), **asdict(report)}
    raise CorruptDataset(f"unrecognized artifact {path}")


def _inspect_dataset(root: Path) -> dict[str, Any]:
    trajectories, manifest = read_dataset(root)
    per_task: dict[str, dict[str, int]] = {}
    for traj in trajectories:
        row = per_task.setdefault(TASK_NAMES[traj.task_id], {"trajectories": 0, "frames": 0, "dagger_frames": 0})
        row["trajectories"] += 1
        row["frames"] += len(traj.frames)
        row["dagger_frames"] += sum(1 for f in traj.frames if f.dagger)
    return {
        "kind": "dataset",
        "path": str(root),
        "version": manifest.version,
        "trajectories": len(trajectories),
        "per_task": per_task,
        "stats": manifest.stats,
    }


def history_table(history: Sequence[dict[str, Any]]) -> str:
    return loss_frame(history).to_string(index=False)
