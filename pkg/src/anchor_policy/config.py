from __future__ import annotations

from dataclasses import dataclass, field
import os
from pathlib import Path
from typing import Any, Callable, Iterable

from dotenv import load_dotenv
import yaml

from .errors import ConfigError

CONFIG_VERSION = 1

TASK_NAMES: tuple[str, ...] = (
    "place_mouse",
    "place_stapler",
    "place_bell",
    "place_block",
    "place_ball",
    "stack_blocks",
    "place_two_blocks",
    "sort_balls",
)


@dataclass(frozen=True, slots=True)
class PathsConfig:
    dataset_dir: Path = Path("data/dataset")
    models_dir: Path = Path("data/models")
    reports_dir: Path = Path("data/reports")


@dataclass(frozen=True, slots=True)
class SceneConfig:
    image_width: int = 96
    image_height: int = 72
    focal_px: float = 84.0
    far_clip_m: float = 100.0
    table_height_range: tuple[float, float] = (0.0, 0.08)
    clutter_range: tuple[int, int] = (0, 3)
    # Scalar color/brightness jitter standing in for lighting and backgrounds.
    lighting_jitter: float = 0.15
    grasp_tolerance_m: float = 0.02
    success_tolerance_m: float = 0.03


@dataclass(frozen=True, slots=True)
class PerceptionConfig:
    knn_k: int = 16
    n_points: int = 4096


@dataclass(frozen=True, slots=True)
class SegmentationConfig:
    delta: float = 1e-5
    # "occluded_farther": mask = (D_occluded - D_full) > delta.
    # "below_delta": mask = (D_occluded - D_full) < delta, the literal rule.
    direction: str = "occluded_farther"
    robot_critical: bool = True
    hidden: int = 64
    epochs: int = 20
    lr: float = 1e-3
    batch_points: int = 4096
    n_scenes: int = 200


@dataclass(frozen=True, slots=True)
class DatasetConfig:
    trajectories_per_task: int = 50
    max_attempts_per_task: int = 200
    frames_per_interval: int = 2
    dagger_p: float = 0.1
    dagger_max_translation_m: float = 0.05
    dagger_max_rotation_rad: float = 0.2
    render_anchor_frames: bool = False
    include_start_interval: bool = False
    # Kinematic anchor detection, cross-checked against the tagged anchors.
    anchor_v_thresh: float = 0.05
    anchor_min_gap: int = 5


@dataclass(frozen=True, slots=True)
class RouterConfig:
    corpus_size: int = 10_000
    epochs: int = 20
    lr: float = 0.05
    batch_size: int = 256
    holdout_fraction: float = 0.2


@dataclass(frozen=True, slots=True)
class PolicyConfig:
    epochs: int = 100
    batch_size: int = 16
    lr: float = 1e-3
    horizon: int = 8
    diffusion_steps: int = 100
    # "full" supervises all horizon x 32 elements, "executed" only row 0, 0:14.
    supervision: str = "full"
    validation_fraction: float = 0.1
    checkpoint_every: int = 10


@dataclass(frozen=True, slots=True)
class EvalConfig:
    episodes_per_task: int = 100
    step_cap: int = 40
    home_tolerance_m: float = 0.01
    home_patience: int = 2
    seed: int = 10_000
    policy: str = "bundle"


@dataclass(frozen=True, slots=True)
class BenchConfig:
    reps: int = 20
    knn_sizes: tuple[int, ...] = (1_000, 5_000, 10_000, 20_000)
    fps_source_points: int = 50_000


@dataclass(frozen=True, slots=True)
class MqttConfig:
    host: str
    port: int
    tls: bool
    username: str | None
    password: str | None = field(repr=False)
    client_id_prefix: str
    keepalive_s: int
    base_topic: str


@dataclass(frozen=True, slots=True)
class TelemetryConfig:
    stdout: bool = False
    jsonl_path: Path | None = None
    mqtt: MqttConfig | None = None


@dataclass(frozen=True, slots=True)
class RunConfig:
    version: int = CONFIG_VERSION
    seed: int = 0
    tasks: tuple[str, ...] = TASK_NAMES
    threads: int | None = None
    paths: PathsConfig = field(default_factory=PathsConfig)
    scene: SceneConfig = field(default_factory=SceneConfig)
    perception: PerceptionConfig = field(default_factory=PerceptionConfig)
    segmentation: SegmentationConfig = field(default_factory=SegmentationConfig)
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    router: RouterConfig = field(default_factory=RouterConfig)
    policy: PolicyConfig = field(default_factory=PolicyConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    bench: BenchConfig = field(default_factory=BenchConfig)
    telemetry: TelemetryConfig = field(default_factory=TelemetryConfig)


_SECTIONS = {
    "paths",
    "scene",
    "perception",
    "segmentation",
    "dataset",
    "router",
    "policy",
    "eval",
    "bench",
    "telemetry",
}
_TOP_LEVEL = {"version", "seed", "tasks", "threads", *_SECTIONS}


def load_config(path: str | Path = "config.yaml", overrides: Iterable[str] = ()) -> RunConfig:
    """Load the run configuration.

    ``overrides`` are ``section.key=value`` strings (what the CLI receives as
    ``--section.key=value``). They are applied to the raw YAML mapping before
    parsing, so they go through exactly the same validation as the file.
    """

    # Credentials for the optional MQTT sink live in .env, never in YAML.
    load_dotenv(override=False)

    resolved_path = _resolve_default_config_path(path)
    data = _load_yaml_dict(resolved_path)
    for item in overrides:
        _apply_override(data, item)
    return parse_config(data)


def parse_config(data: dict[str, Any]) -> RunConfig:
    unknown = set(data) - _TOP_LEVEL
    if unknown:
        raise ConfigError(f"Unknown config keys: {', '.join(sorted(unknown))}")

    version = int(data.get("version", CONFIG_VERSION))
    if version != CONFIG_VERSION:
        raise ConfigError(f"Unsupported config version {version} (expected {CONFIG_VERSION})")

    tasks_raw = data.get("tasks") or list(TASK_NAMES)
    if not isinstance(tasks_raw, list) or not tasks_raw:
        raise ConfigError("Config key 'tasks' must be a non-empty list")
    tasks = tuple(str(t) for t in tasks_raw)
    for name in tasks:
        if name not in TASK_NAMES:
            raise ConfigError(f"Unknown task '{name}'. Available: {', '.join(TASK_NAMES)}")

    threads_raw = data.get("threads")

    return RunConfig(
        version=version,
        seed=int(data.get("seed") or 0),
        tasks=tasks,
        threads=int(threads_raw) if threads_raw is not None else None,
        paths=_parse_paths(_section(data, "paths")),
        scene=_parse_scene(_section(data, "scene")),
        perception=_parse_simple(_section(data, "perception"), PerceptionConfig, "perception"),
        segmentation=_parse_segmentation(_section(data, "segmentation")),
        dataset=_parse_dataset(_section(data, "dataset")),
        router=_parse_simple(_section(data, "router"), RouterConfig, "router"),
        policy=_parse_policy(_section(data, "policy")),
        eval=_parse_simple(_section(data, "eval"), EvalConfig, "eval"),
        bench=_parse_bench(_section(data, "bench")),
        telemetry=_parse_telemetry(_section(data, "telemetry")),
    )


def resolve_threads(cfg: RunConfig) -> int:
    """Worker count: config value, capped by ``ADP3_THREADS`` when set."""

    wanted = cfg.threads or os.cpu_count() or 1
    cap = os.getenv("ADP3_THREADS")
    if cap:
        try:
            wanted = min(wanted, int(cap))
        except ValueError as e:
            raise ConfigError(f"ADP3_THREADS must be an integer, got {cap!r}") from e
    return max(1, wanted)


def _section(data: dict[str, Any], name: str) -> dict[str, Any]:
    raw = data.get(name)
    if raw is None:
        return {}
    if not isinstance(raw, dict):
        raise ConfigError(f"Config key '{name}' must be a mapping")
    return raw


def _check_keys(raw: dict[str, Any], allowed: Iterable[str], section: str) -> None:
    unknown = set(raw) - set(allowed)
    if unknown:
        raise ConfigError(f"Unknown keys in '{section}': {', '.join(sorted(unknown))}")


def _parse_simple(raw: dict[str, Any], cls: type, section: str) -> Any:
    """Parse a section whose fields are all plain scalars.

    Each value is cast to the type of the dataclass default, so a YAML
    ``1`` for a float field becomes ``1.0`` and a quoted number still works.
    """

    defaults = cls()
    allowed = [f for f in cls.__slots__]
    _check_keys(raw, allowed, section)
    values: dict[str, Any] = {}
    for name in allowed:
        default = getattr(defaults, name)
        if name not in raw or raw[name] is None:
            values[name] = default
            continue
        values[name] = _cast_like(default, raw[name], f"{section}.{name}")
    return cls(**values)


def _cast_like(default: Any, value: Any, key: str) -> Any:
    try:
        if isinstance(default, bool):
            if isinstance(value, str):
                return value.strip().lower() in {"1", "true", "yes", "on"}
            return bool(value)
        if isinstance(default, int):
            return int(value)
        if isinstance(default, float):
            return float(value)
        if isinstance(default, str):
            return str(value)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"Config key '{key}' has invalid value {value!r}") from e
    return value


def _parse_pair(raw: Any, key: str, cast: Callable[[Any], Any]) -> tuple[Any, Any]:
    if not isinstance(raw, (list, tuple)) or len(raw) != 2:
        raise ConfigError(f"Config key '{key}' must be a [low, high] pair")
    low, high = cast(raw[0]), cast(raw[1])
    if low > high:
        raise ConfigError(f"Config key '{key}' has low > high")
    return low, high


def _parse_paths(raw: dict[str, Any]) -> PathsConfig:
    _check_keys(raw, PathsConfig.__slots__, "paths")
    defaults = PathsConfig()
    return PathsConfig(
        dataset_dir=Path(raw.get("dataset_dir") or defaults.dataset_dir),
        models_dir=Path(raw.get("models_dir") or defaults.models_dir),
        reports_dir=Path(raw.get("reports_dir") or defaults.reports_dir),
    )


def _parse_scene(raw: dict[str, Any]) -> SceneConfig:
    pairs = {"table_height_range", "clutter_range"}
    scalars = {k: v for k, v in raw.items() if k not in pairs}
    base = _parse_simple(scalars, SceneConfig, "scene")

    table = base.table_height_range
    if "table_height_range" in raw:
        table = _parse_pair(raw["table_height_range"], "scene.table_height_range", float)
    clutter = base.clutter_range
    if "clutter_range" in raw:
        clutter = _parse_pair(raw["clutter_range"], "scene.clutter_range", int)

    if base.image_width < 1 or base.image_height < 1:
        raise ConfigError("scene.image_width and scene.image_height must be >= 1")
    if base.focal_px <= 0:
        raise ConfigError("scene.focal_px must be > 0")

    return SceneConfig(
        image_width=base.image_width,
        image_height=base.image_height,
        focal_px=base.focal_px,
        far_clip_m=base.far_clip_m,
        table_height_range=table,
        clutter_range=clutter,
        lighting_jitter=base.lighting_jitter,
        grasp_tolerance_m=base.grasp_tolerance_m,
        success_tolerance_m=base.success_tolerance_m,
    )


def _parse_segmentation(raw: dict[str, Any]) -> SegmentationConfig:
    cfg = _parse_simple(raw, SegmentationConfig, "segmentation")
    if cfg.direction not in {"occluded_farther", "below_delta"}:
        raise ConfigError("segmentation.direction must be 'occluded_farther' or 'below_delta'")
    return cfg


def _parse_dataset(raw: dict[str, Any]) -> DatasetConfig:
    cfg = _parse_simple(raw, DatasetConfig, "dataset")
    if not 0.0 <= cfg.dagger_p <= 1.0:
        raise ConfigError("dataset.dagger_p must be within [0, 1]")
    if cfg.frames_per_interval < 0:
        raise ConfigError("dataset.frames_per_interval must be >= 0")
    return cfg


def _parse_policy(raw: dict[str, Any]) -> PolicyConfig:
    cfg = _parse_simple(raw, PolicyConfig, "policy")
    if cfg.supervision not in {"full", "executed"}:
        raise ConfigError("policy.supervision must be 'full' or 'executed'")
    return cfg


def _parse_bench(raw: dict[str, Any]) -> BenchConfig:
    scalars = {k: v for k, v in raw.items() if k != "knn_sizes"}
    base = _parse_simple(scalars, BenchConfig, "bench")
    sizes = base.knn_sizes
    if "knn_sizes" in raw:
        if not isinstance(raw["knn_sizes"], list):
            raise ConfigError("bench.knn_sizes must be a list")
        sizes = tuple(int(s) for s in raw["knn_sizes"])
    return BenchConfig(reps=base.reps, knn_sizes=sizes, fps_source_points=base.fps_source_points)


def _parse_telemetry(raw: dict[str, Any]) -> TelemetryConfig:
    _check_keys(raw, {"stdout", "jsonl_path", "mqtt"}, "telemetry")
    jsonl_raw = raw.get("jsonl_path")
    mqtt_raw = raw.get("mqtt")
    mqtt_cfg = None
    if mqtt_raw is not None:
        if not isinstance(mqtt_raw, dict):
            raise ConfigError("Config key 'telemetry.mqtt' must be a mapping")
        if bool(mqtt_raw.get("enabled", False)):
            mqtt_cfg = _parse_mqtt(_select_mqtt_config(mqtt_raw))
    return TelemetryConfig(
        stdout=bool(raw.get("stdout") or False),
        jsonl_path=Path(jsonl_raw) if jsonl_raw else None,
        mqtt=mqtt_cfg,
    )


def _parse_mqtt(mqtt: dict[str, Any]) -> MqttConfig:
    username_env = mqtt.get("username_env")
    password_env = mqtt.get("password_env")
    return MqttConfig(
        host=str(mqtt.get("host") or "localhost"),
        port=int(mqtt.get("port") or 1883),
        tls=bool(mqtt.get("tls") or False),
        username=os.getenv(str(username_env)) if username_env else None,
        password=os.getenv(str(password_env)) if password_env else None,
        client_id_prefix=str(mqtt.get("client_id_prefix") or "anchor-policy"),
        keepalive_s=int(mqtt.get("keepalive_s") or 60),
        base_topic=str(mqtt.get("base_topic") or "anchor-policy"),
    )


def _select_mqtt_config(raw: dict[str, Any]) -> dict[str, Any]:
    """Return the effective broker mapping.

    Either a single broker (``host``, ``port``, ...) or named ``profiles``
    selected by ``profile`` or the ``ADP3_MQTT_PROFILE`` env var. Common
    keys are merged under the selected profile.
    """

    profiles = raw.get("profiles")
    if profiles is None:
        return raw
    if not isinstance(profiles, dict) or not profiles:
        raise ConfigError("Config key 'telemetry.mqtt.profiles' must be a non-empty mapping")

    profile_name = os.getenv("ADP3_MQTT_PROFILE") or raw.get("profile")
    if not profile_name:
        profile_name = "local" if "local" in profiles else next(iter(profiles))
    if profile_name not in profiles:
        available = ", ".join(sorted(str(k) for k in profiles))
        raise ConfigError(f"Unknown MQTT profile '{profile_name}'. Available: {available}")

    selected = profiles.get(profile_name) or {}
    if not isinstance(selected, dict):
        raise ConfigError(f"Config key 'telemetry.mqtt.profiles.{profile_name}' must be a mapping")

    common = {k: v for k, v in raw.items() if k not in {"profiles", "profile", "enabled"}}
    return {**common, **selected}


def _apply_override(data: dict[str, Any], item: str) -> None:
    text = item[2:] if item.startswith("--") else item
    if "=" not in text:
        raise ConfigError(f"Override '{item}' must look like section.key=value")
    dotted, value_text = text.split("=", 1)
    keys = [k for k in dotted.strip().split(".") if k]
    if not keys or keys[0] not in _TOP_LEVEL:
        raise ConfigError(f"Override '{item}' targets an unknown config key")

    value = yaml.safe_load(value_text) if value_text.strip() else None
    node = data
    for key in keys[:-1]:
        child = node.get(key)
        if child is None:
            child = {}
            node[key] = child
        if not isinstance(child, dict):
            raise ConfigError(f"Override '{item}' descends into a non-mapping key '{key}'")
        node = child
    node[keys[-1]] = value


def _load_yaml_dict(path: str | Path) -> dict[str, Any]:
    p = Path(path)
    if not p.exists():
        return {}

    loaded = yaml.safe_load(p.read_text(encoding="utf-8"))
    if loaded is None:
        return {}
    if not isinstance(loaded, dict):
        raise ConfigError(f"Config file {p} must contain a mapping at top level")
    return loaded


def _resolve_default_config_path(path: str | Path) -> Path:
    """Resolve a bare ``config.yaml`` by searching parent directories.

    Commands are often started from a subdirectory (``data/``, ``scripts/``).
    Absolute paths and nested relative paths are used as given.
    """

    p = Path(path)
    if p.is_absolute() or p.exists() or p.parent != Path("."):
        return p

    for start in (Path.cwd(), Path(__file__).resolve().parent):
        for parent in [start, *start.parents]:
            candidate = parent / p.name
            if candidate.exists():
                return candidate
    return p
