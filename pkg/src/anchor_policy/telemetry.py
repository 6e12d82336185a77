"""Progress events for long runs.

Training loops emit ``loss`` events, data generation ``trajectory`` events
and evaluation ``episode`` events. Where they go is configured under
``telemetry`` in ``config.yaml``: nowhere, stdout (dry run), a JSONL file,
an MQTT broker, or any combination.
"""

from __future__ import annotations

from contextlib import ExitStack, contextmanager
from dataclasses import dataclass
from datetime import datetime, timezone
import io
import json
import socket
import ssl
import threading
import time
from typing import TYPE_CHECKING, Any, Iterator

from .config import MqttConfig, TelemetryConfig

if TYPE_CHECKING:
    import paho.mqtt.client as mqtt


class EventPublisher:
    """A small interface for publishing run events."""

    def publish(self, kind: str, *, step: int, data: dict[str, Any]) -> None:
        raise NotImplementedError


@dataclass(frozen=True, slots=True)
class NoopEventPublisher(EventPublisher):
    def publish(self, kind: str, *, step: int, data: dict[str, Any]) -> None:
        return


@dataclass(frozen=True, slots=True)
class StdoutEventPublisher(EventPublisher):
    """Dry-run publisher that prints every event with its would-be topic."""

    run: str
    base_topic: str = "anchor-policy"

    def publish(self, kind: str, *, step: int, data: dict[str, Any]) -> None:
        payload = make_event_payload(run=self.run, kind=kind, step=step, data=data)
        print(f"[EVENT] topic={topic(self.base_topic, kind)} payload={payload}")


@dataclass(frozen=True, slots=True)
class JsonlFileEventPublisher(EventPublisher):
    """Writes one ``{"topic": ..., "payload": {...}}`` object per line."""

    run: str
    fp: io.TextIOBase
    base_topic: str = "anchor-policy"

    def publish(self, kind: str, *, step: int, data: dict[str, Any]) -> None:
        payload = make_event_payload(run=self.run, kind=kind, step=step, data=data)
        line = {"topic": topic(self.base_topic, kind), "payload": json.loads(payload)}
        self.fp.write(json.dumps(line, ensure_ascii=False) + "\n")
        self.fp.flush()


@dataclass(frozen=True, slots=True)
class TeeEventPublisher(EventPublisher):
    publishers: tuple[EventPublisher, ...]

    def publish(self, kind: str, *, step: int, data: dict[str, Any]) -> None:
        for p in self.publishers:
            p.publish(kind, step=step, data=data)


@dataclass(frozen=True, slots=True)
class MqttEventPublisher(EventPublisher):
    handle: "MqttClientHandle"
    mqtt_cfg: MqttConfig
    run: str

    def publish(self, kind: str, *, step: int, data: dict[str, Any]) -> None:
        payload = make_event_payload(run=self.run, kind=kind, step=step, data=data)
        self.handle.publish_json(topic(self.mqtt_cfg.base_topic, kind), payload, qos=1)


def topic(base_topic: str, kind: str) -> str:
    return f"{base_topic.rstrip('/')}/{kind}"


def make_event_payload(*, run: str, kind: str, step: int, data: dict[str, Any], ts: datetime | None = None) -> str:
    """Compact JSON payload ``{ts, kind, run, step, data}``."""

    stamp = (ts or datetime.now(timezone.utc)).astimezone(timezone.utc)
    body = {
        "ts": stamp.isoformat().replace("+00:00", "Z"),
        "kind": kind,
        "run": run,
        "step": int(step),
        "data": data,
    }
    return json.dumps(body, ensure_ascii=False, separators=(",", ":"), default=_jsonable)


def _jsonable(value: Any) -> Any:
    # numpy scalars and arrays
    if hasattr(value, "tolist"):
        return value.tolist()
    raise TypeError(f"{type(value).__name__} is not JSON serializable")


@contextmanager
def open_publisher(cfg: TelemetryConfig, run: str) -> Iterator[EventPublisher]:
    """Publisher for the configured sinks; files and connections close on exit."""

    with ExitStack() as stack:
        publishers: list[EventPublisher] = []
        base = cfg.mqtt.base_topic if cfg.mqtt is not None else "anchor-policy"
        if cfg.stdout:
            publishers.append(StdoutEventPublisher(run=run, base_topic=base))
        if cfg.jsonl_path is not None:
            cfg.jsonl_path.parent.mkdir(parents=True, exist_ok=True)
            fp = stack.enter_context(open(cfg.jsonl_path, "a", encoding="utf-8"))
            publishers.append(JsonlFileEventPublisher(run=run, fp=fp, base_topic=base))
        if cfg.mqtt is not None:
            handle = connect_mqtt(cfg.mqtt, client_id_suffix=run)
            handle.client.loop_start()
            stack.callback(handle.client.disconnect)
            stack.callback(handle.client.loop_stop)
            publishers.append(MqttEventPublisher(handle=handle, mqtt_cfg=cfg.mqtt, run=run))

        if not publishers:
            yield NoopEventPublisher()
        elif len(publishers) == 1:
            yield publishers[0]
        else:
            yield TeeEventPublisher(tuple(publishers))


# ---------------------------------------------------------------------------
# MQTT


@dataclass(frozen=True, slots=True)
class MqttClientHandle:
    client: "mqtt.Client"

    def publish_json(self, topic: str, payload: str, qos: int = 0, retain: bool = False) -> None:
        result = self.client.publish(topic, payload=payload, qos=qos, retain=retain)
        result.wait_for_publish()


def connect_mqtt(cfg: MqttConfig, *, client_id_suffix: str | None = None, timeout_s: float = 10.0) -> MqttClientHandle:
    """Connect to the configured broker and wait for its CONNACK.

    paho-mqtt is an optional extra (``pip install -e ".[mqtt]"``).
    """

    try:
        import paho.mqtt.client as mqtt
    except ModuleNotFoundError as e:
        raise ModuleNotFoundError(
            "paho-mqtt is required for the MQTT telemetry sink. Install it with `pip install -e \".[mqtt]\"`."
        ) from e

    client = mqtt.Client(mqtt.CallbackAPIVersion.VERSION2, client_id=_make_client_id(cfg.client_id_prefix, client_id_suffix))
    if cfg.username is not None:
        client.username_pw_set(cfg.username, password=cfg.password)
    if cfg.tls:
        client.tls_set_context(ssl.create_default_context())

    started = time.time()
    last_err: Exception | None = None
    while time.time() - started < timeout_s:
        try:
            client.connect(cfg.host, cfg.port, keepalive=cfg.keepalive_s)
            break
        except (OSError, socket.gaierror, ssl.SSLError) as e:
            last_err = e
            time.sleep(0.25)
    if time.time() - started >= timeout_s:
        raise TimeoutError(f"Failed to connect to MQTT broker {cfg.host}:{cfg.port} within {timeout_s}s") from last_err

    # CONNACK is only processed while a network loop runs.
    connected = threading.Event()
    connect_err: list[str] = []

    def on_connect(_client, _userdata, _connect_flags, reason_code, _properties):
        code = getattr(reason_code, "value", reason_code)
        try:
            failed = int(code) != 0
        except (TypeError, ValueError):
            failed = True
        if failed:
            connect_err.append(f"CONNACK reason_code={reason_code}")
        connected.set()

    client.on_connect = on_connect
    client.loop_start()
    try:
        if not connected.wait(timeout_s):
            raise TimeoutError(f"Timed out waiting for MQTT CONNACK from {cfg.host}:{cfg.port}")
        if connect_err:
            raise ConnectionError(
                f"MQTT connection was rejected by the broker (likely auth/ACL). Details: {connect_err[0]}."
            )
    finally:
        client.loop_stop()
    return MqttClientHandle(client=client)


def _make_client_id(prefix: str, suffix: str | None) -> str:
    safe_prefix = prefix.strip() or "anchor-policy"
    return f"{safe_prefix}-{suffix}" if suffix else safe_prefix
