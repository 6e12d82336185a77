import textwrap

import pytest

from anchor_policy.config import load_config, resolve_threads
from anchor_policy.errors import ConfigError


def test_load_config_defaults_when_missing(tmp_path) -> None:
    cfg = load_config(tmp_path / "missing.yaml")
    assert cfg.version == 1
    assert len(cfg.tasks) == 8
    assert cfg.policy.horizon == 8
    assert cfg.policy.diffusion_steps == 100
    assert cfg.eval.step_cap == 40
    assert cfg.telemetry.mqtt is None


def test_load_config_reads_yaml(tmp_path) -> None:
    p = tmp_path / "config.yaml"
    p.write_text(
        textwrap.dedent(
        """
        version: 1
        seed: 7
        tasks: [place_block, stack_blocks]
        scene:
          image_width: 32
          table_height_range: [0.01, 0.02]
        policy:
          epochs: 3
          lr: 1
          supervision: executed
        bench:
          knn_sizes: [100, 200]
        """
        ).strip(),
        encoding="utf-8",
    )

    cfg = load_config(p)
    assert cfg.seed == 7
    assert cfg.tasks == ("place_block", "stack_blocks")
    assert cfg.scene.image_width == 32
    assert cfg.scene.table_height_range == (0.01, 0.02)
    assert cfg.policy.epochs == 3
    assert cfg.policy.lr == 1.0
    assert isinstance(cfg.policy.lr, float)
    assert cfg.policy.supervision == "executed"
    assert cfg.bench.knn_sizes == (100, 200)


def test_load_config_finds_parent_config_yaml(tmp_path, monkeypatch) -> None:
    # Simulate running from a subdirectory (like data/)
    (tmp_path / "config.yaml").write_text("seed: 42\n", encoding="utf-8")
    subdir = tmp_path / "data"
    subdir.mkdir()
    monkeypatch.chdir(subdir)

    cfg = load_config("config.yaml")
    assert cfg.seed == 42


def test_overrides_apply_before_validation(tmp_path) -> None:
    p = tmp_path / "config.yaml"
    p.write_text("policy:\n  epochs: 5\n", encoding="utf-8")

    cfg = load_config(p, ["--policy.epochs=2", "dataset.dagger_p=0.25", "--tasks=[sort_balls]"])
    assert cfg.policy.epochs == 2
    assert cfg.dataset.dagger_p == 0.25
    assert cfg.tasks == ("sort_balls",)

    with pytest.raises(ConfigError):
        load_config(p, ["--dataset.dagger_p=1.5"])
    with pytest.raises(ConfigError):
        load_config(p, ["--nonsense.key=1"])
    with pytest.raises(ConfigError):
        load_config(p, ["--policy.epochs"])


@pytest.mark.parametrize(
    "text",
    [
        "version: 2\n",
        "tasks: [fold_laundry]\n",
        "bogus: 1\n",
        "policy:\n  supervision: partial\n",
        "segmentation:\n  direction: sideways\n",
        "scene:\n  clutter_range: [3, 1]\n",
        "policy:\n  epochs: many\n",
        "- just\n- a list\n",
    ],
)
def test_invalid_config_raises_config_error(tmp_path, text: str) -> None:
    p = tmp_path / "config.yaml"
    p.write_text(text, encoding="utf-8")
    with pytest.raises(ConfigError) as err:
        load_config(p)
    assert err.value.exit_code == 2


def test_load_config_supports_mqtt_profiles(tmp_path) -> None:
    p = tmp_path / "config.yaml"
    p.write_text(
        textwrap.dedent(
        """
        telemetry:
          mqtt:
            enabled: true
            profile: local
            profiles:
              local:
                host: 127.0.0.1
                port: 1883
                tls: false
              remote:
                host: broker.example.com
                port: 8883
                tls: true
                username_env: TEST_MQTT_USER
            client_id_prefix: demo
            keepalive_s: 30
            base_topic: test
        """
        ).strip(),
        encoding="utf-8",
    )

    cfg = load_config(p)
    assert cfg.telemetry.mqtt is not None
    assert cfg.telemetry.mqtt.host == "127.0.0.1"
    assert cfg.telemetry.mqtt.port == 1883
    assert cfg.telemetry.mqtt.tls is False
    assert cfg.telemetry.mqtt.client_id_prefix == "demo"
    assert cfg.telemetry.mqtt.keepalive_s == 30
    assert cfg.telemetry.mqtt.base_topic == "test"


def test_load_config_mqtt_profile_can_be_selected_by_env_var(tmp_path, monkeypatch) -> None:
    p = tmp_path / "config.yaml"
    p.write_text(
        textwrap.dedent(
        """
        telemetry:
          mqtt:
            enabled: true
            profile: local
            profiles:
              local:
                host: 127.0.0.1
              remote:
                host: broker.example.com
                port: 8883
                tls: true
                username_env: TEST_MQTT_USER
        """
        ).strip(),
        encoding="utf-8",
    )

    monkeypatch.setenv("ADP3_MQTT_PROFILE", "remote")
    monkeypatch.setenv("TEST_MQTT_USER", "alice")
    cfg = load_config(p)
    assert cfg.telemetry.mqtt is not None
    assert cfg.telemetry.mqtt.host == "broker.example.com"
    assert cfg.telemetry.mqtt.tls is True
    assert cfg.telemetry.mqtt.username == "alice"

    monkeypatch.setenv("ADP3_MQTT_PROFILE", "missing")
    with pytest.raises(ConfigError):
        load_config(p)


def test_disabled_mqtt_is_ignored(tmp_path) -> None:
    p = tmp_path / "config.yaml"
    p.write_text("telemetry:\n  mqtt:\n    enabled: false\n    host: example.com\n", encoding="utf-8")
    assert load_config(p).telemetry.mqtt is None


def test_resolve_threads_respects_env_cap(tmp_path, monkeypatch) -> None:
    cfg = load_config(tmp_path / "missing.yaml", ["--threads=8"])
    monkeypatch.delenv("ADP3_THREADS", raising=False)
    assert resolve_threads(cfg) == 8

    monkeypatch.setenv("ADP3_THREADS", "3")
    assert resolve_threads(cfg) == 3

    monkeypatch.setenv("ADP3_THREADS", "lots")
    with pytest.raises(ConfigError):
        resolve_threads(cfg)
