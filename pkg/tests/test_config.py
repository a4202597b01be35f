import json
import logging

import pytest
import yaml

from app.config import Settings
from app.core.config import ConfigManager, RunConfig
from app.core.errors import ConfigError
from app.logging_conf import configure_logging


@pytest.fixture
def run_file(tmp_path):
    path = tmp_path / "run.yaml"
    path.write_text(yaml.safe_dump({
        "model": {"preset": "micro", "depths": [1, 1, 2, 1], "block_order": "parallel"},
        "training": {"epochs": 3, "batch_size": 16},
        "dataset": {"noise": 0.05},
    }))
    return path


def test_file_sections_are_applied(run_file):
    manager = ConfigManager(run_file)
    config = manager.model_config()
    assert config.name == "micro"
    assert config.depths == (1, 1, 2, 1)
    assert config.block_order == "parallel"
    assert manager.training().epochs == 3
    assert manager.dataset().noise == 0.05


def test_json_files_are_accepted(tmp_path):
    path = tmp_path / "run.json"
    path.write_text(json.dumps({"model": {"preset": "tiny", "ffn_enabled": False}}))
    assert not ConfigManager(path).model_config().ffn_enabled


def test_flag_repeating_file_value_is_accepted(run_file):
    manager = ConfigManager(run_file)
    manager.apply_overrides("model", preset="micro", block_order="parallel")
    assert manager.model_config().block_order == "parallel"


def test_flag_contradicting_file_value_is_an_error(run_file):
    manager = ConfigManager(run_file)
    with pytest.raises(ConfigError, match="--block-order=window_first conflicts"):
        manager.apply_overrides("model", block_order="window_first")


def test_flag_fills_missing_value(run_file):
    manager = ConfigManager(run_file)
    manager.apply_overrides("model", scale_mode="inv_sqrt_P", window_mode=None)
    assert manager.model_config().scale_mode == "inv_sqrt_P"


@pytest.mark.parametrize("content", [
    {"optimizer": {"lr": 1}},
    {"model": {"preset": "tiny", "widths": 3}},
    {"training": {"momentum": 0.9}},
    {"model": ["tiny"]},
])
def test_unknown_content_is_rejected(tmp_path, content):
    path = tmp_path / "bad.yaml"
    path.write_text(yaml.safe_dump(content))
    with pytest.raises(ConfigError):
        ConfigManager(path)


def test_unreadable_files(tmp_path):
    with pytest.raises(ConfigError):
        ConfigManager(tmp_path / "missing.yaml")
    broken = tmp_path / "broken.yaml"
    broken.write_text("model: [unclosed")
    with pytest.raises(ConfigError):
        ConfigManager(broken)


def test_model_is_required():
    with pytest.raises(ConfigError):
        ConfigManager().model_config()


def test_save_config_round_trips(run_file, tmp_path):
    manager = ConfigManager(run_file)
    saved = manager.save_config(tmp_path / "out" / "resolved.yaml")
    data = yaml.safe_load(saved.read_text())
    assert data["model"]["depths"] == [1, 1, 2, 1]
    assert data["training"]["epochs"] == 3
    assert ConfigManager(saved).model_config() == manager.model_config()


def test_run_config_resolves_preset_and_flags():
    request = RunConfig(subcommand="analyze", preset="tiny", ffn_enabled=False)
    config = request.resolve_model()
    assert config.name == "tiny" and not config.ffn_enabled


def test_settings_environment(monkeypatch, tmp_path):
    monkeypatch.setenv("DAVIT_LOG_LEVEL", "DEBUG")
    monkeypatch.setenv("DAVIT_THREADS", "3")
    settings = Settings.load(output_dir=str(tmp_path / "runs"))
    assert settings.log_level == "DEBUG" and settings.threads == 3
    assert (tmp_path / "runs").is_dir()


def test_configure_logging_writes_file(tmp_path):
    settings = Settings(log_level="INFO", log_file=str(tmp_path / "logs" / "davit.log"))
    configure_logging(settings)
    logging.getLogger("app.test").info("hello")
    for handler in logging.getLogger().handlers:
        handler.flush()
    assert "hello" in (tmp_path / "logs" / "davit.log").read_text()


@pytest.mark.parametrize("value", ["many", "1.5"])
def test_non_integer_thread_count_is_config_error(monkeypatch, tmp_path, value):
    monkeypatch.setenv("DAVIT_THREADS", value)
    with pytest.raises(ConfigError, match="DAVIT_THREADS"):
        Settings.load(output_dir=str(tmp_path))


def test_negative_thread_count_is_config_error(monkeypatch, tmp_path):
    monkeypatch.setenv("DAVIT_THREADS", "-2")
    with pytest.raises(ConfigError, match="threads"):
        Settings.load(output_dir=str(tmp_path))
