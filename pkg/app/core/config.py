#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
Run Configuration - Конфигурация запуска

Reads run-config files (YAML or JSON) with the sections ``model``,
``training`` and ``dataset`` and merges them with command-line flags.

Rules:
- unknown sections and keys are errors
- a ``model`` section may name a ``preset`` and override any model field
- a flag that contradicts a value present in the file is an error; a flag
  repeating the file's value is accepted
"""

import json
import logging
from dataclasses import asdict, fields
from pathlib import Path
from typing import Any, Dict, Optional, Union

import yaml
from pydantic import BaseModel, ConfigDict

from app.core.errors import ConfigError
from app.models.config import ModelConfig
from app.services.toy_data import ToySpec
from app.services.training import TrainHyperparams

SECTIONS = ("model", "training", "dataset")
MODEL_KEYS = set(ModelConfig.model_fields) | {"preset"}


def _normalize(value: Any) -> Any:
    if isinstance(value, list):
        return tuple(_normalize(v) for v in value)
    return value


class ConfigManager:
    """
    Run configuration manager
    Менеджер конфигурации запуска
    """

    def __init__(self, config_file: Optional[Union[str, Path]] = None):
        self.logger = logging.getLogger(__name__)
        self.config_file = Path(config_file) if config_file else None

        # Configuration objects
        self.model_data: Dict[str, Any] = {}
        self.training_config = TrainHyperparams()
        self.dataset_config = ToySpec()

        # Values that came from the file, per section
        self._file_values: Dict[str, Dict[str, Any]] = {section: {} for section in SECTIONS}

        if self.config_file is not None:
            self.load_config(self.config_file)

    def load_config(self, path: Union[str, Path]):
        """
        Load a YAML or JSON run-config file
        Загрузка файла конфигурации
        """
        path = Path(path)
        try:
            text = path.read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config file {path}: {exc}") from None
        try:
            if path.suffix.lower() == ".json":
                config_data = json.loads(text)
            else:
                config_data = yaml.safe_load(text)
        except (json.JSONDecodeError, yaml.YAMLError) as exc:
            raise ConfigError(f"cannot parse config file {path}: {exc}") from None

        if config_data is None:
            config_data = {}
        if not isinstance(config_data, dict):
            raise ConfigError(f"{path}: top level must be a mapping of sections")
        self._update_config_objects(config_data)
        self.logger.info(f"loaded run config {path}")

    def _update_config_objects(self, config_data: Dict[str, Any]):
        """
        Update configuration objects with loaded data
        Обновление объектов конфигурации загруженными данными
        """
        unknown = sorted(set(config_data) - set(SECTIONS))
        if unknown:
            raise ConfigError(f"unknown config sections {unknown}; expected {list(SECTIONS)}")

        for section, data in config_data.items():
            if data is None:
                continue
            if not isinstance(data, dict):
                raise ConfigError(f"section '{section}' must be a mapping")
            allowed = MODEL_KEYS if section == "model" else self._section_keys(section)
            bad = sorted(set(data) - allowed)
            if bad:
                raise ConfigError(f"unknown keys {bad} in section '{section}'")
            values = {key: _normalize(value) for key, value in data.items()}
            self._file_values[section].update(values)
            self._apply(section, values)

    def _section_keys(self, section: str) -> set:
        return {f.name for f in fields(self._section_object(section))}

    def _section_object(self, section: str):
        if section == "training":
            return self.training_config
        if section == "dataset":
            return self.dataset_config
        raise ConfigError(f"unknown config section '{section}'")

    def _apply(self, section: str, values: Dict[str, Any]):
        if section == "model":
            self.model_data.update(values)
            return
        target = self._section_object(section)
        for key, value in values.items():
            setattr(target, key, value)

    def apply_overrides(self, section: str, **values: Any):
        """
        Merge command-line values into a section
        Объединение значений командной строки
        """
        if section not in SECTIONS:
            raise ConfigError(f"unknown config section '{section}'")
        given = {key: _normalize(value) for key, value in values.items() if value is not None}
        file_values = self._file_values[section]
        for key, value in given.items():
            if key in file_values and file_values[key] != value:
                raise ConfigError(f"--{key.replace('_', '-')}={value} conflicts with "
                                  f"{section}.{key}={file_values[key]} in the config file")
        self._apply(section, given)

    def model_config(self) -> ModelConfig:
        if not self.model_data:
            raise ConfigError("no model given: pass --preset or a config file with a model section")
        return ModelConfig.from_dict(self.model_data)

    def training(self) -> TrainHyperparams:
        return self.training_config.validate()

    def dataset(self) -> ToySpec:
        return self.dataset_config.validate()

    def get_config(self) -> Dict[str, Any]:
        """
        Get all configuration as dictionary
        Получить всю конфигурацию как словарь
        """
        return {
            "model": self.model_config().model_dump(mode="json"),
            "training": asdict(self.training_config),
            "dataset": asdict(self.dataset_config),
        }

    def save_config(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        config_data = json.loads(json.dumps(self.get_config()))
        with open(path, "w", encoding="utf-8") as f:
            yaml.safe_dump(config_data, f, default_flow_style=False, allow_unicode=True)
        return path


class RunConfig(BaseModel):
    """
    Resolved command-line request
    Параметры запуска из командной строки
    """

    model_config = ConfigDict(frozen=True)

    subcommand: str
    preset: Optional[str] = None
    config_path: Optional[Path] = None
    resolution: Optional[int] = None
    seed: Optional[int] = None
    out: Optional[Path] = None
    scale_mode: Optional[str] = None
    ffn_enabled: Optional[bool] = None
    block_order: Optional[str] = None
    window_mode: Optional[str] = None

    def manager(self) -> ConfigManager:
        """Config file plus flags, with the conflict rule applied"""
        manager = ConfigManager(self.config_path)
        manager.apply_overrides("model", preset=self.preset, scale_mode=self.scale_mode,
                                ffn_enabled=self.ffn_enabled, block_order=self.block_order,
                                window_mode=self.window_mode)
        return manager

    def resolve_model(self) -> ModelConfig:
        return self.manager().model_config()
