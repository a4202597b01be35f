"""
Model Package - Пакет моделей
"""
from app.models.config import ModelConfig, get_preset, preset_names
from app.models.davit import DaViT, build_model, forward, forward_features
from app.models.layers import Mode

__all__ = ["ModelConfig", "get_preset", "preset_names", "DaViT", "build_model", "forward",
           "forward_features", "Mode"]
