"""Promptable open-set object detection: one model driven by text prompts,
visual prompts (boxes/points), or a mix of both, with late-fusion serving."""

from .config import Config, DataConfig, ModelConfig, TrainConfig, load_config
from .geometry import NormalizedBox, NormalizedPoint, giou, iou
from .prompts import PromptEmbedding, VisualPromptSet, mix_embeddings

__all__ = [
    "Config",
    "DataConfig",
    "ModelConfig",
    "TrainConfig",
    "load_config",
    "NormalizedBox",
    "NormalizedPoint",
    "iou",
    "giou",
    "PromptEmbedding",
    "VisualPromptSet",
    "mix_embeddings",
]

__version__ = "0.1.0"
