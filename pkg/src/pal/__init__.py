"""Desk-scale study of audio integration mechanisms for decoder LLMs:
delayed fusion, attention-only key/value injection, and a latent-token
multi-encoder connector, on a from-scratch float64 autodiff engine with a
synthetic audio-event task."""

__version__ = "0.1.0"

from .config import ExperimentConfig, canonical_config, load_config
from .connector import ConnectorConfig
from .model import AttentionOnly, Baseline, DelayedFusion, ModelConfig, PalModel
from .tensor import Tensor

__all__ = [
    "AttentionOnly", "Baseline", "ConnectorConfig", "DelayedFusion",
    "ExperimentConfig", "ModelConfig", "PalModel", "Tensor",
    "canonical_config", "load_config",
]
