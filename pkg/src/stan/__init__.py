"""Two-stream spatio-temporal attention engine for long-video classification."""

__version__ = "0.1.0"

from .errors import (
    ContractError,
    DimensionError,
    NotFoundError,
    SequenceLengthError,
    StanError,
)
from .model import Model, ModelConfig, positional_embedding
from .scenes import CutDetectorConfig, FrameSequence, PipelineConfig, SceneSegment
from .training import TrainConfig

__all__ = [
    "ContractError",
    "CutDetectorConfig",
    "DimensionError",
    "FrameSequence",
    "Model",
    "ModelConfig",
    "NotFoundError",
    "PipelineConfig",
    "SceneSegment",
    "SequenceLengthError",
    "StanError",
    "TrainConfig",
    "positional_embedding",
    "__version__",
]
