"""Two-stream audio/text emotion classifier with cross-modal attention."""

from .tensor import GradTape, Tensor
from .data import EMOTIONS, FeatureSequence, UtteranceSample
from .model import EmotionClassifier, ModelConfig, stats_pool
from .checkpoint import load_checkpoint, save_checkpoint

__all__ = [
    "EMOTIONS",
    "EmotionClassifier",
    "FeatureSequence",
    "GradTape",
    "ModelConfig",
    "Tensor",
    "UtteranceSample",
    "load_checkpoint",
    "save_checkpoint",
    "stats_pool",
]
