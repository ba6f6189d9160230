"""Emotional image generation: emotion descriptors, visual fusion, hierarchical adapters, toy diffusion."""

from .errors import CoEmoGenError
from .model import CoEmoGenModel, ModelConfig
from .taxonomy import EMOTION_NAMES, EMOTIONS, Emotion, Polarity, parse_emotion, polarity_of
from .training import TrainConfig, train
from .inference import emotion_fusion, emotion_transfer, fit_clusters, generate

__version__ = "0.1.0"

__all__ = [
    "CoEmoGenError", "CoEmoGenModel", "ModelConfig", "EMOTION_NAMES", "EMOTIONS", "Emotion", "Polarity",
    "parse_emotion", "polarity_of", "TrainConfig", "train", "emotion_fusion", "emotion_transfer", "fit_clusters",
    "generate", "__version__",
]
