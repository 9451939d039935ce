"""vadforge: a self-contained voice-activity-detection laboratory.

Synthesizes noisy reverberant speech scenes, trains a CNN + self-attention
frame classifier with its own reverse-mode autodiff engine, and evaluates
with ROC/AUC/EER plus attention-map introspection.
"""

from .checkpoint import load_checkpoint, save_checkpoint
from .dsp import FrontendConfig, MelFrames, Waveform, waveform_to_mel
from .model import AttentionMap, ModelConfig, VadModel, predict_sequence, smooth
from .tensor import GradTape, Tensor, backward, no_grad
from .training import TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "AttentionMap",
    "FrontendConfig",
    "GradTape",
    "MelFrames",
    "ModelConfig",
    "TrainConfig",
    "Tensor",
    "VadModel",
    "Waveform",
    "backward",
    "load_checkpoint",
    "no_grad",
    "predict_sequence",
    "save_checkpoint",
    "smooth",
    "train",
    "waveform_to_mel",
    "__version__",
]
