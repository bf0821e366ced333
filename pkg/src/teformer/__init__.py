"""Spiking transformer with temporal enhanced attention and a temporal MLP."""

from .model import ABLATIONS, Model, ModelConfig, build_model, configure_ablation
from .training import TrainConfig, evaluate, load_checkpoint, save_checkpoint, train

__all__ = ["ABLATIONS", "Model", "ModelConfig", "TrainConfig", "build_model", "configure_ablation", "evaluate",
           "load_checkpoint", "save_checkpoint", "train"]
__version__ = "0.1.0"
