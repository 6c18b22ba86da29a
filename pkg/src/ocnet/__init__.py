"""One-class image classification with Gaussian pseudo-negatives.

A small, self-contained stack: tape-based reverse-mode differentiation
over numpy arrays, the conv/deconv layers it needs, a three-network
model (feature extractor, pseudo-negative classifier, reconstruction
decoder), Adam, a seeded synthetic identity benchmark, and an AUROC
evaluation protocol with ablation baselines.
"""

__version__ = "0.1.0"

from .model import ArchConfig, ModelParams, init_model, load_checkpoint, save_checkpoint
from .tensor import Tape, Tensor, backward, gradient_check
from .train import TrainSettings, train_model
from .evaluate import auroc, run_ablation_suite, run_protocol

__all__ = [
    "ArchConfig",
    "ModelParams",
    "Tape",
    "Tensor",
    "TrainSettings",
    "auroc",
    "backward",
    "gradient_check",
    "init_model",
    "load_checkpoint",
    "run_ablation_suite",
    "run_protocol",
    "save_checkpoint",
    "train_model",
]
