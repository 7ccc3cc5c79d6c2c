"""Concept-matrix invariant learning for cross-domain activity recognition."""

from .concept import MeanBank, RegularizerKind, build_concept_matrix, cms_loss, update_mean_bank
from .data import Protocol, SynthSpec, WindowedDataset, make_split, synth_domain_shift
from .evaluation import evaluate
from .model import ModelConfig, ModelParams, build_model, forward
from .train import TrainConfig, train_loop

__version__ = "0.1.0"

__all__ = [
    "MeanBank",
    "ModelConfig",
    "ModelParams",
    "Protocol",
    "RegularizerKind",
    "SynthSpec",
    "TrainConfig",
    "WindowedDataset",
    "build_concept_matrix",
    "build_model",
    "cms_loss",
    "evaluate",
    "forward",
    "make_split",
    "synth_domain_shift",
    "train_loop",
    "update_mean_bank",
]
