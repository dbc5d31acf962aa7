"""Dual-branch adversarial disentanglement of gesture-pattern and subject
features for cross-subject EMG recognition, on a small numpy autodiff engine."""

from .data import Recording, SynthConfig, WindowedDataset, build_fold, load_manifest, make_folds, synthesize
from .evaluation import evaluate
from .metrics import EvalReport
from .network import DualBranchModel, Variant, build_model, forward, load_checkpoint, save_checkpoint
from .training import TrainConfig, fit, train

__version__ = "0.1.0"

__all__ = [
    "DualBranchModel",
    "EvalReport",
    "Recording",
    "SynthConfig",
    "TrainConfig",
    "Variant",
    "WindowedDataset",
    "build_fold",
    "build_model",
    "evaluate",
    "fit",
    "forward",
    "load_checkpoint",
    "load_manifest",
    "make_folds",
    "save_checkpoint",
    "synthesize",
    "train",
]
