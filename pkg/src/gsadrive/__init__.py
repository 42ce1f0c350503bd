"""Global soft attention for explainable driving decisions, built on a small numpy autodiff."""

from .autodiff import Param, Tape, grad_check
from .data import DatasetManifest, Split, read_dataset, synthesize
from .metrics import EvalReport, evaluate, f1_all, mf1
from .network import Model, ModelConfig, multitask_loss, select_topk
from .train import TrainConfig, load_checkpoint, save_checkpoint, train_loop

__version__ = "0.1.0"

__all__ = [
    "DatasetManifest",
    "EvalReport",
    "Model",
    "ModelConfig",
    "Param",
    "Split",
    "Tape",
    "TrainConfig",
    "evaluate",
    "f1_all",
    "grad_check",
    "load_checkpoint",
    "mf1",
    "multitask_loss",
    "read_dataset",
    "save_checkpoint",
    "select_topk",
    "synthesize",
    "train_loop",
]
