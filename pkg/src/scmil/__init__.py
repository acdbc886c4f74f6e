"""Sparse-coding multiple instance learning with an unrolled ISTA module."""

__version__ = "0.1.0"

from .data import Dataset, SynthConfig, accuracy, auc, kfold_split, load_bags_csv, synth_generate
from .linalg import overcomplete_dct, soft_threshold, softplus, spectral_norm
from .mil import Bag, MilModel, backward, build_model, forward
from .sparse_coding import (ScModuleParams, init_sc_module, ista_solve, lista_backward, lista_forward,
                            sc_objective)
from .training import TrainConfig, fit, grad_check

__all__ = [
    "Bag", "Dataset", "MilModel", "ScModuleParams", "SynthConfig", "TrainConfig",
    "accuracy", "auc", "backward", "build_model", "fit", "forward", "grad_check",
    "init_sc_module", "ista_solve", "kfold_split", "lista_backward", "lista_forward",
    "load_bags_csv", "overcomplete_dct", "sc_objective", "soft_threshold", "softplus",
    "spectral_norm", "synth_generate",
]
