"""Structured ReLU networks for interaction models: ANOVA projection, sparse
recovery, synthetic benchmarks and packing-based lower-bound checks."""

from .model import Bi, ComponentKey, StructuredModel, Uni, all_keys, anova_project, load_model, save_model
from .pipeline import run_pipeline
from .synthdata import DgpConfig, make_dataset, make_truth
from .train import OptConfig, fit_erm, fit_penalized, plan_highdim, plan_lowdim

__version__ = "0.1.0"

__all__ = [
    "Bi",
    "ComponentKey",
    "DgpConfig",
    "OptConfig",
    "StructuredModel",
    "Uni",
    "all_keys",
    "anova_project",
    "fit_erm",
    "fit_penalized",
    "load_model",
    "make_dataset",
    "make_truth",
    "plan_highdim",
    "plan_lowdim",
    "run_pipeline",
    "save_model",
]
