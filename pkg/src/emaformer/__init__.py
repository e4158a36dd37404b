"""Transformer models for acoustic- and phoneme-to-articulatory estimation on a numpy autodiff core."""

from .models import AAIModel, ModelConfig, PTAModel, build_model, load_model, save_model
from .trainkit import ExperimentPlan, TrainConfig, run_experiment

__version__ = "0.1.0"

__all__ = ["AAIModel", "ModelConfig", "PTAModel", "build_model", "load_model", "save_model",
           "ExperimentPlan", "TrainConfig", "run_experiment"]
