"""Gradient inversion attacks against federated learning updates."""

from .attack import AttackConfig, AttackReport, LabelHypothesis, run_attack
from .autodiff import Tensor, backward, grad, no_grad
from .fl import GradientCapture, client_step
from .models import ModelGraph, NCBGraph, build_linear_model, build_micro_cnn, build_ncb

__version__ = "0.1.0"

__all__ = [
    "AttackConfig", "AttackReport", "LabelHypothesis", "run_attack",
    "Tensor", "backward", "grad", "no_grad",
    "GradientCapture", "client_step",
    "ModelGraph", "NCBGraph", "build_linear_model", "build_micro_cnn", "build_ncb",
]
