"""Minimal deterministic CNN engine: layers, Adam, checkpoints, gradient checks."""
from .adam import AdamHyper, AdamState, adam_step
from .arch import (
    STUDENT, TEACHER_MEMBER, ArchDescriptor, ArchError, Conv2D, Dense, Flatten,
    MaxPool2x2, ReLU, param_count, resolve_arch,
)
from .checkpoint import Checkpoint, CheckpointError
from .gradcheck import GradCheckReport, grad_check
from .layers import ShapeError, softmax_cross_entropy
from .network import Network, forward, init_params
from .training import EPOCHS, FitResult, fit

__all__ = [
    "AdamHyper", "AdamState", "adam_step", "STUDENT", "TEACHER_MEMBER", "ArchDescriptor",
    "ArchError", "Conv2D", "Dense", "Flatten", "MaxPool2x2", "ReLU", "param_count",
    "resolve_arch", "Checkpoint", "CheckpointError", "GradCheckReport", "grad_check",
    "ShapeError", "softmax_cross_entropy", "Network", "forward", "init_params",
    "EPOCHS", "FitResult", "fit",
]
