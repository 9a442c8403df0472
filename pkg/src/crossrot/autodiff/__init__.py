"""Minimal numpy-backed reverse-mode autodiff used by the rotation network."""

from . import ops
from .optim import Adam, AdamState, adam_step
from .tensor import GraphCycle, NotScalar, ShapeMismatch, Tensor, backward, grad_enabled, no_grad

__all__ = [
    "Adam",
    "AdamState",
    "GraphCycle",
    "NotScalar",
    "ShapeMismatch",
    "Tensor",
    "adam_step",
    "backward",
    "grad_enabled",
    "no_grad",
    "ops",
]
