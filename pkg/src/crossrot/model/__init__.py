"""Rotation-regression network: backbone, masked cross-attention, losses."""

from .config import HEAD_WIDTHS, ROTATION_MODES, ModelConfig, toy_config
from .losses import DegenerateQuaternion, loss_euler, loss_quat, yaw_pitch_bins
from .network import AttentionRecord, RotationNet, build_mask

__all__ = [
    "AttentionRecord",
    "DegenerateQuaternion",
    "HEAD_WIDTHS",
    "ModelConfig",
    "ROTATION_MODES",
    "RotationNet",
    "build_mask",
    "loss_euler",
    "loss_quat",
    "toy_config",
    "yaw_pitch_bins",
]
