"""Model hyperparameter container and validation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

ROTATION_MODES = ("quaternion-regression", "euler-regression", "euler-classification")

HEAD_WIDTHS = {
    "quaternion-regression": 4,
    "euler-regression": 2,
    "euler-classification": 720,  # 360 yaw bins + 360 pitch bins
}


@dataclass
class ModelConfig:
    """Shape and training-surface hyperparameters of the rotation network.

    The backbone downsamples by 4, so the feature side is image_size // 4 and
    the encoder sees 2 * feature_side**2 tokens of width `channels`. Defaults
    follow the full-scale setting (128x128 inputs, 128-wide tokens, 2 encoder
    layers with 4 heads and a 768-wide feedforward).
    """

    image_size: int = 128
    channels: int = 128
    blocks: int = 3
    encoder_layers: int = 2
    heads: int = 4
    ff_width: int = 768
    dropout: float = 0.1
    dtype: str = "float32"
    rotation_mode: str = "quaternion-regression"
    positional_embedding: bool = True

    @property
    def feature_side(self) -> int:
        return self.image_size // 4

    @property
    def tokens_per_image(self) -> int:
        return self.feature_side ** 2

    @property
    def head_width(self) -> int:
        return HEAD_WIDTHS[self.rotation_mode]

    @property
    def np_dtype(self):
        return np.float32 if self.dtype == "float32" else np.float64

    def validate(self) -> None:
        if self.image_size <= 0 or self.image_size % 64:
            raise ValueError(
                f"image_size must be a positive multiple of 64 (the backbone "
                f"downsamples by 4 and the regressor by a further 16), got {self.image_size}")
        if self.channels < 2 or self.channels % 2:
            raise ValueError(f"channels must be even and >= 2, got {self.channels}")
        if self.channels % self.heads:
            raise ValueError(
                f"channels ({self.channels}) must divide evenly over heads ({self.heads})")
        if not 1 <= self.blocks <= 4:
            raise ValueError(f"blocks must lie in 1..4, got {self.blocks}")
        if self.encoder_layers < 1:
            raise ValueError(f"encoder_layers must be >= 1, got {self.encoder_layers}")
        if self.ff_width < 1:
            raise ValueError(f"ff_width must be >= 1, got {self.ff_width}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must lie in [0, 1), got {self.dropout}")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"dtype must be 'float32' or 'float64', got {self.dtype!r}")
        if self.rotation_mode not in ROTATION_MODES:
            raise ValueError(
                f"rotation_mode must be one of {ROTATION_MODES}, got {self.rotation_mode!r}")


def toy_config(**overrides) -> ModelConfig:
    """Small CPU-friendly configuration: 64x64 inputs, 512 tokens of width 32."""
    base = dict(image_size=64, channels=32, blocks=1, encoder_layers=1,
                heads=2, ff_width=192, dropout=0.0)
    base.update(overrides)
    cfg = ModelConfig(**base)
    cfg.validate()
    return cfg
