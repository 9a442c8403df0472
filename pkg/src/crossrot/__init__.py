"""crossrot: relative 3D rotation estimation with masked transformer cross-attention."""

__version__ = "0.1.0"
