"""The relative-rotation network.

Two images share one convolutional backbone; their feature maps are
row-vectorized into a single token sequence, mixed by a transformer encoder
whose additive mask zeroes all same-image attention, and the first half of
the mixed sequence is regressed down to a rotation encoding.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..autodiff import ShapeMismatch, Tensor, no_grad, ops
from ..geometry import UnitQuaternion
from .config import ModelConfig
from .layers import (
    BackboneBlock,
    BatchNorm2d,
    Conv2d,
    EncoderLayer,
    Linear,
    Module,
    RegressorBlock,
)


@dataclass
class AttentionRecord:
    """Post-softmax attention, one (heads, 2K^2, 2K^2) array per layer/batch."""

    layers: list[np.ndarray]

    def layer(self, i: int) -> np.ndarray:
        return self.layers[i]


def build_mask(tokens_per_image: int, dtype=np.float32) -> np.ndarray:
    """Additive attention mask blocking same-image pairs.

    The two diagonal blocks (image1 -> image1 and image2 -> image2) are -inf,
    the off-diagonal cross-image blocks are 0.
    """
    if tokens_per_image < 1:
        raise ValueError(f"tokens_per_image must be >= 1, got {tokens_per_image}")
    n = tokens_per_image
    mask = np.zeros((2 * n, 2 * n), dtype=dtype)
    mask[:n, :n] = -np.inf
    mask[n:, n:] = -np.inf
    return mask


class Backbone(Module):
    """7x7 stride-2 stem, residual blocks (first downsamples), two 3x3 convs.

    Maps (B, 3, S, S) to (B, c, S/4, S/4). Channel widths scale with c:
    the stem runs at c/2, the penultimate conv widens to 4c and the final
    conv lands on the token width c.
    """

    def __init__(self, rng, cfg: ModelConfig):
        super().__init__()
        dt = cfg.np_dtype
        c = cfg.channels
        self.stem = Conv2d(rng, 3, c // 2, 7, stride=2, padding=3, dtype=dt)
        self.stem_bn = BatchNorm2d(c // 2, dt)
        self.blocks = _ModuleList(
            [BackboneBlock(rng, c // 2, stride=2 if i == 0 else 1, dtype=dt)
             for i in range(cfg.blocks)])
        self.conv_a = Conv2d(rng, c // 2, 4 * c, 3, stride=1, padding=1, dtype=dt)
        self.bn_a = BatchNorm2d(4 * c, dt)
        self.conv_b = Conv2d(rng, 4 * c, c, 3, stride=1, padding=1, dtype=dt)
        self.bn_b = BatchNorm2d(c, dt)

    def forward(self, x: Tensor) -> Tensor:
        x = ops.relu(self.stem_bn.forward(self.stem.forward(x)))
        for block in self.blocks.items:
            x = block.forward(x)
        x = ops.relu(self.bn_a.forward(self.conv_a.forward(x)))
        return ops.relu(self.bn_b.forward(self.conv_b.forward(x)))


class _ModuleList(Module):
    def __init__(self, items: list[Module]):
        super().__init__()
        self.items = items
        for i, m in enumerate(items):
            self._modules[str(i)] = m


class Regressor(Module):
    """Table-style two-block bottleneck head over the K x K feature map."""

    def __init__(self, rng, cfg: ModelConfig):
        super().__init__()
        dt = cfg.np_dtype
        c, k = cfg.channels, cfg.feature_side
        self.block1 = RegressorBlock(rng, c, c, 4 * c, dtype=dt)
        self.block2 = RegressorBlock(rng, 4 * c, c // 2, 2 * c, dtype=dt)
        flat = 2 * c * (k // 16) ** 2
        self.fc = Linear(rng, flat, cfg.head_width, dt, weight_std=0.01)
        if cfg.rotation_mode == "quaternion-regression":
            # start at the identity rotation so early predictions are sane
            self.fc.bias.data[0] = 1.0
        self.flat = flat

    def forward(self, fmap: Tensor) -> Tensor:
        x = self.block1.forward(fmap)
        x = self.block2.forward(x)
        b = x.shape[0]
        return self.fc.forward(ops.reshape(x, (b, self.flat)))


class RotationNet(Module):
    """Full pipeline from an image pair to a raw rotation encoding."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        super().__init__()
        cfg.validate()
        rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(17,)))
        dt = cfg.np_dtype
        self.cfg = cfg
        self.backbone = Backbone(rng, cfg)
        if cfg.positional_embedding:
            self.pos_embed = Tensor(
                rng.normal(0.0, 0.02, (2 * cfg.tokens_per_image, cfg.channels)).astype(dt),
                requires_grad=True)
        else:
            self.pos_embed = None
        self.encoder = _ModuleList(
            [EncoderLayer(rng, cfg.channels, cfg.heads, cfg.ff_width, cfg.dropout, dt)
             for _ in range(cfg.encoder_layers)])
        self.regressor = Regressor(rng, cfg)
        self.mask = build_mask(cfg.tokens_per_image, dtype=dt)

    # -- stages ------------------------------------------------------------

    def _check_images(self, x: Tensor) -> None:
        s = self.cfg.image_size
        if x.ndim != 4 or x.shape[1] != 3 or x.shape[2] != s or x.shape[3] != s:
            raise ShapeMismatch(
                f"expected image batch (B, 3, {s}, {s}), got {x.shape}")

    def backbone_forward(self, images: Tensor) -> Tensor:
        self._check_images(images)
        return self.backbone.forward(images)

    def tokenize(self, f1: Tensor, f2: Tensor) -> Tensor:
        """Row-vectorize both feature maps, stack image1 rows then image2 rows.

        Token i < K^2 is f1's spatial position i in row-major order; the
        learned positional embedding (when enabled) is added to the stack.
        """
        b, c, k, _ = f1.shape
        if f1.shape != f2.shape:
            raise ShapeMismatch(f"feature maps differ: {f1.shape} vs {f2.shape}")

        def flatten(f):
            return ops.transpose(ops.reshape(f, (b, c, k * k)), (0, 2, 1))

        tokens = ops.concat([flatten(f1), flatten(f2)], axis=1)
        if self.pos_embed is not None:
            tokens = ops.add(tokens, ops.reshape(self.pos_embed,
                                                 (1,) + self.pos_embed.shape))
        return tokens

    def encoder_forward(self, tokens: Tensor,
                        rng: np.random.Generator | None = None,
                        capture_attention: bool = False
                        ) -> tuple[Tensor, AttentionRecord | None]:
        records = [] if capture_attention else None
        x = tokens
        for layer in self.encoder.items:
            x, probs = layer.forward(x, self.mask, rng)
            if capture_attention:
                records.append(np.array(probs.data, copy=True))
        return x, (AttentionRecord(records) if capture_attention else None)

    def regress(self, mixed: Tensor) -> Tensor:
        """Reshape the first-half tokens back to c x K x K and run the head."""
        b = mixed.shape[0]
        c, k = self.cfg.channels, self.cfg.feature_side
        first = ops.slice_axis(mixed, 1, 0, self.cfg.tokens_per_image)
        fmap = ops.reshape(ops.transpose(first, (0, 2, 1)), (b, c, k, k))
        return self.regressor.forward(fmap)

    # -- end to end ----------------------------------------------------------

    def forward_pair(self, img1: Tensor, img2: Tensor,
                     rng: np.random.Generator | None = None,
                     capture_attention: bool = False
                     ) -> tuple[Tensor, AttentionRecord | None]:
        f1 = self.backbone_forward(img1)
        f2 = self.backbone_forward(img2)
        tokens = self.tokenize(f1, f2)
        mixed, record = self.encoder_forward(tokens, rng, capture_attention)
        return self.regress(mixed), record

    def predict(self, img1: np.ndarray, img2: np.ndarray,
                capture_attention: bool = False
                ) -> tuple[UnitQuaternion, AttentionRecord | None]:
        """Deterministic eval-mode quaternion prediction for one image pair.

        Accepts (S, S, 3) images with values in [0, 1]; returns the
        normalized, canonicalized quaternion.
        """
        if self.cfg.rotation_mode != "quaternion-regression":
            raise ValueError(
                f"predict() needs quaternion-regression mode, model is "
                f"{self.cfg.rotation_mode!r}")
        was_training = self.training
        self.eval()
        try:
            with no_grad():
                t1 = Tensor(_to_chw_batch(img1, self.cfg))
                t2 = Tensor(_to_chw_batch(img2, self.cfg))
                raw, record = self.forward_pair(t1, t2,
                                                capture_attention=capture_attention)
        finally:
            self.train(was_training)
        q = UnitQuaternion.from_array(
            np.asarray(raw.data[0], dtype=np.float64), normalize=True)
        return q.canonicalized(), record


def _to_chw_batch(img: np.ndarray, cfg: ModelConfig) -> np.ndarray:
    s = cfg.image_size
    arr = np.asarray(img, dtype=cfg.np_dtype)
    if arr.shape != (s, s, 3):
        raise ShapeMismatch(f"expected one (S, S, 3) image with S={s}, got {arr.shape}")
    return arr.transpose(2, 0, 1)[None]
