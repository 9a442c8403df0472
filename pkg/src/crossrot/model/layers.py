"""Parameterized building blocks on top of the autodiff ops.

Module keeps a registry of parameters (Tensors), buffers (plain arrays,
e.g. batch-norm running stats) and child modules, and exposes them under
dotted names for the optimizer and checkpointing. Initialization draws from
an explicit numpy Generator so construction is reproducible.
"""

from __future__ import annotations

import math

import numpy as np

from ..autodiff import Tensor, ops


class Module:
    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_buffers", {})
        object.__setattr__(self, "_modules", {})
        object.__setattr__(self, "training", True)

    def __setattr__(self, name, value):
        if isinstance(value, Module):
            self._modules[name] = value
        elif isinstance(value, Tensor) and value.requires_grad:
            self._params[name] = value
        object.__setattr__(self, name, value)

    def register_buffer(self, name: str, array: np.ndarray) -> np.ndarray:
        self._buffers[name] = array
        object.__setattr__(self, name, array)
        return array

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        out = {prefix + k: v for k, v in self._params.items()}
        for name, mod in self._modules.items():
            out.update(mod.named_parameters(f"{prefix}{name}."))
        return out

    def named_buffers(self, prefix: str = "") -> dict[str, np.ndarray]:
        out = {prefix + k: v for k, v in self._buffers.items()}
        for name, mod in self._modules.items():
            out.update(mod.named_buffers(f"{prefix}{name}."))
        return out

    def train(self, flag: bool = True) -> "Module":
        object.__setattr__(self, "training", flag)
        for mod in self._modules.values():
            mod.train(flag)
        return self

    def eval(self) -> "Module":
        return self.train(False)


class Conv2d(Module):
    def __init__(self, rng, c_in: int, c_out: int, k: int,
                 stride: int = 1, padding: int = 0, dtype=np.float32):
        super().__init__()
        std = math.sqrt(2.0 / (c_in * k * k))
        self.weight = Tensor(rng.normal(0.0, std, (c_out, c_in, k, k)).astype(dtype),
                             requires_grad=True)
        self.bias = Tensor(np.zeros(c_out, dtype=dtype), requires_grad=True)
        self.stride = stride
        self.padding = padding

    def forward(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.weight, self.bias,
                          stride=self.stride, padding=self.padding)


class Linear(Module):
    def __init__(self, rng, n_in: int, n_out: int, dtype=np.float32,
                 weight_std: float | None = None):
        super().__init__()
        std = math.sqrt(1.0 / n_in) if weight_std is None else weight_std
        self.weight = Tensor(rng.normal(0.0, std, (n_in, n_out)).astype(dtype),
                             requires_grad=True)
        self.bias = Tensor(np.zeros(n_out, dtype=dtype), requires_grad=True)

    def forward(self, x: Tensor) -> Tensor:
        return ops.linear(x, self.weight, self.bias)


class BatchNorm2d(Module):
    def __init__(self, c: int, dtype=np.float32, momentum: float = 0.1, eps: float = 1e-5):
        super().__init__()
        self.gamma = Tensor(np.ones(c, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(c, dtype=dtype), requires_grad=True)
        self.register_buffer("running_mean", np.zeros(c, dtype=dtype))
        self.register_buffer("running_var", np.ones(c, dtype=dtype))
        self.momentum = momentum
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return ops.batch_norm(x, self.gamma, self.beta,
                              self.running_mean, self.running_var,
                              train=self.training, momentum=self.momentum, eps=self.eps)


class LayerNorm(Module):
    def __init__(self, c: int, dtype=np.float32, eps: float = 1e-5):
        super().__init__()
        self.gamma = Tensor(np.ones(c, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(c, dtype=dtype), requires_grad=True)
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return ops.layer_norm(x, self.gamma, self.beta, eps=self.eps)


class MultiHeadAttention(Module):
    """Scaled dot-product attention over a full token sequence.

    forward returns the mixed tokens plus the post-softmax attention
    probabilities (batch, heads, T, T), captured before dropout.
    """

    def __init__(self, rng, width: int, heads: int, dropout: float, dtype=np.float32):
        super().__init__()
        self.wq = Linear(rng, width, width, dtype)
        self.wk = Linear(rng, width, width, dtype)
        self.wv = Linear(rng, width, width, dtype)
        self.wo = Linear(rng, width, width, dtype)
        self.heads = heads
        self.head_dim = width // heads
        self.dropout = dropout

    def forward(self, x: Tensor, mask: np.ndarray | None,
                rng: np.random.Generator | None = None) -> tuple[Tensor, Tensor]:
        b, t, c = x.shape
        h, hd = self.heads, self.head_dim

        def split(z):
            return ops.transpose(ops.reshape(z, (b, t, h, hd)), (0, 2, 1, 3))

        q = split(self.wq.forward(x))
        k = split(self.wk.forward(x))
        v = split(self.wv.forward(x))
        scores = ops.scale(ops.matmul(q, ops.transpose(k, (0, 1, 3, 2))),
                           1.0 / math.sqrt(hd))
        probs = ops.masked_softmax(scores, mask)
        mixed = ops.dropout(probs, self.dropout, self.training, rng)
        out = ops.matmul(mixed, v)
        out = ops.reshape(ops.transpose(out, (0, 2, 1, 3)), (b, t, c))
        return self.wo.forward(out), probs


class EncoderLayer(Module):
    """Post-norm transformer encoder layer with ReLU feedforward."""

    def __init__(self, rng, width: int, heads: int, ff_width: int,
                 dropout: float, dtype=np.float32):
        super().__init__()
        self.attn = MultiHeadAttention(rng, width, heads, dropout, dtype)
        self.ln1 = LayerNorm(width, dtype)
        self.ff1 = Linear(rng, width, ff_width, dtype,
                          weight_std=math.sqrt(2.0 / width))
        self.ff2 = Linear(rng, ff_width, width, dtype)
        self.ln2 = LayerNorm(width, dtype)
        self.dropout = dropout

    def forward(self, x: Tensor, mask: np.ndarray | None,
                rng: np.random.Generator | None = None) -> tuple[Tensor, Tensor]:
        mixed, probs = self.attn.forward(x, mask, rng)
        mixed = ops.dropout(mixed, self.dropout, self.training, rng)
        x = self.ln1.forward(ops.add(x, mixed))
        ff = self.ff2.forward(ops.relu(self.ff1.forward(x)))
        ff = ops.dropout(ff, self.dropout, self.training, rng)
        return self.ln2.forward(ops.add(x, ff)), probs


class BackboneBlock(Module):
    """Two 3x3 convs with batch norm; optional stride-2 projection skip."""

    def __init__(self, rng, c: int, stride: int, dtype=np.float32):
        super().__init__()
        self.conv1 = Conv2d(rng, c, c, 3, stride=stride, padding=1, dtype=dtype)
        self.bn1 = BatchNorm2d(c, dtype)
        self.conv2 = Conv2d(rng, c, c, 3, stride=1, padding=1, dtype=dtype)
        self.bn2 = BatchNorm2d(c, dtype)
        self.stride = stride
        if stride != 1:
            self.proj = Conv2d(rng, c, c, 1, stride=stride, padding=0, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        y = ops.relu(self.bn1.forward(self.conv1.forward(x)))
        y = self.bn2.forward(self.conv2.forward(y))
        skip = self.proj.forward(x) if self.stride != 1 else x
        return ops.relu(ops.add(y, skip))


class RegressorBlock(Module):
    """Pre-activation bottleneck: 1x1 -> 3x3 stride 2 -> 1x1, then 2x2 pool.

    The skip path is a 1x1 stride-2 projection so shapes meet at the sum;
    pooling happens after the residual addition.
    """

    def __init__(self, rng, c_in: int, c_mid: int, c_out: int, dtype=np.float32):
        super().__init__()
        self.bn1 = BatchNorm2d(c_in, dtype)
        self.conv1 = Conv2d(rng, c_in, c_mid, 1, stride=1, padding=0, dtype=dtype)
        self.bn2 = BatchNorm2d(c_mid, dtype)
        self.conv2 = Conv2d(rng, c_mid, c_mid, 3, stride=2, padding=1, dtype=dtype)
        self.bn3 = BatchNorm2d(c_mid, dtype)
        self.conv3 = Conv2d(rng, c_mid, c_out, 1, stride=1, padding=0, dtype=dtype)
        self.proj = Conv2d(rng, c_in, c_out, 1, stride=2, padding=0, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        y = self.conv1.forward(ops.relu(self.bn1.forward(x)))
        y = self.conv2.forward(ops.relu(self.bn2.forward(y)))
        y = self.conv3.forward(ops.relu(self.bn3.forward(y)))
        out = ops.add(y, self.proj.forward(x))
        return ops.avg_pool2d(out, 2)
