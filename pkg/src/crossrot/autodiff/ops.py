"""Differentiable ops over crossrot.autodiff.tensor.Tensor.

Every op computes its forward pass on raw numpy arrays and, when grad
recording is active, attaches a closure that maps the output adjoint to
adjoints of the inputs. Shapes are checked strictly; the few ops that
broadcast (mul, div) only permit size-1 dims and reduce the gradient
back over them.

Masks, dropout RNGs and scalar factors are constants, not Tensors, so no
gradient flows into them.
"""

from __future__ import annotations

import numpy as np

from .tensor import ShapeMismatch, Tensor, grad_enabled


def _rec(*ts: Tensor) -> bool:
    return grad_enabled() and any(t.requires_grad for t in ts)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum g down to `shape` (inverse of numpy broadcasting)."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _broadcastable(a: tuple[int, ...], b: tuple[int, ...]) -> bool:
    for x, y in zip(a[::-1], b[::-1]):
        if x != y and x != 1 and y != 1:
            return False
    return True


# -- elementwise ----------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; size-1 dims broadcast."""
    if not _broadcastable(a.shape, b.shape):
        raise ShapeMismatch(f"add: {a.shape} vs {b.shape}")
    out = a.data + b.data
    if _rec(a, b):
        def bw(g):
            return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)
        return Tensor.from_op(out, (a, b), bw)
    return Tensor(out)


def sub(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise difference; size-1 dims broadcast."""
    if not _broadcastable(a.shape, b.shape):
        raise ShapeMismatch(f"sub: {a.shape} vs {b.shape}")
    out = a.data - b.data
    if _rec(a, b):
        def bw(g):
            return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)
        return Tensor.from_op(out, (a, b), bw)
    return Tensor(out)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product; size-1 dims broadcast."""
    if not _broadcastable(a.shape, b.shape):
        raise ShapeMismatch(f"mul: {a.shape} vs {b.shape}")
    out = a.data * b.data
    if _rec(a, b):
        def bw(g):
            return (_unbroadcast(g * b.data, a.shape),
                    _unbroadcast(g * a.data, b.shape))
        return Tensor.from_op(out, (a, b), bw)
    return Tensor(out)


def div(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise quotient; size-1 dims in either operand broadcast."""
    if not _broadcastable(a.shape, b.shape):
        raise ShapeMismatch(f"div: {a.shape} vs {b.shape}")
    out = a.data / b.data
    if _rec(a, b):
        def bw(g):
            ga = _unbroadcast(g / b.data, a.shape)
            gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape)
            return ga, gb
        return Tensor.from_op(out, (a, b), bw)
    return Tensor(out)


def scale(x: Tensor, s: float) -> Tensor:
    out = x.data * s
    if _rec(x):
        return Tensor.from_op(out, (x,), lambda g: (g * s,))
    return Tensor(out)


def add_const(x: Tensor, c) -> Tensor:
    out = x.data + c
    if _rec(x):
        return Tensor.from_op(out, (x,), lambda g: (g,))
    return Tensor(out)


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0.0)
    if _rec(x):
        mask = x.data > 0
        return Tensor.from_op(out, (x,), lambda g: (g * mask,))
    return Tensor(out)


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    if _rec(x):
        return Tensor.from_op(out, (x,), lambda g: (g * out,))
    return Tensor(out)


def log(x: Tensor) -> Tensor:
    out = np.log(x.data)
    if _rec(x):
        return Tensor.from_op(out, (x,), lambda g: (g / x.data,))
    return Tensor(out)


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)
    if _rec(x):
        return Tensor.from_op(out, (x,), lambda g: (g * 0.5 / out,))
    return Tensor(out)


# -- shape manipulation -----------------------------------------------------------


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    out = x.data.reshape(shape)
    if _rec(x):
        orig = x.shape
        return Tensor.from_op(out, (x,), lambda g: (g.reshape(orig),))
    return Tensor(out)


def transpose(x: Tensor, axes: tuple[int, ...]) -> Tensor:
    out = x.data.transpose(axes)
    if _rec(x):
        inv = tuple(np.argsort(axes))
        return Tensor.from_op(out, (x,), lambda g: (g.transpose(inv),))
    return Tensor(out)


def concat(xs: list[Tensor], axis: int) -> Tensor:
    out = np.concatenate([t.data for t in xs], axis=axis)
    if _rec(*xs):
        sizes = [t.shape[axis] for t in xs]
        splits = np.cumsum(sizes)[:-1]

        def bw(g):
            return tuple(np.split(g, splits, axis=axis))
        return Tensor.from_op(out, tuple(xs), bw)
    return Tensor(out)


def slice_axis(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    """Contiguous slice [start:stop) along one axis; backward pads zeros."""
    idx = [slice(None)] * x.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)
    out = x.data[idx]
    if _rec(x):
        shape = x.shape

        def bw(g):
            full = np.zeros(shape, dtype=g.dtype)
            full[idx] = g
            return (full,)
        return Tensor.from_op(out, (x,), bw)
    return Tensor(out)


# -- reductions --------------------------------------------------------------------


def _restore_dims(g: np.ndarray, shape: tuple[int, ...], axis, keepdims: bool) -> np.ndarray:
    if not keepdims:
        if axis is None:
            g = g.reshape((1,) * len(shape))
        else:
            axes = (axis,) if isinstance(axis, int) else tuple(axis)
            axes = tuple(a % len(shape) for a in axes)
            for a in sorted(axes):
                g = np.expand_dims(g, a)
    return np.broadcast_to(g, shape)


def reduce_sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = x.data.sum(axis=axis, keepdims=keepdims)
    if _rec(x):
        shape = x.shape
        return Tensor.from_op(np.asarray(out), (x,),
                              lambda g: (_restore_dims(g, shape, axis, keepdims),))
    return Tensor(np.asarray(out))


def reduce_mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = x.data.mean(axis=axis, keepdims=keepdims)
    if _rec(x):
        shape = x.shape
        count = x.size if axis is None else np.prod(
            [shape[a % len(shape)] for a in ((axis,) if isinstance(axis, int) else axis)])

        def bw(g):
            return (_restore_dims(g, shape, axis, keepdims) / count,)
        return Tensor.from_op(np.asarray(out), (x,), bw)
    return Tensor(np.asarray(out))


# -- linear algebra ------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; leading batch dims must match exactly."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise ShapeMismatch(f"matmul: {a.shape} vs {b.shape}")
    out = np.matmul(a.data, b.data)
    if _rec(a, b):
        def bw(g):
            ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
            return ga, gb
        return Tensor.from_op(out, (a, b), bw)
    return Tensor(out)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """y = x @ w (+ b). x: (..., In), w: (In, Out), b: (Out,)."""
    if x.shape[-1] != w.shape[0]:
        raise ShapeMismatch(f"linear: input {x.shape} vs weight {w.shape}")
    if b is not None and b.shape != (w.shape[1],):
        raise ShapeMismatch(f"linear: bias {b.shape} vs weight {w.shape}")
    out = x.data @ w.data
    if b is not None:
        out = out + b.data
    parents = (x, w) if b is None else (x, w, b)
    if _rec(*parents):
        n_in, n_out = w.shape

        def bw(g):
            gx = g @ w.data.T
            gw = x.data.reshape(-1, n_in).T @ g.reshape(-1, n_out)
            if b is None:
                return gx, gw
            return gx, gw, g.reshape(-1, n_out).sum(axis=0)
        return Tensor.from_op(out, parents, bw)
    return Tensor(out)


# -- convolution and pooling -----------------------------------------------------------


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int):
    """(B, C, Hp, Wp) -> ((B, C*kh*kw, Hout*Wout) patch matrix, Hout, Wout)."""
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride, :, :]
    b, c, ho, wo = win.shape[:4]
    return win.transpose(0, 1, 4, 5, 2, 3).reshape(b, c * kh * kw, ho * wo), ho, wo


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation. x: (B, Cin, H, W), w: (Cout, Cin, kh, kw)."""
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeMismatch(f"conv2d: input {x.shape} vs kernel {w.shape}")
    bsz, cin, h, wd = x.shape
    cout, _, kh, kw = w.shape
    if b is not None and b.shape != (cout,):
        raise ShapeMismatch(f"conv2d: bias {b.shape} vs kernel {w.shape}")
    if h + 2 * padding < kh or wd + 2 * padding < kw:
        raise ShapeMismatch(f"conv2d: input {x.shape} smaller than kernel {w.shape} with padding {padding}")

    def padded(arr):
        if padding == 0:
            return arr
        return np.pad(arr, ((0, 0), (0, 0), (padding, padding), (padding, padding)))

    cols, ho, wo = _im2col(padded(x.data), kh, kw, stride)
    wmat = w.data.reshape(cout, -1)
    out = np.matmul(wmat[None], cols).reshape(bsz, cout, ho, wo)
    if b is not None:
        out = out + b.data.reshape(1, cout, 1, 1)
    parents = (x, w) if b is None else (x, w, b)
    if _rec(*parents):
        def bw(g):
            gflat = g.reshape(bsz, cout, ho * wo)
            # weight grad: recompute the patch matrix rather than holding it
            cols2, _, _ = _im2col(padded(x.data), kh, kw, stride)
            gw = np.einsum("bol,bkl->ok", gflat, cols2).reshape(w.shape)
            # input grad: scatter column gradients back over the padded input
            colg = np.matmul(wmat.T[None], gflat).reshape(bsz, cin, kh, kw, ho, wo)
            hp, wp = h + 2 * padding, wd + 2 * padding
            gxp = np.zeros((bsz, cin, hp, wp), dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + stride * ho:stride,
                        j:j + stride * wo:stride] += colg[:, :, i, j]
            gx = gxp[:, :, padding:padding + h, padding:padding + wd] if padding else gxp
            if b is None:
                return gx, gw
            return gx, gw, g.sum(axis=(0, 2, 3))
        return Tensor.from_op(out, parents, bw)
    return Tensor(out)


def avg_pool2d(x: Tensor, k: int) -> Tensor:
    """Non-overlapping k x k mean pooling; spatial dims must divide by k."""
    bsz, c, h, w = x.shape
    if h % k or w % k:
        raise ShapeMismatch(f"avg_pool2d: {x.shape} not divisible by window {k}")
    out = x.data.reshape(bsz, c, h // k, k, w // k, k).mean(axis=(3, 5))
    if _rec(x):
        def bw(g):
            up = np.repeat(np.repeat(g, k, axis=2), k, axis=3)
            return (up / (k * k),)
        return Tensor.from_op(out, (x,), bw)
    return Tensor(out)


# -- normalization ---------------------------------------------------------------------


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor,
               running_mean: np.ndarray, running_var: np.ndarray,
               train: bool, momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    """Per-channel normalization over (batch, spatial) with affine rescale.

    x is (B, C, H, W) or (B, C); gamma/beta are (C,). In train mode batch
    statistics (biased variance) normalize and update the running buffers in
    place; in eval mode the running buffers normalize.
    """
    if x.ndim not in (2, 4):
        raise ShapeMismatch(f"batch_norm: expected 2-D or 4-D input, got {x.shape}")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeMismatch(f"batch_norm: affine {gamma.shape}/{beta.shape} vs channels {c}")
    axes = (0,) if x.ndim == 2 else (0, 2, 3)
    bshape = (1, c) if x.ndim == 2 else (1, c, 1, 1)
    gb = gamma.data.reshape(bshape)
    bb = beta.data.reshape(bshape)

    if train:
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        running_var *= 1.0 - momentum
        running_var += momentum * var
    else:
        mu = running_mean
        var = running_var
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu.reshape(bshape)) * inv.reshape(bshape)
    out = gb * xhat + bb
    if _rec(x, gamma, beta):
        n = x.size // c

        def bw(g):
            ggamma = (g * xhat).sum(axis=axes)
            gbeta = g.sum(axis=axes)
            gxhat = g * gb
            invb = inv.reshape(bshape)
            if not train:
                return gxhat * invb, ggamma, gbeta
            xmu = x.data - mu.reshape(bshape)
            gvar = (gxhat * xmu).sum(axis=axes).reshape(bshape) * (-0.5) * invb ** 3
            gmu = (-gxhat * invb).sum(axis=axes).reshape(bshape) \
                + gvar * (-2.0 / n) * xmu.sum(axis=axes).reshape(bshape)
            gx = gxhat * invb + gvar * 2.0 * xmu / n + gmu / n
            return gx, ggamma, gbeta
        return Tensor.from_op(out, (x, gamma, beta), bw)
    return Tensor(out)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then rescale."""
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeMismatch(f"layer_norm: affine {gamma.shape}/{beta.shape} vs width {c}")
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = gamma.data * xhat + beta.data
    if _rec(x, gamma, beta):
        def bw(g):
            red = tuple(range(g.ndim - 1))
            ggamma = (g * xhat).sum(axis=red)
            gbeta = g.sum(axis=red)
            gxhat = g * gamma.data
            gx = (gxhat
                  - gxhat.mean(axis=-1, keepdims=True)
                  - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True)) * inv
            return gx, ggamma, gbeta
        return Tensor.from_op(out, (x, gamma, beta), bw)
    return Tensor(out)


# -- attention / classification nonlinearities ----------------------------------------


def masked_softmax(x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis after adding `mask` to the logits.

    mask is a constant additive array broadcastable to x, normally 0 where
    attention is allowed and -inf where blocked. Blocked entries come out as
    exact 0 and receive no gradient. A fully blocked row yields all zeros.
    """
    z = x.data if mask is None else x.data + mask
    with np.errstate(invalid="ignore"):
        rowmax = np.max(z, axis=-1, keepdims=True)
        rowmax = np.where(np.isfinite(rowmax), rowmax, 0.0)
        e = np.exp(z - rowmax)
    denom = e.sum(axis=-1, keepdims=True)
    safe = np.where(denom > 0.0, denom, 1.0)
    out = e / safe
    if _rec(x):
        def bw(g):
            dot = (g * out).sum(axis=-1, keepdims=True)
            return (out * (g - dot),)
        return Tensor.from_op(out, (x,), bw)
    return Tensor(out)


def log_softmax(x: Tensor) -> Tensor:
    """Log of softmax over the last axis, computed stably."""
    z = x.data - np.max(x.data, axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    if _rec(x):
        sm = np.exp(out)

        def bw(g):
            return (g - sm * g.sum(axis=-1, keepdims=True),)
        return Tensor.from_op(out, (x,), bw)
    return Tensor(out)


def dropout(x: Tensor, p: float, train: bool,
            rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout: active units scale by 1/(1-p) so eval is identity."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {p}")
    if not train or p == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in train mode needs an explicit rng")
    keep = (rng.random(x.shape) >= p).astype(x.data.dtype) / (1.0 - p)
    out = x.data * keep
    if _rec(x):
        return Tensor.from_op(out, (x,), lambda g: (g * keep,))
    return Tensor(out)
