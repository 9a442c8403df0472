"""Rotation losses: quaternion L2 with sign disambiguation, Euler variants."""

from __future__ import annotations

import numpy as np

from ..autodiff import ShapeMismatch, Tensor, ops


class DegenerateQuaternion(ValueError):
    """Raw quaternion output collapsed to (near) zero norm."""


def _as_batch_gt(q_gt, batch: int) -> np.ndarray:
    """Ground truth as a (B, 4) canonical float array."""
    if hasattr(q_gt, "as_array"):
        arr = q_gt.canonicalized().as_array()[None]
    else:
        arr = np.asarray(q_gt, dtype=np.float64)
        if arr.ndim == 1:
            arr = arr[None]
    if arr.shape != (batch, 4):
        raise ShapeMismatch(f"ground truth {arr.shape} vs batch size {batch}")
    return arr


def loss_quat(q_raw: Tensor, q_gt) -> Tensor:
    """Mean L2 distance between unit quaternions, minimized over sign.

    The raw output is normalized inside the loss; because q and -q encode the
    same rotation, the distance is taken to the closer of +/- ground truth
    (the sign comes from the data, so it is constant under differentiation).
    Exact agreement yields exactly 0, where the norm has its one kink.
    """
    if q_raw.ndim == 1:
        q_raw = ops.reshape(q_raw, (1, 4))
    if q_raw.ndim != 2 or q_raw.shape[1] != 4:
        raise ShapeMismatch(f"expected raw quaternions (B, 4), got {q_raw.shape}")
    b = q_raw.shape[0]
    gt = _as_batch_gt(q_gt, b).astype(q_raw.data.dtype)

    sq_norm = ops.reduce_sum(ops.mul(q_raw, q_raw), axis=1, keepdims=True)
    norms = np.sqrt(sq_norm.data[:, 0])
    if np.any(norms <= 1e-8) or not np.isfinite(norms).all():
        raise DegenerateQuaternion(
            f"raw quaternion norm collapsed (min {norms.min():.3e})")
    unit = ops.div(q_raw, ops.sqrt(sq_norm))
    sign = np.sign(np.sum(unit.data * gt, axis=1, keepdims=True))
    sign[sign == 0.0] = 1.0
    diff = ops.sub(ops.mul(unit, Tensor(sign)), Tensor(gt))
    per_pair = ops.sqrt(ops.reduce_sum(ops.mul(diff, diff), axis=1))
    return ops.reduce_mean(per_pair)


def yaw_pitch_bins(yaw_deg: np.ndarray, pitch_deg: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Map angles in degrees to 360 one-degree bins over [-180, 180)."""
    yb = np.floor((np.asarray(yaw_deg) + 180.0) % 360.0).astype(int)
    pb = np.floor((np.asarray(pitch_deg) + 180.0) % 360.0).astype(int)
    return np.clip(yb, 0, 359), np.clip(pb, 0, 359)


def loss_euler(outputs: Tensor, gt_yaw_pitch: np.ndarray, mode: str) -> Tensor:
    """Euler-angle training objectives.

    regression: mean of squared yaw and pitch errors in degrees, with yaw
    wrapped to the shortest arc. classification: mean summed cross-entropy
    over 360 yaw bins and 360 pitch bins (outputs = 720 logits per pair).
    """
    gt = np.asarray(gt_yaw_pitch, dtype=np.float64)
    if gt.ndim == 1:
        gt = gt[None]
    b = outputs.shape[0] if outputs.ndim == 2 else 1
    if outputs.ndim == 1:
        outputs = ops.reshape(outputs, (1, outputs.shape[0]))
    if gt.shape != (b, 2):
        raise ShapeMismatch(f"ground truth {gt.shape} vs batch size {b}")

    if mode == "euler-regression":
        if outputs.shape[1] != 2:
            raise ShapeMismatch(f"regression outputs must be (B, 2), got {outputs.shape}")
        # shift the target by whole turns so the residual is the short way
        # around; the shift depends only on data, not on the graph
        offset = 360.0 * np.round((outputs.data - gt) / 360.0)
        target = (gt + offset).astype(outputs.data.dtype)
        diff = ops.sub(outputs, Tensor(target))
        return ops.reduce_mean(ops.reduce_sum(ops.mul(diff, diff), axis=1))

    if mode == "euler-classification":
        if outputs.shape[1] != 720:
            raise ShapeMismatch(f"classification outputs must be (B, 720), got {outputs.shape}")
        yb, pb = yaw_pitch_bins(gt[:, 0], gt[:, 1])
        total = None
        for logits, bins in ((ops.slice_axis(outputs, 1, 0, 360), yb),
                             (ops.slice_axis(outputs, 1, 360, 720), pb)):
            onehot = np.zeros((b, 360), dtype=outputs.data.dtype)
            onehot[np.arange(b), bins] = 1.0
            nll = ops.scale(ops.reduce_sum(
                ops.mul(ops.log_softmax(logits), Tensor(onehot)), axis=1), -1.0)
            total = nll if total is None else ops.add(total, nll)
        return ops.reduce_mean(total)

    raise ValueError(f"mode must be euler-regression or euler-classification, got {mode!r}")
