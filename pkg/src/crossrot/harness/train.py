"""Mini-batch training loop with stateless per-step randomness.

Every random choice (epoch shuffles, dropout masks) is derived from
(seed, step) alone, so a run can be checkpointed and resumed with a loss
sequence identical to the unbroken run.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..autodiff import Adam, Tensor, backward
from ..geometry import UnitQuaternion, quat_to_yaw_pitch
from ..model import DegenerateQuaternion, RotationNet, loss_euler, loss_quat
from ..panorama import DatasetIndex, IoFailure, load_png
from .checkpoint import save_checkpoint
from .evaluate import EmptySplit, evaluate


class NanLoss(RuntimeError):
    """Non-finite training loss; carries the ids of the offending batch."""

    def __init__(self, step: int, value: float, batch_ids: list[str]):
        super().__init__(
            f"non-finite loss {value!r} at step {step}; batch pairs: {batch_ids}")
        self.step = step
        self.batch_ids = batch_ids


@dataclass
class TrainConfig:
    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-10
    batch_size: int = 20
    max_steps: int = 1000
    seed: int = 0
    eval_interval: int = 0          # 0 disables mid-run evaluation
    eval_max_pairs: int = 256
    checkpoint_dir: str | None = None

    def validate(self) -> None:
        if not self.lr >= 0.0 or not math.isfinite(self.lr):
            raise ValueError(f"lr must be finite and >= 0, got {self.lr}")
        for name, b in (("beta1", self.beta1), ("beta2", self.beta2)):
            if not 0.0 <= b < 1.0:
                raise ValueError(f"{name} must lie in [0, 1), got {b}")
        if self.eps <= 0.0:
            raise ValueError(f"eps must be positive, got {self.eps}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.max_steps < 0:
            raise ValueError(f"max_steps must be >= 0, got {self.max_steps}")
        if self.eval_interval < 0:
            raise ValueError(f"eval_interval must be >= 0, got {self.eval_interval}")


def toy_train_config(**overrides) -> TrainConfig:
    """Small-run defaults used by the synthetic experiments."""
    base = dict(batch_size=8, max_steps=500)
    base.update(overrides)
    return TrainConfig(**base)


@dataclass
class LoadedPair:
    pair_id: str
    img_a: np.ndarray               # (3, S, S), model dtype
    img_b: np.ndarray
    quat_rel: np.ndarray            # (4,)
    yaw_pitch: np.ndarray           # (2,) degrees, for the euler modes
    overlap: str


def load_pairs(index: DatasetIndex, split: str, dtype=np.float32) -> list[LoadedPair]:
    """Materialize one split's crops in memory as CHW float arrays."""
    out = []
    crops = Path(index.root) / "crops"
    for rec in index.records:
        if rec["split"] != split:
            continue
        a = load_png(crops / rec["crop_a"]).astype(dtype).transpose(2, 0, 1)
        b = load_png(crops / rec["crop_b"]).astype(dtype).transpose(2, 0, 1)
        q = np.asarray(rec["quat_rel"], dtype=np.float64)
        yp = quat_to_yaw_pitch(UnitQuaternion.from_array(q))
        out.append(LoadedPair(rec["pair_id"], a, b, q,
                              np.array([yp.yaw_deg, yp.pitch_deg]), rec["overlap"]))
    return out


def _rng_for(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=key))


def batch_indices(seed: int, step: int, n: int, batch_size: int) -> np.ndarray:
    """Deterministic batch for a given global step.

    Each epoch is a fresh seeded permutation consumed in full batches;
    the leftover tail is dropped. Depends only on (seed, step, n, batch_size)
    so resumed runs see the exact same batches.
    """
    b = min(batch_size, n)
    steps_per_epoch = max(1, n // b)
    epoch, slot = divmod(step, steps_per_epoch)
    perm = _rng_for(seed, 101, epoch).permutation(n)
    return perm[slot * b:(slot + 1) * b]


def _batch_loss(model: RotationNet, batch: list[LoadedPair],
                rng: np.random.Generator):
    img1 = Tensor(np.stack([p.img_a for p in batch]))
    img2 = Tensor(np.stack([p.img_b for p in batch]))
    raw, _ = model.forward_pair(img1, img2, rng=rng)
    mode = model.cfg.rotation_mode
    if mode == "quaternion-regression":
        return loss_quat(raw, np.stack([p.quat_rel for p in batch]))
    return loss_euler(raw, np.stack([p.yaw_pitch for p in batch]), mode)


def train(model: RotationNet, index: DatasetIndex, cfg: TrainConfig,
          optimizer: Adam | None = None, start_step: int = 0) -> list[dict]:
    """Run Adam over shuffled mini-batches; returns the per-step log.

    Log rows are {"step", "loss", "wall_ms"}. When cfg.checkpoint_dir is set
    the same rows stream to train_log.csv, held-out metrics go to
    eval_log.csv every eval_interval steps, and a final checkpoint named
    "last" is written. Passing (optimizer, start_step) from a loaded
    checkpoint continues the original schedule exactly.
    """
    cfg.validate()
    data = load_pairs(index, "train", model.cfg.np_dtype)
    if not data:
        raise EmptySplit("dataset has no training pairs")

    if optimizer is None:
        optimizer = Adam(model.named_parameters(), lr=cfg.lr,
                         beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps)
    model.train(True)

    out_dir = Path(cfg.checkpoint_dir) if cfg.checkpoint_dir else None
    log_fh = None
    if out_dir is not None:
        try:
            out_dir.mkdir(parents=True, exist_ok=True)
            fresh = start_step == 0
            log_fh = open(out_dir / "train_log.csv", "w" if fresh else "a")
            if fresh:
                log_fh.write("step,loss,wall_ms\n")
        except OSError as e:
            raise IoFailure(f"could not open training log under {out_dir}: {e}") from e

    log: list[dict] = []
    try:
        for step in range(start_step, cfg.max_steps):
            idx = batch_indices(cfg.seed, step, len(data), cfg.batch_size)
            batch = [data[int(i)] for i in idx]
            t0 = time.perf_counter()
            try:
                loss = _batch_loss(model, batch, _rng_for(cfg.seed, 103, step))
                value = loss.item()
            except DegenerateQuaternion as e:
                _dump_nan_batch(out_dir, step, float("nan"), batch)
                raise NanLoss(step, float("nan"),
                              [p.pair_id for p in batch]) from e
            if not math.isfinite(value):
                _dump_nan_batch(out_dir, step, value, batch)
                raise NanLoss(step, value, [p.pair_id for p in batch])
            optimizer.zero_grad()
            backward(loss)
            optimizer.step()
            wall_ms = (time.perf_counter() - t0) * 1e3
            row = {"step": step, "loss": value, "wall_ms": wall_ms}
            log.append(row)
            if log_fh is not None:
                log_fh.write(f"{step},{value!r},{wall_ms:.3f}\n")
            if cfg.eval_interval and (step + 1) % cfg.eval_interval == 0:
                _mid_run_eval(model, index, cfg, step + 1, out_dir, optimizer)
    finally:
        if log_fh is not None:
            log_fh.close()

    if out_dir is not None:
        save_checkpoint(out_dir / "last", model, optimizer=optimizer,
                        step=cfg.max_steps, extra={"train_seed": cfg.seed})
    return log


def _mid_run_eval(model, index, cfg, step, out_dir, optimizer) -> None:
    try:
        rows, _ = evaluate(model, index, "test", max_pairs=cfg.eval_max_pairs)
    except EmptySplit:
        return
    summary = next(r for r in rows if r.overlap == "all")
    if out_dir is not None:
        path = out_dir / "eval_log.csv"
        try:
            with open(path, "a") as fh:
                if fh.tell() == 0:
                    fh.write("step,avg_deg,med_deg,pct_under_10\n")
                fh.write(f"{step},{summary.avg_deg!r},{summary.med_deg!r},"
                         f"{summary.pct_under_10!r}\n")
        except OSError as e:
            raise IoFailure(f"could not append eval log {path}: {e}") from e
        save_checkpoint(out_dir / "last", model, optimizer=optimizer,
                        step=step, extra={"train_seed": cfg.seed})
    model.train(True)


def _dump_nan_batch(out_dir, step, value, batch) -> None:
    if out_dir is None:
        return
    try:
        with open(out_dir / "nan_batch.json", "w") as fh:
            json.dump({"step": step, "loss": repr(value),
                       "pair_ids": [p.pair_id for p in batch]}, fh, indent=2)
    except OSError:
        pass  # the exception about to be raised matters more
