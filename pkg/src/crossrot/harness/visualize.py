"""Attention heatmap and panorama footprint exports."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from ..geometry import UnitQuaternion
from ..model import AttentionRecord, RotationNet
from ..panorama import _save_png, crop_footprint


def attention_received(record: AttentionRecord, tokens_per_image: int,
                       layer: int | None = None, head: int | None = None
                       ) -> tuple[np.ndarray, np.ndarray]:
    """Cross-image attention mass landing on each token, per image.

    For image 1 this is the column sums of the lower-left block (image-2
    queries attending into image-1 keys), and symmetrically for image 2.
    Averages over layers and heads unless pinned by the arguments. Returns
    two flat arrays of length tokens_per_image.
    """
    stacked = np.stack(record.layers)           # (L, B, h, T, T)
    if layer is not None:
        stacked = stacked[layer:layer + 1]
    if head is not None:
        stacked = stacked[:, :, head:head + 1]
    mean = stacked.mean(axis=(0, 2))[0]          # (T, T), batch of one
    n = tokens_per_image
    mass1 = mean[n:, :n].sum(axis=0)
    mass2 = mean[:n, n:].sum(axis=0)
    return mass1, mass2


def bilinear_upsample(a: np.ndarray, size: int) -> np.ndarray:
    """(K, K) -> (size, size) with pixel-center alignment, edges clamped."""
    k = a.shape[0]
    coords = np.clip((np.arange(size) + 0.5) * (k / size) - 0.5, 0.0, k - 1.0)
    c0 = np.floor(coords).astype(int)
    c1 = np.minimum(c0 + 1, k - 1)
    frac = coords - c0
    top = a[c0][:, c0] * (1 - frac[None, :]) + a[c0][:, c1] * frac[None, :]
    bot = a[c1][:, c0] * (1 - frac[None, :]) + a[c1][:, c1] * frac[None, :]
    return top * (1.0 - frac[:, None]) + bot * frac[:, None]


def minmax_norm(a: np.ndarray) -> np.ndarray:
    """Scale to [0, 1]; a constant map falls back to all 0.5."""
    lo, hi = float(np.min(a)), float(np.max(a))
    if hi - lo < 1e-12:
        return np.full_like(a, 0.5)
    return (a - lo) / (hi - lo)


def heat_colormap(t: np.ndarray) -> np.ndarray:
    """Simple blue->cyan->yellow->red map for t in [0, 1], shape (..., 3)."""
    t = np.clip(t, 0.0, 1.0)
    r = np.clip(1.5 - np.abs(4.0 * t - 3.0), 0.0, 1.0)
    g = np.clip(1.5 - np.abs(4.0 * t - 2.0), 0.0, 1.0)
    b = np.clip(1.5 - np.abs(4.0 * t - 1.0), 0.0, 1.0)
    return np.stack([r, g, b], axis=-1)


def blend_heatmap(img: np.ndarray, heat: np.ndarray, alpha: float = 0.55) -> np.ndarray:
    return (1.0 - alpha) * img + alpha * heat_colormap(heat)


def export_attention(model: RotationNet, img_a: np.ndarray, img_b: np.ndarray,
                     out_prefix: str | Path, per_layer: bool = False,
                     per_head: bool = False, alpha: float = 0.55) -> list[Path]:
    """Write attention-mass overlays for both crops; returns written paths.

    Default output is {prefix}_a.png / {prefix}_b.png using the layer/head
    mean; the flags expand to one file pair per layer, head, or combination.
    """
    _, record = model.predict(img_a, img_b, capture_attention=True)
    n = model.cfg.tokens_per_image
    k = model.cfg.feature_side
    size = model.cfg.image_size
    layers = range(len(record.layers)) if per_layer else [None]
    heads = range(model.cfg.heads) if per_head else [None]

    out_prefix = Path(out_prefix)
    out_prefix.parent.mkdir(parents=True, exist_ok=True)
    written = []
    for li in layers:
        for hi in heads:
            tag = ""
            if li is not None:
                tag += f"_l{li}"
            if hi is not None:
                tag += f"_h{hi}"
            masses = attention_received(record, n, layer=li, head=hi)
            for side, img, mass in (("a", img_a, masses[0]), ("b", img_b, masses[1])):
                heat = minmax_norm(bilinear_upsample(mass.reshape(k, k), size))
                path = out_prefix.parent / f"{out_prefix.name}{tag}_{side}.png"
                _save_png(path, blend_heatmap(np.asarray(img, dtype=np.float64),
                                              heat, alpha))
                written.append(path)
    return written


def predicted_absolute(q1: UnitQuaternion, q_rel: UnitQuaternion) -> UnitQuaternion:
    """Second-camera rotation implied by a relative prediction: q_rel * q1."""
    return (q_rel * q1).normalized()


def _draw_polyline(img: np.ndarray, segments: list[np.ndarray],
                   color: tuple[float, float, float], dotted: bool = False) -> None:
    """Rasterize (u, v) polyline segments onto an equirect image, in place.

    u wraps horizontally; vertices are interpolated densely enough that no
    gaps appear, and dashes are measured in arc length so dotting looks even.
    """
    h, w = img.shape[:2]
    col = np.asarray(color, dtype=img.dtype)
    arc = 0.0
    for seg in segments:
        px = np.stack([seg[:, 0] * w, seg[:, 1] * h], axis=-1)
        for (x0, y0), (x1, y1) in zip(px[:-1], px[1:]):
            dist = float(np.hypot(x1 - x0, y1 - y0))
            steps = max(2, int(np.ceil(dist * 2.0)) + 1)
            for t in np.linspace(0.0, 1.0, steps):
                if dotted and int((arc + t * dist) / 4.0) % 2:
                    continue
                x = int(round(x0 + (x1 - x0) * t)) % w
                y = min(h - 1, max(0, int(round(y0 + (y1 - y0) * t))))
                img[y, x] = col
                img[y, (x + 1) % w] = col
                img[min(h - 1, y + 1), x] = col
            arc += dist


def export_footprints(pano_pixels: np.ndarray, q1: UnitQuaternion,
                      q2: UnitQuaternion, q_pred: UnitQuaternion,
                      out_path: str | Path, fov_deg: float = 90.0,
                      crop_size: int = 128) -> Path:
    """Overlay both ground-truth crop footprints and the predicted one.

    Crop 1's border is green, crop 2's yellow; the red dotted line is the
    footprint of applying the predicted relative rotation to crop 1's pose.
    """
    img = np.asarray(pano_pixels, dtype=np.float64).copy()
    samples = 4 * crop_size
    fp1 = crop_footprint(q1, fov_deg, crop_size, samples)
    fp2 = crop_footprint(q2, fov_deg, crop_size, samples)
    fp_pred = crop_footprint(predicted_absolute(q1, q_pred), fov_deg,
                             crop_size, samples)
    _draw_polyline(img, fp1, (0.0, 0.9, 0.1))
    _draw_polyline(img, fp2, (1.0, 0.9, 0.0))
    _draw_polyline(img, fp_pred, (1.0, 0.0, 0.0), dotted=True)
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    _save_png(out_path, img)
    return out_path
