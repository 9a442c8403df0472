"""Equirectangular panoramas: projection math, perspective crops, synthesis.

Conventions match crossrot.geometry: right-handed world frame with +y up and
+z forward. A panorama is a 2:1 equirectangular image; u in [0,1) wraps
around the horizon (u = 0.5 looks down +z), v in [0,1] runs from the +y pole
(top) to the -y pole.

Besides the projection and rendering primitives, this module generates
procedural box-scene panoramas and samples rotation-labelled crop pairs from
them into an on-disk dataset (PNG crops plus a JSONL index).
"""

from __future__ import annotations

import functools
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .geometry import (
    OverlapClass,
    UnitQuaternion,
    classify_overlap,
    quat_to_matrix,
    relative_quat,
    yaw_pitch_to_quat,
)

LARGE_REQ_DEG = 45.0
SMALL_REQ_DEG = 90.0


class PanoramaError(Exception):
    """Base class for panorama / dataset failures."""


class IoFailure(PanoramaError):
    """Reading or writing dataset files failed."""


class EmptyClass(PanoramaError):
    """An overlap class the sampling ranges can reach received zero pairs."""


# -- domain types ---------------------------------------------------------------


@dataclass(frozen=True)
class PanoramaImage:
    """Full 360x180 equirectangular image, H x 2H x 3 floats in [0,1]."""

    pixels: np.ndarray

    def __post_init__(self):
        p = self.pixels
        if p.ndim != 3 or p.shape[2] != 3 or p.shape[1] != 2 * p.shape[0]:
            raise PanoramaError(f"panorama must be H x 2H x 3, got {p.shape}")

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


@dataclass(frozen=True)
class PerspectiveCrop:
    """Square pinhole view into a panorama at an absolute rotation."""

    pixels: np.ndarray
    rotation: UnitQuaternion
    fov_deg: float


@dataclass(frozen=True)
class ImagePair:
    crop1: PerspectiveCrop
    crop2: PerspectiveCrop
    rel_quat: UnitQuaternion
    rel_angle_deg: float
    overlap: OverlapClass
    source_id: str


@dataclass
class DatasetSpec:
    """Generation protocol for one synthetic dataset.

    rel_yaw_limit_deg, when set, draws the second crop's yaw within that
    offset of the first (otherwise both yaws are independent uniforms over
    the full circle). pano_height and style control the synthesized scenes.
    """

    n_panoramas: int
    crops_per_panorama: int = 200
    crop_size: int = 128
    fov_deg: float = 90.0
    pitch_limit_deg: float = 45.0
    seed: int = 0
    split_fraction: float = 0.8
    style: str = "room"
    pano_height: int = 256
    rel_yaw_limit_deg: float | None = None

    def validate(self) -> None:
        if self.n_panoramas <= 0:
            raise ValueError(f"n_panoramas must be positive, got {self.n_panoramas}")
        if self.crops_per_panorama <= 0 or self.crops_per_panorama % 2:
            raise ValueError(
                f"crops_per_panorama must be positive and even (crops pair up), "
                f"got {self.crops_per_panorama}")
        if self.crop_size <= 0:
            raise ValueError(f"crop_size must be positive, got {self.crop_size}")
        if not 0.0 < self.fov_deg < 180.0:
            raise ValueError(f"fov_deg must lie in (0, 180), got {self.fov_deg}")
        if not 0.0 <= self.pitch_limit_deg <= 90.0:
            raise ValueError(f"pitch_limit_deg must lie in [0, 90], got {self.pitch_limit_deg}")
        if not 0.0 <= self.split_fraction <= 1.0:
            raise ValueError(f"split_fraction must lie in [0, 1], got {self.split_fraction}")
        if self.style not in ("room", "street"):
            raise ValueError(f"style must be 'room' or 'street', got {self.style!r}")
        if self.pano_height < 8:
            raise ValueError(f"pano_height too small: {self.pano_height}")
        if self.rel_yaw_limit_deg is not None and not 0.0 < self.rel_yaw_limit_deg <= 180.0:
            raise ValueError(f"rel_yaw_limit_deg must lie in (0, 180], got {self.rel_yaw_limit_deg}")


@dataclass
class DatasetIndex:
    root: Path
    records: list[dict] = field(default_factory=list)
    train_panoramas: list[str] = field(default_factory=list)
    test_panoramas: list[str] = field(default_factory=list)
    class_counts: dict[str, dict[str, int]] = field(default_factory=dict)


# -- projection ----------------------------------------------------------------------


def dir_to_equirect(d: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Unit direction(s) (..., 3) -> equirect (u, v), u in [0,1), v in [0,1].

    At the poles u degenerates; atan2(0, 0) = 0 puts it at 0.5.
    """
    d = np.asarray(d, dtype=np.float64)
    u = (np.arctan2(d[..., 0], d[..., 2]) / (2.0 * math.pi) + 0.5) % 1.0
    v = np.arccos(np.clip(d[..., 1], -1.0, 1.0)) / math.pi
    return u, v


def equirect_to_dir(u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Equirect (u, v) -> unit direction(s) (..., 3). Inverse away from poles."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    theta = (u - 0.5) * 2.0 * math.pi
    phi = v * math.pi
    sphi = np.sin(phi)
    return np.stack([sphi * np.sin(theta), np.cos(phi), sphi * np.cos(theta)], axis=-1)


@functools.lru_cache(maxsize=8)
def _camera_rays(size: int, fov_deg: float) -> np.ndarray:
    """Unit rays through each pixel center, camera frame, shape (S, S, 3).

    Row 0 is the top of the image (+y side); the horizontal FOV spans the
    full image width between the outer pixel edges.
    """
    f = (size / 2.0) / math.tan(math.radians(fov_deg) / 2.0)
    c = np.arange(size, dtype=np.float64) + 0.5
    x = (c - size / 2.0) / f
    y = (size / 2.0 - c) / f
    xx, yy = np.meshgrid(x, y)
    rays = np.stack([xx, yy, np.ones_like(xx)], axis=-1)
    rays /= np.linalg.norm(rays, axis=-1, keepdims=True)
    rays.setflags(write=False)
    return rays


def _bilinear(pixels: np.ndarray, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Sample an equirect image at (u, v): wrap horizontally, clamp at poles."""
    h, w = pixels.shape[:2]
    x = (u * w - 0.5) % w
    y = np.clip(v * h - 0.5, 0.0, h - 1.0)
    x0 = np.floor(x).astype(np.intp)
    y0 = np.floor(y).astype(np.intp)
    fx = (x - x0)[..., None]
    fy = (y - y0)[..., None]
    x0 %= w
    x1 = (x0 + 1) % w
    y1 = np.minimum(y0 + 1, h - 1)
    top = pixels[y0, x0] * (1.0 - fx) + pixels[y0, x1] * fx
    bot = pixels[y1, x0] * (1.0 - fx) + pixels[y1, x1] * fx
    return top * (1.0 - fy) + bot * fy


def render_crop(pano: PanoramaImage, rotation: UnitQuaternion,
                fov_deg: float = 90.0, size: int = 128) -> PerspectiveCrop:
    """Render a pinhole view of the panorama at a world-to-camera rotation."""
    if not 0.0 < fov_deg < 180.0:
        raise ValueError(f"fov_deg must lie in (0, 180), got {fov_deg}")
    rays = _camera_rays(size, float(fov_deg))
    r = quat_to_matrix(rotation)
    # world ray = R^T @ camera ray; as stacked row vectors that is rays @ R
    world = rays @ r
    u, v = dir_to_equirect(world)
    return PerspectiveCrop(_bilinear(pano.pixels, u, v), rotation, float(fov_deg))


def crop_footprint(rotation: UnitQuaternion, fov_deg: float, size: int,
                   n_boundary_samples: int = 256) -> list[np.ndarray]:
    """Project the crop border onto the panorama as (u, v) polyline segments.

    Walks the border of the image plane clockwise from the top-left corner,
    maps each border ray through the camera rotation to equirect coordinates,
    and splits the closed polyline wherever it crosses the u = 0 seam. Returns
    a list of (k, 2) arrays.
    """
    if n_boundary_samples < 4:
        raise ValueError(f"need at least 4 boundary samples, got {n_boundary_samples}")
    s = float(size)
    t = np.linspace(0.0, 4.0 * s, n_boundary_samples, endpoint=False)
    side = np.minimum(np.floor(t / s).astype(int), 3)
    w = t - side * s
    px = np.choose(side, [w, np.full_like(w, s), s - w, np.zeros_like(w)])
    py = np.choose(side, [np.zeros_like(w), w, np.full_like(w, s), s - w])
    f = (s / 2.0) / math.tan(math.radians(fov_deg) / 2.0)
    rays = np.stack([(px - s / 2.0) / f, (s / 2.0 - py) / f, np.ones_like(px)], axis=-1)
    rays /= np.linalg.norm(rays, axis=-1, keepdims=True)
    world = rays @ quat_to_matrix(rotation)
    u, v = dir_to_equirect(world)
    pts = np.stack([u, v], axis=-1)
    pts = np.concatenate([pts, pts[:1]], axis=0)  # close the loop
    jumps = np.nonzero(np.abs(np.diff(pts[:, 0])) > 0.5)[0]
    segments = []
    start = 0
    for j in jumps:
        if j + 1 > start:
            segments.append(pts[start:j + 1].copy())
        start = j + 1
    if len(pts) > start:
        segments.append(pts[start:].copy())
    return [seg for seg in segments if len(seg) >= 2]


# -- procedural synthesis ----------------------------------------------------------


def _hsv_to_rgb(h: np.ndarray, s: float, val: float) -> np.ndarray:
    """Vector hue -> RGB triplets, scalar saturation/value."""
    h6 = (h % 1.0) * 6.0
    i = np.floor(h6).astype(int) % 6
    fr = h6 - np.floor(h6)
    p = np.full_like(fr, val * (1.0 - s))
    q = val * (1.0 - s * fr)
    t = val * (1.0 - s * (1.0 - fr))
    vv = np.full_like(fr, val)
    table = np.stack([
        np.stack([vv, t, p], -1), np.stack([q, vv, p], -1),
        np.stack([p, vv, t], -1), np.stack([p, q, vv], -1),
        np.stack([t, p, vv], -1), np.stack([vv, p, q], -1)], 0)
    return table[i, np.arange(len(h6))]


def synth_panorama(seed: int, style: str = "room", height: int = 256) -> PanoramaImage:
    """Procedural equirectangular render of an axis-aligned box scene.

    The camera sits inside a box; the four walls carry random vertical and
    horizontal stripe features (distinct base colors per face), while floor
    and ceiling stay flat so the poles read as single colors. Deterministic
    for a fixed (seed, style, height).
    """
    if style not in ("room", "street"):
        raise ValueError(f"style must be 'room' or 'street', got {style!r}")
    rng = np.random.default_rng(
        np.random.SeedSequence(entropy=int(seed), spawn_key=(0 if style == "room" else 1,)))

    if style == "room":
        hx, hz = rng.uniform(2.0, 4.0, 2)
        hy = rng.uniform(1.2, 2.0)
        hues = (rng.uniform(0, 1) + np.arange(4) / 4.0 + rng.uniform(-0.05, 0.05, 4)) % 1.0
        walls = _hsv_to_rgb(hues, 0.55, 0.85)
        ceiling = np.array([0.92, 0.91, 0.88]) * rng.uniform(0.9, 1.0)
        floor = _hsv_to_rgb(np.array([rng.uniform(0.05, 0.12)]), 0.5, 0.35)[0]
    else:
        hx, hz = rng.uniform(4.0, 8.0, 2)
        hy = rng.uniform(2.5, 4.0)
        hues = (rng.uniform(0, 1) + np.arange(4) / 4.0 + rng.uniform(-0.05, 0.05, 4)) % 1.0
        walls = _hsv_to_rgb(hues, 0.35, 0.7)
        ceiling = np.array([0.65, 0.80, 0.95]) * rng.uniform(0.95, 1.05)  # sky
        floor = np.full(3, rng.uniform(0.25, 0.35))  # road
    cam = np.array([rng.uniform(-0.3, 0.3) * hx, rng.uniform(-0.2, 0.2) * hy,
                    rng.uniform(-0.3, 0.3) * hz])

    w = 2 * height
    uu = (np.arange(w) + 0.5) / w
    vv = (np.arange(height) + 0.5) / height
    ug, vg = np.meshgrid(uu, vv)
    d = equirect_to_dir(ug, vg)

    # first positive hit against the box planes, per axis
    bounds = np.array([hx, hy, hz])
    with np.errstate(divide="ignore"):
        tpos = np.where(d > 0, (bounds - cam) / np.where(d == 0, 1e-300, d),
                        (-bounds - cam) / np.where(d == 0, 1e-300, d))
    tpos = np.where(d == 0.0, np.inf, tpos)
    axis = np.argmin(tpos, axis=-1)
    thit = np.take_along_axis(tpos, axis[..., None], axis=-1)[..., 0]
    hit = cam + d * thit[..., None]
    sign_pos = np.take_along_axis(d, axis[..., None], axis=-1)[..., 0] > 0

    img = np.zeros((height, w, 3))
    # face ids: walls 0..3 = (+x, -x, +z, -z), then ceiling, floor
    face = np.where(axis == 0, np.where(sign_pos, 0, 1),
                    np.where(axis == 2, np.where(sign_pos, 2, 3),
                             np.where(sign_pos, 4, 5)))
    for k in range(4):
        img[face == k] = walls[k]
    img[face == 4] = ceiling
    img[face == 5] = floor

    # stripe features on the walls only: vertical stripes at fixed positions
    # along each wall's horizontal axis, horizontal stripes at fixed heights
    for k, (ax, horiz_extent) in enumerate([(0, hz), (0, hz), (2, hx), (2, hx)]):
        m = face == k
        if not m.any():
            continue
        horiz = hit[..., 2 if ax == 0 else 0]
        shade = rng.uniform(0.2, 0.5)
        color = walls[k] * shade
        n_v = rng.integers(2, 5)
        n_h = rng.integers(1, 4)
        vpos = rng.uniform(-0.9, 0.9, n_v) * horiz_extent
        hpos = rng.uniform(-0.8, 0.8, n_h) * hy
        vw = rng.uniform(0.02, 0.05) * horiz_extent
        hw = rng.uniform(0.02, 0.05) * hy
        stripe = np.zeros_like(m)
        for p in vpos:
            stripe |= m & (np.abs(horiz - p) < vw)
        for p in hpos:
            stripe |= m & (np.abs(hit[..., 1] - p) < hw)
        img[stripe] = color
    return PanoramaImage(np.clip(img, 0.0, 1.0))


# -- pair sampling and dataset build --------------------------------------------------


def _wrap_deg(a: float) -> float:
    return (a + 180.0) % 360.0 - 180.0


def sample_pair(pano: PanoramaImage, rng: np.random.Generator,
                spec: DatasetSpec, source_id: str = "pano") -> ImagePair:
    """Draw one rotation-labelled crop pair from a panorama.

    Yaw is uniform over the full circle (the second crop within
    rel_yaw_limit_deg of the first when set), pitch uniform within
    +/- pitch_limit_deg, roll always zero.
    """
    spec.validate()
    yaw1 = rng.uniform(-180.0, 180.0)
    if spec.rel_yaw_limit_deg is None:
        yaw2 = rng.uniform(-180.0, 180.0)
    else:
        yaw2 = _wrap_deg(yaw1 + rng.uniform(-spec.rel_yaw_limit_deg, spec.rel_yaw_limit_deg))
    lim = spec.pitch_limit_deg
    pitch1 = rng.uniform(-lim, lim)
    pitch2 = rng.uniform(-lim, lim)
    q1 = yaw_pitch_to_quat(yaw1, pitch1)
    q2 = yaw_pitch_to_quat(yaw2, pitch2)
    crop1 = render_crop(pano, q1, spec.fov_deg, spec.crop_size)
    crop2 = render_crop(pano, q2, spec.fov_deg, spec.crop_size)
    rel = relative_quat(q1, q2)
    angle = rel.angle_deg()
    return ImagePair(crop1, crop2, rel, angle, classify_overlap(angle), source_id)


def _required_classes(spec: DatasetSpec) -> list[OverlapClass]:
    """Overlap classes the yaw sampling range alone can certainly reach."""
    max_yaw = 180.0 if spec.rel_yaw_limit_deg is None else spec.rel_yaw_limit_deg
    req = [OverlapClass.LARGE]
    if max_yaw > LARGE_REQ_DEG:
        req.append(OverlapClass.SMALL)
    if max_yaw > SMALL_REQ_DEG:
        req.append(OverlapClass.NONE)
    return req


def _save_png(path: Path, pixels: np.ndarray) -> None:
    arr = np.round(np.clip(pixels, 0.0, 1.0) * 255.0).astype(np.uint8)
    try:
        Image.fromarray(arr, mode="RGB").save(path)
    except OSError as e:
        raise IoFailure(f"could not write {path}: {e}") from e


def load_png(path: Path) -> np.ndarray:
    """Read an 8-bit RGB image back to floats in [0,1]."""
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    except OSError as e:
        raise IoFailure(f"could not read {path}: {e}") from e


def build_dataset(spec: DatasetSpec, output_dir: str | Path) -> DatasetIndex:
    """Generate panoramas, crop pairs, PNG files and the JSONL index.

    Panoramas are split disjointly into train/test by shuffling their ids
    with the dataset seed. Every numbered output is derived from
    (spec.seed, panorama index) alone, so regeneration is byte-identical.
    """
    spec.validate()
    root = Path(output_dir)
    try:
        (root / "panos").mkdir(parents=True, exist_ok=True)
        (root / "crops").mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise IoFailure(f"could not create dataset directories under {root}: {e}") from e

    order = np.random.default_rng(
        np.random.SeedSequence(entropy=spec.seed, spawn_key=(1,))).permutation(spec.n_panoramas)
    n_train = int(round(spec.n_panoramas * spec.split_fraction))
    train_ids = {int(i) for i in order[:n_train]}

    index = DatasetIndex(root=root)
    counts = {"train": {c.value: 0 for c in OverlapClass},
              "test": {c.value: 0 for c in OverlapClass}}
    records = []
    for i in range(spec.n_panoramas):
        pid = f"p{i:04d}"
        split = "train" if i in train_ids else "test"
        pano_seed = int(np.random.SeedSequence(
            entropy=spec.seed, spawn_key=(2, i)).generate_state(1)[0])
        pano = synth_panorama(pano_seed, spec.style, spec.pano_height)
        _save_png(root / "panos" / f"{pid}.png", pano.pixels)
        rng = np.random.default_rng(np.random.SeedSequence(entropy=spec.seed, spawn_key=(3, i)))
        for k in range(spec.crops_per_panorama // 2):
            pair = sample_pair(pano, rng, spec, source_id=pid)
            name_a = f"{pid}_{2 * k:03d}.png"
            name_b = f"{pid}_{2 * k + 1:03d}.png"
            _save_png(root / "crops" / name_a, pair.crop1.pixels)
            _save_png(root / "crops" / name_b, pair.crop2.pixels)
            q = pair.rel_quat
            records.append({
                "pair_id": f"{pid}_{k:03d}",
                "crop_a": name_a,
                "crop_b": name_b,
                "quat_a": list(pair.crop1.rotation.as_array().tolist()),
                "quat_b": list(pair.crop2.rotation.as_array().tolist()),
                "quat_rel": list(q.as_array().tolist()),
                "angle_deg": pair.rel_angle_deg,
                "overlap": pair.overlap.value,
                "split": split,
            })
            counts[split][pair.overlap.value] += 1

    total = {c.value: counts["train"][c.value] + counts["test"][c.value] for c in OverlapClass}
    for cls in _required_classes(spec):
        if total[cls.value] == 0:
            raise EmptyClass(
                f"overlap class '{cls.value}' received zero pairs; "
                f"the sampling ranges make it reachable, so the spec is likely bad")

    try:
        with open(root / "index.jsonl", "w") as fh:
            for rec in records:
                fh.write(json.dumps(rec) + "\n")
    except OSError as e:
        raise IoFailure(f"could not write index under {root}: {e}") from e

    index.records = records
    index.train_panoramas = sorted(f"p{i:04d}" for i in range(spec.n_panoramas) if i in train_ids)
    index.test_panoramas = sorted(f"p{i:04d}" for i in range(spec.n_panoramas) if i not in train_ids)
    index.class_counts = counts
    return index


def load_index(path: str | Path) -> list[dict]:
    """Read index.jsonl records back as dicts."""
    try:
        with open(path) as fh:
            return [json.loads(line) for line in fh if line.strip()]
    except OSError as e:
        raise IoFailure(f"could not read index {path}: {e}") from e


def open_dataset(root: str | Path) -> DatasetIndex:
    """Rebuild a DatasetIndex from a generated dataset directory."""
    root = Path(root)
    records = load_index(root / "index.jsonl")
    counts = {"train": {c.value: 0 for c in OverlapClass},
              "test": {c.value: 0 for c in OverlapClass}}
    panos: dict[str, set[str]] = {"train": set(), "test": set()}
    for rec in records:
        counts[rec["split"]][rec["overlap"]] += 1
        panos[rec["split"]].add(rec["pair_id"].rsplit("_", 1)[0])
    return DatasetIndex(root=root, records=records,
                        train_panoramas=sorted(panos["train"]),
                        test_panoramas=sorted(panos["test"]),
                        class_counts=counts)
