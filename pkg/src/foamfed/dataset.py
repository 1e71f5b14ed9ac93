"""Image/mask corpora: loading, augmentation, client partitioning and a
procedural foam generator."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import imaging

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")
IID = "iid"
BY_SOURCE = "by-source"
SOURCE_SEP = "__"


@dataclass
class SamplePair:
    image: np.ndarray
    mask: np.ndarray
    source_id: str = "default"

    def __post_init__(self):
        if self.image.shape[:2] != self.mask.shape:
            raise ValueError(f"image {self.image.shape[:2]} and mask {self.mask.shape} differ in size")


@dataclass(frozen=True)
class AugmentConfig:
    p_hflip: float = 0.5
    p_vflip: float = 0.5
    p_brightness_contrast: float = 0.2
    p_affine: float = 0.5
    shift: float = 0.05
    scale: float = 0.10
    rotate: float = 15.0
    brightness: float = 0.2
    contrast: float = 0.2

    def __post_init__(self):
        for p in (self.p_hflip, self.p_vflip, self.p_brightness_contrast, self.p_affine):
            if not 0.0 <= p <= 1.0:
                raise ValueError("probabilities must lie in [0, 1]")

    @classmethod
    def disabled(cls) -> "AugmentConfig":
        return cls(0.0, 0.0, 0.0, 0.0)


@dataclass
class Partition:
    assignments: dict[int, list[int]]
    mode: str

    def sizes(self) -> dict[int, int]:
        return {k: len(v) for k, v in self.assignments.items()}


def source_of(stem: str) -> str:
    """Source id encoded in a file stem as ``<source>__<rest>``."""
    return stem.split(SOURCE_SEP, 1)[0] if SOURCE_SEP in stem else "default"


def load_pairs(image_dir, mask_dir, target: tuple[int, int] | None = None) -> tuple[list[SamplePair], list[str]]:
    """Pair ``images/<stem>.*`` with ``masks/<stem>_mask.png``.

    Returns the pairs sorted by filename and the names of images that had
    no mask (or failed to decode). Images are bilinear-resized to
    ``target``; masks nearest-resized and re-binarized.
    """
    image_dir, mask_dir = Path(image_dir), Path(mask_dir)
    if not image_dir.is_dir() or not mask_dir.is_dir():
        raise FileNotFoundError(f"missing corpus directory: {image_dir} or {mask_dir}")
    pairs, skipped = [], []
    for path in sorted(p for p in image_dir.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES):
        mask_path = mask_dir / f"{path.stem}_mask.png"
        if not mask_path.is_file():
            log.warning("no mask for %s; skipping", path.name)
            skipped.append(path.name)
            continue
        try:
            img = imaging.read_image(path)
            mask = imaging.read_mask(mask_path)
        except imaging.ImageDecodeError as exc:
            log.warning("cannot decode %s: %s", path.name, exc)
            skipped.append(path.name)
            continue
        if target is not None:
            img = imaging.resize(img, target=target)
            mask = imaging.resize_nearest(mask, target)
        mask = (mask > 0).astype(np.uint8)
        pairs.append(SamplePair(img, mask, source_of(path.stem)))
    if not pairs:
        raise ValueError(f"no matching pairs in {image_dir} / {mask_dir}")
    return pairs, skipped


def save_pairs(pairs: Sequence[SamplePair], out_dir, names: Sequence[str] | None = None) -> Path:
    """Write a corpus in the ``images/`` + ``masks/`` layout."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    for i, pair in enumerate(pairs):
        stem = names[i] if names is not None else f"{pair.source_id}{SOURCE_SEP}{i:05d}"
        imaging.write_atomic(out / "images" / f"{stem}.png", imaging.encode_png(pair.image))
        imaging.write_atomic(out / "masks" / f"{stem}_mask.png", imaging.mask_to_png(pair.mask))
    return out


# --------------------------------------------------------------------------
# augmentation


def _affine_sample(a: np.ndarray, angle_deg: float, scale: float, shift: tuple[float, float],
                   nearest: bool) -> np.ndarray:
    """Rotate about the centre, then scale, then shift (in pixels)."""
    h, w = a.shape[:2]
    cy, cx = (h - 1) / 2, (w - 1) / 2
    theta = math.radians(angle_deg)
    cos, sin = math.cos(theta), math.sin(theta)
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    # invert: output -> unshift -> unscale -> unrotate
    u = (xs - shift[0] - cx) / scale
    v = (ys - shift[1] - cy) / scale
    sx = cos * u + sin * v + cx
    sy = -sin * u + cos * v + cy
    if nearest:
        sx = np.floor(sx + 0.5)
        sy = np.floor(sy + 0.5)
    sx = _reflect_index(sx, w)
    sy = _reflect_index(sy, h)
    if nearest:
        return a[sy.astype(int), sx.astype(int)]
    x0 = np.floor(sx).astype(int)
    y0 = np.floor(sy).astype(int)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = sx - x0
    fy = sy - y0
    src = a.astype(np.float64)
    if a.ndim == 3:
        fx, fy = fx[..., None], fy[..., None]
    out = ((1 - fy) * ((1 - fx) * src[y0, x0] + fx * src[y0, x1])
           + fy * ((1 - fx) * src[y1, x0] + fx * src[y1, x1]))
    return np.clip(np.floor(out + 0.5), 0, 255).astype(np.uint8)


def _reflect_index(s: np.ndarray, n: int) -> np.ndarray:
    if n == 1:
        return np.zeros_like(s)
    period = 2 * (n - 1)
    s = np.mod(s, period)
    return np.where(s > n - 1, period - s, s)


def affine_pair(pair: SamplePair, angle_deg: float = 0.0, scale: float = 1.0,
                shift: tuple[float, float] = (0.0, 0.0)) -> SamplePair:
    image = _affine_sample(pair.image, angle_deg, scale, shift, nearest=False)
    mask = (_affine_sample(pair.mask, angle_deg, scale, shift, nearest=True) > 0).astype(np.uint8)
    return SamplePair(image, mask, pair.source_id)


def hflip(pair: SamplePair) -> SamplePair:
    return SamplePair(pair.image[:, ::-1].copy(), pair.mask[:, ::-1].copy(), pair.source_id)


def vflip(pair: SamplePair) -> SamplePair:
    return SamplePair(pair.image[::-1].copy(), pair.mask[::-1].copy(), pair.source_id)


def augment(pair: SamplePair, cfg: AugmentConfig, sample_seed: int) -> SamplePair:
    """Seeded flips, brightness/contrast jitter and affine warp.

    Geometry is shared by image and mask; photometric changes touch the
    image only.
    """
    rng = np.random.default_rng(sample_seed)
    # draw every variate up front so the stream does not depend on outcomes
    u = rng.random(4)
    alpha = 1.0 + rng.uniform(-cfg.contrast, cfg.contrast)
    beta = rng.uniform(-cfg.brightness, cfg.brightness) * 255.0
    angle = rng.uniform(-cfg.rotate, cfg.rotate)
    scale = 1.0 + rng.uniform(-cfg.scale, cfg.scale)
    h, w = pair.mask.shape
    shift = (rng.uniform(-cfg.shift, cfg.shift) * w, rng.uniform(-cfg.shift, cfg.shift) * h)

    out = SamplePair(pair.image.copy(), pair.mask.copy(), pair.source_id)
    if u[0] < cfg.p_hflip:
        out = hflip(out)
    if u[1] < cfg.p_vflip:
        out = vflip(out)
    if u[2] < cfg.p_brightness_contrast:
        img = np.clip(np.floor(out.image.astype(np.float64) * alpha + beta + 0.5), 0, 255).astype(np.uint8)
        out = SamplePair(img, out.mask, out.source_id)
    if u[3] < cfg.p_affine:
        out = affine_pair(out, angle, scale, shift)
    return out


# --------------------------------------------------------------------------
# partitioning


def partition(n_samples: int, sources: Sequence[str] | None, mode: str, n_clients: int, seed: int = 0) -> Partition:
    """Split sample indices across clients.

    ``iid`` deals a seeded shuffle round-robin. ``by-source`` maps each
    distinct source (in order of first appearance) to one client; with more
    sources than clients, sources are dealt round-robin. Each client's index
    list is sorted.
    """
    if n_clients < 1:
        raise ValueError("n_clients must be >= 1")
    buckets: dict[int, list[int]] = {c: [] for c in range(n_clients)}
    if mode == IID:
        perm = np.random.default_rng(seed).permutation(n_samples)
        for pos, idx in enumerate(perm):
            buckets[pos % n_clients].append(int(idx))
    elif mode == BY_SOURCE:
        if sources is None or len(sources) != n_samples:
            raise ValueError("by-source partitioning needs one source id per sample")
        order: dict[str, int] = {}
        for idx, src in enumerate(sources):
            client = order.setdefault(src, len(order) % n_clients)
            buckets[client].append(idx)
        if len(order) > n_clients:
            log.info("%d sources over %d clients: dealt round-robin", len(order), n_clients)
    else:
        raise ValueError(f"unknown partition mode {mode!r}")
    return Partition({c: sorted(v) for c, v in buckets.items()}, mode)


# --------------------------------------------------------------------------
# procedural generator


def _water(rng: np.random.Generator, w: int, h: int, noise: float) -> np.ndarray:
    coarse = rng.uniform(25, 75, size=(5, 5))
    up = imaging.resize(np.clip(coarse, 0, 255).astype(np.uint8), target=(w, h)).astype(np.float64)
    return up + rng.normal(0.0, noise, size=(h, w))


def _ellipses(rng: np.random.Generator, w: int, h: int) -> np.ndarray:
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    mask = np.zeros((h, w), dtype=bool)
    short = min(w, h)
    for _ in range(int(rng.integers(2, 6))):
        cx, cy = rng.uniform(0, w), rng.uniform(0, h)
        a, b = rng.uniform(0.08, 0.22, size=2) * short
        t = rng.uniform(0, math.pi)
        u = (xs - cx) * math.cos(t) + (ys - cy) * math.sin(t)
        v = -(xs - cx) * math.sin(t) + (ys - cy) * math.cos(t)
        mask |= (u / a) ** 2 + (v / b) ** 2 <= 1.0
    return mask


def synth_generate(n: int, size: tuple[int, int] = (256, 256), seed: int = 0, noise: float = 6.0,
                   source_id: str = "synth", min_frac: float = 0.05, max_frac: float = 0.5) -> list[SamplePair]:
    """Dark textured water with bright speckled foam blobs.

    The mask is the exact union of the blobs. ``noise`` is the standard
    deviation of the per-pixel water noise; foam speckle is twice that.
    Blob layouts are redrawn until the foam fraction lies in
    ``[min_frac, max_frac]``.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    w, h = size
    out = []
    for i in range(n):
        rng = np.random.default_rng(np.random.SeedSequence([seed, i]))
        water = _water(rng, w, h, noise)
        for _ in range(1000):
            blob = _ellipses(rng, w, h)
            if min_frac <= blob.mean() <= max_frac:
                break
        else:  # pragma: no cover - the ranges above make this unreachable in practice
            raise RuntimeError("could not place foam within the requested fraction")
        foam = rng.uniform(185, 225) + rng.normal(0.0, 2 * noise, size=(h, w))
        gray = np.where(blob, foam, water)
        tint_water = np.array([0.80, 0.95, 0.85])
        tint_foam = np.array([1.0, 1.0, 0.97])
        rgb = np.where(blob[..., None], gray[..., None] * tint_foam, gray[..., None] * tint_water)
        img = np.clip(np.floor(rgb + 0.5), 0, 255).astype(np.uint8)
        out.append(SamplePair(img, blob.astype(np.uint8), source_id))
    return out
