"""Automatic day/night foam mask generation for raw plant images."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import imaging
from .imaging import RECT, Kernel

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

log = logging.getLogger(__name__)

DAY = "day"
NIGHT = "night"
OVERLAY_COLOR = np.array([255.0, 0.0, 0.0])


@dataclass(frozen=True)
class MaskGenConfig:
    night_threshold: float = 100.0
    min_area: int = 75
    open_kernel: Kernel = field(default_factory=lambda: Kernel(RECT, 3, 3))
    open_iterations: int = 2
    night_gain: float = 1.5
    night_bias: float = 40.0
    nlmeans_h: float = 10.0
    nlmeans_template: int = 7
    nlmeans_search: int = 21
    clahe_clip: float = 2.0
    clahe_tiles: tuple[int, int] = (8, 8)
    threshold_block: int = 11
    threshold_c: float = 2.0

    def __post_init__(self):
        if not 0 <= self.night_threshold <= 255:
            raise ValueError("night_threshold must lie in [0, 255]")
        if self.min_area < 0:
            raise ValueError("min_area must be >= 0")

    @classmethod
    def from_file(cls, path, **overrides) -> "MaskGenConfig":
        """Load a flat ``key = value`` TOML document; unknown keys are errors."""
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
        raw.update({k: v for k, v in overrides.items() if v is not None})
        known = {f.name for f in fields(cls)}
        unknown = set(raw) - known - {"open_kernel_shape", "open_kernel_size"}
        if unknown:
            raise ValueError(f"unknown maskgen config keys: {sorted(unknown)}")
        if "open_kernel_shape" in raw or "open_kernel_size" in raw:
            size = int(raw.pop("open_kernel_size", 3))
            raw["open_kernel"] = Kernel(raw.pop("open_kernel_shape", RECT), size, size)
        if "clahe_tiles" in raw:
            raw["clahe_tiles"] = tuple(raw["clahe_tiles"])
        return cls(**raw)


@dataclass
class MaskGenResult:
    mask: np.ndarray
    overlay: np.ndarray
    branch: str
    brightness: float
    foam_fraction: float


def render_overlay(img: np.ndarray, mask: np.ndarray, alpha: float = 0.5) -> np.ndarray:
    """Blend foam pixels with red; everything else is copied unchanged."""
    rgb = np.repeat(img[..., None], 3, axis=2) if img.ndim == 2 else img.copy()
    sel = np.asarray(mask).astype(bool)
    blended = np.floor((1 - alpha) * rgb[sel].astype(np.float64) + alpha * OVERLAY_COLOR + 0.5)
    rgb[sel] = np.clip(blended, 0, 255).astype(np.uint8)
    return rgb


def generate_mask(img: np.ndarray, cfg: MaskGenConfig = MaskGenConfig()) -> MaskGenResult:
    gray = imaging.to_grayscale(img)
    b = imaging.mean_brightness(gray)
    if b < cfg.night_threshold:
        branch = NIGHT
        enhanced = imaging.linear_scale(gray, cfg.night_gain, cfg.night_bias)
        enhanced = imaging.denoise_nlmeans(enhanced, cfg.nlmeans_h, cfg.nlmeans_template, cfg.nlmeans_search)
    else:
        branch = DAY
        enhanced = imaging.clahe(gray, cfg.clahe_clip, cfg.clahe_tiles)
    mask = imaging.adaptive_threshold_gaussian(enhanced, cfg.threshold_block, cfg.threshold_c)
    mask = imaging.morphology(mask, "open", cfg.open_kernel, cfg.open_iterations)
    mask = imaging.connected_components_filter(mask, cfg.min_area)
    return MaskGenResult(mask, render_overlay(img, mask), branch, b, float(mask.mean()))


@dataclass
class MaskGenReport:
    processed: int = 0
    skipped: int = 0
    day: int = 0
    night: int = 0

    def as_dict(self) -> dict[str, int]:
        return asdict(self)


def process_directory(input_dir, output_dir, cfg: MaskGenConfig = MaskGenConfig()) -> MaskGenReport:
    """Write ``<stem>_mask.png`` and ``<stem>_overlay.png`` for every image.

    Unreadable files are logged and counted as skipped.
    """
    input_dir, output_dir = Path(input_dir), Path(output_dir)
    if not input_dir.is_dir():
        raise FileNotFoundError(f"input directory not found: {input_dir}")
    output_dir.mkdir(parents=True, exist_ok=True)
    report = MaskGenReport()
    for path in sorted(p for p in input_dir.iterdir() if p.is_file() and not p.name.startswith(".")):
        try:
            img = imaging.read_image(path)
            result = generate_mask(img, cfg)
        except (imaging.ImageDecodeError, ValueError) as exc:
            log.warning("skipping %s: %s", path.name, exc)
            report.skipped += 1
            continue
        imaging.write_atomic(output_dir / f"{path.stem}_mask.png", imaging.mask_to_png(result.mask))
        imaging.write_atomic(output_dir / f"{path.stem}_overlay.png", imaging.encode_png(result.overlay))
        report.processed += 1
        if result.branch == DAY:
            report.day += 1
        else:
            report.night += 1
    log.info("maskgen: %s", report.as_dict())
    return report
