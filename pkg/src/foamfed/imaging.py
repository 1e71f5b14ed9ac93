"""Raster primitives used by every stage of the pipeline.

Images are plain numpy arrays: ``uint8`` of shape ``(H, W)`` (gray) or
``(H, W, 3)`` (RGB). Binary masks are ``uint8`` arrays holding only 0 and 1.
All functions are pure and never modify their inputs. Borders are handled
by reflection (``numpy.pad(mode="reflect")``, i.e. the edge pixel is not
repeated) everywhere.
"""

from __future__ import annotations

import io
import math
import os
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image as PILImage
from scipy import ndimage

RECT = "rect"
ELLIPSE = "ellipse"

_LUMA = np.array([0.299, 0.587, 0.114])
_EIGHT_CONNECTED = np.ones((3, 3), dtype=bool)


class ImageDecodeError(ValueError):
    """Raised when bytes or a file cannot be decoded into an image."""


@dataclass(frozen=True)
class Kernel:
    """Structuring element for binary morphology."""

    shape: str = RECT
    width: int = 3
    height: int = 3

    def __post_init__(self):
        if self.shape not in (RECT, ELLIPSE):
            raise ValueError(f"unknown kernel shape {self.shape!r}")
        for dim in (self.width, self.height):
            if dim < 1 or dim % 2 == 0:
                raise ValueError("kernel dimensions must be odd and >= 1")

    def footprint(self) -> np.ndarray:
        """Boolean ``(height, width)`` support of the element."""
        if self.shape == RECT:
            return np.ones((self.height, self.width), dtype=bool)
        fp = np.zeros((self.height, self.width), dtype=bool)
        r, c = self.height // 2, self.width // 2
        inv_r2 = 1.0 / (r * r) if r else 0.0
        for i in range(self.height):
            dy = i - r
            dx = int(math.floor(c * math.sqrt((r * r - dy * dy) * inv_r2) + 0.5)) if r else c
            fp[i, max(c - dx, 0):min(c + dx + 1, self.width)] = True
        return fp


def _round_u8(values: np.ndarray) -> np.ndarray:
    # round half up, then saturate
    return np.clip(np.floor(values + 0.5), 0, 255).astype(np.uint8)


def _check_gray(g: np.ndarray) -> None:
    if g.ndim != 2:
        raise ValueError(f"expected a 2-D grayscale image, got shape {g.shape}")
    if g.size == 0:
        raise ValueError("empty image")


def _box_sum(a: np.ndarray, ky: int, kx: int) -> np.ndarray:
    """Sum over every ``ky x kx`` window of ``a`` (valid region only)."""
    c = np.zeros((a.shape[0] + 1, a.shape[1] + 1), dtype=np.float64)
    c[1:, 1:] = np.cumsum(np.cumsum(a, axis=0), axis=1)
    return c[ky:, kx:] - c[:-ky, kx:] - c[ky:, :-kx] + c[:-ky, :-kx]


def _pad(a: np.ndarray, py: int, px: int) -> np.ndarray:
    # numpy's reflect mode needs the pad to be smaller than the dimension
    out = a
    while py > 0 or px > 0:
        sy = min(py, out.shape[0] - 1)
        sx = min(px, out.shape[1] - 1)
        if sy == 0 and sx == 0:
            return np.pad(out, ((py, py), (px, px)), mode="edge")
        out = np.pad(out, ((sy, sy), (sx, sx)), mode="reflect")
        py, px = py - sy, px - sx
    return out


def gaussian_kernel_1d(size: int, sigma: float | None = None) -> np.ndarray:
    """Normalized Gaussian taps; ``sigma`` defaults to the usual size rule."""
    if sigma is None or sigma <= 0:
        sigma = 0.3 * ((size - 1) * 0.5 - 1) + 0.8
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2
    k = np.exp(-(x * x) / (2 * sigma * sigma))
    return k / k.sum()


def correlate_separable(g: np.ndarray, ky: np.ndarray, kx: np.ndarray) -> np.ndarray:
    """Separable correlation with reflected borders, float64 result."""
    ry, rx = len(ky) // 2, len(kx) // 2
    p = _pad(np.asarray(g, dtype=np.float64), ry, rx)
    h, w = g.shape
    tmp = np.zeros((p.shape[0], w))
    for j, t in enumerate(kx):
        tmp += t * p[:, j:j + w]
    out = np.zeros((h, w))
    for i, t in enumerate(ky):
        out += t * tmp[i:i + h, :]
    return out


# --------------------------------------------------------------------------
# colour and intensity


def to_grayscale(img: np.ndarray) -> np.ndarray:
    """ITU-R 601 luma, rounded half up. Gray input is copied."""
    img = np.asarray(img)
    if img.ndim == 2:
        return img.astype(np.uint8, copy=True)
    if img.ndim == 3 and img.shape[2] == 1:
        return img[:, :, 0].astype(np.uint8, copy=True)
    if img.ndim == 3 and img.shape[2] == 3:
        return _round_u8(img.astype(np.float64) @ _LUMA)
    raise ValueError(f"unsupported channel layout {img.shape}")


def mean_brightness(g: np.ndarray) -> float:
    _check_gray(g)
    return float(np.mean(g, dtype=np.float64))


def linear_scale(g: np.ndarray, gain: float, bias: float) -> np.ndarray:
    """``clamp(round(gain*v + bias))`` per pixel."""
    if gain < 0:
        raise ValueError("gain must be non-negative")
    return _round_u8(gain * np.asarray(g, dtype=np.float64) + bias)


# --------------------------------------------------------------------------
# contrast


def clahe(g: np.ndarray, clip_limit: float = 2.0, tiles: tuple[int, int] = (8, 8)) -> np.ndarray:
    """Contrast-limited adaptive histogram equalization.

    ``tiles`` is ``(columns, rows)``. Each tile histogram is clipped at
    ``clip_limit * tile_area / 256`` counts, the excess is spread uniformly
    over all bins, and the per-tile lookup tables are bilinearly blended
    between tile centres. Images not divisible by the grid are reflect-padded
    for the histogram pass. ``clip_limit=inf`` disables clipping.
    """
    _check_gray(g)
    tx, ty = tiles
    if tx < 1 or ty < 1:
        raise ValueError("tile grid must be at least 1x1")
    if clip_limit <= 0:
        raise ValueError("clip_limit must be positive")
    h, w = g.shape
    if h < ty or w < tx:
        raise ValueError(f"image {w}x{h} is smaller than the {tx}x{ty} tile grid")

    th, tw = -(-h // ty), -(-w // tx)
    padded = g
    if th * ty != h or tw * tx != w:
        padded = np.pad(g, ((0, th * ty - h), (0, tw * tx - w)), mode="reflect" if h > 1 and w > 1 else "edge")
    area = th * tw

    luts = np.empty((ty, tx, 256), dtype=np.float64)
    for r in range(ty):
        for c in range(tx):
            tile = padded[r * th:(r + 1) * th, c * tw:(c + 1) * tw]
            hist = np.bincount(tile.ravel(), minlength=256).astype(np.int64)
            if math.isfinite(clip_limit):
                limit = max(int(clip_limit * area / 256), 1)
                excess = int(np.sum(np.maximum(hist - limit, 0)))
                hist = np.minimum(hist, limit)
                hist += excess // 256
                residual = excess % 256
                if residual:
                    step = max(256 // residual, 1)
                    idx = np.arange(0, 256, step)[:residual]
                    hist[idx] += 1
            luts[r, c] = _round_u8(np.cumsum(hist) * (255.0 / area)).astype(np.float64)

    # bilinear blend between tile centres
    ys = (np.arange(h) + 0.5) / th - 0.5
    xs = (np.arange(w) + 0.5) / tw - 0.5
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    y1 = np.clip(y0 + 1, 0, ty - 1)
    x1 = np.clip(x0 + 1, 0, tx - 1)
    y0 = np.clip(y0, 0, ty - 1)
    x0 = np.clip(x0, 0, tx - 1)
    v = g.astype(np.intp)
    Y0, X0 = y0[:, None], x0[None, :]
    Y1, X1 = y1[:, None], x1[None, :]
    out = ((1 - fy) * ((1 - fx) * luts[Y0, X0, v] + fx * luts[Y0, X1, v])
           + fy * ((1 - fx) * luts[Y1, X0, v] + fx * luts[Y1, X1, v]))
    return _round_u8(out)


# --------------------------------------------------------------------------
# denoising


def denoise_nlmeans(g: np.ndarray, h: float = 10.0, template: int = 7, search: int = 21) -> np.ndarray:
    """Non-local means.

    Every pixel becomes the weighted average of the pixels in its
    ``search`` window, weighted by ``exp(-d2 / h**2)`` where ``d2`` is the
    mean squared difference between the two ``template`` patches.
    """
    _check_gray(g)
    if template % 2 == 0 or search % 2 == 0:
        raise ValueError("template and search windows must be odd")
    if template > search:
        raise ValueError("template window must not exceed the search window")
    rt, rs = template // 2, search // 2
    hgt, wid = g.shape
    src = np.asarray(g, dtype=np.float64)
    p = _pad(src, rs + rt, rs + rt)
    centre = p[rs:rs + hgt + 2 * rt, rs:rs + wid + 2 * rt]
    h2 = max(h * h, np.finfo(np.float64).tiny)
    npix = template * template

    num = np.zeros((hgt, wid))
    den = np.zeros((hgt, wid))
    for dy in range(-rs, rs + 1):
        for dx in range(-rs, rs + 1):
            other = p[rs + dy:rs + dy + hgt + 2 * rt, rs + dx:rs + dx + wid + 2 * rt]
            d2 = _box_sum((centre - other) ** 2, template, template) / npix
            wgt = np.exp(-d2 / h2)
            num += wgt * other[rt:rt + hgt, rt:rt + wid]
            den += wgt
    return _round_u8(num / den)


def bilateral_filter(g: np.ndarray, diameter: int = 9, sigma_color: float = 75.0,
                     sigma_space: float = 75.0) -> np.ndarray:
    """Edge-preserving smoothing over a square ``diameter`` window."""
    _check_gray(g)
    if diameter < 1 or diameter % 2 == 0:
        raise ValueError("diameter must be odd and >= 1")
    r = diameter // 2
    hgt, wid = g.shape
    src = np.asarray(g, dtype=np.float64)
    p = _pad(src, r, r)
    inv_space = 1.0 / (2 * sigma_space * sigma_space)
    inv_color = 0.0 if math.isinf(sigma_color) else 1.0 / (2 * sigma_color * sigma_color)
    num = np.zeros((hgt, wid))
    den = np.zeros((hgt, wid))
    for dy in range(-r, r + 1):
        for dx in range(-r, r + 1):
            nb = p[r + dy:r + dy + hgt, r + dx:r + dx + wid]
            wgt = math.exp(-(dy * dy + dx * dx) * inv_space) * np.exp(-((nb - src) ** 2) * inv_color)
            num += wgt * nb
            den += wgt
    return _round_u8(num / den)


# --------------------------------------------------------------------------
# thresholding and morphology


def adaptive_threshold_gaussian(g: np.ndarray, block: int = 11, c: float = 2.0) -> np.ndarray:
    """1 where a pixel exceeds its Gaussian-weighted local mean minus ``c``."""
    _check_gray(g)
    if block < 3 or block % 2 == 0:
        raise ValueError("block must be odd and >= 3")
    k = gaussian_kernel_1d(block)
    local = correlate_separable(g, k, k)
    return (g.astype(np.float64) > local - c).astype(np.uint8)


def _erode(m: np.ndarray, fp: np.ndarray) -> np.ndarray:
    ry, rx = fp.shape[0] // 2, fp.shape[1] // 2
    p = _pad(m.astype(bool), ry, rx)
    h, w = m.shape
    out = np.ones((h, w), dtype=bool)
    for i, j in zip(*np.nonzero(fp)):
        out &= p[i:i + h, j:j + w]
    return out


def _dilate(m: np.ndarray, fp: np.ndarray) -> np.ndarray:
    ry, rx = fp.shape[0] // 2, fp.shape[1] // 2
    p = _pad(m.astype(bool), ry, rx)
    h, w = m.shape
    out = np.zeros((h, w), dtype=bool)
    # reflected footprint so that dilation is the dual of erosion
    for i, j in zip(*np.nonzero(fp[::-1, ::-1])):
        out |= p[i:i + h, j:j + w]
    return out


def morphology(m: np.ndarray, op: str, kernel: Kernel = Kernel(), iterations: int = 1) -> np.ndarray:
    """Binary erode/dilate/open/close.

    ``open`` erodes ``iterations`` times then dilates ``iterations`` times;
    ``close`` does the reverse.
    """
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    fp = kernel.footprint()
    out = np.asarray(m).astype(bool)
    op = op.lower()
    if op == "erode":
        steps = [_erode] * iterations
    elif op == "dilate":
        steps = [_dilate] * iterations
    elif op == "open":
        steps = [_erode] * iterations + [_dilate] * iterations
    elif op == "close":
        steps = [_dilate] * iterations + [_erode] * iterations
    else:
        raise ValueError(f"unknown morphology op {op!r}")
    for step in steps:
        out = step(out, fp)
    return out.astype(np.uint8)


def label_components(m: np.ndarray) -> tuple[np.ndarray, int]:
    """8-connected labels (0 = background) and the number of components."""
    labels, n = ndimage.label(np.asarray(m).astype(bool), structure=_EIGHT_CONNECTED)
    return labels, int(n)


def component_areas(m: np.ndarray) -> list[int]:
    labels, n = label_components(m)
    return [int(a) for a in np.bincount(labels.ravel(), minlength=n + 1)[1:]]


def connected_components_filter(m: np.ndarray, min_area: int) -> np.ndarray:
    """Zero every 8-connected component with fewer than ``min_area`` pixels."""
    if min_area < 0:
        raise ValueError("min_area must be >= 0")
    labels, n = label_components(m)
    if n == 0:
        return np.zeros_like(m, dtype=np.uint8)
    areas = np.bincount(labels.ravel(), minlength=n + 1)
    keep = areas >= min_area
    keep[0] = False
    return keep[labels].astype(np.uint8)


# --------------------------------------------------------------------------
# geometry


def fit_max_dim(width: int, height: int, max_dim: int) -> tuple[int, int]:
    """Target size that caps the longest side at ``max_dim`` (never enlarges)."""
    longest = max(width, height)
    if longest <= max_dim:
        return width, height
    scale = max_dim / longest
    return max(1, int(math.floor(width * scale + 0.5))), max(1, int(math.floor(height * scale + 0.5)))


def _src_coords(n_out: int, n_in: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    scale = n_in / n_out
    s = (np.arange(n_out) + 0.5) * scale - 0.5
    s = np.clip(s, 0, n_in - 1)
    i0 = np.floor(s).astype(int)
    i1 = np.minimum(i0 + 1, n_in - 1)
    return i0, i1, s - i0


def resize(img: np.ndarray, target: tuple[int, int] | None = None, max_dim: int | None = None) -> np.ndarray:
    """Bilinear resize to ``target=(w, h)`` or to fit within ``max_dim``."""
    img = np.asarray(img)
    h, w = img.shape[:2]
    if (target is None) == (max_dim is None):
        raise ValueError("give exactly one of target or max_dim")
    tw, th = target if target is not None else fit_max_dim(w, h, max_dim)
    if tw < 1 or th < 1:
        raise ValueError("target dimensions must be >= 1")
    if (tw, th) == (w, h):
        return img.copy()
    y0, y1, fy = _src_coords(th, h)
    x0, x1, fx = _src_coords(tw, w)
    src = img.astype(np.float64)
    if img.ndim == 3:
        fy, fx = fy[:, None, None], fx[None, :, None]
    else:
        fy, fx = fy[:, None], fx[None, :]
    top = src[y0][:, x0] * (1 - fx) + src[y0][:, x1] * fx
    bot = src[y1][:, x0] * (1 - fx) + src[y1][:, x1] * fx
    return _round_u8(top * (1 - fy) + bot * fy)


def resize_nearest(a: np.ndarray, target: tuple[int, int]) -> np.ndarray:
    tw, th = target
    h, w = a.shape[:2]
    ys = np.minimum(np.floor((np.arange(th) + 0.5) * h / th).astype(int), h - 1)
    xs = np.minimum(np.floor((np.arange(tw) + 0.5) * w / tw).astype(int), w - 1)
    return a[ys][:, xs].copy()


# --------------------------------------------------------------------------
# file I/O


def decode_image(data: bytes) -> np.ndarray:
    """Decode PNG/JPEG bytes into a gray or RGB ``uint8`` array."""
    try:
        with PILImage.open(io.BytesIO(data)) as im:
            im.load()
            if im.mode in ("L", "1", "I;16", "I"):
                im = im.convert("L")
            elif im.mode != "RGB":
                im = im.convert("RGB")
            arr = np.asarray(im, dtype=np.uint8).copy()
    except Exception as exc:  # Pillow raises many unrelated types
        raise ImageDecodeError(str(exc) or type(exc).__name__) from exc
    if arr.size == 0:
        raise ImageDecodeError("empty image")
    return arr


def read_image(path: str | Path) -> np.ndarray:
    return decode_image(Path(path).read_bytes())


def encode_png(img: np.ndarray) -> bytes:
    buf = io.BytesIO()
    PILImage.fromarray(np.ascontiguousarray(img, dtype=np.uint8)).save(buf, format="PNG")
    return buf.getvalue()


def mask_to_png(mask: np.ndarray) -> bytes:
    """PNG bytes of a binary mask stored as {0, 255}."""
    return encode_png((np.asarray(mask) > 0).astype(np.uint8) * 255)


def read_mask(path: str | Path) -> np.ndarray:
    g = to_grayscale(read_image(path))
    return (g > 127).astype(np.uint8)


def write_atomic(path: str | Path, data: bytes) -> Path:
    """Write ``data`` to a sibling temp file, then rename over ``path``."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    with os.fdopen(fd, "wb") as fh:
        fh.write(data)
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)
    return path
