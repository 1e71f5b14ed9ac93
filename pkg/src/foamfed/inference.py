"""Grid-prompted inference with score-ordered mask refinement and cleanup."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import imaging
from .imaging import ELLIPSE, Kernel
from .metrics import iou
from .model import ModelParams, PointPrompt, base_features, forward, prompt_features


@dataclass(frozen=True)
class InferenceConfig:
    n_points: int = 50
    max_dim: int = 1024
    overlap_threshold: float = 0.3
    min_area_frac: float = 0.002
    morph_kernel: Kernel = field(default_factory=lambda: Kernel(ELLIPSE, 5, 5))
    bilateral_diameter: int = 9
    bilateral_sigma_color: float = 75.0
    bilateral_sigma_space: float = 75.0
    nlmeans_h: float = 10.0
    nlmeans_template: int = 7
    nlmeans_search: int = 21
    prob_threshold: float = 0.5

    def __post_init__(self):
        if self.n_points < 1:
            raise ValueError("n_points must be >= 1")
        if not 0.0 <= self.overlap_threshold < 1.0:
            raise ValueError("overlap_threshold must lie in [0, 1)")
        if not 0.0 <= self.min_area_frac < 1.0:
            raise ValueError("min_area_frac must lie in [0, 1)")


@dataclass
class ScoredMask:
    mask: np.ndarray
    score: float
    prompt: PointPrompt


def generate_grid_points(w: int, h: int, n: int) -> list[PointPrompt]:
    """Cell centres of a ``ceil(sqrt(n))``-square grid, first ``n`` row-major."""
    if n < 1:
        raise ValueError("n must be >= 1")
    g = math.ceil(math.sqrt(n))
    pts = []
    for i in range(g):
        for j in range(g):
            if len(pts) == n:
                return pts
            pts.append(PointPrompt((2 * j + 1) * w // (2 * g), (2 * i + 1) * h // (2 * g), 1))
    return pts


def refine_masks(cands: Sequence[ScoredMask], overlap_threshold: float = 0.3,
                 shape: tuple[int, int] | None = None) -> np.ndarray:
    """Greedy union of candidates in descending score order.

    A candidate is accepted when its IoU with everything accepted so far is
    below ``overlap_threshold``. Ties in score are broken by prompt position
    (row-major).
    """
    if not cands:
        if shape is None:
            raise ValueError("empty candidate list needs an explicit shape")
        return np.zeros(shape, dtype=np.uint8)
    shapes = {c.mask.shape for c in cands}
    if len(shapes) != 1:
        raise ValueError(f"candidate masks differ in size: {sorted(shapes)}")
    order = sorted(range(len(cands)), key=lambda i: (-cands[i].score, cands[i].prompt.y, cands[i].prompt.x, i))
    union = np.zeros(cands[0].mask.shape, dtype=bool)
    for i in order:
        m = cands[i].mask.astype(bool)
        if iou(m, union) < overlap_threshold:
            union |= m
    return union.astype(np.uint8)


def foam_percentage(m: np.ndarray) -> float:
    m = np.asarray(m)
    if m.size == 0:
        raise ValueError("empty mask")
    return 100.0 * int(np.count_nonzero(m)) / m.size


def min_component_area(w: int, h: int, frac: float) -> int:
    return math.ceil(frac * w * h)


def preprocess(img: np.ndarray, cfg: InferenceConfig) -> np.ndarray:
    """Resize, bilateral filter and NL-means: the working gray image."""
    resized = imaging.resize(img, max_dim=cfg.max_dim)
    gray = imaging.to_grayscale(resized)
    smooth = imaging.bilateral_filter(gray, cfg.bilateral_diameter, cfg.bilateral_sigma_color,
                                      cfg.bilateral_sigma_space)
    return imaging.denoise_nlmeans(smooth, cfg.nlmeans_h, cfg.nlmeans_template, cfg.nlmeans_search)


def predict_prompts(work: np.ndarray, params: ModelParams, prompts: Sequence[PointPrompt],
                    threshold: float = 0.5) -> list[ScoredMask]:
    """One candidate per prompt: the thresholded component holding the prompt."""
    base = base_features(work)
    h, w = work.shape[:2]
    out = []
    for p in prompts:
        feats = np.concatenate([base, prompt_features((h, w), [p])])
        prob, score = forward(params, feats)
        fg = prob > threshold
        mask = np.zeros((h, w), dtype=np.uint8)
        if fg[p.y, p.x]:
            labels, _ = imaging.label_components(fg)
            mask = (labels == labels[p.y, p.x]).astype(np.uint8)
        out.append(ScoredMask(mask, score, p))
    return out


def segment_foam(img: np.ndarray, params: ModelParams, cfg: InferenceConfig = InferenceConfig()
                 ) -> tuple[np.ndarray, float]:
    """Full inference pipeline; the mask is at working (resized) resolution."""
    work = preprocess(img, cfg)
    h, w = work.shape
    prompts = generate_grid_points(w, h, cfg.n_points)
    cands = predict_prompts(work, params, prompts, cfg.prob_threshold)
    refined = refine_masks(cands, cfg.overlap_threshold, shape=(h, w))
    binary = (refined > 0).astype(np.uint8)
    opened = imaging.morphology(binary, "open", cfg.morph_kernel)
    closed = imaging.morphology(opened, "close", cfg.morph_kernel)
    final = imaging.connected_components_filter(closed, min_component_area(w, h, cfg.min_area_frac))
    return final, foam_percentage(final)
