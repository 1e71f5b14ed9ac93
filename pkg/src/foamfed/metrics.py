"""Segmentation metrics and training losses."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

EPS = 1e-7
DICE_SMOOTH = 1.0


@dataclass(frozen=True)
class RoundMetrics:
    loss: float
    iou: float
    dice: float
    pixel_accuracy: float

    def __post_init__(self):
        for name, value in asdict(self).items():
            if not math.isfinite(value):
                raise ValueError(f"metric {name} is not finite: {value}")

    def as_dict(self) -> dict[str, float]:
        return asdict(self)


@dataclass(frozen=True)
class LossConfig:
    alpha: float = 0.5
    score_weight: float = 0.05

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        if self.score_weight < 0:
            raise ValueError("score_weight must be >= 0")


def _pair(pred, gt) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(pred)
    b = np.asarray(gt)
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")
    return a.astype(bool), b.astype(bool)


def dice(pred, gt) -> float:
    a, b = _pair(pred, gt)
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.count_nonzero(a & b)) / total


def iou(pred, gt) -> float:
    a, b = _pair(pred, gt)
    union = int(np.count_nonzero(a | b))
    if union == 0:
        return 1.0
    return int(np.count_nonzero(a & b)) / union


def pixel_accuracy(pred, gt) -> float:
    a, b = _pair(pred, gt)
    return int(np.count_nonzero(a == b)) / a.size


def dice_loss(pred, gt, smooth: float = DICE_SMOOTH) -> float:
    """``1 - soft Dice`` on a probability map."""
    p = np.clip(np.asarray(pred, dtype=np.float64), EPS, 1 - EPS)
    g = np.asarray(gt, dtype=np.float64)
    if p.shape != g.shape:
        raise ValueError(f"dimension mismatch: {p.shape} vs {g.shape}")
    return 1.0 - (2.0 * float(np.sum(p * g)) + smooth) / (float(p.sum()) + float(g.sum()) + smooth)


def bce_loss(pred, gt) -> float:
    p = np.clip(np.asarray(pred, dtype=np.float64), EPS, 1 - EPS)
    g = np.asarray(gt, dtype=np.float64)
    if p.shape != g.shape:
        raise ValueError(f"dimension mismatch: {p.shape} vs {g.shape}")
    return float(-np.mean(g * np.log(p) + (1 - g) * np.log(1 - p)))


def seg_loss(pred, gt, cfg: LossConfig = LossConfig()) -> float:
    """Blend ``alpha * DiceLoss + (1 - alpha) * BCE`` of a probability map."""
    return cfg.alpha * dice_loss(pred, gt) + (1 - cfg.alpha) * bce_loss(pred, gt)


def score_loss(score: float, pred, gt) -> float:
    """Absolute gap between a predicted quality score and the true IoU."""
    if not 0.0 <= score <= 1.0:
        raise ValueError("score must lie in [0, 1]")
    return abs(score - iou(pred, gt))


def mask_metrics(pred, gt, loss: float = 0.0) -> RoundMetrics:
    return RoundMetrics(loss=loss, iou=iou(pred, gt), dice=dice(pred, gt),
                        pixel_accuracy=pixel_accuracy(pred, gt))


def weighted_average(metrics: list[RoundMetrics], weights: list[int]) -> RoundMetrics:
    """Sample-weighted mean of several metric records."""
    if not metrics or len(metrics) != len(weights):
        raise ValueError("need one weight per metric record")
    total = float(sum(weights))
    if total <= 0:
        raise ValueError("weights must sum to a positive number")
    fields = {}
    for name in ("loss", "iou", "dice", "pixel_accuracy"):
        fields[name] = sum(w * getattr(m, name) for m, w in zip(metrics, weights)) / total
    return RoundMetrics(**fields)
