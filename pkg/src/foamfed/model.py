"""Reference prompt-conditioned segmentation model.

A per-pixel logistic regression over six handcrafted feature channels plus a
global quality-score head. It is the unit the federation moves around, so
parameters are an ordered ``dict[str, np.ndarray]`` of ``float32`` tensors.
Gradients are analytic and the optimizer is a from-scratch AdamW.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import TYPE_CHECKING, Protocol, Sequence

import numpy as np
from scipy.special import expit

from . import imaging
from .metrics import EPS, DICE_SMOOTH, LossConfig, RoundMetrics, dice, iou, pixel_accuracy, seg_loss

if TYPE_CHECKING:
    from .dataset import AugmentConfig, SamplePair

log = logging.getLogger(__name__)

ModelParams = dict  # name -> float32 ndarray, insertion-ordered

N_FEATURES = 6
LOCAL_WINDOW = 5
_SOBEL_MAX = 4.0 * math.sqrt(2.0)


@dataclass(frozen=True)
class PointPrompt:
    x: int
    y: int
    label: int  # 1 = foreground, 0 = background


class SegmentationModel(Protocol):
    """Surface the federation and inference code expect from a model."""

    def manifest(self) -> dict[str, tuple[int, ...]]: ...

    def init_params(self) -> ModelParams: ...

    def predict(self, params: ModelParams, features: np.ndarray) -> tuple[np.ndarray, float]: ...


# --------------------------------------------------------------------------
# parameters


def validate_name(name: str) -> None:
    if not name:
        raise ValueError("tensor name must be non-empty")
    if any(ord(ch) < 32 or ord(ch) == 127 for ch in name):
        raise ValueError(f"tensor name {name!r} contains control characters")


def manifest_of(params: ModelParams) -> dict[str, tuple[int, ...]]:
    return {name: tuple(t.shape) for name, t in params.items()}


def reference_manifest(n_features: int = N_FEATURES) -> dict[str, tuple[int, ...]]:
    return {"w": (n_features,), "b": (1,), "w_s": (n_features,), "b_s": (1,)}


def init_params(n_features: int = N_FEATURES) -> ModelParams:
    """All-zero parameters: every pixel starts at probability 0.5."""
    return {name: np.zeros(shape, dtype=np.float32) for name, shape in reference_manifest(n_features).items()}


def copy_params(params: ModelParams) -> ModelParams:
    return {name: np.array(t, copy=True) for name, t in params.items()}


def params_equal(a: ModelParams, b: ModelParams) -> bool:
    """Bit-exact equality of names, order, shapes, dtypes and data."""
    if list(a) != list(b):
        return False
    return all(
        a[k].shape == b[k].shape and a[k].dtype == b[k].dtype and a[k].tobytes() == b[k].tobytes()
        for k in a
    )


def _require(params: ModelParams, n_features: int) -> tuple[np.ndarray, float, np.ndarray, float]:
    for name, shape in reference_manifest(n_features).items():
        if name not in params:
            raise KeyError(f"missing tensor {name!r}")
        if tuple(np.shape(params[name])) != shape:
            raise ValueError(f"tensor {name!r} has shape {np.shape(params[name])}, expected {shape}")
    w = np.asarray(params["w"], dtype=np.float64)
    w_s = np.asarray(params["w_s"], dtype=np.float64)
    return w, float(params["b"][0]), w_s, float(params["b_s"][0])


# --------------------------------------------------------------------------
# prompts and features


def sample_seed(seed: int, index: int, epoch: int) -> int:
    """Per-sample seed derived from (global seed, sample index, epoch)."""
    return int(np.random.SeedSequence([seed, index, epoch]).generate_state(1, dtype=np.uint64)[0])


def generate_point_prompts(gt: np.ndarray, rng_seed: int) -> list[PointPrompt]:
    """One positive prompt per foam component, or a centre negative if none."""
    labels, n = imaging.label_components(gt)
    h, w = labels.shape
    if n == 0:
        return [PointPrompt(w // 2, h // 2, 0)]
    rng = np.random.default_rng(rng_seed)
    flat = labels.ravel()
    order = np.argsort(flat, kind="stable")
    counts = np.bincount(flat, minlength=n + 1)
    starts = np.concatenate([[0], np.cumsum(counts)])
    prompts = []
    for k in range(1, n + 1):
        pick = int(rng.integers(counts[k]))
        pos = int(order[starts[k] + pick])
        prompts.append(PointPrompt(pos % w, pos // w, 1))
    return prompts


def base_features(img: np.ndarray) -> np.ndarray:
    """The four image-only channels, ``(4, H, W)`` float32 in [0, 1]."""
    g = imaging.to_grayscale(img).astype(np.float64) / 255.0
    box = np.full(LOCAL_WINDOW, 1.0 / LOCAL_WINDOW)
    mean = imaging.correlate_separable(g, box, box)
    sq = imaging.correlate_separable(g * g, box, box)
    std = np.sqrt(np.maximum(sq - mean * mean, 0.0))
    smooth = np.array([1.0, 2.0, 1.0])
    diff = np.array([-1.0, 0.0, 1.0])
    gx = imaging.correlate_separable(g, smooth, diff)
    gy = imaging.correlate_separable(g, diff, smooth)
    mag = np.sqrt(gx * gx + gy * gy) / _SOBEL_MAX
    out = np.stack([g, mean, std, mag])
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def prompt_features(shape: tuple[int, int], prompts: Sequence[PointPrompt]) -> np.ndarray:
    """Distance-decay fields to the nearest positive and negative prompt."""
    h, w = shape
    tau = 0.1 * math.hypot(w, h)
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    out = np.zeros((2, h, w), dtype=np.float64)
    for channel, label in ((0, 1), (1, 0)):
        pts = [p for p in prompts if p.label == label]
        if not pts:
            continue
        d = np.full((h, w), np.inf)
        for p in pts:
            d = np.minimum(d, np.hypot(xs - p.x, ys - p.y))
        out[channel] = np.exp(-d / tau)
    return out.astype(np.float32)


def extract_features(img: np.ndarray, prompts: Sequence[PointPrompt], base: np.ndarray | None = None) -> np.ndarray:
    """``(6, H, W)`` float32 feature stack for the reference model."""
    if np.asarray(img).size == 0:
        raise ValueError("empty image")
    if base is None:
        base = base_features(img)
    return np.concatenate([base, prompt_features(base.shape[1:], prompts)])


# --------------------------------------------------------------------------
# forward and gradients


def forward(params: ModelParams, features: np.ndarray) -> tuple[np.ndarray, float]:
    """Probability map ``sigmoid(w.f + b)`` and score ``sigmoid(w_s.mean(f) + b_s)``."""
    k = features.shape[0]
    w, b, w_s, b_s = _require(params, k)
    f = np.asarray(features, dtype=np.float64)
    z = np.tensordot(w, f, axes=1) + b
    pooled = f.reshape(k, -1).mean(axis=1)
    score = float(expit(w_s @ pooled + b_s))
    return expit(z), score


@dataclass
class Example:
    """One training item: features, ground truth, and the score-head target."""

    features: np.ndarray
    gt: np.ndarray
    iou_target: float


def loss_and_gradient(params: ModelParams, batch: Sequence[Example],
                      loss_cfg: LossConfig = LossConfig()) -> tuple[float, ModelParams]:
    """Mean batch loss and its exact gradient.

    Per example the loss is ``seg_loss(p, gt) + score_weight * (score - iou)**2``.
    """
    if not batch:
        raise ValueError("empty batch")
    k = batch[0].features.shape[0]
    w, b, w_s, b_s = _require(params, k)
    alpha, sw = loss_cfg.alpha, loss_cfg.score_weight
    gw = np.zeros(k)
    gb = 0.0
    gws = np.zeros(k)
    gbs = 0.0
    total = 0.0
    for ex in batch:
        f = np.asarray(ex.features, dtype=np.float64).reshape(k, -1)
        g = np.asarray(ex.gt, dtype=np.float64).ravel()
        if f.shape[1] != g.size:
            raise ValueError("features and ground truth disagree in size")
        n = g.size
        raw = expit(w @ f + b)
        p = np.clip(raw, EPS, 1 - EPS)
        inside = (raw > EPS) & (raw < 1 - EPS)

        inter, psum, gsum = float(p @ g), float(p.sum()), float(g.sum())
        denom = psum + gsum + DICE_SMOOTH
        numer = 2.0 * inter + DICE_SMOOTH
        l_dice = 1.0 - numer / denom
        l_bce = float(-np.mean(g * np.log(p) + (1 - g) * np.log(1 - p)))
        d_dice = -(2.0 * g * denom - numer) / (denom * denom)
        d_bce = (-g / p + (1 - g) / (1 - p)) / n
        dz = (alpha * d_dice + (1 - alpha) * d_bce) * p * (1 - p) * inside

        pooled = f.mean(axis=1)
        score = float(expit(w_s @ pooled + b_s))
        gap = score - ex.iou_target
        ds = 2.0 * sw * gap * score * (1 - score)

        total += alpha * l_dice + (1 - alpha) * l_bce + sw * gap * gap
        gw += f @ dz
        gb += float(dz.sum())
        gws += ds * pooled
        gbs += ds
    m = len(batch)
    grads = {"w": gw / m, "b": np.array([gb / m]), "w_s": gws / m, "b_s": np.array([gbs / m])}
    return total / m, grads


def gradient(params: ModelParams, batch: Sequence[Example], loss_cfg: LossConfig = LossConfig()) -> ModelParams:
    return loss_and_gradient(params, batch, loss_cfg)[1]


def batch_loss(params: ModelParams, batch: Sequence[Example], loss_cfg: LossConfig = LossConfig()) -> float:
    """Reference loss evaluated through the metrics module (no gradients)."""
    total = 0.0
    for ex in batch:
        prob, score = forward(params, ex.features)
        total += seg_loss(prob, ex.gt, loss_cfg) + loss_cfg.score_weight * (score - ex.iou_target) ** 2
    return total / len(batch)


# --------------------------------------------------------------------------
# optimizer


@dataclass
class AdamWState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adamw_step(params: ModelParams, grads: ModelParams, state: AdamWState, lr: float, weight_decay: float,
               beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> tuple[ModelParams, AdamWState]:
    """One AdamW update with decoupled weight decay; returns new params and state."""
    if list(params) != list(grads):
        raise ValueError("parameter and gradient names differ")
    t = state.t + 1
    new_params, new_m, new_v = {}, {}, {}
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    for name, theta in params.items():
        g = np.asarray(grads[name], dtype=np.float64)
        if g.shape != theta.shape:
            raise ValueError(f"gradient for {name!r} has shape {g.shape}, expected {theta.shape}")
        m = state.m.get(name, np.zeros(theta.shape))
        v = state.v.get(name, np.zeros(theta.shape))
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        th = np.asarray(theta, dtype=np.float64)
        th = th - lr * weight_decay * th
        th = th - lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
        new_params[name] = th
        new_m[name] = m
        new_v[name] = v
    return new_params, AdamWState(new_m, new_v, t)


# --------------------------------------------------------------------------
# training and evaluation


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    steps_per_epoch: int = 9
    batch_size: int = 32
    lr: float = 1e-5
    weight_decay: float = 4e-5
    loss: LossConfig = field(default_factory=LossConfig)
    seed: int = 0
    augment: "AugmentConfig | None" = None

    def __post_init__(self):
        if self.epochs < 1 or self.steps_per_epoch < 1 or self.batch_size < 1:
            raise ValueError("epochs, steps_per_epoch and batch_size must be >= 1")
        if self.lr < 0:
            raise ValueError("lr must be non-negative")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")

    def with_overrides(self, **kw) -> "TrainConfig":
        return replace(self, **kw)


def _check_finite(params: ModelParams, where: str) -> None:
    for name, t in params.items():
        if not np.all(np.isfinite(t)):
            raise FloatingPointError(f"non-finite values in {name!r} after {where}")


def _example(params: ModelParams, features: np.ndarray, gt: np.ndarray) -> tuple[Example, np.ndarray, float]:
    prob, score = forward(params, features)
    pred = (prob > 0.5).astype(np.uint8)
    return Example(features, gt, iou(pred, gt)), pred, score


def train_local(params: ModelParams, dataset: Sequence["SamplePair"], cfg: TrainConfig) -> tuple[ModelParams, RoundMetrics]:
    """Minibatch AdamW for ``epochs x steps_per_epoch`` steps.

    Returns float32 parameters with the input manifest and the metrics
    averaged over the last epoch (thresholded at 0.5).
    """
    if not dataset:
        raise ValueError("empty dataset")
    n = len(dataset)
    names = list(params)
    dtypes = {k: params[k].dtype for k in names}
    theta = {k: np.asarray(params[k], dtype=np.float64) for k in names}
    state = AdamWState()
    cache: dict[int, np.ndarray] = {}

    if cfg.augment is not None:
        from .dataset import augment

    last_losses: list[float] = []
    last_metrics: list[tuple[float, float, float]] = []
    for epoch in range(cfg.epochs):
        perm = np.random.default_rng(np.random.SeedSequence([cfg.seed, epoch])).permutation(n)
        for step in range(cfg.steps_per_epoch):
            idx = perm[(step * cfg.batch_size + np.arange(cfg.batch_size)) % n]
            batch = []
            for i in idx:
                i = int(i)
                s_seed = sample_seed(cfg.seed, i, epoch)
                pair = dataset[i]
                if cfg.augment is not None:
                    pair = augment(pair, cfg.augment, s_seed)
                    base = base_features(pair.image)
                else:
                    if i not in cache:
                        cache[i] = base_features(pair.image)
                    base = cache[i]
                prompts = generate_point_prompts(pair.mask, s_seed)
                feats = extract_features(pair.image, prompts, base=base)
                ex, pred, _ = _example(theta, feats, pair.mask)
                batch.append(ex)
                if epoch == cfg.epochs - 1:
                    last_metrics.append((iou(pred, pair.mask), dice(pred, pair.mask), pixel_accuracy(pred, pair.mask)))
            loss, grads = loss_and_gradient(theta, batch, cfg.loss)
            if not math.isfinite(loss):
                raise FloatingPointError(f"non-finite loss at epoch {epoch} step {step}")
            theta, state = adamw_step(theta, grads, state, cfg.lr, cfg.weight_decay)
            _check_finite(theta, f"epoch {epoch} step {step}")
            if epoch == cfg.epochs - 1:
                last_losses.append(loss)
        log.debug("epoch %d done", epoch)

    out = {k: theta[k].astype(dtypes[k]) for k in names}
    arr = np.array(last_metrics)
    metrics = RoundMetrics(loss=float(np.mean(last_losses)), iou=float(arr[:, 0].mean()),
                           dice=float(arr[:, 1].mean()), pixel_accuracy=float(arr[:, 2].mean()))
    return out, metrics


def evaluate(params: ModelParams, dataset: Sequence["SamplePair"], n_samples: int,
             loss_cfg: LossConfig = LossConfig(), seed: int = 0) -> RoundMetrics:
    """Forward-only metrics over the first ``n_samples`` items."""
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    if not dataset:
        raise ValueError("empty dataset")
    theta = {k: np.asarray(v, dtype=np.float64) for k, v in params.items()}
    rows = []
    for i, pair in enumerate(dataset[:n_samples]):
        prompts = generate_point_prompts(pair.mask, sample_seed(seed, i, 0))
        feats = extract_features(pair.image, prompts)
        ex, pred, score = _example(theta, feats, pair.mask)
        loss = batch_loss(theta, [ex], loss_cfg)
        rows.append((loss, ex.iou_target, dice(pred, pair.mask), pixel_accuracy(pred, pair.mask)))
    arr = np.array(rows)
    return RoundMetrics(*(float(x) for x in arr.mean(axis=0)))


class ReferenceModel:
    """The logistic prompt model behind the ``SegmentationModel`` surface."""

    def __init__(self, n_features: int = N_FEATURES):
        self.n_features = n_features

    def manifest(self) -> dict[str, tuple[int, ...]]:
        return reference_manifest(self.n_features)

    def init_params(self) -> ModelParams:
        return init_params(self.n_features)

    def predict(self, params: ModelParams, features: np.ndarray) -> tuple[np.ndarray, float]:
        return forward(params, features)
