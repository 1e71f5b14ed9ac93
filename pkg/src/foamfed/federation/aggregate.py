"""Sample-weighted federated averaging, checkpointing and the metrics CSV."""

from __future__ import annotations

import csv
import logging
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from ..metrics import RoundMetrics, weighted_average
from ..model import ModelParams, manifest_of
from .wire import save_checkpoint

log = logging.getLogger(__name__)

CSV_HEADER = ["round", "loss", "iou", "pixel_accuracy", "dice"]


@dataclass
class ClientUpdate:
    params: ModelParams
    num_samples: int
    metrics: RoundMetrics
    client_id: int = 0

    def __post_init__(self):
        if self.num_samples < 1:
            raise ValueError("num_samples must be >= 1")


def aggregate_fit(rnd: int, updates: Sequence[ClientUpdate]) -> tuple[ModelParams, RoundMetrics] | None:
    """Weighted mean ``sum_k (n_k / n) * theta_k`` of the client parameters.

    Accumulates in float64 in the order given and casts back to each
    tensor's dtype. Returns ``None`` (with a warning) when there are no
    updates.
    """
    if not updates:
        log.warning("round %d: no fit results to aggregate", rnd)
        return None
    ref = manifest_of(updates[0].params)
    for u in updates[1:]:
        if manifest_of(u.params) != ref or list(u.params) != list(ref):
            raise ValueError(f"round {rnd}: client {u.client_id} sent a different tensor manifest")
    log.info("round %d: aggregating %d updates", rnd, len(updates))
    total = sum(u.num_samples for u in updates)
    out: ModelParams = {}
    for name in ref:
        acc = np.zeros(ref[name], dtype=np.float64)
        for u in updates:
            acc += (u.num_samples / total) * np.asarray(u.params[name], dtype=np.float64)
        out[name] = acc.astype(updates[0].params[name].dtype)
    metrics = weighted_average([u.metrics for u in updates], [u.num_samples for u in updates])
    log.info("round %d: %s", rnd, metrics.as_dict())
    return out, metrics


def checkpoint_path(save_dir, rnd: int) -> Path:
    return Path(save_dir) / f"federated_round_{rnd}.fp"


def save_aggregated_model(rnd: int, params: ModelParams, save_dir, manifest: dict[str, tuple[int, ...]]) -> Path:
    """Write the round checkpoint, dropping tensors that don't fit ``manifest``."""
    kept: ModelParams = {}
    mismatched = []
    for name, tensor in params.items():
        if name in manifest and tuple(tensor.shape) == tuple(manifest[name]):
            kept[name] = tensor
        else:
            mismatched.append(name)
    missing = [n for n in manifest if n not in params]
    if mismatched:
        log.warning("round %d: dropped tensors not matching the model manifest: %s", rnd, ", ".join(mismatched))
    if missing:
        log.warning("round %d: aggregated model lacks tensors: %s", rnd, ", ".join(missing))
    Path(save_dir).mkdir(parents=True, exist_ok=True)
    path = save_checkpoint(checkpoint_path(save_dir, rnd), kept)
    log.info("round %d: saved %s", rnd, path)
    return path


class MetricsCSV:
    """Append-only ``round,loss,iou,pixel_accuracy,dice`` log."""

    def __init__(self, path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        with open(self.path, "w", newline="") as fh:
            csv.writer(fh).writerow(CSV_HEADER)

    def append(self, rnd: int, m: RoundMetrics) -> None:
        with open(self.path, "a", newline="") as fh:
            csv.writer(fh).writerow([rnd, repr(m.loss), repr(m.iou), repr(m.pixel_accuracy), repr(m.dice)])
            fh.flush()
            os.fsync(fh.fileno())


def read_metrics_csv(path) -> list[tuple[int, RoundMetrics]]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [(int(r["round"]), RoundMetrics(float(r["loss"]), float(r["iou"]), float(r["dice"]),
                                           float(r["pixel_accuracy"]))) for r in rows]
