"""Continuous image ingestion: store polling, verification backfill,
validation, inference dispatch and an append-only CSV registry."""

from __future__ import annotations

import csv
import io
import logging
import os
import queue
import re
import threading
from dataclasses import dataclass, field
from datetime import date, datetime
from pathlib import Path
from typing import Callable, Protocol

import numpy as np

from . import imaging
from .federation.wire import load_checkpoint
from .inference import InferenceConfig, segment_foam
from .model import ModelParams, reference_manifest, manifest_of

log = logging.getLogger(__name__)

REGISTRY_HEADER = ["name", "captured_at", "processed_at", "foam_pct", "mask_path", "status"]
OK, INVALID, FAILED = "OK", "INVALID", "FAILED"
TIMESTAMP_PATTERN = r"(\d{8})_(\d{6})"
MIN_SIDE = 64
QUEUE_CAPACITY = 16
IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")


class StoreError(Exception):
    """Transient failure listing or fetching from an image store."""


class InvalidImage(ValueError):
    def __init__(self, reason: str, detail: str = ""):
        super().__init__(f"{reason}: {detail}" if detail else reason)
        self.reason = reason


@dataclass(frozen=True)
class StoreEntry:
    name: str
    captured_at: datetime


class ImageStore(Protocol):
    def list(self, day: date | None = None) -> list[StoreEntry]: ...

    def fetch(self, name: str) -> bytes: ...


def parse_timestamp(name: str, pattern: str = TIMESTAMP_PATTERN) -> datetime | None:
    m = re.search(pattern, name)
    if not m:
        return None
    try:
        return datetime.strptime(m.group(1) + m.group(2), "%Y%m%d%H%M%S")
    except ValueError:
        return None


class LocalDirectoryStore:
    """Image store backed by a directory tree (any depth, e.g. one folder per day).

    Capture times come from ``YYYYMMDD_HHMMSS`` in the filename, falling back
    to the file's modification time.
    """

    def __init__(self, root, pattern: str = TIMESTAMP_PATTERN):
        self.root = Path(root)
        self.pattern = pattern
        self._paths: dict[str, Path] = {}

    def list(self, day: date | None = None) -> list[StoreEntry]:
        try:
            os.listdir(self.root)
            paths = sorted(p for p in self.root.rglob("*")
                           if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES and not p.name.startswith("."))
        except OSError as exc:
            raise StoreError(f"cannot list {self.root}: {exc}") from exc
        out = []
        for p in paths:
            ts = parse_timestamp(p.name, self.pattern) or datetime.fromtimestamp(p.stat().st_mtime)
            self._paths[p.name] = p
            if day is None or ts.date() == day:
                out.append(StoreEntry(p.name, ts))
        return out

    def fetch(self, name: str) -> bytes:
        path = self._paths.get(name)
        if path is None:
            self.list()
            path = self._paths.get(name)
        if path is None:
            raise StoreError(f"{name} not in store")
        try:
            return path.read_bytes()
        except OSError as exc:
            raise StoreError(f"cannot read {name}: {exc}") from exc


@dataclass
class ImageRecord:
    name: str
    captured_at: datetime
    processed_at: datetime
    foam_pct: float | None
    mask_path: str
    status: str
    error: str = ""  # not persisted

    def row(self) -> list[str]:
        return [self.name, self.captured_at.isoformat(), self.processed_at.isoformat(),
                "" if self.foam_pct is None else repr(self.foam_pct), self.mask_path, self.status]

    @classmethod
    def from_row(cls, row: dict) -> "ImageRecord":
        return cls(row["name"], datetime.fromisoformat(row["captured_at"]),
                   datetime.fromisoformat(row["processed_at"]),
                   float(row["foam_pct"]) if row["foam_pct"] else None, row["mask_path"], row["status"])


class Registry:
    """Append-only CSV of processed images with an in-memory index.

    Each row is written with a single ``write`` followed by ``fsync``; a
    trailing partial row left by a crash is discarded on load.
    """

    def __init__(self, path):
        self.path = Path(path)
        self._lock = threading.Lock()
        self._records: dict[str, ImageRecord] = {}
        self._load()

    def _load(self) -> None:
        self.path.parent.mkdir(parents=True, exist_ok=True)
        if not self.path.exists() or self.path.stat().st_size == 0:
            with open(self.path, "w", newline="") as fh:
                fh.write(",".join(REGISTRY_HEADER) + "\n")
                fh.flush()
                os.fsync(fh.fileno())
            return
        raw = self.path.read_bytes()
        if not raw.endswith(b"\n"):
            cut = raw.rfind(b"\n") + 1
            log.warning("discarding torn registry row (%d bytes)", len(raw) - cut)
            with open(self.path, "r+b") as fh:
                fh.truncate(cut)
            raw = raw[:cut]
        reader = csv.DictReader(io.StringIO(raw.decode("utf-8")))
        if reader.fieldnames != REGISTRY_HEADER:
            raise ValueError(f"{self.path} has header {reader.fieldnames}, expected {REGISTRY_HEADER}")
        for row in reader:
            rec = ImageRecord.from_row(row)
            self._records[rec.name] = rec

    def __contains__(self, name: str) -> bool:
        with self._lock:
            return name in self._records

    def __len__(self) -> int:
        with self._lock:
            return len(self._records)

    def get(self, name: str) -> ImageRecord | None:
        with self._lock:
            return self._records.get(name)

    def names(self) -> set[str]:
        with self._lock:
            return set(self._records)

    def records(self) -> list[ImageRecord]:
        with self._lock:
            return list(self._records.values())

    def append(self, rec: ImageRecord) -> ImageRecord:
        buf = io.StringIO()
        csv.writer(buf, lineterminator="\n").writerow(rec.row())
        line = buf.getvalue().encode("utf-8")
        with self._lock:
            if rec.name in self._records:
                return self._records[rec.name]
            fd = os.open(self.path, os.O_WRONLY | os.O_APPEND)
            try:
                os.write(fd, line)
                os.fsync(fd)
            finally:
                os.close(fd)
            self._records[rec.name] = rec
        return rec


# --------------------------------------------------------------------------
# processing


def validate_image(data: bytes) -> np.ndarray:
    """Decode and sanity-check an image; raises :class:`InvalidImage`."""
    try:
        img = imaging.decode_image(data)
    except imaging.ImageDecodeError as exc:
        raise InvalidImage("decode", str(exc)) from exc
    h, w = img.shape[:2]
    if h < MIN_SIDE or w < MIN_SIDE:
        raise InvalidImage("too-small", f"{w}x{h}")
    if np.ptp(img) == 0:
        raise InvalidImage("constant", "zero variance")
    return img


def poll_latest(store: ImageStore, registry: Registry, day: date | None = None,
                exclude: set[str] | frozenset = frozenset()) -> str | None:
    """Newest file of ``day`` (default today) not yet in the registry.

    Equal timestamps are broken by the lexicographically larger name.
    """
    day = day or date.today()
    done = registry.names() | set(exclude)
    todo = [e for e in store.list(day) if e.name not in done]
    if not todo:
        return None
    return max(todo, key=lambda e: (e.captured_at, e.name)).name


class Processor:
    """Fetch -> validate -> segment -> write mask -> record, for one name."""

    def __init__(self, store: ImageStore, registry: Registry, params: ModelParams, mask_dir,
                 infer_cfg: InferenceConfig = InferenceConfig(), clock: Callable[[], datetime] = datetime.now):
        self.store = store
        self.registry = registry
        self.params = params
        self.mask_dir = Path(mask_dir)
        self.infer_cfg = infer_cfg
        self.clock = clock
        self.mask_dir.mkdir(parents=True, exist_ok=True)

    def __call__(self, name: str, captured_at: datetime | None = None) -> ImageRecord:
        return process_one(name, self.store, self.registry, self.params, self.infer_cfg, self.mask_dir,
                           captured_at, self.clock)


def process_one(name: str, store: ImageStore, registry: Registry, params: ModelParams,
                infer_cfg: InferenceConfig, mask_dir, captured_at: datetime | None = None,
                clock: Callable[[], datetime] = datetime.now) -> ImageRecord:
    """Process one store entry and append its record; a no-op if already recorded."""
    existing = registry.get(name)
    if existing is not None:
        return existing
    captured = captured_at or parse_timestamp(name) or clock()
    status, pct, mask_path, error = OK, None, "", ""
    try:
        img = validate_image(store.fetch(name))
        mask, pct = segment_foam(img, params, infer_cfg)
        path = Path(mask_dir) / f"{Path(name).stem}_mask.png"
        path.parent.mkdir(parents=True, exist_ok=True)
        imaging.write_atomic(path, imaging.mask_to_png(mask))
        mask_path = str(path)
    except InvalidImage as exc:
        status, pct, error = INVALID, None, str(exc)
    except (StoreError, ValueError, OSError, FloatingPointError) as exc:
        status, pct, error = FAILED, None, str(exc)
    if error:
        log.warning("%s: %s (%s)", name, status, error)
    rec = ImageRecord(name, captured, clock(), pct, mask_path, status, error)
    return registry.append(rec)


def verify_and_backfill(store: ImageStore, registry: Registry, processor: Callable[..., ImageRecord]) -> list[str]:
    """Process every stored image missing from the registry, oldest first.

    Returns the names that were recovered with status OK.
    """
    done = registry.names()
    missing = sorted((e for e in store.list(None) if e.name not in done), key=lambda e: (e.captured_at, e.name))
    recovered = []
    for entry in missing:
        rec = processor(entry.name, entry.captured_at)
        if rec.status == OK:
            recovered.append(entry.name)
    log.info("verification: %d missing, %d recovered", len(missing), len(recovered))
    return recovered


# --------------------------------------------------------------------------
# startup and the monitor loop


@dataclass
class AcquisitionConfig:
    store_root: Path
    registry_path: Path
    model_path: Path
    mask_dir: Path | None = None
    poll_interval: float = 600.0
    inference: InferenceConfig = field(default_factory=InferenceConfig)

    def __post_init__(self):
        if self.poll_interval <= 0:
            raise ValueError("poll_interval must be > 0")
        self.store_root = Path(self.store_root)
        self.registry_path = Path(self.registry_path)
        self.model_path = Path(self.model_path)
        self.mask_dir = Path(self.mask_dir) if self.mask_dir else self.registry_path.parent / "masks"


@dataclass
class Readiness:
    checks: dict[str, tuple[bool, str]]

    @property
    def ready(self) -> bool:
        return all(ok for ok, _ in self.checks.values())

    def failures(self) -> dict[str, str]:
        return {k: why for k, (ok, why) in self.checks.items() if not ok}


def self_check(cfg: AcquisitionConfig) -> Readiness:
    checks: dict[str, tuple[bool, str]] = {}
    try:
        LocalDirectoryStore(cfg.store_root).list(None)
        checks["store"] = (True, "")
    except StoreError as exc:
        checks["store"] = (False, str(exc))
    try:
        Registry(cfg.registry_path)
        checks["registry"] = (True, "")
    except (OSError, ValueError) as exc:
        checks["registry"] = (False, str(exc))
    try:
        params = load_checkpoint(cfg.model_path)
        expected = reference_manifest()
        if manifest_of(params) != expected:
            raise ValueError(f"manifest {manifest_of(params)} != {expected}")
        checks["checkpoint"] = (True, "")
    except Exception as exc:  # any failure to load is a readiness failure
        checks["checkpoint"] = (False, f"{type(exc).__name__}: {exc}")
    return Readiness(checks)


class Monitor:
    """Polling producer and processing consumer joined by a bounded queue."""

    def __init__(self, cfg: AcquisitionConfig, store: ImageStore | None = None,
                 clock: Callable[[], datetime] = datetime.now):
        self.cfg = cfg
        self.store = store or LocalDirectoryStore(cfg.store_root)
        self.registry = Registry(cfg.registry_path)
        self.params = load_checkpoint(cfg.model_path)
        self.clock = clock
        self.process = Processor(self.store, self.registry, self.params, cfg.mask_dir, cfg.inference, clock)
        self.queue: queue.Queue[str | None] = queue.Queue(maxsize=QUEUE_CAPACITY)
        self._pending: set[str] = set()
        self._pending_lock = threading.Lock()
        self.stop = threading.Event()

    def verify(self) -> list[str]:
        return verify_and_backfill(self.store, self.registry, self.process)

    def _produce(self, ticks: int | None) -> None:
        n = 0
        while not self.stop.is_set() and (ticks is None or n < ticks):
            try:
                with self._pending_lock:
                    pending = set(self._pending)
                name = poll_latest(self.store, self.registry, self.clock().date(), pending)
                if name is not None:
                    with self._pending_lock:
                        self._pending.add(name)
                    self.queue.put(name)  # blocks while the consumer is behind
            except StoreError as exc:
                log.warning("poll failed, retrying next tick: %s", exc)
            n += 1
            if ticks is None or n < ticks:
                self.stop.wait(self.cfg.poll_interval)
        self.queue.put(None)

    def _consume(self) -> None:
        while True:
            name = self.queue.get()
            if name is None:
                return
            try:
                self.process(name)
            finally:
                with self._pending_lock:
                    self._pending.discard(name)

    def run(self, ticks: int | None = None) -> None:
        producer = threading.Thread(target=self._produce, args=(ticks,), name="acq-poll", daemon=True)
        consumer = threading.Thread(target=self._consume, name="acq-process", daemon=True)
        consumer.start()
        producer.start()
        try:
            producer.join()
            consumer.join()
        except KeyboardInterrupt:
            self.stop.set()
            producer.join()
            consumer.join()
