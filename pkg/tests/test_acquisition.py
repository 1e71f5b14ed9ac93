import random
from datetime import datetime, timedelta

import numpy as np
import pytest
from stores import T0, ListStore, intensity_params, make_store, rewrite_without, stamp, write_model

from foamfed import imaging
from foamfed.acquisition import (FAILED, INVALID, OK, REGISTRY_HEADER, AcquisitionConfig, ImageRecord, InvalidImage,
                                 LocalDirectoryStore, Monitor, Processor, Registry, StoreEntry, StoreError,
                                 parse_timestamp, poll_latest, process_one, self_check, validate_image,
                                 verify_and_backfill)
from foamfed.inference import InferenceConfig


def record(name, status=OK):
    return ImageRecord(name, T0, T0, 1.0 if status == OK else None, "", status)


@pytest.fixture
def store10(tmp_path):
    names = make_store(tmp_path / "store", 10)
    return LocalDirectoryStore(tmp_path / "store"), names


# -- timestamps and listing ---------------------------------------------------------


def test_parse_timestamp():
    assert parse_timestamp("cam_20240314_061500.png") == datetime(2024, 3, 14, 6, 15, 0)
    assert parse_timestamp("snapshot.png") is None
    assert parse_timestamp("cam_20241399_000000.png") is None


def test_store_lists_nested_and_falls_back_to_mtime(tmp_path):
    make_store(tmp_path / "s" / "day1", 2)
    (tmp_path / "s" / "plain.png").write_bytes(imaging.encode_png(np.full((64, 64), 9, np.uint8)))
    (tmp_path / "s" / "notes.txt").write_text("ignored")
    store = LocalDirectoryStore(tmp_path / "s")
    entries = store.list()
    assert len(entries) == 3
    assert store.fetch("plain.png")[:4] == b"\x89PNG"
    assert len(store.list(T0.date())) == 2


def test_store_root_that_is_not_a_directory(tmp_path):
    (tmp_path / "file").write_text("x")
    with pytest.raises(StoreError):
        LocalDirectoryStore(tmp_path / "file").list()
    with pytest.raises(StoreError):
        LocalDirectoryStore(tmp_path / "missing").list()


# -- polling -------------------------------------------------------------------------


def test_poll_picks_latest_unprocessed(tmp_path, store10):
    store, names = store10
    reg = Registry(tmp_path / "r.csv")
    assert poll_latest(store, reg, T0.date()) == names[-1]
    for n in names:
        reg.append(record(n))
    assert poll_latest(store, reg, T0.date()) is None


def test_poll_tie_breaks_on_larger_name(tmp_path):
    store = ListStore([StoreEntry("a.png", T0), StoreEntry("b.png", T0), StoreEntry("0.png", T0)])
    assert poll_latest(store, Registry(tmp_path / "r.csv"), T0.date()) == "b.png"


@pytest.mark.parametrize("seed", range(20))
def test_poll_matches_oracle_on_random_listings(tmp_path, seed):
    rng = random.Random(seed)
    entries = [StoreEntry(f"img{rng.randrange(10**6):06d}_{i}.png",
                          T0 + timedelta(seconds=rng.randrange(0, 600, 30))) for i in range(rng.randint(1, 30))]
    reg = Registry(tmp_path / f"r{seed}.csv")
    for e in rng.sample(entries, rng.randint(0, len(entries))):
        reg.append(record(e.name))
    todo = [e for e in entries if e.name not in reg]
    want = None
    if todo:
        best = max(e.captured_at for e in todo)
        want = max(e.name for e in todo if e.captured_at == best)
    assert poll_latest(ListStore(entries), reg, T0.date()) == want
    assert want is None or want not in reg


# -- registry ---------------------------------------------------------------------------


def test_registry_header_and_reload(tmp_path):
    reg = Registry(tmp_path / "r.csv")
    assert (tmp_path / "r.csv").read_text() == ",".join(REGISTRY_HEADER) + "\n"
    assert ",".join(REGISTRY_HEADER) == "name,captured_at,processed_at,foam_pct,mask_path,status"
    reg.append(record("a.png"))
    reg.append(record("b.png", INVALID))
    again = Registry(tmp_path / "r.csv")
    assert again.names() == {"a.png", "b.png"}
    assert again.get("a.png").foam_pct == 1.0 and again.get("b.png").foam_pct is None


def test_registry_ignores_duplicate_names(tmp_path):
    reg = Registry(tmp_path / "r.csv")
    first = reg.append(record("a.png"))
    assert reg.append(record("a.png", FAILED)) is first
    assert len((tmp_path / "r.csv").read_text().splitlines()) == 2


def test_registry_discards_torn_row(tmp_path):
    reg = Registry(tmp_path / "r.csv")
    reg.append(record("a.png"))
    with open(tmp_path / "r.csv", "ab") as fh:
        fh.write(b"b.png,2024-03-14T06:00:00,2024-03")
    again = Registry(tmp_path / "r.csv")
    assert again.names() == {"a.png"}
    assert (tmp_path / "r.csv").read_bytes().endswith(b"\n")
    again.append(record("c.png"))
    assert Registry(tmp_path / "r.csv").names() == {"a.png", "c.png"}


def test_registry_rejects_foreign_header(tmp_path):
    (tmp_path / "r.csv").write_text("a,b\n1,2\n")
    with pytest.raises(ValueError):
        Registry(tmp_path / "r.csv")


# -- validation and processing ---------------------------------------------------------


def test_validate_image_cases():
    rng = np.random.default_rng(0)
    good = imaging.encode_png(rng.integers(0, 256, (480, 640, 3)).astype(np.uint8))
    assert validate_image(good).shape == (480, 640, 3)
    cases = {"decode": good[: len(good) // 2], "constant": imaging.encode_png(np.zeros((80, 80), np.uint8)),
             "too-small": imaging.encode_png(rng.integers(0, 256, (32, 90)).astype(np.uint8))}
    for reason, data in cases.items():
        with pytest.raises(InvalidImage) as err:
            validate_image(data)
        assert err.value.reason == reason


def test_process_one_ok_and_idempotent(tmp_path, store10):
    store, names = store10
    reg = Registry(tmp_path / "r.csv")
    rec = process_one(names[0], store, reg, intensity_params(), InferenceConfig(), tmp_path / "masks")
    assert rec.status == OK and 0.0 <= rec.foam_pct <= 100.0
    assert rec.captured_at == T0
    mask = imaging.read_mask(rec.mask_path)
    assert 100.0 * mask.sum() / mask.size == rec.foam_pct
    again = process_one(names[0], store, reg, intensity_params(), InferenceConfig(), tmp_path / "masks")
    assert again is rec
    for n in names[1:4]:
        process_one(n, store, reg, intensity_params(), InferenceConfig(), tmp_path / "masks")
    assert len(Registry(tmp_path / "r.csv")) == 4
    assert len((tmp_path / "r.csv").read_text().splitlines()) == 5


# -- verification -------------------------------------------------------------------------


def test_backfill_recovers_deleted_rows(tmp_path, store10):
    store, names = store10
    path = tmp_path / "r.csv"
    proc = Processor(store, Registry(path), intensity_params(), tmp_path / "masks")
    assert sorted(verify_and_backfill(store, proc.registry, proc)) == sorted(names)
    assert verify_and_backfill(store, proc.registry, proc) == []
    rewrite_without(path, {names[2], names[7]})
    reg = Registry(path)
    proc = Processor(store, reg, intensity_params(), tmp_path / "masks")
    assert verify_and_backfill(store, reg, proc) == [names[2], names[7]]
    assert reg.names() == set(names)


def test_backfill_marks_corrupt_file_invalid(tmp_path, store10):
    store, names = store10
    (tmp_path / "store" / "cam_20240314_090000.png").write_bytes(b"\x89PNG truncated")
    reg = Registry(tmp_path / "r.csv")
    recovered = verify_and_backfill(store, reg, Processor(store, reg, intensity_params(), tmp_path / "m"))
    assert sorted(recovered) == sorted(names)
    assert reg.get("cam_20240314_090000.png").status == INVALID
    # listing minus registry leaves nothing; failures stay recorded, not retried
    assert {e.name for e in store.list()} - reg.names() == set()


# -- readiness and the loop -------------------------------------------------------------------


def config(tmp_path, **kw):
    make_store(tmp_path / "store", 3)
    write_model(tmp_path / "model.fp")
    base = dict(store_root=tmp_path / "store", registry_path=tmp_path / "reg" / "r.csv",
                model_path=tmp_path / "model.fp", poll_interval=0.01)
    base.update(kw)
    return AcquisitionConfig(**base)


def test_self_check_all_ready(tmp_path):
    ready = self_check(config(tmp_path))
    assert ready.ready and len(ready.checks) == 3


def test_self_check_missing_checkpoint(tmp_path):
    ready = self_check(config(tmp_path, model_path=tmp_path / "nope.fp"))
    assert not ready.ready and list(ready.failures()) == ["checkpoint"]


def test_self_check_unreadable_store(tmp_path):
    (tmp_path / "blocked").write_text("not a directory")
    ready = self_check(config(tmp_path, store_root=tmp_path / "blocked"))
    assert list(ready.failures()) == ["store"]


def test_mask_dir_defaults_next_to_registry(tmp_path):
    cfg = config(tmp_path)
    assert cfg.mask_dir == tmp_path / "reg" / "masks"
    with pytest.raises(ValueError):
        config(tmp_path, poll_interval=0)


def test_monitor_loop_processes_newest_each_tick(tmp_path):
    cfg = config(tmp_path)
    names = sorted(p.name for p in (tmp_path / "store").iterdir())
    mon = Monitor(cfg, clock=lambda: T0 + timedelta(hours=1))
    mon.run(ticks=2)
    assert mon.registry.names() == set(names[-2:])
    assert mon.verify() == names[:1]
    mon.run(ticks=2)
    assert len(Registry(cfg.registry_path)) == 3


def test_monitor_survives_new_files_between_ticks(tmp_path):
    cfg = config(tmp_path)
    mon = Monitor(cfg, clock=lambda: T0 + timedelta(hours=1))
    mon.verify()
    late = f"cam_{stamp(T0 + timedelta(minutes=45))}.png"
    make_store(tmp_path / "late", 1, start=T0 + timedelta(minutes=45), seed=9)
    (tmp_path / "late" / late).rename(tmp_path / "store" / late)
    mon.run(ticks=1)
    assert mon.registry.get(late).status == OK
