"""Command-line entry point: ``foamfed <subcommand> ...``.

Exit status is 0 on success, 1 on a runtime failure and 2 on a usage error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import imaging
from .dataset import BY_SOURCE, IID, AugmentConfig, load_pairs, save_pairs, synth_generate
from .federation.wire import ProtocolError, load_checkpoint, save_checkpoint
from .metrics import LossConfig
from .model import TrainConfig, init_params, train_local

log = logging.getLogger("foamfed")

LOG_LEVELS = {"error": logging.ERROR, "warn": logging.WARNING, "info": logging.INFO, "debug": logging.DEBUG}


def _size(text: str) -> tuple[int, int]:
    try:
        w, h = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected WxH, got {text!r}") from None
    if w < 1 or h < 1:
        raise argparse.ArgumentTypeError("size must be positive")
    return w, h


def _common() -> argparse.ArgumentParser:
    # SUPPRESS keeps a subcommand's missing flag from clobbering the top-level value
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--log-level", choices=list(LOG_LEVELS), default=argparse.SUPPRESS)
    p.add_argument("--seed", type=int, default=argparse.SUPPRESS)
    return p


def _add_training_flags(p: argparse.ArgumentParser, epochs: int = 30, lr: float = 1e-5) -> None:
    d = TrainConfig()
    p.add_argument("--epochs", type=int, default=epochs)
    p.add_argument("--steps", type=int, default=d.steps_per_epoch)
    p.add_argument("--batch", type=int, default=d.batch_size)
    p.add_argument("--lr", type=float, default=lr)
    p.add_argument("--weight-decay", type=float, default=d.weight_decay)
    p.add_argument("--alpha", type=float, default=d.loss.alpha)
    p.add_argument("--score-weight", type=float, default=d.loss.score_weight)
    p.add_argument("--augment", action="store_true", help="enable flip/brightness/affine augmentation")


def _train_config(args) -> TrainConfig:
    return TrainConfig(epochs=args.epochs, steps_per_epoch=args.steps, batch_size=args.batch, lr=args.lr,
                       weight_decay=args.weight_decay, loss=LossConfig(args.alpha, args.score_weight),
                       seed=args.seed, augment=AugmentConfig() if args.augment else None)


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = argparse.ArgumentParser(prog="foamfed", description="Federated foam segmentation toolkit.")
    parser.add_argument("--log-level", choices=list(LOG_LEVELS), default="warn")
    parser.add_argument("--seed", type=int, default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("maskgen", parents=[common], help="day/night automatic mask generation")
    p.add_argument("--input", required=True, type=Path)
    p.add_argument("--output", required=True, type=Path)
    p.add_argument("--night-threshold", type=float)
    p.add_argument("--min-area", type=int)
    p.add_argument("--config", type=Path)

    p = sub.add_parser("synth", parents=[common], help="write a procedural foam corpus")
    p.add_argument("--count", required=True, type=int)
    p.add_argument("--size", type=_size, default=(256, 256))
    p.add_argument("--output", required=True, type=Path)
    p.add_argument("--noise", type=float, default=6.0)
    p.add_argument("--source", default="synth")

    p = sub.add_parser("train", parents=[common], help="centralized local training")
    p.add_argument("--images", required=True, type=Path)
    p.add_argument("--masks", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--size", type=_size)
    p.add_argument("--init", type=Path)
    _add_training_flags(p)

    p = sub.add_parser("server", parents=[common], help="federated server")
    p.add_argument("--rounds", type=int, default=5)
    p.add_argument("--listen", default="0.0.0.0:8765")
    p.add_argument("--save-dir", required=True, type=Path)
    p.add_argument("--init", type=Path)
    p.add_argument("--min-clients", type=int, default=2)
    p.add_argument("--fraction-fit", type=float, default=1.0)
    p.add_argument("--fraction-eval", type=float, default=1.0)
    p.add_argument("--eval-samples", type=int, default=10)
    p.add_argument("--round-timeout", type=float, default=600.0)

    p = sub.add_parser("client", parents=[common], help="federated client")
    p.add_argument("--server", required=True)
    p.add_argument("--images", required=True, type=Path)
    p.add_argument("--masks", required=True, type=Path)
    p.add_argument("--size", type=_size)
    p.add_argument("--save", type=Path, help="where to persist the final global model")
    p.add_argument("--name", default="")
    _add_training_flags(p)

    p = sub.add_parser("infer", parents=[common], help="segment images with a checkpoint")
    p.add_argument("--model", required=True, type=Path)
    p.add_argument("--input", required=True, type=Path)
    p.add_argument("--output", required=True, type=Path)
    p.add_argument("--points", type=int, default=50)
    p.add_argument("--overlap", type=float, default=0.3)
    p.add_argument("--min-area-frac", type=float, default=0.002)
    p.add_argument("--max-dim", type=int, default=1024)

    p = sub.add_parser("monitor", parents=[common], help="image acquisition loop")
    p.add_argument("--store", required=True, type=Path)
    p.add_argument("--registry", required=True, type=Path)
    p.add_argument("--model", required=True, type=Path)
    p.add_argument("--masks", type=Path)
    p.add_argument("--interval", type=float, default=600.0)
    p.add_argument("--verify", action="store_true", help="one verification sweep, then exit")
    p.add_argument("--ticks", type=int, help="stop after this many polls")

    p = sub.add_parser("simulate", parents=[common], help="in-process federation over loopback")
    p.add_argument("--clients", type=int, default=2)
    p.add_argument("--rounds", type=int, default=5)
    p.add_argument("--partition", choices=[IID, BY_SOURCE], default=BY_SOURCE)
    p.add_argument("--samples", type=int, default=200)
    p.add_argument("--holdout", type=int, default=50)
    p.add_argument("--size", type=_size, default=(64, 64))
    p.add_argument("--images", type=Path)
    p.add_argument("--masks", type=Path)
    p.add_argument("--save-dir", type=Path, default=Path("runs/simulate"))
    p.add_argument("--init", type=Path)
    _add_training_flags(p, epochs=2, lr=0.05)
    return parser


# -- subcommands -------------------------------------------------------------


def cmd_maskgen(args) -> int:
    from .maskgen import MaskGenConfig, process_directory

    overrides = {"night_threshold": args.night_threshold, "min_area": args.min_area}
    if args.config is not None:
        cfg = MaskGenConfig.from_file(args.config, **overrides)
    else:
        cfg = MaskGenConfig(**{k: v for k, v in overrides.items() if v is not None})
    report = process_directory(args.input, args.output, cfg)
    print(f"processed={report.processed} skipped={report.skipped} day={report.day} night={report.night}")
    return 0


def cmd_synth(args) -> int:
    pairs = synth_generate(args.count, args.size, seed=args.seed, noise=args.noise, source_id=args.source)
    save_pairs(pairs, args.output)
    print(f"wrote {len(pairs)} pairs to {args.output}")
    return 0


def _load_corpus(args):
    pairs, skipped = load_pairs(args.images, args.masks, args.size)
    if skipped:
        log.warning("%d images skipped (no mask or undecodable)", len(skipped))
    return pairs


def cmd_train(args) -> int:
    pairs = _load_corpus(args)
    params = load_checkpoint(args.init) if args.init else init_params()
    params, metrics = train_local(params, pairs, _train_config(args))
    save_checkpoint(args.out, params)
    print(",".join(f"{k}={v:.6f}" for k, v in metrics.as_dict().items()))
    return 0


def cmd_server(args) -> int:
    from .federation.server import ServerConfig, server_run

    cfg = ServerConfig(rounds=args.rounds, save_dir=args.save_dir, listen=args.listen, initial_checkpoint=args.init,
                       min_available=args.min_clients, fraction_fit=args.fraction_fit,
                       fraction_eval=args.fraction_eval, eval_samples=args.eval_samples,
                       round_timeout=args.round_timeout)
    result = server_run(cfg)
    if not result.ok:
        log.error("federated run aborted: %s", result.aborted)
        return 1
    return 0


def cmd_client(args) -> int:
    from .federation.client import client_run

    return client_run(args.server, _load_corpus(args), _train_config(args), args.save, args.name)


def _image_paths(path: Path) -> list[Path]:
    if path.is_dir():
        return sorted(p for p in path.iterdir() if p.is_file() and not p.name.startswith("."))
    if path.is_file():
        return [path]
    raise FileNotFoundError(f"no such input: {path}")


def cmd_infer(args) -> int:
    from .inference import InferenceConfig, segment_foam
    from .maskgen import render_overlay

    cfg = InferenceConfig(n_points=args.points, overlap_threshold=args.overlap, min_area_frac=args.min_area_frac,
                          max_dim=args.max_dim)
    params = load_checkpoint(args.model)
    args.output.mkdir(parents=True, exist_ok=True)
    paths = _image_paths(args.input)
    failures = 0
    for path in paths:
        try:
            img = imaging.read_image(path)
        except imaging.ImageDecodeError as exc:
            log.warning("skipping %s: %s", path.name, exc)
            failures += 1
            continue
        mask, pct = segment_foam(img, params, cfg)
        work = imaging.resize(img, max_dim=cfg.max_dim)
        imaging.write_atomic(args.output / f"{path.stem}_mask.png", imaging.mask_to_png(mask))
        imaging.write_atomic(args.output / f"{path.stem}_overlay.png", imaging.encode_png(render_overlay(work, mask)))
        # repr round-trips, so the printed value can be checked exactly
        print(f"{path.stem},{pct!r}")
    return 1 if paths and failures == len(paths) else 0


def cmd_monitor(args) -> int:
    from .acquisition import AcquisitionConfig, Monitor, self_check

    cfg = AcquisitionConfig(args.store, args.registry, args.model, args.masks, args.interval)
    ready = self_check(cfg)
    if not ready.ready:
        for name, why in ready.failures().items():
            log.error("self-check %s failed: %s", name, why)
        return 1
    monitor = Monitor(cfg)
    if args.verify:
        done = monitor.verify()
        print(f"backfilled {len(done)} images")
        return 0
    monitor.run(args.ticks)
    return 0


def cmd_simulate(args) -> int:
    from .simulation import SimulationConfig, simulate

    cfg = SimulationConfig(n_clients=args.clients, rounds=args.rounds, partition_mode=args.partition, seed=args.seed,
                           samples=args.samples, holdout=args.holdout, size=args.size, train=_train_config(args),
                           save_dir=args.save_dir)
    pairs = None
    if args.images or args.masks:
        if not (args.images and args.masks):
            raise ValueError("--images and --masks must be given together")
        pairs = _load_corpus(args)
    init = load_checkpoint(args.init) if args.init else None
    result = simulate(cfg, pairs, initial_params=init)
    for rec in result.log.rounds:
        m = rec.fit
        print(f"round {rec.round}: loss={m.loss:.6f} iou={m.iou:.6f} dice={m.dice:.6f}")
    if result.holdout is not None:
        print(f"holdout: dice={result.holdout.dice:.6f} iou={result.holdout.iou:.6f}")
    if not result.log.ok:
        log.error("federated run aborted: %s", result.log.aborted)
        return 1
    return 0


COMMANDS = {
    "maskgen": cmd_maskgen, "synth": cmd_synth, "train": cmd_train, "server": cmd_server,
    "client": cmd_client, "infer": cmd_infer, "monitor": cmd_monitor, "simulate": cmd_simulate,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=LOG_LEVELS[args.log_level], format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (OSError, ValueError, RuntimeError, ProtocolError, imaging.ImageDecodeError) as exc:
        log.error("%s: %s", args.command, exc)
        return 1


if __name__ == "__main__":
    sys.exit(main())
