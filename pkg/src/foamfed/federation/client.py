"""Federated client: receive the global model, train or evaluate locally,
reply with parameters and metrics. Raw samples never leave this process."""

from __future__ import annotations

import logging
import socket
import time
from dataclasses import fields
from pathlib import Path
from typing import Sequence

from ..dataset import SamplePair
from ..metrics import LossConfig, RoundMetrics
from ..model import ModelParams, TrainConfig, copy_params, evaluate, init_params, manifest_of, train_local
from .aggregate import ClientUpdate
from .server import parse_address
from .wire import (CLIENT_TO_SERVER, SERVER_TO_CLIENT, Connection, Error, EvaluateInstruction, EvaluateResult,
                   FitInstruction, FitResult, JoinAck, JoinRequest, ProtocolError, Shutdown, save_checkpoint)

log = logging.getLogger(__name__)

_TRAIN_KEYS = {f.name for f in fields(TrainConfig)} - {"loss", "augment"}


def round_seed(seed: int, rnd: int) -> int:
    """Training seed for a round; round 1 uses the configured seed itself."""
    return seed + rnd - 1


def apply_fit_config(cfg: TrainConfig, overrides: dict) -> TrainConfig:
    """Apply server-sent overrides (train fields plus ``alpha``/``score_weight``)."""
    kw = {k: overrides[k] for k in overrides if k in _TRAIN_KEYS}
    unknown = set(overrides) - _TRAIN_KEYS - {"alpha", "score_weight"}
    if unknown:
        log.warning("ignoring unknown fit config keys: %s", sorted(unknown))
    if "alpha" in overrides or "score_weight" in overrides:
        kw["loss"] = LossConfig(overrides.get("alpha", cfg.loss.alpha),
                                overrides.get("score_weight", cfg.loss.score_weight))
    return cfg.with_overrides(**kw) if kw else cfg


class FederatedClient:
    def __init__(self, dataset: Sequence[SamplePair], train_cfg: TrainConfig, name: str = "",
                 params: ModelParams | None = None, drop_on_round: int | None = None):
        if not dataset:
            raise ValueError("client dataset is empty")
        self.dataset = dataset
        self.train_cfg = train_cfg
        self.name = name
        self.params = copy_params(params) if params is not None else init_params()
        self.client_id: int | None = None
        self.final_params: ModelParams | None = None
        self.conn: Connection | None = None
        # test hook: vanish without replying when this fit round arrives
        self.drop_on_round = drop_on_round

    def get_parameters(self) -> ModelParams:
        return copy_params(self.params)

    def set_parameters(self, params: ModelParams) -> None:
        expected = manifest_of(self.params)
        got = manifest_of(params)
        if got != expected:
            bad = sorted(set(got.items()) ^ set(expected.items()))
            raise ValueError(f"parameter manifest mismatch: {bad}")
        self.params = copy_params({k: params[k] for k in expected})

    def fit(self, params: ModelParams, rnd: int = 1, overrides: dict | None = None) -> ClientUpdate:
        self.set_parameters(params)
        cfg = apply_fit_config(self.train_cfg, overrides or {})
        cfg = cfg.with_overrides(seed=round_seed(cfg.seed, rnd))
        log.info("round %d: starting local training on %d samples", rnd, len(self.dataset))
        self.params, metrics = train_local(self.params, self.dataset, cfg)
        log.info("round %d: training completed %s", rnd, metrics.as_dict())
        return ClientUpdate(self.get_parameters(), len(self.dataset), metrics, self.client_id or 0)

    def evaluate(self, params: ModelParams, n_samples: int) -> tuple[RoundMetrics, int]:
        self.set_parameters(params)
        n = min(n_samples, len(self.dataset))
        return evaluate(self.params, self.dataset, n_samples, self.train_cfg.loss), n

    # -- network loop -----------------------------------------------------

    def _connect(self, address: tuple[str, int], timeout: float) -> Connection:
        sock = socket.create_connection(address, timeout=timeout)
        conn = Connection(sock, CLIENT_TO_SERVER, SERVER_TO_CLIENT)
        conn.send(JoinRequest(self.name))
        ack = conn.recv(timeout=timeout)
        if not isinstance(ack, JoinAck):
            raise ProtocolError(f"expected JoinAck, got {type(ack).__name__}")
        self.client_id = ack.client_id
        log.info("joined as client %d", ack.client_id)
        return conn

    def _serve(self, conn: Connection, save_path) -> bool:
        """Handle instructions until shutdown; True on a clean shutdown."""
        while True:
            msg = conn.recv(timeout=None)
            if isinstance(msg, Shutdown):
                self.final_params = msg.params
                try:
                    self.set_parameters(msg.params)
                except ValueError as exc:
                    log.warning("final model rejected: %s", exc)
                if save_path is not None:
                    save_checkpoint(save_path, msg.params)
                log.info("shutdown received")
                return True
            if isinstance(msg, FitInstruction):
                if self.drop_on_round == msg.round:
                    conn.close()
                    raise ConnectionError("simulated drop")
                try:
                    update = self.fit(msg.params, msg.round, msg.config)
                except (ValueError, FloatingPointError) as exc:
                    conn.send(Error(f"fit failed: {exc}"))
                    continue
                conn.send(FitResult(msg.round, update.params, update.num_samples, update.metrics))
            elif isinstance(msg, EvaluateInstruction):
                try:
                    metrics, n = self.evaluate(msg.params, msg.n_samples)
                except ValueError as exc:
                    conn.send(Error(f"evaluate failed: {exc}"))
                    continue
                conn.send(EvaluateResult(msg.round, n, metrics))
            elif isinstance(msg, Error):
                log.error("server error: %s", msg.text)
            else:
                raise ProtocolError(f"unexpected {type(msg).__name__}")

    def run(self, server_address: str | tuple[str, int], save_path: str | Path | None = None,
            retries: int = 3, backoff: float = 0.5, timeout: float = 30.0) -> int:
        """Connect, serve until shutdown. Exit status 0 on a clean shutdown."""
        address = parse_address(server_address) if isinstance(server_address, str) else server_address
        failures = 0
        while True:
            try:
                self.conn = self._connect(address, timeout)
                failures = 0
                done = self._serve(self.conn, save_path)
                self.conn.close()
                if done:
                    return 0
            except ConnectionError as exc:
                if str(exc) == "simulated drop":
                    return 1
                failures += 1
                log.warning("connection problem (%d/%d): %s", failures, retries, exc)
            except (OSError, ProtocolError) as exc:
                failures += 1
                log.warning("connection problem (%d/%d): %s", failures, retries, exc)
            if self.conn is not None:
                self.conn.close()
            if failures >= retries:
                log.error("giving up after %d attempts", failures)
                return 1
            time.sleep(backoff * 2 ** (failures - 1))


def client_run(server_address, dataset: Sequence[SamplePair], cfg: TrainConfig, save_path=None,
               name: str = "") -> int:
    return FederatedClient(dataset, cfg, name=name).run(server_address, save_path)
