"""Federated server: client registry, synchronous rounds, aggregation and
checkpointing over the framed TCP protocol."""

from __future__ import annotations

import logging
import math
import socket
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

from ..metrics import RoundMetrics, weighted_average
from ..model import ModelParams, copy_params, manifest_of, reference_manifest, init_params
from .aggregate import ClientUpdate, MetricsCSV, aggregate_fit, save_aggregated_model
from .wire import (CLIENT_TO_SERVER, SERVER_TO_CLIENT, Connection, EvaluateInstruction, EvaluateResult,
                   FitInstruction, FitResult, JoinAck, JoinRequest, ProtocolError, Shutdown, load_checkpoint)

log = logging.getLogger(__name__)


class RoundFailed(RuntimeError):
    pass


def parse_address(addr: str) -> tuple[str, int]:
    host, _, port = addr.rpartition(":")
    if not host or not port.isdigit():
        raise ValueError(f"expected HOST:PORT, got {addr!r}")
    return host, int(port)


@dataclass
class ServerConfig:
    rounds: int = 5
    save_dir: Path = Path("runs/federated")
    fraction_fit: float = 1.0
    fraction_eval: float = 1.0
    min_fit: int = 1
    min_eval: int = 1
    min_available: int = 2
    manifest: dict = field(default_factory=reference_manifest)
    initial_checkpoint: Path | None = None
    listen: str = "127.0.0.1:8765"
    round_timeout: float = 600.0
    join_timeout: float | None = None
    eval_samples: int = 10
    fit_config: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.rounds < 1:
            raise ValueError("rounds must be >= 1")
        for f in (self.fraction_fit, self.fraction_eval):
            if not 0.0 < f <= 1.0:
                raise ValueError("fractions must lie in (0, 1]")
        if min(self.min_fit, self.min_eval, self.min_available) < 1:
            raise ValueError("minimum client counts must be >= 1")
        self.save_dir = Path(self.save_dir)


@dataclass
class RoundRecord:
    round: int
    clients: list[int]
    fit: RoundMetrics
    evaluate: RoundMetrics | None
    checkpoint: Path


@dataclass
class TrainingLog:
    rounds: list[RoundRecord] = field(default_factory=list)
    final_params: ModelParams | None = None
    aborted: str | None = None

    @property
    def ok(self) -> bool:
        return self.aborted is None


@dataclass
class _Client:
    client_id: int
    name: str
    conn: Connection
    alive: bool = True
    lock: threading.Lock = field(default_factory=threading.Lock)


class FederatedServer:
    """Runs ``cfg.rounds`` rounds of fit -> aggregate -> checkpoint -> evaluate.

    Call :meth:`start` to bind and begin accepting clients, then :meth:`run`.
    """

    def __init__(self, cfg: ServerConfig, initial_params: ModelParams | None = None):
        self.cfg = cfg
        if initial_params is None:
            initial_params = load_checkpoint(cfg.initial_checkpoint) if cfg.initial_checkpoint else init_params()
        if manifest_of(initial_params) != {k: tuple(v) for k, v in cfg.manifest.items()}:
            log.warning("initial parameters do not match the configured manifest")
        self.params = copy_params(initial_params)
        self._clients: list[_Client] = []
        self._cond = threading.Condition()
        self._sock: socket.socket | None = None
        self._closing = threading.Event()
        self._rr = 0
        self.address: tuple[str, int] | None = None

    # -- connection management ------------------------------------------

    def start(self) -> tuple[str, int]:
        host, port = parse_address(self.cfg.listen)
        sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        sock.bind((host, port))
        sock.listen(64)
        self._sock = sock
        self.address = sock.getsockname()[:2]
        threading.Thread(target=self._accept_loop, name="fl-accept", daemon=True).start()
        log.info("listening on %s:%d", *self.address)
        return self.address

    def _accept_loop(self) -> None:
        while not self._closing.is_set():
            try:
                sock, peer = self._sock.accept()
            except OSError:
                return
            threading.Thread(target=self._handshake, args=(sock, peer), daemon=True).start()

    def _handshake(self, sock: socket.socket, peer) -> None:
        conn = Connection(sock, SERVER_TO_CLIENT, CLIENT_TO_SERVER)
        try:
            msg = conn.recv(timeout=30.0)
            if not isinstance(msg, JoinRequest):
                raise ProtocolError(f"expected JoinRequest, got {type(msg).__name__}")
            with self._cond:
                client = _Client(len(self._clients), msg.name or f"client-{len(self._clients)}", conn)
                conn.send(JoinAck(client.client_id))
                self._clients.append(client)
                self._cond.notify_all()
            log.info("client %d (%s) joined from %s", client.client_id, client.name, peer)
        except (OSError, ProtocolError, ConnectionError) as exc:
            log.warning("rejected connection from %s: %s", peer, exc)
            conn.close()

    @property
    def num_joined(self) -> int:
        with self._cond:
            return len(self._clients)

    def wait_for_clients(self, n: int, timeout: float | None = None) -> bool:
        with self._cond:
            return self._cond.wait_for(lambda: len(self._clients) >= n, timeout=timeout)

    def _available(self) -> list[_Client]:
        with self._cond:
            return [c for c in self._clients if c.alive]

    def _drop(self, client: _Client, why) -> None:
        if client.alive:
            log.warning("dropping client %d: %s", client.client_id, why)
        client.alive = False
        client.conn.close()

    def _select(self, fraction: float) -> list[_Client]:
        pool = self._available()
        if not pool:
            return []
        k = min(len(pool), max(1, math.ceil(fraction * len(pool))))
        start = self._rr % len(pool)
        picked = [pool[(start + j) % len(pool)] for j in range(k)]
        self._rr = (start + k) % len(pool)
        return sorted(picked, key=lambda c: c.client_id)

    def _exchange(self, clients: list[_Client], make_msg, expect) -> list[tuple[_Client, object]]:
        def one(client: _Client):
            with client.lock:
                try:
                    client.conn.send(make_msg(client))
                    reply = client.conn.recv(timeout=self.cfg.round_timeout)
                    if not isinstance(reply, expect):
                        raise ProtocolError(f"expected {expect.__name__}, got {type(reply).__name__}: {reply}")
                    return client, reply
                except (OSError, ConnectionError, ProtocolError) as exc:
                    self._drop(client, exc)
                    return client, None

        if not clients:
            return []
        with ThreadPoolExecutor(max_workers=len(clients)) as pool:
            results = list(pool.map(one, clients))
        return [(c, r) for c, r in results if r is not None]

    # -- rounds ------------------------------------------------------------

    def _fit_round(self, rnd: int) -> tuple[list[int], list[ClientUpdate]]:
        selected = self._select(self.cfg.fraction_fit)
        if len(selected) < self.cfg.min_fit:
            raise RoundFailed(f"only {len(selected)} clients available, need {self.cfg.min_fit}")
        params = self.params
        replies = self._exchange(selected, lambda c: FitInstruction(rnd, params, dict(self.cfg.fit_config)), FitResult)
        updates = []
        for client, res in replies:
            if res.round != rnd:
                self._drop(client, f"answered round {res.round} during round {rnd}")
                continue
            if manifest_of(res.params) != manifest_of(params):
                log.warning("client %d returned a mismatched manifest; excluded", client.client_id)
                continue
            updates.append(ClientUpdate(res.params, res.num_samples, res.metrics, client.client_id))
        if len(updates) < self.cfg.min_fit:
            raise RoundFailed(f"round {rnd}: {len(updates)} fit results, need {self.cfg.min_fit}")
        return [c.client_id for c in selected], updates

    def _evaluate_round(self, rnd: int) -> RoundMetrics | None:
        selected = self._select(self.cfg.fraction_eval)
        if len(selected) < self.cfg.min_eval:
            log.warning("round %d: too few clients for evaluation", rnd)
            return None
        params = self.params
        replies = self._exchange(selected, lambda c: EvaluateInstruction(rnd, self.cfg.eval_samples, params),
                                 EvaluateResult)
        if len(replies) < self.cfg.min_eval:
            log.warning("round %d: %d evaluation results, need %d", rnd, len(replies), self.cfg.min_eval)
            return None
        return weighted_average([r.metrics for _, r in replies], [max(r.num_samples, 1) for _, r in replies])

    def run(self) -> TrainingLog:
        cfg = self.cfg
        if self._sock is None:
            self.start()
        out = TrainingLog()
        log.info("waiting for %d clients", cfg.min_available)
        if not self.wait_for_clients(cfg.min_available, cfg.join_timeout):
            out.aborted = f"fewer than {cfg.min_available} clients joined"
            log.error(out.aborted)
            self.shutdown()
            return out
        cfg.save_dir.mkdir(parents=True, exist_ok=True)
        fit_csv = MetricsCSV(cfg.save_dir / "metrics.csv")
        eval_csv = MetricsCSV(cfg.save_dir / "eval_metrics.csv")
        for rnd in range(1, cfg.rounds + 1):
            result = None
            for attempt in (1, 2):
                try:
                    ids, updates = self._fit_round(rnd)
                    result = aggregate_fit(rnd, updates)
                    break
                except RoundFailed as exc:
                    log.warning("round %d attempt %d failed: %s", rnd, attempt, exc)
            if result is None:
                out.aborted = f"round {rnd} failed twice"
                log.error("aborting: %s", out.aborted)
                break
            self.params, fit_metrics = result
            fit_csv.append(rnd, fit_metrics)
            ckpt = save_aggregated_model(rnd, self.params, cfg.save_dir, cfg.manifest)
            eval_metrics = self._evaluate_round(rnd)
            if eval_metrics is not None:
                eval_csv.append(rnd, eval_metrics)
            out.rounds.append(RoundRecord(rnd, ids, fit_metrics, eval_metrics, ckpt))
        out.final_params = self.params
        self.shutdown()
        return out

    def shutdown(self) -> None:
        """Broadcast the final model and close every connection."""
        self._closing.set()
        for client in self._available():
            with client.lock:
                try:
                    client.conn.send(Shutdown(self.params))
                except OSError as exc:
                    log.warning("could not send shutdown to client %d: %s", client.client_id, exc)
                client.conn.close()
                client.alive = False
        if self._sock is not None:
            try:
                self._sock.close()
            except OSError:
                pass


def server_run(cfg: ServerConfig, initial_params: ModelParams | None = None) -> TrainingLog:
    server = FederatedServer(cfg, initial_params)
    server.start()
    return server.run()
