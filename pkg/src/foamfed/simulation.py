"""In-process federated experiment: one server and N clients over loopback TCP."""

from __future__ import annotations

import logging
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

from .dataset import BY_SOURCE, SamplePair, partition, synth_generate
from .federation.client import FederatedClient
from .federation.server import FederatedServer, ServerConfig, TrainingLog
from .metrics import RoundMetrics
from .model import ModelParams, TrainConfig, evaluate

log = logging.getLogger(__name__)

CLEAN_NOISE = 4.0
NOISY_NOISE = 20.0
# holdout seeds are offset so they never overlap the training corpus
HOLDOUT_SEED_OFFSET = 10_000


@dataclass
class SimulationConfig:
    n_clients: int = 2
    rounds: int = 5
    partition_mode: str = BY_SOURCE
    seed: int = 0
    samples: int = 200
    holdout: int = 50
    size: tuple[int, int] = (64, 64)
    train: TrainConfig = field(default_factory=lambda: TrainConfig(epochs=2, lr=0.05))
    save_dir: Path = Path("runs/simulate")
    eval_samples: int = 10
    join_timeout: float = 60.0

    def __post_init__(self):
        if self.n_clients < 1 or self.rounds < 1:
            raise ValueError("clients and rounds must be >= 1")
        self.save_dir = Path(self.save_dir)


@dataclass
class SimulationResult:
    log: TrainingLog
    holdout: RoundMetrics | None
    client_sizes: dict[int, int]
    client_status: list[int]


def synthetic_corpus(n: int, size: tuple[int, int], seed: int) -> list[SamplePair]:
    """Two sources: a low-noise half followed by a high-noise half."""
    n_clean = (n + 1) // 2
    clean = synth_generate(n_clean, size, seed=seed, noise=CLEAN_NOISE, source_id="clean")
    noisy = synth_generate(n - n_clean, size, seed=seed + 1, noise=NOISY_NOISE, source_id="noisy")
    return clean + noisy


def holdout_corpus(n: int, size: tuple[int, int], seed: int) -> list[SamplePair]:
    return synthetic_corpus(n, size, seed + HOLDOUT_SEED_OFFSET)


def simulate(cfg: SimulationConfig, pairs: Sequence[SamplePair] | None = None,
             holdout: Sequence[SamplePair] | None = None,
             initial_params: ModelParams | None = None) -> SimulationResult:
    """Run the whole federation in one process.

    With ``pairs`` omitted a procedural two-source corpus is generated. Clients
    join one at a time so client ids (and hence aggregation order) are fixed.
    """
    if pairs is None:
        pairs = synthetic_corpus(cfg.samples, cfg.size, cfg.seed)
        if holdout is None and cfg.holdout > 0:
            holdout = holdout_corpus(cfg.holdout, cfg.size, cfg.seed)
    part = partition(len(pairs), [p.source_id for p in pairs], cfg.partition_mode, cfg.n_clients, cfg.seed)
    empty = [c for c, idx in part.assignments.items() if not idx]
    if empty:
        raise ValueError(f"partition left clients {empty} without samples")

    server = FederatedServer(ServerConfig(rounds=cfg.rounds, save_dir=cfg.save_dir, min_available=cfg.n_clients,
                                          join_timeout=cfg.join_timeout, eval_samples=cfg.eval_samples,
                                          listen="127.0.0.1:0"), initial_params)
    address = server.start()
    status = [1] * cfg.n_clients
    threads = []
    for c in range(cfg.n_clients):
        data = [pairs[i] for i in part.assignments[c]]
        client = FederatedClient(data, cfg.train, name=f"sim-{c}")

        def work(client=client, c=c):
            status[c] = client.run(address)

        t = threading.Thread(target=work, name=f"sim-client-{c}", daemon=True)
        t.start()
        threads.append(t)
        if not server.wait_for_clients(c + 1, cfg.join_timeout):
            server.shutdown()
            raise RuntimeError(f"client {c} failed to join")
    result = server.run()
    for t in threads:
        t.join(timeout=cfg.join_timeout)
    held = None
    if holdout and result.final_params is not None:
        held = evaluate(result.final_params, holdout, len(holdout), cfg.train.loss, seed=cfg.seed)
        log.info("holdout: %s", held.as_dict())
    return SimulationResult(result, held, part.sizes(), status)
