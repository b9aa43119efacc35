"""Synchronous federation: server state, client threads, and round orchestration."""

from __future__ import annotations

import hashlib
import logging
import threading
from dataclasses import dataclass, field

import numpy as np

from .. import ftns
from ..config import ExperimentConfig
from ..data import ClientDataset, generate_federation
from ..model import LayeredModel, build_model, decode_params, encode_params
from ..tensor import ParamBlock
from ..transport import ChannelClosed, ChannelTimeout, Endpoint, Frame, MsgType, make_pairs
from .aggregation import (
    cross_assess,
    dynamic_aggregate,
    fedavg_aggregate,
    normalize_similarity,
    pairwise_aggregate,
)
from .client import ClientWorker, make_client

log = logging.getLogger(__name__)

_PROBE_STREAM = 1 << 16  # above any u16 client id


class RoundAborted(RuntimeError):
    pass


@dataclass
class RoundReport:
    round: int
    metrics: dict[int, dict]
    raw_similarity: np.ndarray | None = None
    similarity: np.ndarray | None = None


@dataclass
class ServerState:
    config: ExperimentConfig
    global_params: list[ParamBlock]
    spec: list
    round: int = 0
    registry: dict[int, dict] = field(default_factory=dict)
    updates: dict[int, list[ParamBlock]] = field(default_factory=dict)
    banks: dict[int, np.ndarray] = field(default_factory=dict)

    @property
    def wants_banks(self) -> bool:
        return self.config.method == "fedsoda" and self.config.so

    def counts(self, client_ids: list[int]) -> np.ndarray | None:
        if self.config.weighting == "uniform":
            return None
        return np.array([self.registry[c]["n_train"] for c in client_ids], dtype=np.float64)

    def probes(self, client_ids: list[int]) -> list[np.ndarray]:
        if self.wants_banks:
            return [self.banks[c] for c in client_ids]
        # cross-assessment without client statistics: fresh unit-Gaussian probes
        rng = np.random.default_rng([self.config.seed, _PROBE_STREAM, self.round])
        shape = tuple(self.registry[client_ids[0]]["image_shape"])
        return [rng.standard_normal((self.config.synth_batch,) + shape).astype(np.float32) for _ in client_ids]

    def aggregate(self, client_ids: list[int]) -> tuple[list[ParamBlock], np.ndarray | None, np.ndarray | None]:
        cfg = self.config
        updates = [self.updates[c] for c in client_ids]
        if cfg.method != "fedsoda" or not (cfg.so or cfg.da):
            return fedavg_aggregate(updates, self.counts(client_ids)), None, None
        models = [LayeredModel(self.spec, u) for u in updates]
        raw = cross_assess(models, self.probes(client_ids))
        s_hat = normalize_similarity(raw)
        if cfg.da:
            return dynamic_aggregate(updates, s_hat, cfg.lam), raw, s_hat
        return pairwise_aggregate(updates, s_hat, cfg.lam, self.counts(client_ids)), raw, s_hat


class Federation:
    """Server plus one worker thread per client, connected by frame channels.

    Use as a context manager; ``start()`` performs registration and the
    round-0 evaluation, each ``run_round()`` advances one communication round.
    """

    def __init__(self, config: ExperimentConfig, datasets: list[ClientDataset] | None = None):
        self.config = config
        self.datasets = datasets if datasets is not None else generate_federation(config.client_specs(), config.seed)
        spec = config.model_spec()
        global_model = build_model(spec, seed=config.seed)
        self.server = ServerState(config, [b.copy() for b in global_model.blocks], global_model.spec)
        self.client_ids = [d.client_id for d in self.datasets]
        self.clients = [make_client(d, build_model(spec, seed=config.seed), config) for d in self.datasets]
        self._digest = hashlib.sha256()
        self._endpoints: dict[int, Endpoint] = {}
        self._workers: list[ClientWorker] = []
        self._threads: list[threading.Thread] = []
        self.reports: list[RoundReport] = []
        self._started = False

    # -- plumbing ---------------------------------------------------------

    @property
    def frame_digest(self) -> str:
        """SHA-256 over every frame the server sent or received, in order."""
        return self._digest.hexdigest()

    def _recv(self, cid: int, expected: MsgType, rnd: int) -> Frame:
        try:
            frame = self._endpoints[cid].recv(timeout=self.config.round_timeout)
        except ChannelTimeout:
            raise RoundAborted(
                f"round {rnd}: client {cid} sent no {expected.name} within {self.config.round_timeout}s"
            ) from None
        except ChannelClosed:
            worker = self._workers[self.client_ids.index(cid)]
            cause = f": {worker.error!r}" if worker.error else ""
            raise RoundAborted(f"round {rnd}: client {cid} disconnected before {expected.name}{cause}") from worker.error
        if frame.msg_type != expected or frame.round != rnd or frame.client_id != cid:
            raise RoundAborted(
                f"round {rnd}: expected {expected.name} from client {cid}, got "
                f"{frame.msg_type.name} round {frame.round} from client {frame.client_id}"
            )
        return frame

    def _broadcast(self, msg_type: MsgType, rnd: int, payload: bytes = b"") -> None:
        for cid in self.client_ids:
            self._endpoints[cid].send(Frame(msg_type, rnd, cid, payload))

    def _gather_metrics(self, rnd: int) -> dict[int, dict]:
        return {cid: self._recv(cid, MsgType.METRICS_REPORT, rnd).json() for cid in self.client_ids}

    # -- lifecycle --------------------------------------------------------

    def start(self) -> RoundReport:
        pairs = make_pairs(self.config.transport, len(self.clients), self.config.port)
        for client, (server_end, client_end) in zip(self.clients, pairs):
            server_end.recorder = self._digest.update
            self._endpoints[client.client_id] = server_end
            worker = ClientWorker(client, client_end, self.config.rounds)
            thread = threading.Thread(target=worker.run, name=f"client-{client.client_id}", daemon=True)
            self._workers.append(worker)
            self._threads.append(thread)
        self._started = True
        for t in self._threads:
            t.start()
        for cid in self.client_ids:
            self.server.registry[cid] = self._recv(cid, MsgType.REGISTER, 0).json()
        self._broadcast(MsgType.GLOBAL_MODEL, 0, encode_params(self.server.global_params))
        report = RoundReport(0, self._gather_metrics(0))
        self.reports.append(report)
        return report

    def run_round(self) -> RoundReport:
        """One synchronous round: collect uploads, aggregate, broadcast, evaluate."""
        srv = self.server
        t = srv.round + 1
        if t > self.config.rounds:
            raise RuntimeError(f"all {self.config.rounds} rounds already ran")
        srv.updates.clear()
        srv.banks.clear()
        for cid in self.client_ids:
            if srv.wants_banks:
                srv.banks[cid] = ftns.loads(self._recv(cid, MsgType.SYNTHETIC_UPLOAD, t).payload)
            blocks, _ = decode_params(self._recv(cid, MsgType.MODEL_UPDATE, t).payload)
            srv.updates[cid] = blocks
        srv.round = t
        srv.global_params, raw, s_hat = srv.aggregate(self.client_ids)
        self._broadcast(MsgType.GLOBAL_MODEL, t, encode_params(srv.global_params))
        report = RoundReport(t, self._gather_metrics(t), raw, s_hat)
        self.reports.append(report)
        log.info("round %d: mean dice %.4f", t, np.mean([m["dice"] for m in report.metrics.values()]))
        return report

    def close(self) -> None:
        if not self._started:
            return
        for cid, ep in self._endpoints.items():
            try:
                ep.send(Frame(MsgType.SHUTDOWN, self.server.round, cid))
            except ChannelClosed:
                pass
        for t in self._threads:
            t.join(timeout=self.config.round_timeout)
        for ep in self._endpoints.values():
            ep.close()
        self._started = False

    def __enter__(self) -> "Federation":
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    def run(self) -> list[RoundReport]:
        self.start()
        for _ in range(self.config.rounds):
            self.run_round()
        return self.reports


def run_round(federation: Federation) -> RoundReport:
    return federation.run_round()
