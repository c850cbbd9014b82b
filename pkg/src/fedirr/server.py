"""Aggregation server: synchronous federated rounds over TCP.

Each accepted connection gets a reader thread that turns frames into events
on a single inbox queue. The orchestrator (the thread calling
:meth:`AggregationServer.run_training`) is the only owner of the registry
and round state, and the only writer to client sockets.
"""

from __future__ import annotations

import itertools
import json
import logging
import math
import os
import queue
import socket
import threading
import time
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

from . import protocol
from .errors import (BindError, CleanClose, ConnectionClosed, CorruptCheckpoint,
                     InvalidInput, NoParticipants, ProtocolError)
from .learning import (ClientUpdate, ModelParams, TrainConfig, aggregate, has_converged,
                       mse_loss)

log = logging.getLogger(__name__)


# -- checkpoints ---------------------------------------------------------------------

@dataclass(frozen=True)
class Checkpoint:
    round: int
    weights: tuple[float, ...]
    feature_names: tuple[str, ...] = ()
    converged: bool = False
    created_at: str = ""

    def params(self) -> ModelParams:
        return ModelParams(self.weights, round=self.round, feature_names=self.feature_names)

    @classmethod
    def of(cls, params: ModelParams, converged: bool = False) -> "Checkpoint":
        return cls(round=params.round, weights=params.weights, feature_names=params.feature_names,
                   converged=converged,
                   created_at=datetime.now(timezone.utc).isoformat(timespec="seconds"))


def checkpoint_save(path, ckpt: Checkpoint) -> None:
    doc = {"round": ckpt.round, "weights": list(ckpt.weights),
           "feature_names": list(ckpt.feature_names), "converged": ckpt.converged,
           "created_at": ckpt.created_at}
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(doc, indent=2, allow_nan=False) + "\n", encoding="utf-8")
    os.replace(tmp, path)


def checkpoint_load(path) -> Checkpoint:
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise CorruptCheckpoint(f"{path}: {exc}") from None
    if not isinstance(doc, dict):
        raise CorruptCheckpoint(f"{path}: not a JSON object")
    try:
        rnd, weights = doc["round"], doc["weights"]
        names, converged = doc.get("feature_names", []), doc.get("converged", False)
        created = doc.get("created_at", "")
    except KeyError as exc:
        raise CorruptCheckpoint(f"{path}: missing {exc}") from None
    if isinstance(rnd, bool) or not isinstance(rnd, int) or rnd < 0:
        raise CorruptCheckpoint(f"{path}: bad round {rnd!r}")
    if (not isinstance(weights, list) or not weights
            or not all(isinstance(w, (int, float)) and not isinstance(w, bool) for w in weights)
            or not all(math.isfinite(w) for w in weights)):
        raise CorruptCheckpoint(f"{path}: weights must be a non-empty array of finite numbers")
    if not isinstance(names, list) or not all(isinstance(n, str) for n in names):
        raise CorruptCheckpoint(f"{path}: bad feature_names")
    if names and len(names) != len(weights) - 1:
        raise CorruptCheckpoint(f"{path}: {len(names)} feature names for {len(weights) - 1} features")
    if not isinstance(converged, bool):
        raise CorruptCheckpoint(f"{path}: converged must be boolean")
    return Checkpoint(round=rnd, weights=tuple(float(w) for w in weights),
                      feature_names=tuple(names), converged=converged, created_at=str(created))


def checkpoint_path(out_dir, rnd: int) -> Path:
    return Path(out_dir) / f"round_{rnd:04d}.json"


def save_round(out_dir, ckpt: Checkpoint) -> Path:
    path = checkpoint_path(out_dir, ckpt.round)
    checkpoint_save(path, ckpt)
    (Path(out_dir) / "latest").write_text(path.name + "\n", encoding="utf-8")
    return path


def load_latest(out_dir) -> Checkpoint:
    pointer = Path(out_dir) / "latest"
    try:
        name = pointer.read_text(encoding="utf-8").strip()
    except OSError as exc:
        raise CorruptCheckpoint(f"{pointer}: {exc}") from None
    return checkpoint_load(Path(out_dir) / name)


# -- registry and rounds ----------------------------------------------------------------

@dataclass
class ClientEntry:
    client_id: str
    feature_dim: int
    conn_id: int
    last_seen: float


@dataclass
class ClientRegistry:
    feature_dim: int
    entries: dict = field(default_factory=dict)

    def ids(self) -> list[str]:
        return sorted(self.entries)

    def by_conn(self, conn_id: int) -> str | None:
        for cid, entry in self.entries.items():
            if entry.conn_id == conn_id:
                return cid
        return None


def register_client(registry: ClientRegistry, msg: protocol.Register, conn_id: int,
                    current_round: int) -> protocol.RegisterAck:
    if msg.feature_dim != registry.feature_dim:
        log.warning("rejecting %s: feature_dim %d != %d", msg.client_id, msg.feature_dim,
                    registry.feature_dim)
        return protocol.RegisterAck(accepted=False, round=current_round)
    if msg.client_id in registry.entries:
        log.warning("rejecting %s: id already registered", msg.client_id)
        return protocol.RegisterAck(accepted=False, round=current_round)
    registry.entries[msg.client_id] = ClientEntry(msg.client_id, msg.feature_dim, conn_id,
                                                  time.monotonic())
    return protocol.RegisterAck(accepted=True, round=current_round)


@dataclass
class RoundState:
    round: int
    global_params: ModelParams
    pending: set = field(default_factory=set)
    received: list = field(default_factory=list)
    deadline: float = 10.0


@dataclass(frozen=True)
class RoundReport:
    round: int
    responders: tuple[str, ...]
    stragglers: tuple[str, ...]
    skipped: bool = False
    stale_discarded: int = 0
    duplicates_discarded: int = 0
    pre_loss: float | None = None
    post_loss: float | None = None
    mean_client_loss: float | None = None
    converged: bool = False


@dataclass(frozen=True)
class RoundRecord:
    round: int
    params: ModelParams
    report: RoundReport


@dataclass
class TrainingResult:
    history: list
    final: ModelParams
    converged: bool


class _Conn:
    def __init__(self, conn_id: int, sock: socket.socket):
        self.conn_id = conn_id
        self.sock = sock
        self.alive = True


class AggregationServer:
    """Hosts the federated training loop.

    ``validation`` (optional) is a server-side held-out dataset used only to
    report loss before and after each aggregation.
    """

    def __init__(self, feature_dim: int, cfg: TrainConfig, listen: str = "127.0.0.1:7070",
                 out_dir=None, deadline_s: float = 10.0, validation=None,
                 feature_names=(), initial: ModelParams | None = None):
        self.cfg = cfg
        self.listen_addr = listen
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.deadline_s = deadline_s
        self.validation = validation
        self.feature_names = tuple(feature_names)
        self.registry = ClientRegistry(feature_dim)
        self.global_params = initial or ModelParams.zeros(feature_dim, self.feature_names)
        if self.global_params.dim != feature_dim:
            raise InvalidInput("initial model dimension does not match feature_dim")
        self.inbox: queue.Queue = queue.Queue()
        self._conns: dict[int, _Conn] = {}
        self._conn_ids = itertools.count(1)
        self._listener: socket.socket | None = None
        self._stopping = threading.Event()

    # -- lifecycle ---------------------------------------------------------------------

    def bind(self) -> tuple[str, int]:
        from .config import parse_addr
        host, port = parse_addr(self.listen_addr)
        sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        try:
            sock.bind((host, port))
        except OSError as exc:
            sock.close()
            raise BindError(f"cannot bind {host}:{port}: {exc.strerror or exc}") from None
        sock.listen()
        self._listener = sock
        threading.Thread(target=self._accept_loop, name="fedirr-accept", daemon=True).start()
        return sock.getsockname()[:2]

    @property
    def address(self) -> str:
        host, port = self._listener.getsockname()[:2]
        return f"{host}:{port}"

    def close(self) -> None:
        self._stopping.set()
        if self._listener is not None:
            try:
                self._listener.close()
            except OSError:
                pass
        for conn in list(self._conns.values()):
            self._drop(conn.conn_id)

    def _accept_loop(self) -> None:
        while not self._stopping.is_set():
            try:
                sock, _ = self._listener.accept()
            except OSError:
                return
            conn = _Conn(next(self._conn_ids), sock)
            self.inbox.put(("open", conn, None))
            threading.Thread(target=self._read_loop, args=(conn,), daemon=True,
                             name=f"fedirr-conn-{conn.conn_id}").start()

    def _read_loop(self, conn: _Conn) -> None:
        while True:
            try:
                msg = protocol.recv_message(conn.sock)
            except (CleanClose, ConnectionClosed, OSError):
                self.inbox.put(("closed", conn.conn_id, None))
                return
            except ProtocolError as exc:
                self.inbox.put(("bad", conn.conn_id, exc))
                continue
            self.inbox.put(("msg", conn.conn_id, msg))

    # -- orchestrator-side helpers -----------------------------------------------------

    def _send(self, conn_id: int, msg) -> bool:
        conn = self._conns.get(conn_id)
        if conn is None or not conn.alive:
            return False
        try:
            protocol.send_message(conn.sock, msg)
            return True
        except OSError as exc:
            log.info("send to connection %d failed: %s", conn_id, exc)
            self._drop(conn_id)
            return False

    def _drop(self, conn_id: int) -> None:
        conn = self._conns.pop(conn_id, None)
        if conn is not None:
            conn.alive = False
            try:
                conn.sock.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
            conn.sock.close()
        cid = self.registry.by_conn(conn_id)
        if cid is not None:
            del self.registry.entries[cid]
            log.info("client %s disconnected", cid)

    def _handle(self, event, state: RoundState | None = None, counters=None) -> None:
        kind, ref, msg = event
        if kind == "open":
            self._conns[ref.conn_id] = ref
            return
        if kind == "closed":
            cid = self.registry.by_conn(ref)
            self._drop(ref)
            if state is not None and cid is not None:
                state.pending.discard(cid)
            return
        if kind == "bad":
            self._send(ref, protocol.Error(code="bad_message", detail=str(msg)))
            return
        cid = self.registry.by_conn(ref)
        if cid is not None:
            self.registry.entries[cid].last_seen = time.monotonic()
        if isinstance(msg, protocol.Register):
            current = state.round if state is not None else self.global_params.round
            ack = register_client(self.registry, msg, ref, current)
            self._send(ref, ack)
            if not ack.accepted:
                self._drop(ref)
        elif isinstance(msg, protocol.Heartbeat):
            pass
        elif isinstance(msg, protocol.ClientUpdateMsg):
            self._accept_update(ref, cid, msg, state, counters)
        else:
            self._send(ref, protocol.Error(code="unexpected",
                                           detail=f"server does not accept {type(msg).__name__}"))

    def _accept_update(self, conn_id, cid, msg, state, counters) -> None:
        if cid is None or cid != msg.client_id:
            self._send(conn_id, protocol.Error(code="not_registered",
                                               detail=f"{msg.client_id!r} is not registered here"))
            return
        if state is None or msg.round != state.round:
            log.warning("discarding stale update from %s for round %d", cid, msg.round)
            if counters is not None:
                counters["stale"] += 1
            return
        if any(u.client_id == cid for u in state.received) or cid not in state.pending:
            log.warning("discarding duplicate update from %s in round %d", cid, msg.round)
            if counters is not None:
                counters["duplicate"] += 1
            return
        if len(msg.weights) != self.registry.feature_dim + 1:
            self._send(conn_id, protocol.Error(code="dimension", detail="wrong weight dimension"))
            return
        state.received.append(ClientUpdate(client_id=cid, round=msg.round, weights=msg.weights,
                                           sample_count=max(1, msg.sample_count),
                                           local_loss=msg.local_loss))
        state.pending.discard(cid)

    def pump_events(self, timeout: float = 0.0) -> None:
        """Process queued connection events (registrations, disconnects)."""
        end = time.monotonic() + timeout
        while True:
            remaining = end - time.monotonic()
            try:
                event = self.inbox.get(timeout=max(0.0, remaining)) if remaining > 0 else \
                    self.inbox.get_nowait()
            except queue.Empty:
                return
            self._handle(event)

    def wait_for_clients(self, n: int, timeout: float) -> int:
        end = time.monotonic() + timeout
        while len(self.registry.entries) < n and time.monotonic() < end:
            self.pump_events(timeout=min(0.05, max(0.0, end - time.monotonic())))
        self.pump_events()
        return len(self.registry.entries)

    # -- rounds ------------------------------------------------------------------------

    def _loss(self, params: ModelParams) -> float | None:
        if self.validation is None:
            return None
        return mse_loss(params, self.validation, self.cfg.l2)

    def run_round(self) -> tuple[ModelParams, RoundReport]:
        """Broadcast, collect until all answer or the deadline passes, aggregate."""
        self.pump_events()
        if not self.registry.entries:
            raise NoParticipants("no registered clients")
        prev = self.global_params
        state = RoundState(round=prev.round, global_params=prev, deadline=self.deadline_s)
        start = protocol.RoundStart(round=prev.round, global_weights=prev.weights,
                                    cfg_echo=protocol.CfgEcho(self.cfg.local_epochs,
                                                              self.cfg.learning_rate))
        for cid in self.registry.ids():
            if self._send(self.registry.entries[cid].conn_id, start):
                state.pending.add(cid)
        expected = sorted(state.pending)
        counters = {"stale": 0, "duplicate": 0}
        end = time.monotonic() + state.deadline
        while state.pending:
            remaining = end - time.monotonic()
            if remaining <= 0:
                break
            try:
                event = self.inbox.get(timeout=remaining)
            except queue.Empty:
                break
            self._handle(event, state, counters)

        responders = tuple(sorted(u.client_id for u in state.received))
        stragglers = tuple(c for c in expected if c not in responders)
        if stragglers:
            log.info("round %d stragglers: %s", state.round, ", ".join(stragglers))
        if not state.received:
            report = RoundReport(round=state.round, responders=(), stragglers=stragglers,
                                 skipped=True, stale_discarded=counters["stale"],
                                 duplicates_discarded=counters["duplicate"],
                                 pre_loss=self._loss(prev), post_loss=self._loss(prev))
            exc = NoParticipants(f"round {state.round}: no update before the deadline")
            exc.report = report
            raise exc

        updates = sorted(state.received, key=lambda u: u.client_id)
        new = aggregate(updates, feature_names=self.feature_names or prev.feature_names)
        converged = has_converged(prev, new, self.cfg.convergence_tol)
        losses = [u.local_loss for u in updates if u.local_loss >= 0]
        report = RoundReport(round=state.round, responders=responders, stragglers=stragglers,
                             stale_discarded=counters["stale"],
                             duplicates_discarded=counters["duplicate"],
                             pre_loss=self._loss(prev), post_loss=self._loss(new),
                             mean_client_loss=(math.fsum(losses) / len(losses)) if losses else None,
                             converged=converged)
        self.global_params = new
        msg = protocol.GlobalModelMsg(round=new.round, weights=new.weights, converged=converged)
        for cid in responders + stragglers:
            entry = self.registry.entries.get(cid)
            if entry is not None:
                self._send(entry.conn_id, msg)
        return new, report

    def run_training(self, max_skips: int = 3) -> TrainingResult:
        """Repeat rounds until convergence or ``max_rounds``; checkpoint each round."""
        history = []
        converged = False
        skips = 0
        while self.global_params.round < self.cfg.max_rounds:
            try:
                new, report = self.run_round()
            except NoParticipants as exc:
                report = getattr(exc, "report", None)
                if report is None:
                    raise
                # weights unchanged; the round is retried with the same tag
                history.append(RoundRecord(report.round, self.global_params, report))
                skips += 1
                log.warning("round %d skipped: no participants before deadline", report.round)
                if skips >= max_skips:
                    raise NoParticipants(f"{skips} consecutive rounds without updates") from None
                continue
            history.append(RoundRecord(report.round, new, report))
            skips = 0
            if self.out_dir is not None:
                save_round(self.out_dir, Checkpoint.of(new, report.converged))
            log.info("round %d -> %d: %d updates, val loss %s", report.round, new.round,
                     len(report.responders), report.post_loss)
            if report.converged:
                converged = True
                break
        return TrainingResult(history=history, final=self.global_params, converged=converged)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def run_training(cfg: TrainConfig, listen_addr: str, feature_dim: int, expected_clients: int = 1,
                 registration_timeout: float = 30.0, **kwargs) -> TrainingResult:
    """Bind, wait for clients, train; the server is closed afterwards."""
    with AggregationServer(feature_dim, cfg, listen_addr, **kwargs) as server:
        server.bind()
        if server.wait_for_clients(expected_clients, registration_timeout) == 0:
            raise NoParticipants("no clients registered before the timeout")
        return server.run_training()
