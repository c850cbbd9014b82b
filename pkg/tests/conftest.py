import socket
import threading
import time

import numpy as np
import pytest

from fedirr import protocol
from fedirr.errors import ConnectionClosed
from fedirr.learning import ModelParams, TrainConfig, local_train


class ScriptedClient(threading.Thread):
    """Minimal protocol peer driven by a ``respond(client, round_start)`` callback.

    The callback returns a list of messages to send back (possibly empty).
    Everything received is kept in ``inbox``.
    """

    def __init__(self, addr: str, client_id: str, dim: int, respond, delay: float = 0.0):
        super().__init__(daemon=True, name=f"scripted-{client_id}")
        self.addr = addr
        self.client_id = client_id
        self.dim = dim
        self.respond = respond
        self.delay = delay
        self.inbox = []
        self.ack = None
        self.registered = threading.Event()
        self.error = None

    def run(self):
        host, port = self.addr.rsplit(":", 1)
        try:
            with socket.create_connection((host, int(port)), timeout=30) as sock:
                protocol.send_message(sock, protocol.Register(self.client_id, self.dim))
                self.ack = protocol.recv_message(sock)
                self.registered.set()
                while True:
                    msg = protocol.recv_message(sock)
                    self.inbox.append(msg)
                    if isinstance(msg, protocol.RoundStart):
                        if self.delay:
                            time.sleep(self.delay)
                        for out in self.respond(self, msg):
                            protocol.send_message(sock, out)
                    elif isinstance(msg, protocol.GlobalModelMsg) and msg.converged:
                        return
        except ConnectionClosed:
            return
        except OSError as exc:
            self.error = exc
        finally:
            self.registered.set()


def echo(client, start):
    return [protocol.ClientUpdateMsg(client.client_id, start.round, start.global_weights, 1, -1.0)]


def trainer(X, y):
    """Respond with ``local_train`` of the broadcast model on a fixed local dataset."""
    def respond(client, start):
        cfg = TrainConfig(local_epochs=start.cfg_echo.local_epochs,
                          learning_rate=start.cfg_echo.learning_rate)
        upd = local_train(ModelParams(start.global_weights, round=start.round), (X, y), cfg,
                          client_id=client.client_id)
        return [protocol.ClientUpdateMsg(client.client_id, upd.round, upd.weights,
                                         upd.sample_count, upd.local_loss)]
    return respond


def iid_clients(n_clients=5, n=64, d=3, noise=0.01, seed=0):
    rng = np.random.default_rng(seed)
    w_true = rng.normal(size=d)
    b_true = rng.normal()
    data = []
    for _ in range(n_clients):
        X = rng.normal(size=(n, d))
        y = X @ w_true + b_true + rng.normal(scale=noise, size=n)
        data.append((X, y))
    return data


@pytest.fixture
def scripted():
    clients = []

    def make(addr, client_id, dim, respond, delay=0.0, start=True):
        c = ScriptedClient(addr, client_id, dim, respond, delay)
        clients.append(c)
        if start:
            c.start()
        return c

    yield make
    for c in clients:
        c.join(timeout=5)


def free_port() -> int:
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


# -- acceptance summary ----------------------------------------------------------------

_ACCEPTANCE: dict[int, tuple[str, bool, str]] = {}


def record_acceptance(number: int, name: str, ok: bool, detail: str) -> None:
    _ACCEPTANCE[number] = (name, ok, detail)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        name, ok, detail = _ACCEPTANCE[number]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {number:>2}. {name}: {detail}")
