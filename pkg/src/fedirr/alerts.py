"""Edge-triggered moisture and tank alerts, delivered to pluggable sinks."""

from __future__ import annotations

import json
import logging
import sys
import urllib.error
import urllib.request
from collections import defaultdict, deque
from dataclasses import asdict, dataclass
from pathlib import Path

from .errors import InvalidInput
from .hardware import SensorFrame, TankState

log = logging.getLogger(__name__)

DRY_MESSAGE = "ALERT: The soil moisture is dry"
RECOVERED_MESSAGE = "INFO: The soil moisture has recovered"
TANK_LOW_MESSAGE = "ALERT: The water tank is low"

KINDS = ("DRY", "RECOVERED", "TANK_LOW")
SINK_KINDS = ("console", "file", "webhook")
_SEVERITY = {"DRY": "WARN", "RECOVERED": "INFO", "TANK_LOW": "WARN"}


@dataclass(frozen=True)
class AlertEvent:
    node_id: str
    tick: int
    kind: str
    message: str
    severity: str

    def __post_init__(self):
        if self.kind not in KINDS:
            raise InvalidInput(f"unknown alert kind {self.kind!r}")
        if self.severity != _SEVERITY[self.kind]:
            raise InvalidInput(f"{self.kind} alerts must be {_SEVERITY[self.kind]}")
        if not self.message:
            raise InvalidInput("alert message must be non-empty")

    def line(self) -> str:
        return f"{self.severity} node={self.node_id} tick={self.tick} {self.message}"


def make_event(node_id: str, tick: int, kind: str) -> AlertEvent:
    message = {"DRY": DRY_MESSAGE, "RECOVERED": RECOVERED_MESSAGE,
               "TANK_LOW": TANK_LOW_MESSAGE}[kind]
    return AlertEvent(node_id=node_id, tick=tick, kind=kind, message=message,
                      severity=_SEVERITY[kind])


def evaluate_alerts(prev_frame: SensorFrame | None, frame: SensorFrame, tank: TankState,
                    node_id: str = "node", prev_tank_level: float | None = None) -> list[AlertEvent]:
    """Events for one tick, triggered on transitions only.

    The very first frame counts as a transition from wet. TANK_LOW fires when
    the level moves from above ``threshold_low`` to at or below it.
    """
    events = []
    was_dry = prev_frame.digital_dry if prev_frame is not None else False
    if frame.digital_dry and not was_dry:
        events.append(make_event(node_id, frame.tick, "DRY"))
    elif was_dry and not frame.digital_dry:
        events.append(make_event(node_id, frame.tick, "RECOVERED"))
    if (prev_tank_level is not None and prev_tank_level > tank.threshold_low
            and tank.level <= tank.threshold_low):
        events.append(make_event(node_id, frame.tick, "TANK_LOW"))
    return events


@dataclass(frozen=True)
class SinkConfig:
    kind: str = "console"
    target: str = ""
    rate_limit: int = 4

    def __post_init__(self):
        if self.kind not in SINK_KINDS:
            raise InvalidInput(f"sink kind must be one of {SINK_KINDS}, got {self.kind!r}")
        if self.rate_limit < 1:
            raise InvalidInput(f"rate_limit must be >= 1, got {self.rate_limit}")
        if self.kind in ("file", "webhook") and not self.target:
            raise InvalidInput(f"{self.kind} sink needs a target")


@dataclass(frozen=True)
class DeliveryReceipt:
    sink: SinkConfig
    delivered: bool
    suppressed: bool = False
    error: str | None = None


def _deliver(event: AlertEvent, sink: SinkConfig, stream=None, timeout: float = 5.0) -> None:
    if sink.kind == "console":
        out = stream if stream is not None else sys.stdout
        out.write(event.line() + "\n")
        out.flush()
    elif sink.kind == "file":
        with open(sink.target, "a", encoding="utf-8") as fh:
            fh.write(event.line() + "\n")
    else:
        body = json.dumps(asdict(event)).encode("utf-8")
        req = urllib.request.Request(sink.target, data=body, method="POST",
                                     headers={"Content-Type": "application/json"})
        with urllib.request.urlopen(req, timeout=timeout) as resp:
            if not 200 <= resp.status < 300:
                raise OSError(f"webhook answered HTTP {resp.status}")


class AlertDispatcher:
    """Delivers events to every sink, with a sliding one-hour rate limit.

    Time is simulation time (``tick * dt_hours``). The limit is tracked per
    sink, node and alert kind; only delivered alerts count against it.
    """

    def __init__(self, sinks, dt_hours: float = 1.0, console_stream=None):
        self.sinks = list(sinks)
        self.dt_hours = dt_hours
        self.console_stream = console_stream
        self._sent = defaultdict(deque)

    def dispatch(self, event: AlertEvent) -> list[DeliveryReceipt]:
        now = event.tick * self.dt_hours
        receipts = []
        for i, sink in enumerate(self.sinks):
            window = self._sent[(i, event.node_id, event.kind)]
            while window and window[0] <= now - 1.0:
                window.popleft()
            if len(window) >= sink.rate_limit:
                receipts.append(DeliveryReceipt(sink, delivered=False, suppressed=True))
                continue
            try:
                _deliver(event, sink, self.console_stream)
            except (OSError, urllib.error.URLError, ValueError) as exc:
                log.warning("alert sink %s failed: %s", sink.kind, exc)
                receipts.append(DeliveryReceipt(sink, delivered=False, error=str(exc)))
                continue
            window.append(now)
            receipts.append(DeliveryReceipt(sink, delivered=True))
        return receipts


def dispatch(event: AlertEvent, sinks, dispatcher: AlertDispatcher | None = None):
    """One-shot dispatch; pass a long-lived ``dispatcher`` to keep rate limits."""
    if dispatcher is None:
        dispatcher = AlertDispatcher(sinks)
    return dispatcher.dispatch(event)


def read_alert_log(path) -> list[str]:
    p = Path(path)
    return p.read_text(encoding="utf-8").splitlines() if p.exists() else []
