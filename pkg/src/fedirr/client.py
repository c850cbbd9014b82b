"""One simulated edge installation.

An :class:`EdgeNode` couples the soil model with the sensor, relay and tank
twins, keeps a ring buffer of locally labeled training examples, and decides
when to irrigate. :func:`run_client` connects a node to the aggregation
server and interleaves simulation chunks with federated rounds.
"""

from __future__ import annotations

import csv
import logging
import math
import socket
import time
import zlib
from collections import deque
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from . import protocol
from .alerts import AlertDispatcher, AlertEvent, evaluate_alerts
from .config import ExperimentConfig, parse_addr
from .errors import (CleanClose, ConnectionClosed, DimensionMismatch, InvalidInput,
                     SchemaViolation, ServerUnreachable)
from .hardware import (PUMP_ON_LINE, SensorFrame, estimate_moisture, pump_command, sense,
                       step_tank)
from .learning import ModelParams, TrainConfig, TrainingExample, local_train, predict
from .soil import WeatherTick, WeatherTrace, make_scenario, step_soil

log = logging.getLogger(__name__)

FEATURE_NAMES = ("moisture_est", "et_demand", "rain_forecast", "irrigation_applied")
FEATURE_DIM = len(FEATURE_NAMES)

# Fixed affine feature scaling keeps gradient descent well conditioned; it is
# part of the model definition, so every node must use the same constants.
MOISTURE_CENTER, MOISTURE_SCALE = 0.25, 0.05
ET_CENTER, ET_SCALE = 1.0, 0.5
RAIN_SCALE = 0.02
APPLIED_SCALE = 0.05

TELEMETRY_HEADER = ("tick", "node_id", "analog_raw", "digital_dry", "moisture_true",
                    "pump_on", "planned_minutes", "tank_level", "applied_liters")


def feature_vector(moisture_est: float, et_demand: float, rain_amount: float,
                   applied_amount: float) -> tuple[float, ...]:
    """Scaled features; rain and irrigation are moisture amounts over one tick."""
    return ((moisture_est - MOISTURE_CENTER) / MOISTURE_SCALE,
            (et_demand - ET_CENTER) / ET_SCALE,
            rain_amount / RAIN_SCALE,
            applied_amount / APPLIED_SCALE)


@dataclass(frozen=True)
class PumpPlan:
    pump_on: bool
    planned_minutes: float
    predicted_moisture: float | None = None
    # minutes the reactive gate asked for but the forecast made unnecessary
    preempted_minutes: float = 0.0

    def __post_init__(self):
        if self.planned_minutes < 0:
            raise InvalidInput("planned_minutes must be >= 0")
        if not self.pump_on and self.planned_minutes:
            raise InvalidInput("an idle plan cannot have planned minutes")


@dataclass
class WaterLedger:
    applied_liters: float = 0.0
    drained_from_irrigation_liters: float = 0.0
    rain_preempted_liters: float = 0.0
    rain_avoidable_liters: float = 0.0
    baseline_applied_liters: float = 0.0

    @property
    def wasted_liters(self) -> float:
        """Irrigation lost to drainage plus irrigation that rain made unnecessary."""
        return self.drained_from_irrigation_liters + self.rain_avoidable_liters

    def add(self, other: "WaterLedger") -> None:
        for f in fields(self):
            setattr(self, f.name, getattr(self, f.name) + getattr(other, f.name))


@dataclass(frozen=True)
class TickRecord:
    node_id: str
    frame: SensorFrame
    plan: PumpPlan
    moisture_true: float
    pump_on: bool
    tank_level: float
    applied_liters: float
    alerts: tuple[AlertEvent, ...]
    ledger_delta: WaterLedger

    def telemetry_row(self) -> list[str]:
        return [str(self.frame.tick), self.node_id, str(self.frame.analog_raw),
                "1" if self.frame.digital_dry else "0", f"{self.moisture_true:.6f}",
                "1" if self.pump_on else "0", f"{self.plan.planned_minutes:.6f}",
                f"{self.tank_level:.6f}", f"{self.applied_liters:.6f}"]


def node_entropy(seed: int, node_id: str) -> list[int]:
    return [int(seed), zlib.crc32(node_id.encode("utf-8"))]


def node_weather(cfg: ExperimentConfig, node_id: str, scenario: str | None = None) -> WeatherTrace:
    weather_seed = int(np.random.SeedSequence(node_entropy(cfg.seed, node_id)).generate_state(1)[0])
    return make_scenario(scenario or cfg.scenario, cfg.ticks, weather_seed, cfg.dt_hours)


def planned_minutes_for(moisture_est: float, node: "EdgeNode") -> float:
    """Pump time to lift moisture to field capacity, capped by tick and tank."""
    s = node.settings
    deficit = node.soil.field_capacity - moisture_est
    if deficit <= 0:
        return 0.0
    minutes = deficit / s.moisture_per_liter / s.flow_lpm
    return max(0.0, min(minutes, node.dt_hours * 60.0, node.tank.level / s.flow_lpm))


def decide_irrigation(model: ModelParams, frame: SensorFrame, node: "EdgeNode",
                      forecast: WeatherTick, policy: str = "predictive") -> PumpPlan:
    """Pump decision gated by the comparator output.

    ``reactive`` pumps whenever the sensor reads dry. ``predictive`` also
    asks the model for next-tick moisture without irrigation and skips the
    pump when that prediction clears the dry target by ``predict_margin``.
    """
    if model.dim != FEATURE_DIM:
        raise DimensionMismatch(f"policy needs a {FEATURE_DIM}-feature model, got {model.dim}")
    if not frame.digital_dry:
        return PumpPlan(False, 0.0)
    m_est = estimate_moisture(frame.analog_raw, node.calib)
    minutes = planned_minutes_for(m_est, node)
    if minutes <= 0 or node.tank.level <= 0:
        return PumpPlan(False, 0.0)
    if policy == "reactive":
        return PumpPlan(True, minutes)
    if policy != "predictive":
        raise InvalidInput(f"unknown policy {policy!r}")
    feats = feature_vector(m_est, forecast.et_demand, forecast.rain_rate * node.dt_hours, 0.0)
    predicted = predict(model, feats)
    if predicted >= node.settings.dry_target + node.settings.predict_margin:
        return PumpPlan(False, 0.0, predicted_moisture=predicted, preempted_minutes=minutes)
    return PumpPlan(True, minutes, predicted_moisture=predicted)


class EdgeNode:
    """Mutable state of one installation; every tick is deterministic given the seed."""

    def __init__(self, node_id: str, cfg: ExperimentConfig, weather: WeatherTrace | None = None,
                 policy: str | None = None, buffer_cap: int | None = None):
        self.node_id = node_id
        self.cfg = cfg
        self.settings = cfg.node
        self.dt_hours = cfg.dt_hours
        self.policy = policy or cfg.policy
        self.weather = weather if weather is not None else node_weather(cfg, node_id)
        self.soil = cfg.soil
        self.calib = cfg.sensor
        self.tank = cfg.tank_state()
        self.model = ModelParams.zeros(FEATURE_DIM, FEATURE_NAMES)
        self.buffer: deque[TrainingExample] = deque(maxlen=buffer_cap or cfg.node.buffer_cap)
        entropy = node_entropy(cfg.seed, node_id)
        self.rng = np.random.default_rng(entropy + [1])
        self.forecast_rng = np.random.default_rng(entropy + [2])
        self.ledger = WaterLedger()
        self.tick = 0
        self.pending: tuple[float, ...] | None = None
        self.prev_frame: SensorFrame | None = None
        self.irrigation_share = 0.0
        self.deficit_sum = 0.0
        self.stress_deficit_sum = 0.0
        self.ticks_below_target = 0
        self.records: list[TickRecord] = []

    @property
    def done(self) -> bool:
        return self.tick >= len(self.weather)

    def forecast(self, weather: WeatherTick) -> WeatherTick:
        noise = self.settings.forecast_noise
        if noise <= 0:
            return weather
        rain = max(0.0, weather.rain_rate + self.forecast_rng.normal(0.0, noise))
        return WeatherTick(rain_rate=rain, et_demand=weather.et_demand)

    def collect_sample(self, frame: SensorFrame, forecast: WeatherTick, applied_amount: float):
        """Queue this tick's features; the label arrives with the next tick."""
        m_est = estimate_moisture(frame.analog_raw, self.calib)
        self.pending = feature_vector(m_est, forecast.et_demand,
                                      forecast.rain_rate * self.dt_hours, applied_amount)
        return self.pending

    def _label_pending(self, moisture_true: float) -> None:
        if self.pending is not None:
            self.buffer.append(TrainingExample(self.pending, moisture_true))
            self.pending = None

    def _baseline_fires(self, tick: int) -> bool:
        every = self.settings.baseline_every_hours
        if tick == 0:
            return True
        return math.floor(tick * self.dt_hours / every) > math.floor((tick - 1) * self.dt_hours / every)

    def run_tick(self, weather: WeatherTick | None = None) -> TickRecord:
        t = self.tick
        if weather is None:
            weather = self.weather[t]
        s = self.settings
        dt = self.dt_hours
        soil_before = self.soil
        forecast = self.forecast(weather)

        frame = sense(soil_before.moisture, t, self.calib, self.rng)
        self._label_pending(soil_before.moisture)

        plan = decide_irrigation(self.model, frame, self, forecast, self.policy)
        relay = pump_command(plan.pump_on, self.tank)
        pump_on = relay is PUMP_ON_LINE and plan.planned_minutes > 0
        minutes = plan.planned_minutes if pump_on else 0.0

        prev_level = self.tank.level
        pump_hours = min(dt, minutes / 60.0)
        if pump_hours > 0:
            self.tank = step_tank(self.tank, True, pump_hours)
        if dt - pump_hours > 0:
            self.tank = step_tank(self.tank, False, dt - pump_hours)

        applied = s.flow_lpm * minutes
        applied_amount = applied * s.moisture_per_liter
        self.soil, report = step_soil(soil_before, applied_amount / dt, weather, dt)

        # well-mixed tracer: losses leave irrigation and natural water pro rata
        pool = soil_before.moisture + report.inflow
        irrigation_water = self.irrigation_share * soil_before.moisture + report.irrigation
        share = irrigation_water / pool if pool > 0 else 0.0
        drained = share * (report.drainage + report.clamped_excess) / s.moisture_per_liter
        self.irrigation_share = share

        avoidable = 0.0
        if applied > 0:
            dry_run, _ = step_soil(soil_before, 0.0, weather, dt)
            if dry_run.moisture >= s.dry_target:
                avoidable = applied

        delta = WaterLedger(
            applied_liters=applied,
            drained_from_irrigation_liters=drained,
            rain_preempted_liters=plan.preempted_minutes * s.flow_lpm,
            rain_avoidable_liters=avoidable,
            baseline_applied_liters=(s.baseline_minutes * s.flow_lpm
                                     if self._baseline_fires(t) else 0.0))
        self.ledger.add(delta)

        self.collect_sample(frame, forecast, applied_amount)
        alerts = evaluate_alerts(self.prev_frame, frame, self.tank, self.node_id, prev_level)
        self.prev_frame = frame

        gap = s.dry_target - soil_before.moisture
        if gap > 0:
            self.deficit_sum += gap
            self.ticks_below_target += 1
        self.stress_deficit_sum += max(0.0, gap - s.stress_margin)

        record = TickRecord(node_id=self.node_id, frame=frame, plan=plan,
                            moisture_true=soil_before.moisture, pump_on=pump_on,
                            tank_level=self.tank.level, applied_liters=applied,
                            alerts=tuple(alerts), ledger_delta=delta)
        self.records.append(record)
        self.tick += 1
        return record

    def run(self, n_ticks: int | None = None, dispatcher: AlertDispatcher | None = None):
        """Advance up to ``n_ticks`` (default: to the end of the trace)."""
        stop = len(self.weather) if n_ticks is None else min(len(self.weather), self.tick + n_ticks)
        out = []
        while self.tick < stop:
            rec = self.run_tick()
            if dispatcher is not None:
                for event in rec.alerts:
                    dispatcher.dispatch(event)
            out.append(rec)
        return out

    def training_data(self) -> list[TrainingExample]:
        return list(self.buffer)

    @property
    def mean_moisture_deficit(self) -> float:
        """Mean shortfall below the dry target, per tick."""
        return self.deficit_sum / self.tick if self.tick else 0.0

    @property
    def mean_stress_deficit(self) -> float:
        """Mean shortfall below the (lower) crop stress level, per tick."""
        return self.stress_deficit_sum / self.tick if self.tick else 0.0


# -- networking ----------------------------------------------------------------------

def participate_round(conn, node: EdgeNode, round_start: protocol.RoundStart,
                      l2: float = 0.0) -> protocol.ClientUpdateMsg:
    """Install the global model, train on the local buffer, send the update."""
    if len(round_start.global_weights) != FEATURE_DIM + 1:
        raise SchemaViolation(
            f"global model has {len(round_start.global_weights) - 1} features, expected {FEATURE_DIM}")
    model = ModelParams(round_start.global_weights, round=round_start.round,
                        feature_names=FEATURE_NAMES)
    node.model = model
    data = node.training_data()
    if len(data) < FEATURE_DIM + 2:
        msg = protocol.ClientUpdateMsg(client_id=node.node_id, round=round_start.round,
                                       weights=model.weights, sample_count=max(1, len(data)),
                                       local_loss=-1.0)
    else:
        cfg = TrainConfig(local_epochs=round_start.cfg_echo.local_epochs,
                          learning_rate=round_start.cfg_echo.learning_rate, l2=l2)
        update = local_train(model, data, cfg, client_id=node.node_id)
        msg = protocol.ClientUpdateMsg(client_id=node.node_id, round=update.round,
                                       weights=update.weights, sample_count=update.sample_count,
                                       local_loss=update.local_loss)
    protocol.send_message(conn, msg)
    return msg


def connect_with_retry(addr: str, attempts: int = 3, base_delay: float = 0.2,
                       timeout: float = 5.0) -> socket.socket:
    """Connect, retrying with exponential backoff; raises ServerUnreachable."""
    host, port = parse_addr(addr)
    last = None
    for attempt in range(attempts + 1):
        try:
            return socket.create_connection((host, port), timeout=timeout)
        except OSError as exc:
            last = exc
            if attempt < attempts:
                delay = base_delay * 2 ** attempt
                log.info("connect to %s failed (%s); retrying in %.2fs", addr, exc, delay)
                time.sleep(delay)
    raise ServerUnreachable(f"cannot reach server at {addr} after {attempts} retries: {last}")


@dataclass
class ClientResult:
    node: EdgeNode
    updates: list = field(default_factory=list)
    rounds_seen: int = 0
    registered: bool = False


def run_client(cfg: ExperimentConfig, node_id: str, server: str | None = None,
               offline: bool = False, dispatcher: AlertDispatcher | None = None,
               retry_attempts: int = 3, retry_delay: float = 0.2,
               idle_timeout: float = 120.0, node: EdgeNode | None = None) -> ClientResult:
    """Run one node to the end of its weather trace.

    Online, every RoundStart triggers ``ticks_per_round`` ticks of simulation
    followed by local training; when the server finishes (or closes the
    connection) the remaining ticks run with the last global model.
    """
    node = node or EdgeNode(node_id, cfg)
    result = ClientResult(node=node)
    if not offline:
        sock = connect_with_retry(server or cfg.server.listen, retry_attempts, retry_delay)
        sock.settimeout(idle_timeout)
        try:
            _online_loop(sock, cfg, node, result, dispatcher)
        finally:
            sock.close()
    node.run(dispatcher=dispatcher)
    return result


def _online_loop(sock, cfg, node, result, dispatcher) -> None:
    protocol.send_message(sock, protocol.Register(client_id=node.node_id, feature_dim=FEATURE_DIM))
    ack = protocol.recv_message(sock)
    if not isinstance(ack, protocol.RegisterAck):
        raise SchemaViolation(f"expected register_ack, got {type(ack).__name__}")
    if not ack.accepted:
        raise ServerUnreachable(f"server rejected registration of {node.node_id!r}")
    result.registered = True
    while True:
        try:
            msg = protocol.recv_message(sock)
        except CleanClose:
            return
        if isinstance(msg, protocol.RoundStart):
            node.model = ModelParams(msg.global_weights, round=msg.round, feature_names=FEATURE_NAMES)
            node.run(cfg.ticks_per_round, dispatcher)
            result.updates.append(participate_round(sock, node, msg, cfg.train.l2))
            result.rounds_seen += 1
        elif isinstance(msg, protocol.GlobalModelMsg):
            node.model = ModelParams(msg.weights, round=msg.round, feature_names=FEATURE_NAMES)
            if msg.converged:
                return
        elif isinstance(msg, protocol.Error):
            log.warning("server error %s: %s", msg.code, msg.detail)
        else:
            log.debug("ignoring %s", type(msg).__name__)


def write_telemetry(path, records) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(TELEMETRY_HEADER)
        for rec in records:
            writer.writerow(rec.telemetry_row())


def read_telemetry(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def simulate_offline(cfg: ExperimentConfig, node_id: str, policy: str = "reactive",
                     model: ModelParams | None = None, buffer_cap: int | None = None) -> EdgeNode:
    node = EdgeNode(node_id, cfg, policy=policy, buffer_cap=buffer_cap)
    if model is not None:
        node.model = model
    node.run()
    return node
