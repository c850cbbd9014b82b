"""Experiment configuration: JSON schema, defaults, and validation.

Every section maps onto one of the domain dataclasses, so the invariants
those types enforce are reused here; failures are re-raised as
:class:`ConfigError` prefixed with the dotted path of the offending field.
"""

from __future__ import annotations

import dataclasses
import json
import math
import os
import typing
from dataclasses import dataclass, field, replace
from pathlib import Path

from .alerts import SinkConfig
from .errors import ConfigError, InvalidInput
from .hardware import SensorCalib, TankState, threshold_for_moisture
from .learning import TrainConfig
from .soil import SCENARIO_KINDS, SoilState

POLICIES = ("reactive", "predictive")
CONFIG_ENV = "FEDIRR_CONFIG"


@dataclass(frozen=True)
class NodeSettings:
    flow_lpm: float = 6.0
    moisture_per_liter: float = 0.001
    dry_target: float = 0.20
    buffer_cap: int = 512
    forecast_noise: float = 0.0
    baseline_minutes: float = 15.0
    baseline_every_hours: float = 24.0
    # predictive skip needs prediction >= dry_target + predict_margin
    predict_margin: float = 0.01
    # crop stress is counted below dry_target - stress_margin
    stress_margin: float = 0.02

    def __post_init__(self):
        for name in ("flow_lpm", "moisture_per_liter", "baseline_every_hours"):
            value = getattr(self, name)
            if not (value > 0 and math.isfinite(value)):
                raise InvalidInput(f"{name} must be > 0, got {value}")
        if not 0 < self.dry_target < 1:
            raise InvalidInput(f"dry_target must be in (0, 1), got {self.dry_target}")
        if self.buffer_cap < 1:
            raise InvalidInput(f"buffer_cap must be >= 1, got {self.buffer_cap}")
        if self.forecast_noise < 0:
            raise InvalidInput(f"forecast_noise must be >= 0, got {self.forecast_noise}")
        if self.predict_margin < 0:
            raise InvalidInput(f"predict_margin must be >= 0, got {self.predict_margin}")
        if not 0 <= self.stress_margin < self.dry_target:
            raise InvalidInput(f"stress_margin must be in [0, dry_target), got {self.stress_margin}")
        if self.baseline_minutes < 0:
            raise InvalidInput(f"baseline_minutes must be >= 0, got {self.baseline_minutes}")


@dataclass(frozen=True)
class ServerSettings:
    listen: str = "127.0.0.1:7070"
    deadline_s: float = 10.0
    registration_timeout_s: float = 30.0

    def __post_init__(self):
        parse_addr(self.listen)
        if not self.deadline_s > 0:
            raise InvalidInput(f"deadline_s must be > 0, got {self.deadline_s}")
        if not self.registration_timeout_s > 0:
            raise InvalidInput("registration_timeout_s must be > 0")


@dataclass(frozen=True)
class ExperimentConfig:
    nodes: int = 3
    scenario: str = "rain-heavy"
    ticks: int = 200
    dt_hours: float = 1.0
    seed: int = 1
    policy: str = "predictive"
    ticks_per_round: int = 10
    # longer local fits so early-round models are usable for skip decisions
    train: TrainConfig = field(default_factory=lambda: TrainConfig(local_epochs=50, learning_rate=0.2))
    soil: SoilState = field(default_factory=lambda: SoilState(moisture=0.26))
    sensor: SensorCalib = field(default_factory=SensorCalib)
    tank: TankState = field(default_factory=TankState)
    node: NodeSettings = field(default_factory=NodeSettings)
    server: ServerSettings = field(default_factory=ServerSettings)
    sinks: tuple[SinkConfig, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "sinks", tuple(self.sinks))
        if self.nodes < 1:
            raise InvalidInput(f"nodes must be >= 1, got {self.nodes}")
        if self.ticks < 1:
            raise InvalidInput(f"ticks must be >= 1, got {self.ticks}")
        if not (self.dt_hours > 0 and math.isfinite(self.dt_hours)):
            raise InvalidInput(f"dt_hours must be > 0, got {self.dt_hours}")
        if self.seed < 0:
            raise InvalidInput(f"seed must be >= 0, got {self.seed}")
        if self.scenario not in SCENARIO_KINDS:
            raise InvalidInput(f"scenario must be one of {SCENARIO_KINDS}, got {self.scenario!r}")
        if self.policy not in POLICIES:
            raise InvalidInput(f"policy must be one of {POLICIES}, got {self.policy!r}")
        if self.ticks_per_round < 1:
            raise InvalidInput(f"ticks_per_round must be >= 1, got {self.ticks_per_round}")

    @property
    def stress_level(self) -> float:
        return self.node.dry_target - self.node.stress_margin

    @property
    def pump_draw_lph(self) -> float:
        return self.node.flow_lpm * 60.0

    def tank_state(self) -> TankState:
        return replace(self.tank, pump_draw=self.pump_draw_lph)


# -- (de)serialization -----------------------------------------------------------

_SECTIONS = {"train": TrainConfig, "soil": SoilState, "sensor": SensorCalib, "tank": TankState,
             "node": NodeSettings, "server": ServerSettings}
_SECTION_EXCLUDE = {"tank": {"pump_draw"}}


def _section_to_dict(name: str, obj) -> dict:
    out = dataclasses.asdict(obj)
    for key in _SECTION_EXCLUDE.get(name, ()):
        out.pop(key, None)
    return out


def to_dict(cfg: ExperimentConfig) -> dict:
    out = {}
    for f in dataclasses.fields(cfg):
        value = getattr(cfg, f.name)
        if f.name in _SECTIONS:
            out[f.name] = _section_to_dict(f.name, value)
        elif f.name == "sinks":
            out[f.name] = [dataclasses.asdict(s) for s in value]
        else:
            out[f.name] = value
    return out


def dumps(cfg: ExperimentConfig) -> str:
    return json.dumps(to_dict(cfg), indent=2) + "\n"


def _coerce(value, hint, path: str):
    if hint is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected a boolean, got {value!r}")
        return value
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        return value
    if hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if hint is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {value!r}")
        return value
    return value


def _build(cls, data, path: str, base=None, exclude=()):
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected an object")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)} - set(exclude)
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"{path}.{unknown[0]}: unknown field")
    kwargs = {}
    for name in names & set(data):
        kwargs[name] = _coerce(data[name], hints[name], f"{path}.{name}")
    try:
        return replace(base, **kwargs) if base is not None else cls(**kwargs)
    except InvalidInput as exc:
        field_name = _guess_field(str(exc), kwargs) or (next(iter(kwargs)) if len(kwargs) == 1
                                                         else "")
        where = f"{path}.{field_name}" if field_name else path
        raise ConfigError(f"{where}: {exc}") from None


def _guess_field(message: str, candidates) -> str | None:
    for name in sorted(candidates, key=len, reverse=True):
        if name in message:
            return name
    return None


def from_dict(data) -> ExperimentConfig:
    if not isinstance(data, dict):
        raise ConfigError("config: expected a JSON object")
    defaults = ExperimentConfig()
    top_hints = typing.get_type_hints(ExperimentConfig)
    kwargs = {}
    for key, value in data.items():
        if key in _SECTIONS:
            base = getattr(defaults, key)
            exclude = _SECTION_EXCLUDE.get(key, ())
            if key == "sensor" and isinstance(value, dict) and value.get("threshold_counts", 0) is None:
                value = {k: v for k, v in value.items() if k != "threshold_counts"}
                kwargs["_derive_threshold"] = True
            kwargs[key] = _build(_SECTIONS[key], value, key, base=base, exclude=exclude)
        elif key == "sinks":
            if not isinstance(value, list):
                raise ConfigError("sinks: expected an array")
            kwargs[key] = tuple(_build(SinkConfig, s, f"sinks[{i}]") for i, s in enumerate(value))
        elif key in top_hints:
            kwargs[key] = _coerce(value, top_hints[key], key)
        else:
            raise ConfigError(f"{key}: unknown field")

    derive = kwargs.pop("_derive_threshold", False)
    try:
        cfg = replace(defaults, **kwargs)
    except InvalidInput as exc:
        raise ConfigError(f"{_guess_field(str(exc), kwargs) or 'config'}: {exc}") from None
    if derive:
        cfg = replace(cfg, sensor=replace(
            cfg.sensor, threshold_counts=threshold_for_moisture(cfg.node.dry_target, cfg.sensor)))
    if not cfg.node.dry_target < cfg.soil.field_capacity:
        raise ConfigError("node.dry_target: must be below soil.field_capacity")
    return cfg


def loads(text: str, source: str = "<config>") -> ExperimentConfig:
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{source}:{exc.lineno}:{exc.colno}: {exc.msg}") from None
    try:
        return from_dict(data)
    except ConfigError as exc:
        raise ConfigError(f"{source}: {exc}") from None


def load(path) -> ExperimentConfig:
    p = Path(path)
    try:
        text = p.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"{p}: cannot read config: {exc.strerror}") from None
    return loads(text, source=str(p))


def resolve(path=None) -> ExperimentConfig:
    """Load ``path``, else ``$FEDIRR_CONFIG``, else the defaults."""
    path = path or os.environ.get(CONFIG_ENV)
    return load(path) if path else ExperimentConfig()


def parse_addr(addr: str) -> tuple[str, int]:
    host, sep, port = str(addr).rpartition(":")
    if not sep or not host or not port.isdigit() or not 0 <= int(port) <= 65535:
        raise InvalidInput(f"address must look like host:port, got {addr!r}")
    return host, int(port)
