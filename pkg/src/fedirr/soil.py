"""Bucket-style soil moisture dynamics.

Moisture is a volumetric fraction. Each step applies irrigation and rain
inflow, evapotranspiration proportional to the water present, and linear
drainage above field capacity, then clamps to ``[0, saturation]``. Every
flux is reported so callers can audit the water balance.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .errors import InvalidInput

SCENARIO_KINDS = ("dry-spell", "rain-heavy", "alternating")
_KIND_CODES = {kind: i + 1 for i, kind in enumerate(SCENARIO_KINDS)}


def _check_finite(**values: float) -> None:
    for name, value in values.items():
        if not math.isfinite(value):
            raise InvalidInput(f"{name} must be finite, got {value!r}")


@dataclass(frozen=True)
class SoilState:
    moisture: float
    saturation: float = 0.45
    field_capacity: float = 0.30
    et_coeff: float = 0.02
    drain_coeff: float = 0.30

    def __post_init__(self):
        _check_finite(moisture=self.moisture, saturation=self.saturation,
                      field_capacity=self.field_capacity, et_coeff=self.et_coeff,
                      drain_coeff=self.drain_coeff)
        if not 0.0 <= self.moisture <= self.saturation <= 1.0:
            raise InvalidInput(
                f"need 0 <= moisture <= saturation <= 1, got moisture={self.moisture}, "
                f"saturation={self.saturation}")
        if not 0.0 < self.field_capacity <= self.saturation:
            raise InvalidInput(
                f"need 0 < field_capacity <= saturation, got {self.field_capacity}")
        if self.et_coeff < 0:
            raise InvalidInput(f"et_coeff must be >= 0, got {self.et_coeff}")
        if self.drain_coeff < 0:
            raise InvalidInput(f"drain_coeff must be >= 0, got {self.drain_coeff}")


@dataclass(frozen=True)
class WeatherTick:
    rain_rate: float = 0.0
    et_demand: float = 1.0

    def __post_init__(self):
        _check_finite(rain_rate=self.rain_rate, et_demand=self.et_demand)
        if self.rain_rate < 0:
            raise InvalidInput(f"rain_rate must be >= 0, got {self.rain_rate}")
        if self.et_demand < 0:
            raise InvalidInput(f"et_demand must be >= 0, got {self.et_demand}")


@dataclass(frozen=True)
class WeatherTrace:
    ticks: tuple[WeatherTick, ...]
    dt_hours: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "ticks", tuple(self.ticks))
        if not self.ticks:
            raise InvalidInput("weather trace must be non-empty")
        if not (self.dt_hours > 0 and math.isfinite(self.dt_hours)):
            raise InvalidInput(f"dt_hours must be > 0, got {self.dt_hours}")

    def __len__(self) -> int:
        return len(self.ticks)

    def __getitem__(self, i: int) -> WeatherTick:
        return self.ticks[i]

    def total_rain(self) -> float:
        return sum(t.rain_rate for t in self.ticks) * self.dt_hours


@dataclass(frozen=True)
class StepReport:
    """Fluxes of one step, as moisture-fraction amounts (rate times dt).

    ``clamped_excess`` is water rejected at saturation; ``clamped_deficit``
    is the shortfall added back when losses would push moisture below zero.
    The balance ``delta == inflow - outflow - clamped_excess + clamped_deficit``
    holds up to rounding.
    """

    irrigation: float
    rain: float
    et: float
    drainage: float
    clamped_excess: float
    clamped_deficit: float
    delta: float

    @property
    def inflow(self) -> float:
        return self.irrigation + self.rain

    @property
    def outflow(self) -> float:
        return self.et + self.drainage

    @property
    def net(self) -> float:
        return self.inflow - self.outflow - self.clamped_excess + self.clamped_deficit

    @property
    def residual(self) -> float:
        return self.delta - self.net


def et_loss(state: SoilState, demand: float) -> float:
    """Evapotranspiration rate (fraction/hour), proportional to available water."""
    return state.et_coeff * demand * state.moisture


def drainage_loss(state: SoilState) -> float:
    """Gravity drainage rate (fraction/hour) for water above field capacity."""
    return state.drain_coeff * max(0.0, state.moisture - state.field_capacity)


def step_soil(state: SoilState, irrigation_rate: float, weather: WeatherTick,
              dt_hours: float = 1.0) -> tuple[SoilState, StepReport]:
    """Advance the soil by one explicit Euler step of ``dt_hours``."""
    _check_finite(irrigation_rate=irrigation_rate, dt_hours=dt_hours)
    if irrigation_rate < 0:
        raise InvalidInput(f"irrigation_rate must be >= 0, got {irrigation_rate}")
    if weather.rain_rate < 0 or weather.et_demand < 0:
        raise InvalidInput("weather rates must be >= 0")
    if dt_hours <= 0:
        raise InvalidInput(f"dt_hours must be > 0, got {dt_hours}")

    irrigation = irrigation_rate * dt_hours
    rain = weather.rain_rate * dt_hours
    et = et_loss(state, weather.et_demand) * dt_hours
    drainage = drainage_loss(state) * dt_hours

    unclamped = state.moisture + irrigation + rain - et - drainage
    excess = deficit = 0.0
    if unclamped > state.saturation:
        moisture = state.saturation
        excess = unclamped - state.saturation
    elif unclamped < 0.0:
        moisture = 0.0
        deficit = -unclamped
    else:
        moisture = unclamped

    report = StepReport(irrigation=irrigation, rain=rain, et=et, drainage=drainage,
                        clamped_excess=excess, clamped_deficit=deficit,
                        delta=moisture - state.moisture)
    return replace(state, moisture=moisture), report


def _tick_rng(seed: int, kind: str, index: int) -> np.random.Generator:
    # Keyed by (seed, kind, tick) so any tick can be regenerated on its own.
    return np.random.default_rng([int(seed), _KIND_CODES[kind], int(index)])


def _diurnal(hour: float) -> float:
    return 1.0 + 0.5 * math.sin(2.0 * math.pi * (hour - 9.0) / 24.0)


def scenario_tick(kind: str, index: int, seed: int, dt_hours: float = 1.0) -> WeatherTick:
    """Weather for a single tick of a named scenario."""
    rng = _tick_rng(seed, kind, index)
    jitter = rng.uniform(0.85, 1.15)
    hour = (index * dt_hours) % 24.0
    base = _diurnal(hour) * jitter

    if kind == "dry-spell":
        return WeatherTick(rain_rate=0.0, et_demand=1.4 * base)
    if kind == "rain-heavy":
        wet = rng.random() < 0.12
        rain = float(rng.uniform(0.01, 0.04)) if wet else 0.0
        return WeatherTick(rain_rate=rain, et_demand=(0.5 if wet else 1.0) * base)
    if kind == "alternating":
        # even ticks rain, odd ticks dry
        rain = float(rng.uniform(0.01, 0.03)) if index % 2 == 0 else 0.0
        return WeatherTick(rain_rate=rain, et_demand=base)
    raise InvalidInput(f"unknown scenario kind {kind!r}; expected one of {SCENARIO_KINDS}")


def make_scenario(kind: str, length: int, seed: int, dt_hours: float = 1.0) -> WeatherTrace:
    if kind not in _KIND_CODES:
        raise InvalidInput(f"unknown scenario kind {kind!r}; expected one of {SCENARIO_KINDS}")
    if length < 1:
        raise InvalidInput(f"scenario length must be >= 1, got {length}")
    if seed < 0:
        raise InvalidInput(f"seed must be >= 0, got {seed}")
    ticks = [scenario_tick(kind, i, seed, dt_hours) for i in range(length)]
    return WeatherTrace(ticks=tuple(ticks), dt_hours=dt_hours)


def simulate(state: SoilState, irrigation: Sequence[float], trace: WeatherTrace):
    """Run ``step_soil`` over a trace; returns the final state and all reports."""
    reports = []
    for rate, tick in zip(irrigation, trace.ticks):
        state, report = step_soil(state, rate, tick, trace.dt_hours)
        reports.append(report)
    return state, reports
