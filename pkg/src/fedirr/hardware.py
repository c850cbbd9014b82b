"""Software twins of the node hardware.

* resistive dual-probe moisture sensor read through a voltage divider into a
  10-bit ADC, plus the comparator digital output;
* active-low relay driving the irrigation pump;
* the 555-style SR latch that refills the water tank between a low
  threshold and maximum capacity.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, replace

import numpy as np

from .errors import InvalidInput

ADC_MAX = 1023


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


@dataclass(frozen=True)
class SensorCalib:
    r_dry: float = 100_000.0
    r_wet: float = 1_000.0
    divider_r: float = 20_000.0
    vcc: float = 5.0
    noise_std: float = 4.0
    # ~0.20 volumetric moisture on the noiseless curve of the defaults above
    threshold_counts: int = 342

    def __post_init__(self):
        for name in ("r_dry", "r_wet", "divider_r", "vcc", "noise_std"):
            if not math.isfinite(getattr(self, name)):
                raise InvalidInput(f"{name} must be finite")
        if not self.r_dry > self.r_wet > 0:
            raise InvalidInput(f"need r_dry > r_wet > 0, got r_dry={self.r_dry}, r_wet={self.r_wet}")
        if self.divider_r <= 0:
            raise InvalidInput(f"divider_r must be > 0, got {self.divider_r}")
        if self.vcc <= 0:
            raise InvalidInput(f"vcc must be > 0, got {self.vcc}")
        if self.noise_std < 0:
            raise InvalidInput(f"noise_std must be >= 0, got {self.noise_std}")
        if isinstance(self.threshold_counts, bool) or not isinstance(self.threshold_counts, int):
            raise InvalidInput(f"threshold_counts must be an integer, got {self.threshold_counts!r}")
        if not 0 <= self.threshold_counts <= ADC_MAX:
            raise InvalidInput(f"threshold_counts must be in 0..{ADC_MAX}, got {self.threshold_counts}")


@dataclass(frozen=True)
class SensorFrame:
    analog_raw: int
    digital_dry: bool
    tick: int

    def __post_init__(self):
        if not 0 <= self.analog_raw <= ADC_MAX:
            raise InvalidInput(f"analog_raw out of range: {self.analog_raw}")


class RelayLine(enum.Enum):
    LOW = 0
    HIGH = 1


# the relay board is active low: LOW energizes the coil and closes NO-COM
PUMP_ON_LINE = RelayLine.LOW
PUMP_OFF_LINE = RelayLine.HIGH


@dataclass(frozen=True)
class TankState:
    level: float = 300.0
    capacity_max: float = 500.0
    threshold_low: float = 100.0
    filling: bool = False
    inflow_rate: float = 120.0
    pump_draw: float = 360.0

    def __post_init__(self):
        for name in ("level", "capacity_max", "threshold_low", "inflow_rate", "pump_draw"):
            if not math.isfinite(getattr(self, name)):
                raise InvalidInput(f"tank {name} must be finite")
        if not 0 <= self.threshold_low < self.capacity_max:
            raise InvalidInput(
                f"need 0 <= threshold_low < capacity_max, got {self.threshold_low}, {self.capacity_max}")
        if not 0 <= self.level <= self.capacity_max:
            raise InvalidInput(f"tank level {self.level} outside [0, {self.capacity_max}]")
        if self.inflow_rate < 0 or self.pump_draw < 0:
            raise InvalidInput("tank rates must be >= 0")


def _check_moisture(moisture: float) -> None:
    if not 0.0 <= moisture <= 1.0:
        raise InvalidInput(f"moisture must be in [0, 1], got {moisture}")


def soil_resistance(moisture: float, calib: SensorCalib) -> float:
    """Probe resistance, log-linear between ``r_dry`` (m=0) and ``r_wet`` (m=1)."""
    _check_moisture(moisture)
    return calib.r_dry * (calib.r_wet / calib.r_dry) ** moisture


def expected_counts(moisture: float, calib: SensorCalib) -> float:
    """Noiseless, unquantized ADC reading for a moisture fraction."""
    r = soil_resistance(moisture, calib)
    v = calib.vcc * calib.divider_r / (calib.divider_r + r)
    return ADC_MAX * v / calib.vcc


def analog_read(moisture: float, calib: SensorCalib, rng: np.random.Generator | None = None) -> int:
    """Quantized 10-bit reading; noise is drawn from ``rng`` when ``noise_std > 0``."""
    counts = expected_counts(moisture, calib)
    if calib.noise_std > 0:
        if rng is None:
            raise InvalidInput("a noisy sensor needs an explicit rng")
        counts += rng.normal(0.0, calib.noise_std)
    return min(ADC_MAX, max(0, round_half_up(counts)))


def digital_read(counts: int, calib: SensorCalib) -> bool:
    """Comparator output: True ('1', dry) when counts fall strictly below threshold."""
    return counts < calib.threshold_counts


def estimate_moisture(counts: float, calib: SensorCalib) -> float:
    """Invert the noiseless calibration curve; result clamped to [0, 1]."""
    if counts <= 0:
        return 0.0
    if counts >= ADC_MAX:
        return 1.0
    r = calib.divider_r * (ADC_MAX / counts - 1.0)
    m = math.log(r / calib.r_dry) / math.log(calib.r_wet / calib.r_dry)
    return min(1.0, max(0.0, m))


def threshold_for_moisture(moisture: float, calib: SensorCalib) -> int:
    return round_half_up(expected_counts(moisture, calib))


def set_threshold(calib: SensorCalib, pot_fraction: float) -> SensorCalib:
    """Potentiometer position (0..1) to comparator threshold counts."""
    if not 0.0 <= pot_fraction <= 1.0:
        raise InvalidInput(f"pot_fraction must be in [0, 1], got {pot_fraction}")
    return replace(calib, threshold_counts=round_half_up(ADC_MAX * pot_fraction))


def sense(moisture: float, tick: int, calib: SensorCalib, rng=None) -> SensorFrame:
    raw = analog_read(moisture, calib, rng)
    return SensorFrame(analog_raw=raw, digital_dry=digital_read(raw, calib), tick=tick)


def pump_command(dry: bool, tank: TankState) -> RelayLine:
    if dry and tank.level > 0:
        return PUMP_ON_LINE
    return PUMP_OFF_LINE


def step_tank(tank: TankState, pump_on: bool, dt_hours: float) -> TankState:
    """One step of the fill latch and tank level."""
    if not (dt_hours > 0 and math.isfinite(dt_hours)):
        raise InvalidInput(f"dt_hours must be > 0, got {dt_hours}")
    filling = tank.filling
    if tank.level <= tank.threshold_low:
        filling = True
    if tank.level >= tank.capacity_max:
        filling = False
    level = tank.level
    if filling:
        level += tank.inflow_rate * dt_hours
    if pump_on:
        level -= tank.pump_draw * dt_hours
    level = min(tank.capacity_max, max(0.0, level))
    return replace(tank, level=level, filling=filling)
