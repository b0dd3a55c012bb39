"""Synthetic sensor traces: daily sinusoid + seeded gaussian noise +
timed episode effects, clamped to physical ranges.

Every sample is a pure function of (seed, egg, sensor, timestamp), so a
rerun with the same scenario and seed regenerates the identical trace.
"""

from __future__ import annotations

import math
import random
from dataclasses import dataclass, field

from ..lwm2m import (OBJ_ILLUMINANCE, OBJ_TEMPERATURE, OBJ_HUMIDITY, OBJ_LOUDNESS,
                     OBJ_DUST, OBJ_PROXIMITY, OBJ_GESTURE, OBJ_POWER)

DAILY_PERIOD = 86400.0
TWO_PI = 2.0 * math.pi

# radio model for wristband beacons
PATH_LOSS_AT_1M_DBM = -45.0
PATH_LOSS_EXPONENT = 2.5
RSSI_SIGMA_DB = 2.0

DEFAULT_PROXIMITY_CLAMP_CM = 150.0


@dataclass(frozen=True)
class SensorSpec:
    baseline: float
    amplitude: float
    sigma: float
    lo: float
    hi: float


# invented trace shapes; only determinism and clamping are load-bearing
DEFAULT_SENSORS: dict[int, SensorSpec] = {
    OBJ_ILLUMINANCE: SensorSpec(120.0, 80.0, 5.0, 0.0, 10000.0),
    OBJ_TEMPERATURE: SensorSpec(21.0, 2.0, 0.1, -20.0, 60.0),
    OBJ_HUMIDITY: SensorSpec(45.0, 8.0, 0.5, 0.0, 100.0),
    OBJ_LOUDNESS: SensorSpec(42.0, 6.0, 1.5, 0.0, 140.0),
    OBJ_DUST: SensorSpec(0.35, 0.1, 0.02, 0.0, 10.0),
    # proximity idles above its clamp so an empty desk reads exactly the max
    OBJ_PROXIMITY: SensorSpec(1000.0, 0.0, 0.0, 10.0, DEFAULT_PROXIMITY_CLAMP_CM),
    OBJ_GESTURE: SensorSpec(0.0, 0.0, 0.0, 0.0, 6.0),
    OBJ_POWER: SensorSpec(2.0, 0.0, 0.2, 0.0, 4000.0),
}


@dataclass(frozen=True)
class Effect:
    """What an episode does to one sensor: replace the base value and/or
    shift it."""
    set_value: float | None = None
    add: float = 0.0


@dataclass(frozen=True)
class Episode:
    t0: float
    t1: float
    effects: dict[int, Effect] = field(default_factory=dict)

    def active(self, t: float) -> bool:
        return self.t0 <= t < self.t1


class SignalModel:
    """Per-egg sample generator."""

    def __init__(self, seed: str | int, egg_id: str,
                 specs: dict[int, SensorSpec] | None = None,
                 episodes: list[Episode] | None = None,
                 proximity_clamp: float = DEFAULT_PROXIMITY_CLAMP_CM) -> None:
        self.seed = seed
        self.egg_id = egg_id
        self.specs = dict(DEFAULT_SENSORS)
        if specs:
            self.specs.update(specs)
        if not 0 < proximity_clamp <= 150.0:
            raise ValueError(f"proximity clamp {proximity_clamp} outside (0, 150]")
        prox = self.specs[OBJ_PROXIMITY]
        self.specs[OBJ_PROXIMITY] = SensorSpec(prox.baseline, prox.amplitude,
                                               prox.sigma, prox.lo, proximity_clamp)
        self.episodes = list(episodes or [])

    def sample(self, object_id: int, t: float):
        """Deterministic sample for one sensor at time t."""
        spec = self.specs[object_id]
        value = spec.baseline + spec.amplitude * math.sin(TWO_PI * t / DAILY_PERIOD)
        for episode in self.episodes:
            if not episode.active(t):
                continue
            effect = episode.effects.get(object_id)
            if effect is None:
                continue
            if effect.set_value is not None:
                value = effect.set_value
            value += effect.add
        if spec.sigma > 0.0:
            rng = random.Random(f"{self.seed}:{self.egg_id}:{object_id}:{round(t * 1000)}")
            value += rng.gauss(0.0, spec.sigma)
        value = min(max(value, spec.lo), spec.hi)
        if object_id == OBJ_GESTURE:
            return int(round(value))
        return value


def rssi_at(distance_m: float, seed: str, sigma: float = RSSI_SIGMA_DB) -> float:
    """Log-distance path loss with seeded shadowing; d below 1 m
    (same room) is treated as 1 m."""
    d = max(float(distance_m), 1.0)
    value = PATH_LOSS_AT_1M_DBM - 10.0 * PATH_LOSS_EXPONENT * math.log10(d)
    if sigma > 0.0:
        value += random.Random(seed).gauss(0.0, sigma)
    return value


def room_distance(layout: dict[str, tuple[float, float]], a: str, b: str) -> float:
    """Euclidean distance in meters between two rooms of a layout."""
    if a == b:
        return 1.0
    xa, ya = layout[a]
    xb, yb = layout[b]
    return math.hypot(xa - xb, ya - yb)
