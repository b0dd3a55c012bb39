"""Presence from wristband RSSI, the desk-comfort rules engine, and the
pre-deployment data-quality comparator.

All three are pure consumers of reading dicts as published on the live
exchange; time comes from the readings themselves, so replaying a
recorded stream reproduces identical outputs.
"""

from __future__ import annotations

import json
import logging
import math
import statistics
from dataclasses import dataclass, field

from .lwm2m import (OBJ_WRISTBAND_RSSI, OBJ_PROXIMITY, OBJ_TEMPERATURE,
                    OBJ_HUMIDITY, OBJ_ILLUMINANCE, OBJ_DUST, OBJ_BUZZER,
                    RES_ON_OFF)

log = logging.getLogger(__name__)


class AnalyticsError(Exception):
    pass


class StalePreference(AnalyticsError):
    pass


class InsufficientData(AnalyticsError):
    pass


# ----------------------------------------------------------------------
# presence / rough localization

EWMA_ALPHA = 0.3
PRESENCE_THRESHOLD_DBM = -85.0


@dataclass
class PresenceEstimate:
    band: str
    present: bool
    nearest_egg: str | None
    smoothed: dict[str, float]


class PresenceTracker:
    """Smooths per-(band, egg) RSSI and names the nearest egg."""

    def __init__(self, alpha: float = EWMA_ALPHA,
                 threshold: float = PRESENCE_THRESHOLD_DBM) -> None:
        self.alpha = alpha
        self.threshold = threshold
        self._smoothed: dict[str, dict[str, float]] = {}

    def update(self, reading: dict) -> PresenceEstimate | None:
        """Feed one wristband-RSSI reading; returns the new estimate for
        that band, or None for non-wristband readings."""
        if reading.get("object") != OBJ_WRISTBAND_RSSI:
            return None
        band = f"band-{reading['instance']}"
        egg = reading["endpoint"]
        value = float(reading["value"])
        per_egg = self._smoothed.setdefault(band, {})
        prev = per_egg.get(egg)
        per_egg[egg] = value if prev is None else self.alpha * value + (1 - self.alpha) * prev
        return self.estimate(band)

    def estimate(self, band: str) -> PresenceEstimate:
        per_egg = self._smoothed.get(band, {})
        if not per_egg:
            return PresenceEstimate(band, False, None, {})
        # ties break on endpoint name so the argmax is stable
        nearest, best = min(per_egg.items(), key=lambda kv: (-kv[1], kv[0]))
        present = best > self.threshold
        return PresenceEstimate(band, present, nearest if present else None,
                                dict(per_egg))

    def bands(self) -> list[str]:
        return sorted(self._smoothed)


# ----------------------------------------------------------------------
# comfort engine

OCCUPANCY_DISTANCE_CM = 75.0
OCCUPANCY_MAX_AGE = 10.0
VIOLATION_STREAK = 3
EVENT_COOLDOWN = 600.0

COMFORT_VARIABLES = {
    "temperature": OBJ_TEMPERATURE,
    "humidity": OBJ_HUMIDITY,
    "light": OBJ_ILLUMINANCE,
    "dust": OBJ_DUST,
}
_OBJECT_TO_VARIABLE = {obj: name for name, obj in COMFORT_VARIABLES.items()}

DEFAULT_TOLERANCES = {
    "temperature": 2.0,
    "humidity": 10.0,
    "light": 50.0,
    "dust": 0.05,
}

_ADVICE = {
    "temperature": "consider adjusting the air conditioning or opening a window",
    "humidity": "consider ventilating the room",
    "light": "consider adjusting the blinds or desk lamp",
    "dust": "consider airing the room",
}


@dataclass
class ComfortPreference:
    """The six dashboard fields: desk plus four targets plus email."""
    desk: str
    temperature: float
    humidity: float
    light: float
    dust: float
    email: str
    monitoring: bool = False
    tolerances: dict[str, float] = field(default_factory=lambda: dict(DEFAULT_TOLERANCES))

    def target(self, variable: str) -> float:
        return getattr(self, variable)


@dataclass
class ComfortEvent:
    desk: str
    variable: str
    measured: float
    target: float
    fired_at: float
    message: str
    buzzer_executed: bool = False
    email_record: dict | None = None


@dataclass
class _DeskState:
    last_proximity: float | None = None
    last_proximity_at: float | None = None
    streaks: dict[str, int] = field(default_factory=dict)
    last_event_at: dict[str, float] = field(default_factory=dict)


class ComfortEngine:
    """Occupancy-gated tolerance monitoring per desk.

    A desk counts as occupied when its latest proximity reading is
    strictly below 75 cm and no older than 10 s. A variable fires after
    3 consecutive out-of-band samples while occupied, at most once per
    600 s cooldown. Side effects (buzzer, email) are delegated to the
    on_event hook so replays stay pure."""

    def __init__(self) -> None:
        self.preferences: dict[str, ComfortPreference] = {}
        self._state: dict[str, _DeskState] = {}
        self.on_event = None    # fn(event), performs buzzer/email
        self.events: list[ComfortEvent] = []

    # --- preference management ---------------------------------------

    def set_preference(self, pref: ComfortPreference) -> None:
        self.preferences[pref.desk] = pref
        self._state.setdefault(pref.desk, _DeskState())

    def get_preference(self, desk: str) -> ComfortPreference:
        try:
            return self.preferences[desk]
        except KeyError:
            raise StalePreference(desk) from None

    def start(self, desk: str) -> None:
        self.get_preference(desk).monitoring = True

    def stop(self, desk: str) -> None:
        self.get_preference(desk).monitoring = False
        state = self._state.get(desk)
        if state is not None:
            state.streaks.clear()

    # --- stream consumption ------------------------------------------

    def occupied(self, desk: str, now: float) -> bool:
        state = self._state.get(desk)
        if state is None or state.last_proximity is None:
            return False
        return (state.last_proximity < OCCUPANCY_DISTANCE_CM
                and now - state.last_proximity_at <= OCCUPANCY_MAX_AGE)

    def update(self, reading: dict) -> ComfortEvent | None:
        """Feed one reading; returns the event it fired, if any."""
        desk = reading.get("endpoint")
        pref = self.preferences.get(desk)
        if pref is None:
            return None
        state = self._state[desk]
        obj = reading.get("object")
        now = float(reading["device_time"])
        if obj == OBJ_PROXIMITY:
            state.last_proximity = float(reading["value"])
            state.last_proximity_at = now
            return None
        variable = _OBJECT_TO_VARIABLE.get(obj)
        if variable is None or not pref.monitoring:
            return None
        measured = float(reading["value"])
        target = pref.target(variable)
        tolerance = pref.tolerances.get(variable, DEFAULT_TOLERANCES[variable])
        violating = self.occupied(desk, now) and abs(measured - target) > tolerance
        if not violating:
            state.streaks[variable] = 0
            return None
        streak = state.streaks.get(variable, 0) + 1
        state.streaks[variable] = streak
        if streak < VIOLATION_STREAK:
            return None
        last = state.last_event_at.get(variable)
        if last is not None and now - last < EVENT_COOLDOWN:
            return None
        state.last_event_at[variable] = now
        event = ComfortEvent(
            desk=desk, variable=variable, measured=measured, target=target,
            fired_at=now,
            message=(f"{variable} {measured:g} outside target {target:g}"
                     f"±{tolerance:g} at {desk}; {_ADVICE[variable]}"),
        )
        self.events.append(event)
        if self.on_event is not None:
            try:
                self.on_event(event)
            except Exception:
                log.exception("comfort event hook failed")
        return event


class EmailSink:
    """Append-only notification sink standing in for outbound mail."""

    def __init__(self, path: str | None = None) -> None:
        self.path = path
        self.records: list[dict] = []

    def send(self, pref: ComfortPreference, event: ComfortEvent) -> dict:
        record = {
            "fired_at": event.fired_at,
            "desk": event.desk,
            "variable": event.variable,
            "measured": event.measured,
            "target": event.target,
            "to": pref.email,
            "message": event.message,
        }
        self.records.append(record)
        if self.path is not None:
            with open(self.path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(record) + "\n")
        return record


def buzzer_path() -> str:
    return f"/{OBJ_BUZZER}/0/{RES_ON_OFF}"


# ----------------------------------------------------------------------
# data-quality comparator

QUALITY_MAD_FACTOR = 3.0
QUALITY_MIN_RATIO = 0.95
QUALITY_MIN_READINGS = 100


@dataclass
class QualityFlag:
    sensor: int
    reason: str          # "bias" or "dropout"
    mean: float
    median: float
    mad: float
    ratio: float


@dataclass
class QualityVerdict:
    endpoint: str
    flags: list[QualityFlag] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.flags


def quality_compare(samples: dict[str, dict[int, list[float]]],
                    expected_per_egg: int) -> dict[str, QualityVerdict]:
    """Cross-compare co-located eggs per sensor.

    samples: endpoint -> object_id -> values within the window.
    Flags an egg when its per-sensor mean deviates from the median of
    means by more than 3 MAD, or when it delivered fewer than 95% of the
    expected readings."""
    eggs = sorted(samples)
    if not eggs:
        return {}
    sensors = sorted({obj for per_egg in samples.values() for obj in per_egg})
    for egg in eggs:
        for sensor in sensors:
            if len(samples[egg].get(sensor, [])) < QUALITY_MIN_READINGS:
                raise InsufficientData(
                    f"{egg} sensor {sensor}: "
                    f"{len(samples[egg].get(sensor, []))} readings")
    verdicts = {egg: QualityVerdict(endpoint=egg) for egg in eggs}
    for sensor in sensors:
        means = {egg: statistics.fmean(samples[egg][sensor]) for egg in eggs}
        med = statistics.median(means.values())
        mad = statistics.median(abs(m - med) for m in means.values())
        for egg in eggs:
            ratio = len(samples[egg][sensor]) / expected_per_egg
            deviation = abs(means[egg] - med)
            if ratio < QUALITY_MIN_RATIO:
                verdicts[egg].flags.append(QualityFlag(
                    sensor, "dropout", means[egg], med, mad, ratio))
            elif deviation > QUALITY_MAD_FACTOR * mad:
                verdicts[egg].flags.append(QualityFlag(
                    sensor, "bias", means[egg], med, mad, ratio))
    return verdicts


def quality_report_csv(verdicts: dict[str, QualityVerdict]) -> str:
    lines = ["endpoint,sensor,reason,mean,median,mad,ratio"]
    for egg in sorted(verdicts):
        verdict = verdicts[egg]
        if not verdict.flags:
            lines.append(f"{egg},,ok,,,,")
            continue
        for flag in verdict.flags:
            lines.append(f"{egg},{flag.sensor},{flag.reason},{flag.mean:.6g},"
                         f"{flag.median:.6g},{flag.mad:.6g},{flag.ratio:.4f}")
    return "\n".join(lines) + "\n"
