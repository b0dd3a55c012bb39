"""Scenario specs: fleet composition, room layouts, wristband schedules,
energy channels, occupancy episodes, and fault plans.

Scenarios serialize to JSON (documented in the README) and can be built
from the factory helpers for the standard setups: a 100-egg office, a
multi-household home study, a localization walk, and a co-located
quality rig.
"""

from __future__ import annotations

import json
import random
from dataclasses import dataclass, field, asdict

from ..lwm2m import (OBJ_ILLUMINANCE, OBJ_TEMPERATURE, OBJ_HUMIDITY, OBJ_LOUDNESS,
                     OBJ_DUST, OBJ_PROXIMITY, OBJ_GESTURE)
from .signals import DEFAULT_PROXIMITY_CLAMP_CM, Effect, Episode

HOME_EGGS_MIN = 13
HOME_EGGS_MAX = 22
OFFICE_EGG_COUNT = 100
OFFICE_SAMPLE_MS = 1000
HOME_SAMPLE_MS = 3000
HUB_SAMPLE_MS = 6000
MIN_SAMPLE_MS = 100

# the full observed sensor set of an egg (seven value resources)
ALL_EGG_SENSORS = [OBJ_ILLUMINANCE, OBJ_TEMPERATURE, OBJ_HUMIDITY, OBJ_LOUDNESS,
                   OBJ_DUST, OBJ_PROXIMITY, OBJ_GESTURE]


class ScenarioError(Exception):
    pass


@dataclass
class WristbandSpec:
    band_id: str
    # (t0, t1, room); outside all intervals the band is away from home
    schedule: list[tuple[float, float, str]] = field(default_factory=list)

    def room_at(self, t: float) -> str | None:
        for t0, t1, room in self.schedule:
            if t0 <= t < t1:
                return room
        return None


@dataclass
class EnergyChannelSpec:
    name: str
    standby_w: float = 2.0
    active_w: float = 0.0
    # intervals during which the appliance draws active_w
    schedule: list[tuple[float, float]] = field(default_factory=list)

    def draw_at(self, t: float) -> float:
        for t0, t1 in self.schedule:
            if t0 <= t < t1:
                return self.active_w
        return self.standby_w


@dataclass
class EpisodeSpec:
    t0: float
    t1: float
    room: str | None = None        # applies to eggs in this room
    egg: str | None = None         # or to one endpoint
    effects: dict[int, Effect] = field(default_factory=dict)


@dataclass
class SiteSpec:
    site_id: str                   # raw identifier, never leaves the pseudonym table
    egg_count: int
    rooms: dict[str, tuple[float, float]] = field(default_factory=lambda: {"room": (0.0, 0.0)})
    egg_rooms: list[str] = field(default_factory=list)   # room per egg, round-robin default
    wristbands: list[WristbandSpec] = field(default_factory=list)
    energy_channels: list[EnergyChannelSpec] = field(default_factory=list)
    episodes: list[EpisodeSpec] = field(default_factory=list)

    def room_for_egg(self, i: int) -> str:
        if self.egg_rooms:
            return self.egg_rooms[i % len(self.egg_rooms)]
        names = list(self.rooms)
        return names[i % len(names)]


@dataclass
class FaultSpec:
    kind: str                      # crash | silent | bias
    endpoint: str
    at: float = 0.0                # crash time
    watchdog_delay: float = 5.0    # crash restart delay
    t0: float = 0.0                # silent window start
    t1: float = float("inf")       # silent window end
    object_id: int | None = None   # silent/bias target sensor
    add: float = 0.0               # bias offset


@dataclass
class ScenarioSpec:
    kind: str                      # HOME | OFFICE | WALK | QUALITY
    sites: list[SiteSpec]
    sample_interval_ms: int = HOME_SAMPLE_MS
    hub_interval_ms: int = HUB_SAMPLE_MS
    enabled_sensors: list[int] = field(default_factory=lambda: list(ALL_EGG_SENSORS))
    proximity_clamp_cm: float = DEFAULT_PROXIMITY_CLAMP_CM
    lifetime_s: float = 300.0
    faults: list[FaultSpec] = field(default_factory=list)

    def validate(self) -> None:
        if self.sample_interval_ms < MIN_SAMPLE_MS:
            raise ScenarioError(f"sample interval {self.sample_interval_ms} ms below "
                                f"{MIN_SAMPLE_MS} ms")
        if not 0 < self.proximity_clamp_cm <= 150.0:
            raise ScenarioError(f"proximity clamp {self.proximity_clamp_cm} "
                                "outside (0, 150]")
        if self.kind == "HOME":
            for site in self.sites:
                if not HOME_EGGS_MIN <= site.egg_count <= HOME_EGGS_MAX:
                    raise ScenarioError(
                        f"site {site.site_id}: {site.egg_count} eggs outside "
                        f"[{HOME_EGGS_MIN}, {HOME_EGGS_MAX}]")

    def total_eggs(self) -> int:
        return sum(site.egg_count for site in self.sites)


# ----------------------------------------------------------------------
# JSON round-trip

def scenario_to_json(spec: ScenarioSpec) -> str:
    def encode_effects(effects: dict[int, Effect]) -> dict:
        return {str(obj): {"set": e.set_value, "add": e.add} for obj, e in effects.items()}

    data = asdict(spec)
    for site, site_spec in zip(data["sites"], spec.sites):
        site["episodes"] = [
            {**asdict(ep), "effects": encode_effects(ep.effects)}
            for ep in site_spec.episodes
        ]
    return json.dumps(data, indent=2)


def scenario_from_json(text: str) -> ScenarioSpec:
    try:
        data = json.loads(text)
    except ValueError as exc:
        raise ScenarioError(f"bad scenario JSON: {exc}") from exc

    def decode_effects(raw: dict) -> dict[int, Effect]:
        return {int(obj): Effect(set_value=e.get("set"), add=e.get("add", 0.0))
                for obj, e in raw.items()}

    try:
        sites = []
        for s in data["sites"]:
            sites.append(SiteSpec(
                site_id=s["site_id"],
                egg_count=int(s["egg_count"]),
                rooms={name: (float(xy[0]), float(xy[1]))
                       for name, xy in s.get("rooms", {"room": (0, 0)}).items()},
                egg_rooms=list(s.get("egg_rooms", [])),
                wristbands=[WristbandSpec(w["band_id"],
                                          [(float(a), float(b), r)
                                           for a, b, r in w.get("schedule", [])])
                            for w in s.get("wristbands", [])],
                energy_channels=[EnergyChannelSpec(
                    c["name"], float(c.get("standby_w", 2.0)),
                    float(c.get("active_w", 0.0)),
                    [(float(a), float(b)) for a, b in c.get("schedule", [])])
                    for c in s.get("energy_channels", [])],
                episodes=[EpisodeSpec(
                    t0=float(e["t0"]), t1=float(e["t1"]),
                    room=e.get("room"), egg=e.get("egg"),
                    effects=decode_effects(e.get("effects", {})))
                    for e in s.get("episodes", [])],
            ))
        spec = ScenarioSpec(
            kind=data["kind"],
            sites=sites,
            sample_interval_ms=int(data.get("sample_interval_ms", HOME_SAMPLE_MS)),
            hub_interval_ms=int(data.get("hub_interval_ms", HUB_SAMPLE_MS)),
            enabled_sensors=[int(x) for x in data.get("enabled_sensors", ALL_EGG_SENSORS)],
            proximity_clamp_cm=float(data.get("proximity_clamp_cm",
                                              DEFAULT_PROXIMITY_CLAMP_CM)),
            lifetime_s=float(data.get("lifetime_s", 300.0)),
            faults=[FaultSpec(
                kind=f["kind"], endpoint=f["endpoint"],
                at=float(f.get("at", 0.0)),
                watchdog_delay=float(f.get("watchdog_delay", 5.0)),
                t0=float(f.get("t0", 0.0)), t1=float(f.get("t1", float("inf"))),
                object_id=f.get("object_id"), add=float(f.get("add", 0.0)))
                for f in data.get("faults", [])],
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ScenarioError(f"bad scenario field: {exc!r}") from exc
    spec.validate()
    return spec


def load_scenario(path: str) -> ScenarioSpec:
    with open(path, encoding="utf-8") as fh:
        return scenario_from_json(fh.read())


# ----------------------------------------------------------------------
# factories

def office_scenario(eggs: int = OFFICE_EGG_COUNT,
                    sample_ms: int = OFFICE_SAMPLE_MS) -> ScenarioSpec:
    site = SiteSpec(site_id="office", egg_count=eggs, rooms={"open-plan": (0.0, 0.0)})
    return ScenarioSpec(kind="OFFICE", sites=[site], sample_interval_ms=sample_ms)


HOME_ROOMS = {
    "kitchen": (0.0, 0.0),
    "living-room": (5.0, 0.0),
    "bedroom": (5.0, 6.0),
    "bathroom": (0.0, 6.0),
    "hallway": (2.5, 3.0),
}


def home_scenario(site_count: int = 20, seed: int | str = 0,
                  sensors: list[int] | None = None,
                  sample_ms: int = HOME_SAMPLE_MS,
                  wristbands: bool = False) -> ScenarioSpec:
    rng = random.Random(f"{seed}:home-layout")
    sites = []
    for i in range(site_count):
        egg_count = rng.randint(HOME_EGGS_MIN, HOME_EGGS_MAX)
        bands = []
        if wristbands:
            bands = [WristbandSpec(
                band_id=f"band-0",
                schedule=[(0.0, 1200.0, "kitchen"), (1200.0, 2400.0, "living-room"),
                          (2400.0, 3600.0, "bedroom")])]
        channels = [
            EnergyChannelSpec("washing_machine", standby_w=1.0, active_w=900.0,
                              schedule=[(600.0, 2400.0)]),
            EnergyChannelSpec("tv", standby_w=3.0, active_w=120.0,
                              schedule=[(1800.0, 3600.0)]),
            EnergyChannelSpec("kitchen_appliances", standby_w=5.0, active_w=1500.0,
                              schedule=[(300.0, 900.0)]),
        ]
        episodes = [EpisodeSpec(
            t0=300.0, t1=900.0, room="kitchen",
            effects={OBJ_PROXIMITY: Effect(set_value=45.0),
                     OBJ_LOUDNESS: Effect(add=8.0)})]
        sites.append(SiteSpec(
            site_id=f"H{i + 1:02d}",
            egg_count=egg_count,
            rooms=dict(HOME_ROOMS),
            wristbands=bands,
            energy_channels=channels,
            episodes=episodes,
        ))
    return ScenarioSpec(kind="HOME", sites=sites, sample_interval_ms=sample_ms,
                        enabled_sensors=sensors or [OBJ_TEMPERATURE, OBJ_PROXIMITY])


def walk_scenario(room_count: int = 5, dwell_s: float = 300.0,
                  laps: int = 2) -> ScenarioSpec:
    """One egg per room; one wristband walking room to room."""
    rooms = {f"room-{i}": (float(i * 8), 0.0) for i in range(room_count)}
    schedule = []
    t = 0.0
    for _ in range(laps):
        for i in range(room_count):
            schedule.append((t, t + dwell_s, f"room-{i}"))
            t += dwell_s
    site = SiteSpec(
        site_id="walk-lab",
        egg_count=room_count,
        rooms=rooms,
        egg_rooms=[f"room-{i}" for i in range(room_count)],
        wristbands=[WristbandSpec(band_id="band-0", schedule=schedule)],
    )
    return ScenarioSpec(kind="WALK", sites=[site], sample_interval_ms=HOME_SAMPLE_MS,
                        enabled_sensors=[OBJ_TEMPERATURE])


def quality_scenario(eggs: int = 8, sample_ms: int = 30_000,
                     sensors: list[int] | None = None) -> ScenarioSpec:
    """Co-located rig for pre-deployment cross-comparison."""
    site = SiteSpec(site_id="quality-rig", egg_count=eggs, rooms={"bench": (0.0, 0.0)})
    return ScenarioSpec(kind="QUALITY", sites=[site], sample_interval_ms=sample_ms,
                        enabled_sensors=sensors or [OBJ_TEMPERATURE])


# ----------------------------------------------------------------------
# per-egg config text (the flat key=value provisioning format)

EGG_CONFIG_KEYS = ["egg_id", "server_host", "server_port", "psk_id", "psk_key",
                   "sample_interval_ms", "enabled_sensors", "room",
                   "proximity_clamp_cm", "wifi_ssid", "wifi_pass"]


@dataclass
class EggConfig:
    egg_id: str
    server_host: str
    server_port: int
    psk_id: str
    psk_key: str                   # hex
    sample_interval_ms: int
    enabled_sensors: list[int]
    room: str = "room"
    proximity_clamp_cm: float = DEFAULT_PROXIMITY_CLAMP_CM

    def validate(self) -> None:
        if self.sample_interval_ms < MIN_SAMPLE_MS:
            raise ScenarioError(f"sample_interval_ms {self.sample_interval_ms} "
                                f"below {MIN_SAMPLE_MS}")
        if not 0 < self.proximity_clamp_cm <= 150.0:
            raise ScenarioError(f"proximity_clamp_cm {self.proximity_clamp_cm} "
                                "outside (0, 150]")


def egg_config_text(config: EggConfig, wifi_ssid: str = "testbed",
                    wifi_pass: str = "changeme") -> str:
    lines = [
        f"egg_id={config.egg_id}",
        f"server_host={config.server_host}",
        f"server_port={config.server_port}",
        f"psk_id={config.psk_id}",
        f"psk_key={config.psk_key}",
        f"sample_interval_ms={config.sample_interval_ms}",
        f"enabled_sensors={','.join(str(s) for s in config.enabled_sensors)}",
        f"room={config.room}",
        f"proximity_clamp_cm={config.proximity_clamp_cm:g}",
        # kept for parity with the provisioning checklist; the simulator
        # has no radio to join
        f"wifi_ssid={wifi_ssid}",
        f"wifi_pass={wifi_pass}",
    ]
    return "\n".join(lines) + "\n"


def parse_egg_config(text: str) -> EggConfig:
    values: dict[str, str] = {}
    for line_no, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ScenarioError(f"line {line_no}: expected key=value")
        values[key.strip()] = value.strip()
    try:
        config = EggConfig(
            egg_id=values["egg_id"],
            server_host=values["server_host"],
            server_port=int(values["server_port"]),
            psk_id=values["psk_id"],
            psk_key=values["psk_key"],
            sample_interval_ms=int(values["sample_interval_ms"]),
            enabled_sensors=[int(s) for s in values["enabled_sensors"].split(",") if s],
            room=values.get("room", "room"),
            proximity_clamp_cm=float(values.get("proximity_clamp_cm",
                                                DEFAULT_PROXIMITY_CLAMP_CM)),
        )
    except KeyError as exc:
        raise ScenarioError(f"missing config key {exc.args[0]}") from None
    except ValueError as exc:
        raise ScenarioError(f"bad config value: {exc}") from None
    config.validate()
    return config
