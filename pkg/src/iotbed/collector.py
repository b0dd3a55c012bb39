"""Data-collection application: starts observations on registration,
pseudonymizes notification records, publishes readings to the live
exchange, and supervises pipeline workers.

Privacy layout: raw participant/site identifiers exist in exactly one
place, the pseudonym table file. Devices speak with neutral endpoint
names carrying only a site index ("s03-egg-014"), so nothing that
reaches the broker, the store, or an export can contain a raw ID.
"""

from __future__ import annotations

import json
import logging
import os
import random
import re
import secrets
import threading
from collections import deque
from dataclasses import dataclass, field

from .clock import Scheduler
from . import broker as broker_mod
from . import lwm2m
from .lwm2m import Lwm2mServer, Observation

log = logging.getLogger(__name__)

OBSERVE_RETRIES = 3
OBSERVE_RETRY_BASE = 2.0    # 2 s, then 4 s, then 8 s

# endpoint names carry the site as an index prefix: s<NN>-egg-<MMM>
_SITE_PREFIX = re.compile(r"^s(\d+)-")


class CollectorError(Exception):
    pass


# ----------------------------------------------------------------------
# pseudonym table

class PseudonymTable:
    """Single file mapping raw site IDs and device endpoints to random
    128-bit tokens. The file is chmod 600; everything downstream sees
    tokens only."""

    def __init__(self, path: str | None = None, rng: random.Random | None = None) -> None:
        self.path = path
        self._rng = rng
        self._lock = threading.Lock()
        self._sites: dict[str, dict] = {}      # raw id -> {"token", "index"}
        self._devices: dict[str, str] = {}     # endpoint -> token
        self._site_by_index: dict[int, str] = {}
        if path is not None and os.path.exists(path):
            self._load()

    def _token(self) -> str:
        if self._rng is not None:
            return "%032x" % self._rng.getrandbits(128)
        return secrets.token_hex(16)

    def _load(self) -> None:
        with open(self.path, encoding="utf-8") as fh:
            data = json.load(fh)
        self._sites = data.get("sites", {})
        self._devices = data.get("devices", {})
        self._site_by_index = {info["index"]: info["token"]
                               for info in self._sites.values()}

    def _save(self) -> None:
        if self.path is None:
            return
        tmp = self.path + ".tmp"
        with open(tmp, "w", encoding="utf-8") as fh:
            json.dump({"sites": self._sites, "devices": self._devices}, fh, indent=1)
        os.chmod(tmp, 0o600)
        os.replace(tmp, self.path)

    def register_site(self, raw_id: str, index: int) -> str:
        """Assign (or return) the token for a raw site identifier."""
        with self._lock:
            info = self._sites.get(raw_id)
            if info is None:
                info = {"token": self._token(), "index": index}
                self._sites[raw_id] = info
                self._site_by_index[index] = info["token"]
                self._save()
            return info["token"]

    def site_token(self, index: int) -> str | None:
        with self._lock:
            return self._site_by_index.get(index)

    def device_token(self, endpoint: str) -> str:
        with self._lock:
            token = self._devices.get(endpoint)
            if token is None:
                token = self._token()
                self._devices[endpoint] = token
                self._save()
            return token

    def raw_site_ids(self) -> list[str]:
        with self._lock:
            return list(self._sites)


def site_index_of(endpoint: str) -> int | None:
    m = _SITE_PREFIX.match(endpoint)
    return int(m.group(1)) if m else None


# ----------------------------------------------------------------------
# blacklist

class Blacklist:
    """Endpoints or (endpoint, path) pairs that must not be observed.
    Persisted as lines "endpoint" or "endpoint path"."""

    def __init__(self, path: str | None = None) -> None:
        self.path = path
        self._lock = threading.Lock()
        self._entries: set[tuple[str, str | None]] = set()
        self.on_change = None    # fn(), wired by the collector
        if path is not None and os.path.exists(path):
            self.load()

    def load(self) -> None:
        entries: set[tuple[str, str | None]] = set()
        with open(self.path, encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                parts = line.split()
                entries.add((parts[0], parts[1] if len(parts) > 1 else None))
        with self._lock:
            self._entries = entries

    def save(self) -> None:
        if self.path is None:
            return
        with self._lock:
            lines = sorted(f"{ep} {p}" if p else ep for ep, p in self._entries)
        tmp = self.path + ".tmp"
        with open(tmp, "w", encoding="utf-8") as fh:
            fh.write("\n".join(lines) + ("\n" if lines else ""))
        os.replace(tmp, self.path)

    def add(self, endpoint: str, path: str | None = None) -> None:
        with self._lock:
            self._entries.add((endpoint, path))
        self.save()
        if self.on_change is not None:
            self.on_change()

    def remove(self, endpoint: str, path: str | None = None) -> bool:
        with self._lock:
            try:
                self._entries.remove((endpoint, path))
                found = True
            except KeyError:
                found = False
        if found:
            self.save()
            if self.on_change is not None:
                self.on_change()
        return found

    def entries(self) -> list[tuple[str, str | None]]:
        with self._lock:
            return sorted(self._entries, key=lambda e: (e[0], e[1] or ""))

    def is_blocked(self, endpoint: str, path: str) -> bool:
        """True when the endpoint as a whole, or a prefix of the path
        (object, instance, or resource level), is blacklisted."""
        with self._lock:
            if (endpoint, None) in self._entries:
                return True
            for ep, entry_path in self._entries:
                if ep != endpoint or entry_path is None:
                    continue
                if path == entry_path or path.startswith(entry_path.rstrip("/") + "/"):
                    return True
        return False


# ----------------------------------------------------------------------
# collector

@dataclass
class NotifyPolicy:
    """Per-device-kind notification periods in seconds."""
    egg_period: float = 3.0
    hub_period: float = 6.0

    def period_for(self, endpoint: str) -> float:
        return self.hub_period if "hub" in endpoint else self.egg_period


class Collector:
    """Reacts to control events, runs the pseudonymizing ingest path."""

    def __init__(self, scheduler: Scheduler, server: Lwm2mServer,
                 broker: broker_mod.Broker, pseudonyms: PseudonymTable,
                 blacklist: Blacklist | None = None,
                 policy: NotifyPolicy | None = None,
                 dead_letter_path: str | None = None) -> None:
        self.scheduler = scheduler
        self.server = server
        self.broker = broker
        self.pseudonyms = pseudonyms
        self.blacklist = blacklist or Blacklist()
        self.policy = policy or NotifyPolicy()
        self.dead_letter_path = dead_letter_path
        self.stats = {
            "notifications": 0,
            "records": 0,
            "published": 0,
            "dead_letters": 0,
            "observe_retries": 0,
            "sync_writes": 0,
        }
        # remembered links per live endpoint, for blacklist-change resync
        self._links: dict[str, list[tuple[int, int]]] = {}
        self._site_cache: dict[str, str] = {}
        self._device_cache: dict[str, str] = {}
        server.notification_handler = self._on_notification
        server.observe_failed = self._on_observe_failed
        self._retry_counts: dict[tuple[str, str], int] = {}
        self._control_consumer: broker_mod.Consumer | None = None
        self.blacklist.on_change = self.resync_observations

    # ------------------------------------------------------------------
    # control plane

    def attach(self, queue: str = "collector-control") -> None:
        """Start consuming control events from the broker."""
        self._control_consumer = self.broker.subscribe(
            broker_mod.CONTROL, "control.#", queue, handler=self._on_control)

    def _on_control(self, message: broker_mod.Message) -> None:
        consumer = self._control_consumer
        try:
            event = json.loads(message.payload.decode("utf-8"))
            kind = event.get("kind")
            if kind == "REGISTERED":
                self.on_registration(event)
            elif kind == "DEREGISTERED":
                self.on_deregistration(event)
        except Exception:
            log.exception("control event handling failed")
        finally:
            consumer.ack(message)

    def on_registration(self, event: dict) -> list[Observation]:
        """Start observations for every advertised sensor resource that
        is not blacklisted, then sync the device clock."""
        endpoint = event["endpoint"]
        links = [self._parse_link(l) for l in event.get("links", [])]
        links = [l for l in links if l is not None]
        self._links[endpoint] = links
        started = []
        period = self.policy.period_for(endpoint)
        for obj, inst in links:
            path = self._observe_path(obj, inst)
            if path is None:
                continue
            if self.blacklist.is_blocked(endpoint, path):
                continue
            self._retry_counts.pop((endpoint, path), None)
            try:
                started.append(self.server.observe(endpoint, path, period))
            except lwm2m.NotRegistered:
                return started
        self.stats["sync_writes"] += 1
        try:
            self.server.sync_time(endpoint)
        except lwm2m.NotRegistered:
            pass
        return started

    def on_deregistration(self, event: dict) -> None:
        endpoint = event["endpoint"]
        self._links.pop(endpoint, None)
        self.server.drop_observations(endpoint)

    @staticmethod
    def _parse_link(link: str) -> tuple[int, int] | None:
        try:
            ids = lwm2m.parse_path(link)
        except lwm2m.PathNotFound:
            return None
        return (ids[0], ids[1]) if len(ids) == 2 else None

    @staticmethod
    def _observe_path(obj: int, inst: int) -> str | None:
        res = lwm2m.value_resource_for(obj)
        if res is None:
            return None
        return f"/{obj}/{inst}/{res}"

    def resync_observations(self) -> None:
        """Bring the active observation set back to advertised \\ blacklist
        after a blacklist edit."""
        for endpoint, links in list(self._links.items()):
            period = self.policy.period_for(endpoint)
            for obj, inst in links:
                path = self._observe_path(obj, inst)
                if path is None:
                    continue
                obs = self.server.observation(endpoint, path)
                blocked = self.blacklist.is_blocked(endpoint, path)
                if blocked and obs is not None and obs.state in ("pending", "active"):
                    self.server.cancel_observation(endpoint, path)
                elif not blocked and (obs is None or obs.state not in ("pending", "active")):
                    try:
                        self.server.observe(endpoint, path, period)
                    except lwm2m.NotRegistered:
                        break

    def _on_observe_failed(self, obs: Observation) -> None:
        key = (obs.endpoint, obs.path)
        attempt = self._retry_counts.get(key, 0)
        if attempt >= OBSERVE_RETRIES:
            log.error("giving up observing %s %s after %d retries",
                      obs.endpoint, obs.path, attempt)
            return
        self._retry_counts[key] = attempt + 1
        self.stats["observe_retries"] += 1
        delay = OBSERVE_RETRY_BASE * (2 ** attempt)
        self.scheduler.call_later(delay, self._retry_observe, obs.endpoint, obs.path,
                                  obs.notify_period)

    def _retry_observe(self, endpoint: str, path: str, period: float) -> None:
        if self.blacklist.is_blocked(endpoint, path):
            return
        current = self.server.observation(endpoint, path)
        if current is not None and current.state in ("pending", "active"):
            return
        try:
            self.server.observe(endpoint, path, period)
        except lwm2m.NotRegistered:
            pass

    # ------------------------------------------------------------------
    # data plane

    def _on_notification(self, endpoint: str, path: str, payload: bytes,
                         seq: int | None) -> None:
        self.stats["notifications"] += 1
        try:
            records = json.loads(payload.decode("utf-8"))
            if not isinstance(records, list):
                raise ValueError("record list expected")
        except (ValueError, UnicodeDecodeError) as exc:
            self._dead_letter(endpoint, payload, f"bad payload: {exc}")
            return
        for record in records:
            try:
                reading = self._to_reading(endpoint, record)
            except (KeyError, ValueError, TypeError) as exc:
                self._dead_letter(endpoint, payload, f"bad record: {exc}")
                continue
            self.stats["records"] += 1
            key = f"live.{endpoint}.{reading['object']}"
            self.broker.publish(broker_mod.LIVE_DATA, key,
                                json.dumps(reading, separators=(",", ":")).encode())
            self.stats["published"] += 1

    def _to_reading(self, endpoint: str, record: dict) -> dict:
        ids = lwm2m.parse_path(record["n"])
        if len(ids) != 3:
            raise ValueError(f"record path {record['n']!r} not a resource")
        value = record["v"]
        if not isinstance(value, (int, float, str, bool)):
            raise ValueError("unsupported value type")
        device_time = float(record["t"])
        return {
            "pseudonym": self._device_token(endpoint),
            "endpoint": endpoint,
            "object": ids[0],
            "instance": ids[1],
            "resource": ids[2],
            "value": value,
            "unit": lwm2m.unit_for(ids[0]),
            "device_time": device_time,
            "server_time": self.scheduler.now(),
            "site": self._site_token(endpoint),
        }

    def _device_token(self, endpoint: str) -> str:
        token = self._device_cache.get(endpoint)
        if token is None:
            token = self.pseudonyms.device_token(endpoint)
            self._device_cache[endpoint] = token
        return token

    def _site_token(self, endpoint: str) -> str:
        token = self._site_cache.get(endpoint)
        if token is None:
            index = site_index_of(endpoint)
            token = (self.pseudonyms.site_token(index) or "") if index is not None else ""
            self._site_cache[endpoint] = token
        return token

    def _dead_letter(self, endpoint: str, payload: bytes, reason: str) -> None:
        self.stats["dead_letters"] += 1
        if self.dead_letter_path is None:
            return
        entry = {
            "time": self.scheduler.now(),
            "endpoint": endpoint,
            "reason": reason,
            "payload": payload.decode("utf-8", "replace"),
        }
        with open(self.dead_letter_path, "a", encoding="utf-8") as fh:
            fh.write(json.dumps(entry) + "\n")


# ----------------------------------------------------------------------
# worker supervision

RESTART_DELAY = 1.0
GIVE_UP_RESTARTS = 10
GIVE_UP_WINDOW = 60.0


@dataclass
class Worker:
    name: str
    subscribe: object                  # fn() -> Consumer
    handler: object                    # fn(consumer, message)
    state: str = "stopped"             # stopped|running|restarting|failed
    restarts: int = 0
    last_error: str = ""
    consumer: broker_mod.Consumer | None = field(default=None, repr=False)
    crash_times: deque = field(default_factory=deque, repr=False)


class Supervisor:
    """Respawns crashed queue workers; gives up on crash loops."""

    def __init__(self, scheduler: Scheduler, restart_delay: float = RESTART_DELAY,
                 give_up_restarts: int = GIVE_UP_RESTARTS,
                 give_up_window: float = GIVE_UP_WINDOW) -> None:
        self.scheduler = scheduler
        self.restart_delay = restart_delay
        self.give_up_restarts = give_up_restarts
        self.give_up_window = give_up_window
        self.workers: dict[str, Worker] = {}

    def add_worker(self, name: str, subscribe, handler) -> Worker:
        worker = Worker(name=name, subscribe=subscribe, handler=handler)
        self.workers[name] = worker
        self._spawn(worker)
        return worker

    def _spawn(self, worker: Worker) -> None:
        worker.consumer = worker.subscribe()
        worker.state = "running"

        def guarded(message: broker_mod.Message) -> None:
            try:
                worker.handler(worker.consumer, message)
            except Exception as exc:
                self._on_crash(worker, exc)

        worker.consumer.attach(guarded)

    def _on_crash(self, worker: Worker, exc: Exception) -> None:
        now = self.scheduler.now()
        worker.last_error = repr(exc)
        worker.crash_times.append(now)
        while worker.crash_times and now - worker.crash_times[0] > self.give_up_window:
            worker.crash_times.popleft()
        if worker.consumer is not None:
            worker.consumer.detach()
            worker.consumer = None
        if len(worker.crash_times) > self.give_up_restarts:
            worker.state = "failed"
            log.error("worker %s crash-looping, giving up: %s", worker.name, exc)
            return
        worker.state = "restarting"
        log.warning("worker %s crashed (%s), restarting in %.1fs",
                    worker.name, exc, self.restart_delay)
        self.scheduler.call_later(self.restart_delay, self._restart, worker)

    def _restart(self, worker: Worker) -> None:
        if worker.state != "restarting":
            return
        worker.restarts += 1
        self._spawn(worker)

    def kill(self, name: str, reason: str = "killed") -> None:
        """Simulate a worker crash from outside (fault injection)."""
        worker = self.workers[name]
        if worker.state == "running":
            self._on_crash(worker, RuntimeError(reason))

    def health(self) -> dict:
        return {
            "ok": all(w.state != "failed" for w in self.workers.values()),
            "workers": {
                name: {"state": w.state, "restarts": w.restarts,
                       "last_error": w.last_error}
                for name, w in self.workers.items()
            },
        }
