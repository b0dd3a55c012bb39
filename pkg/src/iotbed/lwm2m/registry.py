"""Registration registry with lifetime-based expiry.

A registration is a lease: it lives from its last update until
last_update + lifetime, at which instant it expires unless refreshed.
An update processed at exactly the expiry instant wins over the expiry
sweep scheduled at the same instant only if it is delivered first; the
scheduler's FIFO ordering for same-instant callbacks makes that
deterministic.

Lifecycle changes are reported to an event callback as dicts shaped like
{"kind": "REGISTERED", "endpoint": ..., ...}, which the application
republishes on the control exchange.
"""

from __future__ import annotations

import logging
import threading
from dataclasses import dataclass, field

from ..clock import Scheduler, Timer
from ..transport import Address

log = logging.getLogger(__name__)

DEFAULT_LIFETIME = 300.0


class RegistryError(Exception):
    pass


class NotRegistered(RegistryError):
    pass


@dataclass
class Registration:
    registration_id: str
    endpoint: str
    lifetime: float
    address: Address
    links: list[tuple[int, int]]
    registered_at: float
    last_update: float
    expiry_timer: Timer | None = field(default=None, repr=False)

    def expires_at(self) -> float:
        return self.last_update + self.lifetime


class RegistrationRegistry:
    """Tracks live registrations, expires stale ones, emits lifecycle events."""

    def __init__(self, scheduler: Scheduler) -> None:
        self._scheduler = scheduler
        self._lock = threading.RLock()
        self._by_id: dict[str, Registration] = {}
        self._by_endpoint: dict[str, Registration] = {}
        self._next_id = 1
        self.on_event = None    # fn(event_dict)
        self.stats = {"registered": 0, "updated": 0, "expired": 0, "deregistered": 0}

    # ------------------------------------------------------------------
    # lifecycle

    def register(self, endpoint: str, lifetime: float, address: Address,
                 links: list[tuple[int, int]]) -> Registration:
        with self._lock:
            stale = self._by_endpoint.get(endpoint)
            if stale is not None:
                self._remove(stale, kind="DEREGISTERED", reason="replaced")
            reg = Registration(
                registration_id=f"r{self._next_id}",
                endpoint=endpoint,
                lifetime=float(lifetime),
                address=address,
                links=list(links),
                registered_at=self._scheduler.now(),
                last_update=self._scheduler.now(),
            )
            self._next_id += 1
            self._by_id[reg.registration_id] = reg
            self._by_endpoint[endpoint] = reg
            self._arm_expiry(reg)
            self.stats["registered"] += 1
        self._emit({
            "kind": "REGISTERED",
            "endpoint": reg.endpoint,
            "registration_id": reg.registration_id,
            "lifetime": reg.lifetime,
            "links": [f"/{obj}/{inst}" for obj, inst in reg.links],
            "time": reg.registered_at,
        })
        return reg

    def update(self, registration_id: str, lifetime: float | None = None,
               address: Address | None = None) -> Registration:
        with self._lock:
            reg = self._by_id.get(registration_id)
            if reg is None:
                raise NotRegistered(registration_id)
            reg.last_update = self._scheduler.now()
            if lifetime is not None:
                reg.lifetime = float(lifetime)
            if address is not None:
                reg.address = address
            self._arm_expiry(reg)
            self.stats["updated"] += 1
        self._emit({
            "kind": "UPDATED",
            "endpoint": reg.endpoint,
            "registration_id": reg.registration_id,
            "time": reg.last_update,
        })
        return reg

    def deregister(self, registration_id: str, reason: str = "client") -> Registration:
        with self._lock:
            reg = self._by_id.get(registration_id)
            if reg is None:
                raise NotRegistered(registration_id)
            self._remove(reg, kind="DEREGISTERED", reason=reason)
        return reg

    def expire_registrations(self, now: float) -> list[str]:
        """Remove every registration whose lease has run out at `now`.
        Returns the expired endpoint names."""
        with self._lock:
            stale = [r for r in self._by_id.values() if now >= r.expires_at()]
            for reg in stale:
                self._remove(reg, kind="DEREGISTERED", reason="expired")
        return [r.endpoint for r in stale]

    # ------------------------------------------------------------------
    # queries

    def lookup(self, endpoint: str) -> Registration:
        with self._lock:
            reg = self._by_endpoint.get(endpoint)
        if reg is None:
            raise NotRegistered(endpoint)
        return reg

    def get(self, registration_id: str) -> Registration | None:
        with self._lock:
            return self._by_id.get(registration_id)

    def list_registrations(self) -> list[Registration]:
        with self._lock:
            return sorted(self._by_id.values(), key=lambda r: r.endpoint)

    def count(self) -> int:
        with self._lock:
            return len(self._by_id)

    # ------------------------------------------------------------------
    # internals

    def _arm_expiry(self, reg: Registration) -> None:
        if reg.expiry_timer is not None:
            reg.expiry_timer.cancel()
        reg.expiry_timer = self._scheduler.call_at(reg.expires_at(), self._on_expiry_timer,
                                                   reg.registration_id)

    def _on_expiry_timer(self, registration_id: str) -> None:
        with self._lock:
            reg = self._by_id.get(registration_id)
            if reg is None:
                return
            now = self._scheduler.now()
            if now < reg.expires_at():
                # refreshed since the timer was armed
                self._arm_expiry(reg)
                return
        self.expire_registrations(now)

    def _remove(self, reg: Registration, kind: str, reason: str) -> None:
        if reg.expiry_timer is not None:
            reg.expiry_timer.cancel()
            reg.expiry_timer = None
        self._by_id.pop(reg.registration_id, None)
        if self._by_endpoint.get(reg.endpoint) is reg:
            self._by_endpoint.pop(reg.endpoint, None)
        self.stats["expired" if reason == "expired" else "deregistered"] += 1
        self._emit({
            "kind": kind,
            "endpoint": reg.endpoint,
            "registration_id": reg.registration_id,
            "reason": reason,
            "time": self._scheduler.now(),
        })

    def _emit(self, event: dict) -> None:
        cb = self.on_event
        if cb is None:
            return
        try:
            cb(event)
        except Exception:
            log.exception("registry event callback failed")
