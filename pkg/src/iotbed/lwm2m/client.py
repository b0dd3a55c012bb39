"""Device-side client: registration upkeep, observe handling with
periodic notifiers, and read/write/execute dispatch into the object
model.

One client is one simulated device. Each boot builds a fresh transport
channel (so a reboot re-runs the secure handshake), registers, then
renews the registration at half the lifetime. The state machine is
single-threaded on the shared scheduler.
"""

from __future__ import annotations

import json
import logging
import random
from dataclasses import dataclass

from ..clock import Scheduler, Timer
from ..transport import Address, TransportError
from .. import coap
from ..coap import CoapEndpoint, CoapMessage, Code, MessageType, OptionNumber
from . import model as model_mod
from .model import (ObjectModel, NotWritable, NotExecutable, PathNotFound,
                    OBJ_DEVICE, RES_DEV_SERIAL, RES_DEV_FIRMWARE_VERSION,
                    RES_DEV_REBOOT, RES_DEV_FACTORY_RESET, RES_DEV_CURRENT_TIME)

log = logging.getLogger(__name__)

DEFAULT_BOOT_DELAY = 2.0
REGISTER_RETRY_DELAY = 5.0
UPDATE_FRACTION = 0.5    # renew the lease at this fraction of the lifetime


def _uint_bytes(value: int) -> bytes:
    if value == 0:
        return b""
    return value.to_bytes((value.bit_length() + 7) // 8, "big")


@dataclass
class _Notifier:
    token: bytes
    path: tuple[int, ...]
    period: float
    started_at: float
    ticks: int = 0
    seq: int = 0
    timer: Timer | None = None


class Lwm2mClient:
    """LWM2M client speaking to one server over a private channel."""

    def __init__(self, scheduler: Scheduler, endpoint_name: str, model: ObjectModel,
                 channel_factory, lifetime: float = 300.0,
                 rng: random.Random | None = None,
                 boot_delay: float = DEFAULT_BOOT_DELAY) -> None:
        self.scheduler = scheduler
        self.endpoint_name = endpoint_name
        self.model = model
        self.channel_factory = channel_factory
        self.lifetime = float(lifetime)
        self.rng = rng or random.Random()
        self.boot_delay = boot_delay
        self.state = "stopped"    # stopped|connecting|registering|registered|rebooting
        self.registration_id: str | None = None
        self.clock_offset = 0.0
        self.channel = None
        self.endpoint: CoapEndpoint | None = None
        self.on_registered: list = []    # fns(registration_id)
        self.on_stopped: list = []       # fns()
        self.default_notify_period: float | None = None
        self._notifiers: dict[bytes, _Notifier] = {}
        self._update_timer: Timer | None = None
        self._retry_timer: Timer | None = None
        self._boot_timer: Timer | None = None
        self.stats = {"registrations": 0, "updates": 0, "notifications": 0,
                      "reboots": 0}
        # per-path notification counters, cumulative across reboots
        self.sent_counts: dict[tuple[int, ...], int] = {}

    # ------------------------------------------------------------------
    # time

    def device_time(self) -> float:
        return self.scheduler.now() + self.clock_offset

    def set_device_time(self, value: float) -> None:
        self.clock_offset = float(value) - self.scheduler.now()

    # ------------------------------------------------------------------
    # lifecycle

    def start(self) -> None:
        if self.state not in ("stopped", "rebooting"):
            return
        self.state = "connecting"
        self.channel = self.channel_factory()
        connect = getattr(self.channel, "connect", None)
        if connect is not None:
            connect(self._on_connected)
        else:
            self._on_connected(None)

    def _on_connected(self, error: Exception | None) -> None:
        if self.state != "connecting":
            return
        if error is not None:
            log.warning("%s: connect failed (%s), retrying", self.endpoint_name, error)
            self._teardown_channel()
            self.state = "stopped"
            self._retry_timer = self.scheduler.call_later(REGISTER_RETRY_DELAY, self.start)
            return
        self.endpoint = CoapEndpoint(self.scheduler, self.channel, rng=self.rng)
        self.endpoint.request_handler = self._handle_request
        self._register()

    def _server_addr(self) -> Address:
        return self.channel.server

    def _register(self) -> None:
        self.state = "registering"
        request = CoapMessage(
            mtype=MessageType.CON, code=Code.POST, message_id=0,
            options=sorted(
                coap.path_options("/rd")
                + coap.query_options({"ep": self.endpoint_name,
                                      "lt": format(self.lifetime, "g")}),
                key=lambda o: o[0]),
            payload=model_mod.format_links(self.model.links()).encode(),
        )
        self.endpoint.send_request(self._server_addr(), request,
                                   on_response=self._on_register_reply)

    def _on_register_reply(self, pending) -> None:
        if self.state != "registering":
            return
        response = pending.response
        if pending.error is not None or response is None or response.code != Code.CREATED:
            log.warning("%s: registration failed (%s), retrying", self.endpoint_name,
                        pending.error or (response and response.code.dotted))
            self._retry_timer = self.scheduler.call_later(REGISTER_RETRY_DELAY,
                                                          self._register)
            return
        try:
            self.registration_id = json.loads(response.payload.decode())["registration_id"]
        except (ValueError, KeyError):
            self.registration_id = None
        self.state = "registered"
        self.stats["registrations"] += 1
        self._schedule_update()
        for callback in list(self.on_registered):
            callback(self.registration_id)

    def _schedule_update(self) -> None:
        if self._update_timer is not None:
            self._update_timer.cancel()
        self._update_timer = self.scheduler.call_later(
            self.lifetime * UPDATE_FRACTION, self._send_update)

    def _send_update(self) -> None:
        if self.state != "registered" or self.registration_id is None:
            return
        request = CoapMessage(
            mtype=MessageType.CON, code=Code.POST, message_id=0,
            options=coap.path_options(f"/rd/{self.registration_id}"),
        )
        self.endpoint.send_request(self._server_addr(), request,
                                   on_response=self._on_update_reply)

    def _on_update_reply(self, pending) -> None:
        if self.state != "registered":
            return
        response = pending.response
        if pending.error is None and response is not None and response.code == Code.CHANGED:
            self.stats["updates"] += 1
            self._schedule_update()
            return
        # lease lost server-side (expiry, restart): register from scratch
        log.info("%s: registration update rejected, re-registering", self.endpoint_name)
        self._register()

    def stop(self) -> None:
        """Hard stop, as in a crash: no deregistration, nothing flushed."""
        self._cancel_timers()
        self._stop_notifiers()
        self._teardown_channel()
        self.state = "stopped"
        self.registration_id = None
        for callback in list(self.on_stopped):
            callback()

    def shutdown(self) -> None:
        """Graceful stop: deregister first, then close."""
        if self.state == "registered" and self.registration_id is not None:
            request = CoapMessage(
                mtype=MessageType.NON, code=Code.DELETE, message_id=0,
                options=coap.path_options(f"/rd/{self.registration_id}"),
            )
            try:
                self.endpoint.send_request(self._server_addr(), request)
            except (coap.CoapError, TransportError):
                pass
        self.stop()

    def reboot(self) -> None:
        """Deregister, drop the session, and come back after the boot delay."""
        if self.state == "rebooting":
            return
        self.stats["reboots"] += 1
        self.shutdown()
        self.state = "rebooting"
        self._boot_timer = self.scheduler.call_later(self.boot_delay, self.start)

    def factory_reset(self) -> None:
        self.clock_offset = 0.0
        self.reboot()

    def _cancel_timers(self) -> None:
        for timer in (self._update_timer, self._retry_timer, self._boot_timer):
            if timer is not None:
                timer.cancel()
        self._update_timer = self._retry_timer = self._boot_timer = None

    def _teardown_channel(self) -> None:
        if self.endpoint is not None:
            self.endpoint.close()
            self.endpoint = None
            self.channel = None
        elif self.channel is not None:
            self.channel.close()
            self.channel = None

    # ------------------------------------------------------------------
    # serving the management server

    def _handle_request(self, message: CoapMessage, source: Address) -> CoapMessage:
        try:
            ids = model_mod.parse_path(message.uri_path())
        except PathNotFound:
            return self._plain(message, Code.NOT_FOUND)
        if len(ids) != 3 or not self.model.has_path("/%d/%d/%d" % ids):
            return self._plain(message, Code.NOT_FOUND)
        if message.code == Code.GET:
            return self._handle_get(message, ids)
        if message.code == Code.PUT:
            return self._handle_put(message, ids)
        if message.code == Code.POST:
            return self._handle_post(message, ids)
        return self._plain(message, Code.BAD_REQUEST)

    def _handle_get(self, message: CoapMessage, ids: tuple[int, ...]) -> CoapMessage:
        observe = message.observe()
        if observe == 0:
            queries = message.uri_queries()
            try:
                period = float(queries.get("period", "0"))
            except ValueError:
                period = 0.0
            if period <= 0:
                period = self.default_notify_period or 0.0
            if period <= 0:
                return self._plain(message, Code.BAD_REQUEST, b"bad period")
            self._start_notifier(message.token, ids, period)
        elif observe == 1:
            self._stop_notifier(message.token)
        return CoapMessage(
            mtype=MessageType.NON, code=Code.CONTENT, message_id=0, token=message.token,
            options=([(OptionNumber.OBSERVE, b"")] if observe == 0 else []),
            payload=self._records_payload(ids),
        )

    def _handle_put(self, message: CoapMessage, ids: tuple[int, ...]) -> CoapMessage:
        try:
            value = json.loads(message.payload.decode("utf-8"))
        except (ValueError, UnicodeDecodeError):
            return self._plain(message, Code.BAD_REQUEST, b"bad value payload")
        try:
            self.model.write(*ids, value)
        except NotWritable:
            return self._plain(message, Code.BAD_REQUEST, b"resource not writable")
        except PathNotFound:
            return self._plain(message, Code.NOT_FOUND)
        return self._plain(message, Code.CHANGED)

    def _handle_post(self, message: CoapMessage, ids: tuple[int, ...]) -> CoapMessage:
        try:
            self.model.execute(*ids)
        except NotExecutable:
            return self._plain(message, Code.BAD_REQUEST, b"resource not executable")
        except PathNotFound:
            return self._plain(message, Code.NOT_FOUND)
        return self._plain(message, Code.CHANGED)

    @staticmethod
    def _plain(request: CoapMessage, code: Code, payload: bytes = b"") -> CoapMessage:
        return CoapMessage(mtype=MessageType.NON, code=code, message_id=0,
                           token=request.token, payload=payload)

    # ------------------------------------------------------------------
    # notifications

    def _records_payload(self, ids: tuple[int, ...]) -> bytes:
        return json.dumps(self._records(ids), separators=(",", ":")).encode()

    def _records(self, ids: tuple[int, ...]) -> list[dict]:
        if ids == (OBJ_DEVICE, 0, RES_DEV_CURRENT_TIME):
            value = self.device_time()
        else:
            try:
                value = self.model.read(*ids)
            except PathNotFound:
                return []
        if value is None:
            return []
        return [{"n": "/%d/%d/%d" % ids, "v": value, "t": self.device_time()}]

    def _start_notifier(self, token: bytes, ids: tuple[int, ...], period: float) -> None:
        self._stop_notifier(token)
        notifier = _Notifier(token=token, path=ids, period=period,
                             started_at=self.scheduler.now())
        self._notifiers[token] = notifier
        self._arm_notifier(notifier)

    def _arm_notifier(self, notifier: _Notifier) -> None:
        at = notifier.started_at + (notifier.ticks + 1) * notifier.period
        notifier.timer = self.scheduler.call_at(at, self._notify, notifier)

    def _stop_notifier(self, token: bytes) -> None:
        notifier = self._notifiers.pop(token, None)
        if notifier is not None and notifier.timer is not None:
            notifier.timer.cancel()

    def _stop_notifiers(self) -> None:
        for token in list(self._notifiers):
            self._stop_notifier(token)

    def _notify(self, notifier: _Notifier) -> None:
        if self._notifiers.get(notifier.token) is not notifier or self.endpoint is None:
            return
        notifier.ticks += 1
        records = self._records(notifier.path)
        if records:
            notifier.seq = (notifier.seq + 1) & 0xFFFFFF
            message = CoapMessage(
                mtype=MessageType.NON, code=Code.CONTENT,
                message_id=self.endpoint.next_message_id(self._server_addr()),
                token=notifier.token,
                options=[(OptionNumber.OBSERVE, _uint_bytes(notifier.seq))],
                payload=json.dumps(records, separators=(",", ":")).encode(),
            )
            try:
                self.endpoint.send_raw(self._server_addr(), message)
                self.stats["notifications"] += 1
                self.sent_counts[notifier.path] = self.sent_counts.get(notifier.path, 0) + 1
            except TransportError:
                log.debug("%s: notification dropped, channel gone", self.endpoint_name)
        self._arm_notifier(notifier)


def install_device_object(model: ObjectModel, client: Lwm2mClient,
                          serial: str, firmware_version: str) -> None:
    """Populate the standard device object and wire its actions to the client."""
    from .model import Resource
    model.add_instance(OBJ_DEVICE, 0, {
        RES_DEV_SERIAL: Resource(value=serial),
        RES_DEV_FIRMWARE_VERSION: Resource(value=firmware_version),
        RES_DEV_REBOOT: Resource(readable=False, executable=True,
                                 on_execute=lambda: client.scheduler.call_soon(client.reboot)),
        RES_DEV_FACTORY_RESET: Resource(readable=False, executable=True,
                                        on_execute=lambda: client.scheduler.call_soon(
                                            client.factory_reset)),
        RES_DEV_CURRENT_TIME: Resource(value=None, writable=True,
                                       on_write=client.set_device_time),
    })
