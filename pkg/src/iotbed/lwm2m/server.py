"""Server-side device management: registration interface, observe,
write/execute, read, and device time sync.

Sits on a CoapEndpoint (usually over the secure channel). Request paths:

    POST   /rd?ep=<name>&lt=<seconds>   register, link-format payload
    POST   /rd/<registration_id>        update (refresh lease)
    DELETE /rd/<registration_id>        deregister
    GET    /fw/...                      firmware image chunks (hook)

Outbound operations are asynchronous: they return the underlying
exchange handle, and protocol-level failures are mapped onto model
errors (4.00 → NotWritable/BadLinkFormat, 4.04 → PathNotFound).
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

from ..clock import Scheduler
from ..transport import Address
from .. import coap
from ..coap import CoapEndpoint, CoapMessage, Code, MessageType, OptionNumber, PendingRequest
from . import model
from .model import BadLinkFormat, PathNotFound, NotWritable, UnknownObject
from .registry import RegistrationRegistry, NotRegistered, DEFAULT_LIFETIME

log = logging.getLogger(__name__)

# resync the device clock when it drifts past this many seconds
TIME_SYNC_TOLERANCE = 2.0


@dataclass
class Observation:
    endpoint: str
    path: str
    notify_period: float
    token: bytes
    address: Address
    state: str = "pending"    # pending | active | cancelled | failed
    error: Exception | None = None
    notifications: int = 0
    last_seq: int | None = field(default=None, repr=False)

    @property
    def active(self) -> bool:
        return self.state == "active"


def _error_for(response: CoapMessage) -> Exception:
    detail = response.payload.decode("utf-8", "replace") if response.payload else ""
    if response.code == Code.NOT_FOUND:
        return PathNotFound(detail or "not found")
    if response.code == Code.BAD_REQUEST:
        if "writable" in detail:
            return NotWritable(detail)
        if "executable" in detail:
            return model.NotExecutable(detail)
        return BadLinkFormat(detail or "bad request")
    if response.code == Code.UNAUTHORIZED:
        return PermissionError(detail or "unauthorized")
    return coap.CoapError(f"unexpected response {response.code.dotted}: {detail}")


class Lwm2mServer:
    """Device-management front end used by the collector and the gateway."""

    def __init__(self, scheduler: Scheduler, endpoint: CoapEndpoint,
                 registry: RegistrationRegistry) -> None:
        self.scheduler = scheduler
        self.endpoint = endpoint
        self.registry = registry
        endpoint.request_handler = self._handle_request
        # fn(endpoint_name, path, records, observe_seq) for parsed-enough routing;
        # records stay raw bytes so the consumer owns parse failures
        self.notification_handler = None
        self.firmware_handler = None    # fn(path_segments, queries) -> (Code, bytes)
        self.observe_failed = None      # fn(observation), for retry policies
        self._observations: dict[tuple[str, str], Observation] = {}
        self.stats = {
            "notifications": 0,
            "notify_unmatched": 0,
            "observe_failures": 0,
        }

    # ------------------------------------------------------------------
    # inbound requests from clients

    def _handle_request(self, message: CoapMessage, source: Address) -> CoapMessage | None:
        path = message.uri_path_segments()
        if path and path[0] == "rd":
            return self._handle_rd(message, source, path)
        if path and path[0] == "fw":
            return self._handle_fw(message, source, path)
        return self._response(message, Code.NOT_FOUND)

    def _handle_rd(self, message: CoapMessage, source: Address,
                   path: list[str]) -> CoapMessage:
        if len(path) == 1 and message.code == Code.POST:
            return self._handle_register(message, source)
        if len(path) == 2:
            reg_id = path[1]
            if message.code == Code.POST:
                try:
                    self.registry.update(reg_id, address=source)
                except NotRegistered:
                    return self._response(message, Code.NOT_FOUND)
                return self._response(message, Code.CHANGED)
            if message.code == Code.DELETE:
                try:
                    self.registry.deregister(reg_id, reason="client")
                except NotRegistered:
                    return self._response(message, Code.NOT_FOUND)
                return self._response(message, Code.DELETED)
        return self._response(message, Code.BAD_REQUEST, b"bad rd request")

    def _handle_register(self, message: CoapMessage, source: Address) -> CoapMessage:
        queries = message.uri_queries()
        ep_name = queries.get("ep", "")
        if not ep_name:
            return self._response(message, Code.BAD_REQUEST, b"missing ep")
        try:
            lifetime = float(queries.get("lt", DEFAULT_LIFETIME))
        except ValueError:
            return self._response(message, Code.BAD_REQUEST, b"bad lt")
        try:
            links = model.parse_links(message.payload.decode("utf-8"))
        except (BadLinkFormat, UnicodeDecodeError) as exc:
            return self._response(message, Code.BAD_REQUEST,
                                  f"bad links: {exc}".encode())
        for obj, _inst in links:
            if not model.is_known_object(obj):
                return self._response(message, Code.BAD_REQUEST,
                                      f"unknown object {obj}".encode())
        reg = self.registry.register(ep_name, lifetime, source, links)
        body = json.dumps({"registration_id": reg.registration_id}).encode()
        return self._response(message, Code.CREATED, body)

    def _handle_fw(self, message: CoapMessage, source: Address,
                   path: list[str]) -> CoapMessage:
        handler = self.firmware_handler
        if handler is None or message.code != Code.GET:
            return self._response(message, Code.NOT_FOUND)
        try:
            code, payload = handler(path[1:], message.uri_queries())
        except Exception:
            log.exception("firmware handler failed")
            return self._response(message, Code.BAD_REQUEST)
        return self._response(message, code, payload)

    @staticmethod
    def _response(request: CoapMessage, code: Code, payload: bytes = b"") -> CoapMessage:
        return CoapMessage(mtype=MessageType.NON, code=code, message_id=0,
                           token=request.token, payload=payload)

    # ------------------------------------------------------------------
    # outbound operations

    def observe(self, endpoint: str, path: str, notify_period: float) -> Observation:
        """Start periodic value notifications for a resource path.
        Replaces any previous observation on the same (endpoint, path)."""
        reg = self.registry.lookup(endpoint)
        old = self._observations.get((endpoint, path))
        if old is not None and old.state in ("pending", "active"):
            self.cancel_observation(endpoint, path)
        token = self.endpoint.new_token()
        obs = Observation(endpoint=endpoint, path=path, notify_period=notify_period,
                          token=token, address=reg.address)
        self._observations[(endpoint, path)] = obs
        self.endpoint.add_observe_listener(token, lambda msg, src: self._on_notify(obs, msg))
        request = CoapMessage(
            mtype=MessageType.CON, code=Code.GET, message_id=0, token=token,
            options=sorted(
                [(OptionNumber.OBSERVE, b"")]
                + coap.path_options(path)
                + coap.query_options({"period": format(notify_period, "g")}),
                key=lambda o: o[0]),
        )
        self.endpoint.send_request(reg.address, request,
                                   on_response=lambda p: self._on_observe_reply(obs, p))
        return obs

    def _on_observe_reply(self, obs: Observation, pending: PendingRequest) -> None:
        if obs.state == "cancelled":
            return
        if pending.error is not None:
            obs.state = "failed"
            obs.error = pending.error
        elif pending.response is not None and pending.response.code == Code.CONTENT:
            obs.state = "active"
        else:
            obs.state = "failed"
            obs.error = _error_for(pending.response) if pending.response else coap.Timeout()
        if obs.state == "failed":
            self.stats["observe_failures"] += 1
            self.endpoint.remove_observe_listener(obs.token)
            if self._observations.get((obs.endpoint, obs.path)) is obs:
                del self._observations[(obs.endpoint, obs.path)]
            log.warning("observe %s %s failed: %s", obs.endpoint, obs.path, obs.error)
            if self.observe_failed is not None:
                self.observe_failed(obs)

    def _on_notify(self, obs: Observation, message: CoapMessage) -> None:
        if obs.state not in ("pending", "active"):
            self.stats["notify_unmatched"] += 1
            return
        obs.notifications += 1
        obs.last_seq = message.observe()
        self.stats["notifications"] += 1
        handler = self.notification_handler
        if handler is not None:
            handler(obs.endpoint, obs.path, message.payload, obs.last_seq)

    def cancel_observation(self, endpoint: str, path: str) -> None:
        obs = self._observations.pop((endpoint, path), None)
        if obs is None:
            return
        was_active = obs.state in ("pending", "active")
        obs.state = "cancelled"
        self.endpoint.remove_observe_listener(obs.token)
        if not was_active:
            return
        request = CoapMessage(
            mtype=MessageType.CON, code=Code.GET, message_id=0, token=obs.token,
            options=sorted([(OptionNumber.OBSERVE, b"\x01")] + coap.path_options(path),
                           key=lambda o: o[0]),
        )
        try:
            self.endpoint.send_request(obs.address, request)
        except coap.CoapError:
            log.warning("observe cancel for %s %s not delivered", endpoint, path)

    def observation(self, endpoint: str, path: str) -> Observation | None:
        return self._observations.get((endpoint, path))

    def observations_for(self, endpoint: str) -> list[Observation]:
        return [o for (ep, _), o in self._observations.items() if ep == endpoint]

    def drop_observations(self, endpoint: str) -> None:
        """Forget observations without sending cancels (peer gone)."""
        for (ep, path) in [k for k in self._observations if k[0] == endpoint]:
            obs = self._observations.pop((ep, path))
            obs.state = "cancelled"
            self.endpoint.remove_observe_listener(obs.token)

    def write(self, endpoint: str, path: str, value, on_done=None) -> PendingRequest:
        """PUT a JSON-encoded value to a writable resource."""
        reg = self.registry.lookup(endpoint)
        request = CoapMessage(
            mtype=MessageType.CON, code=Code.PUT, message_id=0,
            options=sorted(coap.path_options(path)
                           + [(OptionNumber.CONTENT_FORMAT, bytes([coap.CONTENT_FORMAT_JSON]))],
                           key=lambda o: o[0]),
            payload=json.dumps(value).encode(),
        )
        return self.endpoint.send_request(
            reg.address, request, on_response=self._wrap_done(on_done, Code.CHANGED))

    def execute(self, endpoint: str, path: str, on_done=None) -> PendingRequest:
        """POST to an executable resource."""
        reg = self.registry.lookup(endpoint)
        request = CoapMessage(
            mtype=MessageType.CON, code=Code.POST, message_id=0,
            options=coap.path_options(path),
        )
        return self.endpoint.send_request(
            reg.address, request, on_response=self._wrap_done(on_done, Code.CHANGED))

    def read(self, endpoint: str, path: str, on_done=None) -> PendingRequest:
        """GET the current value records for a resource path."""
        reg = self.registry.lookup(endpoint)
        request = CoapMessage(
            mtype=MessageType.CON, code=Code.GET, message_id=0,
            options=coap.path_options(path),
        )
        return self.endpoint.send_request(
            reg.address, request, on_response=self._wrap_done(on_done, Code.CONTENT))

    @staticmethod
    def _wrap_done(on_done, expect: Code):
        """Translate the raw exchange outcome to (error, response) for on_done."""
        if on_done is None:
            return None

        def _cb(pending: PendingRequest) -> None:
            if pending.error is not None:
                on_done(pending.error, None)
            elif pending.response is not None and pending.response.code == expect:
                on_done(None, pending.response)
            else:
                err = (_error_for(pending.response) if pending.response
                       else coap.Timeout("no response"))
                on_done(err, pending.response)

        return _cb

    def sync_time(self, endpoint: str, on_done=None) -> PendingRequest:
        """Read the device clock and push the server clock if it drifts."""
        def _after_read(err, response) -> None:
            now = self.scheduler.now()
            if err is None and response is not None:
                try:
                    records = json.loads(response.payload.decode())
                    device_time = float(records[0]["v"])
                except (ValueError, KeyError, IndexError, TypeError):
                    device_time = None
                if device_time is not None and abs(device_time - now) <= TIME_SYNC_TOLERANCE:
                    if on_done is not None:
                        on_done(None, response)
                    return
            self.write(endpoint, f"/{model.OBJ_DEVICE}/0/{model.RES_DEV_CURRENT_TIME}",
                       now, on_done=on_done)

        return self.read(endpoint, f"/{model.OBJ_DEVICE}/0/{model.RES_DEV_CURRENT_TIME}",
                         on_done=_after_read)
