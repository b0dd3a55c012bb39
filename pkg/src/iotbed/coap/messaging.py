"""Reliable CoAP request/response messaging over a datagram socket.

Responsibilities on top of the codec:

* confirmable retransmission with deterministic backoff (2 s initial,
  factor 1.5, 4 retransmissions, then one final wait before Timeout),
* response matching by token, ACK matching by message id,
* at-most-once delivery of inbound requests per (source, message id)
  within the exchange lifetime, with cached ACK replay,
* routing of notification responses to registered observe listeners.

All timers run on the injected scheduler, so behaviour is identical on the
virtual and wall clocks.
"""

from __future__ import annotations

import logging
import random
import threading
from collections import deque

from ..clock import Scheduler
from ..transport import Address, TransportError
from . import codec
from .codec import CoapMessage, Code, MessageType

logger = logging.getLogger(__name__)

ACK_TIMEOUT = 2.0
ACK_BACKOFF = 1.5
MAX_RETRANSMIT = 4
NON_RESPONSE_WINDOW = 2.0
SEPARATE_RESPONSE_TIMEOUT = 30.0
EXCHANGE_LIFETIME = 247.0


class Timeout(codec.CoapError):
    """Retransmissions exhausted without a response."""


class PendingRequest:
    """In-flight exchange handle. Completed from the scheduler context;
    ``wait`` lets a foreign thread block for the outcome."""

    def __init__(self, endpoint: "CoapEndpoint", dest: Address, message: CoapMessage):
        self.endpoint = endpoint
        self.dest = dest
        self.message = message
        self.response: CoapMessage | None = None
        self.error: Exception | None = None
        self.done = False
        self.acknowledged = False
        self._event = threading.Event()
        self._callbacks: list = []
        self._retransmit_timer = None
        self.transmissions = 0

    def add_done_callback(self, fn) -> None:
        if self.done:
            fn(self)
        else:
            self._callbacks.append(fn)

    def result(self) -> CoapMessage | None:
        if not self.done:
            raise RuntimeError("exchange still in flight")
        if self.error is not None:
            raise self.error
        return self.response

    def wait(self, timeout: float | None = None) -> CoapMessage | None:
        if not self._event.wait(timeout):
            raise Timeout(f"no response from {self.dest} within wait timeout")
        return self.result()

    def _complete(self, response: CoapMessage | None = None, error: Exception | None = None) -> None:
        if self.done:
            return
        self.done = True
        self.response = response
        self.error = error
        if self._retransmit_timer is not None:
            self._retransmit_timer.cancel()
        self._event.set()
        callbacks, self._callbacks = self._callbacks, []
        for fn in callbacks:
            try:
                fn(self)
            except Exception:
                logger.exception("request callback failed")


class _DedupEntry:
    __slots__ = ("expiry", "cached")

    def __init__(self, expiry: float, cached: bytes | None):
        self.expiry = expiry
        self.cached = cached


class CoapEndpoint:
    """One CoAP speaker bound to a datagram socket (plain or secure)."""

    def __init__(self, scheduler: Scheduler, sock, rng: random.Random | None = None):
        self.scheduler = scheduler
        self.sock = sock
        self.rng = rng or random.Random()
        self.request_handler = None       # fn(msg, source) -> CoapMessage | None
        self.reset_handler = None         # fn(message_id, source), used by notifiers
        self._mid_counters: dict[Address, int] = {}
        self._pending_by_token: dict[tuple[Address, bytes], PendingRequest] = {}
        self._pending_by_mid: dict[tuple[Address, int], PendingRequest] = {}
        self._observe_listeners: dict[bytes, object] = {}
        self._dedup: dict[tuple[Address, int], _DedupEntry] = {}
        self._dedup_order: deque = deque()
        self.stats = {"sent": 0, "received": 0, "retransmits": 0, "duplicates": 0, "malformed": 0}
        sock.on_datagram(self._on_datagram)

    # ------------------------------------------------------------------
    # sending

    def next_message_id(self, dest: Address) -> int:
        current = self._mid_counters.get(dest)
        if current is None:
            current = self.rng.randrange(0x10000)
        nxt = (current + 1) & 0xFFFF
        self._mid_counters[dest] = nxt
        return nxt

    def new_token(self) -> bytes:
        return self.rng.getrandbits(32).to_bytes(4, "big")

    def send_raw(self, dest: Address, message: CoapMessage) -> None:
        data = codec.encode(message)
        self.stats["sent"] += 1
        self.sock.sendto(data, dest)

    def send_request(self, dest: Address, message: CoapMessage, on_response=None) -> PendingRequest:
        """Transmit a CON or NON request and return its exchange handle."""
        if message.mtype not in (MessageType.CON, MessageType.NON):
            raise codec.InvalidMessage("requests must be CON or NON")
        if message.message_id == 0:
            message.message_id = self.next_message_id(dest)
        if not message.token:
            message.token = self.new_token()
        pending = PendingRequest(self, dest, message)
        if on_response is not None:
            pending.add_done_callback(on_response)
        self._pending_by_token[(dest, message.token)] = pending
        self._pending_by_mid[(dest, message.message_id)] = pending
        try:
            self.send_raw(dest, message)
        except TransportError as exc:
            self._finish(pending, error=exc)
            return pending
        pending.transmissions = 1
        if message.mtype == MessageType.CON:
            pending._retransmit_timer = self.scheduler.call_later(
                ACK_TIMEOUT, self._retransmit, pending, ACK_TIMEOUT)
        else:
            pending._retransmit_timer = self.scheduler.call_later(
                NON_RESPONSE_WINDOW, self._finish, pending)
        return pending

    def _retransmit(self, pending: PendingRequest, timeout: float) -> None:
        if pending.done:
            return
        if pending.transmissions > MAX_RETRANSMIT:
            # all transmissions plus the final span are spent
            self._finish(pending, error=Timeout(f"no response from {pending.dest}"))
            return
        try:
            self.send_raw(pending.dest, pending.message)
        except TransportError as exc:
            self._finish(pending, error=exc)
            return
        pending.transmissions += 1
        self.stats["retransmits"] += 1
        next_timeout = timeout * ACK_BACKOFF
        pending._retransmit_timer = self.scheduler.call_later(
            next_timeout, self._retransmit, pending, next_timeout)

    def _finish(self, pending: PendingRequest, response: CoapMessage | None = None,
                error: Exception | None = None) -> None:
        self._pending_by_token.pop((pending.dest, pending.message.token), None)
        self._pending_by_mid.pop((pending.dest, pending.message.message_id), None)
        pending._complete(response, error)

    # ------------------------------------------------------------------
    # observe listener registry (the observer side of notifications)

    def add_observe_listener(self, token: bytes, callback) -> None:
        self._observe_listeners[token] = callback

    def remove_observe_listener(self, token: bytes) -> None:
        self._observe_listeners.pop(token, None)

    # ------------------------------------------------------------------
    # receiving

    def _on_datagram(self, data: bytes, source: Address) -> None:
        try:
            message = codec.decode(data)
        except codec.MalformedPdu:
            self.stats["malformed"] += 1
            return
        self.stats["received"] += 1
        if message.code == Code.EMPTY:
            self._handle_empty(message, source)
        elif message.code.is_request():
            self._handle_request(message, source)
        else:
            self._handle_response(message, source)

    def _handle_empty(self, message: CoapMessage, source: Address) -> None:
        pending = self._pending_by_mid.get((source, message.message_id))
        if message.mtype == MessageType.ACK:
            if pending is not None and not pending.acknowledged:
                # separate-response pattern: stop retransmitting, allow a
                # bounded window for the actual response to arrive
                pending.acknowledged = True
                if pending._retransmit_timer is not None:
                    pending._retransmit_timer.cancel()
                pending._retransmit_timer = self.scheduler.call_later(
                    SEPARATE_RESPONSE_TIMEOUT, self._finish, pending,
                    None, Timeout("separate response never arrived"))
        elif message.mtype == MessageType.RST:
            if pending is not None:
                self._finish(pending, error=Timeout("peer reset the exchange"))
            elif self.reset_handler is not None:
                self.reset_handler(message.message_id, source)

    def _handle_request(self, message: CoapMessage, source: Address) -> None:
        now = self.scheduler.now()
        self._purge_dedup(now)
        key = (source, message.message_id)
        if message.mtype == MessageType.CON:
            entry = self._dedup.get(key)
            if entry is not None:
                self.stats["duplicates"] += 1
                if entry.cached is not None:
                    self.sock.sendto(entry.cached, source)
                return
        response = None
        if self.request_handler is not None:
            try:
                response = self.request_handler(message, source)
            except Exception:
                logger.exception("request handler failed for %s", message.uri_path())
                response = CoapMessage(mtype=MessageType.NON, code=Code.BAD_REQUEST,
                                       message_id=0, token=message.token)
        cached = None
        if message.mtype == MessageType.CON:
            if response is not None:
                response.mtype = MessageType.ACK
                response.message_id = message.message_id
                response.token = message.token
            else:
                response = CoapMessage(mtype=MessageType.ACK, code=Code.EMPTY,
                                       message_id=message.message_id)
            cached = codec.encode(response)
            self.stats["sent"] += 1
            self.sock.sendto(cached, source)
            self._dedup[key] = _DedupEntry(now + EXCHANGE_LIFETIME, cached)
            self._dedup_order.append((now + EXCHANGE_LIFETIME, key))
        elif response is not None and response.code != Code.EMPTY:
            response.mtype = MessageType.NON
            response.message_id = self.next_message_id(source)
            response.token = message.token
            self.send_raw(source, response)

    def _handle_response(self, message: CoapMessage, source: Address) -> None:
        pending = self._pending_by_token.get((source, message.token))
        if pending is not None:
            if message.mtype == MessageType.CON:
                self._send_empty(source, MessageType.ACK, message.message_id)
            self._finish(pending, response=message)
            return
        listener = self._observe_listeners.get(message.token)
        if listener is not None:
            if message.mtype == MessageType.CON:
                self._send_empty(source, MessageType.ACK, message.message_id)
            listener(message, source)
            return
        # unexpected response: reject so a stale notifier stops
        if message.mtype in (MessageType.CON, MessageType.NON):
            self._send_empty(source, MessageType.RST, message.message_id)

    def _send_empty(self, dest: Address, mtype: MessageType, message_id: int) -> None:
        try:
            self.send_raw(dest, CoapMessage(mtype=mtype, code=Code.EMPTY, message_id=message_id))
        except TransportError:
            pass

    def _purge_dedup(self, now: float) -> None:
        while self._dedup_order and self._dedup_order[0][0] <= now:
            _, key = self._dedup_order.popleft()
            entry = self._dedup.get(key)
            if entry is not None and entry.expiry <= now:
                del self._dedup[key]

    def close(self) -> None:
        for pending in list(self._pending_by_token.values()):
            self._finish(pending, error=TransportError("endpoint closed"))
        self.sock.close()
