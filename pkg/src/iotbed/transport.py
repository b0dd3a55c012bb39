"""Datagram channels: an in-memory network for tests/virtual runs and a UDP
adapter for live deployments.

Both expose the same minimal socket shape: ``sendto(data, dest)`` plus an
``on_datagram(data, source)`` callback, with (host, port) tuples as
addresses. The in-memory network supports deterministic fault injection
(loss, duplication, delay) through a mutator hook and frame capture through
taps.
"""

from __future__ import annotations

import logging
import socket as _socket
import threading

from .clock import Scheduler

logger = logging.getLogger(__name__)

Address = tuple[str, int]


class TransportError(Exception):
    pass


class InMemorySocket:
    def __init__(self, network: "InMemoryNetwork", address: Address):
        self._network = network
        self.address = address
        self.receive_callback = None
        self.closed = False

    def sendto(self, data: bytes, dest: Address) -> None:
        if self.closed:
            raise TransportError("socket closed")
        self._network.deliver(self.address, dest, bytes(data))

    def on_datagram(self, callback) -> None:
        self.receive_callback = callback

    def close(self) -> None:
        if not self.closed:
            self.closed = True
            self._network.unbind(self.address)


class InMemoryNetwork:
    """Zero-latency by default: a frame sent at virtual time t is delivered
    by a callback scheduled at t (ordered after already-queued work)."""

    def __init__(self, scheduler: Scheduler, latency: float = 0.0):
        self.scheduler = scheduler
        self.latency = latency
        self._sockets: dict[Address, InMemorySocket] = {}
        self._taps: list = []
        self.mutator = None            # fn(data, src, dst) -> list[(delay, bytes)] | None
        self.dropped_unroutable = 0

    def bind(self, address: Address) -> InMemorySocket:
        if address in self._sockets:
            raise TransportError(f"address already bound: {address}")
        sock = InMemorySocket(self, address)
        self._sockets[address] = sock
        return sock

    def unbind(self, address: Address) -> None:
        self._sockets.pop(address, None)

    def add_tap(self, tap) -> None:
        """tap(src, dst, data) is called for every frame accepted for delivery."""
        self._taps.append(tap)

    def deliver(self, source: Address, dest: Address, data: bytes) -> None:
        frames = [(self.latency, data)]
        if self.mutator is not None:
            mutated = self.mutator(data, source, dest)
            if mutated is None:
                return
            frames = [(self.latency + extra, payload) for extra, payload in mutated]
        for delay, payload in frames:
            for tap in self._taps:
                tap(source, dest, payload)
            self.scheduler.call_later(delay, self._handoff, source, dest, payload)

    def _handoff(self, source: Address, dest: Address, data: bytes) -> None:
        sock = self._sockets.get(dest)
        if sock is None or sock.receive_callback is None:
            self.dropped_unroutable += 1
            return
        try:
            sock.receive_callback(data, source)
        except Exception:
            logger.exception("receive callback failed for %s", dest)


class UdpSocket:
    """Real UDP socket pumping received frames onto the scheduler thread."""

    def __init__(self, scheduler: Scheduler, bind_address: Address = ("0.0.0.0", 0)):
        self.scheduler = scheduler
        self._sock = _socket.socket(_socket.AF_INET, _socket.SOCK_DGRAM)
        self._sock.bind(bind_address)
        self.address: Address = self._sock.getsockname()
        self.receive_callback = None
        self.closed = False
        self._thread = threading.Thread(target=self._pump, name="iotbed-udp", daemon=True)
        self._thread.start()

    def sendto(self, data: bytes, dest: Address) -> None:
        if self.closed:
            raise TransportError("socket closed")
        try:
            self._sock.sendto(data, dest)
        except OSError as exc:
            raise TransportError(str(exc)) from exc

    def on_datagram(self, callback) -> None:
        self.receive_callback = callback

    def _pump(self) -> None:
        while not self.closed:
            try:
                data, source = self._sock.recvfrom(65536)
            except OSError:
                return
            if self.receive_callback is not None:
                self.scheduler.call_soon(self._dispatch, data, source)

    def _dispatch(self, data: bytes, source: Address) -> None:
        if self.receive_callback is not None:
            try:
                self.receive_callback(data, source)
            except Exception:
                logger.exception("receive callback failed")

    def close(self) -> None:
        if self.closed:
            return
        self.closed = True
        try:
            self._sock.close()
        except OSError:
            pass
