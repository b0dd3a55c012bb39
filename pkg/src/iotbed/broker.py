"""In-process pub/sub hub with AMQP-flavoured topic routing.

Two exchanges: CONTROL for lifecycle events, LIVE_DATA for readings.
Bindings map routing-key patterns to named queues; named queues outlive
their consumers, so a respawned worker picks up where the dead one
stopped. Delivery is at-least-once: a message stays in flight until
acked, is requeued at the head when its consumer detaches, and is
redelivered after a visibility timeout if the consumer sits on it.

Pattern grammar over dot-separated keys: "*" matches exactly one
segment, "#" matches any remaining tail (including none).
"""

from __future__ import annotations

import itertools
import logging
import threading
from collections import deque
from dataclasses import dataclass, field

from .clock import Scheduler, Timer

log = logging.getLogger(__name__)

CONTROL = "CONTROL"
LIVE_DATA = "LIVE_DATA"

DEFAULT_MAX_DEPTH = 100_000
DEFAULT_VISIBILITY_TIMEOUT = 30.0


class BrokerError(Exception):
    pass


class UnknownExchange(BrokerError):
    pass


class UnknownQueue(BrokerError):
    pass


def pattern_matches(pattern: str, routing_key: str) -> bool:
    """Match a binding pattern against a routing key, segment-wise."""
    return _match(pattern.split("."), routing_key.split("."))


def _match(pat: list[str], key: list[str]) -> bool:
    if not pat:
        return not key
    head, rest = pat[0], pat[1:]
    if head == "#":
        # zero or more segments; try every split point
        if not rest:
            return True
        return any(_match(rest, key[i:]) for i in range(len(key) + 1))
    if not key:
        return False
    if head == "*" or head == key[0]:
        return _match(rest, key[1:])
    return False


@dataclass
class Message:
    routing_key: str
    payload: bytes
    enqueued_at: float
    delivery_tag: int = 0
    redelivered: bool = False


@dataclass
class _InFlight:
    message: Message
    consumer: "Consumer"
    timer: Timer | None = None
    acked: bool = False


class _Queue:
    def __init__(self, name: str, max_depth: int) -> None:
        self.name = name
        self.max_depth = max_depth
        self.pending: deque[Message] = deque()
        self.in_flight: dict[int, _InFlight] = {}
        self.consumers: list[Consumer] = []
        self.counters = {"published": 0, "acked": 0, "dropped": 0, "redelivered": 0}

    def depth(self) -> int:
        return len(self.pending) + len(self.in_flight)


class Consumer:
    """Handle for one worker consuming a named queue."""

    def __init__(self, broker: "Broker", queue: _Queue) -> None:
        self._broker = broker
        self._queue = queue
        self._handler = None
        self._current: _InFlight | None = None
        self.attached = False

    @property
    def queue_name(self) -> str:
        return self._queue.name

    def attach(self, handler) -> None:
        """handler(message) is invoked with at most one unacked message."""
        self._handler = handler
        self.attached = True
        self._broker._pump(self._queue)

    def detach(self) -> None:
        """Stop consuming; any unacked message goes back to the queue head."""
        self.attached = False
        self._handler = None
        self._broker._requeue_consumer(self)

    def ack(self, message: Message) -> None:
        self._broker._ack(self, message)


class Broker:
    def __init__(self, scheduler: Scheduler, max_depth: int = DEFAULT_MAX_DEPTH,
                 visibility_timeout: float = DEFAULT_VISIBILITY_TIMEOUT) -> None:
        self.scheduler = scheduler
        self.max_depth = max_depth
        self.visibility_timeout = visibility_timeout
        self._lock = threading.RLock()
        self._tags = itertools.count(1)
        # exchange -> list of (pattern, queue)
        self._bindings: dict[str, list[tuple[str, _Queue]]] = {CONTROL: [], LIVE_DATA: []}
        self._queues: dict[str, _Queue] = {}
        self._unrouted = {CONTROL: 0, LIVE_DATA: 0}
        self._pump_scheduled: set[str] = set()

    # ------------------------------------------------------------------
    # publishing

    def publish(self, exchange: str, routing_key: str, payload: bytes) -> int:
        """Copy the payload into every queue bound by a matching pattern.
        Returns the number of queues that received it."""
        if exchange not in self._bindings:
            raise UnknownExchange(exchange)
        now = self.scheduler.now()
        with self._lock:
            targets = []
            for pattern, queue in self._bindings[exchange]:
                if queue not in targets and pattern_matches(pattern, routing_key):
                    targets.append(queue)
            for queue in targets:
                message = Message(routing_key, payload, now, next(self._tags))
                queue.pending.append(message)
                queue.counters["published"] += 1
                while queue.depth() > queue.max_depth:
                    dropped = queue.pending.popleft()
                    queue.counters["dropped"] += 1
                    log.debug("queue %s overflow, dropped %s", queue.name,
                              dropped.routing_key)
            if not targets:
                self._unrouted[exchange] += 1
        for queue in targets:
            self._pump(queue)
        return len(targets)

    # ------------------------------------------------------------------
    # subscribing

    def subscribe(self, exchange: str, pattern: str, queue: str,
                  handler=None) -> Consumer:
        """Bind a named queue to the pattern and return a consumer on it.
        Re-subscribing to the same queue name resumes its backlog."""
        if exchange not in self._bindings:
            raise UnknownExchange(exchange)
        with self._lock:
            q = self._queues.get(queue)
            if q is None:
                q = _Queue(queue, self.max_depth)
                self._queues[queue] = q
            if not any(p == pattern and bq is q for p, bq in self._bindings[exchange]):
                self._bindings[exchange].append((pattern, q))
            consumer = Consumer(self, q)
            q.consumers.append(consumer)
        if handler is not None:
            consumer.attach(handler)
        return consumer

    def queue_stats(self, queue: str) -> dict:
        with self._lock:
            q = self._queues.get(queue)
            if q is None:
                raise UnknownQueue(queue)
            return {**q.counters, "depth": q.depth(), "in_flight": len(q.in_flight)}

    def stats(self) -> dict:
        with self._lock:
            return {
                "queues": {name: {**q.counters, "depth": q.depth()}
                           for name, q in self._queues.items()},
                "unrouted": dict(self._unrouted),
            }

    # ------------------------------------------------------------------
    # dispatch machinery

    def _pump(self, queue: _Queue) -> None:
        with self._lock:
            if queue.name in self._pump_scheduled:
                return
            self._pump_scheduled.add(queue.name)
        self.scheduler.call_soon(self._dispatch, queue)

    def _dispatch(self, queue: _Queue) -> None:
        while True:
            with self._lock:
                self._pump_scheduled.discard(queue.name)
                consumer = next(
                    (c for c in queue.consumers
                     if c.attached and c._handler is not None and c._current is None),
                    None)
                if consumer is None or not queue.pending:
                    return
                message = queue.pending.popleft()
                entry = _InFlight(message, consumer)
                queue.in_flight[message.delivery_tag] = entry
                consumer._current = entry
                handler = consumer._handler
            try:
                handler(message)
            except Exception:
                log.exception("consumer on %s failed for %s", queue.name,
                              message.routing_key)
            with self._lock:
                if entry.acked:
                    continue
                if queue.in_flight.get(message.delivery_tag) is entry:
                    # not acked during dispatch: keep in flight, redeliver later
                    entry.timer = self.scheduler.call_later(
                        self.visibility_timeout, self._visibility_expired,
                        queue, message.delivery_tag)
            return

    def _ack(self, consumer: Consumer, message: Message) -> None:
        with self._lock:
            queue = consumer._queue
            entry = queue.in_flight.pop(message.delivery_tag, None)
            if entry is None:
                return
            entry.acked = True
            if entry.timer is not None:
                entry.timer.cancel()
            queue.counters["acked"] += 1
            if consumer._current is entry:
                consumer._current = None
            has_more = bool(queue.pending)
        if has_more:
            self._pump(queue)

    def _visibility_expired(self, queue: _Queue, tag: int) -> None:
        with self._lock:
            entry = queue.in_flight.pop(tag, None)
            if entry is None:
                return
            if entry.consumer._current is entry:
                entry.consumer._current = None
            entry.message.redelivered = True
            queue.counters["redelivered"] += 1
            queue.pending.appendleft(entry.message)
        self._pump(queue)

    def _requeue_consumer(self, consumer: Consumer) -> None:
        with self._lock:
            queue = consumer._queue
            entry = consumer._current
            consumer._current = None
            if consumer in queue.consumers:
                queue.consumers.remove(consumer)
            if entry is not None and not entry.acked:
                if queue.in_flight.pop(entry.message.delivery_tag, None) is not None:
                    if entry.timer is not None:
                        entry.timer.cancel()
                    entry.message.redelivered = True
                    queue.counters["redelivered"] += 1
                    queue.pending.appendleft(entry.message)
        self._pump(queue)
