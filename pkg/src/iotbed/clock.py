"""Event scheduling on an injectable clock.

Every timer in the testbed (retransmissions, notification periods,
registration lifetimes, visibility timeouts, watchdogs) goes through a
:class:`Scheduler` so the whole system can run either on a virtual clock,
where tests advance time explicitly and runs are deterministic, or on the
wall clock for live deployments.
"""

from __future__ import annotations

import heapq
import itertools
import logging
import threading
import time

logger = logging.getLogger(__name__)


class Timer:
    """Handle for a scheduled callback. Cancellation is lazy: the heap entry
    stays behind and is skipped when popped."""

    __slots__ = ("when", "seq", "fn", "args", "cancelled")

    def __init__(self, when: float, seq: int, fn, args):
        self.when = when
        self.seq = seq
        self.fn = fn
        self.args = args
        self.cancelled = False

    def cancel(self) -> None:
        self.cancelled = True
        self.fn = None
        self.args = None

    def __lt__(self, other: "Timer") -> bool:
        return (self.when, self.seq) < (other.when, other.seq)


class Scheduler:
    """Base scheduler: a priority queue of timers ordered by (time, seq).

    The seq tiebreaker makes same-instant callbacks fire in submission
    order, which is what makes virtual runs reproducible.
    """

    def __init__(self) -> None:
        self._heap: list[Timer] = []
        self._seq = itertools.count()

    def now(self) -> float:
        raise NotImplementedError

    def call_at(self, when: float, fn, *args) -> Timer:
        timer = Timer(when, next(self._seq), fn, args)
        self._push(timer)
        return timer

    def call_later(self, delay: float, fn, *args) -> Timer:
        return self.call_at(self.now() + max(0.0, delay), fn, *args)

    def call_soon(self, fn, *args) -> Timer:
        return self.call_at(self.now(), fn, *args)

    def run_in_loop(self, fn, timeout: float | None = None):
        """Run fn on the scheduler's execution context and return its result.

        On the virtual scheduler this is a direct call; the wall scheduler
        marshals the call onto its loop thread.
        """
        raise NotImplementedError

    def _push(self, timer: Timer) -> None:
        heapq.heappush(self._heap, timer)

    def _run_timer(self, timer: Timer) -> None:
        if timer.cancelled:
            return
        try:
            timer.fn(*timer.args)
        except Exception:
            logger.exception("unhandled error in scheduled callback %r", timer.fn)

    def pending_count(self) -> int:
        return sum(1 for t in self._heap if not t.cancelled)


class VirtualClock(Scheduler):
    """Single-threaded discrete-event clock. Time only moves inside
    :meth:`run_until` / :meth:`run_for`, jumping straight to each due timer.
    """

    def __init__(self, start: float = 0.0) -> None:
        super().__init__()
        self._now = float(start)

    def now(self) -> float:
        return self._now

    def run_in_loop(self, fn, timeout: float | None = None):
        return fn()

    def run_until(self, deadline: float) -> None:
        """Process every timer due at or before deadline, then land on it."""
        while self._heap and self._heap[0].when <= deadline:
            timer = heapq.heappop(self._heap)
            if timer.cancelled:
                continue
            if timer.when > self._now:
                self._now = timer.when
            self._run_timer(timer)
        if deadline > self._now:
            self._now = deadline

    def run_for(self, duration: float) -> None:
        self.run_until(self._now + duration)

    def drain(self, limit: int = 1_000_000) -> int:
        """Process callbacks due at the current instant without advancing
        time. Returns the number of callbacks run; used to flush in-flight
        cascades (message deliveries, acks) at the end of a run."""
        ran = 0
        while self._heap and self._heap[0].when <= self._now:
            timer = heapq.heappop(self._heap)
            if timer.cancelled:
                continue
            self._run_timer(timer)
            ran += 1
            if ran > limit:
                raise RuntimeError("drain did not quiesce within %d callbacks" % limit)
        return ran


class WallClock(Scheduler):
    """Wall-time scheduler driven by a dedicated loop thread.

    now() is unix-based (epoch seconds) but advances on the monotonic
    clock so timer math is immune to wall adjustments.
    """

    def __init__(self) -> None:
        super().__init__()
        self._epoch_offset = time.time() - time.monotonic()
        self._cond = threading.Condition()
        self._stopped = False
        self._thread: threading.Thread | None = None

    def now(self) -> float:
        return time.monotonic() + self._epoch_offset

    def start(self) -> None:
        if self._thread is not None:
            return
        self._thread = threading.Thread(target=self._loop, name="iotbed-clock", daemon=True)
        self._thread.start()

    def stop(self) -> None:
        with self._cond:
            self._stopped = True
            self._cond.notify_all()
        if self._thread is not None and self._thread is not threading.current_thread():
            self._thread.join(timeout=5)
        self._thread = None

    def _push(self, timer: Timer) -> None:
        with self._cond:
            heapq.heappush(self._heap, timer)
            self._cond.notify_all()

    def _loop(self) -> None:
        while True:
            with self._cond:
                if self._stopped:
                    return
                if not self._heap:
                    self._cond.wait()
                    continue
                delta = self._heap[0].when - self.now()
                if delta > 0:
                    self._cond.wait(min(delta, 1.0))
                    continue
                timer = heapq.heappop(self._heap)
            self._run_timer(timer)

    def run_in_loop(self, fn, timeout: float | None = None):
        if threading.current_thread() is self._thread:
            return fn()
        done = threading.Event()
        box: dict = {}

        def runner():
            try:
                box["result"] = fn()
            except Exception as exc:  # propagated to the caller below
                box["error"] = exc
            finally:
                done.set()

        self.call_soon(runner)
        if not done.wait(timeout if timeout is not None else 30.0):
            raise TimeoutError("scheduler call did not complete in time")
        if "error" in box:
            raise box["error"]
        return box.get("result")
