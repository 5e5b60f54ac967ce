"""Job events: persisted-then-published state changes.

Every job state change goes through ``Committer.commit``, which writes the
new job to the store and only then publishes a ``JobEvent`` to listeners
and to the structured event log.
"""

from __future__ import annotations

import collections
import logging
import re
import threading
import time
from dataclasses import dataclass
from typing import Callable, Optional

from . import model as m

log = logging.getLogger("gridbroker.events")


@dataclass(frozen=True)
class JobEvent:
    job_id: str
    old_state: str
    new_state: str
    at: float
    detail: Optional[str] = None

    def line(self) -> str:
        detail = " ".join((self.detail or "").split())
        return (f"event job={self.job_id} from={self.old_state} to={self.new_state} "
                f"t={int(round(self.at * 1000))} detail={detail}")


_LINE_RE = re.compile(r"event job=(\S+) from=(\S+) to=(\S+) t=(-?\d+) detail=(.*)$")


def parse_event_line(line: str) -> Optional[JobEvent]:
    mt = _LINE_RE.search(line)
    if not mt:
        return None
    return JobEvent(mt.group(1), mt.group(2), mt.group(3), int(mt.group(4)) / 1000.0,
                    mt.group(5) or None)


class Subscription:
    """A listener's bounded inbox. Oldest events are dropped when it is full."""

    def __init__(self, bus: "EventBus", sink: Optional[Callable], capacity: int):
        self.bus = bus
        self.sink = sink
        self.capacity = capacity
        self.buffer: collections.deque = collections.deque()
        self.dropped = 0
        self._cv = threading.Condition()
        self._closed = False
        self._thread = None
        if sink is not None:
            self._thread = threading.Thread(target=self._pump, name="listener", daemon=True)
            self._thread.start()

    def offer(self, ev: JobEvent):
        with self._cv:
            if len(self.buffer) >= self.capacity:
                self.buffer.popleft()
                self.dropped += 1
                if self.dropped == 1 or self.dropped % 1000 == 0:
                    log.warning("listener saturated, %d event(s) dropped", self.dropped)
            self.buffer.append(ev)
            self._cv.notify()

    def drain(self) -> list:
        """Take all buffered events (for sink-less subscriptions)."""
        with self._cv:
            out = list(self.buffer)
            self.buffer.clear()
            return out

    def _pump(self):
        while True:
            with self._cv:
                while not self.buffer and not self._closed:
                    self._cv.wait()
                if not self.buffer and self._closed:
                    return
                ev = self.buffer.popleft()
            try:
                self.sink(ev)
            except Exception:  # a faulty sink must not take the broker down
                log.exception("listener raised")

    def flush(self, timeout=5.0):
        """Wait until the sink has consumed everything buffered so far."""
        if self._thread is None:
            return
        end = time.monotonic() + timeout
        while time.monotonic() < end:
            with self._cv:
                if not self.buffer:
                    return
            time.sleep(0.001)

    def close(self):
        self.bus.unsubscribe(self)
        with self._cv:
            self._closed = True
            self._cv.notify()
        if self._thread is not None:
            self._thread.join(timeout=5.0)


class EventBus:
    def __init__(self, default_capacity: int = 10_000):
        self.default_capacity = default_capacity
        self._subs: list[Subscription] = []
        self._lock = threading.Lock()
        self.published = 0

    def subscribe(self, sink: Optional[Callable] = None, capacity: Optional[int] = None) -> Subscription:
        sub = Subscription(self, sink, capacity or self.default_capacity)
        with self._lock:
            self._subs.append(sub)
        return sub

    def unsubscribe(self, sub):
        with self._lock:
            if sub in self._subs:
                self._subs.remove(sub)

    def publish(self, ev: JobEvent):
        with self._lock:
            subs = list(self._subs)
            self.published += 1
        for s in subs:
            s.offer(ev)

    @property
    def dropped(self):
        with self._lock:
            return sum(s.dropped for s in self._subs)

    def flush(self):
        with self._lock:
            subs = list(self._subs)
        for s in subs:
            s.flush()


class Committer:
    """Persist a job change, then announce it."""

    def __init__(self, store, bus: Optional[EventBus] = None, clock=None, log_path=None):
        self.store = store
        self.bus = bus
        self.clock = clock
        self._log_file = open(log_path, "a", encoding="utf-8") if log_path else None
        self._log_lock = threading.Lock()
        self.changes = 0

    def close(self):
        if self._log_file is not None:
            self._log_file.close()
            self._log_file = None

    def commit(self, old: Optional[m.Job], new: m.Job, detail: Optional[str] = None) -> m.Job:
        self.store.put(new)
        return self.announce(old, new, detail)

    def announce(self, old: Optional[m.Job], new: m.Job, detail: Optional[str] = None) -> m.Job:
        """Publish the change from ``old`` to ``new``; the store must already hold ``new``."""
        if old is not None and old.state is new.state:
            return new
        with self._log_lock:
            self.changes += 1
        at = new.timestamps.get(new.state.value)
        if at is None:
            at = self.clock.now() if self.clock else 0.0
        if detail is None and new.state is m.JobState.FAILED:
            detail = new.failure_reason
        ev = JobEvent(new.job_id, old.state.value if old else "-", new.state.value, at, detail)
        line = ev.line()
        log.info(line)
        if self._log_file is not None:
            with self._log_lock:
                self._log_file.write(line + "\n")
                self._log_file.flush()
        if self.bus is not None:
            self.bus.publish(ev)
        return new

    def step(self, job: m.Job, event, detail=None, **kw) -> m.Job:
        """Apply ``event`` at the current clock time and commit the result."""
        at = self.clock.now() if self.clock else None
        return self.commit(job, m.transition(job, event, at=at, **kw), detail)

    def fail(self, job: m.Job, reason: str, max_attempts: int) -> m.Job:
        """Failure, then Reset if another attempt is allowed, else finalize."""
        failed = self.step(job, m.Event.FAILURE, reason=reason)
        if m.can_retry(failed, max_attempts):
            return self.step(failed, m.Event.RESET, detail=f"attempt {failed.attempts + 1}")
        return self.commit(failed, failed.replace(terminal=True))
