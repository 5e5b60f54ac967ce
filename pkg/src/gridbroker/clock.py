"""Clocks and the transient-task runner.

Workers never talk to a resource directly from their own loop; they hand
remote operations to short-lived tasks that are individually time limited.
With a ``VirtualClock`` the tasks of one fan-out run one after another, each
starting at the same virtual instant with its own local time, and the global
clock then jumps to the latest finish. This models the concurrency of the
fan-out while staying fully deterministic.
"""

from __future__ import annotations

import contextvars
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Any, Callable, Iterable, Optional

from .errors import TransientTimeout


class RealClock:
    virtual = False

    def now(self) -> float:
        return time.time()

    def sleep(self, seconds: float):
        if seconds > 0:
            time.sleep(seconds)

    @contextmanager
    def task(self):
        yield _TaskTime(self.now())


class _TaskTime:
    def __init__(self, start):
        self.start = start
        self.now = start

    @property
    def elapsed(self):
        return self.now - self.start


class VirtualClock:
    virtual = True

    def __init__(self, start: float = 0.0):
        self._now = float(start)
        self._local: contextvars.ContextVar[Optional[_TaskTime]] = contextvars.ContextVar(
            "virtual_task", default=None)

    def now(self) -> float:
        t = self._local.get()
        return t.now if t is not None else self._now

    def sleep(self, seconds: float):
        if seconds <= 0:
            return
        t = self._local.get()
        if t is not None:
            t.now += seconds
        else:
            self._now += seconds

    def advance_to(self, instant: float):
        if instant > self._now:
            self._now = instant

    @property
    def global_now(self):
        return self._now

    @contextmanager
    def task(self):
        parent = self._local.get()
        t = _TaskTime(parent.now if parent is not None else self._now)
        token = self._local.set(t)
        try:
            yield t
        finally:
            self._local.reset(token)


@dataclass
class Outcome:
    item: Any
    value: Any = None
    error: Optional[BaseException] = None
    duration: float = 0.0

    @property
    def ok(self):
        return self.error is None


def call_with_timeout(clock, timeout_s: Optional[float], fn: Callable, *args, **kwargs):
    """Run one remote operation, raising TransientTimeout past ``timeout_s``.

    A real-clock operation that overruns is abandoned in its thread; its
    effects, if any, are reconciled later (e.g. by handle reconnaissance).
    """
    if timeout_s is None:
        return fn(*args, **kwargs)
    if clock.virtual:
        start = clock.now()
        result = fn(*args, **kwargs)
        if clock.now() - start > timeout_s:
            raise TransientTimeout(f"{getattr(fn, '__name__', 'operation')} exceeded {timeout_s}s")
        return result
    box: dict = {}

    def target():
        try:
            box["value"] = fn(*args, **kwargs)
        except BaseException as e:  # handed back to the caller below
            box["error"] = e

    th = threading.Thread(target=target, daemon=True)
    th.start()
    th.join(timeout_s)
    if th.is_alive():
        raise TransientTimeout(f"{getattr(fn, '__name__', 'operation')} exceeded {timeout_s}s")
    if "error" in box:
        raise box["error"]
    return box.get("value")


class TaskRunner:
    """Fans a function out over items as transient tasks."""

    def __init__(self, clock, workers: int = 8):
        self.clock = clock
        self.workers = workers
        self.spawned = 0

    def run_all(self, fn: Callable, items: Iterable) -> list[Outcome]:
        items = list(items)
        if not items:
            return []
        self.spawned += len(items)
        if self.clock.virtual:
            return self._run_virtual(fn, items)
        with ThreadPoolExecutor(max_workers=min(self.workers, len(items)),
                                thread_name_prefix="transient") as pool:
            return list(pool.map(lambda it: self._one(fn, it), items))

    def _one(self, fn, item) -> Outcome:
        with self.clock.task():
            start = self.clock.now()
            try:
                value = fn(item)
                out = Outcome(item, value)
            except Exception as e:
                out = Outcome(item, error=e)
            out.duration = self.clock.now() - start
        return out

    def _run_virtual(self, fn, items) -> list[Outcome]:
        outs = []
        end = self.clock.now()
        for item in items:
            out = self._one(fn, item)
            outs.append(out)
            end = max(end, self.clock.now() + out.duration)
        self.clock.advance_to(end)
        return outs
