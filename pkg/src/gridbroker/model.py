"""Passive broker entities, the job state machine and task expansion.

Everything here is an immutable value object. ``transition`` returns a new
``Job``; nothing in this module holds shared mutable state except the
instrumentation gauge that counts live ``Job`` records.
"""

from __future__ import annotations

import dataclasses
import enum
import itertools
import math
import posixpath
import re
import threading
import time
from dataclasses import dataclass, field
from typing import Any, Iterable, Iterator, Optional, Sequence

from .errors import (
    EmptyDomain,
    IllegalTransition,
    UnboundVariable,
    UnresolvedGridfile,
)

DEFAULT_MAX_ATTEMPTS = 3


class JobState(str, enum.Enum):
    READY = "READY"
    SCHEDULED = "SCHEDULED"
    STAGE_IN = "STAGE_IN"
    SUBMITTED = "SUBMITTED"
    PENDING = "PENDING"
    ACTIVE = "ACTIVE"
    STAGE_OUT = "STAGE_OUT"
    DONE = "DONE"
    FAILED = "FAILED"

    def __str__(self):
        return self.value


class Event(str, enum.Enum):
    SCHEDULED = "Scheduled"
    STAGE_IN_STARTED = "StageInStarted"
    HANDLE_OBTAINED = "HandleObtained"
    QUEUED = "Queued"
    STARTED = "Started"
    EXECUTION_COMPLETE = "ExecutionComplete"
    OUTPUTS_VERIFIED = "OutputsVerified"
    FAILURE = "Failure"
    RESET = "Reset"

    def __str__(self):
        return self.value


S = JobState

EDGES = {
    (S.READY, Event.SCHEDULED): S.SCHEDULED,
    (S.SCHEDULED, Event.STAGE_IN_STARTED): S.STAGE_IN,
    (S.STAGE_IN, Event.HANDLE_OBTAINED): S.SUBMITTED,
    (S.SUBMITTED, Event.QUEUED): S.PENDING,
    (S.SUBMITTED, Event.STARTED): S.ACTIVE,
    (S.PENDING, Event.STARTED): S.ACTIVE,
    (S.ACTIVE, Event.EXECUTION_COMPLETE): S.STAGE_OUT,
    (S.STAGE_OUT, Event.OUTPUTS_VERIFIED): S.DONE,
    (S.FAILED, Event.RESET): S.READY,
}
EDGES.update(
    {(s, Event.FAILURE): S.FAILED for s in JobState if s not in (S.DONE, S.FAILED)}
)

IN_FLIGHT = frozenset({S.SUBMITTED, S.PENDING, S.ACTIVE, S.STAGE_OUT})
PRE_HANDLE = frozenset({S.SCHEDULED, S.STAGE_IN})


# -- instrumentation ---------------------------------------------------------


class _Gauge:
    """Counts live Job records; the active-set bound is asserted on ``peak``."""

    def __init__(self):
        self._lock = threading.Lock()
        self.live = 0
        self.peak = 0

    def inc(self):
        with self._lock:
            self.live += 1
            if self.live > self.peak:
                self.peak = self.live

    def dec(self):
        with self._lock:
            self.live -= 1

    def reset_peak(self):
        with self._lock:
            self.peak = self.live


job_gauge = _Gauge()


# -- value types -------------------------------------------------------------


@dataclass(frozen=True)
class GridFile:
    """Binding value of a gridfile variable."""

    logical_name: str

    @property
    def staged_name(self):
        return posixpath.basename(self.logical_name.rstrip("/")) or self.logical_name

    def __str__(self):
        return self.staged_name


@dataclass(frozen=True)
class RemoteHandle:
    adapter: str
    token: str
    workdir: str


@dataclass(frozen=True)
class Mapping:
    job_id: str
    compute_id: str
    queue: Optional[str] = None
    data_selection: dict = field(default_factory=dict)
    est_cost: float = 0.0
    est_duration_s: float = 0.0


@dataclass(frozen=True, eq=True)
class Job:
    job_id: str
    task_id: str
    bindings: dict = field(default_factory=dict)
    state: JobState = JobState.READY
    attempts: int = 0
    mapping: Optional[Mapping] = None
    remote_handle: Optional[RemoteHandle] = None
    timestamps: dict = field(default_factory=dict)
    failure_reason: Optional[str] = None
    terminal: bool = False
    seq: int = 0
    # attempt number for which a submission intent was persisted
    submit_intent: Optional[int] = None
    polls: int = 0
    query_s: float = 0.0

    def __post_init__(self):
        job_gauge.inc()

    def __del__(self):
        job_gauge.dec()

    @property
    def is_terminal(self):
        return self.state is JobState.DONE or (self.state is JobState.FAILED and self.terminal)

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)


def transition(job: Job, event: Event, *, at: Optional[float] = None, reason=None,
               mapping: Optional[Mapping] = None, handle: Optional[RemoteHandle] = None) -> Job:
    """Apply ``event`` to ``job`` and return the resulting job.

    Raises IllegalTransition for any pair that is not an edge of the job
    state diagram. A job flagged terminal accepts no events at all.
    """
    event = Event(event)
    target = EDGES.get((job.state, event))
    if target is None or job.terminal:
        raise IllegalTransition(job.state, event)
    at = time.time() if at is None else at
    stamps = dict(job.timestamps)
    stamps[target.value] = at
    changes: dict[str, Any] = {"state": target, "timestamps": stamps}
    if event is Event.SCHEDULED:
        changes["mapping"] = mapping
    elif event is Event.HANDLE_OBTAINED:
        changes["remote_handle"] = handle
    elif event is Event.FAILURE:
        changes["failure_reason"] = reason
    elif event is Event.RESET:
        changes.update(attempts=job.attempts + 1, mapping=None, remote_handle=None,
                       submit_intent=None)
    return dataclasses.replace(job, **changes)


def can_retry(job: Job, max_attempts: int = DEFAULT_MAX_ATTEMPTS) -> bool:
    """True when a FAILED job may be reset for another dispatch."""
    return job.attempts + 1 < max_attempts


# -- application description -------------------------------------------------


@dataclass(frozen=True)
class QoS:
    deadline_s: Optional[float] = None
    budget: Optional[float] = None
    optimization: str = "none"


@dataclass(frozen=True)
class Endpoint:
    kind: str  # local | remote | datahost
    path: str
    host: Optional[str] = None

    @classmethod
    def parse(cls, text: str) -> "Endpoint":
        if text.startswith("remote:"):
            return cls("remote", text[len("remote:"):])
        if text.startswith("local:"):
            return cls("local", text[len("local:"):])
        if text.startswith("datahost:"):
            rest = text[len("datahost:"):]
            host, sep, path = rest.partition(":")
            if not sep or not host:
                raise ValueError(f"malformed datahost endpoint: {text!r}")
            return cls("datahost", path, host)
        return cls("local", text)

    def __str__(self):
        if self.kind == "datahost":
            return f"datahost:{self.host}:{self.path}"
        return f"{self.kind}:{self.path}"


@dataclass(frozen=True)
class Copy:
    source: str
    dest: str
    kind = "copy"

    def texts(self):
        return (self.source, self.dest)


@dataclass(frozen=True)
class Execute:
    cmd: str
    args: tuple = ()
    kind = "execute"

    def texts(self):
        return (self.cmd, *self.args)


@dataclass(frozen=True)
class Substitute:
    template: str
    dest: str
    kind = "substitute"

    def texts(self):
        return (self.template, self.dest)


TaskCommand = Copy | Execute | Substitute

VTYPES = ("integer", "float", "string", "gridfile")


@dataclass(frozen=True)
class Variable:
    name: str
    vtype: str
    start: Optional[float] = None
    stop: Optional[float] = None
    step: Optional[float] = None
    values: tuple = ()
    pattern: Optional[str] = None

    def range_count(self) -> int:
        if self.step in (None, 0) or self.start is None or self.stop is None:
            return 0
        if self.vtype == "integer":
            span = (int(self.stop) - int(self.start)) // int(self.step)
            return span + 1 if span >= 0 else 0
        # tolerance absorbs binary rounding of e.g. (1.0 - 0.0) / 0.1
        ratio = (self.stop - self.start) / self.step
        return math.floor(ratio + 1e-9) + 1 if ratio >= -1e-9 else 0

    def domain(self, catalog=None) -> list:
        if self.vtype == "integer":
            if self.values:
                return [int(v) for v in self.values]
            n = self.range_count()
            if n == 0:
                raise EmptyDomain(f"variable {self.name}: empty range")
            return [int(self.start) + k * int(self.step) for k in range(n)]
        if self.vtype == "float":
            if self.values:
                return [float(v) for v in self.values]
            n = self.range_count()
            if n == 0:
                raise EmptyDomain(f"variable {self.name}: empty range")
            return [float(self.start) + k * float(self.step) for k in range(n)]
        if self.vtype == "string":
            if not self.values:
                raise EmptyDomain(f"variable {self.name}: no values")
            return [str(v) for v in self.values]
        if self.vtype == "gridfile":
            names = _match_catalog(catalog, self.pattern or "")
            if not names:
                raise UnresolvedGridfile(f"variable {self.name}: {self.pattern!r} matches no catalog entry")
            return [GridFile(n) for n in names]
        raise EmptyDomain(f"variable {self.name}: unknown type {self.vtype}")


def _match_catalog(catalog, pattern) -> list[str]:
    if catalog is None:
        return []
    if callable(catalog) and not hasattr(catalog, "match"):
        return sorted(catalog(pattern))
    return sorted(catalog.match(pattern))


@dataclass(frozen=True)
class Task:
    task_id: str
    commands: tuple
    variables: tuple = ()
    expected_outputs: tuple = ()
    requirements: dict = field(default_factory=dict)


@dataclass(frozen=True)
class ApplicationContext:
    app_id: str
    name: str
    qos: QoS = QoS()
    credential_ids: tuple = ()
    tasks: tuple = ()

    def task(self, task_id):
        for t in self.tasks:
            if t.task_id == task_id:
                return t
        raise KeyError(task_id)


# -- services ----------------------------------------------------------------


@dataclass(frozen=True)
class Service:
    service_id: str
    uri: str = ""
    available: bool = True
    last_probe: Optional[float] = None
    attributes: dict = field(default_factory=dict)

    kind = "service"

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)


@dataclass(frozen=True)
class Queue:
    name: str
    max_wallclock_s: float
    slots: int


@dataclass(frozen=True)
class ComputeServer(Service):
    adapter: str = "local"
    architecture: str = ""
    os: str = ""
    slots: int = 1
    queues: tuple = ()
    price_per_cpu_s: float = 0.0
    credential_id: Optional[str] = None
    observed_rate: Optional[float] = None
    completed: int = 0
    # derived from the store at snapshot time, never authoritative
    in_flight: int = 0
    queue_load: dict = field(default_factory=dict)
    # push | pull; None means the run's default staging mode
    staging: Optional[str] = None

    kind = "compute"

    def has_free_slot(self):
        return self.in_flight < self.slots


@dataclass(frozen=True)
class CatalogFile:
    logical_name: str
    path: str
    size_bytes: int = 0


@dataclass(frozen=True)
class DataHost(Service):
    protocol: str = "localfs"
    files: tuple = ()
    price_per_mb: float = 0.0
    credential_id: Optional[str] = None

    kind = "datahost"

    def lookup(self, logical_name) -> Optional[CatalogFile]:
        for f in self.files:
            if f.logical_name == logical_name:
                return f
        return None


@dataclass(frozen=True)
class InformationService(Service):
    subtype: str = "replica_catalog"
    backing: str = ""

    kind = "information"


@dataclass(frozen=True)
class NetworkLink:
    source: str
    target: str
    bandwidth_mbps: float
    cost_per_mb: float = 0.0
    measured_mbps: Optional[float] = None

    kind = "network"

    @property
    def service_id(self):
        return f"link:{self.source}->{self.target}"

    @property
    def effective_mbps(self):
        return self.measured_mbps if self.measured_mbps else self.bandwidth_mbps

    def observe(self, mbps, alpha=0.5):
        old = self.measured_mbps if self.measured_mbps else mbps
        return dataclasses.replace(self, measured_mbps=alpha * mbps + (1 - alpha) * old)

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)


DEFAULT_LINK = NetworkLink("*", "*", bandwidth_mbps=100.0)


class LinkTable:
    """Directional link lookup with fallback to a default link."""

    def __init__(self, links: Iterable[NetworkLink] = (), default: Optional[NetworkLink] = None):
        self._links = {}
        self.default = default or DEFAULT_LINK
        for link in links:
            if link.source == "*" and link.target == "*":
                self.default = link
            else:
                self._links[(link.source, link.target)] = link

    def get(self, source, target) -> NetworkLink:
        for key in ((source, target), (source, "*"), ("*", target)):
            if key in self._links:
                return self._links[key]
        return self.default

    def __iter__(self):
        return iter(self._links.values())

    def scaled(self, factor) -> "LinkTable":
        def sc(link):
            return dataclasses.replace(
                link, bandwidth_mbps=link.bandwidth_mbps * factor,
                measured_mbps=link.measured_mbps * factor if link.measured_mbps else None)
        return LinkTable([sc(l) for l in self._links.values()], sc(self.default))


@dataclass(frozen=True)
class Credential:
    cred_id: str
    kind: str  # userpass | keyfile
    user: Optional[str] = None
    secret: Optional[str] = field(default=None, repr=False)
    secret_env: Optional[str] = None
    path: Optional[str] = None


# -- substitution --------------------------------------------------------------

_VAR_RE = re.compile(r"\$(?:(\$)|\{([A-Za-z_][A-Za-z0-9_]*)\}|([A-Za-z_][A-Za-z0-9_]*))")


def render_value(value) -> str:
    if isinstance(value, bool):
        return str(value).lower()
    if isinstance(value, int):
        return str(value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def substitute(text: str, bindings: dict, job_id: str) -> str:
    """Replace ``$name``/``${name}``/``$jobid`` references; ``$$`` is a literal ``$``."""
    if "$" not in text:
        return text

    def repl(m):
        if m.group(1):
            return "$"
        name = m.group(2) or m.group(3)
        if name == "jobid":
            return job_id
        if name not in bindings:
            raise UnboundVariable(name)
        return render_value(bindings[name])

    return _VAR_RE.sub(repl, text)


def referenced_names(text: str) -> set[str]:
    names = set()
    for m in _VAR_RE.finditer(text):
        name = m.group(2) or m.group(3)
        if name and name != "jobid":
            names.add(name)
    return names


# -- expansion -----------------------------------------------------------------


def iter_expand(task: Task, catalog=None, first_seq: int = 1) -> Iterator[Job]:
    """Yield one READY job per combination of variable values.

    Order is lexicographic over declaration order, each domain ascending.
    Jobs are produced lazily so callers can stream them into a store.
    """
    domains = [(v.name, v.domain(catalog)) for v in task.variables]
    names = [n for n, _ in domains]
    seq = first_seq
    for combo in itertools.product(*(d for _, d in domains)):
        yield Job(job_id=f"j{seq}", task_id=task.task_id,
                  bindings=dict(zip(names, combo)), seq=seq)
        seq += 1


def expand_task(task: Task, catalog=None, first_seq: int = 1) -> list[Job]:
    return list(iter_expand(task, catalog, first_seq))


def expansion_size(task: Task, catalog=None) -> int:
    return math.prod(len(v.domain(catalog)) for v in task.variables)


# -- validation ----------------------------------------------------------------


@dataclass(frozen=True)
class Diagnostic:
    entity: str
    message: str

    def __str__(self):
        return f"{self.entity}: {self.message}"


def validate_application(ctx: ApplicationContext, services: Sequence) -> list[Diagnostic]:
    """Check an application context against the declared services."""
    out: list[Diagnostic] = []
    add = lambda entity, msg: out.append(Diagnostic(entity, msg))

    if not ctx.app_id:
        add("application", "empty app_id")
    q = ctx.qos
    if q.deadline_s is not None and q.deadline_s <= 0:
        add("qos", "deadline_s must be positive")
    if q.budget is not None and q.budget < 0:
        add("qos", "budget must be non-negative")
    if q.optimization not in ("none", "cost", "time"):
        add("qos", f"unknown optimization {q.optimization!r}")
    if q.optimization == "cost" and q.budget is None:
        add("qos", "cost optimization requires a budget")
    if q.optimization == "time" and q.deadline_s is None:
        add("qos", "time optimization requires a deadline")

    computes = [s for s in services if isinstance(s, ComputeServer)]
    datahosts = {s.service_id for s in services if isinstance(s, DataHost)}
    queue_names = {qu.name for s in computes for qu in s.queues}
    if not computes:
        add("services", "no compute service")
    for s in services:
        cid = getattr(s, "credential_id", None)
        if cid and cid not in ctx.credential_ids:
            add(s.service_id, f"credential {cid!r} not listed by the application")
        if isinstance(s, ComputeServer):
            if s.slots <= 0:
                add(s.service_id, "slots must be positive")
            if s.queues and sum(qu.slots for qu in s.queues) > s.slots:
                add(s.service_id, "queue slots exceed server slots")

    if not ctx.tasks:
        add("application", "no task")
    for task in ctx.tasks:
        tid = f"task {task.task_id}"
        declared = {v.name for v in task.variables}
        if len(declared) != len(task.variables):
            add(tid, "duplicate variable name")
        if not task.commands:
            add(tid, "no commands")
        elif not any(isinstance(c, Execute) for c in task.commands):
            add(tid, "at least one execute command is required")
        texts = [t for c in task.commands for t in c.texts()] + list(task.expected_outputs)
        for name in sorted(set().union(*(referenced_names(t) for t in texts)) - declared):
            add(tid, f"undeclared variable ${name}")
        for v in task.variables:
            vid = f"{tid} variable {v.name}"
            if v.vtype not in VTYPES:
                add(vid, f"unknown type {v.vtype!r}")
            elif v.vtype in ("integer", "float") and not v.values:
                if v.step in (None, 0):
                    add(vid, "range step must be non-zero")
                elif v.range_count() == 0:
                    add(vid, "empty range")
            elif v.vtype == "string" and not v.values:
                add(vid, "no values")
            elif v.vtype == "gridfile" and not v.pattern:
                add(vid, "gridfile variable needs a pattern")
        for c in task.commands:
            if isinstance(c, Copy):
                try:
                    src, dst = Endpoint.parse(c.source), Endpoint.parse(c.dest)
                except ValueError as e:
                    add(tid, str(e))
                    continue
                if src == dst:
                    add(tid, f"copy source equals dest: {c.source}")
                if (src.kind == "remote") == (dst.kind == "remote"):
                    add(tid, f"copy must have exactly one remote side: {c.source} -> {c.dest}")
                for ep in (src, dst):
                    if ep.kind == "datahost" and ep.host not in datahosts:
                        add(tid, f"unknown datahost {ep.host!r}")
            elif isinstance(c, Execute) and not c.cmd.strip():
                add(tid, "empty execute command")
        pinned = task.requirements.get("queue")
        if pinned and pinned not in queue_names:
            add(tid, f"unknown queue {pinned!r}")
    return out
