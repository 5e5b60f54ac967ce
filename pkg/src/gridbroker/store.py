"""Persistent entity store keyed by broker instance id.

Layout of one instance directory::

    <dir>/<instance_id>/LOCK        exclusive writer lock (flock)
    <dir>/<instance_id>/VERSION     schema version
    <dir>/<instance_id>/log         append-only entity records
    <dir>/<instance_id>/snapshot-N  compacted records, newest N wins

Each record is ``>II`` (payload length, crc32) followed by a JSON payload
``{"k": kind, "id": key, "v": tree}``. Replaying the newest snapshot then the
log gives last-write-wins state; a torn or corrupt tail of the log is
truncated on open.

Only small per-job metadata is indexed in memory; full ``Job`` records are
decoded from disk on demand so memory stays bounded by the active set.
"""

from __future__ import annotations

import fcntl
import heapq
import json
import logging
import os
import re
import struct
import threading
import uuid
import zlib
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Optional

from . import codec
from . import model as m
from .errors import (
    Locked,
    MissingCredential,
    NoSuchInstance,
    SimulatedCrash,
    StoreIO,
    StoreValidationError,
    VersionMismatch,
)

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
HEADER = struct.Struct(">II")
_SNAP_RE = re.compile(r"^snapshot-(\d+)$")


@dataclass
class JobMeta:
    state: m.JobState
    seq: int
    attempts: int
    terminal: bool
    compute_id: Optional[str]
    queue: Optional[str]
    est_cost: float
    # estimated completion instant of the current mapping, if any
    est_end: Optional[float] = None


def _est_end(stamps: dict, est_duration):
    t = stamps.get(m.JobState.SCHEDULED.value)
    return None if t is None or est_duration is None else t + est_duration


def _meta(j: m.Job) -> JobMeta:
    mp = j.mapping
    return JobMeta(j.state, j.seq, j.attempts, j.terminal,
                   mp.compute_id if mp else None, mp.queue if mp else None,
                   mp.est_cost if mp else 0.0,
                   _est_end(j.timestamps, mp.est_duration_s) if mp else None)


def _meta_from_tree(t: dict) -> JobMeta:
    mp = t.get("mapping") or {}
    return JobMeta(m.JobState(t["state"]), int(t.get("seq", 0)), int(t.get("attempts", 0)),
                   bool(t.get("terminal")), mp.get("compute_id"), mp.get("queue"),
                   float(mp.get("est_cost", 0.0)),
                   _est_end(t.get("timestamps") or {}, mp.get("est_duration_s")) if mp else None)


class ActiveSet:
    """Bounded set of job ids the workers may hold in memory."""

    def __init__(self, capacity: int = 100):
        if capacity <= 0:
            raise ValueError("active set capacity must be positive")
        self.capacity = capacity
        self.members: set[str] = set()
        self._lock = threading.Lock()

    def __len__(self):
        return len(self.members)

    def __contains__(self, job_id):
        return job_id in self.members

    def room(self):
        return self.capacity - len(self.members)


class Store:
    """Handle to one broker instance's persisted state. Use ``open_store``."""

    def __init__(self, root: Path, instance_id: str, *, read_only=False, sync=True,
                 compact_every=5000, fail_after_writes: Optional[int] = None):
        self.root = root
        self.instance_id = instance_id
        self.path = root / instance_id
        self.read_only = read_only
        self.sync = sync
        self.compact_every = compact_every
        # fault injection: raise SimulatedCrash instead of performing write N+1
        self.fail_after_writes = fail_after_writes
        self.writes = 0
        self._lock = threading.RLock()
        self._lock_fd = None
        self._fds: dict[str, int] = {}
        self._loc: dict[tuple, tuple] = {}
        self._jobs: dict[str, JobMeta] = {}
        self._services: dict[str, object] = {}
        self._context: Optional[m.ApplicationContext] = None
        self._config: dict = {}
        self._snapshot_n = 0
        self._log_records = 0
        self._closed = False

    # -- lifecycle -------------------------------------------------------------

    def _open(self, create: bool):
        p = self.path
        if not p.is_dir():
            if not create:
                raise NoSuchInstance(f"no broker instance {self.instance_id!r} in {self.root}")
            p.mkdir(parents=True)
        vfile = p / "VERSION"
        if vfile.exists():
            version = json.loads(vfile.read_text()).get("schema_version")
            if version != SCHEMA_VERSION:
                raise VersionMismatch(f"store schema {version}, expected {SCHEMA_VERSION}")
        elif self.read_only:
            raise NoSuchInstance(f"{p} is not a broker store")
        else:
            _atomic_write(vfile, json.dumps({"schema_version": SCHEMA_VERSION}).encode())
        if not self.read_only:
            self._lock_fd = os.open(p / "LOCK", os.O_RDWR | os.O_CREAT, 0o600)
            try:
                fcntl.flock(self._lock_fd, fcntl.LOCK_EX | fcntl.LOCK_NB)
            except BlockingIOError:
                os.close(self._lock_fd)
                self._lock_fd = None
                raise Locked(f"instance {self.instance_id} is held by another broker") from None
        try:
            self._load()
        except BaseException:
            self._release()
            raise

    def _load(self):
        p = self.path
        snaps = []
        for child in p.iterdir():
            mt = _SNAP_RE.match(child.name)
            if mt:
                snaps.append(int(mt.group(1)))
            elif child.name.endswith(".tmp") and not self.read_only:
                child.unlink()
        snaps.sort()
        if snaps:
            self._snapshot_n = snaps[-1]
            name = f"snapshot-{self._snapshot_n}"
            fd = os.open(p / name, os.O_RDONLY)
            self._fds[name] = fd
            good = self._scan(name, fd)
            if good != os.fstat(fd).st_size:
                raise StoreIO(f"corrupt snapshot {name}")
            if not self.read_only:
                for n in snaps[:-1]:
                    (p / f"snapshot-{n}").unlink(missing_ok=True)
        flags = os.O_RDONLY if self.read_only else os.O_RDWR | os.O_APPEND | os.O_CREAT
        if self.read_only and not (p / "log").exists():
            return
        fd = os.open(p / "log", flags, 0o600)
        self._fds["log"] = fd
        good = self._scan("log", fd)
        size = os.fstat(fd).st_size
        if good != size and not self.read_only:
            log.warning("truncating %d corrupt tail bytes of %s/log", size - good, p)
            os.ftruncate(fd, good)

    def _scan(self, name, fd) -> int:
        """Replay records of one segment; return the offset after the last good one."""
        size = os.fstat(fd).st_size
        off = 0
        count = 0
        while off + HEADER.size <= size:
            length, crc = HEADER.unpack(os.pread(fd, HEADER.size, off))
            if off + HEADER.size + length > size:
                break
            payload = os.pread(fd, length, off + HEADER.size)
            if zlib.crc32(payload) != crc:
                break
            try:
                rec = json.loads(payload)
            except ValueError:
                break
            self._apply(rec, (name, off + HEADER.size, length))
            off += HEADER.size + length
            count += 1
        if name == "log":
            self._log_records = count
        return off

    def _apply(self, rec, loc, entity=None):
        kind, key, tree = rec["k"], rec["id"], rec["v"]
        self._loc[(kind, key)] = loc
        if kind == "job":
            self._jobs[key] = _meta(entity) if entity is not None else _meta_from_tree(tree)
        elif kind == "service":
            self._services[key] = entity if entity is not None else codec.decode_service(tree)
        elif kind == "context":
            self._context = entity if entity is not None else codec.decode_context(tree)
        elif kind == "config":
            self._config = dict(tree)

    def close(self):
        """Orderly shutdown: compact, then release the lock."""
        with self._lock:
            if self._closed:
                return
            if not self.read_only and self._log_records:
                self.compact()
            self._release()

    def abandon(self):
        """Drop the handle without any further writes, as a crash would."""
        with self._lock:
            self._release()

    def _release(self):
        for fd in self._fds.values():
            os.close(fd)
        self._fds.clear()
        if self._lock_fd is not None:
            os.close(self._lock_fd)
            self._lock_fd = None
        self._closed = True

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    # -- writes ----------------------------------------------------------------

    def put(self, entity) -> None:
        """Durably record ``entity``; returns only after the write is on disk."""
        if self.read_only:
            raise StoreIO("store opened read-only")
        if isinstance(entity, m.Credential):
            raise StoreValidationError("credentials are never persisted")
        if isinstance(entity, m.Job):
            self._validate_job(entity)
            rec = {"k": "job", "id": entity.job_id, "v": codec.encode_job(entity)}
        elif isinstance(entity, (m.Service, m.NetworkLink)):
            rec = {"k": "service", "id": entity.service_id, "v": codec.encode_service(entity)}
        elif isinstance(entity, m.ApplicationContext):
            rec = {"k": "context", "id": "context", "v": codec.encode_context(entity)}
        elif isinstance(entity, dict):
            rec = {"k": "config", "id": "config", "v": entity}
        else:
            raise StoreValidationError(f"cannot persist {type(entity).__name__}")
        payload = json.dumps(rec, separators=(",", ":"), sort_keys=True).encode()
        with self._lock:
            if self._closed:
                raise StoreIO("store is closed")
            if self.fail_after_writes is not None and self.writes >= self.fail_after_writes:
                raise SimulatedCrash(f"crash injected before write {self.writes + 1}")
            fd = self._fds["log"]
            try:
                off = os.lseek(fd, 0, os.SEEK_END)
                os.write(fd, HEADER.pack(len(payload), zlib.crc32(payload)) + payload)
                if self.sync:
                    os.fsync(fd)
            except OSError as e:
                raise StoreIO(str(e)) from e
            self.writes += 1
            self._log_records += 1
            self._apply(rec, ("log", off + HEADER.size, len(payload)),
                        entity if not isinstance(entity, dict) else None)
            if self._log_records >= self.compact_every:
                self.compact()

    def put_config(self, config: dict):
        self.put(dict(config))

    def _validate_job(self, job: m.Job):
        ctx = self._context
        if ctx is None or job.task_id not in {t.task_id for t in ctx.tasks}:
            raise StoreValidationError(f"job {job.job_id} references unknown task {job.task_id!r}")
        if job.mapping is not None:
            svc = self._services.get(job.mapping.compute_id)
            if not isinstance(svc, m.ComputeServer):
                raise StoreValidationError(
                    f"job {job.job_id} mapped to unknown compute service {job.mapping.compute_id!r}")

    def compact(self):
        """Write a snapshot of the latest records and empty the log."""
        with self._lock:
            n = self._snapshot_n + 1
            name = f"snapshot-{n}"
            tmp = self.path / (name + ".tmp")
            new_loc = {}
            with open(tmp, "wb") as f:
                off = 0
                for key, (seg, o, length) in self._loc.items():
                    payload = os.pread(self._fds[seg], length, o)
                    f.write(HEADER.pack(length, zlib.crc32(payload)) + payload)
                    new_loc[key] = (name, off + HEADER.size, length)
                    off += HEADER.size + length
                f.flush()
                os.fsync(f.fileno())
            os.rename(tmp, self.path / name)
            _fsync_dir(self.path)
            os.ftruncate(self._fds["log"], 0)
            if self.sync:
                os.fsync(self._fds["log"])
            old = f"snapshot-{self._snapshot_n}"
            if old in self._fds:
                os.close(self._fds.pop(old))
                (self.path / old).unlink(missing_ok=True)
            self._fds[name] = os.open(self.path / name, os.O_RDONLY)
            self._loc = new_loc
            self._snapshot_n = n
            self._log_records = 0

    # -- reads -----------------------------------------------------------------

    def _read(self, key) -> dict:
        with self._lock:
            seg, off, length = self._loc[key]
            return json.loads(os.pread(self._fds[seg], length, off))["v"]

    @property
    def context(self) -> Optional[m.ApplicationContext]:
        return self._context

    @property
    def config(self) -> dict:
        return dict(self._config)

    def services(self) -> list:
        with self._lock:
            return list(self._services.values())

    def service(self, service_id):
        return self._services[service_id]

    def has_job(self, job_id) -> bool:
        return job_id in self._jobs

    def get_job(self, job_id) -> m.Job:
        if job_id not in self._jobs:
            raise KeyError(job_id)
        return codec.decode_job(self._read(("job", job_id)))

    def job_meta(self, job_id) -> JobMeta:
        return self._jobs[job_id]

    def job_ids(self, states: Optional[Iterable] = None, sort=True) -> list[str]:
        with self._lock:
            if states is None:
                ids = list(self._jobs)
            else:
                wanted = set(states)
                ids = [j for j, meta in self._jobs.items() if meta.state in wanted]
            if sort:
                ids.sort(key=lambda j: self._jobs[j].seq)
            return ids

    def iter_jobs(self, states=None) -> Iterator[m.Job]:
        """Decode jobs one at a time; callers should not accumulate them."""
        for jid in self.job_ids(states):
            yield self.get_job(jid)

    def job_count(self) -> int:
        return len(self._jobs)

    def state_counts(self) -> Counter:
        with self._lock:
            c = Counter()
            for meta in self._jobs.values():
                if meta.state is m.JobState.FAILED and not meta.terminal:
                    c["FAILED(retrying)"] += 1
                else:
                    c[meta.state.value] += 1
            return c

    def in_flight_by_server(self) -> tuple[Counter, Counter]:
        """Counts of jobs holding a slot, per server and per (server, queue)."""
        holding = m.IN_FLIGHT | m.PRE_HANDLE
        per_server, per_queue = Counter(), Counter()
        with self._lock:
            for meta in self._jobs.values():
                if meta.state in holding and meta.compute_id:
                    per_server[meta.compute_id] += 1
                    if meta.queue:
                        per_queue[(meta.compute_id, meta.queue)] += 1
        return per_server, per_queue

    def lane_busy(self, now: float) -> dict:
        """Estimated remaining seconds of every slot-holding job, per server."""
        holding = m.IN_FLIGHT | m.PRE_HANDLE
        out: dict[str, list] = {}
        with self._lock:
            for meta in self._jobs.values():
                if meta.state in holding and meta.compute_id:
                    left = max(0.0, (meta.est_end or now) - now)
                    out.setdefault(meta.compute_id, []).append(left)
        return out

    def committed_cost(self) -> float:
        """Estimated cost of every job that has been dispatched or completed."""
        holding = m.IN_FLIGHT | m.PRE_HANDLE | {m.JobState.DONE}
        with self._lock:
            return sum(meta.est_cost for meta in self._jobs.values() if meta.state in holding)

    def all_terminal(self) -> bool:
        with self._lock:
            return all(meta.state is m.JobState.DONE or
                       (meta.state is m.JobState.FAILED and meta.terminal)
                       for meta in self._jobs.values())

    def is_terminal(self, job_id) -> bool:
        meta = self._jobs[job_id]
        return meta.state is m.JobState.DONE or (meta.state is m.JobState.FAILED and meta.terminal)

    # -- active set ------------------------------------------------------------

    def prune(self, active: ActiveSet):
        with active._lock:
            active.members = {j for j in active.members if not self.is_terminal(j)}

    def next_ready_batch(self, active: ActiveSet, load=True) -> list:
        """Admit the oldest READY jobs into ``active`` up to its capacity.

        Returns the newly admitted jobs (or only their ids when ``load`` is
        false). Terminal members are evicted first.
        """
        self.prune(active)
        with active._lock:
            room = active.capacity - len(active.members)
            if room <= 0:
                return []
            with self._lock:
                candidates = ((meta.seq, jid) for jid, meta in self._jobs.items()
                              if meta.state is m.JobState.READY and jid not in active.members)
                picked = [jid for _, jid in heapq.nsmallest(room, candidates)]
            active.members.update(picked)
        if not load:
            return picked
        return [self.get_job(j) for j in picked]

    def ready_count(self) -> int:
        with self._lock:
            return sum(1 for meta in self._jobs.values() if meta.state is m.JobState.READY)


def _atomic_write(path: Path, data: bytes):
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(data)
        f.flush()
        os.fsync(f.fileno())
    os.rename(tmp, path)


def _fsync_dir(path: Path):
    fd = os.open(path, os.O_RDONLY)
    try:
        os.fsync(fd)
    finally:
        os.close(fd)


def open_store(directory, instance_id: Optional[str] = None, *, read_only=False, sync=True,
               compact_every=5000, fail_after_writes=None, create=True) -> Store:
    """Open an existing instance or create a fresh one.

    A missing ``instance_id`` creates a new instance with a random id. A
    second writer on the same instance gets ``Locked``. With ``create=False``
    an unknown instance raises ``NoSuchInstance``.
    """
    root = Path(directory)
    create = create and not read_only
    if instance_id is None:
        if read_only:
            raise NoSuchInstance("read-only open needs an instance id")
        instance_id = uuid.uuid4().hex[:12]
    if not read_only:
        root.mkdir(parents=True, exist_ok=True)
    st = Store(root, instance_id, read_only=read_only, sync=sync, compact_every=compact_every,
               fail_after_writes=fail_after_writes)
    st._open(create)
    return st


def list_instances(directory) -> list[str]:
    root = Path(directory)
    if not root.is_dir():
        return []
    return sorted(p.name for p in root.iterdir() if (p / "VERSION").exists())


# -- recovery --------------------------------------------------------------------


@dataclass
class BrokerState:
    instance_id: str
    context: Optional[m.ApplicationContext]
    services: list
    config: dict
    schema_version: int
    store: Store = field(repr=False)

    def jobs(self) -> Iterator[m.Job]:
        return self.store.iter_jobs()


@dataclass
class ReconcileAction:
    job_id: str
    state: str
    action: str
    detail: str = ""


@dataclass
class ReconciliationReport:
    actions: list = field(default_factory=list)

    def add(self, *a):
        self.actions.append(ReconcileAction(*a))

    def by_action(self, action) -> list[str]:
        return [a.job_id for a in self.actions if a.action == action]

    def __len__(self):
        return len(self.actions)


def recover(store: Store, creds: Iterable[m.Credential] = (), *, recon=None,
            max_attempts: int = m.DEFAULT_MAX_ATTEMPTS, now=None, on_change=None):
    """Reconcile a crashed instance so the workers can resume from the store.

    In-flight jobs holding a handle are kept and re-polled. Jobs that never
    obtained a handle are reset, unless ``recon(job)`` finds that the
    submission did reach the resource, in which case the found handle is
    adopted instead of resubmitting. ``on_change(old, new)`` is called after
    every persisted change.
    """
    supplied = {c.cred_id for c in creds}
    for svc in store.services():
        cid = getattr(svc, "credential_id", None)
        if cid and cid not in supplied:
            raise MissingCredential(f"service {svc.service_id} needs credential {cid!r}")
    ctx = store.context
    if ctx is not None:
        missing = [c for c in ctx.credential_ids if c not in supplied]
        if missing:
            raise MissingCredential(f"credentials not supplied: {', '.join(missing)}")

    report = ReconciliationReport()
    stamp = now if now is not None else None

    def commit(old, new):
        store.put(new)
        if on_change:
            on_change(old, new)
        return new

    def fail_and_reset(job, reason):
        failed = commit(job, m.transition(job, m.Event.FAILURE, at=stamp, reason=reason))
        if m.can_retry(failed, max_attempts):
            reset = commit(failed, m.transition(failed, m.Event.RESET, at=stamp))
            report.add(job.job_id, job.state.value, "reset", f"attempts={reset.attempts}")
        else:
            commit(failed, failed.replace(terminal=True))
            report.add(job.job_id, job.state.value, "finalized", "attempts exhausted")

    S = m.JobState
    for jid in store.job_ids(m.IN_FLIGHT | m.PRE_HANDLE | {S.FAILED}):
        job = store.get_job(jid)
        if job.state in m.IN_FLIGHT and job.remote_handle is not None:
            detail = "re-poll then restage" if job.state is S.STAGE_OUT else ""
            report.add(jid, job.state.value, "re-poll", detail)
        elif job.state is S.STAGE_IN and job.submit_intent == job.attempts and recon is not None:
            handle = recon(job)
            if handle is not None:
                commit(job, m.transition(job, m.Event.HANDLE_OBTAINED, at=stamp, handle=handle))
                report.add(jid, job.state.value, "adopted-handle", handle.token)
            else:
                fail_and_reset(job, "broker restart before submission")
        elif job.state in m.PRE_HANDLE or job.state in m.IN_FLIGHT:
            fail_and_reset(job, "broker restart before submission")
        elif job.state is S.FAILED and not job.terminal:
            if m.can_retry(job, max_attempts):
                reset = commit(job, m.transition(job, m.Event.RESET, at=stamp))
                report.add(jid, "FAILED", "reset", f"attempts={reset.attempts}")
            else:
                commit(job, job.replace(terminal=True))
                report.add(jid, "FAILED", "finalized", "attempts exhausted")
        del job
    state = BrokerState(store.instance_id, store.context, store.services(), store.config,
                        SCHEMA_VERSION, store)
    return state, report
