"""Job and service monitoring.

The job monitor polls each in-flight job on its own schedule (submission
instant plus whole poll intervals), retrieves and verifies outputs when a
job exits, and sends failed jobs back for rescheduling. The service monitor
probes every service and refreshes availability and prices.
"""

from __future__ import annotations

import fnmatch
import logging
import math
import os
import shutil
import threading
from dataclasses import dataclass
from typing import Optional

from . import model as m
from .catalog import load_market_file, load_replica_file
from .errors import ExecutionError, ProbeFailed
from .events import EventBus, JobEvent, Subscription
from .execution import MANIFEST, RETRIEVED_MARKER, read_manifest
from .scheduler import observe_duration

log = logging.getLogger(__name__)

S = m.JobState
WATCHED = frozenset({S.SUBMITTED, S.PENDING, S.ACTIVE, S.STAGE_OUT})


@dataclass
class MonitorConfig:
    poll_interval_s: float = 12.0
    poll_retries: int = 3
    service_probe_interval_s: Optional[float] = None
    max_attempts: int = m.DEFAULT_MAX_ATTEMPTS

    @property
    def probe_interval(self):
        if self.service_probe_interval_s is not None:
            return self.service_probe_interval_s
        return 5 * self.poll_interval_s


def register_listener(bus: EventBus, sink=None, capacity: Optional[int] = None) -> Subscription:
    """Subscribe ``sink`` to job events; without a sink, events are buffered for ``drain``."""
    return bus.subscribe(sink, capacity)


# -- verification ----------------------------------------------------------------


@dataclass(frozen=True)
class Verdict:
    state: m.JobState
    reason: Optional[str] = None

    @property
    def ok(self):
        return self.state is S.DONE


def verify_completion(job: m.Job, retrieved, expected, agent_exit: Optional[int]) -> Verdict:
    """DONE only if the agent exited 0 and every expected pattern matched a retrieved file.

    ``expected`` holds the task's patterns before substitution.
    """
    if agent_exit is None:
        return Verdict(S.FAILED, "no agent manifest")
    if agent_exit != 0:
        return Verdict(S.FAILED, f"nonzero exit: {agent_exit}")
    names = [os.path.basename(f) for f in retrieved] + list(retrieved)
    missing = []
    for pat in expected:
        concrete = m.substitute(pat, job.bindings, job.job_id)
        if not any(fnmatch.fnmatchcase(n, concrete) for n in names):
            missing.append(concrete)
    if missing:
        return Verdict(S.FAILED, f"missing output: {', '.join(missing)}")
    return Verdict(S.DONE)


def compute_seconds(manifest) -> Optional[float]:
    if manifest is None or not manifest.steps:
        return None
    start = min(s["start"] for s in manifest.steps)
    end = max(s["end"] for s in manifest.steps)
    return max(0.0, (end - start) / 1000.0)


# -- services ----------------------------------------------------------------------


class ServiceRegistry:
    """Serialized read-modify-write access to service records in the store."""

    def __init__(self, store):
        self.store = store
        self._lock = threading.RLock()
        self.penalized_until: dict[str, float] = {}

    def all(self) -> list:
        return self.store.services()

    def get(self, service_id):
        return self.store.service(service_id)

    def computes(self) -> list:
        return sorted((s for s in self.all() if isinstance(s, m.ComputeServer)),
                      key=lambda s: s.service_id)

    def datahosts(self) -> dict:
        return {s.service_id: s for s in self.all() if isinstance(s, m.DataHost)}

    def links(self) -> m.LinkTable:
        return m.LinkTable(s for s in self.all() if isinstance(s, m.NetworkLink))

    def add(self, service):
        with self._lock:
            self.store.put(service)

    def update(self, service_id, fn):
        with self._lock:
            new = fn(self.store.service(service_id))
            self.store.put(new)
            return new

    def observe_completion(self, server_id, seconds):
        return self.update(server_id, lambda s: observe_duration(s, seconds))

    def observe_link(self, link_id, mbps, alpha=0.5):
        try:
            return self.update(link_id, lambda l: l.observe(mbps, alpha))
        except KeyError:
            return None  # default link: nothing declared to update

    def penalize(self, server_id, until):
        with self._lock:
            self.penalized_until[server_id] = max(until, self.penalized_until.get(server_id, until))


def _probe_one(svc, execution, creds, clock):
    """Returns a dict of changes for ``svc``, or raises ProbeFailed."""
    changes = {}
    if isinstance(svc, m.ComputeServer):
        cred = creds.get(svc.credential_id) if svc.credential_id else None
        attrs = execution.probe(svc, cred)
        changes["attributes"] = {**svc.attributes, **(attrs or {})}
    elif isinstance(svc, m.DataHost):
        if svc.protocol == "localfs":
            for f in svc.files:
                if not os.access(f.path, os.R_OK):
                    raise ProbeFailed(f"{svc.service_id}: {f.path} unreadable")
    elif isinstance(svc, m.InformationService):
        try:
            if svc.subtype == "market_directory":
                changes["prices"] = load_market_file(svc.backing)
            else:
                load_replica_file(svc.backing)
        except (OSError, ValueError) as e:
            raise ProbeFailed(f"{svc.service_id}: {e}") from e
    changes["last_probe"] = clock.now()
    return changes


def service_monitor_tick(registry: ServiceRegistry, execution, runner, clock, creds: dict,
                         discover=None) -> list:
    """Probe every service once; returns the updated service list.

    ``discover()`` may return freshly listed services, which are added
    before probing. Probe failures only mark the service unavailable.
    """
    if discover is not None:
        try:
            known = {s.service_id for s in registry.all()}
            for svc in discover():
                if svc.service_id not in known:
                    log.info("discovered service %s", svc.service_id)
                    registry.add(svc)
        except Exception as e:  # a broken services file must not stop monitoring
            log.warning("service discovery failed: %s", e)
    targets = [s for s in registry.all() if not isinstance(s, m.NetworkLink)]
    outs = runner.run_all(lambda s: _probe_one(s, execution, creds, clock), targets)
    prices: dict = {}
    for o in outs:
        sid = o.item.service_id
        if o.error is not None:
            if not isinstance(o.error, (ExecutionError, OSError)):
                log.error("probe of %s raised %r", sid, o.error)
            log.info("service %s unavailable: %s", sid, o.error)
            registry.update(sid, lambda s: s.replace(available=False, last_probe=clock.now()))
            continue
        changes = dict(o.value)
        prices.update(changes.pop("prices", {}) or {})
        registry.update(sid, lambda s, c=changes: s.replace(available=True, **c))
    for sid, p in sorted(prices.items()):
        def reprice(s, p=p):
            upd = {}
            if isinstance(s, m.ComputeServer) and "price_per_cpu_s" in p:
                upd["price_per_cpu_s"] = float(p["price_per_cpu_s"])
            if isinstance(s, m.DataHost) and "price_per_mb" in p:
                upd["price_per_mb"] = float(p["price_per_mb"])
            return s.replace(**upd) if upd else s
        try:
            registry.update(str(sid), reprice)
        except KeyError:
            log.debug("market price for unknown service %s", sid)
    return registry.all()


class ServiceMonitor:
    def __init__(self, registry, execution, runner, clock, creds, discover=None):
        self.registry = registry
        self.execution = execution
        self.runner = runner
        self.clock = clock
        self.creds = creds
        self.discover = discover

    def tick(self):
        return service_monitor_tick(self.registry, self.execution, self.runner, self.clock,
                                    self.creds, self.discover)


# -- jobs --------------------------------------------------------------------------


@dataclass
class PollResult:
    job_id: str
    events: list
    server_id: Optional[str] = None
    compute_s: Optional[float] = None
    freed: bool = False  # the job released its slot


class JobMonitor:
    """Polls in-flight jobs and finishes the ones that exited."""

    def __init__(self, store, execution, committer, runner, clock, cfg: MonitorConfig, *,
                 tasks: dict, out_dir: str, registry: Optional[ServiceRegistry] = None):
        self.store = store
        self.execution = execution
        self.committer = committer
        self.runner = runner
        self.clock = clock
        self.cfg = cfg
        self.tasks = tasks
        self.out_dir = out_dir
        self.registry = registry
        self._sched: dict[str, list] = {}  # job_id -> [base instant, next k]
        self._fails: dict[str, int] = {}
        self._stats: dict[str, list] = {}  # job_id -> [polls, seconds] not yet persisted
        self._lock = threading.Lock()

    # -- schedule ----------------------------------------------------------------

    def _entry(self, jid):
        with self._lock:
            e = self._sched.get(jid)
        if e is not None:
            return e
        job = self.store.get_job(jid)
        if job.state is S.STAGE_OUT:
            e = [self.clock.now(), 0]
        else:
            base = job.timestamps.get(S.SUBMITTED.value, self.clock.now())
            behind = (self.clock.now() - base) / self.cfg.poll_interval_s
            e = [base, max(1, math.ceil(behind - 1e-9))]
        del job
        with self._lock:
            self._sched.setdefault(jid, e)
            return self._sched[jid]

    def due_at(self, jid) -> float:
        base, k = self._entry(jid)
        return base + k * self.cfg.poll_interval_s

    def watched(self) -> list:
        ids = self.store.job_ids(WATCHED)
        live = set(ids)
        with self._lock:
            for gone in [j for j in self._sched if j not in live]:
                self._sched.pop(gone, None)
                self._fails.pop(gone, None)
                self._stats.pop(gone, None)
        return ids

    def next_due(self) -> Optional[float]:
        ids = self.watched()
        return min((self.due_at(j) for j in ids), default=None)

    def _advance(self, jid, now):
        with self._lock:
            e = self._sched.get(jid)
            if e is None:
                return
            passed = math.floor((now - e[0]) / self.cfg.poll_interval_s + 1e-9)
            e[1] = max(e[1] + 1, passed + 1)

    # -- tick --------------------------------------------------------------------

    def tick(self, now: Optional[float] = None) -> list[PollResult]:
        now = self.clock.now() if now is None else now
        due = [j for j in self.watched() if self.due_at(j) <= now + 1e-9]
        if not due:
            return []
        outs = self.runner.run_all(self._process, due)
        results = []
        for o in outs:
            if o.error is not None:
                log.error("monitoring %s crashed: %r", o.item, o.error)
                continue
            r = o.value
            results.append(r)
            if r.compute_s is not None and r.server_id and self.registry is not None:
                self.registry.observe_completion(r.server_id, r.compute_s)
        return results

    def _with_stats(self, job: m.Job) -> m.Job:
        with self._lock:
            polls, secs = self._stats.pop(job.job_id, (0, 0.0))
        if not polls:
            return job
        return job.replace(polls=job.polls + polls, query_s=job.query_s + secs)

    def _step(self, job, event, events, **kw):
        new = self.committer.step(self._with_stats(job), event, **kw)
        events.append(JobEvent(new.job_id, job.state.value, new.state.value,
                               new.timestamps.get(new.state.value, 0.0)))
        return new

    def _fail(self, job, reason, events):
        new = self.committer.fail(self._with_stats(job), reason, self.cfg.max_attempts)
        now = self.clock.now()
        events.append(JobEvent(new.job_id, job.state.value, S.FAILED.value, now, reason))
        if new.state is S.READY:
            events.append(JobEvent(new.job_id, S.FAILED.value, S.READY.value, now,
                                   f"attempt {new.attempts}"))
        return new

    def _process(self, jid) -> PollResult:
        job = self.store.get_job(jid)
        events: list = []
        res = PollResult(jid, events, job.mapping.compute_id if job.mapping else None)
        if job.state is S.STAGE_OUT:
            return self._finish(job, res)
        if job.state not in WATCHED:
            return res
        start = self.clock.now()
        try:
            status = self.execution.poll(job.remote_handle)
        except ExecutionError as e:
            self._record_poll(jid, start)
            with self._lock:
                n = self._fails[jid] = self._fails.get(jid, 0) + 1
            if n >= self.cfg.poll_retries:
                self._fail(job, f"poll failed {n} consecutive times: {e}", events)
                res.freed = True
            else:
                log.info("poll of %s failed (%d/%d): %s", jid, n, self.cfg.poll_retries, e)
            return res
        self._record_poll(jid, start)
        with self._lock:
            self._fails.pop(jid, None)
        if status.kind == "queued":
            if job.state is S.SUBMITTED:
                job = self._step(job, m.Event.QUEUED, events)
        elif status.kind == "running":
            if job.state in (S.SUBMITTED, S.PENDING):
                job = self._step(job, m.Event.STARTED, events)
        elif status.kind == "lost":
            self._fail(job, "lost: resource no longer knows the job", events)
            res.freed = True
        else:
            if job.state in (S.SUBMITTED, S.PENDING):
                job = self._step(job, m.Event.STARTED, events)
            job = self._step(job, m.Event.EXECUTION_COMPLETE, events,
                             detail=f"remote exit {status.code}")
            return self._finish(job, res)
        return res

    def _record_poll(self, jid, start):
        took = self.clock.now() - start
        with self._lock:
            st = self._stats.setdefault(jid, [0, 0.0])
            st[0] += 1
            st[1] += took
        self._advance(jid, start)

    def dest_dir(self, job: m.Job) -> str:
        return os.path.join(self.out_dir, "jobs", job.job_id, f"a{job.attempts}")

    def _finish(self, job: m.Job, res: PollResult) -> PollResult:
        """Retrieve, run local copies, verify, and settle a STAGE_OUT job."""
        res.freed = True
        events = res.events
        task = self.tasks[job.task_id]
        sub = lambda t: m.substitute(t, job.bindings, job.job_id)
        expected = [sub(p) for p in task.expected_outputs]
        local_copies = []
        for c in task.commands:
            if isinstance(c, m.Copy):
                src, dst = m.Endpoint.parse(sub(c.source)), m.Endpoint.parse(sub(c.dest))
                if src.kind == "remote" and dst.kind == "local":
                    local_copies.append((src.path, dst.path))
        dest = self.dest_dir(job)
        try:
            if os.path.exists(os.path.join(dest, RETRIEVED_MARKER)):
                # retrieved before a restart; the remote side may already be cleaned
                files = _list_files(dest)
            else:
                r = self.execution.stage_out_and_cleanup(job.remote_handle, expected, dest,
                                                         [s for s, _ in local_copies])
                files = list(r.files)
                for w in r.warnings:
                    log.warning("job %s: %s", job.job_id, w)
        except ExecutionError as e:
            self._fail(job, f"{type(e).__name__}: {e}", events)
            return res
        try:
            for src, dst in local_copies:
                target = os.path.abspath(dst)
                os.makedirs(os.path.dirname(target), exist_ok=True)
                shutil.copyfile(os.path.join(dest, src), target)
        except OSError as e:
            self._fail(job, f"local copy failed: {e}", events)
            return res
        manifest = read_manifest(os.path.join(dest, MANIFEST))
        verdict = verify_completion(job, files, task.expected_outputs,
                                    manifest.agent_exit if manifest else None)
        if not verdict.ok:
            self._fail(job, verdict.reason, events)
            return res
        self._step(job, m.Event.OUTPUTS_VERIFIED, events)
        secs = compute_seconds(manifest)
        if secs is None:
            t = job.timestamps
            if S.ACTIVE.value in t and S.STAGE_OUT.value in t:
                secs = t[S.STAGE_OUT.value] - t[S.ACTIVE.value]
        res.compute_s = secs
        return res


def _list_files(root) -> list[str]:
    out = []
    for dirpath, _, names in os.walk(root):
        for n in names:
            out.append(os.path.relpath(os.path.join(dirpath, n), root))
    return sorted(out)


def monitor_tick(monitor: JobMonitor, now: Optional[float] = None) -> list[JobEvent]:
    """Poll every due job once and return the resulting job events."""
    return [ev for r in monitor.tick(now) for ev in r.events]
