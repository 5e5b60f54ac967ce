"""The broker: owns the store, the three workers, and the run report.

Workers never share in-memory job state. The scheduler, the job monitor
and the service monitor each read what they need from the store and write
every change back to it before anyone else may act on it.

With a real clock the workers are threads. With a virtual clock the same
worker steps run in a deterministic loop that jumps straight to the next
instant at which any of them is due.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import os
import statistics
import threading
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from . import model as m
from .catalog import ReplicaCatalog
from .clock import RealClock, TaskRunner, VirtualClock
from .errors import BrokerError, MissingCredential, NoSuchInstance, SimulatedCrash, StartupError
from .events import Committer, EventBus
from .execution import Execution
from .execution.local import LocalAdapter
from .execution.sim import SimAdapter, SimConfig, SimGrid
from .execution.ssh import SSHAdapter
from .monitoring import JobMonitor, MonitorConfig, ServiceMonitor, ServiceRegistry
from .scheduler import Dispatcher, PolicyKind, SchedulerEnv, schedule_tick
from .store import ActiveSet, open_store, recover

log = logging.getLogger(__name__)

S = m.JobState
EPS = 1e-9


@dataclass
class RunConfig:
    policy: str = "round_robin"
    active_set: int = 100
    poll_interval_s: float = 12.0
    poll_retries: int = 3
    max_attempts: int = m.DEFAULT_MAX_ATTEMPTS
    staging_mode: str = "push"
    out_dir: str = "broker-out"
    store_dir: str = "broker-store"
    # adapter name -> Adapter instance, replacing the default construction
    adapters: dict = field(default_factory=dict)
    probe_interval_s: Optional[float] = None
    bootstrap_s: float = 60.0
    op_timeout_s: float = 30.0
    workers: int = 8
    stall_timeout_s: float = 3600.0
    shutdown_grace_s: float = 10.0
    workroot: Optional[str] = None
    sim_config: Optional[str] = None
    sim_state: Optional[str] = None
    services_path: Optional[str] = None
    sync: bool = True
    compact_every: int = 5000
    # testing hook: the store raises SimulatedCrash instead of write N+1
    fail_after_writes: Optional[int] = None

    _SNAPSHOT = ("policy", "active_set", "poll_interval_s", "poll_retries", "max_attempts",
                 "staging_mode", "out_dir", "probe_interval_s", "bootstrap_s", "op_timeout_s",
                 "workers", "stall_timeout_s", "workroot", "sim_config", "sim_state",
                 "services_path")

    def validate(self):
        PolicyKind.parse(self.policy)
        for name in ("active_set", "poll_retries", "max_attempts", "workers"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.poll_interval_s <= 0:
            raise ValueError("poll_interval_s must be positive")
        if self.staging_mode not in ("push", "pull"):
            raise ValueError("staging_mode must be push or pull")
        for d in (self.out_dir, self.store_dir):
            os.makedirs(d, exist_ok=True)
            if not os.access(d, os.W_OK):
                raise ValueError(f"{d} is not writable")

    def snapshot(self) -> dict:
        out = {k: getattr(self, k) for k in self._SNAPSHOT}
        out["policy"] = str(PolicyKind.parse(self.policy))
        return out

    def merged(self, snap: dict, **overrides) -> "RunConfig":
        known = {k: v for k, v in snap.items() if k in self._SNAPSHOT}
        return dataclasses.replace(self, **{**known, **overrides})


# -- report ----------------------------------------------------------------------


@dataclass
class JobRecord:
    job_id: str
    state: str
    attempts: int
    server: Optional[str]
    submission_s: Optional[float]
    querying_s: float
    termination_s: Optional[float]
    wallclock_s: Optional[float]
    polls: int
    est_cost: float
    failure_reason: Optional[str] = None
    recovered: bool = False


def _span(stamps, a, b):
    if a.value in stamps and b.value in stamps:
        return stamps[b.value] - stamps[a.value]
    return None


def job_record(job: m.Job, recovered=False) -> JobRecord:
    t = job.timestamps
    mp = job.mapping
    return JobRecord(
        job.job_id, job.state.value, job.attempts, mp.compute_id if mp else None,
        _span(t, S.SCHEDULED, S.SUBMITTED), job.query_s, _span(t, S.STAGE_OUT, S.DONE),
        _span(t, S.SUBMITTED, S.DONE), job.polls, mp.est_cost if mp and job.state is S.DONE else 0.0,
        job.failure_reason if job.state is not S.DONE else None, recovered)


METRICS = ("submission_s", "querying_s", "termination_s", "wallclock_s")


@dataclass
class RunReport:
    instance_id: str
    jobs: list
    started_at: float
    finished_at: float
    recovered: int = 0
    stalled: bool = False
    aborted: Optional[str] = None
    dropped_events: int = 0

    @property
    def total(self):
        return len(self.jobs)

    @property
    def done(self):
        return sum(1 for j in self.jobs if j.state == S.DONE.value)

    @property
    def failed(self):
        return self.total - self.done

    @property
    def wallclock_s(self):
        return self.finished_at - self.started_at

    @property
    def total_cost(self):
        return sum(j.est_cost for j in self.jobs)

    @property
    def exit_code(self):
        return 0 if self.done == self.total else 1

    def averages(self) -> dict:
        out = {}
        for k in METRICS:
            vals = [getattr(j, k) for j in self.jobs if j.state == S.DONE.value
                    and getattr(j, k) is not None]
            out[k] = statistics.fmean(vals) if vals else None
        return out

    def summary(self) -> dict:
        return {"instance_id": self.instance_id, "total": self.total, "done": self.done,
                "failed": self.failed, "wallclock_s": self.wallclock_s,
                "total_cost": self.total_cost, "recovered": self.recovered,
                "stalled": self.stalled, "aborted": self.aborted,
                "dropped_events": self.dropped_events, "averages": self.averages()}

    def table(self) -> str:
        def fmt(v):
            return "-" if v is None else f"{v:.3f}"
        lines = [f"instance {self.instance_id}: {self.done} done, {self.failed} failed, "
                 f"{self.total} total, wallclock {self.wallclock_s:.3f}s, "
                 f"est. cost {self.total_cost:.4f}"]
        if self.recovered:
            lines.append(f"recovered jobs: {self.recovered}")
        if self.stalled:
            lines.append("run stalled: no progress within the stall timeout")
        if self.aborted:
            lines.append(f"run aborted: {self.aborted}")
        avg = self.averages()
        lines.append("averages (done jobs): " + ", ".join(f"{k}={fmt(avg[k])}" for k in METRICS))
        header = f"{'job':<10} {'state':<8} {'att':>3} {'server':<12} " + \
            " ".join(f"{k:>13}" for k in METRICS) + "  reason"
        lines += ["", header]
        for j in self.jobs:
            lines.append(f"{j.job_id:<10} {j.state:<8} {j.attempts:>3} {str(j.server or '-'):<12} "
                         + " ".join(f"{fmt(getattr(j, k)):>13}" for k in METRICS)
                         + (f"  {j.failure_reason}" if j.failure_reason else ""))
        return "\n".join(lines) + "\n"

    def write(self, out_dir):
        os.makedirs(out_dir, exist_ok=True)
        Path(out_dir, "report.txt").write_text(self.table())
        with open(Path(out_dir, "report.jsonl"), "w") as f:
            f.write(json.dumps({"summary": self.summary()}) + "\n")
            for j in self.jobs:
                f.write(json.dumps(dataclasses.asdict(j)) + "\n")


def build_report(store, *, started_at, finished_at, recovered_ids=(), **flags) -> RunReport:
    rec = set(recovered_ids)
    jobs = [job_record(j, j.job_id in rec) for j in store.iter_jobs()]
    return RunReport(store.instance_id, jobs, started_at, finished_at, recovered=len(rec), **flags)


# -- the broker ------------------------------------------------------------------------


def _uses_virtual_clock(services, cfg: RunConfig, sim: Optional[SimGrid]) -> bool:
    computes = [s for s in services if isinstance(s, m.ComputeServer)]
    if not computes or any(s.adapter != "sim" for s in computes):
        return False
    if sim is not None:
        return bool(sim.clock.virtual)
    conf = SimConfig.load(cfg.sim_config) if cfg.sim_config else SimConfig()
    return conf.clock == "virtual"


class Broker:
    def __init__(self, cfg: RunConfig, *, clock=None, sim: Optional[SimGrid] = None,
                 bus: Optional[EventBus] = None):
        self.cfg = cfg
        self.clock = clock
        self.sim = sim
        self.bus = bus or EventBus()
        self.store = None
        self.stalled = False
        self.panic: Optional[BaseException] = None
        self.recovered_ids: list = []
        self.reconciliation = None
        self.rr_cursor = 0
        self.last_tick = None

    # -- startup -------------------------------------------------------------------

    def _pick_clock(self, services):
        if self.clock is not None:
            return
        if self.sim is not None:
            self.clock = self.sim.clock
        else:
            self.clock = VirtualClock() if _uses_virtual_clock(services, self.cfg, None) else RealClock()

    def _adapters(self, services, creds: dict) -> dict:
        out = dict(self.cfg.adapters)
        computes = {s.service_id: s for s in services if isinstance(s, m.ComputeServer)}
        kinds = {s.adapter for s in computes.values()}
        if "local" in kinds and "local" not in out:
            out["local"] = LocalAdapter(self.cfg.workroot or os.path.join(self.cfg.out_dir, "work"))
        if "ssh" in kinds and "ssh" not in out:
            out["ssh"] = SSHAdapter(computes, creds, self.cfg.op_timeout_s)
        if "sim" in kinds and "sim" not in out:
            if self.sim is None:
                conf = SimConfig.load(self.cfg.sim_config) if self.cfg.sim_config else SimConfig()
                self.sim = SimGrid(conf, clock=self.clock, state_path=self.cfg.sim_state)
            out["sim"] = SimAdapter(self.sim)
        return out

    def submit(self, ctx: m.ApplicationContext, services: list, creds: list, *,
               instance_id: Optional[str] = None) -> "RunReport":
        """Start a fresh run and drive it to completion."""
        try:
            self.cfg.validate()
            diags = m.validate_application(ctx, services)
            if diags:
                raise StartupError("invalid application: " + "; ".join(map(str, diags)))
            supplied = {c.cred_id for c in creds}
            missing = [c for c in ctx.credential_ids if c not in supplied]
            if missing:
                raise MissingCredential(f"credentials not supplied: {', '.join(missing)}")
            self._pick_clock(services)
            catalog = ReplicaCatalog.from_services(services)
            # resolve every domain before anything is written
            for t in ctx.tasks:
                for v in t.variables:
                    v.domain(catalog)
            store = self.store = open_store(self.cfg.store_dir, instance_id, sync=self.cfg.sync,
                                            compact_every=self.cfg.compact_every)
            if store.job_count():
                raise StartupError(f"instance {store.instance_id} already holds a run; use recover")
            started = self.clock.now()
            store.put(ctx)
            for s in services:
                store.put(s)
            store.put_config({**self.cfg.snapshot(), "started_at": started})
            seq = 1
            for t in ctx.tasks:
                for job in m.iter_expand(t, catalog, first_seq=seq):
                    store.put(job)
                    seq = job.seq + 1
                    del job
            store.fail_after_writes = self._fault_point(store)
            self._prepare(creds)
        except SimulatedCrash:
            self._abandon()
            raise
        except (BrokerError, ValueError, OSError) as e:
            self._close_quietly()
            if isinstance(e, (StartupError, MissingCredential)):
                raise
            raise StartupError(str(e)) from e
        return self._run()

    def recover(self, instance_id: str, creds: list, **overrides) -> "RunReport":
        """Reopen a crashed or stopped instance and drive it to completion.

        Run settings come from the instance; ``overrides`` replaces some of them.
        """
        try:
            store = self.store = open_store(self.cfg.store_dir, instance_id, sync=self.cfg.sync,
                                            compact_every=self.cfg.compact_every, create=False)
            self.cfg = self.cfg.merged(store.config, store_dir=self.cfg.store_dir, **overrides)
            self.cfg.validate()
            self._pick_clock(store.services())
            self._prepare(creds, recovering=True)
            _, report = recover(store, creds, recon=self._recon, max_attempts=self.cfg.max_attempts,
                                now=self.clock.now(), on_change=self.committer.announce)
            store.fail_after_writes = self._fault_point(store)
        except SimulatedCrash:
            self._abandon()
            raise
        except (BrokerError, ValueError, OSError) as e:
            self._close_quietly()
            if isinstance(e, (StartupError, MissingCredential, NoSuchInstance)):
                raise
            raise StartupError(str(e)) from e
        self.reconciliation = report
        self.recovered_ids = sorted({a.job_id for a in report.actions})
        self.active.members.update(self.store.job_ids(m.IN_FLIGHT | m.PRE_HANDLE))
        return self._run()

    def _fault_point(self, store):
        if self.cfg.fail_after_writes is None:
            return None
        return store.writes + self.cfg.fail_after_writes

    def _recon(self, job: m.Job):
        if job.mapping is None:
            return None
        server = self.store.service(job.mapping.compute_id)
        try:
            return self.execution.reconnoitre(server.adapter, self.execution.workdir_for(job, server))
        except BrokerError as e:
            log.warning("reconnaissance for %s failed: %s", job.job_id, e)
            return None

    def _prepare(self, creds, recovering=False):
        cfg, store = self.cfg, self.store
        self.creds = {c.cred_id: c for c in creds}
        services = store.services()
        adapters = self._adapters(services, self.creds)
        ctx = store.context
        self.ctx = ctx
        self.tasks = {t.task_id: t for t in ctx.tasks}
        self.catalog = ReplicaCatalog.from_services(services)
        self.registry = ServiceRegistry(store)
        self.execution = Execution(adapters, self.clock, instance_id=store.instance_id,
                                   timeout_s=cfg.op_timeout_s)
        self._refresh_world()
        self.runner = TaskRunner(self.clock, cfg.workers)
        os.makedirs(cfg.out_dir, exist_ok=True)
        self.committer = Committer(store, self.bus, self.clock,
                                   log_path=os.path.join(cfg.out_dir, "events.log"))
        mcfg = MonitorConfig(cfg.poll_interval_s, cfg.poll_retries, cfg.probe_interval_s,
                             cfg.max_attempts)
        self.mcfg = mcfg
        self.monitor = JobMonitor(store, self.execution, self.committer, self.runner, self.clock,
                                  mcfg, tasks=self.tasks, out_dir=cfg.out_dir, registry=self.registry)
        discover = None
        if cfg.services_path:
            from .interpreters import load_document, parse_services
            discover = lambda: parse_services(load_document(cfg.services_path, "services"))
        self.svcmon = ServiceMonitor(self.registry, self.execution, self.runner, self.clock,
                                     self.creds, discover)
        self.dispatcher = Dispatcher(store, self.execution, self.committer, self.runner,
                                     services={}, creds=self.creds, staging_mode=cfg.staging_mode,
                                     max_attempts=cfg.max_attempts)
        self.active = ActiveSet(cfg.active_set)
        self.started_at = store.config.get("started_at", self.clock.now())
        q = ctx.qos
        self.deadline_at = self.started_at + q.deadline_s if q.deadline_s else None

    def _refresh_world(self):
        services = self.registry.all()
        self.datahosts = self.registry.datahosts()
        self.links = self.registry.links()
        self.execution.configure(tasks=self.tasks, catalog=self.catalog,
                                 datahosts=self.datahosts, links=self.links)
        return services

    # -- worker steps ------------------------------------------------------------------

    def schedule_once(self):
        """One scheduler/dispatcher pass. Returns the tick result (or None)."""
        store, cfg = self.store, self.cfg
        now = self.clock.now()
        store.next_ready_batch(self.active, load=False)
        ready = [j for j in store.job_ids([S.READY]) if j in self.active]
        if not ready:
            return None
        services = self._refresh_world()
        per_server, per_queue = store.in_flight_by_server()
        view = []
        for s in services:
            if isinstance(s, m.ComputeServer):
                load = {q: n for (sid, q), n in per_queue.items() if sid == s.service_id}
                s = s.replace(in_flight=per_server.get(s.service_id, 0), queue_load=load)
            view.append(s)
        q = self.ctx.qos
        env = SchedulerEnv(
            tasks=self.tasks, catalog=self.catalog, datahosts=self.datahosts, links=self.links,
            bootstrap_s=cfg.bootstrap_s,
            deadline_left=None if self.deadline_at is None else self.deadline_at - now,
            budget_left=None if q.budget is None else q.budget - store.committed_cost(),
            lanes=store.lane_busy(now), penalized_until=dict(self.registry.penalized_until),
            rr_cursor=self.rr_cursor)
        jobs = [store.get_job(j) for j in ready]
        result = schedule_tick(jobs, view, cfg.policy, q, now, env)
        self.rr_cursor = env.rr_cursor
        by_id = {j.job_id: j for j in jobs}
        del jobs
        for mp in result.mappings:
            job = by_id.pop(mp.job_id)
            log.info("mapping job=%s server=%s queue=%s est_duration_s=%.3f est_cost=%.6f",
                     mp.job_id, mp.compute_id, mp.queue, mp.est_duration_s, mp.est_cost)
            self.committer.step(job, m.Event.SCHEDULED, mapping=mp,
                                detail=f"server={mp.compute_id}")
            del job
        by_id.clear()
        self.last_tick = result
        if result.mappings:
            self.dispatcher.services = {s.service_id: s for s in view
                                        if isinstance(s, m.ComputeServer)}
            for o in self.dispatcher.dispatch(result.mappings):
                for link_id, mbps in o.link_samples:
                    if not link_id.startswith("link:*"):
                        self.registry.observe_link(link_id, mbps)
                if not o.ok:
                    self.registry.penalize(o.server_id, self.clock.now() + 2 * cfg.poll_interval_s)
        elif result.infeasible and not sum(store.in_flight_by_server()[0].values()):
            # nothing running can free budget or time: these jobs can never be placed
            for jid, reason in result.infeasible:
                self._finalize(jid, f"infeasible: {reason}")
        return result

    def _finalize(self, job_id, reason):
        job = self.store.get_job(job_id)
        if job.is_terminal:
            return
        if job.state is not S.FAILED:
            job = self.committer.step(job, m.Event.FAILURE, reason=reason)
        self.committer.commit(job, job.replace(terminal=True))

    def _expire(self):
        for jid in self.store.job_ids():
            if not self.store.is_terminal(jid):
                self._finalize(jid, "deadline expired")

    # -- loops ---------------------------------------------------------------------

    def _run(self) -> RunReport:
        try:
            if self.clock.virtual:
                self._loop_virtual()
            else:
                self._loop_threaded()
        except SimulatedCrash:
            self._abandon()
            raise
        except Exception as e:  # persist what we have and leave a recoverable store
            log.exception("broker worker failed")
            self.panic = e
        if isinstance(self.panic, SimulatedCrash):
            self._abandon()
            raise self.panic
        finished = self.clock.now()
        self.bus.flush()
        report = build_report(self.store, started_at=self.started_at, finished_at=finished,
                              recovered_ids=self.recovered_ids, stalled=self.stalled,
                              aborted=repr(self.panic) if self.panic else None,
                              dropped_events=self.bus.dropped)
        report.write(self.cfg.out_dir)
        self.committer.close()
        self.store.close()
        if self.sim is not None:
            self.sim.save_clock()
        return report

    def _progress_check(self, state):
        """Track the last time any job changed; flag a stall past the timeout."""
        now = self.clock.now()
        if self.committer.changes != state["changes"]:
            state["changes"], state["at"] = self.committer.changes, now
        elif now - state["at"] >= self.cfg.stall_timeout_s:
            self.stalled = True
        return self.stalled

    def _loop_virtual(self):
        clock, cfg = self.clock, self.cfg
        progress = {"changes": self.committer.changes, "at": clock.now()}
        svc_due = sched_due = clock.now()
        while not self.store.all_terminal():
            now = clock.now()
            if self.deadline_at is not None and now >= self.deadline_at - EPS:
                self._expire()
                break
            if self._progress_check(progress):
                break
            if svc_due <= now + EPS:
                self.svcmon.tick()
                svc_due = now + self.mcfg.probe_interval
            freed = False
            nd = self.monitor.next_due()
            if nd is not None and nd <= clock.now() + EPS:
                freed = any(r.freed for r in self.monitor.tick())
            if freed or sched_due <= clock.now() + EPS:
                self.schedule_once()
                sched_due = clock.now() + cfg.poll_interval_s
            if self.store.all_terminal():
                break
            candidates = [svc_due, sched_due, self.monitor.next_due(), self.deadline_at,
                          progress["at"] + cfg.stall_timeout_s]
            clock.advance_to(min(c for c in candidates if c is not None))

    def _loop_threaded(self):
        cfg = self.cfg
        stop = threading.Event()
        wake = threading.Event()

        def guarded(fn):
            def run():
                try:
                    fn()
                except BaseException as e:
                    log.exception("worker %s failed", threading.current_thread().name)
                    self.panic = e
                    stop.set()
            return run

        def scheduler():
            while not stop.is_set():
                self.schedule_once()
                wake.wait(cfg.poll_interval_s)
                wake.clear()

        def job_monitor():
            while not stop.is_set():
                nd = self.monitor.next_due()
                delay = 0.5 if nd is None else nd - self.clock.now()
                if delay > 0:
                    stop.wait(min(delay, 0.5))
                    continue
                if any(r.freed for r in self.monitor.tick()):
                    wake.set()

        def service_monitor():
            while not stop.wait(self.mcfg.probe_interval):
                self.svcmon.tick()

        self.svcmon.tick()
        threads = [threading.Thread(target=guarded(f), name=f.__name__, daemon=True)
                   for f in (scheduler, job_monitor, service_monitor)]
        for t in threads:
            t.start()
        progress = {"changes": self.committer.changes, "at": self.clock.now()}
        expired = False
        while not stop.is_set():
            if self.store.all_terminal():
                break
            if self.deadline_at is not None and self.clock.now() >= self.deadline_at:
                expired = True
                break
            if self._progress_check(progress):
                break
            stop.wait(0.05)
        stop.set()
        wake.set()
        for t in threads:
            t.join(cfg.shutdown_grace_s)
            if t.is_alive():
                log.warning("worker %s did not stop in time; abandoning its tasks", t.name)
        if expired and self.panic is None:
            self._expire()

    # -- teardown --------------------------------------------------------------------

    def _abandon(self):
        if self.store is not None:
            self.store.abandon()
        if getattr(self, "committer", None) is not None:
            self.committer.close()

    def _close_quietly(self):
        if self.store is not None:
            try:
                self.store.close()
            except BrokerError:
                self.store.abandon()


# -- module-level operations ------------------------------------------------------------


def run(app: m.ApplicationContext, services: list, creds: list, cfg: RunConfig, **kw) -> RunReport:
    """Run an application to completion; see ``Broker`` for keyword arguments."""
    instance_id = kw.pop("instance_id", None)
    return Broker(cfg, **kw).submit(app, services, creds, instance_id=instance_id)


def recover_cli(store_dir, instance_id: str, creds: list, cfg: Optional[RunConfig] = None,
                *, broker_kw=None, **overrides) -> RunReport:
    """Recover an instance; ``overrides`` replace stored run settings (e.g. out_dir)."""
    cfg = dataclasses.replace(cfg or RunConfig(), store_dir=str(store_dir))
    return Broker(cfg, **(broker_kw or {})).recover(instance_id, creds, **overrides)


def status(store_dir, instance_id: str) -> str:
    """Text snapshot of an instance; safe to call while a broker is running it."""
    store = open_store(store_dir, instance_id, read_only=True)
    try:
        counts = store.state_counts()
        total = store.job_count()
        per_server, _ = store.in_flight_by_server()
        attempts = Counter(store.job_meta(j).attempts for j in store.job_ids(sort=False))
        lines = [f"instance {instance_id}: {total} jobs"]
        for state in [s.value for s in S] + ["FAILED(retrying)"]:
            if counts.get(state):
                lines.append(f"  {state:<17}{counts[state]:>7}")
        lines.append("servers:")
        for s in sorted((s for s in store.services() if isinstance(s, m.ComputeServer)),
                        key=lambda s: s.service_id):
            avail = "up" if s.available else "down"
            lines.append(f"  {s.service_id:<15} {avail:<5} in_flight {per_server.get(s.service_id, 0)}"
                         f"/{s.slots}")
        lines.append("attempts:")
        for k in sorted(attempts):
            lines.append(f"  {k:>3}: {attempts[k]}")
        return "\n".join(lines) + "\n"
    finally:
        store.close()
