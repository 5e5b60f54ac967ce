"""Mapping ready jobs to services, and dispatching the mappings.

A tick plans over the whole ready batch, then admits only what fits in the
servers' free slots right now; the rest is deferred to a later tick. The
deadline/budget policies therefore see the full batch when they decide
where jobs should go, while admission never exceeds ``slots``.
"""

from __future__ import annotations

import bisect
import enum
import heapq
import logging
import os
from dataclasses import dataclass, field
from typing import Iterable, Optional

from . import model as m
from .errors import (
    ExecutionError,
    NoFittingQueue,
    NoReplica,
    SubmitTimeout,
    UnboundVariable,
    UnsupportedAdapter,
)
from .execution import link_observations

log = logging.getLogger(__name__)

DEFAULT_BOOTSTRAP_S = 60.0
EPS = 1e-9


class PolicyKind(str, enum.Enum):
    ROUND_ROBIN = "round_robin"
    COST_DBC = "cost_dbc"
    TIME_DBC = "time_dbc"
    DATA_AWARE = "data_aware"

    @classmethod
    def parse(cls, text) -> "PolicyKind":
        if isinstance(text, cls):
            return text
        aliases = {"cost": cls.COST_DBC, "time": cls.TIME_DBC, "rr": cls.ROUND_ROBIN}
        return aliases.get(text) or cls(text)

    def __str__(self):
        return self.value


@dataclass
class ScheduleTickResult:
    mappings: list = field(default_factory=list)
    deferred: list = field(default_factory=list)
    infeasible: list = field(default_factory=list)  # (job_id, reason)
    # planned server for every job the policy placed, admitted or not
    plan: dict = field(default_factory=dict)


@dataclass(frozen=True)
class InputFile:
    name: str
    size_bytes: int
    link: m.NetworkLink
    price_per_mb: float = 0.0

    @property
    def size_mb(self):
        return self.size_bytes / 1e6


@dataclass
class SchedulerEnv:
    """What a tick needs to know beyond the jobs and services."""

    tasks: dict = field(default_factory=dict)
    catalog: object = None
    datahosts: dict = field(default_factory=dict)
    links: m.LinkTable = field(default_factory=m.LinkTable)
    bootstrap_s: float = DEFAULT_BOOTSTRAP_S
    deadline_left: Optional[float] = None
    budget_left: Optional[float] = None
    # server id -> remaining seconds of each slot-holding job
    lanes: dict = field(default_factory=dict)
    penalized_until: dict = field(default_factory=dict)
    rr_cursor: int = 0


# -- replica and queue selection ---------------------------------------------------


def _replica_fields(r):
    if isinstance(r, tuple):
        return r[0], r[1]
    return r.datahost_id, r.size_bytes


def select_data_hosts(job: m.Job, replicas: dict, links, economy: bool = False, *,
                      source: str = "broker", prices: Optional[dict] = None) -> dict:
    """Pick one data host per logical file.

    Time mode minimizes size / effective bandwidth of the link from
    ``source`` to the host. Economy mode minimizes size * (host price per MB
    + link cost per MB), then transfer time. Remaining ties go to the
    smallest host id.
    """
    prices = prices or {}
    out = {}
    for name in sorted(replicas):
        reps = replicas[name]
        if not reps:
            raise NoReplica(name)
        best_key, best = None, None
        for r in reps:
            dh, size = _replica_fields(r)
            link = links.get(source, dh)
            mb = size / 1e6
            t = mb / link.effective_mbps
            if economy:
                key = (mb * (prices.get(dh, 0.0) + link.cost_per_mb), t, dh)
            else:
                key = (t, dh)
            if best_key is None or key < best_key:
                best_key, best = key, dh
        out[name] = best
    return out


def select_queue(job: m.Job, server: m.ComputeServer, est_duration_s: float, *,
                 pinned: Optional[str] = None, load: Optional[dict] = None) -> Optional[str]:
    """Smallest-walltime queue that fits the estimate and has a free slot."""
    if not server.queues:
        return None
    if pinned:
        if any(q.name == pinned for q in server.queues):
            return pinned
        raise NoFittingQueue(f"server {server.service_id} has no queue {pinned!r}")
    load = load if load is not None else server.queue_load
    fitting = sorted((q for q in server.queues
                      if q.max_wallclock_s >= est_duration_s and load.get(q.name, 0) < q.slots),
                     key=lambda q: (q.max_wallclock_s, q.name))
    if not fitting:
        raise NoFittingQueue(f"no queue on {server.service_id} fits {est_duration_s:.0f}s")
    return fitting[0].name


# -- estimates -----------------------------------------------------------------


def compute_time(server: m.ComputeServer, bootstrap_s: float = DEFAULT_BOOTSTRAP_S) -> float:
    if server.completed >= 1 and server.observed_rate:
        return 1.0 / server.observed_rate
    return bootstrap_s


def estimate(job: m.Job, server: m.ComputeServer, links=None, inputs: Iterable[InputFile] = (),
             bootstrap_s: float = DEFAULT_BOOTSTRAP_S) -> tuple[float, float]:
    """(est_duration_s, est_cost) of running ``job`` on ``server``."""
    inputs = list(inputs)
    stage = sum(f.size_mb / f.link.effective_mbps for f in inputs)
    compute = compute_time(server, bootstrap_s)
    cost = compute * server.price_per_cpu_s + sum(
        f.size_mb * (f.price_per_mb + f.link.cost_per_mb) for f in inputs)
    return stage + compute, cost


def observe_duration(server: m.ComputeServer, seconds: float, alpha: float = 0.5) -> m.ComputeServer:
    """Fold one measured compute duration into the server's rate estimate."""
    seconds = max(seconds, 1e-6)
    prev = 1.0 / server.observed_rate if server.observed_rate else seconds
    mean = alpha * seconds + (1 - alpha) * prev
    return server.replace(observed_rate=1.0 / mean, completed=server.completed + 1)


def job_inputs(job: m.Job, task: m.Task, server_id: str, selection: dict, env: SchedulerEnv):
    """Input files the job will stage onto ``server_id``, with their links."""
    out = []
    for value in job.bindings.values():
        if isinstance(value, m.GridFile):
            dh = selection[value.logical_name]
            rep = env.catalog.replica(value.logical_name, dh)
            host = env.datahosts.get(dh)
            out.append(InputFile(value.staged_name, rep.size_bytes, env.links.get(server_id, dh),
                                 host.price_per_mb if host else 0.0))
    for c in task.commands:
        if not isinstance(c, m.Copy):
            continue
        src = m.Endpoint.parse(m.substitute(c.source, job.bindings, job.job_id))
        dst = m.Endpoint.parse(m.substitute(c.dest, job.bindings, job.job_id))
        if dst.kind != "remote":
            continue
        if src.kind == "local":
            size = os.path.getsize(src.path) if os.path.isfile(src.path) else 0
            out.append(InputFile(dst.path, size, env.links.get("broker", server_id)))
        elif src.kind == "datahost":
            host = env.datahosts.get(src.host)
            known = host.lookup(src.path) if host else None
            out.append(InputFile(dst.path, known.size_bytes if known else 0,
                                 env.links.get(server_id, src.host),
                                 host.price_per_mb if host else 0.0))
    return out


# -- per (job, server) options -------------------------------------------------------


@dataclass(frozen=True)
class Option:
    server_id: str
    selection: dict
    duration: float
    cost: float


def qualifies(task: m.Task, server: m.ComputeServer) -> bool:
    req = task.requirements or {}
    for key in ("architecture", "os"):
        want = req.get(key)
        if want:
            have = server.attributes.get(key) or getattr(server, key)
            if str(have).lower() != str(want).lower():
                return False
    pinned = req.get("queue")
    if pinned and not any(q.name == pinned for q in server.queues):
        return False
    return True


def job_options(job: m.Job, servers: list, env: SchedulerEnv, economy: bool) -> list[Option]:
    task = env.tasks[job.task_id]
    files = {v.logical_name for v in job.bindings.values() if isinstance(v, m.GridFile)}
    prices = {k: h.price_per_mb for k, h in env.datahosts.items()}
    out = []
    for s in servers:
        if not qualifies(task, s):
            continue
        try:
            replicas = {n: env.catalog.replicas(n) if env.catalog else [] for n in files}
            sel = select_data_hosts(job, replicas, env.links, economy, source=s.service_id,
                                    prices=prices)
            inputs = job_inputs(job, task, s.service_id, sel, env)
        except (NoReplica, KeyError, UnboundVariable) as e:
            log.debug("job %s cannot use %s: %s", job.job_id, s.service_id, e)
            continue
        dur, cost = estimate(job, s, env.links, inputs, env.bootstrap_s)
        out.append(Option(s.service_id, sel, dur, cost))
    return out


# -- planning ------------------------------------------------------------------


def _lanes(server: m.ComputeServer, env: SchedulerEnv) -> list:
    busy = sorted(env.lanes.get(server.service_id, ()))[:server.slots]
    lanes = busy + [0.0] * (server.slots - len(busy))
    heapq.heapify(lanes)
    return lanes


def list_schedule(order: list, options: dict, servers: list, env: SchedulerEnv,
                  horizon: Optional[float], budget: Optional[float]):
    """Greedy list schedule: each job, in order, takes its cheapest option that
    still finishes within ``horizon`` and keeps the total within ``budget``.

    Returns (plan, infeasible, makespan, cost).
    """
    lanes = {s.service_id: _lanes(s, env) for s in servers}
    plan, infeasible = {}, []
    spent, makespan = 0.0, 0.0
    for jid in order:
        best, best_key, blocked = None, None, "budget"
        for o in options[jid]:
            finish = lanes[o.server_id][0] + o.duration
            if horizon is not None and finish > horizon + EPS:
                blocked = "deadline"
                continue
            if budget is not None and spent + o.cost > budget + EPS:
                continue
            key = (o.cost, finish, o.server_id)
            if best_key is None or key < best_key:
                best, best_key = o, key
        if best is None:
            infeasible.append((jid, f"{blocked} cannot be met"))
            continue
        finish = best_key[1]
        heapq.heapreplace(lanes[best.server_id], finish)
        plan[jid] = best
        spent += best.cost
        makespan = max(makespan, finish)
    return plan, infeasible, makespan, spent


def _makespan_candidates(order, options, servers, env, limit=20000):
    n = len(order)
    by_server: dict[str, set] = {}
    for jid in order:
        for o in options[jid]:
            by_server.setdefault(o.server_id, set()).add(o.duration)
    cands = set()
    for s in servers:
        durs = by_server.get(s.service_id)
        if not durs:
            continue
        starts = set(_lanes(s, env))
        if len(starts) * len(durs) * n > limit:
            return None
        # with equal-length jobs a lane's finish times are start + k * d
        for r in starts:
            for d in durs:
                cands.update(r + k * d for k in range(1, n + 1))
    return sorted(cands)


def plan_cost(order, options, servers, env):
    """Minimize cost subject to the deadline (and the budget)."""
    return list_schedule(order, options, servers, env, env.deadline_left, env.budget_left)


def plan_time(order, options, servers, env):
    """Minimize makespan subject to the budget (and the deadline).

    Searches for the smallest makespan T at which the cost-greedy schedule
    places every job within budget; that schedule is then used. On
    equal-length jobs the candidate makespans are exactly the lane finish
    times, so the search is exact there.
    """
    def attempt(T):
        horizon = T if env.deadline_left is None else min(T, env.deadline_left)
        return list_schedule(order, options, servers, env, horizon, env.budget_left)

    fallback = list_schedule(order, options, servers, env, env.deadline_left, env.budget_left)
    if fallback[1] or not order:
        return fallback
    cands = _makespan_candidates(order, options, servers, env)
    if cands is not None:
        if env.deadline_left is not None:
            cands = cands[:bisect.bisect_right(cands, env.deadline_left + EPS)]
        lo, hi, best = 0, len(cands) - 1, None
        while lo <= hi:
            mid = (lo + hi) // 2
            res = attempt(cands[mid])
            if not res[1]:
                best, hi = res, mid - 1
            else:
                lo = mid + 1
        return best or fallback
    # general case: bisection on a continuous horizon
    lo, hi, best = 0.0, fallback[2], fallback
    for _ in range(60):
        mid = (lo + hi) / 2
        res = attempt(mid)
        if not res[1]:
            best, hi = res, mid
        else:
            lo = mid
    return best


def schedule_tick(jobs: list, services: list, policy, qos: m.QoS, now: float,
                  env: SchedulerEnv) -> ScheduleTickResult:
    """Map a batch of READY jobs onto available compute servers.

    Jobs are not transitioned here; the caller commits READY -> SCHEDULED
    for each returned mapping.
    """
    policy = PolicyKind.parse(policy)
    result = ScheduleTickResult()
    servers = sorted((s for s in services if isinstance(s, m.ComputeServer) and s.available
                      and env.penalized_until.get(s.service_id, float("-inf")) <= now),
                     key=lambda s: s.service_id)
    jobs = sorted(jobs, key=lambda j: (j.seq, j.job_id))
    if not servers:
        result.deferred = [j.job_id for j in jobs]
        return result
    by_id = {s.service_id: s for s in servers}
    free = {s.service_id: max(0, s.slots - s.in_flight) for s in servers}
    qload = {s.service_id: dict(s.queue_load) for s in servers}
    economy = policy is PolicyKind.COST_DBC or qos.optimization == "cost"
    if policy is PolicyKind.TIME_DBC:
        economy = False
    options = {j.job_id: job_options(j, servers, env, economy) for j in jobs}
    jobs_by_id = {j.job_id: j for j in jobs}

    def admit(jid, o: Option) -> bool:
        if free[o.server_id] <= 0:
            return False
        job = jobs_by_id[jid]
        pinned = env.tasks[job.task_id].requirements.get("queue")
        try:
            q = select_queue(job, by_id[o.server_id], o.duration, pinned=pinned,
                             load=qload[o.server_id])
        except NoFittingQueue:
            return False
        free[o.server_id] -= 1
        if q:
            qload[o.server_id][q] = qload[o.server_id].get(q, 0) + 1
        result.mappings.append(m.Mapping(jid, o.server_id, q, dict(o.selection), o.cost, o.duration))
        return True

    order = [j.job_id for j in jobs]
    if policy in (PolicyKind.COST_DBC, PolicyKind.TIME_DBC):
        planner = plan_cost if policy is PolicyKind.COST_DBC else plan_time
        plan, infeasible, _, _ = planner([j for j in order if options[j]], options, servers, env)
        result.plan = {jid: o.server_id for jid, o in plan.items()}
        result.infeasible = list(infeasible)
        for jid in order:
            if not options[jid]:
                result.deferred.append(jid)
            elif jid in plan and not admit(jid, plan[jid]):
                result.deferred.append(jid)
    elif policy is PolicyKind.DATA_AWARE:
        for jid in order:
            ranked = sorted(options[jid], key=lambda o: (o.duration, o.cost, o.server_id))
            if not any(admit(jid, o) for o in ranked):
                result.deferred.append(jid)
            else:
                result.plan[jid] = result.mappings[-1].compute_id
    else:
        ids = [s.service_id for s in servers]
        n = len(ids)
        for jid in order:
            opts = {o.server_id: o for o in options[jid]}
            for i in range(n):
                sid = ids[(env.rr_cursor + i) % n]
                if sid in opts and admit(jid, opts[sid]):
                    env.rr_cursor = (env.rr_cursor + i + 1) % n
                    result.plan[jid] = sid
                    break
            else:
                result.deferred.append(jid)
    return result


# -- dispatch --------------------------------------------------------------------


@dataclass
class DispatchOutcome:
    job_id: str
    server_id: str
    state: str
    error: Optional[str] = None
    link_samples: list = field(default_factory=list)

    @property
    def ok(self):
        return self.error is None


class Dispatcher:
    """Drives each mapping through wrapper creation, stage-in and submission.

    One transient task per job; a failure affects only its own job.
    """

    def __init__(self, store, execution, committer, runner, *, services: dict, creds: dict,
                 staging_mode: str = "push", max_attempts: int = m.DEFAULT_MAX_ATTEMPTS):
        self.store = store
        self.execution = execution
        self.committer = committer
        self.runner = runner
        self.services = services
        self.creds = creds
        self.staging_mode = staging_mode
        self.max_attempts = max_attempts

    def dispatch(self, mappings: list) -> list[DispatchOutcome]:
        outs = self.runner.run_all(self._one, mappings)
        results = []
        for o in outs:
            if o.error is not None:
                # an unexpected bug in one task; the job keeps its state for recovery
                log.error("dispatch of %s crashed: %r", o.item.job_id, o.error)
                results.append(DispatchOutcome(o.item.job_id, o.item.compute_id, "?",
                                               f"internal error: {o.error!r}"))
            else:
                results.append(o.value)
        return results

    def _one(self, mp: m.Mapping) -> DispatchOutcome:
        c = self.committer
        job = self.store.get_job(mp.job_id)
        server = self.services[mp.compute_id]
        cred = self.creds.get(server.credential_id) if server.credential_id else None
        try:
            w = self.execution.make_wrapper(job, mp, server, cred)
        except (UnboundVariable, UnsupportedAdapter, NoReplica, KeyError) as e:
            job = c.fail(job, f"wrapper: {e}", self.max_attempts)
            return DispatchOutcome(mp.job_id, mp.compute_id, job.state.value, str(e))
        job = c.step(job, m.Event.STAGE_IN_STARTED)
        samples = []
        try:
            manifest = self.execution.stage_in(w, server.staging or self.staging_mode)
            samples = link_observations(manifest)
            # the intent record makes a lost submit reply recoverable without resubmitting
            job = c.commit(job, job.replace(submit_intent=job.attempts))
            try:
                handle = self.execution.submit(w, mp.queue)
            except SubmitTimeout:
                handle = self.execution.reconnoitre(server.adapter, w.remote_workdir)
                if handle is None:
                    raise
            job = c.step(job, m.Event.HANDLE_OBTAINED, handle=handle)
        except ExecutionError as e:
            reason = f"{type(e).__name__}: {e}"
            job = c.fail(job, reason, self.max_attempts)
            return DispatchOutcome(mp.job_id, mp.compute_id, job.state.value, reason, samples)
        return DispatchOutcome(mp.job_id, mp.compute_id, job.state.value, None, samples)


def dispatch(mappings: list, execution, **kw) -> list[DispatchOutcome]:
    """Functional form of ``Dispatcher.dispatch``; see its keyword arguments."""
    store, committer, runner = kw.pop("store"), kw.pop("committer"), kw.pop("runner")
    return Dispatcher(store, execution, committer, runner, **kw).dispatch(mappings)
