"""Builders shared by the test modules."""

import dataclasses
import os

from gridbroker import model as m
from gridbroker.broker import Broker, RunConfig
from gridbroker.clock import TaskRunner, VirtualClock
from gridbroker.events import Committer, EventBus
from gridbroker.execution import Execution
from gridbroker.execution.sim import Dist, SimAdapter, SimConfig, SimGrid
from gridbroker.monitoring import (
    JobMonitor,
    MonitorConfig,
    ServiceRegistry,
    monitor_tick,
    register_listener,
)
from gridbroker.store import open_store

E = m.Event


def sweep_task(n=3, *, cmd="./app $i", outputs=("out_$i.txt",), commands=None, task_id="t",
               requirements=None):
    variables = (m.Variable("i", "integer", 1, n, 1),) if n else ()
    commands = commands if commands is not None else (m.Execute(cmd),)
    return m.Task(task_id, tuple(commands), variables, tuple(outputs), requirements or {})


def app(task=None, *, qos=m.QoS(), creds=()):
    task = task or sweep_task()
    return m.ApplicationContext("app", "app", qos, tuple(creds), (task,))


def sim_servers(*specs):
    """specs: (id, slots) or (id, slots, price_per_cpu_s)."""
    out = []
    for spec in specs or (("s1", 4),):
        sid, slots, *rest = spec
        out.append(m.ComputeServer(sid, f"sim://{sid}", adapter="sim", slots=slots,
                                   price_per_cpu_s=rest[0] if rest else 0.0))
    return out


def sim_config(**kw):
    kw.setdefault("run_time_s", Dist("constant", 30.0))
    return SimConfig(**kw)


def sim_grid(state_path=None, **kw):
    return SimGrid(sim_config(**kw), VirtualClock(), state_path)


def run_config(tmp, **kw):
    kw.setdefault("sync", False)
    return RunConfig(out_dir=os.path.join(tmp, "out"), store_dir=os.path.join(tmp, "store"), **kw)


def run_sim(tmp, ctx, services, *, grid=None, creds=(), instance_id=None, **cfg):
    grid = grid or sim_grid()
    b = Broker(run_config(str(tmp), **cfg), sim=grid)
    return b.submit(ctx, list(services), list(creds), instance_id=instance_id), grid, b


def replace(obj, **kw):
    return dataclasses.replace(obj, **kw)


class Rig:
    """A store, a sim grid and a job monitor wired together by hand."""

    def __init__(self, tmp_path, n=1, task=None, poll_retries=3, max_attempts=3, **grid_kw):
        self.task = task or sweep_task(n)
        grid_kw.setdefault("submit_latency_s", Dist("constant", 0.0))
        grid_kw.setdefault("poll_latency_s", Dist("constant", 0.0))
        self.grid = sim_grid(**grid_kw)
        self.clock = self.grid.clock
        self.store = open_store(tmp_path / "store", "i1", sync=False)
        self.store.put(app(self.task))
        self.server = sim_servers()[0]
        self.store.put(self.server)
        for j in m.expand_task(self.task):
            self.store.put(j)
        self.bus = EventBus()
        self.sub = register_listener(self.bus)
        self.committer = Committer(self.store, self.bus, self.clock)
        self.execution = Execution({"sim": SimAdapter(self.grid)}, self.clock, instance_id="i1")
        self.execution.configure(tasks={self.task.task_id: self.task})
        self.registry = ServiceRegistry(self.store)
        self.cfg = MonitorConfig(12.0, poll_retries, max_attempts=max_attempts)
        self.monitor = JobMonitor(self.store, self.execution, self.committer,
                                  TaskRunner(self.clock), self.clock, self.cfg,
                                  tasks={self.task.task_id: self.task},
                                  out_dir=str(tmp_path / "out"), registry=self.registry)

    def dispatch(self, jid):
        c = self.committer
        job = self.store.get_job(jid)
        mp = m.Mapping(jid, self.server.service_id)
        job = c.step(job, E.SCHEDULED, mapping=mp)
        job = c.step(job, E.STAGE_IN_STARTED)
        w = self.execution.make_wrapper(job, mp, self.server)
        self.execution.stage_in(w)
        h = self.execution.submit(w)
        return c.step(job, E.HANDLE_OBTAINED, handle=h)

    def job(self, jid="j1"):
        return self.store.get_job(jid)

    def tick_at(self, t):
        self.clock.advance_to(t)
        return monitor_tick(self.monitor)
