"""Benchmark harness: synthetic job profiles and per-job broker metrics.

Metrics per job, all in seconds:

* submission: from the mapping decision to the handle being obtained
  (includes stage-in)
* querying: summed duration of every status poll
* termination: stage-out plus cleanup
* wallclock: from submission to completion
"""

from __future__ import annotations

import os
import statistics
import tempfile
from dataclasses import dataclass
from typing import Optional

from . import model as m
from .broker import METRICS, RunConfig, RunReport, run
from .clock import RealClock
from .events import parse_event_line
from .execution.local import LocalAdapter
from .execution.sim import Dist, SimConfig, SimGrid

S = m.JobState


@dataclass(frozen=True)
class BenchProfile:
    name: str
    job_length_s: float
    io_mb: float


PROFILES = {
    "simple": BenchProfile("simple", 30.0, 0.001),
    "data": BenchProfile("data", 300.0, 100.0),
    "compute": BenchProfile("compute", 600.0, 0.001),
}

# the data profile's input crosses this link; stage-in is io_mb / LINK_MBPS seconds
LINK_MBPS = 10.0
SERVER = "bench"
DATAHOST = "store"


def stage_in_s(profile: BenchProfile) -> float:
    return profile.io_mb / LINK_MBPS if profile.name == "data" else 0.0


def application(profile: BenchProfile, n_jobs: int, job_cmd: str,
                results_dir: str = "results") -> m.ApplicationContext:
    commands = []
    if profile.name == "data":
        commands.append(m.Copy(f"datahost:{DATAHOST}:input.dat", "remote:input.dat"))
    commands += [m.Execute(job_cmd),
                 m.Copy("remote:out_$i.txt", f"local:{results_dir}/out_$i.txt")]
    task = m.Task("t", tuple(commands), (m.Variable("i", "integer", 1, n_jobs, 1),),
                  ("out_$i.txt",))
    return m.ApplicationContext(f"bench-{profile.name}", f"bench {profile.name}", tasks=(task,))


def services(profile: BenchProfile, n_jobs: int, adapter: str, input_path: str) -> list:
    size = int(profile.io_mb * 1e6)
    return [
        m.ComputeServer(SERVER, f"{adapter}://{SERVER}", adapter=adapter, slots=max(1, n_jobs)),
        m.DataHost(DATAHOST, "file://", files=(m.CatalogFile("input.dat", input_path, size),)),
        m.NetworkLink(SERVER, DATAHOST, LINK_MBPS),
    ]


def sim_config(profile: BenchProfile, seed: int) -> SimConfig:
    return SimConfig(seed=seed, run_time_s=Dist("constant", profile.job_length_s),
                     submit_latency_s=Dist("constant", 1.0),
                     poll_latency_s=Dist("constant", 0.2),
                     stage_out_latency_s=Dist("constant", 1.0),
                     cleanup_latency_s=Dist("constant", 0.5))


@dataclass
class BenchResult:
    profile: BenchProfile
    report: RunReport
    rows: list  # one dict of metrics per DONE job

    def averages(self) -> dict:
        out = {}
        for k in METRICS:
            vals = [r[k] for r in self.rows if r[k] is not None]
            out[k] = statistics.fmean(vals) if vals else None
        return out

    def table(self) -> str:
        lines = [f"profile {self.profile.name}: {len(self.rows)} jobs "
                 f"(length {self.profile.job_length_s:g}s, io {self.profile.io_mb:g} MB)",
                 f"{'metric':<14}{'mean':>10}{'min':>10}{'max':>10}"]
        for k in METRICS:
            vals = [r[k] for r in self.rows if r[k] is not None]
            if vals:
                lines.append(f"{k:<14}{statistics.fmean(vals):>10.3f}{min(vals):>10.3f}"
                             f"{max(vals):>10.3f}")
            else:
                lines.append(f"{k:<14}{'-':>10}{'-':>10}{'-':>10}")
        return "\n".join(lines) + "\n"


def metrics_from_log(path: str, querying: dict) -> list:
    """Per-job metrics from the structured event log plus summed poll time."""
    stamps: dict[str, dict] = {}
    with open(path, encoding="utf-8") as f:
        for line in f:
            ev = parse_event_line(line)
            if ev is None:
                continue
            # a retried job keeps only its last attempt's timestamps
            if ev.new_state == S.READY.value:
                stamps.pop(ev.job_id, None)
                continue
            stamps.setdefault(ev.job_id, {})[ev.new_state] = ev.at
    rows = []
    for jid, t in sorted(stamps.items(), key=lambda kv: int(kv[0].lstrip("j") or 0)):
        if S.DONE.value not in t:
            continue
        span = lambda a, b: t[b.value] - t[a.value] if a.value in t and b.value in t else None
        rows.append({"job_id": jid,
                     "submission_s": span(S.SCHEDULED, S.SUBMITTED),
                     "querying_s": querying.get(jid, 0.0),
                     "termination_s": span(S.STAGE_OUT, S.DONE),
                     "wallclock_s": span(S.SUBMITTED, S.DONE)})
    return rows


def bench(profile, n_jobs: int = 50, adapter: str = "sim", cfg: Optional[RunConfig] = None, *,
          seed: int = 0, time_scale: float = 0.01, workdir: Optional[str] = None) -> BenchResult:
    """Run ``n_jobs`` synthetic jobs of ``profile`` and collect their metrics.

    The sim adapter runs on a virtual clock. The local adapter runs real
    processes, with job length and input size multiplied by ``time_scale``.
    """
    if isinstance(profile, str):
        profile = PROFILES[profile]
    if n_jobs <= 0:
        raise ValueError("n_jobs must be positive")
    base = workdir or tempfile.mkdtemp(prefix=f"bench-{profile.name}-")
    os.makedirs(base, exist_ok=True)
    cfg = cfg or RunConfig(policy="round_robin", active_set=max(100, n_jobs), sync=False)
    cfg.out_dir = os.path.join(base, "out")
    cfg.store_dir = os.path.join(base, "store")
    input_path = os.path.join(base, "input.dat")
    results = os.path.join(base, "results")
    kw = {}
    if adapter == "sim":
        if profile.name == "data":
            open(input_path, "wb").close()  # the sim only needs the declared size
        sim = SimGrid(sim_config(profile, seed))
        kw["sim"] = sim
        app = application(profile, n_jobs, "./app $i", results)
        svcs = services(profile, n_jobs, "sim", input_path)
    elif adapter == "local":
        scaled = BenchProfile(profile.name, profile.job_length_s * time_scale,
                              profile.io_mb * time_scale)
        if profile.name == "data":
            with open(input_path, "wb") as f:
                f.truncate(int(scaled.io_mb * 1e6))
        cfg.workroot = os.path.join(base, "work")
        cfg.poll_interval_s = max(0.05, cfg.poll_interval_s * time_scale)
        cfg.adapters = {**cfg.adapters, "local": LocalAdapter(cfg.workroot)}
        kw["clock"] = RealClock()
        cmd = f"sh -c 'sleep {scaled.job_length_s:g}; echo $i > out_$i.txt'"
        app = application(scaled, n_jobs, cmd, results)
        svcs = services(scaled, n_jobs, "local", input_path)
    else:
        raise ValueError(f"unknown bench adapter {adapter!r}")
    report = run(app, svcs, [], cfg, **kw)
    querying = {j.job_id: j.querying_s for j in report.jobs}
    rows = metrics_from_log(os.path.join(cfg.out_dir, "events.log"), querying)
    return BenchResult(profile, report, rows)
