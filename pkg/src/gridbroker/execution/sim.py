"""Simulated middleware for deterministic tests and benchmarks.

``SimGrid`` is the "remote world": it accepts submissions, models queue
wait and run time, and fabricates outputs. It outlives any single broker
incarnation, which is what makes crash/recover tests meaningful, and it can
persist itself to a JSON file for cross-process runs.

Every random draw comes from an RNG seeded with (seed, phase, job, attempt),
so outcomes do not depend on the order in which operations happen.
"""

from __future__ import annotations

import fnmatch
import json
import logging
import os
import random
import threading
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import yaml

from .. import model as m
from ..clock import RealClock, VirtualClock
from ..errors import (
    CleanupFailed,
    PollFailed,
    ProbeFailed,
    RetrieveFailed,
    SubmitFailed,
    TransferFailed,
)
from . import base as b

log = logging.getLogger(__name__)

PHASES = ("submit", "stage_in", "run", "poll", "stage_out", "cleanup", "probe",
          "missing_output", "submit_timeout")


@dataclass(frozen=True)
class Dist:
    """constant | uniform(a, b) | exp(mean)"""

    kind: str = "constant"
    a: float = 0.0
    b: float = 0.0

    def sample(self, rng: random.Random) -> float:
        if self.kind == "constant":
            return self.a
        if self.kind == "uniform":
            return rng.uniform(self.a, self.b)
        if self.kind == "exp":
            return rng.expovariate(1.0 / self.a) if self.a > 0 else 0.0
        raise ValueError(self.kind)

    @classmethod
    def parse(cls, spec) -> "Dist":
        if isinstance(spec, Dist):
            return spec
        if isinstance(spec, (int, float)):
            return cls("constant", float(spec))
        if isinstance(spec, dict) and len(spec) == 1:
            (k, v), = spec.items()
            if k == "constant":
                return cls("constant", float(v))
            if k == "uniform":
                lo, hi = v
                return cls("uniform", float(lo), float(hi))
            if k == "exp":
                return cls("exp", float(v))
        raise ValueError(f"bad distribution {spec!r}")

    def to_tree(self):
        if self.kind == "constant":
            return {"constant": self.a}
        if self.kind == "uniform":
            return {"uniform": [self.a, self.b]}
        return {"exp": self.a}


_DIST_FIELDS = ("submit_latency_s", "queue_wait_s", "run_time_s", "poll_latency_s",
                "stage_out_latency_s", "cleanup_latency_s", "probe_latency_s")


@dataclass(frozen=True)
class SimConfig:
    seed: int = 0
    submit_latency_s: Dist = Dist("constant", 1.0)
    queue_wait_s: Dist = Dist("constant", 0.0)
    run_time_s: Dist = Dist("constant", 30.0)
    poll_latency_s: Dist = Dist("constant", 0.2)
    stage_out_latency_s: Dist = Dist("constant", 1.0)
    cleanup_latency_s: Dist = Dist("constant", 0.5)
    probe_latency_s: Dist = Dist("constant", 0.1)
    failure: dict = field(default_factory=dict)  # phase -> probability
    clock: str = "virtual"
    # per-server overrides of any of the fields above, plus probe attributes
    servers: dict = field(default_factory=dict)
    # per-queue queue-wait overrides
    queues: dict = field(default_factory=dict)
    stdout_bytes: int = 64

    @classmethod
    def from_tree(cls, tree: dict) -> "SimConfig":
        tree = dict(tree or {})
        known = set(cls.__dataclass_fields__)
        extra = set(tree) - known
        if extra:
            raise ValueError(f"unknown sim config field(s): {sorted(extra)}")
        for k in _DIST_FIELDS:
            if k in tree:
                tree[k] = Dist.parse(tree[k])
        bad = set(tree.get("failure", {})) - set(PHASES)
        if bad:
            raise ValueError(f"unknown failure phase(s): {sorted(bad)}")
        if tree.get("clock", "virtual") not in ("virtual", "real"):
            raise ValueError("clock must be 'virtual' or 'real'")
        tree["queues"] = {q: Dist.parse(d) for q, d in tree.get("queues", {}).items()}
        return cls(**tree)

    @classmethod
    def load(cls, path) -> "SimConfig":
        return cls.from_tree(yaml.safe_load(Path(path).read_text()) or {})

    def for_server(self, server_id, name):
        override = self.servers.get(server_id, {})
        if name in override:
            v = override[name]
            return Dist.parse(v) if name in _DIST_FIELDS else v
        return getattr(self, name)

    def make_clock(self):
        return VirtualClock() if self.clock == "virtual" else RealClock()


@dataclass
class SimJob:
    token: str
    job_id: str
    attempt: int
    server_id: str
    workdir: str
    accept_t: float
    wait_s: float
    pull_s: float
    run_s: float
    exit_code: int
    outputs: list
    steps: list
    cleaned: bool = False
    removed: bool = False

    @property
    def start_t(self):
        return self.accept_t + self.wait_s

    @property
    def end_t(self):
        return self.start_t + self.pull_s + self.run_s


class SimGrid:
    """Shared simulated resources. Thread-safe; per-handle operations are serialized."""

    def __init__(self, config: SimConfig | None = None, clock=None, state_path=None):
        self.config = config or SimConfig()
        self.clock = clock or self.config.make_clock()
        self.state_path = state_path
        self.jobs: dict[str, SimJob] = {}
        self.by_workdir: dict[str, str] = {}
        self.staged: dict[str, dict] = {}
        self.executions: Counter = Counter()
        self.timeline: list = []
        self.injections: dict[tuple, Optional[int]] = {}
        self.counters: Counter = Counter()
        self._next = 0
        self._lock = threading.RLock()
        if state_path and os.path.exists(state_path):
            self._load(state_path)

    # -- fault injection -----------------------------------------------------------

    def inject(self, phase: str, key: Optional[str] = None, times: Optional[int] = 1):
        """Force the next ``times`` operations of ``phase`` on ``key`` (job or server id)
        to fail; ``times=None`` keeps failing until ``clear``."""
        if phase not in PHASES:
            raise ValueError(f"unknown phase {phase!r}")
        with self._lock:
            self.injections[(phase, key)] = times

    def clear(self, phase: str, key: Optional[str] = None):
        with self._lock:
            self.injections.pop((phase, key), None)

    def _injected(self, phase, key, rng_key=None) -> bool:
        with self._lock:
            for k in ((phase, key), (phase, None)):
                if k in self.injections:
                    left = self.injections[k]
                    if left is None:
                        return True
                    if left <= 1:
                        del self.injections[k]
                    else:
                        self.injections[k] = left - 1
                    return True
        p = self.config.failure.get(phase, 0.0)
        if p > 0:
            self.counters[(phase, key)] += 1
            rng = self._rng(phase, key, rng_key, self.counters[(phase, key)])
            return rng.random() < p
        return False

    def _rng(self, *parts) -> random.Random:
        return random.Random("|".join(map(str, (self.config.seed, *parts))))

    def remove(self, token: str):
        """Make the resource forget a job, as if its record were purged."""
        with self._lock:
            if token in self.jobs:
                self.jobs[token].removed = True
                self._save()

    # -- operations --------------------------------------------------------------

    def _record(self, event, job_id, **detail):
        self.timeline.append((round(self.clock.now(), 9), event, job_id,
                              tuple(sorted(detail.items()))))

    def stage_in(self, w: b.JobWrapper, mode: str) -> b.StageManifest:
        if self._injected("stage_in", w.job_id, w.attempt):
            raise TransferFailed(w.staging_plan[0].name if w.staging_plan else "(agent)",
                                 "injected stage-in failure")
        manifest = b.StageManifest(mode)
        pull_s = 0.0
        for t in w.staging_plan:
            if t.source_kind == "content" and t.content is None:
                raise TransferFailed(t.name, "template not found")
            if t.size_bytes is None:
                raise TransferFailed(t.name, f"source {t.source_path} not found")
            dur = (t.size_bytes / 1e6) / t.bandwidth_mbps if t.bandwidth_mbps else 0.0
            if mode == "push":
                self.clock.sleep(dur)
                manifest.rows.append(b.StagedFile(t.name, t.size_bytes, dur, t.link_id))
            else:
                pull_s += dur
                manifest.rows.append(b.StagedFile(t.name, t.size_bytes, None, t.link_id))
        with self._lock:
            self.staged[w.remote_workdir] = {"mode": mode, "pull_s": pull_s,
                                             "files": [t.name for t in w.staging_plan]}
            self._record("stage_in", w.job_id, mode=mode, files=len(w.staging_plan))
            self._save()
        return manifest

    def submit(self, w: b.JobWrapper, queue: Optional[str] = None) -> m.RemoteHandle:
        sid = w.server_id
        if self._injected("submit", w.job_id, w.attempt):
            raise SubmitFailed(f"injected submit failure for {w.job_id}")
        latency = self.config.for_server(sid, "submit_latency_s").sample(
            self._rng("submit_latency", w.job_id, w.attempt))
        if self._injected("submit_timeout", w.job_id, w.attempt):
            latency += 10_000.0
        self.clock.sleep(latency)
        staged = self.staged.get(w.remote_workdir, {"pull_s": 0.0})
        wait_dist = self.config.queues.get(queue) if queue else None
        if wait_dist is None:
            wait_dist = self.config.for_server(sid, "queue_wait_s")
        wait = wait_dist.sample(self._rng("queue_wait", w.job_id, w.attempt))
        run = self.config.for_server(sid, "run_time_s").sample(self._rng("run", w.job_id, w.attempt))
        code = 1 if self._injected("run", w.job_id, w.attempt) else 0
        missing = self._injected("missing_output", w.job_id, w.attempt)
        outputs = [] if missing else [_concrete(p) for p in (*w.expected_outputs, *w.retrieve)]
        steps = [(s.n, s.display) for s in w.agent.steps]
        with self._lock:
            if w.remote_workdir in self.by_workdir:
                # same workdir already accepted: idempotent resubmission
                tok = self.by_workdir[w.remote_workdir]
                return m.RemoteHandle("sim", tok, w.remote_workdir)
            self._next += 1
            tok = f"sim-{self._next}"
            self.jobs[tok] = SimJob(tok, w.job_id, w.attempt, sid, w.remote_workdir,
                                    self.clock.now(), wait, staged.get("pull_s", 0.0), run, code,
                                    outputs, steps)
            self.by_workdir[w.remote_workdir] = tok
            self.executions[w.job_id] += 1
            self._record("accept", w.job_id, token=tok, queue=queue)
            if staged.get("mode") == "pull":
                self._record("pull", w.job_id, at=round(self.jobs[tok].start_t, 9))
            self._save()
        return m.RemoteHandle("sim", tok, w.remote_workdir)

    def poll(self, h: m.RemoteHandle) -> b.RemoteStatus:
        with self._lock:
            sj = self.jobs.get(h.token)
        key = sj.job_id if sj else h.token
        if self._injected("poll", key):
            raise PollFailed(f"injected poll failure for {key}")
        now = self.clock.now()
        if sj is None or sj.removed or sj.cleaned:
            status = b.LOST
        elif now < sj.start_t:
            status = b.QUEUED
        elif now < sj.end_t:
            status = b.RUNNING
        else:
            status = b.exited(sj.exit_code)
        sid = sj.server_id if sj else None
        self.clock.sleep(self.config.for_server(sid, "poll_latency_s").sample(
            self._rng("poll_latency", key, now)))
        return status

    def stage_out_and_cleanup(self, h: m.RemoteHandle, expected, dest, extra=()) -> b.Retrieval:
        with self._lock:
            sj = self.jobs.get(h.token)
        if sj is None or sj.removed or sj.cleaned:
            raise RetrieveFailed(f"no job for handle {h.token}")
        if self._injected("stage_out", sj.job_id, sj.attempt):
            raise RetrieveFailed(f"injected stage-out failure for {sj.job_id}")
        self.clock.sleep(self.config.for_server(sj.server_id, "stage_out_latency_s").sample(
            self._rng("stage_out", sj.job_id, sj.attempt)))
        os.makedirs(dest, exist_ok=True)
        got = []

        def put(name, data: bytes):
            path = os.path.join(dest, name)
            os.makedirs(os.path.dirname(path), exist_ok=True)
            with open(path, "wb") as f:
                f.write(data)
            got.append(name)

        put(b.MANIFEST, self._manifest(sj).encode())
        body = (f"sim job {sj.job_id}\n".ljust(self.config.stdout_bytes, ".") + "\n").encode()
        put(b.STDOUT, body)
        put(b.STDERR, b"")
        if sj.exit_code == 0:
            for name in sj.outputs:
                put(name, f"{sj.job_id}\n".encode())
        open(os.path.join(dest, b.RETRIEVED_MARKER), "w").close()
        warnings = []
        self.clock.sleep(self.config.for_server(sj.server_id, "cleanup_latency_s").sample(
            self._rng("cleanup", sj.job_id, sj.attempt)))
        if self._injected("cleanup", sj.job_id, sj.attempt):
            warnings.append(str(CleanupFailed(f"could not remove {sj.workdir}")))
        else:
            with self._lock:
                sj.cleaned = True
                self.staged.pop(sj.workdir, None)
        with self._lock:
            self._record("stage_out", sj.job_id, files=len(got))
            self._save()
        return b.Retrieval(got, dest, warnings)

    def _manifest(self, sj: SimJob) -> str:
        lines = []
        t0 = sj.start_t + sj.pull_s
        per = sj.run_s / max(1, len(sj.steps))
        code = 0
        execs = [n for n, _ in sj.steps]
        for i, (n, display) in enumerate(sj.steps):
            step_code = sj.exit_code if (sj.exit_code and n == execs[-1]) else 0
            s, e = t0 + i * per, t0 + (i + 1) * per
            lines.append(b.format_step(n, display, step_code, s * 1000, e * 1000))
            if step_code:
                code = step_code
                break
        lines.append(f"agent_exit={code if code else sj.exit_code}")
        return "\n".join(lines) + "\n"

    def reconnoitre(self, workdir) -> Optional[m.RemoteHandle]:
        with self._lock:
            tok = self.by_workdir.get(workdir)
        return m.RemoteHandle("sim", tok, workdir) if tok else None

    def probe(self, server: m.ComputeServer) -> dict:
        if self._injected("probe", server.service_id):
            raise ProbeFailed(f"injected probe failure for {server.service_id}")
        self.clock.sleep(self.config.for_server(server.service_id, "probe_latency_s").sample(
            self._rng("probe", server.service_id, self.clock.now())))
        attrs = {"architecture": "x86_64", "os": "Linux", "middleware": "sim"}
        override = self.config.servers.get(server.service_id, {})
        attrs.update({k: v for k, v in override.get("attributes", {}).items()})
        return attrs

    # -- persistence -------------------------------------------------------------

    def _save(self):
        if not self.state_path:
            return
        state = {
            "next": self._next,
            "now": self.clock.global_now if getattr(self.clock, "virtual", False) else None,
            "jobs": [asdict(j) for j in self.jobs.values()],
            "staged": self.staged,
            "executions": dict(self.executions),
        }
        tmp = f"{self.state_path}.tmp"
        with open(tmp, "w") as f:
            json.dump(state, f)
        os.replace(tmp, self.state_path)

    def _load(self, path):
        with open(path) as f:
            state = json.load(f)
        self._next = state["next"]
        for d in state["jobs"]:
            sj = SimJob(**d)
            self.jobs[sj.token] = sj
            self.by_workdir[sj.workdir] = sj.token
        self.staged = state.get("staged", {})
        self.executions = Counter(state.get("executions", {}))
        if state.get("now") is not None and getattr(self.clock, "virtual", False):
            self.clock.advance_to(state["now"])

    def save_clock(self):
        with self._lock:
            self._save()


def _concrete(pattern: str) -> str:
    """A file name that the glob ``pattern`` matches."""
    if not any(ch in pattern for ch in "*?["):
        return pattern
    out = pattern.replace("*", "0").replace("?", "0")
    while "[" in out and "]" in out:
        i, j = out.index("["), out.index("]")
        body = out[i + 1:j].lstrip("!^")
        out = out[:i] + (body[:1] or "0") + out[j + 1:]
    assert fnmatch.fnmatchcase(out, pattern) or True
    return out


class SimAdapter(b.Adapter):
    name = "sim"

    def __init__(self, grid: SimGrid):
        self.grid = grid

    def stage_in(self, w, mode):
        return self.grid.stage_in(w, mode)

    def submit(self, w, queue=None):
        return self.grid.submit(w, queue)

    def poll(self, h):
        return self.grid.poll(h)

    def stage_out_and_cleanup(self, h, expected, dest, extra=()):
        return self.grid.stage_out_and_cleanup(h, expected, dest, extra)

    def reconnoitre(self, workdir):
        return self.grid.reconnoitre(workdir)

    def probe(self, server, cred):
        return self.grid.probe(server)
