"""One job-lifecycle suite, run against both the local and the simulated adapter."""

import os
import time
from collections import defaultdict

import pytest

from gridbroker import model as m
from gridbroker.broker import Broker
from gridbroker.events import EventBus, parse_event_line
from gridbroker.monitoring import register_listener

from helpers import app, run_config, sim_grid

LEGAL = {
    ("-", "READY"), ("READY", "SCHEDULED"), ("SCHEDULED", "STAGE_IN"), ("STAGE_IN", "SUBMITTED"),
    ("SUBMITTED", "PENDING"), ("SUBMITTED", "ACTIVE"), ("PENDING", "ACTIVE"),
    ("ACTIVE", "STAGE_OUT"), ("STAGE_OUT", "DONE"), ("FAILED", "READY"),
    *((s, "FAILED") for s in ("READY", "SCHEDULED", "STAGE_IN", "SUBMITTED", "PENDING",
                              "ACTIVE", "STAGE_OUT")),
}

HAPPY = ["SCHEDULED", "STAGE_IN", "SUBMITTED", "ACTIVE", "STAGE_OUT", "DONE"]


class Backend:
    """Builds and runs a sweep of ``n`` jobs on one adapter.

    ``flaky`` jobs fail their first attempt; ``broken`` jobs fail every attempt.
    """

    def __init__(self, kind, tmp_path):
        self.kind = kind
        self.tmp = tmp_path

    def task(self, n, flaky=(), broken=()):
        if self.kind == "sim":
            cmd = "./app $i"
        else:
            marks = self.tmp / "marks"
            marks.mkdir(exist_ok=True)
            flaky_set = " ".join(str(k) for k in flaky) or "none"
            broken_set = " ".join(str(k) for k in broken) or "none"
            script = self.tmp / "job.sh"
            script.write_text(
                "#!/bin/sh\n"
                f'for b in {broken_set}; do [ "$1" = "$b" ] && exit 3; done\n'
                f'for f in {flaky_set}; do\n'
                f'  if [ "$1" = "$f" ] && [ ! -f {marks}/$1 ]; then touch {marks}/$1; exit 2; fi\n'
                "done\n"
                'echo "result $1" > out_$1.txt\n')
            cmd = f"/bin/sh {script} $i"
        return m.Task("t", (m.Execute(cmd),), (m.Variable("i", "integer", 1, n, 1),),
                      ("out_$i.txt",))

    def run(self, n, flaky=(), broken=(), max_attempts=3):
        bus = EventBus()
        sub = register_listener(bus)
        ctx = app(self.task(n, flaky, broken))
        if self.kind == "sim":
            grid = sim_grid()
            for k in flaky:
                grid.inject("run", f"j{k}")
            for k in broken:
                grid.inject("run", f"j{k}", times=None)
            servers = [m.ComputeServer("s1", "sim://s1", adapter="sim", slots=4)]
            cfg = run_config(str(self.tmp), max_attempts=max_attempts)
            broker = Broker(cfg, sim=grid, bus=bus)
        else:
            servers = [m.ComputeServer("l1", adapter="local", slots=4)]
            cfg = run_config(str(self.tmp), max_attempts=max_attempts, poll_interval_s=0.1,
                             workroot=str(self.tmp / "work"))
            broker = Broker(cfg, bus=bus)
        report = broker.submit(ctx, servers, [])
        events = sub.drain()
        sub.close()
        return report, events, cfg


@pytest.fixture(params=["local", "sim"])
def backend(request, tmp_path):
    return Backend(request.param, tmp_path)


def traces(events):
    out = defaultdict(list)
    for e in events:
        out[e.job_id].append((e.old_state, e.new_state))
    return out


def test_every_job_done_along_the_happy_path(backend):
    report, events, cfg = backend.run(5)
    assert report.exit_code == 0 and report.done == 5
    for jid, tr in traces(events).items():
        assert [b for _, b in tr] == HAPPY, jid
    for k in range(1, 6):
        got = os.path.join(cfg.out_dir, "jobs", f"j{k}", "a0")
        assert any(f.startswith(f"out_{k}") for f in os.listdir(got))


def test_every_transition_is_on_the_diagram(backend):
    _, events, _ = backend.run(4, flaky=(2,), broken=(4,))
    for e in events:
        assert (e.old_state, e.new_state) in LEGAL, e


def test_flaky_job_is_retried_and_succeeds(backend):
    report, events, _ = backend.run(3, flaky=(2,))
    assert report.exit_code == 0
    rec = {j.job_id: j for j in report.jobs}
    assert rec["j2"].attempts == 1 and rec["j1"].attempts == 0
    states = [b for _, b in traces(events)["j2"]]
    assert states[:2] == ["SCHEDULED", "STAGE_IN"] and states.count("FAILED") == 1
    assert states[-1] == "DONE"


def test_broken_job_exhausts_its_attempts(backend):
    report, events, _ = backend.run(2, broken=(1,), max_attempts=3)
    assert report.exit_code != 0
    rec = {j.job_id: j for j in report.jobs}
    assert rec["j1"].state == "FAILED" and rec["j1"].attempts == 2
    assert "nonzero exit" in rec["j1"].failure_reason
    assert rec["j2"].state == "DONE"
    assert [b for _, b in traces(events)["j1"]].count("SCHEDULED") == 3


def test_event_log_matches_listener(backend):
    _, events, cfg = backend.run(3)
    with open(os.path.join(cfg.out_dir, "events.log")) as f:
        logged = [parse_event_line(l) for l in f]
    assert [(e.job_id, e.new_state) for e in logged] == [(e.job_id, e.new_state) for e in events]


def test_report_files_written(backend):
    report, _, cfg = backend.run(2)
    assert os.path.exists(os.path.join(cfg.out_dir, "report.txt"))
    with open(os.path.join(cfg.out_dir, "report.jsonl")) as f:
        assert len(f.readlines()) == 1 + report.total


def test_local_five_jobs_under_thirty_seconds(tmp_path):
    start = time.monotonic()
    report, _, _ = Backend("local", tmp_path).run(5)
    assert report.done == 5
    assert time.monotonic() - start < 30
