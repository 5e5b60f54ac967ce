import os
import time

import pytest

from gridbroker import model as m
from gridbroker.clock import RealClock, VirtualClock
from gridbroker.errors import (
    PollFailed,
    SubmitFailed,
    SubmitTimeout,
    TransferFailed,
    UnsupportedAdapter,
)
from gridbroker.execution import Execution, link_observations, parse_manifest, render_shell_agent
from gridbroker.execution import base as b
from gridbroker.execution.local import LocalAdapter
from gridbroker.execution.sim import Dist, SimAdapter, SimConfig, SimGrid
from gridbroker.execution.ssh import SSHAdapter

from helpers import sim_grid, sweep_task


def make_execution(adapters, clock=None, tasks=None, **world):
    ex = Execution(adapters, clock or VirtualClock(), instance_id="inst", timeout_s=30)
    ex.configure(tasks=tasks or {"t": sweep_task(3)}, **world)
    return ex


def wrapper_for(ex, server, task=None, jid_index=0, **mp):
    task = task or ex.tasks["t"]
    job = m.expand_task(task)[jid_index]
    return ex.make_wrapper(job, m.Mapping(job.job_id, server.service_id, **mp), server)


SIM = m.ComputeServer("s1", adapter="sim", slots=4)


class TestWrapper:
    def test_single_execute_step(self):
        ex = make_execution({"sim": SimAdapter(sim_grid())},
                            tasks={"t": sweep_task(1, cmd="sleep 1")})
        w = wrapper_for(ex, SIM)
        assert [s.kind for s in w.agent.steps] == ["execute"]
        assert w.agent.steps[0].argv == ("sleep", "1")

    def test_four_steps_in_order(self, tmp_path):
        tpl = tmp_path / "in.tpl"
        tpl.write_text("x=$i\n")
        src = tmp_path / "data.txt"
        src.write_text("data")
        task = m.Task("t", (m.Copy(f"local:{src}", "remote:data.txt"),
                            m.Substitute(str(tpl), "in.cfg"),
                            m.Execute("./app $i"),
                            m.Copy("remote:out_$i.txt", f"local:{tmp_path}/out_$i.txt")),
                      (m.Variable("i", "integer", 1, 2, 1),))
        ex = make_execution({"sim": SimAdapter(sim_grid())}, tasks={"t": task})
        w = wrapper_for(ex, SIM, task, jid_index=1)
        assert [s.kind for s in w.agent.steps] == ["copy", "substitute", "execute", "copy"]
        assert [s.n for s in w.agent.steps] == [1, 2, 3, 4]
        assert w.agent.steps[2].argv == ("./app", "2")
        by_name = {t.name: t for t in w.staging_plan}
        assert by_name["in.cfg"].content == b"x=2\n"
        assert by_name["data.txt"].size_bytes == 4
        assert w.retrieve == ("out_2.txt",)

    def test_substitute_dest_may_carry_remote_prefix(self, tmp_path):
        tpl = tmp_path / "in.tpl"
        tpl.write_text("x=$i\n")
        task = m.Task("t", (m.Substitute(str(tpl), "remote:in_$i.cfg"),),
                      (m.Variable("i", "integer", 1, 1, 1),))
        ex = make_execution({"sim": SimAdapter(sim_grid())}, tasks={"t": task})
        w = wrapper_for(ex, SIM, task)
        assert [t.name for t in w.staging_plan] == ["in_1.cfg"]
        assert w.agent.steps[0].argv == ("test", "-f", "in_1.cfg")

    def test_workdirs_are_distinct(self):
        ex = make_execution({"sim": SimAdapter(sim_grid())})
        dirs = {wrapper_for(ex, SIM, jid_index=k).remote_workdir for k in range(3)}
        assert len(dirs) == 3

    def test_ssh_without_credential(self):
        ssh = SSHAdapter({}, {})
        ex = make_execution({"ssh": ssh})
        server = m.ComputeServer("h", "ssh://u@host/base", adapter="ssh", credential_id="c")
        with pytest.raises(UnsupportedAdapter):
            wrapper_for(ex, server)

    def test_unconfigured_adapter(self):
        ex = make_execution({})
        with pytest.raises(UnsupportedAdapter):
            wrapper_for(ex, SIM)


class TestShellAgent:
    def test_stops_at_first_failure(self, tmp_path):
        w = b.JobWrapper("j1", 0, "local", b.AgentScript((
            b.AgentStep(1, "execute", "true", ("true",)),
            b.AgentStep(2, "execute", "false", ("false",)),
            b.AgentStep(3, "execute", "touch never", ("touch", "never")))), [], str(tmp_path), "s")
        (tmp_path / "agent.sh").write_text(render_shell_agent(w))
        os.system(f"/bin/sh {tmp_path}/agent.sh")
        man = parse_manifest((tmp_path / "manifest.txt").read_text())
        assert [s["step"] for s in man.steps] == [1, 2]
        assert man.steps[1]["exit"] != 0 and man.agent_exit == man.steps[1]["exit"]
        assert not (tmp_path / "never").exists()


class TestLocalAdapter:
    def setup_ex(self, tmp_path, task):
        ad = LocalAdapter(str(tmp_path / "work"))
        return make_execution({"local": ad}, RealClock(), tasks={"t": task}), ad

    def test_push_two_files(self, tmp_path):
        for n in ("a", "b"):
            (tmp_path / n).write_text(n * 10)
        task = m.Task("t", (m.Copy(f"local:{tmp_path}/a", "remote:a"),
                            m.Copy(f"local:{tmp_path}/b", "remote:b"), m.Execute("true")))
        ex, _ = self.setup_ex(tmp_path, task)
        w = wrapper_for(ex, m.ComputeServer("l", adapter="local"), task)
        man = ex.stage_in(w, "push")
        assert len(man) == 2
        assert sorted(os.listdir(w.remote_workdir)) >= ["a", "agent.sh", "b"]

    def test_stage_in_idempotent(self, tmp_path):
        (tmp_path / "a").write_text("x")
        task = m.Task("t", (m.Copy(f"local:{tmp_path}/a", "remote:a"), m.Execute("true")))
        ex, _ = self.setup_ex(tmp_path, task)
        w = wrapper_for(ex, m.ComputeServer("l", adapter="local"), task)
        first = ex.stage_in(w, "push")
        (open(os.path.join(w.remote_workdir, "junk"), "w")).close()
        second = ex.stage_in(w, "push")
        assert [r.name for r in first.rows] == [r.name for r in second.rows]
        assert "junk" not in os.listdir(w.remote_workdir)

    def test_missing_source(self, tmp_path):
        task = m.Task("t", (m.Copy(f"local:{tmp_path}/nope", "remote:a"), m.Execute("true")))
        ex, _ = self.setup_ex(tmp_path, task)
        with pytest.raises(TransferFailed):
            ex.stage_in(wrapper_for(ex, m.ComputeServer("l", adapter="local"), task), "push")

    def wait_exit(self, ex, h, limit=10):
        end = time.monotonic() + limit
        while time.monotonic() < end:
            st = ex.poll(h)
            if st.kind == "exited":
                return st
            time.sleep(0.02)
        raise AssertionError("job did not finish")

    def test_full_cycle(self, tmp_path):
        task = sweep_task(1, cmd="sh -c 'sleep 0.3; echo $jobid > out.$jobid.dat'",
                          outputs=("out.$jobid.dat",))
        ex, _ = self.setup_ex(tmp_path, task)
        w = wrapper_for(ex, m.ComputeServer("l", adapter="local"), task)
        ex.stage_in(w, "push")
        h = ex.submit(w)
        assert h.token.isdigit() and h.adapter == "local"
        assert ex.poll(h).kind == "running"
        assert self.wait_exit(ex, h) == b.exited(0)
        r = ex.stage_out_and_cleanup(h, ["out.j1.dat"], str(tmp_path / "dest"))
        assert "out.j1.dat" in r.files and not r.warnings
        assert not os.path.exists(w.remote_workdir)
        assert ex.poll(h) == b.LOST

    def test_failed_job_still_returns_logs(self, tmp_path):
        task = sweep_task(1, cmd="sh -c 'echo oops >&2; exit 1'")
        ex, _ = self.setup_ex(tmp_path, task)
        w = wrapper_for(ex, m.ComputeServer("l", adapter="local"), task)
        ex.stage_in(w, "push")
        h = ex.submit(w)
        assert self.wait_exit(ex, h) == b.exited(1)
        r = ex.stage_out_and_cleanup(h, ["out_1.txt"], str(tmp_path / "dest"))
        assert {"manifest.txt", "stdout.txt", "stderr.txt"} <= set(r.files)
        assert "oops" in (tmp_path / "dest" / "stderr.txt").read_text()

    def test_reconnoitre_finds_started_agent(self, tmp_path):
        task = sweep_task(1, cmd="sleep 0.2")
        ex, ad = self.setup_ex(tmp_path, task)
        w = wrapper_for(ex, m.ComputeServer("l", adapter="local"), task)
        ex.stage_in(w, "push")
        assert ex.reconnoitre("local", w.remote_workdir) is None
        h = ex.submit(w)
        self.wait_exit(ex, h)
        found = ex.reconnoitre("local", w.remote_workdir)
        assert found is not None and found.workdir == w.remote_workdir

    def test_timeout_becomes_submit_timeout(self, tmp_path):
        class Slow(LocalAdapter):
            def submit(self, w, queue=None):
                time.sleep(0.5)
                return super().submit(w, queue)

        task = sweep_task(1, cmd="true")
        ad = Slow(str(tmp_path / "work"))
        ex = Execution({"local": ad}, RealClock(), instance_id="inst", timeout_s=0.1)
        ex.configure(tasks={"t": task})
        w = wrapper_for(ex, m.ComputeServer("l", adapter="local"), task)
        ex.stage_in(w, "push")
        with pytest.raises(SubmitTimeout):
            ex.submit(w)


class TestSimAdapter:
    def setup(self, **conf):
        grid = SimGrid(SimConfig(**conf), VirtualClock())
        ex = make_execution({"sim": SimAdapter(grid)}, grid.clock)
        return grid, ex

    def test_queue_wait_then_run_then_exit(self):
        grid, ex = self.setup(queues={"short": Dist("constant", 50.0)},
                              run_time_s=Dist("constant", 30.0), submit_latency_s=Dist("constant", 0))
        server = SIM.replace(queues=(m.Queue("short", 600, 4),))
        w = wrapper_for(ex, server, queue="short")
        ex.stage_in(w, "push")
        h = ex.submit(w, "short")
        assert ex.poll(h) == b.QUEUED
        grid.clock.advance_to(49)
        assert ex.poll(h) == b.QUEUED
        grid.clock.advance_to(51)
        assert ex.poll(h) == b.RUNNING
        grid.clock.advance_to(81)
        assert ex.poll(h) == b.exited(0)

    def test_removed_job_is_lost(self):
        grid, ex = self.setup()
        w = wrapper_for(ex, SIM)
        ex.stage_in(w, "push")
        h = ex.submit(w)
        grid.remove(h.token)
        assert ex.poll(h) == b.LOST

    def test_injected_failures(self):
        grid, ex = self.setup()
        w = wrapper_for(ex, SIM)
        grid.inject("stage_in", "j1")
        with pytest.raises(TransferFailed):
            ex.stage_in(w, "push")
        ex.stage_in(w, "push")
        grid.inject("submit", "j1")
        with pytest.raises(SubmitFailed):
            ex.submit(w)
        h = ex.submit(w)
        grid.inject("poll", "j1", times=2)
        for _ in range(2):
            with pytest.raises(PollFailed):
                ex.poll(h)
        assert ex.poll(h).kind in ("queued", "running")

    def test_submit_timeout_then_reconnaissance(self):
        grid, ex = self.setup()
        w = wrapper_for(ex, SIM)
        ex.stage_in(w, "push")
        grid.inject("submit_timeout", "j1")
        with pytest.raises(SubmitTimeout):
            ex.submit(w)
        h = ex.reconnoitre("sim", w.remote_workdir)
        assert h is not None and grid.executions["j1"] == 1
        assert ex.submit(w) == h and grid.executions["j1"] == 1

    def test_pull_mode_transfers_at_agent_start(self):
        grid, ex = self.setup(submit_latency_s=Dist("constant", 0.0))
        task = m.Task("t", (m.Copy("datahost:d1:big.dat", "remote:big.dat"), m.Execute("run")))
        ex.configure(tasks={"t": task}, datahosts={"d1": m.DataHost(
            "d1", protocol="sim", files=(m.CatalogFile("big.dat", "/big", 50_000_000),))},
            links=m.LinkTable([m.NetworkLink("s1", "d1", 10.0)]))
        w = wrapper_for(ex, SIM, task)
        before = grid.clock.now()
        man = ex.stage_in(w, "pull")
        assert grid.clock.now() == before and man.rows[0].duration_s is None
        ex.submit(w)
        pulls = [e for e in grid.timeline if e[1] == "pull"]
        assert pulls and pulls[0][0] == before
        sj = next(iter(grid.jobs.values()))
        assert sj.pull_s == pytest.approx(5.0)

    def test_push_mode_timed_and_observed(self):
        grid, ex = self.setup()
        task = m.Task("t", (m.Copy("datahost:d1:big.dat", "remote:big.dat"), m.Execute("run")))
        ex.configure(tasks={"t": task}, datahosts={"d1": m.DataHost(
            "d1", protocol="sim", files=(m.CatalogFile("big.dat", "/big", 50_000_000),))},
            links=m.LinkTable([m.NetworkLink("s1", "d1", 10.0)]))
        man = ex.stage_in(wrapper_for(ex, SIM, task), "push")
        assert grid.clock.now() == pytest.approx(5.0)
        assert link_observations(man) == [("link:s1->d1", pytest.approx(10.0))]

    def test_stage_out(self, tmp_path):
        grid, ex = self.setup(run_time_s=Dist("constant", 1.0))
        task = sweep_task(1, outputs=("out.$jobid.dat",))
        ex.configure(tasks={"t": task})
        w = wrapper_for(ex, SIM, task)
        ex.stage_in(w, "push")
        h = ex.submit(w)
        grid.clock.advance_to(100)
        r = ex.stage_out_and_cleanup(h, ["out.j1.dat"], str(tmp_path))
        assert "out.j1.dat" in r.files and not r.warnings
        assert ex.poll(h) == b.LOST

    def test_cleanup_failure_is_a_warning(self, tmp_path):
        grid, ex = self.setup(run_time_s=Dist("constant", 1.0))
        w = wrapper_for(ex, SIM)
        ex.stage_in(w, "push")
        h = ex.submit(w)
        grid.clock.advance_to(100)
        grid.inject("cleanup", "j1")
        r = ex.stage_out_and_cleanup(h, ["out_1.txt"], str(tmp_path))
        assert r.warnings and "out_1.txt" in r.files

    def test_same_seed_same_timeline(self):
        def timeline(seed):
            grid, ex = self.setup(seed=seed, run_time_s=Dist("uniform", 10, 100),
                                  failure={"submit": 0.3})
            for k in range(3):
                w = wrapper_for(ex, SIM, jid_index=k)
                ex.stage_in(w, "push")
                try:
                    ex.submit(w)
                except SubmitFailed:
                    pass
            return grid.timeline, [j.run_s for j in grid.jobs.values()]

        assert timeline(4) == timeline(4)

    def test_state_file_round_trip(self, tmp_path):
        path = str(tmp_path / "sim.json")
        grid = SimGrid(SimConfig(), VirtualClock(), path)
        ex = make_execution({"sim": SimAdapter(grid)}, grid.clock)
        w = wrapper_for(ex, SIM)
        ex.stage_in(w, "push")
        grid.clock.advance_to(12.5)
        h = ex.submit(w)
        again = SimGrid(SimConfig(), VirtualClock(), path)
        assert again.clock.now() == grid.clock.now()
        assert again.reconnoitre(w.remote_workdir) == h
        assert again.executions == grid.executions

    def test_config_parsing(self):
        conf = SimConfig.from_tree({"seed": 3, "run_time_s": {"uniform": [1, 2]},
                                    "submit_latency_s": 0.5, "failure": {"poll": 0.1}})
        assert conf.run_time_s == Dist("uniform", 1.0, 2.0)
        assert conf.submit_latency_s == Dist("constant", 0.5)
        with pytest.raises(ValueError):
            SimConfig.from_tree({"speed": 2})
        with pytest.raises(ValueError):
            SimConfig.from_tree({"failure": {"teleport": 0.5}})
