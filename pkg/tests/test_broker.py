import dataclasses
import json
import os

import pytest

from gridbroker import model as m
from gridbroker.broker import Broker, RunConfig, recover_cli, run, status
from gridbroker.errors import MissingCredential, NoSuchInstance, SimulatedCrash, StartupError
from gridbroker.execution.sim import Dist
from gridbroker.store import open_store

from helpers import app, run_config, run_sim, sim_grid, sim_servers, sweep_task


class TestRun:
    def test_sim_sweep_done(self, tmp_path):
        report, grid, _ = run_sim(tmp_path, app(sweep_task(10)), sim_servers(("s1", 4), ("s2", 2)))
        assert report.exit_code == 0 and report.done == 10
        assert all(n == 1 for n in grid.executions.values())

    def test_local_jobs_done(self, tmp_path):
        task = sweep_task(5, cmd="sh -c 'echo $i > out_$i.txt'")
        cfg = run_config(str(tmp_path), poll_interval_s=0.1)
        report = run(app(task), [m.ComputeServer("l", adapter="local", slots=5)], [], cfg)
        assert report.exit_code == 0 and report.done == 5
        assert (tmp_path / "out" / "jobs" / "j3" / "a0" / "out_3.txt").read_text() == "3\n"

    def test_local_copy_back(self, tmp_path):
        dest = tmp_path / "results"
        task = m.Task("t", (m.Execute("sh -c 'echo $i > r.txt'"),
                            m.Copy("remote:r.txt", f"local:{dest}/r_$i.txt")),
                      (m.Variable("i", "integer", 1, 2, 1),))
        cfg = run_config(str(tmp_path), poll_interval_s=0.1)
        report = run(app(task), [m.ComputeServer("l", adapter="local", slots=2)], [], cfg)
        assert report.exit_code == 0
        assert (dest / "r_2.txt").read_text() == "2\n"

    def test_always_failing_job(self, tmp_path):
        grid = sim_grid()
        grid.inject("run", "j1", times=None)
        report, _, _ = run_sim(tmp_path, app(sweep_task(1)), sim_servers(), grid=grid)
        assert report.exit_code != 0
        j = report.jobs[0]
        assert j.state == "FAILED" and j.attempts == 2
        assert grid.executions["j1"] == 3

    def test_deadline_expires(self, tmp_path):
        grid = sim_grid(run_time_s=Dist("constant", 60.0))
        ctx = app(sweep_task(3), qos=m.QoS(deadline_s=1, optimization="time"))
        report, _, _ = run_sim(tmp_path, ctx, sim_servers(), grid=grid)
        assert report.exit_code != 0
        assert all(j.state == "FAILED" for j in report.jobs)

    def test_budget_limits_cost_dbc(self, tmp_path):
        ctx = app(sweep_task(6), qos=m.QoS(budget=90, optimization="cost"))
        report, _, _ = run_sim(tmp_path, ctx, sim_servers(("s1", 6, 0.5)), policy="cost_dbc")
        assert report.total_cost <= 90 + 1e-9
        assert 0 < report.done < 6

    def test_invalid_application_writes_nothing(self, tmp_path):
        ctx = app(sweep_task(2, cmd="./app $nope"))
        with pytest.raises(StartupError):
            run_sim(tmp_path, ctx, sim_servers())
        assert not os.listdir(tmp_path / "store")

    def test_missing_credential_at_startup(self, tmp_path):
        with pytest.raises(MissingCredential):
            run_sim(tmp_path, app(creds=("c1",)), sim_servers())

    def test_existing_instance_refused(self, tmp_path):
        run_sim(tmp_path, app(sweep_task(1)), sim_servers(), instance_id="x")
        with pytest.raises(StartupError):
            run_sim(tmp_path, app(sweep_task(1)), sim_servers(), instance_id="x")

    def test_bad_policy(self, tmp_path):
        with pytest.raises(StartupError):
            run_sim(tmp_path, app(), sim_servers(), policy="fastest")


class TestReport:
    def test_conservation_and_files(self, tmp_path):
        grid = sim_grid()
        grid.inject("run", "j2", times=None)
        report, _, _ = run_sim(tmp_path, app(sweep_task(5)), sim_servers(), grid=grid,
                               max_attempts=2)
        assert report.done + report.failed == report.total == 5
        lines = (tmp_path / "out" / "report.jsonl").read_text().splitlines()
        summary = json.loads(lines[0])["summary"]
        assert summary["done"] == 4 and summary["failed"] == 1
        rows = [json.loads(l) for l in lines[1:]]
        assert [r["job_id"] for r in rows] == [f"j{k}" for k in range(1, 6)]
        assert "j2" in (tmp_path / "out" / "report.txt").read_text()

    def test_metrics_on_sim(self, tmp_path):
        report, _, _ = run_sim(tmp_path, app(sweep_task(3)), sim_servers())
        avg = report.averages()
        assert avg["submission_s"] == pytest.approx(1.0)
        assert avg["termination_s"] == pytest.approx(1.5)
        assert avg["wallclock_s"] > 30


class TestRecover:
    def crash_then_recover(self, tmp_path, writes):
        state = str(tmp_path / "sim.json")
        cfg = run_config(str(tmp_path), fail_after_writes=writes)
        b = Broker(cfg, sim=sim_grid(state))
        with pytest.raises(SimulatedCrash):
            b.submit(app(sweep_task(6)), sim_servers(), [], instance_id="inst")
        grid = sim_grid(state)
        report = Broker(dataclasses.replace(cfg, fail_after_writes=None), sim=grid).recover("inst", [])
        return report, grid

    @pytest.mark.parametrize("writes", [1, 12, 25, 38])
    def test_recover_finishes_everything_once(self, tmp_path, writes):
        report, grid = self.crash_then_recover(tmp_path, writes)
        assert report.exit_code == 0 and report.done == 6
        assert all(n == 1 for n in grid.executions.values())

    def test_recover_completed_is_a_no_op(self, tmp_path):
        state = str(tmp_path / "sim.json")
        run_sim(tmp_path, app(sweep_task(3)), sim_servers(), grid=sim_grid(state), instance_id="i")
        grid = sim_grid(state)
        before = dict(grid.executions)
        report = Broker(run_config(str(tmp_path)), sim=grid).recover("i", [])
        assert report.done == 3 and report.recovered == 0
        assert grid.executions == before

    def test_recover_unknown_instance(self, tmp_path):
        with pytest.raises(NoSuchInstance):
            recover_cli(tmp_path / "store", "ghost", [])
        assert not (tmp_path / "store" / "ghost").exists()

    def test_recover_ssh_without_credentials(self, tmp_path):
        store = open_store(tmp_path / "store", "i", sync=False)
        store.put(app(creds=("c1",)))
        store.put(m.ComputeServer("h", "ssh://u@host/x", adapter="ssh", credential_id="c1"))
        for j in m.expand_task(sweep_task()):
            store.put(j)
        store.close()
        with pytest.raises(MissingCredential):
            recover_cli(tmp_path / "store", "i", [], out_dir=str(tmp_path / "out"))

    def test_recover_overrides_out_dir(self, tmp_path):
        state = str(tmp_path / "sim.json")
        cfg = run_config(str(tmp_path), fail_after_writes=10)
        with pytest.raises(SimulatedCrash):
            Broker(cfg, sim=sim_grid(state)).submit(app(sweep_task(2)), sim_servers(), [],
                                                    instance_id="i")
        new_out = str(tmp_path / "elsewhere")
        recover_cli(tmp_path / "store", "i", [], broker_kw={"sim": sim_grid(state)},
                    out_dir=new_out, sync=False)
        assert os.path.exists(os.path.join(new_out, "report.txt"))


class TestStatus:
    def test_counts_and_servers(self, tmp_path):
        run_sim(tmp_path, app(sweep_task(4)), sim_servers(("s1", 2)), instance_id="i")
        text = status(tmp_path / "store", "i")
        assert "instance i: 4 jobs" in text
        assert "DONE" in text and "s1" in text and "up" in text
        assert "  0: 4" in text

    def test_while_locked(self, tmp_path):
        store = open_store(tmp_path / "store", "i", sync=False)
        store.put(app(sweep_task(2)))
        for s in sim_servers():
            store.put(s)
        for j in m.expand_task(sweep_task(2)):
            store.put(j)
        text = status(tmp_path / "store", "i")
        assert "READY" in text
        store.close()

    def test_unknown_instance(self, tmp_path):
        with pytest.raises(NoSuchInstance):
            status(tmp_path, "ghost")


def test_config_validation(tmp_path):
    for bad in ({"active_set": 0}, {"poll_interval_s": 0}, {"staging_mode": "carrier-pigeon"}):
        with pytest.raises(ValueError):
            run_config(str(tmp_path), **bad).validate()
    snap = RunConfig(policy="cost_dbc").snapshot()
    assert RunConfig().merged(snap).policy == "cost_dbc"
