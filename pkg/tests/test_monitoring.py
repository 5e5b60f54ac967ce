import pytest
import yaml

from gridbroker import model as m
from gridbroker.clock import TaskRunner
from gridbroker.execution.sim import Dist
from gridbroker.monitoring import service_monitor_tick, verify_completion

from helpers import Rig

S, E = m.JobState, m.Event


@pytest.fixture
def rig(tmp_path):
    r = Rig(tmp_path)
    yield r
    r.store.close()


class TestVerify:
    def j(self, **b):
        return m.Job("j1", "t", bindings=b)

    def test_all_present(self):
        v = verify_completion(self.j(i=1), ["out_1.txt"], ["out_$i.txt"], 0)
        assert v.ok

    def test_missing_output(self):
        v = verify_completion(self.j(i=1), [], ["out_$i.txt"], 0)
        assert v.state is S.FAILED and v.reason == "missing output: out_1.txt"

    def test_nonzero_exit(self):
        v = verify_completion(self.j(i=1), ["out_1.txt"], ["out_$i.txt"], 3)
        assert v.reason == "nonzero exit: 3"

    def test_no_manifest(self):
        assert verify_completion(self.j(), [], [], None).reason == "no agent manifest"

    def test_glob_pattern(self):
        assert verify_completion(self.j(), ["res/a.csv"], ["*.csv"], 0).ok


class TestJobMonitor:
    def test_poll_schedule_follows_submission_instant(self, rig):
        rig.clock.advance_to(5.0)
        rig.dispatch("j1")
        assert rig.monitor.due_at("j1") == pytest.approx(17.0)
        assert rig.tick_at(16.9) == []

    def test_full_run_to_done(self, rig):
        rig.dispatch("j1")
        evs = rig.tick_at(12)
        assert [(e.old_state, e.new_state) for e in evs] == [("SUBMITTED", "ACTIVE")]
        evs = rig.tick_at(48)
        assert [e.new_state for e in evs] == ["STAGE_OUT", "DONE"]
        j = rig.job()
        assert j.state is S.DONE and j.polls == 2
        assert rig.registry.get("s1").completed == 1

    def test_pending_then_active(self, tmp_path):
        r = Rig(tmp_path, queues={"q": Dist("constant", 20.0)})
        r.server = r.server.replace(queues=(m.Queue("q", 600, 4),))
        r.store.put(r.server)
        c = r.committer
        job = r.store.get_job("j1")
        mp = m.Mapping("j1", "s1", queue="q")
        job = c.step(c.step(job, E.SCHEDULED, mapping=mp), E.STAGE_IN_STARTED)
        w = r.execution.make_wrapper(job, mp, r.server)
        r.execution.stage_in(w)
        c.step(job, E.HANDLE_OBTAINED, handle=r.execution.submit(w, "q"))
        assert [e.new_state for e in r.tick_at(12)] == ["PENDING"]
        assert [e.new_state for e in r.tick_at(24)] == ["ACTIVE"]
        r.store.close()

    def test_missing_output_with_exit_zero_is_rescheduled(self, tmp_path):
        r = Rig(tmp_path)
        r.grid.inject("missing_output", "j1")
        r.dispatch("j1")
        evs = r.tick_at(48)
        states = [e.new_state for e in evs]
        assert states[-2:] == ["FAILED", "READY"]
        assert "missing output" in evs[-2].detail
        assert r.job().attempts == 1
        r.store.close()

    def test_fewer_poll_failures_than_retries_change_nothing(self, rig):
        rig.dispatch("j1")
        rig.grid.inject("poll", "j1", times=2)
        assert rig.tick_at(12) == [] and rig.tick_at(24) == []
        assert rig.job().state is S.SUBMITTED
        assert [e.new_state for e in rig.tick_at(36)] == ["ACTIVE", "STAGE_OUT", "DONE"]
        assert rig.job().attempts == 0

    def test_retries_reached_reschedules(self, rig):
        rig.dispatch("j1")
        rig.grid.inject("poll", "j1", times=3)
        rig.tick_at(12)
        rig.tick_at(24)
        evs = rig.tick_at(36)
        assert [e.new_state for e in evs] == ["FAILED", "READY"]
        assert "poll failed 3" in evs[0].detail
        assert rig.job().attempts == 1

    def test_lost_job_is_rescheduled(self, rig):
        h = rig.dispatch("j1").remote_handle
        rig.grid.remove(h.token)
        assert [e.new_state for e in rig.tick_at(12)] == ["FAILED", "READY"]

    def test_exhausted_attempts_finalize(self, tmp_path):
        r = Rig(tmp_path, max_attempts=1)
        h = r.dispatch("j1").remote_handle
        r.grid.remove(h.token)
        r.tick_at(12)
        j = r.job()
        assert j.state is S.FAILED and j.terminal
        r.store.close()

    def test_events_reach_the_listener_in_order(self, rig):
        rig.dispatch("j1")
        rig.tick_at(48)
        got = [e.new_state for e in rig.sub.drain()]
        assert got == ["SCHEDULED", "STAGE_IN", "SUBMITTED", "ACTIVE", "STAGE_OUT", "DONE"]


class TestServiceMonitor:
    def tick(self, rig, creds=None):
        return service_monitor_tick(rig.registry, rig.execution, TaskRunner(rig.clock),
                                    rig.clock, creds or {})

    def test_probe_ok(self, rig):
        self.tick(rig)
        s = rig.registry.get("s1")
        assert s.available and s.last_probe == rig.clock.now()

    def test_probe_failure_marks_unavailable(self, rig):
        rig.grid.inject("probe", "s1")
        self.tick(rig)
        assert rig.registry.get("s1").available is False
        self.tick(rig)
        assert rig.registry.get("s1").available is True

    def test_market_price_refresh(self, rig, tmp_path):
        market = tmp_path / "market.yaml"
        market.write_text(yaml.safe_dump({"s1": {"price_per_cpu_s": 0.25}}))
        rig.registry.add(m.InformationService("mkt", subtype="market_directory", backing=str(market)))
        self.tick(rig)
        assert rig.registry.get("s1").price_per_cpu_s == 0.25
        market.write_text(yaml.safe_dump({"s1": {"price_per_cpu_s": 0.5}}))
        self.tick(rig)
        assert rig.registry.get("s1").price_per_cpu_s == 0.5

    def test_unreadable_market_file(self, rig, tmp_path):
        rig.registry.add(m.InformationService("mkt", subtype="market_directory", backing=str(tmp_path / "nope")))
        self.tick(rig)
        assert rig.registry.get("mkt").available is False
        assert rig.registry.get("s1").available is True

    def test_discovery_adds_services(self, rig):
        new = m.ComputeServer("s9", adapter="sim", slots=2)
        service_monitor_tick(rig.registry, rig.execution, TaskRunner(rig.clock), rig.clock, {},
                             discover=lambda: [new])
        assert rig.registry.get("s9").available
