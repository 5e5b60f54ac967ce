import os

import pytest

from gridbroker.bench import PROFILES, bench, metrics_from_log, stage_in_s
from gridbroker.events import JobEvent


def test_stage_in_time_of_profiles():
    assert stage_in_s(PROFILES["data"]) == pytest.approx(10.0)
    assert stage_in_s(PROFILES["simple"]) == 0.0


@pytest.mark.parametrize("name", sorted(PROFILES))
def test_sim_profile_runs(name, tmp_path):
    res = bench(name, 5, workdir=str(tmp_path))
    assert res.report.exit_code == 0 and len(res.rows) == 5
    assert sorted(os.listdir(tmp_path / "results")) == [f"out_{k}.txt" for k in range(1, 6)]
    avg = res.averages()
    assert avg["wallclock_s"] >= PROFILES[name].job_length_s


def test_sim_bench_is_deterministic(tmp_path):
    a = bench("simple", 4, seed=7, workdir=str(tmp_path / "a")).rows
    b = bench("simple", 4, seed=7, workdir=str(tmp_path / "b")).rows
    assert a == b


def test_local_bench(tmp_path):
    res = bench("simple", 3, adapter="local", time_scale=0.005, workdir=str(tmp_path))
    assert res.report.exit_code == 0 and len(res.rows) == 3
    assert "submission_s" in res.table()


def test_metrics_from_log_keeps_last_attempt(tmp_path):
    evs = [JobEvent("j1", "READY", "SCHEDULED", 0.0), JobEvent("j1", "SCHEDULED", "FAILED", 1.0),
           JobEvent("j1", "FAILED", "READY", 1.0), JobEvent("j1", "READY", "SCHEDULED", 5.0),
           JobEvent("j1", "STAGE_IN", "SUBMITTED", 7.0), JobEvent("j1", "ACTIVE", "STAGE_OUT", 40.0),
           JobEvent("j1", "STAGE_OUT", "DONE", 41.5), JobEvent("j2", "READY", "SCHEDULED", 0.0)]
    log = tmp_path / "events.log"
    log.write_text("".join(e.line() + "\n" for e in evs))
    rows = metrics_from_log(str(log), {"j1": 0.4})
    assert rows == [{"job_id": "j1", "submission_s": 2.0, "querying_s": 0.4,
                     "termination_s": 1.5, "wallclock_s": 34.5}]


def test_bad_arguments():
    with pytest.raises(ValueError):
        bench("simple", 0)
    with pytest.raises(ValueError):
        bench("simple", 1, adapter="ssh")
