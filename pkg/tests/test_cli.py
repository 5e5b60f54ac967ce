import os
import subprocess
import sys

import pytest
import yaml

from gridbroker.cli import EXIT_STARTUP, main

SECRET = "pa55-never-store-me"


@pytest.fixture
def docs(tmp_path, monkeypatch):
    monkeypatch.setenv("BROKER_TEST_PW", SECRET)
    (tmp_path / "app.yaml").write_text(yaml.safe_dump({
        "name": "sweep",
        "variables": [{"name": "i", "type": "integer", "range": {"from": 1, "to": 4, "step": 1}}],
        "task": [{"execute": {"cmd": "./app $i"}}],
        "expected_outputs": ["out_$i.txt"],
        "credentials": ["c1"],
    }))
    (tmp_path / "services.yaml").write_text(yaml.safe_dump({"services": [
        {"type": "compute", "id": "s1", "adapter": "sim", "slots": 2, "credential": "c1"},
        {"type": "compute", "id": "s2", "adapter": "sim", "slots": 2, "credential": "c1"},
    ]}))
    (tmp_path / "creds.yaml").write_text(yaml.safe_dump({"credentials": [
        {"id": "c1", "type": "userpass", "user": "me", "password_env": "BROKER_TEST_PW"}]}))
    return tmp_path


def submit(d, *extra):
    return main(["submit", "--app", str(d / "app.yaml"), "--services", str(d / "services.yaml"),
                 "--credentials", str(d / "creds.yaml"), "--store", str(d / "store"),
                 "--out", str(d / "out"), "--instance", "run1", *extra])


def test_submit_status_recover(docs, capsys):
    assert submit(docs) == 0
    out = capsys.readouterr().out
    assert "instance: run1" in out and "4 done, 0 failed" in out
    assert main(["status", "--store", str(docs / "store"), "--instance", "run1"]) == 0
    assert "DONE" in capsys.readouterr().out
    rc = main(["recover", "--store", str(docs / "store"), "--instance", "run1",
               "--credentials", str(docs / "creds.yaml"), "--out", str(docs / "out2")])
    assert rc == 0 and (docs / "out2" / "report.txt").exists()


def test_secret_never_reaches_disk(docs):
    assert submit(docs) == 0
    for root, _, files in os.walk(docs):
        for f in files:
            if f == "creds.yaml":
                continue
            with open(os.path.join(root, f), "rb") as fh:
                assert SECRET.encode() not in fh.read(), f


def test_unset_secret_is_a_startup_error(docs, monkeypatch, capsys):
    monkeypatch.delenv("BROKER_TEST_PW")
    assert submit(docs) == EXIT_STARTUP
    assert "BROKER_TEST_PW" in capsys.readouterr().err


def test_bad_application(docs, capsys):
    (docs / "app.yaml").write_text("name: x\ntask: [{launch: {}}]\n")
    assert submit(docs) == EXIT_STARTUP


def test_unknown_policy(docs, capsys):
    assert submit(docs, "--policy", "fastest") == EXIT_STARTUP
    assert "fastest" in capsys.readouterr().err


def test_failing_jobs_exit_one(docs, tmp_path):
    (tmp_path / "sim.yaml").write_text(yaml.safe_dump({"failure": {"run": 1.0}}))
    assert submit(docs, "--sim-config", str(tmp_path / "sim.yaml"), "--max-attempts", "1") == 1


def test_status_unknown_instance(tmp_path, capsys):
    assert main(["status", "--store", str(tmp_path), "--instance", "nope"]) == EXIT_STARTUP


def test_bench_command(capsys, tmp_path):
    assert main(["bench", "--profile", "simple", "--jobs", "3", "--workdir", str(tmp_path)]) == 0
    out = capsys.readouterr().out
    assert "submission_s" in out and "querying_s" in out


def test_module_entry_point():
    r = subprocess.run([sys.executable, "-m", "gridbroker.cli", "--help"],
                       capture_output=True, text=True, check=True)
    for cmd in ("submit", "recover", "status", "bench"):
        assert cmd in r.stdout
