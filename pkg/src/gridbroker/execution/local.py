"""Local-process adapter: jobs run as detached shell agents on this machine."""

from __future__ import annotations

import fnmatch
import logging
import os
import platform
import shutil
import subprocess
import threading
import time
from typing import Optional

from .. import model as m
from ..errors import CleanupFailed, PollFailed, RetrieveFailed, SubmitFailed, TransferFailed
from . import base as b

log = logging.getLogger(__name__)


class LocalAdapter(b.Adapter):
    name = "local"

    def __init__(self, workroot: str):
        self.root = os.path.abspath(workroot)
        self._procs: dict[str, subprocess.Popen] = {}
        self._lock = threading.Lock()

    def workroot(self, server):
        return self.root

    def stage_in(self, w: b.JobWrapper, mode: str) -> b.StageManifest:
        wd = w.remote_workdir
        # re-staging the same attempt starts from a clean directory
        shutil.rmtree(wd, ignore_errors=True)
        os.makedirs(wd)
        manifest = b.StageManifest(mode)
        pull = {}
        for t in w.staging_plan:
            dest = os.path.join(wd, t.name)
            os.makedirs(os.path.dirname(dest), exist_ok=True)
            if t.source_kind == "content":
                if t.content is None:
                    raise TransferFailed(t.name, f"template {t.source_path} not found")
                start = time.monotonic()
                with open(dest, "wb") as f:
                    f.write(t.content)
                manifest.rows.append(b.StagedFile(t.name, len(t.content),
                                                  time.monotonic() - start, t.link_id))
                continue
            if t.source_kind == "datahost" and t.protocol not in (None, "localfs"):
                raise TransferFailed(t.name, f"protocol {t.protocol} unsupported by local adapter")
            if not t.source_path or not os.path.isfile(t.source_path):
                raise TransferFailed(t.name, f"source {t.source_path} not found")
            if mode == "pull":
                pull[t.name] = os.path.abspath(t.source_path)
                manifest.rows.append(b.StagedFile(t.name, os.path.getsize(t.source_path), None,
                                                  t.link_id))
                continue
            start = time.monotonic()
            try:
                shutil.copyfile(t.source_path, dest)
            except OSError as e:
                raise TransferFailed(t.name, str(e)) from e
            manifest.rows.append(b.StagedFile(t.name, os.path.getsize(dest),
                                              time.monotonic() - start, t.link_id))
        script = os.path.join(wd, b.AGENT_SCRIPT)
        with open(script, "w") as f:
            f.write(b.render_shell_agent(w, pull))
        os.chmod(script, 0o755)
        return manifest

    def submit(self, w: b.JobWrapper, queue: Optional[str] = None) -> m.RemoteHandle:
        try:
            p = subprocess.Popen(["/bin/sh", b.AGENT_SCRIPT], cwd=w.remote_workdir,
                                 stdin=subprocess.DEVNULL, stdout=subprocess.DEVNULL,
                                 stderr=subprocess.DEVNULL, start_new_session=True)
        except OSError as e:
            raise SubmitFailed(str(e)) from e
        token = str(p.pid)
        with self._lock:
            self._procs[token] = p
        return m.RemoteHandle(self.name, token, w.remote_workdir)

    def poll(self, h: m.RemoteHandle) -> b.RemoteStatus:
        if not os.path.isdir(h.workdir):
            return b.LOST
        man = b.read_manifest(os.path.join(h.workdir, b.MANIFEST))
        if man is not None and man.agent_exit is not None:
            self._reap(h.token)
            return b.exited(man.agent_exit)
        with self._lock:
            p = self._procs.get(h.token)
        if p is not None:
            rc = p.poll()
            if rc is None:
                return b.RUNNING
            # the process may have finished between the manifest read and now
            man = b.read_manifest(os.path.join(h.workdir, b.MANIFEST))
            self._reap(h.token)
            if man is not None and man.agent_exit is not None:
                return b.exited(man.agent_exit)
            return b.exited(rc if rc else 1)
        try:
            pid = int(h.token)
        except ValueError:
            raise PollFailed(f"bad local handle {h.token!r}") from None
        return b.RUNNING if _pid_alive(pid) else b.LOST

    def _reap(self, token):
        with self._lock:
            p = self._procs.pop(token, None)
        if p is not None:
            p.wait()

    def stage_out_and_cleanup(self, h: m.RemoteHandle, expected, dest: str,
                              extra=()) -> b.Retrieval:
        wd = h.workdir
        if not os.path.isdir(wd):
            raise RetrieveFailed(f"working directory {wd} is gone")
        os.makedirs(dest, exist_ok=True)
        names = os.listdir(wd)
        wanted = {b.MANIFEST, b.STDOUT, b.STDERR, b.STAGING_LOG, *extra}
        for pat in expected:
            wanted.update(n for n in names if fnmatch.fnmatchcase(n, pat))
        got = []
        try:
            for n in sorted(wanted):
                src = os.path.join(wd, n)
                if os.path.isfile(src):
                    target = os.path.join(dest, n)
                    os.makedirs(os.path.dirname(target), exist_ok=True)
                    shutil.copyfile(src, target)
                    got.append(n)
        except OSError as e:
            raise RetrieveFailed(str(e)) from e
        open(os.path.join(dest, b.RETRIEVED_MARKER), "w").close()
        warnings = []
        try:
            shutil.rmtree(wd)
        except OSError as e:
            warnings.append(str(CleanupFailed(f"could not remove {wd}: {e}")))
            log.warning("cleanup of %s failed: %s", wd, e)
        return b.Retrieval(got, dest, warnings)

    def reconnoitre(self, workdir: str) -> Optional[m.RemoteHandle]:
        marker = os.path.join(workdir, b.PID_MARKER)
        try:
            with open(marker) as f:
                pid = f.read().strip()
        except OSError:
            return None
        return m.RemoteHandle(self.name, pid, workdir) if pid else None

    def probe(self, server, cred) -> dict:
        return {"architecture": platform.machine(), "os": platform.system(),
                "cpus": os.cpu_count() or 1}


def _pid_alive(pid: int) -> bool:
    try:
        os.kill(pid, 0)
    except ProcessLookupError:
        return False
    except PermissionError:
        return True
    return True
