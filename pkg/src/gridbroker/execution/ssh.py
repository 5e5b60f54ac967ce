"""SSH adapter driving the system ``ssh``/``scp`` clients.

Server uri: ``ssh://[user@]host[:port][/base/dir]``. Only key-file
credentials are supported; password authentication would need an
interactive helper, so such servers are rejected at wrapper creation.
"""

from __future__ import annotations

import fnmatch
import logging
import os
import shlex
import shutil
import subprocess
import tempfile
import time
from typing import Optional
from urllib.parse import urlparse

from .. import model as m
from ..errors import (
    CleanupFailed,
    PollFailed,
    ProbeFailed,
    RetrieveFailed,
    SubmitFailed,
    TransferFailed,
    UnsupportedAdapter,
)
from . import base as b

log = logging.getLogger(__name__)

DEFAULT_BASE = "gridbroker-work"


class SSHTarget:
    def __init__(self, uri: str, cred: Optional[m.Credential]):
        u = urlparse(uri)
        if u.scheme != "ssh" or not u.hostname:
            raise UnsupportedAdapter(f"not an ssh uri: {uri!r}")
        self.host = u.hostname
        self.port = u.port
        self.user = u.username or (cred.user if cred else None)
        self.base = u.path.rstrip("/") or DEFAULT_BASE
        self.keyfile = cred.path if cred else None

    @property
    def dest(self):
        return f"{self.user}@{self.host}" if self.user else self.host

    def opts(self, scp=False):
        o = ["-o", "BatchMode=yes", "-o", "StrictHostKeyChecking=accept-new"]
        if self.keyfile:
            o += ["-i", self.keyfile]
        if self.port:
            o += ["-P" if scp else "-p", str(self.port)]
        return o


class SSHAdapter(b.Adapter):
    name = "ssh"

    def __init__(self, servers: dict, creds: dict, timeout_s: float = 30.0):
        # servers: service_id -> ComputeServer; creds: cred_id -> Credential
        self.servers = servers
        self.creds = creds
        self.timeout_s = timeout_s

    def _cred(self, server):
        return self.creds.get(server.credential_id) if server.credential_id else None

    def check(self, server, cred):
        if shutil.which("ssh") is None:
            raise UnsupportedAdapter("ssh client not installed")
        if cred is None:
            raise UnsupportedAdapter(f"server {server.service_id} needs a credential for ssh")
        if cred.kind != "keyfile":
            raise UnsupportedAdapter("ssh adapter supports keyfile credentials only")
        SSHTarget(server.uri, cred)

    def _target(self, server_id) -> SSHTarget:
        server = self.servers[server_id]
        return SSHTarget(server.uri, self._cred(server))

    def _target_for_workdir(self, workdir) -> SSHTarget:
        # workdir is "<server_id>::<remote path>" so handles stay self-describing
        sid, _, _ = workdir.partition("::")
        return self._target(sid)

    def workroot(self, server):
        return f"{server.service_id}::{SSHTarget(server.uri, self._cred(server)).base}"

    def _ssh(self, t: SSHTarget, command: str, err=SubmitFailed, input_bytes=None):
        argv = ["ssh", *t.opts(), t.dest, command]
        try:
            p = subprocess.run(argv, input=input_bytes, capture_output=True,
                               timeout=self.timeout_s)
        except (OSError, subprocess.TimeoutExpired) as e:
            raise err(str(e)) from e
        return p

    def _scp(self, t: SSHTarget, src, dst, err):
        argv = ["scp", "-q", *t.opts(scp=True), src, dst]
        try:
            p = subprocess.run(argv, capture_output=True, timeout=self.timeout_s)
        except (OSError, subprocess.TimeoutExpired) as e:
            raise err(str(e)) from e
        if p.returncode != 0:
            raise err(p.stderr.decode(errors="replace").strip() or f"scp exit {p.returncode}")

    @staticmethod
    def _path(workdir):
        return workdir.partition("::")[2]

    def stage_in(self, w: b.JobWrapper, mode: str) -> b.StageManifest:
        t = self._target(w.server_id)
        wd = self._path(w.remote_workdir)
        q = shlex.quote
        p = self._ssh(t, f"rm -rf {q(wd)} && mkdir -p {q(wd)}", _transfer_err("(workdir)"))
        if p.returncode != 0:
            raise TransferFailed("(workdir)", p.stderr.decode(errors="replace").strip())
        manifest = b.StageManifest(mode)
        pull = {}
        with tempfile.TemporaryDirectory() as tmp:
            for tr in w.staging_plan:
                if tr.source_kind == "content":
                    if tr.content is None:
                        raise TransferFailed(tr.name, "template not found")
                    src = os.path.join(tmp, "content")
                    with open(src, "wb") as f:
                        f.write(tr.content)
                elif tr.source_kind == "datahost" and tr.protocol == "sftp":
                    # third-party: the agent fetches from the data host itself
                    pull[tr.name] = tr.source_path
                    manifest.rows.append(b.StagedFile(tr.name, tr.size_bytes or 0, None, tr.link_id))
                    continue
                else:
                    src = tr.source_path
                    if not src or not os.path.isfile(src):
                        raise TransferFailed(tr.name, f"source {src} not found")
                if mode == "pull" and tr.source_kind != "content":
                    pull[tr.name] = src
                    manifest.rows.append(b.StagedFile(tr.name, os.path.getsize(src), None,
                                                      tr.link_id))
                    continue
                start = time.monotonic()
                self._scp(t, src, f"{t.dest}:{wd}/{tr.name}", _transfer_err(tr.name))
                manifest.rows.append(b.StagedFile(tr.name, os.path.getsize(src),
                                                  time.monotonic() - start, tr.link_id))
            agent = os.path.join(tmp, b.AGENT_SCRIPT)
            with open(agent, "w") as f:
                f.write(b.render_shell_agent(w, pull))
            self._scp(t, agent, f"{t.dest}:{wd}/{b.AGENT_SCRIPT}", _transfer_err(b.AGENT_SCRIPT))
        return manifest

    def submit(self, w: b.JobWrapper, queue: Optional[str] = None) -> m.RemoteHandle:
        t = self._target(w.server_id)
        wd = self._path(w.remote_workdir)
        cmd = (f"cd {shlex.quote(wd)} && nohup /bin/sh {b.AGENT_SCRIPT} "
               f"</dev/null >/dev/null 2>&1 & echo $!")
        p = self._ssh(t, cmd, SubmitFailed)
        if p.returncode != 0:
            raise SubmitFailed(p.stderr.decode(errors="replace").strip())
        pid = p.stdout.decode().strip()
        if not pid.isdigit():
            raise SubmitFailed(f"unexpected submit reply {pid!r}")
        return m.RemoteHandle(self.name, pid, w.remote_workdir)

    def poll(self, h: m.RemoteHandle) -> b.RemoteStatus:
        t = self._target_for_workdir(h.workdir)
        wd = shlex.quote(self._path(h.workdir))
        cmd = (f"if [ ! -d {wd} ]; then echo lost; "
               f"elif grep -q '^agent_exit=' {wd}/{b.MANIFEST} 2>/dev/null; then "
               f"grep '^agent_exit=' {wd}/{b.MANIFEST} | tail -n 1; "
               f"elif kill -0 {shlex.quote(h.token)} 2>/dev/null; then echo running; "
               f"else echo lost; fi")
        p = self._ssh(t, cmd, PollFailed)
        if p.returncode == 255:
            raise PollFailed(p.stderr.decode(errors="replace").strip())
        out = p.stdout.decode().strip()
        if out.startswith("agent_exit="):
            return b.exited(int(out.split("=", 1)[1]))
        return b.RUNNING if out == "running" else b.LOST

    def stage_out_and_cleanup(self, h, expected, dest, extra=()) -> b.Retrieval:
        t = self._target_for_workdir(h.workdir)
        wd = self._path(h.workdir)
        p = self._ssh(t, f"cd {shlex.quote(wd)} && ls -1A", RetrieveFailed)
        if p.returncode != 0:
            raise RetrieveFailed(p.stderr.decode(errors="replace").strip())
        names = p.stdout.decode().split()
        wanted = {b.MANIFEST, b.STDOUT, b.STDERR, b.STAGING_LOG, *extra}
        for pat in expected:
            wanted.update(n for n in names if fnmatch.fnmatchcase(n, pat))
        os.makedirs(dest, exist_ok=True)
        got = []
        for n in sorted(wanted & set(names)):
            self._scp(t, f"{t.dest}:{wd}/{n}", os.path.join(dest, n), RetrieveFailed)
            got.append(n)
        open(os.path.join(dest, b.RETRIEVED_MARKER), "w").close()
        warnings = []
        p = self._ssh(t, f"rm -rf {shlex.quote(wd)}", CleanupFailed)
        if p.returncode != 0:
            warnings.append(f"could not remove {wd}")
        return b.Retrieval(got, dest, warnings)

    def reconnoitre(self, workdir):
        t = self._target_for_workdir(workdir)
        p = self._ssh(t, f"cat {shlex.quote(self._path(workdir))}/{b.PID_MARKER}", PollFailed)
        pid = p.stdout.decode().strip() if p.returncode == 0 else ""
        return m.RemoteHandle(self.name, pid, workdir) if pid.isdigit() else None

    def probe(self, server, cred):
        t = SSHTarget(server.uri, cred)
        p = self._ssh(t, "uname -m; uname -s", ProbeFailed)
        if p.returncode != 0:
            raise ProbeFailed(p.stderr.decode(errors="replace").strip())
        lines = p.stdout.decode().split()
        return {"architecture": lines[0] if lines else "", "os": lines[1] if len(lines) > 1 else ""}


def _transfer_err(name):
    return lambda reason: TransferFailed(name, reason)
