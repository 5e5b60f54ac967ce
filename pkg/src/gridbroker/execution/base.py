"""Adapter-independent parts of job execution: wrappers, agents, manifests."""

from __future__ import annotations

import os
import re
import shlex
from dataclasses import dataclass, field
from typing import Optional

from .. import model as m
from ..errors import UnboundVariable

MANIFEST = "manifest.txt"
STDOUT = "stdout.txt"
STDERR = "stderr.txt"
STAGING_LOG = "staging.txt"
PID_MARKER = ".agent.pid"
RETRIEVED_MARKER = ".retrieved"
AGENT_SCRIPT = "agent.sh"


@dataclass(frozen=True)
class RemoteStatus:
    kind: str  # queued | running | exited | lost
    code: Optional[int] = None

    def __str__(self):
        return f"exited({self.code})" if self.kind == "exited" else self.kind


QUEUED = RemoteStatus("queued")
RUNNING = RemoteStatus("running")
LOST = RemoteStatus("lost")


def exited(code: int) -> RemoteStatus:
    return RemoteStatus("exited", int(code))


@dataclass(frozen=True)
class Transfer:
    """One input file to place in the remote working directory."""

    name: str
    source_kind: str  # local | datahost | content
    source_path: Optional[str] = None
    datahost_id: Optional[str] = None
    protocol: Optional[str] = None
    size_bytes: Optional[int] = None
    content: Optional[bytes] = None
    bandwidth_mbps: Optional[float] = None
    link_id: Optional[str] = None


@dataclass(frozen=True)
class StagedFile:
    name: str
    bytes: int
    duration_s: Optional[float]
    link_id: Optional[str] = None


@dataclass
class StageManifest:
    mode: str
    rows: list = field(default_factory=list)

    def __len__(self):
        return len(self.rows)


@dataclass(frozen=True)
class AgentStep:
    n: int
    kind: str  # copy | substitute | execute
    display: str
    argv: tuple = ()


@dataclass(frozen=True)
class AgentScript:
    steps: tuple
    manifest_path: str = MANIFEST


@dataclass
class JobWrapper:
    job_id: str
    attempt: int
    adapter: str
    agent: AgentScript
    staging_plan: list
    remote_workdir: str
    server_id: str
    expected_outputs: tuple = ()
    retrieve: tuple = ()
    # remote -> local copies performed by the broker after stage-out
    local_copies: tuple = ()
    # remote -> datahost copies (third-party, run by the agent)
    pushes: tuple = ()
    pull_sources: dict = field(default_factory=dict)


@dataclass
class Retrieval:
    files: list
    dest: str
    warnings: list = field(default_factory=list)


def workdir_name(instance_id, job_id, attempt) -> str:
    return f"{instance_id}/{job_id}.a{attempt}"


def build_wrapper(job: m.Job, task: m.Task, mapping: m.Mapping, server: m.ComputeServer, *,
                  instance_id: str, workroot: str, catalog, datahosts: dict, links) -> JobWrapper:
    """Render the job's commands with its bindings and plan its input staging."""
    b, jid = job.bindings, job.job_id
    sub = lambda t: m.substitute(t, b, jid)
    plan: list[Transfer] = []
    steps: list[AgentStep] = []
    retrieve, local_copies, pushes = [], [], []

    def link_for(src, dst):
        link = links.get(src, dst)
        return link.effective_mbps, link.service_id

    # gridfile inputs are staged implicitly from the selected replica
    for name, value in b.items():
        if isinstance(value, m.GridFile):
            dh_id = mapping.data_selection.get(value.logical_name)
            if dh_id is None:
                reps = catalog.replicas(value.logical_name) if catalog else []
                if not reps:
                    raise UnboundVariable(name)
                dh_id = sorted(r.datahost_id for r in reps)[0]
            rep = catalog.replica(value.logical_name, dh_id)
            host = datahosts.get(dh_id)
            bw, lid = link_for(server.service_id, dh_id)
            plan.append(Transfer(value.staged_name, "datahost", rep.path, dh_id,
                                 host.protocol if host else None, rep.size_bytes, None, bw, lid))

    for c in task.commands:
        n = len(steps) + 1
        if isinstance(c, m.Execute):
            argv = tuple(shlex.split(sub(c.cmd))) + tuple(sub(a) for a in c.args)
            steps.append(AgentStep(n, "execute", " ".join(argv), argv))
        elif isinstance(c, m.Substitute):
            dest = sub(c.dest)
            if dest.startswith("remote:"):  # instantiated templates always land in the workdir
                dest = dest[len("remote:"):]
            tpath = sub(c.template)
            content = None
            if os.path.isfile(tpath):
                with open(tpath, encoding="utf-8") as f:
                    content = sub(f.read()).encode()
            bw, lid = link_for("broker", server.service_id)
            plan.append(Transfer(dest, "content", tpath, size_bytes=len(content) if content else None,
                                 content=content, bandwidth_mbps=bw, link_id=lid))
            steps.append(AgentStep(n, "substitute", f"substitute {tpath} -> {dest}",
                                   ("test", "-f", dest)))
        else:
            src, dst = m.Endpoint.parse(sub(c.source)), m.Endpoint.parse(sub(c.dest))
            display = f"copy {src} -> {dst}"
            if dst.kind == "remote":
                if src.kind == "local":
                    size = os.path.getsize(src.path) if os.path.isfile(src.path) else None
                    bw, lid = link_for("broker", server.service_id)
                    plan.append(Transfer(dst.path, "local", src.path, size_bytes=size,
                                         bandwidth_mbps=bw, link_id=lid))
                else:
                    host = datahosts.get(src.host)
                    known = host.lookup(src.path) if host else None
                    size = known.size_bytes if known else (
                        os.path.getsize(src.path) if os.path.isfile(src.path) else None)
                    bw, lid = link_for(server.service_id, src.host)
                    plan.append(Transfer(dst.path, "datahost", src.path, src.host,
                                         host.protocol if host else None, size, None, bw, lid))
                steps.append(AgentStep(n, "copy", display, ("test", "-f", dst.path)))
            elif dst.kind == "local":
                retrieve.append(src.path)
                local_copies.append((src.path, dst.path))
                steps.append(AgentStep(n, "copy", display, ("test", "-f", src.path)))
            else:
                host = datahosts.get(dst.host)
                pushes.append((src.path, dst.host, dst.path))
                if host is not None and host.protocol == "localfs":
                    argv = ("cp", src.path, dst.path)
                else:
                    argv = ("test", "-f", src.path)
                steps.append(AgentStep(n, "copy", display, argv))

    expected = tuple(sub(p) for p in task.expected_outputs)
    workdir = os.path.join(workroot, workdir_name(instance_id, jid, job.attempts)) \
        if workroot else workdir_name(instance_id, jid, job.attempts)
    return JobWrapper(jid, job.attempts, server.adapter, AgentScript(tuple(steps)), plan, workdir,
                      server.service_id, expected, tuple(retrieve), tuple(local_copies),
                      tuple(pushes))


# -- manifest ------------------------------------------------------------------

_STEP_RE = re.compile(r"^step=(\d+) cmd=(.*) exit=(-?\d+) start=(\d+) end=(\d+)$")


def format_step(n, cmd, code, start_ms, end_ms) -> str:
    cmd = " ".join(str(cmd).split())
    return f"step={n} cmd={cmd} exit={code} start={int(start_ms)} end={int(end_ms)}"


@dataclass
class AgentManifest:
    steps: list
    agent_exit: Optional[int]


def parse_manifest(text: str) -> AgentManifest:
    steps, agent_exit = [], None
    for line in text.splitlines():
        line = line.strip()
        if not line:
            continue
        mt = _STEP_RE.match(line)
        if mt:
            steps.append({"step": int(mt.group(1)), "cmd": mt.group(2), "exit": int(mt.group(3)),
                          "start": int(mt.group(4)), "end": int(mt.group(5))})
        elif line.startswith("agent_exit="):
            agent_exit = int(line.split("=", 1)[1])
    return AgentManifest(steps, agent_exit)


def read_manifest(path) -> Optional[AgentManifest]:
    try:
        with open(path, encoding="utf-8", errors="replace") as f:
            return parse_manifest(f.read())
    except FileNotFoundError:
        return None


# -- shell agent -------------------------------------------------------------------

_SHELL_PRELUDE = r"""#!/bin/sh
# generated job agent: runs steps in order, stops at the first failure
cd "$(dirname "$0")" || exit 97
echo $$ > .agent.pid
: > manifest.txt
: >> stdout.txt
: >> stderr.txt
ms() {
  t=$(date +%s%3N 2>/dev/null)
  case "$t" in
    ''|*N*) echo $(( $(date +%s) * 1000 )) ;;
    *) echo "$t" ;;
  esac
}
finish() {
  echo "agent_exit=$1" >> manifest.txt
  exit "$1"
}
run_step() {
  n=$1; label=$2; shift 2
  s=$(ms)
  "$@" >> stdout.txt 2>> stderr.txt
  rc=$?
  e=$(ms)
  printf 'step=%s cmd=%s exit=%s start=%s end=%s\n' "$n" "$label" "$rc" "$s" "$e" >> manifest.txt
  return $rc
}
fetch() {
  name=$1; src=$2
  s=$(ms)
  cp "$src" "$name" || return 1
  e=$(ms)
  b=$(wc -c < "$name" | tr -d ' ')
  printf 'fetch=%s bytes=%s start=%s end=%s\n' "$name" "$b" "$s" "$e" >> staging.txt
}
"""


def render_shell_agent(w: JobWrapper, pull_sources: Optional[dict] = None) -> str:
    """POSIX shell agent. ``pull_sources`` maps staged names to paths to fetch first."""
    q = shlex.quote
    lines = [_SHELL_PRELUDE]
    for name, src in (pull_sources or {}).items():
        lines.append(f"fetch {q(name)} {q(src)} || finish 96")
    for st in w.agent.steps:
        label = " ".join(st.display.split())
        argv = " ".join(q(a) for a in st.argv)
        lines.append(f"run_step {st.n} {q(label)} {argv}")
        lines.append("rc=$?; [ $rc -eq 0 ] || finish $rc")
    lines.append("finish 0")
    return "\n".join(lines) + "\n"


class Adapter:
    """Middleware-specific operations behind the execution facade.

    Implementations must tolerate concurrent calls for different jobs.
    """

    name = "abstract"
    supports_pull = True

    def check(self, server: m.ComputeServer, cred: Optional[m.Credential]):
        """Raise UnsupportedAdapter when this adapter cannot serve ``server``."""

    def workroot(self, server: m.ComputeServer) -> str:
        return ""

    def stage_in(self, w: JobWrapper, mode: str) -> StageManifest:
        raise NotImplementedError

    def submit(self, w: JobWrapper, queue: Optional[str] = None) -> m.RemoteHandle:
        raise NotImplementedError

    def poll(self, h: m.RemoteHandle) -> RemoteStatus:
        raise NotImplementedError

    def stage_out_and_cleanup(self, h: m.RemoteHandle, expected, dest: str,
                              extra=()) -> Retrieval:
        raise NotImplementedError

    def reconnoitre(self, workdir: str) -> Optional[m.RemoteHandle]:
        return None

    def probe(self, server: m.ComputeServer, cred: Optional[m.Credential]) -> dict:
        raise NotImplementedError
