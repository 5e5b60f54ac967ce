"""Execution layer: wrappers, staging, submission, polling, retrieval.

``Execution`` is the single entry point the workers use. It resolves the
adapter for each server and runs every remote operation under the
per-operation timeout.
"""

from __future__ import annotations

import os
from typing import Optional

from .. import model as m
from ..clock import call_with_timeout
from ..errors import SubmitTimeout, TransientTimeout, UnsupportedAdapter
from .base import (
    LOST,
    MANIFEST,
    QUEUED,
    RETRIEVED_MARKER,
    RUNNING,
    STAGING_LOG,
    STDERR,
    STDOUT,
    Adapter,
    AgentManifest,
    AgentScript,
    AgentStep,
    JobWrapper,
    RemoteStatus,
    Retrieval,
    StagedFile,
    StageManifest,
    Transfer,
    build_wrapper,
    exited,
    parse_manifest,
    read_manifest,
    render_shell_agent,
    workdir_name,
)

DEFAULT_TIMEOUT_S = 30.0

__all__ = [
    "Adapter", "AgentManifest", "AgentScript", "AgentStep", "Execution", "JobWrapper",
    "RemoteStatus", "Retrieval", "StagedFile", "StageManifest", "Transfer", "LOST", "QUEUED",
    "RUNNING", "MANIFEST", "RETRIEVED_MARKER", "STAGING_LOG", "STDERR", "STDOUT",
    "build_wrapper", "exited", "parse_manifest", "read_manifest", "render_shell_agent",
    "workdir_name", "link_observations",
]


class Execution:
    """Adapter dispatch plus time-limited remote operations."""

    def __init__(self, adapters: dict, clock, *, instance_id: str, timeout_s=DEFAULT_TIMEOUT_S):
        self.adapters = dict(adapters)
        self.clock = clock
        self.instance_id = instance_id
        self.timeout_s = timeout_s
        # world view used to render wrappers; refreshed by the broker
        self.tasks: dict = {}
        self.catalog = None
        self.datahosts: dict = {}
        self.links = m.LinkTable()

    def configure(self, *, tasks=None, catalog=None, datahosts=None, links=None):
        if tasks is not None:
            self.tasks = dict(tasks)
        if catalog is not None:
            self.catalog = catalog
        if datahosts is not None:
            self.datahosts = dict(datahosts)
        if links is not None:
            self.links = links

    def adapter(self, name) -> Adapter:
        try:
            return self.adapters[name]
        except KeyError:
            raise UnsupportedAdapter(f"no adapter {name!r} configured") from None

    def _call(self, fn, *args):
        return call_with_timeout(self.clock, self.timeout_s, fn, *args)

    def make_wrapper(self, job: m.Job, mapping: m.Mapping, server: m.ComputeServer,
                     cred: Optional[m.Credential] = None) -> JobWrapper:
        ad = self.adapter(server.adapter)
        ad.check(server, cred)
        return build_wrapper(job, self.tasks[job.task_id], mapping, server,
                             instance_id=self.instance_id, workroot=ad.workroot(server),
                             catalog=self.catalog, datahosts=self.datahosts, links=self.links)

    def stage_in(self, w: JobWrapper, mode: str = "push") -> StageManifest:
        if mode not in ("push", "pull"):
            raise ValueError(f"staging mode {mode!r}")
        return self._call(self.adapter(w.adapter).stage_in, w, mode)

    def submit(self, w: JobWrapper, queue: Optional[str] = None) -> m.RemoteHandle:
        try:
            return self._call(self.adapter(w.adapter).submit, w, queue)
        except TransientTimeout as e:
            raise SubmitTimeout(str(e)) from e

    def poll(self, h: m.RemoteHandle) -> RemoteStatus:
        return self._call(self.adapter(h.adapter).poll, h)

    def stage_out_and_cleanup(self, h: m.RemoteHandle, expected, dest: str, extra=()) -> Retrieval:
        return self._call(self.adapter(h.adapter).stage_out_and_cleanup, h, tuple(expected),
                          dest, tuple(extra))

    def reconnoitre(self, adapter: str, workdir: str) -> Optional[m.RemoteHandle]:
        return self._call(self.adapter(adapter).reconnoitre, workdir)

    def probe(self, server: m.ComputeServer, cred: Optional[m.Credential] = None) -> dict:
        return self._call(self.adapter(server.adapter).probe, server, cred)

    def workdir_for(self, job: m.Job, server: m.ComputeServer) -> str:
        root = self.adapter(server.adapter).workroot(server)
        rel = workdir_name(self.instance_id, job.job_id, job.attempts)
        return os.path.join(root, rel) if root else rel


def link_observations(manifest: StageManifest) -> list[tuple[str, float]]:
    """(link id, measured MB/s) for every timed transfer in a stage-in manifest."""
    out = []
    for row in manifest.rows:
        if row.link_id and row.duration_s and row.duration_s > 0 and row.bytes > 0:
            out.append((row.link_id, row.bytes / 1e6 / row.duration_s))
    return out
