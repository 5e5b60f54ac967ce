"""Replica lookup built from data hosts and replica-catalog information services."""

from __future__ import annotations

import fnmatch
import os
from dataclasses import dataclass
from pathlib import Path

import yaml

from . import model as m


@dataclass(frozen=True)
class Replica:
    datahost_id: str
    path: str
    size_bytes: int


class ReplicaCatalog:
    def __init__(self, replicas: dict[str, list[Replica]] | None = None):
        self._replicas: dict[str, list[Replica]] = {k: list(v) for k, v in (replicas or {}).items()}

    def add(self, logical_name: str, replica: Replica):
        reps = self._replicas.setdefault(logical_name, [])
        if all(r.datahost_id != replica.datahost_id for r in reps):
            reps.append(replica)

    def match(self, pattern: str) -> list[str]:
        return sorted(n for n in self._replicas if fnmatch.fnmatchcase(n, pattern))

    def replicas(self, logical_name: str) -> list[Replica]:
        return list(self._replicas.get(logical_name, ()))

    def replica(self, logical_name: str, datahost_id: str) -> Replica:
        for r in self._replicas.get(logical_name, ()):
            if r.datahost_id == datahost_id:
                return r
        raise KeyError((logical_name, datahost_id))

    def names(self):
        return sorted(self._replicas)

    @classmethod
    def from_services(cls, services) -> "ReplicaCatalog":
        """Merge data host file lists with replica-catalog backing files.

        Catalog entries that name a data host but no size take the size from
        that host's own file list, or from the file itself for localfs hosts.
        """
        cat = cls()
        hosts = {s.service_id: s for s in services if isinstance(s, m.DataHost)}
        for h in hosts.values():
            for f in h.files:
                cat.add(f.logical_name, Replica(h.service_id, f.path, f.size_bytes))
        for s in services:
            if isinstance(s, m.InformationService) and s.subtype == "replica_catalog":
                for name, entries in load_replica_file(s.backing).items():
                    for e in entries:
                        dh = str(e["datahost"])
                        path = str(e.get("path", name))
                        size = e.get("size_bytes")
                        host = hosts.get(dh)
                        if size is None and host is not None:
                            known = host.lookup(name)
                            if known is not None:
                                size = known.size_bytes
                            elif host.protocol == "localfs" and os.path.isfile(path):
                                size = os.path.getsize(path)
                        cat.add(name, Replica(dh, path, int(size or 0)))
        return cat


def load_replica_file(path) -> dict:
    """Backing file: ``{logical_name: [{datahost, path, size_bytes?}, ...]}``."""
    data = yaml.safe_load(Path(path).read_text()) or {}
    if not isinstance(data, dict):
        raise ValueError(f"{path}: replica catalog must be a map")
    return data


def load_market_file(path) -> dict:
    """Backing file: ``{service_id: {price_per_cpu_s?, price_per_mb?}}``."""
    data = yaml.safe_load(Path(path).read_text()) or {}
    if not isinstance(data, dict):
        raise ValueError(f"{path}: market directory must be a map")
    return data
