"""Conversion between entities and plain JSON-compatible trees.

The store, the run report and document round-trips all go through these
functions. Credentials have no encoder on purpose: secrets never leave
memory.
"""

from __future__ import annotations

from . import model as m


def _opt(d, key, default=None):
    v = d.get(key, default)
    return default if v is None else v


def encode_value(v):
    if isinstance(v, m.GridFile):
        return {"gridfile": v.logical_name}
    return v


def decode_value(v):
    if isinstance(v, dict) and "gridfile" in v:
        return m.GridFile(v["gridfile"])
    return v


def encode_mapping(mp: m.Mapping | None):
    if mp is None:
        return None
    return {"job_id": mp.job_id, "compute_id": mp.compute_id, "queue": mp.queue,
            "data_selection": dict(mp.data_selection), "est_cost": mp.est_cost,
            "est_duration_s": mp.est_duration_s}


def decode_mapping(d):
    if d is None:
        return None
    return m.Mapping(d["job_id"], d["compute_id"], d.get("queue"),
                     dict(d.get("data_selection") or {}), float(d.get("est_cost", 0.0)),
                     float(d.get("est_duration_s", 0.0)))


def encode_handle(h: m.RemoteHandle | None):
    if h is None:
        return None
    return {"adapter": h.adapter, "token": h.token, "workdir": h.workdir}


def decode_handle(d):
    if d is None:
        return None
    return m.RemoteHandle(d["adapter"], d["token"], d["workdir"])


def encode_job(j: m.Job) -> dict:
    return {
        "job_id": j.job_id,
        "task_id": j.task_id,
        "bindings": {k: encode_value(v) for k, v in j.bindings.items()},
        "state": j.state.value,
        "attempts": j.attempts,
        "mapping": encode_mapping(j.mapping),
        "remote_handle": encode_handle(j.remote_handle),
        "timestamps": dict(j.timestamps),
        "failure_reason": j.failure_reason,
        "terminal": j.terminal,
        "seq": j.seq,
        "submit_intent": j.submit_intent,
        "polls": j.polls,
        "query_s": j.query_s,
    }


def decode_job(d: dict) -> m.Job:
    return m.Job(
        job_id=d["job_id"],
        task_id=d["task_id"],
        bindings={k: decode_value(v) for k, v in d.get("bindings", {}).items()},
        state=m.JobState(d["state"]),
        attempts=int(d.get("attempts", 0)),
        mapping=decode_mapping(d.get("mapping")),
        remote_handle=decode_handle(d.get("remote_handle")),
        timestamps=dict(d.get("timestamps") or {}),
        failure_reason=d.get("failure_reason"),
        terminal=bool(d.get("terminal", False)),
        seq=int(d.get("seq", 0)),
        submit_intent=d.get("submit_intent"),
        polls=int(d.get("polls", 0)),
        query_s=float(d.get("query_s", 0.0)),
    )


# -- application -------------------------------------------------------------


def encode_command(c) -> dict:
    if isinstance(c, m.Copy):
        return {"copy": {"source": c.source, "dest": c.dest}}
    if isinstance(c, m.Substitute):
        return {"substitute": {"template": c.template, "dest": c.dest}}
    return {"execute": {"cmd": c.cmd, "args": list(c.args)}}


def decode_command(d: dict):
    if "copy" in d:
        return m.Copy(d["copy"]["source"], d["copy"]["dest"])
    if "substitute" in d:
        return m.Substitute(d["substitute"]["template"], d["substitute"]["dest"])
    e = d["execute"]
    return m.Execute(e["cmd"], tuple(str(a) for a in e.get("args") or ()))


def encode_variable(v: m.Variable) -> dict:
    out = {"name": v.name, "type": v.vtype}
    if v.vtype == "gridfile":
        out["pattern"] = v.pattern
    elif v.values:
        out["values"] = list(v.values)
    else:
        out["range"] = {"from": v.start, "to": v.stop, "step": v.step}
    return out


def encode_task(t: m.Task) -> dict:
    return {"id": t.task_id, "task": [encode_command(c) for c in t.commands],
            "variables": [encode_variable(v) for v in t.variables],
            "expected_outputs": list(t.expected_outputs),
            "requirements": dict(t.requirements)}


def decode_task(d: dict) -> m.Task:
    variables = []
    for v in d.get("variables", []):
        rng = v.get("range") or {}
        variables.append(m.Variable(
            v["name"], v["type"], rng.get("from"), rng.get("to"), rng.get("step"),
            tuple(v.get("values") or ()), v.get("pattern")))
    return m.Task(d["id"], tuple(decode_command(c) for c in d["task"]), tuple(variables),
                  tuple(d.get("expected_outputs") or ()), dict(d.get("requirements") or {}))


def encode_qos(q: m.QoS) -> dict:
    return {"deadline_s": q.deadline_s, "budget": q.budget, "optimization": q.optimization}


def encode_context(ctx: m.ApplicationContext) -> dict:
    return {"app_id": ctx.app_id, "name": ctx.name, "qos": encode_qos(ctx.qos),
            "credential_ids": list(ctx.credential_ids),
            "tasks": [encode_task(t) for t in ctx.tasks]}


def decode_context(d: dict) -> m.ApplicationContext:
    q = d.get("qos") or {}
    return m.ApplicationContext(
        d["app_id"], d["name"],
        m.QoS(q.get("deadline_s"), q.get("budget"), q.get("optimization") or "none"),
        tuple(d.get("credential_ids") or ()),
        tuple(decode_task(t) for t in d.get("tasks", [])))


# -- services ----------------------------------------------------------------


def encode_service(s) -> dict:
    if isinstance(s, m.NetworkLink):
        return {"type": "network", "from": s.source, "to": s.target,
                "bandwidth_mbps": s.bandwidth_mbps, "cost_per_mb": s.cost_per_mb,
                "measured_mbps": s.measured_mbps}
    out = {"type": s.kind, "id": s.service_id, "uri": s.uri, "available": s.available,
           "last_probe": s.last_probe, "attributes": dict(s.attributes)}
    if isinstance(s, m.ComputeServer):
        out.update(adapter=s.adapter, architecture=s.architecture, os=s.os, slots=s.slots,
                   queues=[{"name": q.name, "max_wallclock_s": q.max_wallclock_s, "slots": q.slots}
                           for q in s.queues],
                   price_per_cpu_s=s.price_per_cpu_s, credential=s.credential_id,
                   observed_rate=s.observed_rate, completed=s.completed,
                   staging=s.staging)
    elif isinstance(s, m.DataHost):
        out.update(protocol=s.protocol, price_per_mb=s.price_per_mb, credential=s.credential_id,
                   files=[{"logical_name": f.logical_name, "path": f.path,
                           "size_bytes": f.size_bytes} for f in s.files])
    elif isinstance(s, m.InformationService):
        out.update(subtype=s.subtype, backing=s.backing)
    return out


def decode_service(d: dict):
    kind = d["type"]
    if kind == "network":
        return m.NetworkLink(d["from"], d["to"], float(d["bandwidth_mbps"]),
                             float(_opt(d, "cost_per_mb", 0.0)), d.get("measured_mbps"))
    base = dict(service_id=d["id"], uri=_opt(d, "uri", ""), available=d.get("available", True),
                last_probe=d.get("last_probe"), attributes=dict(d.get("attributes") or {}))
    if kind == "compute":
        return m.ComputeServer(
            **base, adapter=_opt(d, "adapter", "local"), architecture=_opt(d, "architecture", ""),
            os=_opt(d, "os", ""), slots=int(_opt(d, "slots", 1)),
            queues=tuple(m.Queue(q["name"], float(q["max_wallclock_s"]), int(q["slots"]))
                         for q in d.get("queues") or ()),
            price_per_cpu_s=float(_opt(d, "price_per_cpu_s", 0.0)),
            credential_id=d.get("credential"), observed_rate=d.get("observed_rate"),
            completed=int(_opt(d, "completed", 0)), staging=d.get("staging"))
    if kind == "datahost":
        return m.DataHost(
            **base, protocol=_opt(d, "protocol", "localfs"),
            price_per_mb=float(_opt(d, "price_per_mb", 0.0)), credential_id=d.get("credential"),
            files=tuple(m.CatalogFile(f["logical_name"], f.get("path", f["logical_name"]),
                                      int(f.get("size_bytes", 0)))
                        for f in d.get("files") or ()))
    if kind == "information":
        return m.InformationService(**base, subtype=_opt(d, "subtype", "replica_catalog"),
                                    backing=_opt(d, "backing", ""))
    raise ValueError(f"unknown service type {kind!r}")


def service_key(s) -> str:
    return s.service_id
