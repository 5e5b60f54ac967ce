"""Application, service and credential description documents.

Documents are YAML (so plain JSON works too). Parsing is strict: unknown
fields and service types are rejected rather than dropped, and nothing here
touches the network.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Optional

import yaml

from . import model as m
from .codec import encode_command
from .errors import (
    DuplicateServiceId,
    MissingKeyfile,
    MissingSecret,
    ParseError,
    UnknownServiceType,
    ValidationError,
)

KINDS = ("application", "services", "credentials")


@dataclass
class DescriptionDocument:
    path: Optional[str]
    kind: str
    root: dict


def load_document(path, kind: str) -> DescriptionDocument:
    path = str(path)
    try:
        text = Path(path).read_text(encoding="utf-8")
    except UnicodeDecodeError as e:
        raise ParseError(f"not UTF-8 text: {e}", path) from None
    except OSError as e:
        raise ParseError(str(e), path) from None
    return parse_document(text, kind, path)


def parse_document(text: str, kind: str, path=None) -> DescriptionDocument:
    if kind not in KINDS:
        raise ValueError(f"unknown document kind {kind!r}")
    try:
        root = yaml.safe_load(text)
    except yaml.MarkedYAMLError as e:
        mark = e.problem_mark
        locus = f"line {mark.line + 1}, column {mark.column + 1}" if mark else None
        raise ParseError(e.problem or str(e), path, locus) from None
    except yaml.YAMLError as e:
        raise ParseError(str(e), path) from None
    if not isinstance(root, dict):
        raise ParseError("top level must be a map", path)
    return DescriptionDocument(path, kind, root)


class _Reader:
    """Field access helper that reports the locus of a bad value."""

    def __init__(self, doc: DescriptionDocument):
        self.path = doc.path

    def fail(self, locus, msg, exc=ParseError):
        raise exc(msg, self.path, locus)

    def check_keys(self, node, allowed, locus):
        if not isinstance(node, dict):
            self.fail(locus, "expected a map")
        extra = sorted(set(node) - set(allowed))
        if extra:
            self.fail(locus, f"unrecognized field(s): {', '.join(map(str, extra))}")

    def get(self, node, key, locus, types=None, required=False, default=None):
        if key not in node or node[key] is None:
            if required:
                self.fail(f"{locus}.{key}" if locus else key, "missing required field")
            return default
        v = node[key]
        if types:
            allowed = types if isinstance(types, tuple) else (types,)
            # bool is an int subclass; only accept it when asked for
            if not isinstance(v, allowed) or (isinstance(v, bool) and bool not in allowed):
                self.fail(f"{locus}.{key}" if locus else key, f"bad type {type(v).__name__}")
        return v

    def items(self, node, key, locus):
        v = self.get(node, key, locus, list, default=[])
        return [(f"{locus + '.' if locus else ''}{key}[{i}]", x) for i, x in enumerate(v)]


NUM = (int, float)

# -- application ---------------------------------------------------------------

APP_FIELDS = ("name", "id", "qos", "variables", "task", "expected_outputs", "credentials",
              "requirements")


def _near_document(doc: DescriptionDocument, path: str) -> str:
    # relative input files are looked up next to the document that names them
    if doc.path is None or os.path.isabs(path):
        return path
    return os.path.join(os.path.dirname(os.path.abspath(doc.path)), path)


def parse_application(doc: DescriptionDocument, services=None) -> m.ApplicationContext:
    """Build an ApplicationContext; raises ValidationError on invariant violations.

    Relative template paths and relative ``local:`` copy sources resolve
    against the document's directory.
    """
    if doc.kind != "application":
        raise ValueError("not an application document")
    r = _Reader(doc)
    root = doc.root
    r.check_keys(root, APP_FIELDS, "")
    name = str(r.get(root, "name", "", str, required=True))
    app_id = str(r.get(root, "id", "", (str, int), default=name))

    qnode = r.get(root, "qos", "", dict, default={})
    r.check_keys(qnode, ("deadline_s", "budget", "optimization"), "qos")
    qos = m.QoS(
        r.get(qnode, "deadline_s", "qos", NUM),
        r.get(qnode, "budget", "qos", NUM),
        str(r.get(qnode, "optimization", "qos", str, default="none")),
    )

    variables = []
    for locus, v in r.items(root, "variables", ""):
        r.check_keys(v, ("name", "type", "range", "values", "pattern"), locus)
        vname = r.get(v, "name", locus, str, required=True)
        vtype = r.get(v, "type", locus, str, required=True)
        if vtype not in m.VTYPES:
            r.fail(f"{locus}.type", f"unknown variable type {vtype!r}")
        rng = r.get(v, "range", locus, dict)
        values = r.get(v, "values", locus, list)
        pattern = r.get(v, "pattern", locus, str)
        given = [x is not None for x in (rng, values, pattern)]
        if sum(given) != 1:
            r.fail(locus, "exactly one of range, values, pattern is required")
        if rng is not None:
            r.check_keys(rng, ("from", "to", "step"), f"{locus}.range")
            rl = f"{locus}.range"
            variables.append(m.Variable(
                vname, vtype, r.get(rng, "from", rl, NUM, required=True),
                r.get(rng, "to", rl, NUM, required=True),
                r.get(rng, "step", rl, NUM, default=1)))
        elif values is not None:
            variables.append(m.Variable(vname, vtype, values=tuple(values)))
        else:
            variables.append(m.Variable(vname, vtype, pattern=pattern))

    commands = []
    for locus, c in r.items(root, "task", ""):
        if not isinstance(c, dict) or len(c) != 1:
            r.fail(locus, "each task entry must be one of copy, substitute, execute")
        (kind, body), = c.items()
        if kind == "copy":
            r.check_keys(body, ("source", "dest"), f"{locus}.copy")
            src = str(r.get(body, "source", f"{locus}.copy", str, required=True))
            if src.startswith("local:"):
                src = "local:" + _near_document(doc, src[len("local:"):])
            commands.append(m.Copy(src, str(r.get(body, "dest", f"{locus}.copy", str,
                                                  required=True))))
        elif kind == "substitute":
            r.check_keys(body, ("template", "dest"), f"{locus}.substitute")
            commands.append(m.Substitute(
                _near_document(doc, r.get(body, "template", f"{locus}.substitute", str,
                                          required=True)),
                r.get(body, "dest", f"{locus}.substitute", str, required=True)))
        elif kind == "execute":
            r.check_keys(body, ("cmd", "args"), f"{locus}.execute")
            args = r.get(body, "args", f"{locus}.execute", list, default=[])
            commands.append(m.Execute(r.get(body, "cmd", f"{locus}.execute", str, required=True),
                                      tuple(str(a) for a in args)))
        else:
            r.fail(locus, f"unknown task command {kind!r}")

    outputs = tuple(str(x) for x in r.get(root, "expected_outputs", "", list, default=[]))
    creds = tuple(str(x) for x in r.get(root, "credentials", "", list, default=[]))
    req = r.get(root, "requirements", "", dict, default={})
    r.check_keys(req, ("architecture", "os", "queue"), "requirements")

    task = m.Task("t1", tuple(commands), tuple(variables), outputs,
                  {k: str(v) for k, v in req.items()})
    ctx = m.ApplicationContext(app_id, name, qos, creds, (task,))
    diags = m.validate_application(ctx, services if services is not None else [])
    if services is None:
        diags = [d for d in diags if d.entity != "services"]
        diags = [d for d in diags if "credential" not in d.message and "unknown datahost" not in
                 d.message and "unknown queue" not in d.message]
    if diags:
        raise ValidationError(diags)
    return ctx


# -- services ------------------------------------------------------------------

_COMMON = ("type", "id", "uri")
SERVICE_FIELDS = {
    "compute": _COMMON + ("adapter", "architecture", "os", "slots", "queues", "price_per_cpu_s",
                          "credential", "staging"),
    "datahost": _COMMON + ("protocol", "price_per_mb", "credential", "files"),
    "information": _COMMON + ("subtype", "backing"),
    "network": ("type", "from", "to", "bandwidth_mbps", "cost_per_mb"),
}
ADAPTERS = ("local", "ssh", "sim")
PROTOCOLS = ("localfs", "sftp", "sim")
SUBTYPES = ("replica_catalog", "market_directory")


def parse_services(doc: DescriptionDocument) -> list:
    if doc.kind != "services":
        raise ValueError("not a services document")
    r = _Reader(doc)
    r.check_keys(doc.root, ("services",), "")
    out = []
    seen = set()
    for locus, e in r.items(doc.root, "services", ""):
        if not isinstance(e, dict):
            r.fail(locus, "expected a map")
        stype = r.get(e, "type", locus, str, required=True)
        if stype not in SERVICE_FIELDS:
            r.fail(f"{locus}.type", f"unknown service type {stype!r}", UnknownServiceType)
        r.check_keys(e, SERVICE_FIELDS[stype], locus)
        if stype == "network":
            bw = r.get(e, "bandwidth_mbps", locus, NUM, required=True)
            if bw <= 0:
                r.fail(f"{locus}.bandwidth_mbps", "must be positive")
            svc = m.NetworkLink(str(r.get(e, "from", locus, str, required=True)),
                                str(r.get(e, "to", locus, str, required=True)), float(bw),
                                float(r.get(e, "cost_per_mb", locus, NUM, default=0.0)))
        else:
            sid = str(r.get(e, "id", locus, (str, int), required=True))
            base = dict(service_id=sid, uri=str(r.get(e, "uri", locus, str, default="")))
            if stype == "compute":
                adapter = r.get(e, "adapter", locus, str, default="local")
                if adapter not in ADAPTERS:
                    r.fail(f"{locus}.adapter", f"unknown adapter {adapter!r}")
                slots = r.get(e, "slots", locus, int, default=1)
                if slots <= 0:
                    r.fail(f"{locus}.slots", "must be positive")
                queues = []
                for ql, q in r.items(e, "queues", locus):
                    r.check_keys(q, ("name", "max_wallclock_s", "slots"), ql)
                    queues.append(m.Queue(str(r.get(q, "name", ql, str, required=True)),
                                          float(r.get(q, "max_wallclock_s", ql, NUM, required=True)),
                                          int(r.get(q, "slots", ql, int, default=1))))
                svc = m.ComputeServer(
                    **base, adapter=adapter,
                    architecture=str(r.get(e, "architecture", locus, str, default="")),
                    os=str(r.get(e, "os", locus, str, default="")), slots=slots,
                    queues=tuple(queues),
                    price_per_cpu_s=float(r.get(e, "price_per_cpu_s", locus, NUM, default=0.0)),
                    credential_id=r.get(e, "credential", locus, str),
                    staging=r.get(e, "staging", locus, str))
                if svc.staging not in (None, "push", "pull"):
                    r.fail(f"{locus}.staging", "must be push or pull")
            elif stype == "datahost":
                protocol = r.get(e, "protocol", locus, str, default="localfs")
                if protocol not in PROTOCOLS:
                    r.fail(f"{locus}.protocol", f"unknown protocol {protocol!r}")
                files = []
                for fl, f in r.items(e, "files", locus):
                    r.check_keys(f, ("logical_name", "path", "size_bytes"), fl)
                    lname = str(r.get(f, "logical_name", fl, str, required=True))
                    files.append(m.CatalogFile(lname, str(r.get(f, "path", fl, str, default=lname)),
                                               int(r.get(f, "size_bytes", fl, int, default=0))))
                svc = m.DataHost(**base, protocol=protocol,
                                 price_per_mb=float(r.get(e, "price_per_mb", locus, NUM, default=0.0)),
                                 credential_id=r.get(e, "credential", locus, str),
                                 files=tuple(files))
            else:
                subtype = r.get(e, "subtype", locus, str, required=True)
                if subtype not in SUBTYPES:
                    r.fail(f"{locus}.subtype", f"unknown information service {subtype!r}",
                           UnknownServiceType)
                svc = m.InformationService(**base, subtype=subtype,
                                           backing=str(r.get(e, "backing", locus, str, required=True)))
        if svc.service_id in seen:
            r.fail(locus, f"duplicate service id {svc.service_id!r}", DuplicateServiceId)
        seen.add(svc.service_id)
        out.append(svc)
    return out


# -- credentials ---------------------------------------------------------------


def parse_credentials(doc: DescriptionDocument, environ=None) -> list[m.Credential]:
    """Build credentials; userpass secrets come only from environment variables."""
    if doc.kind != "credentials":
        raise ValueError("not a credentials document")
    env = os.environ if environ is None else environ
    r = _Reader(doc)
    r.check_keys(doc.root, ("credentials",), "")
    out = []
    for locus, e in r.items(doc.root, "credentials", ""):
        r.check_keys(e, ("id", "type", "user", "password_env", "path"), locus)
        cid = str(r.get(e, "id", locus, (str, int), required=True))
        ctype = r.get(e, "type", locus, str, required=True)
        if ctype == "userpass":
            var = r.get(e, "password_env", locus, str, required=True)
            if var not in env:
                raise MissingSecret(f"credential {cid}: environment variable {var} is not set")
            out.append(m.Credential(cid, "userpass", user=r.get(e, "user", locus, str, required=True),
                                    secret=env[var], secret_env=var))
        elif ctype == "keyfile":
            path = r.get(e, "path", locus, str, required=True)
            if not os.path.isfile(path):
                raise MissingKeyfile(f"credential {cid}: no key file at {path}")
            out.append(m.Credential(cid, "keyfile", user=r.get(e, "user", locus, str), path=path))
        else:
            r.fail(f"{locus}.type", f"unknown credential type {ctype!r}")
    return out


# -- serialization (round-trip) ---------------------------------------------------


def dump_application(ctx: m.ApplicationContext) -> dict:
    task = ctx.tasks[0]
    q = ctx.qos
    out: dict[str, Any] = {"name": ctx.name, "id": ctx.app_id}
    qos = {k: v for k, v in (("deadline_s", q.deadline_s), ("budget", q.budget)) if v is not None}
    qos["optimization"] = q.optimization
    out["qos"] = qos
    variables = []
    for v in task.variables:
        d: dict[str, Any] = {"name": v.name, "type": v.vtype}
        if v.pattern is not None:
            d["pattern"] = v.pattern
        elif v.values:
            d["values"] = list(v.values)
        else:
            d["range"] = {"from": v.start, "to": v.stop, "step": v.step}
        variables.append(d)
    out["variables"] = variables
    out["task"] = [encode_command(c) for c in task.commands]
    out["expected_outputs"] = list(task.expected_outputs)
    out["credentials"] = list(ctx.credential_ids)
    out["requirements"] = dict(task.requirements)
    return out


def dump_services(services) -> dict:
    entries = []
    for s in services:
        if isinstance(s, m.NetworkLink):
            entries.append({"type": "network", "from": s.source, "to": s.target,
                            "bandwidth_mbps": s.bandwidth_mbps, "cost_per_mb": s.cost_per_mb})
            continue
        d: dict[str, Any] = {"type": s.kind, "id": s.service_id, "uri": s.uri}
        if isinstance(s, m.ComputeServer):
            d.update(adapter=s.adapter, architecture=s.architecture, os=s.os, slots=s.slots,
                     queues=[{"name": q.name, "max_wallclock_s": q.max_wallclock_s, "slots": q.slots}
                             for q in s.queues],
                     price_per_cpu_s=s.price_per_cpu_s)
            if s.credential_id:
                d["credential"] = s.credential_id
            if s.staging:
                d["staging"] = s.staging
        elif isinstance(s, m.DataHost):
            d.update(protocol=s.protocol, price_per_mb=s.price_per_mb,
                     files=[{"logical_name": f.logical_name, "path": f.path,
                             "size_bytes": f.size_bytes} for f in s.files])
            if s.credential_id:
                d["credential"] = s.credential_id
        else:
            d.update(subtype=s.subtype, backing=s.backing)
        entries.append(d)
    return {"services": entries}


def dump_credentials(creds) -> dict:
    """Credential document without any secret values."""
    entries = []
    for c in creds:
        d: dict[str, Any] = {"id": c.cred_id, "type": c.kind}
        if c.user is not None:
            d["user"] = c.user
        if c.kind == "userpass":
            d["password_env"] = c.secret_env
        else:
            d["path"] = c.path
        entries.append(d)
    return {"credentials": entries}


def load_all(app_path, services_path, credentials_path=None, environ=None):
    """Parse the three input documents and validate them together."""
    services = parse_services(load_document(services_path, "services"))
    ctx = parse_application(load_document(app_path, "application"), services)
    creds = []
    if credentials_path:
        creds = parse_credentials(load_document(credentials_path, "credentials"), environ)
    return ctx, services, creds
