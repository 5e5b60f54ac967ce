import pytest
import yaml
from hypothesis import given, settings
from hypothesis import strategies as st

from gridbroker import interpreters as it
from gridbroker import model as m
from gridbroker.errors import (
    DuplicateServiceId,
    MissingKeyfile,
    MissingSecret,
    ParseError,
    UnknownServiceType,
    ValidationError,
)


def doc(kind, tree):
    return it.parse_document(yaml.safe_dump(tree), kind)


def app_doc(**extra):
    tree = {"name": "a", "task": [{"execute": {"cmd": "/bin/true"}}]}
    tree.update(extra)
    return doc("application", tree)


class TestApplication:
    def test_minimal(self):
        ctx = it.parse_application(app_doc())
        assert len(ctx.tasks) == 1 and ctx.tasks[0].variables == ()
        assert ctx.qos == m.QoS(None, None, "none")

    def test_range_of_100(self):
        ctx = it.parse_application(app_doc(
            variables=[{"name": "x", "type": "integer", "range": {"from": 1, "to": 100, "step": 1}}],
            task=[{"execute": {"cmd": "run $x"}}]))
        assert len(m.expand_task(ctx.tasks[0])) == 100

    def test_qos_verbatim(self):
        ctx = it.parse_application(app_doc(qos={"deadline_s": 3600, "budget": 100,
                                                "optimization": "cost"}))
        assert ctx.qos == m.QoS(3600, 100, "cost")

    def test_unknown_top_level_field(self):
        with pytest.raises(ParseError) as e:
            it.parse_application(app_doc(colour="red"))
        assert "colour" in str(e.value)

    def test_unknown_command(self):
        with pytest.raises(ParseError):
            it.parse_application(app_doc(task=[{"launch": {"cmd": "x"}}]))

    def test_undeclared_variable_is_invalid(self):
        with pytest.raises(ValidationError) as e:
            it.parse_application(app_doc(task=[{"execute": {"cmd": "run $z"}}]))
        assert any("$z" in d.message for d in e.value.diagnostics)

    def test_bad_yaml_reports_locus(self):
        with pytest.raises(ParseError) as e:
            it.parse_document("name: [unclosed", "application", "app.yaml")
        assert "app.yaml" in str(e.value)

    def test_copy_and_substitute(self):
        ctx = it.parse_application(app_doc(task=[
            {"copy": {"source": "local:in.txt", "dest": "remote:in.txt"}},
            {"substitute": {"template": "t.tpl", "dest": "remote:t.cfg"}},
            {"execute": {"cmd": "run", "args": ["-v", 3]}},
            {"copy": {"source": "remote:out.txt", "dest": "local:out.txt"}}]))
        kinds = [type(c).__name__ for c in ctx.tasks[0].commands]
        assert kinds == ["Copy", "Substitute", "Execute", "Copy"]
        assert ctx.tasks[0].commands[2].args == ("-v", "3")


class TestServices:
    def test_one_compute(self):
        svcs = it.parse_services(doc("services", {"services": [
            {"type": "compute", "id": "s1", "adapter": "sim", "slots": 4, "price_per_cpu_s": 0.01}]}))
        assert svcs == [m.ComputeServer("s1", adapter="sim", slots=4, price_per_cpu_s=0.01)]

    def test_network(self):
        svcs = it.parse_services(doc("services", {"services": [
            {"type": "network", "from": "broker", "to": "s1", "bandwidth_mbps": 100}]}))
        assert svcs == [m.NetworkLink("broker", "s1", 100.0)]

    def test_duplicate_id(self):
        with pytest.raises(DuplicateServiceId):
            it.parse_services(doc("services", {"services": [
                {"type": "compute", "id": "s1"}, {"type": "datahost", "id": "s1"}]}))

    def test_unknown_type(self):
        with pytest.raises(UnknownServiceType):
            it.parse_services(doc("services", {"services": [{"type": "quantum", "id": "q"}]}))

    def test_unknown_field(self):
        with pytest.raises(ParseError):
            it.parse_services(doc("services", {"services": [
                {"type": "compute", "id": "s1", "gpus": 2}]}))

    def test_nonpositive_bandwidth(self):
        with pytest.raises(ParseError):
            it.parse_services(doc("services", {"services": [
                {"type": "network", "from": "a", "to": "b", "bandwidth_mbps": 0}]}))


class TestCredentials:
    def tree(self, **e):
        return doc("credentials", {"credentials": [e]})

    def test_userpass_from_env(self):
        creds = it.parse_credentials(self.tree(id="c1", type="userpass", user="u",
                                               password_env="BK_PW"), {"BK_PW": "hunter2"})
        assert creds[0].kind == "userpass" and creds[0].secret == "hunter2"
        assert "hunter2" not in repr(creds[0])

    def test_userpass_env_unset(self):
        with pytest.raises(MissingSecret):
            it.parse_credentials(self.tree(id="c1", type="userpass", user="u",
                                           password_env="BK_PW"), {})

    def test_missing_keyfile(self):
        with pytest.raises(MissingKeyfile):
            it.parse_credentials(self.tree(id="c2", type="keyfile", path="/nonexistent"))

    def test_dump_has_no_secret(self):
        creds = it.parse_credentials(self.tree(id="c1", type="userpass", user="u",
                                               password_env="BK_PW"), {"BK_PW": "hunter2"})
        assert "hunter2" not in yaml.safe_dump(it.dump_credentials(creds))


names = st.from_regex(r"[a-z][a-z0-9_]{0,6}", fullmatch=True)


@st.composite
def applications(draw):
    nvars = draw(st.integers(0, 3))
    vnames = draw(st.lists(names, min_size=nvars, max_size=nvars, unique=True))
    variables = []
    for n in vnames:
        kind = draw(st.sampled_from(["range", "values"]))
        if kind == "range":
            a = draw(st.integers(-5, 5))
            variables.append({"name": n, "type": "integer",
                              "range": {"from": a, "to": a + draw(st.integers(0, 4)), "step": 1}})
        else:
            variables.append({"name": n, "type": "string",
                              "values": draw(st.lists(names, min_size=1, max_size=3))})
    cmd = " ".join(["run"] + [f"${n}" for n in vnames])
    tree = {"name": draw(names), "variables": variables, "task": [{"execute": {"cmd": cmd}}],
            "qos": {"optimization": "none"}}
    if draw(st.booleans()):
        tree["qos"] = {"deadline_s": draw(st.integers(1, 10**6)), "optimization": "time"}
    return tree


@settings(max_examples=150, deadline=None)
@given(applications())
def test_application_round_trip(tree):
    ctx = it.parse_application(doc("application", tree))
    again = it.parse_application(doc("application", it.dump_application(ctx)))
    assert again == ctx


def test_services_round_trip():
    tree = {"services": [
        {"type": "compute", "id": "s1", "adapter": "sim", "slots": 4, "price_per_cpu_s": 0.5,
         "queues": [{"name": "short", "max_wallclock_s": 600, "slots": 2}], "staging": "pull"},
        {"type": "datahost", "id": "d1", "protocol": "sim", "price_per_mb": 0.1,
         "files": [{"logical_name": "a.dat", "path": "/a", "size_bytes": 10}]},
        {"type": "information", "id": "i1", "subtype": "market_directory", "backing": "m.yaml"},
        {"type": "network", "from": "s1", "to": "d1", "bandwidth_mbps": 10, "cost_per_mb": 0.01},
    ]}
    svcs = it.parse_services(doc("services", tree))
    assert it.parse_services(doc("services", it.dump_services(svcs))) == svcs


def test_load_all(tmp_path):
    (tmp_path / "app.yaml").write_text(yaml.safe_dump(
        {"name": "a", "task": [{"execute": {"cmd": "/bin/true"}}]}))
    (tmp_path / "svc.yaml").write_text(yaml.safe_dump(
        {"services": [{"type": "compute", "id": "s1", "adapter": "sim"}]}))
    ctx, svcs, creds = it.load_all(tmp_path / "app.yaml", tmp_path / "svc.yaml")
    assert ctx.name == "a" and len(svcs) == 1 and creds == []
