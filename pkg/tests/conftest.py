import itertools
import json
import socket
from pathlib import Path

import pytest

from mapis.agents import AgentBackend, BackendInfo, BackendKind, Completion, RuleOracleBackend, Step, Usage
from mapis.agents.roles import STEP_SPECS
from mapis.kg import build_default_graph
from mapis.patient import FIELDS, parse_record

FIXTURES = Path(__file__).parent / "fixtures"
GOLDEN = Path(__file__).parent / "golden"

UNITS = {path: spec.unit for path, spec in FIELDS.items()}


def make_record(patient_id="p", **values):
    """Record from dotted paths; measurement fields take a bare number in the canonical unit."""
    doc = {"patient_id": patient_id}
    for key, val in values.items():
        path = key.replace("__", ".")
        if val is None:
            continue
        if FIELDS[path].kind == "measurement":
            val = {"value": val, "unit": UNITS[path]}
        if "." in path:
            section, name = path.split(".")
            doc.setdefault(section, {})[name] = val
        else:
            doc[path] = val
    return parse_record(doc)


def load_fixture(name):
    return json.loads((FIXTURES / name).read_text(encoding="utf-8"))


class FixedClock:
    """Deterministic timestamps: one tick per call."""

    def __init__(self):
        self._n = itertools.count()

    def __call__(self):
        return f"2026-01-01T00:00:{next(self._n):02d}.000+00:00"


class ScriptedBackend(AgentBackend):
    """Answers every diagnostic step with preset statuses keyed by criterion id."""

    def __init__(self, statuses):
        self.statuses = {getattr(k, "value", k): getattr(v, "value", v) for k, v in statuses.items()}
        self.info = BackendInfo("scripted", BackendKind.RULE_ORACLE)
        self._oracle = RuleOracleBackend()

    def complete(self, prompt):
        spec = STEP_SPECS.get(prompt.step)
        if spec is None:
            return self._oracle.complete(prompt)
        reply = {key: {"status": self.statuses.get(cid.value, "No"), "reasoning": "scripted"}
                 for key, cid in spec.criteria}
        return Completion(json.dumps(reply), Usage())


class MeteredBackend(AgentBackend):
    """Rule oracle that reports non-trivial usage so cost sums are observable."""

    def __init__(self):
        self._oracle = RuleOracleBackend()
        self.info = BackendInfo("metered", BackendKind.RULE_ORACLE)

    def complete(self, prompt):
        result = self._oracle.complete(prompt)
        text = prompt.render()
        return Completion(result.text, Usage(len(text) // 4, len(result.text) // 4, len(text) * 1e-7 + 0.013))


class FailingBackend(AgentBackend):
    """Oracle until ``fail_at`` step, then BackendError."""

    def __init__(self, fail_at=Step.STEP2):
        from mapis.errors import BackendError

        self._err = BackendError
        self._oracle = RuleOracleBackend()
        self.fail_at = fail_at
        self.info = BackendInfo("failing", BackendKind.REMOTE, "test")

    def complete(self, prompt):
        if prompt.step is self.fail_at:
            raise self._err("simulated outage")
        return self._oracle.complete(prompt)


@pytest.fixture(scope="session")
def default_kg():
    graph, _ = build_default_graph()
    return graph


@pytest.fixture(scope="session")
def kg_file(default_kg, tmp_path_factory):
    path = tmp_path_factory.mktemp("kg") / "kg.json"
    default_kg.save(path)
    return path


@pytest.fixture
def clock():
    return FixedClock()


@pytest.fixture
def no_egress(monkeypatch):
    """Any attempt to open a network connection fails the test."""
    attempts = []

    def guard(self, address, *a, **kw):
        attempts.append(address)
        raise AssertionError(f"network egress attempted to {address!r}")

    monkeypatch.setattr(socket.socket, "connect", guard)
    monkeypatch.setattr(socket.socket, "connect_ex", guard)
    monkeypatch.setattr(socket, "create_connection", lambda address, *a, **kw: guard(None, address))
    return attempts


@pytest.fixture
def case1():
    return parse_record(load_fixture("case1.json"))


# -- acceptance summary ----------------------------------------------------------

_CRITERIA = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): release acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or (rep.when != "call" and rep.passed):
        return
    number, title = marker.args
    previous = _CRITERIA.get(number, (title, True))
    _CRITERIA[number] = (title, previous[1] and rep.passed)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        title, ok = _CRITERIA[number]
        terminalreporter.write_line(f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {title}")
