import dataclasses
import json

import httpx
import pytest
from hypothesis import given, settings

from conftest import make_record
from mapis.agents import (Cassette, InstrumentedBackend, RecordingBackend, ReplayBackend, RuleOracleBackend, Step,
                          Usage, assemble_prompt, parse_reply)
from mapis.agents.prompts import SECTION_HEADERS
from mapis.agents.remote import RemoteBackend
from mapis.agents.replies import call_with_retry
from mapis.agents.roles import STEP_SPECS, AgentRole
from mapis.errors import BackendError, CassetteMiss, PromptAssemblyError, ReplyError
from mapis.patient import record_slice
from mapis.rules import CriterionStatus, ThresholdConfig
from mapis.workflow import run_diagnosis
from strategies import records

CFG = ThresholdConfig()
KEYS = STEP_SPECS[Step.STEP1].reply_keys


def step1_prompt(record=None):
    record = record or make_record(years_post_menarche=5, menstrual__typical_cycle_max_days=40)
    return assemble_prompt(AgentRole.ENDOCRINE, Step.STEP1, record_slice(record, STEP_SPECS[Step.STEP1].slice_fields),
                           CFG)


# -- prompts ----------------------------------------------------------------

def test_prompt_has_five_sections_in_order():
    text = step1_prompt().render()
    positions = [text.index(h) for h in SECTION_HEADERS]
    assert positions == sorted(positions)
    assert "(no knowledge retrieved)" in text


def test_guidelines_follow_the_config():
    from mapis.rules import Threshold

    raised = dataclasses.replace(CFG, fg_cutoff=Threshold(8, "score"))
    r = make_record(years_post_menarche=5)
    p = assemble_prompt(AgentRole.ENDOCRINE, Step.STEP1, record_slice(r, STEP_SPECS[Step.STEP1].slice_fields), raised)
    assert "Ferriman-Gallwey >= 8" in p.render()


def test_wrong_role_or_out_of_scope_slice_is_rejected():
    with pytest.raises(PromptAssemblyError):
        assemble_prompt(AgentRole.RADIOLOGY, Step.STEP1, {}, CFG)
    with pytest.raises(PromptAssemblyError):
        assemble_prompt(AgentRole.ENDOCRINE, Step.STEP1, {"biochemistry": {"tsh": {"value": 9, "unit": "mIU/L"}}},
                        CFG)


def test_prompt_hash_changes_with_one_character():
    p = step1_prompt()
    assert dataclasses.replace(p, task=p.task + ".").prompt_hash() != p.prompt_hash()


def _leaf_paths(obj, prefix=""):
    # a measurement is a leaf even though it is a JSON object
    out = set()
    for k, v in obj.items():
        path = f"{prefix}{k}"
        if isinstance(v, dict) and "value" not in v:
            out |= _leaf_paths(v, path + ".")
        else:
            out.add(path)
    return out


@settings(max_examples=60, deadline=None)
@given(records)
def test_each_agent_sees_only_its_slice(record):
    record = dataclasses.replace(record, patient_id="zz-sentinel-id")
    backend = InstrumentedBackend(RuleOracleBackend())
    run_diagnosis(record, None, backend, CFG, session_id="s", clock=lambda: "t")
    assert backend.calls
    for step, prompt, _ in backend.calls:
        if step not in STEP_SPECS:
            continue
        allowed = set(STEP_SPECS[step].slice_fields)
        assert _leaf_paths(json.loads(prompt.task_input)) <= allowed
        for path in record.present_fields():
            if path not in allowed:
                assert f'"{path.rsplit(".", 1)[-1]}"' not in prompt.render(), (step, path)
        assert "zz-sentinel-id" not in prompt.render()


# -- replies ----------------------------------------------------------------

def reply(**statuses):
    return json.dumps({k: {"status": statuses.get(k, "No"), "reasoning": "r"} for k in KEYS})


def test_parse_reply_repairs_fences_and_trailing_commas():
    fenced = "```json\n" + reply().replace("}}", "},}") + "\n```"
    parsed = parse_reply(fenced, KEYS)
    assert {c.status for c in parsed.criteria.values()} == {CriterionStatus.NO}
    assert any("fences" in d for d in parsed.parse_diagnostics)


def test_parse_reply_canonicalizes_status_case():
    parsed = parse_reply(reply(Irregular_cycles="yes"), KEYS)
    assert parsed.criteria["Irregular_cycles"].status is CriterionStatus.YES
    assert any("canonicalized" in d for d in parsed.parse_diagnostics)


@pytest.mark.parametrize("raw", [
    "not json",
    json.dumps([1]),
    json.dumps({"Irregular_cycles": {"status": "Yes", "reasoning": "r"}}),
    reply(Irregular_cycles="Maybe"),
    json.dumps({k: {"status": "No"} for k in KEYS}),
])
def test_parse_reply_rejects(raw):
    with pytest.raises(ReplyError):
        parse_reply(raw, KEYS)


class _Sequence:
    def __init__(self, *texts):
        from mapis.agents import BackendInfo, BackendKind

        self.texts = list(texts)
        self.info = BackendInfo("seq", BackendKind.RULE_ORACLE)

    def complete(self, prompt):
        from mapis.agents import Completion

        return Completion(self.texts.pop(0), Usage(1, 1, 0.0))


def test_retry_adds_reminder_then_succeeds():
    parsed, calls = call_with_retry(_Sequence("junk", reply()), step1_prompt(), lambda t: parse_reply(t, KEYS))
    assert len(calls) == 2
    assert not calls[0][0].reminder and calls[1][0].reminder
    assert "Return only the JSON object" in calls[1][0].render()


def test_retry_exhaustion_keeps_the_calls():
    with pytest.raises(ReplyError) as err:
        call_with_retry(_Sequence("junk", "junk"), step1_prompt(), lambda t: parse_reply(t, KEYS), retries=1)
    assert len(err.value.calls) == 2
    assert isinstance(err.value, BackendError)


# -- remote backend ---------------------------------------------------------

def _chat(text, prompt_tokens=11, completion_tokens=7):
    return {"choices": [{"message": {"content": text}}],
            "usage": {"prompt_tokens": prompt_tokens, "completion_tokens": completion_tokens}}


def test_remote_success_sends_deterministic_request():
    seen = []

    def handler(request):
        seen.append(request)
        return httpx.Response(200, json=_chat(reply()))

    backend = RemoteBackend("m1", "https://llm.test/v1", "k", transport=httpx.MockTransport(handler))
    out = backend.complete(step1_prompt())
    body = json.loads(seen[0].content)
    assert seen[0].url == "https://llm.test/v1/chat/completions"
    assert seen[0].headers["authorization"] == "Bearer k"
    assert body["temperature"] == 0 and body["model"] == "m1"
    assert out.usage.prompt_tokens == 11 and out.usage.completion_tokens == 7


def test_remote_retries_then_gives_up():
    statuses = iter([503, 429, 200])
    sleeps = []

    def handler(request):
        code = next(statuses)
        return httpx.Response(code, json=_chat(reply()) if code == 200 else {})

    backend = RemoteBackend("m", "https://llm.test/v1", "k", transport=httpx.MockTransport(handler),
                            sleep=sleeps.append, max_retries=2)
    assert backend.complete(step1_prompt()).text == reply()
    assert len(sleeps) == 2

    backend = RemoteBackend("m", "https://llm.test/v1", "k", sleep=lambda s: None, max_retries=1,
                            transport=httpx.MockTransport(lambda r: httpx.Response(500)))
    with pytest.raises(BackendError, match="after 2 attempts"):
        backend.complete(step1_prompt())


def test_remote_non_retryable_and_malformed():
    backend = RemoteBackend("m", "https://llm.test/v1", "k",
                            transport=httpx.MockTransport(lambda r: httpx.Response(401, text="nope")))
    with pytest.raises(BackendError, match="401"):
        backend.complete(step1_prompt())
    backend = RemoteBackend("m", "https://llm.test/v1", "k",
                            transport=httpx.MockTransport(lambda r: httpx.Response(200, json={"x": 1})))
    with pytest.raises(BackendError, match="malformed"):
        backend.complete(step1_prompt())


def test_remote_needs_model_and_key(monkeypatch):
    monkeypatch.delenv("MAPIS_MODEL", raising=False)
    monkeypatch.delenv("MAPIS_API_KEY", raising=False)
    with pytest.raises(BackendError, match="MAPIS_MODEL"):
        RemoteBackend()
    with pytest.raises(BackendError, match="MAPIS_API_KEY"):
        RemoteBackend("m").complete(step1_prompt())


def test_transport_errors_are_retried():
    def handler(request):
        raise httpx.ConnectError("down", request=request)

    backend = RemoteBackend("m", "https://llm.test/v1", "k", transport=httpx.MockTransport(handler),
                            sleep=lambda s: None, max_retries=1)
    with pytest.raises(BackendError, match="transport error"):
        backend.complete(step1_prompt())


# -- cassettes --------------------------------------------------------------

def test_record_then_replay(tmp_path):
    path = tmp_path / "c.jsonl"
    rec = RecordingBackend(RuleOracleBackend(), path)
    first = rec.complete(step1_prompt())
    replay = ReplayBackend(path)
    assert len(replay.cassette) == 1
    assert replay.complete(step1_prompt()).text == first.text


def test_replay_miss_never_goes_live(tmp_path, no_egress):
    path = tmp_path / "c.jsonl"
    RecordingBackend(RuleOracleBackend(), path).complete(step1_prompt())
    p = step1_prompt()
    with pytest.raises(CassetteMiss):
        ReplayBackend(path).complete(dataclasses.replace(p, task=p.task + " "))
    assert no_egress == []


def test_malformed_cassette(tmp_path):
    path = tmp_path / "c.jsonl"
    path.write_text('{"prompt_hash": "x"}\n')
    with pytest.raises(BackendError, match="malformed"):
        Cassette.load(path)
    with pytest.raises(BackendError, match="does not exist"):
        Cassette.load(tmp_path / "missing.jsonl")
