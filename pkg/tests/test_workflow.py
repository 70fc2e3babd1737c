import pytest

from conftest import FailingBackend, FixedClock, ScriptedBackend, make_record
from mapis.agents import AgentBackend, BackendInfo, BackendKind, Completion, InstrumentedBackend, RuleOracleBackend, \
    Step, Usage
from mapis.errors import BackendError, ReplyError
from mapis.rules import CriterionId, CriterionStatus, ThresholdConfig
from mapis.workflow import (AlternativeCause, OutcomeKind, StateError, StepRecord, UncertainPolicy, WorkflowState,
                            gate_reachable, gate_two_of_three, run_diagnosis, run_exclusion_phase)

CFG = ThresholdConfig()
Y, N, U = "Yes", "No", "Uncertain"
C = CriterionId
EMPTY = make_record("blank")


def scripted(policy=UncertainPolicy.DEFAULT, record=EMPTY, **statuses):
    keys = {"cyc": C.IRREGULAR_CYCLES, "clin": C.CLINICAL_HA, "bio": C.BIOCHEMICAL_HA, "pcom": C.PCOM,
            "nccah": C.NCCAH, "thyroid": C.THYROID, "prl": C.PROLACTIN}
    backend = InstrumentedBackend(ScriptedBackend({keys[k]: v for k, v in statuses.items()}))
    state, report = run_diagnosis(record, None, backend, CFG, policy, session_id="s", clock=FixedClock())
    return state, report, backend


def test_case1_is_confirmed_in_three_calls(case1):
    backend = InstrumentedBackend(RuleOracleBackend())
    state, _ = run_diagnosis(case1, None, backend, CFG, session_id="s", clock=FixedClock())
    assert state.outcome.kind is OutcomeKind.CONFIRMED
    assert [s for s, _, _ in backend.calls] == [Step.STEP1, Step.EXCLUSION, Step.REPORT]


def test_gate_basics():
    YES, NO = CriterionStatus.YES, CriterionStatus.NO
    assert gate_two_of_three(YES, None, None, YES)
    assert gate_two_of_three(None, YES, YES, None) is False
    assert gate_two_of_three(NO, NO, YES, YES)
    assert not gate_reachable({C.IRREGULAR_CYCLES: NO, C.CLINICAL_HA: NO, C.BIOCHEMICAL_HA: NO},
                              UncertainPolicy.DEFAULT)


def test_step2_skipped_when_step1_settles_candidacy():
    state, _, backend = scripted(cyc=Y, clin=Y)
    assert backend.count(Step.STEP2) == 0 and backend.count(Step.STEP3) == 0
    assert state.outcome.kind is OutcomeKind.CONFIRMED


def test_step3_skipped_when_cycles_and_biochemistry_settle_it():
    state, _, backend = scripted(cyc=Y, clin=N, bio=Y)
    assert backend.count(Step.STEP2) == 1 and backend.count(Step.STEP3) == 0
    assert state.candidate


def test_early_termination():
    state, report, backend = scripted(cyc=N, clin=N, bio=N)
    assert backend.count(Step.STEP3) == 0 and backend.count(Step.EXCLUSION) == 0
    assert state.outcome.kind is OutcomeKind.EXCLUDED
    assert "early_termination" in [e["event"] for e in state.events]
    assert report.met_statuses()["PCOM"] == "Skipped"


def test_uncertain_terminates_under_default_but_not_strict():
    _, _, default = scripted(cyc=N, clin=U, bio=U)
    assert default.count(Step.STEP3) == 0
    state, _, strict = scripted(UncertainPolicy.STRICT, cyc=N, clin=U, bio=U, pcom=Y)
    assert strict.count(Step.STEP3) == 1
    assert state.outcome.kind is OutcomeKind.INDETERMINATE
    assert state.outcome.missing


def test_pcom_makes_the_second_criterion():
    state, _, backend = scripted(cyc=N, clin=Y, bio=N, pcom=Y)
    assert backend.count(Step.STEP3) == 1
    assert state.outcome.kind is OutcomeKind.CONFIRMED


@pytest.mark.parametrize("screens, cause", [
    ({"nccah": Y, "thyroid": Y, "prl": Y}, AlternativeCause.NCCAH),
    ({"thyroid": Y, "prl": Y}, AlternativeCause.THYROID),
    ({"prl": Y}, AlternativeCause.PROLACTIN),
])
def test_alternative_cause_priority(screens, cause):
    state, report, _ = scripted(cyc=Y, clin=Y, **screens)
    assert state.outcome.kind is OutcomeKind.ALTERNATIVE and state.outcome.cause is cause
    multiple = [f for f in report.risk_flags if f["kind"] == "multiple-alternative-causes"]
    assert bool(multiple) == (len(screens) > 1)


def test_unexcluded_screen_by_policy():
    state, report, _ = scripted(cyc=Y, clin=Y, thyroid=U)
    assert state.outcome.kind is OutcomeKind.CONFIRMED
    assert any(f["kind"] == "unexcluded-differential" for f in report.risk_flags)
    state, _, _ = scripted(UncertainPolicy.STRICT, cyc=Y, clin=Y, thyroid=U)
    assert state.outcome.kind is OutcomeKind.INDETERMINATE
    assert "biochemistry.tsh" in state.outcome.missing


def test_agent_answer_stands_and_disagreement_is_recorded():
    state, report, _ = scripted(cyc=Y, clin=Y)
    assert state.outcome.kind is OutcomeKind.CONFIRMED
    assert any("rules say" in d for d in state.diagnostics)
    assert any(f["kind"] == "agent-rule-disagreement" for f in report.risk_flags)


def test_audit_event_order(case1):
    state, _ = run_diagnosis(case1, None, RuleOracleBackend(), CFG, session_id="s", clock=FixedClock())
    events = [e["event"] for e in state.events]
    assert events == ["session_start", "agent_call", "agent_call", "outcome", "agent_call", "report"]
    assert all(e["session_id"] == "s" for e in state.events)
    assert [e["timestamp"] for e in state.events] == sorted(e["timestamp"] for e in state.events)


def test_runs_are_deterministic_with_fixed_clock(case1, default_kg):
    a, ra = run_diagnosis(case1, default_kg, RuleOracleBackend(), CFG, session_id="s", clock=FixedClock())
    b, rb = run_diagnosis(case1, default_kg, RuleOracleBackend(), CFG, session_id="s", clock=FixedClock())
    assert a.to_dict() == b.to_dict() and ra.to_dict() == rb.to_dict()
    assert a.audit_lines() == b.audit_lines()


def test_knowledge_and_ehr_links_are_recorded(case1, default_kg):
    state, _ = run_diagnosis(case1, default_kg, RuleOracleBackend(), CFG, session_id="s", clock=FixedClock())
    assert state.ehr_links
    assert set(state.knowledge) == {"step1", "exclusion"}
    assert all(eid in default_kg.entities for ids in state.knowledge.values() for eid in ids)


def test_state_round_trip(case1, default_kg):
    state, _ = run_diagnosis(case1, default_kg, RuleOracleBackend(), CFG, session_id="s", clock=FixedClock())
    doc = state.to_dict()
    assert WorkflowState.from_dict(doc).to_dict() == doc


def test_backend_failure_carries_partial_state():
    record = make_record("fail", years_post_menarche=5, menstrual__typical_cycle_max_days=40,
                         clinical_signs__ferriman_gallwey_score=0)
    with pytest.raises(BackendError) as err:
        run_diagnosis(record, None, FailingBackend(Step.STEP2), CFG, session_id="s", clock=FixedClock())
    state = err.value.state
    assert state.outcome is None
    assert [e["event"] for e in state.events][-1] == "agent_error"
    assert state.ran(Step.STEP1) and not state.ran(Step.STEP2)


class _Garbage(AgentBackend):
    info = BackendInfo("garbage", BackendKind.RULE_ORACLE)

    def complete(self, prompt):
        return Completion("I cannot answer in JSON", Usage(3, 2, 0.0))


def test_unparseable_replies_are_retried_then_fail():
    with pytest.raises(ReplyError) as err:
        run_diagnosis(EMPTY, None, _Garbage(), CFG, session_id="s", clock=FixedClock())
    events = err.value.state.events
    assert [e["event"] for e in events] == ["session_start", "agent_call", "agent_call", "agent_error"]
    assert err.value.state.total_usage() == Usage(6, 4, 0.0)


def test_state_guards():
    state = WorkflowState("s", "p")
    state.record_step(StepRecord(Step.STEP2, None, "t", Usage(), 1, "h"))
    with pytest.raises(StateError):
        state.record_step(StepRecord(Step.STEP1, None, "t", Usage(), 1, "h"))
    with pytest.raises(StateError):
        run_exclusion_phase(EMPTY, None, RuleOracleBackend(), CFG, state=WorkflowState("s", "p"))
