import json

import pytest

from conftest import FailingBackend, FixedClock, MeteredBackend, make_record
from mapis.agents import RuleOracleBackend, Step
from mapis.agents.oracle import template_summary
from mapis.reporting import borderline_flags, generate_report, parse_report, render_report_text, report_facts
from mapis.rules import ThresholdConfig
from mapis.workflow import WorkflowState, run_diagnosis

CFG = ThresholdConfig()


@pytest.fixture
def diagnosed(case1, default_kg):
    return run_diagnosis(case1, default_kg, RuleOracleBackend(), CFG, session_id="s", clock=FixedClock())


def test_json_round_trip(diagnosed):
    _, report = diagnosed
    text = render_report_text(report)
    assert parse_report(text).to_dict() == report.to_dict()
    assert render_report_text(parse_report(text)) == text


def test_report_tables_and_provenance(diagnosed, default_kg):
    state, report = diagnosed
    assert report.met_statuses() == {"IrregularCycles": "Yes", "ClinicalHA": "Yes", "BiochemicalHA": "Skipped",
                                     "PCOM": "Skipped"}
    assert [r["status"] for r in report.exclusion_table] == ["No", "No", "No"]
    assert report.kg_manifest_hash == default_kg.graph_hash()
    assert report.config_hash == CFG.config_hash()
    assert report.evidence_citations
    for c in report.evidence_citations:
        assert c["chunk_id"] in default_kg.chunks
    assert all(r["source"] == "graph" and r["citations"] for r in report.recommendations)


def test_markdown_rendering(diagnosed):
    _, report = diagnosed
    text = render_report_text(report, "markdown").decode()
    assert "**PCOS_CONFIRMED**" in text
    assert "## Rotterdam criteria" in text and "## Exclusion screens" in text
    assert f"config {report.config_hash[:12]}" in text
    with pytest.raises(ValueError):
        render_report_text(report, "pdf")


def test_without_graph_recommendations_fall_back(case1):
    _, report = run_diagnosis(case1, None, RuleOracleBackend(), CFG, session_id="s", clock=FixedClock())
    assert report.kg_manifest_hash is None and report.evidence_citations == []
    assert {r["source"] for r in report.recommendations} == {"template-default"}
    assert any(f["kind"] == "recommendations-template-default" for f in report.risk_flags)


def test_narrative_falls_back_to_template(case1):
    state, report = run_diagnosis(case1, None, FailingBackend(Step.REPORT), CFG, session_id="s",
                                  clock=FixedClock())
    assert report.narrative == template_summary(report_facts(state))
    assert any(f["kind"] == "narrative-template-fallback" for f in report.risk_flags)
    assert state.outcome.kind.value == "PCOS_CONFIRMED"


def test_borderline_flags():
    near = make_record(biochemistry__tsh=CFG.tsh_upper.value * 1.05)
    far = make_record(biochemistry__tsh=CFG.tsh_upper.value * 1.2)
    assert [(f["field"], f["threshold"]) for f in borderline_flags(near, CFG)] == [("biochemistry.tsh",
                                                                                  "tsh_upper")]
    assert borderline_flags(far, CFG) == []


def test_cost_matches_agent_calls(case1):
    state, report = run_diagnosis(case1, None, MeteredBackend(), CFG, session_id="s", clock=FixedClock())
    calls = [e for e in state.events if e["event"] == "agent_call"]
    assert report.cost["calls"] == len(calls) == 3
    assert report.cost["prompt_tokens"] == sum(e["usage"]["prompt_tokens"] for e in calls)
    assert sum(s["calls"] for s in report.cost["per_step"].values()) == 3


def test_report_needs_an_outcome_and_format():
    with pytest.raises(ValueError):
        generate_report(WorkflowState("s", "p"), None, RuleOracleBackend())
    with pytest.raises(ValueError, match="format"):
        parse_report(json.dumps({"format": "other"}))
