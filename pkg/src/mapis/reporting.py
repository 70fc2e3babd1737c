"""Final report: criteria and exclusion tables, recommendations, flags, cost."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Any, Mapping

from . import __version__, _canonical
from .agents.backends import Usage
from .agents.oracle import template_summary
from .agents.prompts import assemble_report_prompt
from .agents.replies import call_with_retry, parse_json_payload
from .agents.roles import AgentRole, Step
from .errors import BackendError, EmbedError, EmptyGraph, ReplyError
from .kg.embedding import EmbeddingBackend
from .kg.graph import KnowledgeGraph
from .kg.retrieval import u_retrieve
from .patient import PatientRecord
from .rules import ANDROGEN_CUTOFFS, EXCLUSION_IDS, CriterionId, ThresholdConfig
from .workflow import PHASE1, DiagnosisOutcome, OutcomeKind, StepRecord, WorkflowState

logger = logging.getLogger(__name__)

REPORT_FORMAT = "mapis.report/1"
SKIPPED = "Skipped"
BORDERLINE_FRACTION = 0.10
STEP_OF = {
    CriterionId.IRREGULAR_CYCLES: Step.STEP1, CriterionId.CLINICAL_HA: Step.STEP1,
    CriterionId.BIOCHEMICAL_HA: Step.STEP2, CriterionId.PCOM: Step.STEP3,
    CriterionId.NCCAH: Step.EXCLUSION, CriterionId.THYROID: Step.EXCLUSION, CriterionId.PROLACTIN: Step.EXCLUSION,
}


@dataclass
class DiagnosticReport:
    session_id: str
    patient_id: str
    outcome: DiagnosisOutcome
    candidate: bool
    criteria_table: list[dict]
    exclusion_table: list[dict]
    evidence_citations: list[dict]
    recommendations: list[dict]
    risk_flags: list[dict]
    narrative: str
    cost: dict
    engine_version: str
    config_hash: str
    kg_manifest_hash: str | None
    backend: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "format": REPORT_FORMAT,
            "session_id": self.session_id,
            "patient_id": self.patient_id,
            "outcome": self.outcome.to_dict(),
            "outcome_label": self.outcome.label,
            "candidate": self.candidate,
            "criteria_table": self.criteria_table,
            "exclusion_table": self.exclusion_table,
            "evidence_citations": self.evidence_citations,
            "recommendations": self.recommendations,
            "risk_flags": self.risk_flags,
            "narrative": self.narrative,
            "cost": self.cost,
            "engine_version": self.engine_version,
            "config_hash": self.config_hash,
            "kg_manifest_hash": self.kg_manifest_hash,
            "backend": self.backend,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "DiagnosticReport":
        if d.get("format") != REPORT_FORMAT:
            raise ValueError(f"report format must be {REPORT_FORMAT!r}")
        return cls(
            d["session_id"], d["patient_id"], DiagnosisOutcome.from_dict(d["outcome"]), bool(d["candidate"]),
            list(d["criteria_table"]), list(d["exclusion_table"]), list(d["evidence_citations"]),
            list(d["recommendations"]), list(d["risk_flags"]), d["narrative"], dict(d["cost"]),
            d["engine_version"], d["config_hash"], d.get("kg_manifest_hash"), dict(d.get("backend", {})),
        )

    def met_statuses(self) -> dict[str, str]:
        return {row["criterion_id"]: row["status"] for row in self.criteria_table}


# -- tables -----------------------------------------------------------------

def _row(state: WorkflowState, cid: CriterionId) -> dict:
    result = state.step_results.get(cid)
    step = STEP_OF[cid].value
    if result is None:
        return {"criterion_id": cid.value, "step": step, "status": SKIPPED,
                "reasoning": "Step not executed by the workflow.", "evidence": [], "inputs_used": []}
    return {"step": step, **result.to_dict()}


def _graph_hash(kg: KnowledgeGraph) -> str:
    cached = kg.__dict__.get("_graph_hash")
    if cached is None:
        cached = kg.__dict__["_graph_hash"] = kg.graph_hash()
    return cached


def _citations(kg: KnowledgeGraph | None, entity_ids) -> list[dict]:
    if kg is None:
        return []
    out = {}
    for eid in entity_ids:
        if eid not in kg.entities:
            continue
        for c in kg.citations(eid):
            out[(eid, c.chunk_id)] = {"entity_id": eid, **c.to_dict()}
    return [out[k] for k in sorted(out)]


# -- risk flags ----------------------------------------------------------------

def _near(value: float, cutoff: float) -> bool:
    return abs(value - cutoff) <= BORDERLINE_FRACTION * cutoff


def borderline_flags(record: PatientRecord, cfg: ThresholdConfig) -> list[dict]:
    """Present values within 10% of a cutoff they are compared against."""
    checks = [
        ("menstrual.typical_cycle_min_days", "cycle_short_days"),
        ("menstrual.typical_cycle_max_days", "cycle_long_days"),
        ("menstrual.cycles_per_year", "min_cycles_per_year"),
        ("menstrual.longest_single_cycle_days", "single_cycle_irregular_days"),
        ("clinical_signs.ferriman_gallwey_score", "fg_cutoff"),
        *ANDROGEN_CUTOFFS,
        ("imaging.follicle_count_left", "follicle_count_per_ovary_min"),
        ("imaging.follicle_count_right", "follicle_count_per_ovary_min"),
        ("imaging.ovarian_volume_left_ml", "ovarian_volume_ml_min"),
        ("imaging.ovarian_volume_right_ml", "ovarian_volume_ml_min"),
        ("biochemistry.ohp_17", "ohp17_upper"),
        ("biochemistry.tsh", "tsh_lower"),
        ("biochemistry.tsh", "tsh_upper"),
        ("biochemistry.prolactin", "prolactin_upper"),
    ]
    flags = []
    for path, name in checks:
        t = getattr(cfg, name)
        raw = record.get(path)
        if t is None or raw is None:
            continue
        value = raw.value if hasattr(raw, "value") else raw
        if _near(value, t.value):
            flags.append({"kind": "borderline", "field": path, "value": value, "threshold": name,
                          "cutoff": t.value})
    return flags


def _state_flags(state: WorkflowState) -> list[dict]:
    flags = []
    unexcluded = [cid.value for cid in EXCLUSION_IDS
                  if cid in state.step_results and state.step_results[cid].status.value == "Uncertain"]
    if unexcluded and state.outcome.kind is OutcomeKind.CONFIRMED:
        flags.append({"kind": "unexcluded-differential", "criteria": unexcluded,
                      "detail": "Confirmed with caveats: these differentials were not ruled out."})
    triggered = [cid.value for cid in EXCLUSION_IDS
                 if cid in state.step_results and state.step_results[cid].status.value == "Yes"]
    if len(triggered) > 1:
        flags.append({"kind": "multiple-alternative-causes", "criteria": triggered})
    disagreements = [d for d in state.diagnostics if "rules say" in d]
    if disagreements:
        flags.append({"kind": "agent-rule-disagreement", "details": disagreements})
    return flags


# -- recommendations ---------------------------------------------------------------

def _recommendations(outcome: DiagnosisOutcome, kg: KnowledgeGraph | None, embedder, k: int):
    from .data import recommendation_templates

    templates = recommendation_templates()
    kind = outcome.kind.value
    defaults = [{"text": t, "citations": [], "source": "template-default"} for t in templates["defaults"][kind]]
    if kg is None or kg.is_empty() or embedder is None:
        return defaults, {"kind": "recommendations-template-default", "detail": "no knowledge graph available"}
    recs, seen = [], set()
    try:
        for query in templates["queries"][kind]:
            for item in u_retrieve(query, kg, embedder, max(1, k)).items[:1]:
                if item.entity_id in seen:
                    continue
                seen.add(item.entity_id)
                first = item.context.split(" | ")[0]
                recs.append({"text": f"{item.name}: {first}", "citations": [item.entity_id], "source": "graph"})
    except (EmbedError, EmptyGraph) as exc:
        logger.warning("recommendation retrieval failed: %s", exc)
        return defaults, {"kind": "recommendations-template-default", "detail": f"retrieval failed: {exc}"}
    return recs or defaults, None if recs else {"kind": "recommendations-template-default",
                                                  "detail": "retrieval returned nothing"}


# -- narrative -------------------------------------------------------------------

def report_facts(state: WorkflowState) -> dict:
    criteria = {cid.value: (state.step_results[cid].status.value if cid in state.step_results else SKIPPED)
                for cid in (*PHASE1, *EXCLUSION_IDS)}
    facts: dict[str, Any] = {"outcome": state.outcome.label, "criteria": criteria}
    if state.outcome.cause is not None:
        facts["cause"] = state.outcome.cause.value
    if state.outcome.missing:
        facts["missing"] = list(state.outcome.missing)
    return facts


def _parse_summary(text: str) -> str:
    obj, _ = parse_json_payload(text)
    if not isinstance(obj, dict) or not isinstance(obj.get("summary"), str) or not obj["summary"].strip():
        raise ReplyError("report reply needs a non-empty 'summary' string")
    return obj["summary"].strip()


def _narrative(state: WorkflowState, backend, facts: dict, retries: int) -> tuple[str, dict | None]:
    prompt = assemble_report_prompt(facts)
    try:
        summary, calls = call_with_retry(backend, prompt, _parse_summary, retries)
    except BackendError as exc:
        used = Usage()
        for p, c in getattr(exc, "calls", []):
            state.log("agent_call", Step.REPORT, p.render(), c.usage)
            used = used + c.usage
        state.log("agent_error", Step.REPORT, {"error": str(exc)})
        state.record_step(StepRecord(Step.REPORT, AgentRole.REPORTING, state.clock(), used,
                                     len(getattr(exc, "calls", [])), prompt.prompt_hash()))
        return template_summary(facts), {"kind": "narrative-template-fallback", "detail": str(exc)}
    used = Usage()
    for p, c in calls:
        state.log("agent_call", Step.REPORT, p.render(), c.usage)
        used = used + c.usage
    state.record_step(StepRecord(Step.REPORT, AgentRole.REPORTING, state.clock(), used, len(calls),
                                 calls[-1][0].prompt_hash()))
    return summary, None


def _cost(state: WorkflowState) -> dict:
    per_step: dict[str, dict] = {}
    for e in state.events:
        if e["event"] != "agent_call":
            continue
        s = per_step.setdefault(e["step"], {"calls": 0, "prompt_tokens": 0, "completion_tokens": 0,
                                            "total_tokens": 0, "wall_seconds": 0.0})
        u = e["usage"]
        s["calls"] += 1
        s["prompt_tokens"] += u["prompt_tokens"]
        s["completion_tokens"] += u["completion_tokens"]
        s["total_tokens"] += u["prompt_tokens"] + u["completion_tokens"]
        s["wall_seconds"] += u["wall_seconds"]
    total = state.total_usage()
    return {"prompt_tokens": total.prompt_tokens, "completion_tokens": total.completion_tokens,
            "total_tokens": total.total_tokens, "wall_seconds": total.wall_seconds,
            "calls": sum(1 for e in state.events if e["event"] == "agent_call"), "per_step": per_step}


def generate_report(state: WorkflowState, kg: KnowledgeGraph | None, backend, *,
                    embedder: EmbeddingBackend | None = None, k: int = 5, record: PatientRecord | None = None,
                    cfg: ThresholdConfig | None = None, retries: int = 1) -> DiagnosticReport:
    """Summarise a finished session.  Never raises for a completed session."""
    if state.outcome is None:
        raise ValueError("session has no outcome yet")
    facts = report_facts(state)
    narrative, narrative_flag = _narrative(state, backend, facts, retries)
    recs, rec_flag = _recommendations(state.outcome, kg, embedder, k)
    flags = _state_flags(state)
    if record is not None and cfg is not None:
        flags.extend(borderline_flags(record, cfg))
    flags.extend(f for f in (rec_flag, narrative_flag) if f)
    evidence = sorted({eid for ids in state.knowledge.values() for eid in ids}
                      | {c for r in recs for c in r["citations"]})
    state.log("report", Step.REPORT, facts)
    return DiagnosticReport(
        session_id=state.session_id,
        patient_id=state.patient_id,
        outcome=state.outcome,
        candidate=state.candidate,
        criteria_table=[_row(state, cid) for cid in PHASE1],
        exclusion_table=[_row(state, cid) for cid in EXCLUSION_IDS],
        evidence_citations=_citations(kg, evidence),
        recommendations=recs,
        risk_flags=flags,
        narrative=narrative,
        cost=_cost(state),
        engine_version=__version__,
        config_hash=state.config_hash,
        kg_manifest_hash=_graph_hash(kg) if kg is not None and kg.entities else None,
        backend=state.backend,
    )


# -- rendering -------------------------------------------------------------------

def _cell(text: Any) -> str:
    return str(text).replace("|", "\\|").replace("\n", " ")


def render_report_text(report: DiagnosticReport, format: str = "json") -> bytes:
    if format == "json":
        return _canonical.dump_bytes(report.to_dict(), indent=2)
    if format != "markdown":
        raise ValueError(f"unknown report format {format!r}")
    lines = [f"# Diagnostic report {report.session_id}", "",
             f"- Patient: {report.patient_id}", f"- Outcome: **{report.outcome.label}**",
             f"- Two-of-three candidate: {'yes' if report.candidate else 'no'}", ""]
    for title, rows in (("Rotterdam criteria", report.criteria_table), ("Exclusion screens", report.exclusion_table)):
        lines += [f"## {title}", "", "| Criterion | Step | Status | Reasoning |", "|---|---|---|---|"]
        lines += [f"| {_cell(r['criterion_id'])} | {r['step']} | {r['status']} | {_cell(r['reasoning'])} |"
                  for r in rows]
        lines.append("")
    lines += ["## Summary", "", report.narrative, "", "## Recommendations", ""]
    for r in report.recommendations:
        src = ", ".join(r["citations"]) if r["citations"] else r["source"]
        lines.append(f"- {r['text']} ({src})")
    lines += ["", "## Risk flags", ""]
    lines += [f"- {f['kind']}: {_cell(_flag_detail(f))}" for f in report.risk_flags] or ["- none"]
    lines += ["", "## Evidence", ""]
    lines += [f"- {c['entity_id']} ({c['doc_id']}/{c['chunk_id']})" for c in report.evidence_citations] or ["- none"]
    c = report.cost
    lines += ["", "## Cost", "", f"- Calls: {c['calls']}", f"- Tokens: {c['total_tokens']}",
              f"- Wall time: {c['wall_seconds']:.3f} s", "",
              f"Engine {report.engine_version}, config {report.config_hash[:12]}, "
              f"graph {(report.kg_manifest_hash or 'none')[:12]}.", ""]
    return "\n".join(lines).encode("utf-8")


def _flag_detail(flag: dict) -> str:
    if flag["kind"] == "borderline":
        return f"{flag['field']} = {flag['value']:g} near {flag['threshold']} {flag['cutoff']:g}"
    rest = {k: v for k, v in flag.items() if k != "kind"}
    return json.dumps(rest, sort_keys=True, ensure_ascii=False)


def parse_report(data: bytes | str) -> DiagnosticReport:
    return DiagnosticReport.from_dict(json.loads(data))
