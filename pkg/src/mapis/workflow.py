"""Coordinator state machine: staged two-of-three assessment, then exclusion.

Phase 1 runs up to three steps.  Step 1 (cycles and clinical signs) can settle
candidacy on its own; step 2 (androgen panel) runs only when step 1 did not;
step 3 (ultrasound) runs only while candidacy is undecided and still
reachable.  Phase 2 screens for mimicking conditions and runs only for
candidates.
"""
from __future__ import annotations

import itertools
import logging
import uuid
from dataclasses import dataclass, field
from datetime import datetime, timezone
from enum import Enum
from typing import Any, Callable, Mapping

from . import _canonical
from .agents.backends import Usage
from .agents.prompts import assemble_prompt
from .agents.replies import call_with_retry, parse_reply
from .agents.roles import STEP_SPECS, AgentRole, Step
from .errors import BackendError
from .kg.embedding import EmbeddingBackend, HashingEmbedder, embedder_from_id
from .kg.graph import KnowledgeGraph
from .kg.linking import with_ehr_layer
from .kg.retrieval import RetrievalResult, u_retrieve
from .patient import PatientRecord, record_slice
from .rules import (CRITERION_FIELDS, EXCLUSION_IDS, CriterionId, CriterionResult, CriterionStatus, ThresholdConfig,
                    evaluate_criterion)

logger = logging.getLogger(__name__)

YES, NO, UNCERTAIN = CriterionStatus.YES, CriterionStatus.NO, CriterionStatus.UNCERTAIN
PHASE1 = (CriterionId.IRREGULAR_CYCLES, CriterionId.CLINICAL_HA, CriterionId.BIOCHEMICAL_HA, CriterionId.PCOM)
STEP_ORDER = (Step.STEP1, Step.STEP2, Step.STEP3, Step.EXCLUSION, Step.REPORT)


class UncertainPolicy(str, Enum):
    DEFAULT = "default"
    STRICT = "strict"


class OutcomeKind(str, Enum):
    CONFIRMED = "PCOS_CONFIRMED"
    EXCLUDED = "PCOS_EXCLUDED"
    ALTERNATIVE = "ALTERNATIVE"
    INDETERMINATE = "INDETERMINATE"


class AlternativeCause(str, Enum):
    NCCAH = "NCCAH"
    THYROID = "Thyroid"
    PROLACTIN = "Hyperprolactinemia"


CAUSE_OF = {CriterionId.NCCAH: AlternativeCause.NCCAH, CriterionId.THYROID: AlternativeCause.THYROID,
            CriterionId.PROLACTIN: AlternativeCause.PROLACTIN}


@dataclass(frozen=True)
class DiagnosisOutcome:
    kind: OutcomeKind
    cause: AlternativeCause | None = None
    missing: tuple[str, ...] = ()

    def __post_init__(self):
        if (self.kind is OutcomeKind.ALTERNATIVE) != (self.cause is not None):
            raise ValueError("ALTERNATIVE carries exactly one cause; other outcomes carry none")
        if (self.kind is OutcomeKind.INDETERMINATE) != bool(self.missing):
            raise ValueError("INDETERMINATE lists at least one missing field; other outcomes list none")

    @property
    def label(self) -> str:
        if self.cause is not None:
            return f"{self.kind.value}({self.cause.value})"
        if self.missing:
            return f"{self.kind.value}({', '.join(self.missing)})"
        return self.kind.value

    def to_dict(self) -> dict:
        out: dict[str, Any] = {"kind": self.kind.value}
        if self.cause is not None:
            out["cause"] = self.cause.value
        if self.missing:
            out["missing"] = list(self.missing)
        return out

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "DiagnosisOutcome":
        cause = d.get("cause")
        return cls(OutcomeKind(d["kind"]), AlternativeCause(cause) if cause else None, tuple(d.get("missing", ())))


CONFIRMED = DiagnosisOutcome(OutcomeKind.CONFIRMED)
EXCLUDED = DiagnosisOutcome(OutcomeKind.EXCLUDED)


# -- gate ------------------------------------------------------------------

def _met(status: CriterionStatus | None) -> bool:
    return status is YES


def gate_two_of_three(cyc, clin, bio, pcom, policy: UncertainPolicy = UncertainPolicy.DEFAULT) -> bool:
    """Two of {irregular cycles, hyperandrogenism (clinical or biochemical), PCOM} are met.

    A criterion counts as met only when its status is Yes; ``None`` (not
    evaluated) behaves like Uncertain.  Both policies share this predicate:
    strict mode acts on Uncertain at the outcome level, not in the count.
    """
    ha = _met(clin) or _met(bio)
    return sum((_met(cyc), ha, _met(pcom))) >= 2


def gate_reachable(statuses: Mapping[CriterionId, CriterionStatus], policy: UncertainPolicy) -> bool:
    """Could the gate still pass if every open criterion turned out Yes?

    Unevaluated criteria are always open.  Evaluated Uncertain results are open
    only under the strict policy, where an unresolved finding must not be
    silently read as absent.
    """
    def open_(cid):
        s = statuses.get(cid)
        return s is None or (policy is UncertainPolicy.STRICT and s is UNCERTAIN)

    choices = [(YES,) if statuses.get(c) is YES else ((YES, NO) if open_(c) else (NO,)) for c in PHASE1]
    return any(gate_two_of_three(*combo) for combo in itertools.product(*choices))


# -- state -------------------------------------------------------------------

def utc_clock() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="milliseconds")


@dataclass
class StepRecord:
    step: Step
    agent_role: AgentRole
    timestamp: str
    usage: Usage
    attempts: int
    prompt_hash: str

    def to_dict(self) -> dict:
        return {"step": self.step.value, "agent_role": self.agent_role.value, "timestamp": self.timestamp,
                "usage": self.usage.to_dict(), "attempts": self.attempts, "prompt_hash": self.prompt_hash}

    @classmethod
    def from_dict(cls, d) -> "StepRecord":
        return cls(Step(d["step"]), AgentRole(d["agent_role"]), d["timestamp"], Usage.from_dict(d["usage"]),
                   d["attempts"], d["prompt_hash"])


@dataclass
class ExclusionOutcome:
    results: list[CriterionResult]
    passed: bool  # every screen is No
    causes: list[AlternativeCause]  # all triggered causes, in priority order
    unexcluded: list[CriterionId]  # screens left Uncertain
    missing: list[str]

    @property
    def cause(self) -> AlternativeCause | None:
        return self.causes[0] if self.causes else None


class StateError(RuntimeError):
    pass


@dataclass
class WorkflowState:
    session_id: str
    patient_id: str
    policy: UncertainPolicy = UncertainPolicy.DEFAULT
    config_hash: str = ""
    backend: dict = field(default_factory=dict)
    step_results: dict[CriterionId, CriterionResult] = field(default_factory=dict)
    steps_executed: list[StepRecord] = field(default_factory=list)
    candidate: bool = False
    outcome: DiagnosisOutcome | None = None
    knowledge: dict[str, list[str]] = field(default_factory=dict)  # step -> retrieved entity ids
    ehr_links: list[dict] = field(default_factory=list)
    diagnostics: list[str] = field(default_factory=list)
    events: list[dict] = field(default_factory=list)
    clock: Callable[[], str] = field(default=utc_clock, repr=False, compare=False)

    # mutation -----------------------------------------------------------
    def log(self, event: str, step: Step | None = None, payload: Any = None, usage: Usage | None = None) -> dict:
        entry = {
            "session_id": self.session_id,
            "event": event,
            "step": step.value if step else None,
            "payload_hash": _canonical.sha256_hex(payload if isinstance(payload, str) else _canonical.dumps(payload)),
            "usage": (usage or Usage()).to_dict(),
            "timestamp": self.clock(),
        }
        self.events.append(entry)
        return entry

    def record_step(self, rec: StepRecord) -> None:
        if rec.step is not Step.REPORT and self.steps_executed:
            last = self.steps_executed[-1].step
            if STEP_ORDER.index(rec.step) <= STEP_ORDER.index(last):
                raise StateError(f"{rec.step.value} cannot follow {last.value}")
        self.steps_executed.append(rec)

    def set_outcome(self, outcome: DiagnosisOutcome) -> None:
        if self.outcome is not None:
            raise StateError("outcome already set")
        self.outcome = outcome
        self.log("outcome", payload=outcome.to_dict())

    # queries --------------------------------------------------------------
    def status(self, cid: CriterionId) -> CriterionStatus | None:
        r = self.step_results.get(cid)
        return r.status if r else None

    def statuses(self) -> dict[CriterionId, CriterionStatus]:
        return {cid: r.status for cid, r in self.step_results.items()}

    def ran(self, step: Step) -> bool:
        return any(r.step is step for r in self.steps_executed)

    def total_usage(self) -> Usage:
        total = Usage()
        for e in self.events:
            total = total + Usage.from_dict(e["usage"])
        return total

    # persistence -----------------------------------------------------------
    def to_dict(self) -> dict:
        order = list(CriterionId)
        return {
            "format": "mapis.session/1",
            "session_id": self.session_id,
            "patient_id": self.patient_id,
            "policy": self.policy.value,
            "config_hash": self.config_hash,
            "backend": self.backend,
            "step_results": [self.step_results[c].to_dict() for c in sorted(self.step_results, key=order.index)],
            "steps_executed": [r.to_dict() for r in self.steps_executed],
            "candidate": self.candidate,
            "outcome": self.outcome.to_dict() if self.outcome else None,
            "knowledge": self.knowledge,
            "ehr_links": self.ehr_links,
            "diagnostics": self.diagnostics,
            "events": self.events,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "WorkflowState":
        results = [CriterionResult.from_dict(x) for x in d.get("step_results", [])]
        return cls(
            session_id=d["session_id"], patient_id=d["patient_id"], policy=UncertainPolicy(d["policy"]),
            config_hash=d.get("config_hash", ""), backend=dict(d.get("backend", {})),
            step_results={r.criterion_id: r for r in results},
            steps_executed=[StepRecord.from_dict(x) for x in d.get("steps_executed", [])],
            candidate=bool(d.get("candidate")),
            outcome=DiagnosisOutcome.from_dict(d["outcome"]) if d.get("outcome") else None,
            knowledge={k: list(v) for k, v in d.get("knowledge", {}).items()},
            ehr_links=list(d.get("ehr_links", [])), diagnostics=list(d.get("diagnostics", [])),
            events=list(d.get("events", [])),
        )

    def audit_lines(self) -> bytes:
        return b"".join(_canonical.dump_bytes(e) + b"\n" for e in self.events)


def should_terminate_early(state: WorkflowState) -> bool:
    """True when no outcome of the not-yet-evaluated criteria can reach two of three."""
    return not gate_reachable(state.statuses(), state.policy)


# -- running steps -------------------------------------------------------------

@dataclass
class _Context:
    record: PatientRecord
    graph: KnowledgeGraph | None
    backend: Any
    cfg: ThresholdConfig
    embedder: EmbeddingBackend
    k: int
    retries: int
    state: WorkflowState


def _retrieve(ctx: _Context, query: str) -> RetrievalResult | None:
    if ctx.graph is None or ctx.graph.is_empty() or ctx.k <= 0:
        return None
    return u_retrieve(query, ctx.graph, ctx.embedder, ctx.k)


def _missing_for(result: CriterionResult, record: PatientRecord) -> list[str]:
    if result.reason and result.reason.startswith("missing:"):
        return [f for f in result.reason[len("missing:"):].split(",") if f]
    absent = [f for f in CRITERION_FIELDS[result.criterion_id] if record.get(f) is None]
    # nothing absent: the finding itself is unresolved (e.g. only secondary signs)
    return absent or [result.criterion_id.value]


def run_step(ctx: _Context, step: Step) -> list[CriterionResult]:
    spec = STEP_SPECS[step]
    state = ctx.state
    knowledge = _retrieve(ctx, spec.knowledge_query)
    prompt = assemble_prompt(spec.role, step, record_slice(ctx.record, spec.slice_fields), ctx.cfg, knowledge)
    try:
        reply, calls = call_with_retry(ctx.backend, prompt, lambda t: parse_reply(t, spec.reply_keys), ctx.retries)
    except BackendError as exc:
        for p, c in getattr(exc, "calls", []):
            state.log("agent_call", step, p.render(), c.usage)
        state.log("agent_error", step, {"error": str(exc)})
        raise
    usage = Usage()
    for p, c in calls:
        state.log("agent_call", step, p.render(), c.usage)
        usage = usage + c.usage
    state.record_step(StepRecord(step, spec.role, state.clock(), usage, len(calls), calls[-1][0].prompt_hash()))
    evidence = tuple(knowledge.entity_ids()) if knowledge else ()
    if knowledge:
        state.knowledge[step.value] = list(evidence)
    state.diagnostics.extend(f"{step.value}: {d}" for d in reply.parse_diagnostics)
    out = []
    for key, cid in spec.criteria:
        answer = reply.criteria[key]
        # the rule engine checks every answer and supplies machine-readable reasons
        check = evaluate_criterion(cid, ctx.record, ctx.cfg)
        if check.status is not answer.status:
            state.diagnostics.append(f"{cid.value}: agent said {answer.status.value}, rules say {check.status.value}")
        reason = check.reason if answer.status is UNCERTAIN and check.status is UNCERTAIN else None
        result = CriterionResult(cid, answer.status, answer.reasoning, evidence,
                                 tuple(f for f in CRITERION_FIELDS[cid] if ctx.record.get(f) is not None), reason)
        if result.status is UNCERTAIN and result.reason is None:
            result = CriterionResult(cid, result.status, result.reasoning, result.evidence, result.inputs_used,
                                     "unresolved:" + ",".join(_missing_for(result, ctx.record)))
        state.step_results[cid] = result
        out.append(result)
    return out


def _exclusion_outcome(results: list[CriterionResult], record: PatientRecord) -> ExclusionOutcome:
    causes = [CAUSE_OF[r.criterion_id] for r in results if r.status is YES]
    unexcluded = [r.criterion_id for r in results if r.status is UNCERTAIN]
    missing = [f for r in results if r.status is UNCERTAIN for f in _missing_for(r, record)]
    return ExclusionOutcome(results, all(r.status is NO for r in results), causes, unexcluded, missing)


def run_exclusion_phase(p: PatientRecord, kg: KnowledgeGraph | None, backend, cfg: ThresholdConfig, *,
                        state: WorkflowState | None = None, embedder: EmbeddingBackend | None = None, k: int = 5,
                        retries: int = 1) -> ExclusionOutcome:
    """Screen for NCCAH, thyroid dysfunction and hyperprolactinemia."""
    if state is None:
        state = WorkflowState(session_id=f"exclusion-{p.patient_id}", patient_id=p.patient_id, candidate=True)
    if not state.candidate:
        raise StateError("the exclusion phase runs only for candidates")
    ctx = _Context(p, kg, backend, cfg, embedder or _default_embedder(kg), k, retries, state)
    results = run_step(ctx, Step.EXCLUSION)
    return _exclusion_outcome([r for cid in EXCLUSION_IDS for r in results if r.criterion_id is cid], p)


def _default_embedder(kg: KnowledgeGraph | None) -> EmbeddingBackend:
    embedder_id = (kg.manifest.get("embedder") if kg is not None else None)
    return embedder_from_id(embedder_id) if embedder_id else HashingEmbedder()


def decisive_uncertain(statuses: Mapping[CriterionId, CriterionStatus]) -> list[CriterionId]:
    """Uncertain criteria whose resolution can flip the gate for some reading of the others."""
    open_ = [c for c in PHASE1 if statuses.get(c) in (None, UNCERTAIN)]
    out = []
    for cid in open_:
        if statuses.get(cid) is not UNCERTAIN:
            continue
        others = [c for c in open_ if c is not cid]
        for combo in itertools.product((YES, NO), repeat=len(others)):
            trial = {**statuses, **dict(zip(others, combo))}
            if gate_two_of_three(*(YES if c is cid else trial.get(c) for c in PHASE1)) != gate_two_of_three(
                    *(NO if c is cid else trial.get(c) for c in PHASE1)):
                out.append(cid)
                break
    return out


def _indeterminate_fields(state: WorkflowState, record: PatientRecord) -> list[str]:
    fields: list[str] = []
    for cid in decisive_uncertain(state.statuses()):
        for f in _missing_for(state.step_results[cid], record):
            if f not in fields:
                fields.append(f)
    return fields


def run_phase_one(ctx: _Context) -> None:
    state = ctx.state
    run_step(ctx, Step.STEP1)
    cyc, clin = state.status(CriterionId.IRREGULAR_CYCLES), state.status(CriterionId.CLINICAL_HA)
    if cyc is YES and clin is YES:
        state.candidate = True
        return
    run_step(ctx, Step.STEP2)
    if cyc is YES and state.status(CriterionId.BIOCHEMICAL_HA) is YES:
        state.candidate = True
        return
    if should_terminate_early(state):
        state.log("early_termination", payload={k.value: v.value for k, v in state.statuses().items()})
        return
    run_step(ctx, Step.STEP3)
    state.candidate = gate_two_of_three(*(state.status(c) for c in PHASE1))


def run_diagnosis(p: PatientRecord, kg: KnowledgeGraph | None, backend, cfg: ThresholdConfig,
                  policy: UncertainPolicy = UncertainPolicy.DEFAULT, *, embedder: EmbeddingBackend | None = None,
                  k: int = 5, min_score: float = 0.0, retries: int = 1, session_id: str | None = None,
                  clock: Callable[[], str] = utc_clock, config_hash: str | None = None):
    """Run one case end to end and return ``(state, report)``.

    ``config_hash`` defaults to the threshold hash; the engine passes the hash
    of its whole configuration instead.

    A :class:`BackendError` propagates with the partial state attached as
    ``exc.state`` so the caller can persist the audit trail.
    """
    from .reporting import generate_report

    embedder = embedder or _default_embedder(kg)
    state = WorkflowState(
        session_id=session_id or uuid.uuid4().hex, patient_id=p.patient_id, policy=UncertainPolicy(policy),
        config_hash=config_hash or cfg.config_hash(), backend=backend.info.to_dict(), clock=clock,
    )
    state.log("session_start", payload=p.to_dict())
    graph = kg
    if kg is not None and not kg.is_empty():
        graph = with_ehr_layer(kg, p, embedder, k=3, min_score=min_score)
        ehr_ids = {e.entity_id for e in graph.entities.values() if e.layer.value == "Top"}
        state.ehr_links = [lk.to_dict() for lk in graph.links if lk.from_entity in ehr_ids]
    ctx = _Context(p, graph, backend, cfg, embedder, k, retries, state)
    try:
        run_phase_one(ctx)
        if not state.candidate:
            missing = _indeterminate_fields(state, p) if state.policy is UncertainPolicy.STRICT else []
            state.set_outcome(DiagnosisOutcome(OutcomeKind.INDETERMINATE, missing=tuple(missing)) if missing
                              else EXCLUDED)
        else:
            exc_outcome = run_exclusion_phase(p, graph, backend, cfg, state=state, embedder=embedder, k=k,
                                              retries=retries)
            if exc_outcome.causes:
                state.set_outcome(DiagnosisOutcome(OutcomeKind.ALTERNATIVE, cause=exc_outcome.cause))
            elif exc_outcome.unexcluded and state.policy is UncertainPolicy.STRICT:
                state.set_outcome(DiagnosisOutcome(OutcomeKind.INDETERMINATE, missing=tuple(exc_outcome.missing)))
            else:
                state.set_outcome(CONFIRMED)
    except BackendError as exc:
        exc.state = state
        raise
    report = generate_report(state, kg, backend, embedder=embedder, k=k, record=p, cfg=cfg)
    return state, report
