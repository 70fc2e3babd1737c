"""Role / task / guideline / knowledge / constraint prompt assembly."""
from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass
from typing import Any, Mapping

from .. import _canonical
from ..errors import PromptAssemblyError
from ..patient import FIELDS
from ..rules import ANDROGEN_CUTOFFS, ThresholdConfig
from .roles import ROLE_PREAMBLES, STEP_SPECS, AgentRole, Step

logger = logging.getLogger(__name__)

SECTION_HEADERS = (
    "[SYSTEM ROLE]",
    "[TASK INPUT]",
    "[DIAGNOSTIC GUIDELINES (Static Rules)]",
    "[KNOWLEDGE BASE INFORMATION (Dynamic Injection)]",
    "[OUTPUT CONSTRAINT]",
)
REMINDER = "Return only the JSON object, with no other text."
NO_KNOWLEDGE = "(no knowledge retrieved)"


@dataclass(frozen=True)
class PromptSpec:
    role: AgentRole
    step: Step
    role_preamble: str
    task: str
    task_input: str  # canonical JSON
    static_guidelines: str
    injected_knowledge: str
    output_schema: str
    input_label: str = "Patient Data JSON"
    reminder: bool = False

    def render(self) -> str:
        constraint = self.output_schema + (f"\n{REMINDER}" if self.reminder else "")
        parts = [
            (SECTION_HEADERS[0], self.role_preamble),
            (SECTION_HEADERS[1], f"{self.task}\n{self.input_label}: {self.task_input}"),
            (SECTION_HEADERS[2], self.static_guidelines),
            (SECTION_HEADERS[3], self.injected_knowledge or NO_KNOWLEDGE),
            (SECTION_HEADERS[4], constraint),
        ]
        return "\n\n".join(f"{h}\n{body}" for h, body in parts) + "\n"

    def prompt_hash(self) -> str:
        return _canonical.sha256_hex(self.render())

    def with_reminder(self) -> "PromptSpec":
        return dataclasses.replace(self, reminder=True)


def _g(x) -> str:
    return f"{x:g}"


def render_guidelines(step: Step, cfg: ThresholdConfig) -> str:
    v = cfg.value
    if step is Step.STEP1:
        return "\n".join([
            f"- Irregular cycles: more than {_g(v('post_menarche_years_gate'))} years post-menarche, irregular if "
            f"< {_g(v('cycle_short_days'))} or > {_g(v('cycle_long_days'))} days OR "
            f"< {_g(v('min_cycles_per_year'))} cycles/year. Any single cycle > "
            f"{_g(v('single_cycle_irregular_days'))} days is irregular.",
            f"- Hyperandrogenism: primary sign is hirsutism (Ferriman-Gallwey >= {_g(v('fg_cutoff'))}). "
            "Secondary signs are acne and alopecia, which are weak when isolated.",
        ])
    if step is Step.STEP2:
        lines = []
        for path, name in ANDROGEN_CUTOFFS:
            t = getattr(cfg, name)
            if t is not None:
                lines.append(f"- {path.split('.', 1)[1]}: elevated if > {_g(t.value)} {t.unit}")
        return "Biochemical hyperandrogenism is present if any marker is elevated:\n" + "\n".join(lines)
    if step is Step.STEP3:
        return (f"- PCOM is present if either ovary has a follicle number >= "
                f"{_g(v('follicle_count_per_ovary_min'))} OR an ovarian volume >= "
                f"{_g(v('ovarian_volume_ml_min'))} mL.")
    if step is Step.EXCLUSION:
        return "\n".join([
            f"- NCCAH: suspected if 17-hydroxyprogesterone > {_g(v('ohp17_upper'))} {cfg.ohp17_upper.unit}.",
            f"- Thyroid dysfunction: suspected if TSH < {_g(v('tsh_lower'))} or > {_g(v('tsh_upper'))} "
            f"{cfg.tsh_upper.unit}.",
            f"- Hyperprolactinemia: suspected if prolactin > {_g(v('prolactin_upper'))} "
            f"{cfg.prolactin_upper.unit}.",
        ])
    raise ValueError(f"no guidelines for {step}")


def render_knowledge(knowledge) -> str:
    if knowledge is None or not knowledge.items:
        return ""
    lines = []
    for item in knowledge.items:
        cites = ", ".join(f"{c.doc_id}/{c.chunk_id}" for c in item.citations)
        lines.append(f"- [{item.entity_id}] {item.name}: {item.context} (source: {cites})")
    return "\n".join(lines)


def criteria_schema(keys) -> str:
    body = ",\n".join(
        f'  "{k}": {{"status": "Yes/No/Uncertain", "reasoning": "brief rationale following the guidelines"}}'
        for k in keys
    )
    return "Output a single JSON object evaluating the criteria:\n{\n" + body + "\n}"


def _flatten(obj: Mapping[str, Any], prefix: str = "") -> list[str]:
    out = []
    for k, val in obj.items():
        path = f"{prefix}{k}"
        if isinstance(val, Mapping) and path not in FIELDS:
            out.extend(_flatten(val, path + "."))
        else:
            out.append(path)
    return out


def assemble_prompt(role: AgentRole, step: Step, patient_slice: Mapping[str, Any], cfg: ThresholdConfig,
                    knowledge=None, strict: bool = True) -> PromptSpec:
    """Build the prompt for one diagnostic step.

    In strict mode a slice carrying fields outside the step's declared slice is
    rejected; otherwise the extra fields are dropped.
    """
    spec = STEP_SPECS.get(step)
    if spec is None:
        raise PromptAssemblyError(f"{step} is not a diagnostic step")
    if role is not spec.role:
        raise PromptAssemblyError(f"{step.value} is handled by {spec.role.value}, not {role.value}")
    extra = sorted(set(_flatten(patient_slice)) - set(spec.slice_fields))
    if extra:
        if strict:
            raise PromptAssemblyError(f"{step.value} slice carries fields outside its scope: {', '.join(extra)}")
        logger.warning("dropping out-of-scope fields from %s slice: %s", step.value, extra)
        patient_slice = _restrict(patient_slice, spec.slice_fields)
    return PromptSpec(
        role=role,
        step=step,
        role_preamble=ROLE_PREAMBLES[role],
        task=spec.task,
        task_input=_canonical.dumps(patient_slice),
        static_guidelines=render_guidelines(step, cfg),
        injected_knowledge=render_knowledge(knowledge),
        output_schema=criteria_schema(spec.reply_keys),
    )


def _restrict(obj: Mapping[str, Any], allowed, prefix: str = "") -> dict:
    out = {}
    for k, val in obj.items():
        path = f"{prefix}{k}"
        if isinstance(val, Mapping) and path not in FIELDS:
            sub = _restrict(val, allowed, path + ".")
            if sub:
                out[k] = sub
        elif path in allowed:
            out[k] = val
    return out


def assemble_extraction_prompt(notes: str) -> PromptSpec:
    fields = "\n".join(
        f"- {p}" + (f" ({s.unit})" if s.unit else "") for p, s in FIELDS.items() if p != "imaging.narrative"
    )
    schema = ('Output a single JSON object:\n{"fields": {"<field>": {"value": <number|string|boolean>, '
              '"unit": "<unit or null>", "span": [<start char>, <end char>], "status": "certain/uncertain"}}}\n'
              "Include only fields stated in the text. span indexes the characters of the text that state the value.")
    return PromptSpec(
        role=AgentRole.EXTRACTION, step=Step.RECORD_EXTRACTION,
        role_preamble=ROLE_PREAMBLES[AgentRole.EXTRACTION],
        task="Extract the patient fields listed in the guidelines from the clinical note.",
        task_input=_canonical.dumps({"text": notes}),
        static_guidelines="Recognised fields and their units:\n" + fields,
        injected_knowledge="",
        output_schema=schema,
        input_label="Clinical note JSON",
    )


def assemble_entity_prompt(chunk, ontology) -> PromptSpec:
    labels = "\n".join(f"- {k}: {v}" for k, v in sorted(ontology.labels.items()))
    return PromptSpec(
        role=AgentRole.EXTRACTION, step=Step.ENTITY_EXTRACTION,
        role_preamble=ROLE_PREAMBLES[AgentRole.EXTRACTION],
        task="Extract the clinical entities mentioned in the guideline passage.",
        task_input=_canonical.dumps({"chunk_id": chunk.chunk_id, "text": chunk.text,
                                     "ontology_labels": sorted(ontology.labels)}),
        static_guidelines="Entity types (use exactly one label per entity):\n" + labels,
        injected_knowledge="",
        output_schema=('Output a single JSON object:\n{"entities": [{"name": "<exact mention from the text>", '
                       '"type": "<label>", "context": "<one-sentence summary of what the passage says about it>"}]}'),
        input_label="Passage JSON",
    )


def assemble_relation_prompt(chunk, entities) -> PromptSpec:
    payload = {
        "chunk_id": chunk.chunk_id,
        "text": chunk.text,
        "entities": [{"id": e.entity_id, "name": e.name, "type": e.type, "context": e.context} for e in entities],
    }
    return PromptSpec(
        role=AgentRole.EXTRACTION, step=Step.RELATION_EXTRACTION,
        role_preamble=ROLE_PREAMBLES[AgentRole.EXTRACTION],
        task="Identify directed diagnostic dependencies between the listed entities, using only this passage.",
        task_input=_canonical.dumps(payload),
        static_guidelines="Use only the entity ids provided. Relations must be stated or directly implied by "
                          "the passage. Use short snake_case relation labels.",
        injected_knowledge="",
        output_schema='Output a single JSON object:\n{"relations": [{"head": "<id>", "relation": "<label>", '
                      '"tail": "<id>"}]}',
        input_label="Passage JSON",
    )


def assemble_report_prompt(facts: Mapping[str, Any], knowledge=None) -> PromptSpec:
    return PromptSpec(
        role=AgentRole.REPORTING, step=Step.REPORT,
        role_preamble=ROLE_PREAMBLES[AgentRole.REPORTING],
        task="Summarise the completed assessment for the treating clinician. The outcome is final.",
        task_input=_canonical.dumps(facts),
        static_guidelines="Two of three Rotterdam criteria (irregular cycles, hyperandrogenism, PCOM) are "
                          "required, and other causes must be excluded.",
        injected_knowledge=render_knowledge(knowledge),
        output_schema='Output a single JSON object:\n{"summary": "<three to five sentences>"}',
        input_label="Findings JSON",
    )
