"""Agent roles and the per-step contract (criteria keys, data slice, query)."""
from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

from ..patient import FIELDS
from ..rules import CriterionId


class AgentRole(str, Enum):
    COORDINATOR = "Coordinator"
    ENDOCRINE = "GynecologicalEndocrine"
    RADIOLOGY = "Radiology"
    EXCLUSION = "Exclusion"
    REPORTING = "Reporting"
    EXTRACTION = "Extraction"


class Step(str, Enum):
    STEP1 = "step1"
    STEP2 = "step2"
    STEP3 = "step3"
    EXCLUSION = "exclusion"
    REPORT = "report"
    RECORD_EXTRACTION = "record_extraction"
    ENTITY_EXTRACTION = "entity_extraction"
    RELATION_EXTRACTION = "relation_extraction"


@dataclass(frozen=True)
class StepSpec:
    step: Step
    role: AgentRole
    criteria: tuple[tuple[str, CriterionId], ...]  # reply key -> criterion
    slice_fields: tuple[str, ...]
    knowledge_query: str
    task: str

    @property
    def reply_keys(self) -> tuple[str, ...]:
        return tuple(k for k, _ in self.criteria)


def _section(name: str) -> tuple[str, ...]:
    return tuple(p for p in FIELDS if p.startswith(name + "."))


STEP_SPECS: dict[Step, StepSpec] = {
    Step.STEP1: StepSpec(
        Step.STEP1, AgentRole.ENDOCRINE,
        (("Irregular_cycles", CriterionId.IRREGULAR_CYCLES),
         ("Clinical_hyperandrogenism", CriterionId.CLINICAL_HA)),
        ("age_years", "years_post_menarche") + _section("menstrual") + _section("clinical_signs"),
        "irregular menstrual cycle definition and clinical hyperandrogenism hirsutism Ferriman-Gallwey",
        "Assess two Rotterdam components, irregular cycles and clinical hyperandrogenism, from the patient "
        "data below. This is the first step of a two-of-three evaluation and not a final diagnosis.",
    ),
    Step.STEP2: StepSpec(
        Step.STEP2, AgentRole.ENDOCRINE,
        (("Biochemical_hyperandrogenism", CriterionId.BIOCHEMICAL_HA),),
        ("biochemistry.total_testosterone", "biochemistry.free_testosterone", "biochemistry.dheas",
         "biochemistry.shbg", "biochemistry.free_androgen_index"),
        "biochemical hyperandrogenism elevated testosterone free androgen index",
        "Clinical signs did not settle hyperandrogenism. Decide whether the androgen panel below shows "
        "biochemical androgen excess.",
    ),
    Step.STEP3: StepSpec(
        Step.STEP3, AgentRole.RADIOLOGY,
        (("PCOM", CriterionId.PCOM),),
        _section("imaging"),
        "polycystic ovarian morphology follicle number per ovary ovarian volume ultrasound",
        "Interpret the ultrasound findings below and decide whether the polycystic ovarian morphology "
        "criterion is met.",
    ),
    Step.EXCLUSION: StepSpec(
        Step.EXCLUSION, AgentRole.EXCLUSION,
        (("NCCAH", CriterionId.NCCAH),
         ("Thyroid_dysfunction", CriterionId.THYROID),
         ("Hyperprolactinemia", CriterionId.PROLACTIN)),
        ("biochemistry.ohp_17", "biochemistry.tsh", "biochemistry.prolactin"),
        "exclusion of other causes non-classic congenital adrenal hyperplasia thyroid disease hyperprolactinemia",
        "The patient meets the inclusion threshold. Screen the laboratory values below for conditions that "
        "mimic the syndrome. Status Yes means the mimicking condition is suspected.",
    ),
}

ROLE_PREAMBLES: dict[AgentRole, str] = {
    AgentRole.COORDINATOR: "You coordinate a staged diagnostic assessment and route data between specialists.",
    AgentRole.ENDOCRINE: "You are a senior gynecological endocrinology consultant. You judge structured "
                         "patient data strictly against the Rotterdam criteria given below.",
    AgentRole.RADIOLOGY: "You are a consultant radiologist specialised in pelvic ultrasound. You judge ovarian "
                         "morphology strictly against the thresholds given below.",
    AgentRole.EXCLUSION: "You are a consultant endocrinologist responsible for differential diagnosis. You rule "
                         "conditions in or out strictly from laboratory values and the cutoffs given below.",
    AgentRole.REPORTING: "You write concise clinical summaries of a completed diagnostic assessment. You do not "
                         "change any finding.",
    AgentRole.EXTRACTION: "You convert clinical text into structured data. You only report what the text states.",
}
