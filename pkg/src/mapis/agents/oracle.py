"""Deterministic stand-in for every agent role.

Diagnostic steps are answered by the guideline rule evaluators applied to the
prompt's task input; extraction steps by regular expressions and a term
lexicon.  No tokens are consumed.
"""
from __future__ import annotations

import json
import re
import time
from typing import Any, Iterable, Mapping

from .. import _canonical
from ..errors import SchemaError, SliceError
from ..patient import parse_record
from ..rules import ThresholdConfig, evaluate_criterion
from .backends import AgentBackend, BackendInfo, BackendKind, Completion, Usage
from .roles import STEP_SPECS, Step

_NUM = r"(\d+(?:\.\d+)?)"


class RuleOracleBackend(AgentBackend):
    def __init__(self, cfg: ThresholdConfig | None = None, lexicon: Iterable[tuple[str, str]] | None = None,
                 measure_time: bool = False):
        self.cfg = cfg or ThresholdConfig()
        self._lexicon = None if lexicon is None else _compile_lexicon(lexicon)
        # wall time is reported as 0 unless asked, so reruns stay byte-identical
        self.measure_time = measure_time
        self.info = BackendInfo(f"rule-oracle:{self.cfg.config_hash()[:12]}", BackendKind.RULE_ORACLE)

    @property
    def lexicon(self):
        if self._lexicon is None:
            from ..data import default_lexicon

            self._lexicon = _compile_lexicon(default_lexicon())
        return self._lexicon

    def complete(self, prompt) -> Completion:
        start = time.perf_counter()
        try:
            payload = json.loads(prompt.task_input)
        except ValueError:
            raise SliceError(f"{prompt.step.value}: task input is not JSON") from None
        if not isinstance(payload, dict):
            raise SliceError(f"{prompt.step.value}: task input must be an object")
        step = prompt.step
        if step in STEP_SPECS:
            reply = self._diagnose(step, payload)
        elif step is Step.REPORT:
            reply = {"summary": template_summary(payload)}
        elif step is Step.RECORD_EXTRACTION:
            reply = {"fields": extract_fields(str(payload.get("text", "")))}
        elif step is Step.ENTITY_EXTRACTION:
            reply = {"entities": self._entities(payload)}
        elif step is Step.RELATION_EXTRACTION:
            reply = {"relations": extract_relation_cues(payload)}
        else:  # pragma: no cover - Step is exhaustive
            raise SliceError(f"unsupported step {step}")
        elapsed = time.perf_counter() - start if self.measure_time else 0.0
        return Completion(_canonical.dumps(reply), Usage(0, 0, elapsed))

    def _diagnose(self, step: Step, payload: dict) -> dict:
        try:
            record = parse_record({"patient_id": "slice", **payload})
        except SchemaError as exc:
            raise SliceError(f"{step.value}: malformed patient slice: {exc}") from None
        spec = STEP_SPECS[step]
        out = {}
        for key, cid in spec.criteria:
            res = evaluate_criterion(cid, record, self.cfg)
            out[key] = {"status": res.status.value, "reasoning": res.reasoning}
        return out

    def _entities(self, payload: Mapping[str, Any]) -> list[dict]:
        text = str(payload.get("text", ""))
        allowed = set(payload.get("ontology_labels") or [])
        found = []
        taken: list[tuple[int, int]] = []
        for pattern, type_ in self.lexicon:
            if allowed and type_ not in allowed:
                continue
            for m in pattern.finditer(text):
                s, e = m.span()
                if any(s < te and ts < e for ts, te in taken):
                    continue
                taken.append((s, e))
                found.append((s, m.group(0), type_, _sentence_at(text, s)))
        found.sort()
        order: list[tuple[str, str]] = []
        names: dict[tuple[str, str], str] = {}
        sentences: dict[tuple[str, str], list[str]] = {}
        for _, name, type_, ctx in found:
            key = (name.lower(), type_)
            if key not in names:
                order.append(key)
                names[key] = name
                sentences[key] = []
            if ctx not in sentences[key]:
                sentences[key].append(ctx)
        return [{"name": names[k], "type": k[1], "context": " ".join(sentences[k])[:400]} for k in order]


def _compile_lexicon(terms: Iterable[tuple[str, str]]):
    # longest terms first so "clinical hyperandrogenism" wins over "hyperandrogenism"
    ordered = sorted({(t.strip(), ty) for t, ty in terms if t.strip()}, key=lambda x: (-len(x[0]), x[0].lower()))
    return [(re.compile(r"(?<![\w-])" + re.escape(t) + r"(?![\w-])", re.I), ty) for t, ty in ordered]


_SENTENCE_END = re.compile(r"(?<=[.!?])\s+")


def _sentence_at(text: str, pos: int) -> str:
    start = 0
    for m in _SENTENCE_END.finditer(text):
        if m.end() > pos:
            return text[start:m.start()].strip()[:300]
        start = m.end()
    return text[start:].strip()[:300]


# -- relation cues ----------------------------------------------------------

_RELATION_CUES = (
    ("defined_by", re.compile(r"\b(?:is|are) defined (?:as|by)\b|\bdefined as\b", re.I)),
    ("indicates", re.compile(r"\bindicates?\b|\bsuggests?\b|\bis a sign of\b", re.I)),
    ("requires_exclusion_of", re.compile(r"\bexclu(?:de|des|ded|sion of)\b|\brul(?:e|ed|ing) out\b", re.I)),
    ("assessed_by", re.compile(r"\bassessed (?:by|with|using)\b|\bmeasured (?:by|with|using)\b", re.I)),
    ("screened_by", re.compile(r"\bscreened (?:by|with|using)\b|\bscreening (?:with|by)\b", re.I)),
    ("criterion_for", re.compile(r"\bcriteri(?:on|a) for\b", re.I)),
    ("associated_with", re.compile(r"\bassociated with\b|\belevated in\b", re.I)),
)


def extract_relation_cues(payload: Mapping[str, Any]) -> list[dict]:
    """Pair consecutive entity mentions in a sentence joined by a cue phrase."""
    text = str(payload.get("text", ""))
    entities = payload.get("entities") or []
    out = []
    start = 0
    sentences = []
    for m in _SENTENCE_END.finditer(text):
        sentences.append((start, m.start()))
        start = m.end()
    sentences.append((start, len(text)))
    for s0, s1 in sentences:
        sentence = text[s0:s1]
        mentions = []
        for e in entities:
            m = re.search(r"(?<![\w-])" + re.escape(e["name"]) + r"(?![\w-])", sentence, re.I)
            if m:
                mentions.append((m.start(), m.end(), e["id"]))
        # a mention nested in a longer one ("biochemical hyperandrogenism") is not its own mention
        mentions.sort(key=lambda m: (m[0], m[0] - m[1]))
        kept: list[tuple[int, int, str]] = []
        for m in mentions:
            if not kept or m[0] >= kept[-1][1]:
                kept.append(m)
        for (a0, a1, a_id), (b0, b1, b_id) in zip(kept, kept[1:]):
            if a_id == b_id:
                continue
            between = sentence[a1:b0]
            for label, cue in _RELATION_CUES:
                if cue.search(between):
                    out.append({"head": a_id, "relation": label, "tail": b_id})
                    break
    return out


# -- record field extraction -----------------------------------------------

_LAB_NAMES = (
    ("biochemistry.free_testosterone", r"free testosterone|free T\b"),
    ("biochemistry.total_testosterone", r"total testosterone|(?<!free )testosterone"),
    ("biochemistry.free_androgen_index", r"free androgen index|FAI"),
    ("biochemistry.dheas", r"DHEA-?S|DHEA sulph?fate"),
    ("biochemistry.shbg", r"SHBG"),
    ("biochemistry.amh", r"AMH|anti-m[uü]llerian hormone"),
    ("biochemistry.ohp_17", r"17-?OHP|17-hydroxyprogesterone|17-OH progesterone"),
    ("biochemistry.tsh", r"TSH"),
    ("biochemistry.prolactin", r"prolactin|PRL"),
)
_UNIT = r"(nmol/[lL]|pmol/[lL]|[uµ]mol/[lL]|ng/m[lL]|mIU/[lL]|miu/l|[uµ]IU/m[lL]|mU/L|%|[uµ]g/[lL])"

_PATTERNS: list[tuple[tuple[str, ...], re.Pattern]] = [
    (("menstrual.typical_cycle_min_days", "menstrual.typical_cycle_max_days"),
     re.compile(r"cycles?[^.;\d]{0,40}?" + _NUM + r"\s*(?:-|\u2013|\u2014|to)\s*" + _NUM + r"\s*days", re.I)),
    (("menstrual.cycles_per_year",),
     re.compile(_NUM + r"\s*(?:cycles|periods|menses)\s*(?:per|a|/|each)\s*year", re.I)),
    (("menstrual.longest_single_cycle_days",),
     re.compile(r"longest (?:single )?cycle[^.;\d]{0,20}?" + _NUM + r"\s*days", re.I)),
    (("years_post_menarche",),
     re.compile(_NUM + r"\s*(?:years?|yrs?)\s*(?:post|after|since)[- ]menarche", re.I)),
    (("age_years",),
     re.compile(r"\b" + _NUM + r"[- ](?:years?|yrs?)[- ]old\b|\baged?\s*:?\s*" + _NUM + r"\b", re.I)),
    (("clinical_signs.ferriman_gallwey_score",),
     re.compile(r"(?:m?F-?G|Ferriman[- ]Gallwey)(?:\s*score)?(?:\s*(?:of|is|was|=|:))?\s*(\d+)", re.I)),
]


def _span_item(value, m: re.Match, group: int, unit=None, status="certain") -> dict:
    return {"value": value, "unit": unit, "span": [m.start(group), m.end(group)], "status": status}


def _number(text: str):
    v = float(text)
    return int(v) if v.is_integer() else v


def extract_fields(text: str) -> dict[str, dict]:
    """Regex-level extraction; each value carries the character span that states it."""
    fields: dict[str, dict] = {}
    for paths, pattern in _PATTERNS:
        m = pattern.search(text)
        if not m:
            continue
        if paths[0] == "age_years":
            g = 1 if m.group(1) is not None else 2
            fields["age_years"] = _span_item(_number(m.group(g)), m, g)
            continue
        for i, path in enumerate(paths, start=1):
            fields[path] = _span_item(_number(m.group(i)), m, i)
    m = re.search(r"\b(no|mild|moderate|severe)\s+acne\b", text, re.I)
    if m:
        grade = m.group(1).lower()
        fields["clinical_signs.acne"] = _span_item("absent" if grade == "no" else grade, m, 0)
    m = re.search(r"\b(no\s+)?(?:androgenic\s+)?alopecia\b", text, re.I)
    if m:
        fields["clinical_signs.androgenic_alopecia"] = _span_item(m.group(1) is None, m, 0)
    for path, names in _LAB_NAMES:
        if path in fields:
            continue
        m = re.search(r"\b(?:" + names + r")\b[^0-9\n.;]{0,15}?" + _NUM + r"(?:\s*" + _UNIT + r")?", text, re.I)
        if not m:
            continue
        unit = m.group(2)
        fields[path] = _span_item(_number(m.group(1)), m, 1, unit, "certain" if unit else "uncertain")
    for side in ("left", "right"):
        m = (re.search(r"(\d+)\s+follicles?\s+(?:in|on)\s+(?:the\s+)?" + side + r"\s+ovary", text, re.I)
             or re.search(side + r"\s+ovary[^.;\d]{0,30}?(\d+)\s+follicles?", text, re.I))
        if m:
            fields[f"imaging.follicle_count_{side}"] = _span_item(int(m.group(1)), m, 1)
        m = re.search(side + r"\s+ovar(?:y|ian)\s+volume[^.;\d]{0,12}?" + _NUM + r"\s*(mL|ml|cm3|cc)", text, re.I)
        if m:
            fields[f"imaging.ovarian_volume_{side}_ml"] = _span_item(_number(m.group(1)), m, 1, m.group(2))
    return fields


# -- report narrative ------------------------------------------------------

def template_summary(facts: Mapping[str, Any]) -> str:
    outcome = facts.get("outcome", "UNKNOWN")
    criteria = facts.get("criteria", {})
    met = sorted(k for k, v in criteria.items() if v == "Yes" and not k.startswith("Exclusion"))
    skipped = sorted(k for k, v in criteria.items() if v == "Skipped")
    parts = [f"Final outcome: {outcome}."]
    if facts.get("cause"):
        parts.append(f"Primary alternative cause: {facts['cause']}.")
    parts.append("Criteria met: " + (", ".join(met) if met else "none") + ".")
    if skipped:
        parts.append("Not evaluated: " + ", ".join(skipped) + ".")
    if facts.get("missing"):
        parts.append("Missing data: " + ", ".join(facts["missing"]) + ".")
    return " ".join(parts)
