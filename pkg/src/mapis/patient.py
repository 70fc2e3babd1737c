"""Normalized patient record and ingestion from tables or free text.

A record is immutable.  Absent values are ``None`` and are omitted from the
canonical JSON form; ``0`` is always a real measurement.
"""
from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Iterable, Mapping

from . import _canonical
from .errors import MappingError, SchemaError, UnitError

logger = logging.getLogger(__name__)

RECORD_FORMAT = "mapis.patient/1"


class Acne(str, Enum):
    ABSENT = "absent"
    MILD = "mild"
    MODERATE = "moderate"
    SEVERE = "severe"


@dataclass(frozen=True)
class Measurement:
    value: float
    unit: str


@dataclass(frozen=True)
class FieldSpan:
    """Where in the source note a populated field came from."""

    field: str
    start: int
    end: int
    text: str


@dataclass(frozen=True)
class MenstrualHistory:
    typical_cycle_min_days: float | None = None
    typical_cycle_max_days: float | None = None
    cycles_per_year: float | None = None
    longest_single_cycle_days: float | None = None


@dataclass(frozen=True)
class ClinicalSigns:
    ferriman_gallwey_score: int | None = None
    acne: Acne | None = None
    androgenic_alopecia: bool | None = None


@dataclass(frozen=True)
class BiochemPanel:
    total_testosterone: Measurement | None = None
    free_testosterone: Measurement | None = None
    dheas: Measurement | None = None
    shbg: Measurement | None = None
    free_androgen_index: Measurement | None = None
    amh: Measurement | None = None
    ohp_17: Measurement | None = None
    tsh: Measurement | None = None
    prolactin: Measurement | None = None


@dataclass(frozen=True)
class ImagingFindings:
    follicle_count_left: int | None = None
    follicle_count_right: int | None = None
    ovarian_volume_left_ml: float | None = None
    ovarian_volume_right_ml: float | None = None
    narrative: str | None = None


@dataclass(frozen=True)
class FieldSpec:
    kind: str  # number | count | bool | acne | text | measurement
    unit: str | None = None
    aliases: tuple[str, ...] = ()

    def canonical_unit(self, unit: str | None, path: str) -> str | None:
        if self.unit is None:
            return None
        if unit is None or unit.strip() == "":
            if self.kind == "measurement":
                raise UnitError(f"{path}: a unit is required (expected {self.unit})")
            return self.unit
        u = unit.strip()
        if u == self.unit or u in self.aliases:
            return self.unit
        raise UnitError(
            f"{path}: unit {unit!r} not recognized (allowed: {', '.join((self.unit,) + self.aliases)})"
        )


_DAYS = ("d", "day")
_YEARS = ("yrs", "yr", "y", "year")

# Only spellings with an identical numeric scale are accepted as aliases;
# there is no unit conversion.
FIELDS: dict[str, FieldSpec] = {
    "age_years": FieldSpec("number", "years", _YEARS),
    "years_post_menarche": FieldSpec("number", "years", _YEARS),
    "menstrual.typical_cycle_min_days": FieldSpec("number", "days", _DAYS),
    "menstrual.typical_cycle_max_days": FieldSpec("number", "days", _DAYS),
    "menstrual.cycles_per_year": FieldSpec("number", "cycles/year", ("per year", "/year", "/yr")),
    "menstrual.longest_single_cycle_days": FieldSpec("number", "days", _DAYS),
    "clinical_signs.ferriman_gallwey_score": FieldSpec("count", "score", ("points", "mFG")),
    "clinical_signs.acne": FieldSpec("acne"),
    "clinical_signs.androgenic_alopecia": FieldSpec("bool"),
    "biochemistry.total_testosterone": FieldSpec("measurement", "nmol/L", ("nmol/l",)),
    "biochemistry.free_testosterone": FieldSpec("measurement", "pmol/L", ("pmol/l",)),
    "biochemistry.dheas": FieldSpec("measurement", "umol/L", ("µmol/L", "umol/l", "µmol/l")),
    "biochemistry.shbg": FieldSpec("measurement", "nmol/L", ("nmol/l",)),
    "biochemistry.free_androgen_index": FieldSpec("measurement", "%", ("percent",)),
    "biochemistry.amh": FieldSpec("measurement", "ng/mL", ("ng/ml", "ug/L", "µg/L")),
    "biochemistry.ohp_17": FieldSpec("measurement", "nmol/L", ("nmol/l",)),
    "biochemistry.tsh": FieldSpec("measurement", "mIU/L", ("miu/l", "uIU/mL", "µIU/mL", "mU/L")),
    "biochemistry.prolactin": FieldSpec("measurement", "ng/mL", ("ng/ml", "ug/L", "µg/L")),
    "imaging.follicle_count_left": FieldSpec("count", "count", ("follicles",)),
    "imaging.follicle_count_right": FieldSpec("count", "count", ("follicles",)),
    "imaging.ovarian_volume_left_ml": FieldSpec("number", "mL", ("ml", "cm3", "cc")),
    "imaging.ovarian_volume_right_ml": FieldSpec("number", "mL", ("ml", "cm3", "cc")),
    "imaging.narrative": FieldSpec("text"),
}

SECTIONS = ("menstrual", "clinical_signs", "biochemistry", "imaging")
_SECTION_TYPES = {
    "menstrual": MenstrualHistory,
    "clinical_signs": ClinicalSigns,
    "biochemistry": BiochemPanel,
    "imaging": ImagingFindings,
}


@dataclass(frozen=True)
class PatientRecord:
    patient_id: str
    age_years: float | None = None
    years_post_menarche: float | None = None
    menstrual: MenstrualHistory = field(default_factory=MenstrualHistory)
    clinical_signs: ClinicalSigns = field(default_factory=ClinicalSigns)
    biochemistry: BiochemPanel = field(default_factory=BiochemPanel)
    imaging: ImagingFindings = field(default_factory=ImagingFindings)
    free_text_notes: tuple[str, ...] = ()
    provenance: tuple[FieldSpan, ...] = ()
    # carried through serialization, never read by the workflow
    extensions: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        problems = validate_record(self)
        if problems:
            raise SchemaError(problems)

    def get(self, path: str):
        obj: Any = self
        for part in path.split("."):
            obj = getattr(obj, part)
        return obj

    def without(self, path: str) -> "PatientRecord":
        """Copy of the record with one field made absent."""
        return self.with_values({path: None})

    def with_values(self, values: Mapping[str, Any]) -> "PatientRecord":
        top: dict[str, Any] = {}
        nested: dict[str, dict[str, Any]] = {}
        for path, value in values.items():
            if path not in FIELDS:
                raise KeyError(path)
            if "." in path:
                section, name = path.split(".")
                nested.setdefault(section, {})[name] = value
            else:
                top[path] = value
        for section, changes in nested.items():
            top[section] = dataclasses.replace(getattr(self, section), **changes)
        return dataclasses.replace(self, **top)

    def present_fields(self) -> list[str]:
        return [p for p in FIELDS if self.get(p) is not None]

    def to_dict(self) -> dict:
        out: dict[str, Any] = {"format": RECORD_FORMAT, "patient_id": self.patient_id}
        for path in ("age_years", "years_post_menarche"):
            if self.get(path) is not None:
                out[path] = self.get(path)
        for section in SECTIONS:
            out[section] = section_dict(self, section)
        if self.free_text_notes:
            out["free_text_notes"] = list(self.free_text_notes)
        if self.provenance:
            out["provenance"] = [dataclasses.asdict(s) for s in self.provenance]
        if self.extensions:
            out["extensions"] = dict(self.extensions)
        return out

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "PatientRecord":
        return parse_record(data)

    def to_json(self) -> str:
        return _canonical.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text: str | bytes) -> "PatientRecord":
        import json

        try:
            data = json.loads(text)
        except ValueError as exc:
            raise SchemaError(f"record is not valid JSON: {exc}") from None
        return parse_record(data)


def section_dict(record: PatientRecord, section: str, paths: Iterable[str] | None = None) -> dict:
    out: dict[str, Any] = {}
    for f in dataclasses.fields(_SECTION_TYPES[section]):
        path = f"{section}.{f.name}"
        if paths is not None and path not in paths:
            continue
        value = getattr(getattr(record, section), f.name)
        if value is None:
            continue
        if isinstance(value, Measurement):
            value = {"value": value.value, "unit": value.unit}
        elif isinstance(value, Acne):
            value = value.value
        out[f.name] = value
    return out


def record_slice(record: PatientRecord, paths: Iterable[str]) -> dict:
    """Nested dict holding only the requested, present fields."""
    paths = set(paths)
    out: dict[str, Any] = {}
    for path in sorted(p for p in paths if "." not in p):
        if record.get(path) is not None:
            out[path] = record.get(path)
    for section in SECTIONS:
        if any(p.startswith(section + ".") for p in paths):
            out[section] = section_dict(record, section, paths)
    return out


def _is_number(v) -> bool:
    return isinstance(v, (int, float)) and not isinstance(v, bool)


def validate_record(r: PatientRecord) -> list[str]:
    problems: list[str] = []
    if not isinstance(r.patient_id, str) or not r.patient_id.strip():
        problems.append("patient_id: must be a non-empty string")
    for path, spec in FIELDS.items():
        try:
            value = r.get(path)
        except AttributeError:
            problems.append(f"{path}: missing section")
            continue
        if value is None:
            continue
        if spec.kind in ("number", "count"):
            if not _is_number(value) or not math.isfinite(value):
                problems.append(f"{path}: must be a finite number")
            elif value < 0:
                problems.append(f"{path}: must be non-negative")
            elif spec.kind == "count" and int(value) != value:
                problems.append(f"{path}: must be an integer")
        elif spec.kind == "measurement":
            if not isinstance(value, Measurement):
                problems.append(f"{path}: must be a measurement")
            elif not _is_number(value.value) or not math.isfinite(value.value):
                problems.append(f"{path}: value must be a finite number")
            elif value.value < 0:
                problems.append(f"{path}: value must be non-negative")
            elif value.unit != spec.unit:
                problems.append(f"{path}: unit must be {spec.unit!r}, got {value.unit!r}")
        elif spec.kind == "bool" and not isinstance(value, bool):
            problems.append(f"{path}: must be a boolean")
        elif spec.kind == "acne" and not isinstance(value, Acne):
            problems.append(f"{path}: must be one of absent/mild/moderate/severe")
        elif spec.kind == "text" and not isinstance(value, str):
            problems.append(f"{path}: must be a string")
    fg = r.clinical_signs.ferriman_gallwey_score
    if _is_number(fg) and not 0 <= fg <= 36:
        problems.append("clinical_signs.ferriman_gallwey_score: must be within 0-36")
    if _is_number(r.age_years) and _is_number(r.years_post_menarche) and r.age_years < r.years_post_menarche:
        problems.append("years_post_menarche: cannot exceed age_years")
    m = r.menstrual
    if _is_number(m.typical_cycle_min_days) and _is_number(m.typical_cycle_max_days):
        if m.typical_cycle_min_days > m.typical_cycle_max_days:
            problems.append("menstrual.typical_cycle_min_days: must not exceed typical_cycle_max_days")
    for path in ("menstrual.typical_cycle_min_days", "menstrual.typical_cycle_max_days",
                 "menstrual.longest_single_cycle_days"):
        v = r.get(path)
        if _is_number(v) and v == 0:
            problems.append(f"{path}: must be positive")
    return problems


# -- parsing -----------------------------------------------------------------

_TRUE = {"true", "yes", "y", "1", "present", "t"}
_FALSE = {"false", "no", "n", "0", "absent", "f"}


def _coerce(path: str, spec: FieldSpec, raw: Any, unit: str | None = None):
    """Turn a raw value into the field's Python type; blank means absent."""
    if raw is None or (isinstance(raw, str) and raw.strip() == ""):
        return None
    if spec.kind in ("number", "count", "measurement"):
        if isinstance(raw, bool):
            raise ValueError(f"{path}: expected a number, got a boolean")
        if isinstance(raw, str):
            try:
                num = float(raw.strip())
            except ValueError:
                raise ValueError(f"{path}: {raw!r} is not numeric") from None
        elif _is_number(raw):
            num = float(raw)
        else:
            raise ValueError(f"{path}: {raw!r} is not numeric")
        if not math.isfinite(num):
            raise ValueError(f"{path}: {raw!r} is not finite")
        if spec.kind == "count":
            if not num.is_integer():
                raise ValueError(f"{path}: {raw!r} is not an integer")
            return int(num)
        if spec.kind == "measurement":
            return Measurement(num, spec.canonical_unit(unit, path))
        return num
    if spec.kind == "bool":
        if isinstance(raw, bool):
            return raw
        text = str(raw).strip().lower()
        if text in _TRUE:
            return True
        if text in _FALSE:
            return False
        raise ValueError(f"{path}: {raw!r} is not a boolean")
    if spec.kind == "acne":
        text = str(raw).strip().lower()
        if text in ("unknown", "na", "n/a"):
            return None
        try:
            return Acne(text)
        except ValueError:
            raise ValueError(f"{path}: {raw!r} is not an acne grade") from None
    return str(raw)


def parse_record(data: Mapping[str, Any]) -> PatientRecord:
    """Parse the canonical JSON form, collecting every violation."""
    if not isinstance(data, Mapping):
        raise SchemaError("record must be a JSON object")
    problems: list[str] = []
    fmt = data.get("format", RECORD_FORMAT)
    if fmt != RECORD_FORMAT:
        problems.append(f"format: unsupported {fmt!r}")
    known_top = {"format", "patient_id", "age_years", "years_post_menarche", "free_text_notes",
                 "provenance", "extensions", *SECTIONS}
    for key in data:
        if key not in known_top:
            problems.append(f"{key}: unknown field")
    values: dict[str, Any] = {}
    for path, spec in FIELDS.items():
        if "." in path:
            section, name = path.split(".")
            sec = data.get(section, {})
            if not isinstance(sec, Mapping):
                problems.append(f"{section}: must be an object")
                continue
            raw = sec.get(name)
        else:
            raw = data.get(path)
        if raw is None:
            continue
        try:
            if spec.kind == "measurement":
                if not isinstance(raw, Mapping) or "value" not in raw:
                    raise ValueError(f"{path}: must be an object with value and unit")
                if not _is_number(raw["value"]):
                    raise ValueError(f"{path}: value must be a number")
                values[path] = _coerce(path, spec, raw["value"], raw.get("unit"))
            elif spec.kind in ("number", "count") and not _is_number(raw):
                raise ValueError(f"{path}: must be a number")
            elif spec.kind == "bool" and not isinstance(raw, bool):
                raise ValueError(f"{path}: must be a boolean")
            else:
                values[path] = _coerce(path, spec, raw)
        except (ValueError, UnitError) as exc:
            problems.append(str(exc))
    for section in SECTIONS:
        sec = data.get(section, {})
        if isinstance(sec, Mapping):
            for name in sec:
                if f"{section}.{name}" not in FIELDS:
                    problems.append(f"{section}.{name}: unknown field")
    notes = data.get("free_text_notes", [])
    if not isinstance(notes, list) or not all(isinstance(n, str) for n in notes):
        problems.append("free_text_notes: must be a list of strings")
        notes = []
    spans = []
    for i, s in enumerate(data.get("provenance", []) or []):
        try:
            spans.append(FieldSpan(str(s["field"]), int(s["start"]), int(s["end"]), str(s["text"])))
        except (KeyError, TypeError, ValueError):
            problems.append(f"provenance[{i}]: malformed span")
    extensions = data.get("extensions", {})
    if not isinstance(extensions, Mapping):
        problems.append("extensions: must be an object")
        extensions = {}
    pid = data.get("patient_id")
    if not isinstance(pid, str) or not pid.strip():
        problems.append("patient_id: must be a non-empty string")
    if problems:
        raise SchemaError(problems)
    return build_record(pid, values, notes=notes, provenance=spans, extensions=extensions)


def build_record(patient_id: str, values: Mapping[str, Any], *, notes=(), provenance=(),
                 extensions=None) -> PatientRecord:
    """Construct a record from already-coerced ``{field path: value}``."""
    sections: dict[str, dict[str, Any]] = {s: {} for s in SECTIONS}
    top: dict[str, Any] = {}
    for path, value in values.items():
        if "." in path:
            section, name = path.split(".")
            sections[section][name] = value
        else:
            top[path] = value
    return PatientRecord(
        patient_id=patient_id,
        **top,
        **{s: _SECTION_TYPES[s](**kw) for s, kw in sections.items()},
        free_text_notes=tuple(notes),
        provenance=tuple(provenance),
        extensions=dict(extensions or {}),
    )


# -- structured ingestion ----------------------------------------------------

@dataclass(frozen=True)
class ColumnMapping:
    column: str
    unit: str | None = None
    values: Mapping[str, Any] | None = None  # optional categorical recoding


def load_schema_mapping(data: Mapping[str, Any]) -> dict[str, ColumnMapping]:
    """Validate a ``{field: {column, unit}}`` mapping document."""
    out: dict[str, ColumnMapping] = {}
    for path, entry in data.items():
        if path.startswith("_"):
            continue  # comment keys
        if path != "patient_id" and path not in FIELDS:
            raise MappingError(f"schema mapping names unknown field {path!r}")
        if isinstance(entry, str):
            entry = {"column": entry}
        if not isinstance(entry, Mapping) or "column" not in entry:
            raise MappingError(f"schema mapping for {path!r} needs a 'column'")
        unit = entry.get("unit")
        if path in FIELDS:
            FIELDS[path].canonical_unit(unit, path)  # raises UnitError early
        out[path] = ColumnMapping(str(entry["column"]).strip(), unit, entry.get("values"))
    return out


def identity_mapping(columns: Mapping[str, str]) -> dict[str, ColumnMapping]:
    return {path: ColumnMapping(col, FIELDS[path].unit if path in FIELDS else None)
            for path, col in columns.items()}


def ingest_structured(row: Mapping[str, Any], schema_mapping: Mapping[str, Any],
                      patient_id: str | None = None) -> PatientRecord:
    """Build a record from one table row.

    Raises MappingError when a declared column is missing from the row,
    UnitError for an unrecognized unit and ValueError for non-numeric cells.
    Blank cells become absent; unmapped columns are ignored.  Column names are
    compared with surrounding whitespace stripped.
    """
    row = {str(k).strip(): v for k, v in row.items()}
    if all(isinstance(v, ColumnMapping) for v in schema_mapping.values()):
        mapping = dict(schema_mapping)
    else:
        mapping = load_schema_mapping(schema_mapping)
    values: dict[str, Any] = {}
    for path, cm in mapping.items():
        if cm.column not in row:
            raise MappingError(f"column {cm.column!r} (for {path}) missing from row")
        raw = row[cm.column]
        if cm.values is not None and raw is not None and str(raw).strip() in cm.values:
            raw = cm.values[str(raw).strip()]
        if path == "patient_id":
            if raw is not None and str(raw).strip():
                patient_id = str(raw).strip()
            continue
        spec = FIELDS[path]
        value = _coerce(path, spec, raw, cm.unit)
        if value is not None:
            values[path] = value
    if not patient_id:
        raise MappingError("no patient_id column mapped and no id supplied")
    return build_record(patient_id, values)


# -- free-text extraction ----------------------------------------------------

def extract_from_text(notes: str, backend, patient_id: str = "note", retries: int = 1) -> PatientRecord:
    """Extract a record from narrative EHR text through an agent backend.

    Every kept field must point at a span of ``notes``; fields the backend marks
    uncertain, or whose span does not fall inside the note, are left absent.
    """
    from .agents.prompts import assemble_extraction_prompt
    from .agents.replies import call_with_retry, parse_json_payload

    (payload, _), _calls = call_with_retry(backend, assemble_extraction_prompt(notes), parse_json_payload, retries)
    fields = payload.get("fields") if isinstance(payload, Mapping) else None
    if not isinstance(fields, Mapping):
        raise SchemaError("extraction reply must contain a 'fields' object")
    values: dict[str, Any] = {}
    spans: list[FieldSpan] = []
    problems: list[str] = []
    for path, item in sorted(fields.items()):
        if path not in FIELDS:
            problems.append(f"{path}: unknown field")
            continue
        if not isinstance(item, Mapping):
            problems.append(f"{path}: malformed extraction item")
            continue
        if str(item.get("status", "certain")).lower() == "uncertain":
            continue
        span = item.get("span")
        if (not isinstance(span, (list, tuple)) or len(span) != 2
                or not all(isinstance(i, int) for i in span)
                or not 0 <= span[0] < span[1] <= len(notes)):
            logger.warning("dropping extracted %s: span %r not inside the note", path, span)
            continue
        try:
            value = _coerce(path, FIELDS[path], item.get("value"), item.get("unit"))
        except (ValueError, UnitError) as exc:
            problems.append(str(exc))
            continue
        if value is None:
            continue
        values[path] = value
        spans.append(FieldSpan(path, span[0], span[1], notes[span[0]:span[1]]))
    if problems:
        raise SchemaError(problems)
    return build_record(patient_id, values, notes=[notes] if notes else [], provenance=spans)


# -- files -------------------------------------------------------------------

def dump_record(record: PatientRecord) -> bytes:
    return _canonical.dump_bytes(record.to_dict())


def read_records(path) -> list[PatientRecord]:
    """Read one record (``.json``) or a cohort (``.jsonl``)."""
    import json
    from pathlib import Path

    path = Path(path)
    text = path.read_text(encoding="utf-8")
    if path.suffix == ".jsonl":
        return [parse_record(json.loads(line)) for line in text.splitlines() if line.strip()]
    return [PatientRecord.from_json(text)]


def write_jsonl(records: Iterable[PatientRecord]) -> bytes:
    return b"".join(dump_record(r) + b"\n" for r in records)

