"""Deterministic Rotterdam criteria and differential-exclusion rules.

Every numeric cutoff lives in :class:`ThresholdConfig`.  Cycle bounds and lab
upper limits are strict (``<``/``>``); the Ferriman-Gallwey and PCOM
thresholds are inclusive (``>=``).  Missing inputs never produce ``No`` on
their own: a result moves to ``Uncertain`` with a ``missing:<field>`` reason.
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Mapping

from . import _canonical
from .errors import ConfigError
from .patient import FIELDS, Acne, PatientRecord

CONFIG_FORMAT = "mapis.thresholds/1"


class CriterionStatus(str, Enum):
    YES = "Yes"
    NO = "No"
    UNCERTAIN = "Uncertain"

    @classmethod
    def parse(cls, text: str) -> "CriterionStatus":
        for s in cls:
            if s.value.lower() == str(text).strip().lower():
                return s
        raise ValueError(f"status {text!r} is not one of Yes/No/Uncertain")


class CriterionId(str, Enum):
    IRREGULAR_CYCLES = "IrregularCycles"
    CLINICAL_HA = "ClinicalHA"
    BIOCHEMICAL_HA = "BiochemicalHA"
    PCOM = "PCOM"
    NCCAH = "Exclusion-NCCAH"
    THYROID = "Exclusion-Thyroid"
    PROLACTIN = "Exclusion-Prolactin"


EXCLUSION_IDS = (CriterionId.NCCAH, CriterionId.THYROID, CriterionId.PROLACTIN)

# Fields each criterion reads; the workflow uses this to name missing data.
CRITERION_FIELDS: dict[CriterionId, tuple[str, ...]] = {
    CriterionId.IRREGULAR_CYCLES: (
        "years_post_menarche",
        "menstrual.typical_cycle_min_days",
        "menstrual.typical_cycle_max_days",
        "menstrual.cycles_per_year",
        "menstrual.longest_single_cycle_days",
    ),
    CriterionId.CLINICAL_HA: (
        "clinical_signs.ferriman_gallwey_score",
        "clinical_signs.acne",
        "clinical_signs.androgenic_alopecia",
    ),
    CriterionId.BIOCHEMICAL_HA: (
        "biochemistry.total_testosterone",
        "biochemistry.free_testosterone",
        "biochemistry.dheas",
        "biochemistry.free_androgen_index",
    ),
    CriterionId.PCOM: (
        "imaging.follicle_count_left",
        "imaging.follicle_count_right",
        "imaging.ovarian_volume_left_ml",
        "imaging.ovarian_volume_right_ml",
    ),
    CriterionId.NCCAH: ("biochemistry.ohp_17",),
    CriterionId.THYROID: ("biochemistry.tsh",),
    CriterionId.PROLACTIN: ("biochemistry.prolactin",),
}


@dataclass(frozen=True)
class Threshold:
    value: float
    unit: str


def _t(value, unit):
    return field(default_factory=lambda: Threshold(value, unit))


# threshold name -> record field whose unit it must share
_UNIT_SOURCES = {
    "cycle_short_days": "menstrual.typical_cycle_min_days",
    "cycle_long_days": "menstrual.typical_cycle_max_days",
    "min_cycles_per_year": "menstrual.cycles_per_year",
    "single_cycle_irregular_days": "menstrual.longest_single_cycle_days",
    "fg_cutoff": "clinical_signs.ferriman_gallwey_score",
    "post_menarche_years_gate": "years_post_menarche",
    "free_testosterone_upper": "biochemistry.free_testosterone",
    "total_testosterone_upper": "biochemistry.total_testosterone",
    "fai_upper": "biochemistry.free_androgen_index",
    "dheas_upper": "biochemistry.dheas",
    "follicle_count_per_ovary_min": "imaging.follicle_count_left",
    "ovarian_volume_ml_min": "imaging.ovarian_volume_left_ml",
    "ohp17_upper": "biochemistry.ohp_17",
    "tsh_lower": "biochemistry.tsh",
    "tsh_upper": "biochemistry.tsh",
    "prolactin_upper": "biochemistry.prolactin",
}

ANDROGEN_CUTOFFS = (
    ("biochemistry.total_testosterone", "total_testosterone_upper"),
    ("biochemistry.free_testosterone", "free_testosterone_upper"),
    ("biochemistry.dheas", "dheas_upper"),
    ("biochemistry.free_androgen_index", "fai_upper"),
)

# biochemical androgen cutoffs may be disabled (null) in a config file
OPTIONAL_CUTOFFS = frozenset(c for _, c in ANDROGEN_CUTOFFS)


@dataclass(frozen=True)
class ThresholdConfig:
    """All diagnostic cutoffs.

    The menstrual, Ferriman-Gallwey and post-menarche values follow the
    Step-1 prompt wording.  Lab, follicle and volume cutoffs are
    guideline-aligned defaults meant to be edited per laboratory.  Note that
    ``fg_cutoff=2`` is far below the usual clinical cutoff (4 to 8 depending on
    ethnicity); it is the shipped default and can be raised here.
    """

    cycle_short_days: Threshold = _t(21, "days")
    cycle_long_days: Threshold = _t(35, "days")
    min_cycles_per_year: Threshold = _t(8, "cycles/year")
    single_cycle_irregular_days: Threshold = _t(90, "days")
    fg_cutoff: Threshold = _t(2, "score")
    post_menarche_years_gate: Threshold = _t(3, "years")
    free_testosterone_upper: Threshold | None = _t(30.0, "pmol/L")
    total_testosterone_upper: Threshold | None = _t(2.5, "nmol/L")
    fai_upper: Threshold | None = _t(5.0, "%")
    dheas_upper: Threshold | None = _t(9.0, "umol/L")
    follicle_count_per_ovary_min: Threshold = _t(20, "count")
    ovarian_volume_ml_min: Threshold = _t(10.0, "mL")
    ohp17_upper: Threshold = _t(6.0, "nmol/L")
    tsh_lower: Threshold = _t(0.4, "mIU/L")
    tsh_upper: Threshold = _t(4.5, "mIU/L")
    prolactin_upper: Threshold = _t(25.0, "ng/mL")

    def __post_init__(self):
        problems = []
        for f in dataclasses.fields(self):
            t = getattr(self, f.name)
            if t is None:
                if f.name not in OPTIONAL_CUTOFFS:
                    problems.append(f"{f.name}: required")
                continue
            if not isinstance(t, Threshold):
                problems.append(f"{f.name}: must be a threshold")
                continue
            if isinstance(t.value, bool) or not isinstance(t.value, (int, float)) or not t.value > 0:
                problems.append(f"{f.name}: must be a positive number")
            spec = FIELDS[_UNIT_SOURCES[f.name]]
            if t.unit != spec.unit and t.unit not in spec.aliases:
                problems.append(f"{f.name}: unit {t.unit!r} does not match field unit {spec.unit!r}")
        if not problems:
            if self.cycle_short_days.value >= self.cycle_long_days.value:
                problems.append("cycle_short_days must be below cycle_long_days")
            if self.tsh_lower.value >= self.tsh_upper.value:
                problems.append("tsh_lower must be below tsh_upper")
        if problems:
            raise ConfigError("; ".join(problems))

    def value(self, name: str) -> float:
        return getattr(self, name).value

    def to_dict(self) -> dict:
        thresholds = {}
        for f in dataclasses.fields(self):
            t = getattr(self, f.name)
            thresholds[f.name] = None if t is None else {"value": t.value, "unit": t.unit}
        return {"format": CONFIG_FORMAT, "thresholds": thresholds}

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "ThresholdConfig":
        if data.get("format") != CONFIG_FORMAT:
            raise ConfigError(f"threshold config format must be {CONFIG_FORMAT!r}")
        raw = data.get("thresholds")
        if not isinstance(raw, Mapping):
            raise ConfigError("threshold config needs a 'thresholds' object")
        names = {f.name for f in dataclasses.fields(cls)}
        missing = sorted(names - set(raw))
        if missing:
            # fail fast: every cutoff must be stated, even if disabled with null
            raise ConfigError(f"threshold config omits cutoffs: {', '.join(missing)}")
        unknown = sorted(set(raw) - names)
        if unknown:
            raise ConfigError(f"threshold config has unknown cutoffs: {', '.join(unknown)}")
        kwargs = {}
        for name in names:
            entry = raw[name]
            if entry is None:
                kwargs[name] = None
                continue
            if not isinstance(entry, Mapping) or "value" not in entry or "unit" not in entry:
                raise ConfigError(f"{name}: expected {{value, unit}}")
            kwargs[name] = Threshold(entry["value"], str(entry["unit"]))
        return cls(**kwargs)

    def config_hash(self) -> str:
        return _canonical.content_hash(self.to_dict())


def load_threshold_config(path) -> ThresholdConfig:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, ValueError) as exc:
        raise ConfigError(f"cannot read threshold config {path}: {exc}") from None
    return ThresholdConfig.from_dict(data)


@dataclass(frozen=True)
class CriterionResult:
    criterion_id: CriterionId
    status: CriterionStatus
    reasoning: str
    evidence: tuple[str, ...] = ()
    inputs_used: tuple[str, ...] = ()
    reason: str | None = None

    def to_dict(self) -> dict:
        out = {
            "criterion_id": self.criterion_id.value,
            "status": self.status.value,
            "reasoning": self.reasoning,
            "evidence": list(self.evidence),
            "inputs_used": list(self.inputs_used),
        }
        if self.reason:
            out["reason"] = self.reason
        return out

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "CriterionResult":
        return cls(
            CriterionId(d["criterion_id"]),
            CriterionStatus(d["status"]),
            d["reasoning"],
            tuple(d.get("evidence", ())),
            tuple(d.get("inputs_used", ())),
            d.get("reason"),
        )


def _fmt(x) -> str:
    return f"{x:g}" if isinstance(x, float) else str(x)


def _present(p: PatientRecord, cid: CriterionId) -> tuple[str, ...]:
    return tuple(f for f in CRITERION_FIELDS[cid] if p.get(f) is not None)


def _missing_reason(fields) -> str:
    return "missing:" + ",".join(fields)


def _uncertain(cid, p, missing, text) -> CriterionResult:
    return CriterionResult(
        cid, CriterionStatus.UNCERTAIN, text, inputs_used=_present(p, cid), reason=_missing_reason(missing)
    )


def eval_irregular_cycles(p: PatientRecord, cfg: ThresholdConfig) -> CriterionResult:
    cid = CriterionId.IRREGULAR_CYCLES
    m = p.menstrual
    used = _present(p, cid)
    longest = m.longest_single_cycle_days
    single = cfg.value("single_cycle_irregular_days")
    if longest is not None and longest > single:
        return CriterionResult(
            cid, CriterionStatus.YES,
            f"A single cycle of {_fmt(longest)} days exceeds {_fmt(single)} days, which is irregular.",
            inputs_used=used,
        )
    gate = cfg.value("post_menarche_years_gate")
    ypm = p.years_post_menarche
    short, long_, min_cpy = (cfg.value("cycle_short_days"), cfg.value("cycle_long_days"),
                             cfg.value("min_cycles_per_year"))
    flags = []
    if m.typical_cycle_min_days is not None and m.typical_cycle_min_days < short:
        flags.append(f"shortest cycle {_fmt(m.typical_cycle_min_days)} days < {_fmt(short)}")
    if m.typical_cycle_max_days is not None and m.typical_cycle_max_days > long_:
        flags.append(f"longest typical cycle {_fmt(m.typical_cycle_max_days)} days > {_fmt(long_)}")
    if m.cycles_per_year is not None and m.cycles_per_year < min_cpy:
        flags.append(f"{_fmt(m.cycles_per_year)} cycles/year < {_fmt(min_cpy)}")
    if flags and ypm is not None and ypm > gate:
        return CriterionResult(
            cid, CriterionStatus.YES,
            f"{_fmt(ypm)} years post-menarche (> {_fmt(gate)}) with " + "; ".join(flags) + ".",
            inputs_used=used,
        )
    pattern_fields = CRITERION_FIELDS[cid][1:4]
    pattern_complete = all(p.get(f) is not None for f in pattern_fields)
    before_gate = ypm is not None and ypm <= gate
    if longest is not None and ((pattern_complete and not flags) or before_gate):
        if before_gate:
            text = (f"{_fmt(ypm)} years post-menarche (not > {_fmt(gate)}), so cycle-length limits do not "
                    f"apply; no single cycle exceeds {_fmt(single)} days.")
        else:
            text = (f"Cycles of {_fmt(m.typical_cycle_min_days)}-{_fmt(m.typical_cycle_max_days)} days, "
                    f"{_fmt(m.cycles_per_year)} cycles/year and a longest cycle of {_fmt(longest)} days "
                    "are all within range.")
        return CriterionResult(cid, CriterionStatus.NO, text, inputs_used=used)
    missing = []
    if longest is None:
        missing.append("menstrual.longest_single_cycle_days")
    if flags:
        if ypm is None:
            missing.insert(0, "years_post_menarche")
    elif not before_gate:
        missing.extend(f for f in pattern_fields if p.get(f) is None)
    text = "Cycle regularity cannot be settled; missing " + ", ".join(missing) + "."
    if flags:
        text = "Out-of-range cycle pattern (" + "; ".join(flags) + ") but " + text[0].lower() + text[1:]
    return _uncertain(cid, p, missing, text)


def eval_clinical_ha(p: PatientRecord, cfg: ThresholdConfig) -> CriterionResult:
    cid = CriterionId.CLINICAL_HA
    s = p.clinical_signs
    used = _present(p, cid)
    cutoff = cfg.value("fg_cutoff")
    fg = s.ferriman_gallwey_score
    if fg is not None and fg >= cutoff:
        return CriterionResult(
            cid, CriterionStatus.YES,
            f"Ferriman-Gallwey score {fg} meets the hirsutism cutoff (>= {_fmt(cutoff)}).",
            inputs_used=used,
        )
    if fg is None and s.acne is None and s.androgenic_alopecia is None:
        return _uncertain(cid, p, CRITERION_FIELDS[cid], "No clinical androgen signs were recorded.")
    secondary = []
    if s.acne is not None and s.acne is not Acne.ABSENT:
        secondary.append(f"{s.acne.value} acne")
    if s.androgenic_alopecia:
        secondary.append("androgenic alopecia")
    if secondary:
        lead = (f"Ferriman-Gallwey score {fg} is below {_fmt(cutoff)}" if fg is not None
                else "No Ferriman-Gallwey score")
        reason = "secondary-signs-only"
        if fg is None:
            reason += ";" + _missing_reason(["clinical_signs.ferriman_gallwey_score"])
        return CriterionResult(
            cid, CriterionStatus.UNCERTAIN,
            f"{lead}; only secondary signs ({', '.join(secondary)}), which are weak in isolation.",
            inputs_used=used, reason=reason,
        )
    if fg is None:
        return _uncertain(cid, p, ["clinical_signs.ferriman_gallwey_score"],
                          "No Ferriman-Gallwey score and no secondary androgen signs recorded.")
    return CriterionResult(
        cid, CriterionStatus.NO,
        f"Ferriman-Gallwey score {fg} is below {_fmt(cutoff)} and no secondary androgen signs are present.",
        inputs_used=used,
    )


def eval_biochemical_ha(p: PatientRecord, cfg: ThresholdConfig) -> CriterionResult:
    cid = CriterionId.BIOCHEMICAL_HA
    used = _present(p, cid)
    configured = []
    for path, name in ANDROGEN_CUTOFFS:
        cutoff = getattr(cfg, name)
        if cutoff is None:
            if p.get(path) is not None:
                raise ConfigError(f"{path} is present but {name} is not configured")
            continue
        configured.append((path, cutoff))
    if not configured:
        return _uncertain(cid, p, [p for p, _ in ANDROGEN_CUTOFFS], "No androgen cutoffs are configured.")
    high, normal, missing = [], [], []
    for path, cutoff in configured:
        m = p.get(path)
        label = path.split(".", 1)[1]
        if m is None:
            missing.append(path)
        elif m.value > cutoff.value:
            high.append(f"{label} {_fmt(m.value)} {m.unit} > {_fmt(cutoff.value)}")
        else:
            normal.append(f"{label} {_fmt(m.value)} {m.unit} <= {_fmt(cutoff.value)}")
    if high:
        return CriterionResult(cid, CriterionStatus.YES, "Androgen excess: " + "; ".join(high) + ".",
                               inputs_used=used)
    if not missing:
        return CriterionResult(cid, CriterionStatus.NO, "All androgen markers within range: "
                               + "; ".join(normal) + ".", inputs_used=used)
    text = "No androgen marker is elevated"
    text += (" among " + "; ".join(normal)) if normal else ""
    text += "; missing " + ", ".join(missing) + "."
    return _uncertain(cid, p, missing, text)


def eval_pcom(p: PatientRecord, cfg: ThresholdConfig) -> CriterionResult:
    cid = CriterionId.PCOM
    im = p.imaging
    used = _present(p, cid)
    fmin = cfg.value("follicle_count_per_ovary_min")
    vmin = cfg.value("ovarian_volume_ml_min")
    hits = []
    for side in ("left", "right"):
        n = getattr(im, f"follicle_count_{side}")
        v = getattr(im, f"ovarian_volume_{side}_ml")
        if n is not None and n >= fmin:
            hits.append(f"{side} ovary {n} follicles (>= {_fmt(fmin)})")
        if v is not None and v >= vmin:
            hits.append(f"{side} ovary volume {_fmt(v)} mL (>= {_fmt(vmin)})")
    if hits:
        return CriterionResult(cid, CriterionStatus.YES, "Polycystic ovarian morphology: "
                               + "; ".join(hits) + ".", inputs_used=used)
    missing = [f for f in CRITERION_FIELDS[cid] if p.get(f) is None]
    if not missing:
        return CriterionResult(
            cid, CriterionStatus.NO,
            f"Follicle counts {im.follicle_count_left}/{im.follicle_count_right} (< {_fmt(fmin)}) and volumes "
            f"{_fmt(im.ovarian_volume_left_ml)}/{_fmt(im.ovarian_volume_right_ml)} mL (< {_fmt(vmin)}) per ovary.",
            inputs_used=used,
        )
    return _uncertain(cid, p, missing, "Insufficient imaging data; missing " + ", ".join(missing) + ".")


def _lab_result(p, cid, path, condition, check, cfg_desc) -> CriterionResult:
    m = p.get(path)
    if m is None:
        return _uncertain(cid, p, [path], f"{condition[0].upper()}{condition[1:]} cannot be excluded; "
                                          f"{path} was not measured.")
    label = path.split(".", 1)[1]
    if check(m.value):
        return CriterionResult(cid, CriterionStatus.YES,
                               f"{label} {_fmt(m.value)} {m.unit} is outside {cfg_desc}; {condition} suspected.",
                               inputs_used=(path,))
    return CriterionResult(cid, CriterionStatus.NO,
                           f"{label} {_fmt(m.value)} {m.unit} is within {cfg_desc}; {condition} unlikely.",
                           inputs_used=(path,))


def eval_exclusions(p: PatientRecord, cfg: ThresholdConfig) -> list[CriterionResult]:
    """NCCAH, thyroid and prolactin screens; ``Yes`` means the mimic is suspected."""
    ohp, lo, hi, prl = (cfg.value("ohp17_upper"), cfg.value("tsh_lower"), cfg.value("tsh_upper"),
                        cfg.value("prolactin_upper"))
    return [
        _lab_result(p, CriterionId.NCCAH, "biochemistry.ohp_17", "non-classic congenital adrenal hyperplasia",
                    lambda v: v > ohp, f"<= {_fmt(ohp)}"),
        _lab_result(p, CriterionId.THYROID, "biochemistry.tsh", "thyroid dysfunction",
                    lambda v: v < lo or v > hi, f"[{_fmt(lo)}, {_fmt(hi)}]"),
        _lab_result(p, CriterionId.PROLACTIN, "biochemistry.prolactin", "hyperprolactinemia",
                    lambda v: v > prl, f"<= {_fmt(prl)}"),
    ]


EVALUATORS = {
    CriterionId.IRREGULAR_CYCLES: eval_irregular_cycles,
    CriterionId.CLINICAL_HA: eval_clinical_ha,
    CriterionId.BIOCHEMICAL_HA: eval_biochemical_ha,
    CriterionId.PCOM: eval_pcom,
}


def evaluate_criterion(cid: CriterionId, p: PatientRecord, cfg: ThresholdConfig) -> CriterionResult:
    if cid in EVALUATORS:
        return EVALUATORS[cid](p, cfg)
    return eval_exclusions(p, cfg)[EXCLUSION_IDS.index(cid)]
