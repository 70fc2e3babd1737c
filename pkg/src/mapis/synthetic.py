"""Synthetic labelled cohorts for plumbing checks.

Labels come from latent criteria sampled first (two of three, no mimicking
condition); measurements are then drawn well clear of the usual cutoffs.  The
generator never calls the rule engine, so agreement between the two is a real
check rather than a tautology.
"""
from __future__ import annotations

import random

from .evaluation import LabeledCohort
from .patient import parse_record

# value ranges chosen far from any default cutoff
_REGULAR = ((25, 29), (29, 33))
_MIMICS = ("nccah", "thyroid_high", "thyroid_low", "prolactin")


def _cycles(rng: random.Random, irregular: bool) -> dict:
    if not irregular:
        lo = rng.randint(*_REGULAR[0])
        return {"typical_cycle_min_days": lo, "typical_cycle_max_days": rng.randint(max(lo, 29), 33),
                "cycles_per_year": rng.randint(11, 13), "longest_single_cycle_days": rng.randint(33, 40)}
    kind = rng.choice(("long", "sparse", "single", "short"))
    if kind == "long":
        return {"typical_cycle_min_days": rng.randint(30, 40), "typical_cycle_max_days": rng.randint(45, 70)}
    if kind == "sparse":
        return {"cycles_per_year": rng.randint(2, 6)}
    if kind == "single":
        return {"longest_single_cycle_days": rng.randint(100, 180)}
    return {"typical_cycle_min_days": rng.randint(14, 18), "typical_cycle_max_days": rng.randint(19, 30)}


def _androgens(rng: random.Random, clinical: bool, biochemical: bool) -> tuple[dict, dict]:
    signs = {"ferriman_gallwey_score": rng.randint(8, 20) if clinical else rng.randint(0, 1),
             "acne": rng.choice(("moderate", "severe")) if clinical else "absent",
             "androgenic_alopecia": clinical and rng.random() < 0.3}
    labs = {
        "total_testosterone": {"value": round(rng.uniform(3.5, 5.0), 1) if biochemical else round(
            rng.uniform(0.5, 1.8), 1), "unit": "nmol/L"},
        "free_testosterone": {"value": round(rng.uniform(8.0, 20.0), 1), "unit": "pmol/L"},
        "dheas": {"value": round(rng.uniform(2.0, 6.0), 1), "unit": "umol/L"},
        "free_androgen_index": {"value": round(rng.uniform(1.0, 3.0), 1), "unit": "%"},
        "shbg": {"value": round(rng.uniform(30, 80)), "unit": "nmol/L"},
    }
    return signs, labs


def _ultrasound(rng: random.Random, pcom: bool) -> dict:
    out = {"follicle_count_left": rng.randint(5, 12), "follicle_count_right": rng.randint(5, 12),
           "ovarian_volume_left_ml": round(rng.uniform(4.0, 7.5), 1),
           "ovarian_volume_right_ml": round(rng.uniform(4.0, 7.5), 1)}
    if pcom:
        side = rng.choice(("left", "right"))
        if rng.random() < 0.5:
            out[f"follicle_count_{side}"] = rng.randint(25, 40)
        else:
            out[f"ovarian_volume_{side}_ml"] = round(rng.uniform(13.0, 18.0), 1)
    return out


def _screens(rng: random.Random, mimic: str | None) -> dict:
    labs = {"ohp_17": {"value": round(rng.uniform(1.0, 3.5), 1), "unit": "nmol/L"},
            "tsh": {"value": round(rng.uniform(1.0, 3.0), 1), "unit": "mIU/L"},
            "prolactin": {"value": round(rng.uniform(5.0, 18.0), 1), "unit": "ng/mL"}}
    if mimic == "nccah":
        labs["ohp_17"]["value"] = round(rng.uniform(10.0, 30.0), 1)
    elif mimic == "thyroid_high":
        labs["tsh"]["value"] = round(rng.uniform(8.0, 15.0), 1)
    elif mimic == "thyroid_low":
        labs["tsh"]["value"] = round(rng.uniform(0.01, 0.1), 2)
    elif mimic == "prolactin":
        labs["prolactin"]["value"] = round(rng.uniform(50.0, 120.0), 1)
    return labs


def label_function(irregular: bool, clinical: bool, biochemical: bool, pcom: bool, mimic: str | None) -> bool:
    """Ground truth: two of three features and no mimicking condition."""
    features = int(irregular) + int(clinical or biochemical) + int(pcom)
    return features >= 2 and mimic is None


def generate_cohort(n: int = 60, seed: int = 0) -> LabeledCohort:
    rng = random.Random(seed)
    records, labels = [], {}
    for i in range(n):
        irregular, clinical, biochemical, pcom = (rng.random() < 0.5 for _ in range(4))
        mimic = rng.choice(_MIMICS) if rng.random() < 0.25 else None
        signs, androgen_labs = _androgens(rng, clinical, biochemical)
        ypm = rng.randint(4, 20)
        doc = {
            "patient_id": f"syn{seed:02d}-{i:03d}",
            "age_years": 12 + ypm + rng.randint(0, 4),
            "years_post_menarche": ypm,
            "menstrual": _cycles(rng, irregular),
            "clinical_signs": signs,
            "biochemistry": {**androgen_labs, **_screens(rng, mimic)},
            "imaging": _ultrasound(rng, pcom),
        }
        record = parse_record(doc)
        records.append(record)
        labels[record.patient_id] = label_function(irregular, clinical, biochemical, pcom, mimic)
    return LabeledCohort(records, labels, f"synthetic n={n} seed={seed}")
