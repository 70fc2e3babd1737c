"""Hypothesis strategies for valid patient records."""
from hypothesis import strategies as st

from conftest import make_record
from mapis.patient import Acne

_measure = st.one_of(st.none(), st.floats(0.01, 500, allow_nan=False).map(lambda x: round(x, 2)))
_count = st.one_of(st.none(), st.integers(0, 60))


@st.composite
def _cycle_range(draw):
    lo = draw(st.one_of(st.none(), st.integers(1, 60)))
    hi = draw(st.one_of(st.none(), st.integers(lo or 1, 90)))
    return lo, hi


records = _cycle_range().flatmap(lambda rng: st.builds(
    make_record,
    patient_id=st.from_regex(r"[a-z][a-z0-9]{0,8}", fullmatch=True),
    years_post_menarche=st.one_of(st.none(), st.integers(0, 30)),
    menstrual__typical_cycle_min_days=st.just(rng[0]),
    menstrual__typical_cycle_max_days=st.just(rng[1]),
    menstrual__cycles_per_year=st.one_of(st.none(), st.integers(0, 20)),
    menstrual__longest_single_cycle_days=st.one_of(st.none(), st.integers(10, 200)),
    clinical_signs__ferriman_gallwey_score=st.one_of(st.none(), st.integers(0, 36)),
    clinical_signs__acne=st.one_of(st.none(), st.sampled_from([a.value for a in Acne])),
    clinical_signs__androgenic_alopecia=st.one_of(st.none(), st.booleans()),
    biochemistry__total_testosterone=_measure,
    biochemistry__free_testosterone=_measure,
    biochemistry__ohp_17=_measure,
    biochemistry__tsh=_measure,
    biochemistry__prolactin=_measure,
    imaging__follicle_count_left=_count,
    imaging__follicle_count_right=_count,
    imaging__ovarian_volume_left_ml=_measure,
    imaging__ovarian_volume_right_ml=_measure,
))
