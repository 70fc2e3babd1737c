"""Bundled reference data: ontology, dictionary, thresholds, corpus, templates."""
from __future__ import annotations

import json
from functools import lru_cache
from importlib import resources
from pathlib import Path


def data_path(name: str) -> Path:
    return Path(str(resources.files(__name__).joinpath(name)))


def _load(name: str) -> dict:
    return json.loads(data_path(name).read_text(encoding="utf-8"))


def corpus_dir() -> Path:
    return data_path("corpus")


def thresholds_path() -> Path:
    return data_path("default_thresholds.json")


def cohort_path() -> Path:
    return data_path("synthetic_cohort.jsonl")


@lru_cache(maxsize=None)
def default_ontology():
    from ..kg.graph import Ontology

    return Ontology.from_dict(_load("ontology.json"))


@lru_cache(maxsize=None)
def default_dictionary():
    from ..kg.graph import Dictionary

    return Dictionary.from_dict(_load("dictionary.json"))


def default_lexicon() -> list[tuple[str, str]]:
    """(term, type) pairs: every dictionary name and alias plus extra terms."""
    terms = []
    for entry in default_dictionary().entries:
        terms.append((entry.canonical_name, entry.type))
        terms.extend((a, entry.type) for a in entry.aliases)
    terms.extend((t["term"], t["type"]) for t in _load("lexicon.json")["terms"])
    return terms


@lru_cache(maxsize=None)
def recommendation_templates() -> dict:
    return _load("templates.json")
