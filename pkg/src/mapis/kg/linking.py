"""Cross-layer linking: dictionary grounding and patient-to-guideline similarity."""
from __future__ import annotations

import threading
from typing import Iterable

import numpy as np

from ..errors import EmptyGraph
from ..patient import PatientRecord
from .embedding import EmbeddingBackend, cosine_matrix, safe_embed
from .graph import (Chunk, CrossLink, Dictionary, DictionaryEntry, Entity, KnowledgeGraph, Layer, LinkKind,
                    Ontology, bottom_entity_id, slug)


def bottom_entities(dictionary: Dictionary) -> list[Entity]:
    return [Entity(bottom_entity_id(e), e.canonical_name, e.type, e.definition or e.canonical_name, Layer.BOTTOM)
            for e in dictionary.entries]


def link_dictionary(entities: Iterable[Entity], dictionary: Dictionary,
                    ontology: Ontology | None = None) -> tuple[list[CrossLink], list[str]]:
    """Ground Middle entities on dictionary entries by alias and type.

    Returns the links and the ids of entities left unmatched.
    """
    links, unmatched = [], []
    for e in sorted(entities, key=lambda x: x.entity_id):
        if e.layer is not Layer.MIDDLE:
            raise ValueError(f"{e.entity_id} is not a Middle-layer entity")
        entry: DictionaryEntry | None = dictionary.lookup(e.name)
        compatible = entry is not None and (
            ontology.is_compatible(e.type, entry.type) if ontology is not None else e.type == entry.type)
        if compatible:
            links.append(CrossLink(e.entity_id, bottom_entity_id(entry), LinkKind.DICTIONARY_GROUNDING, 1.0))
        else:
            unmatched.append(e.entity_id)
    return links, unmatched


# -- embeddings of graph entities -------------------------------------------

def entity_text(e: Entity) -> str:
    return f"{e.name}: {e.context}"


_cache_lock = threading.Lock()


def embed_entities(graph: KnowledgeGraph, entities: list[Entity], embedder: EmbeddingBackend) -> np.ndarray:
    """Embeddings of ``entities``, cached on the (immutable) graph per embedder."""
    key = (embedder.id, tuple(e.entity_id for e in entities))
    cache = graph.__dict__.setdefault("_embedding_cache", {})
    hit = cache.get(key)
    if hit is None:
        hit = safe_embed(embedder, [entity_text(e) for e in entities])
        with _cache_lock:
            cache[key] = hit
    return hit


def link_ehr(top_entities: list[Entity], graph: KnowledgeGraph, embedder: EmbeddingBackend, k: int = 3,
             min_score: float = 0.0) -> list[CrossLink]:
    """Link each Top entity to its ``k`` most similar Middle entities."""
    middle = graph.layer(Layer.MIDDLE)
    if not middle:
        raise EmptyGraph("graph has no guideline entities to link to")
    if not top_entities or k <= 0:
        return []
    sims = cosine_matrix(safe_embed(embedder, [entity_text(e) for e in top_entities]),
                         embed_entities(graph, middle, embedder))
    links = []
    for i, top in enumerate(top_entities):
        ranked = sorted(((-float(s), m.entity_id) for s, m in zip(sims[i], middle)))
        for neg, mid in ranked[:k]:
            if -neg >= min_score:
                links.append(CrossLink(top.entity_id, mid, LinkKind.EMBEDDING_SIMILARITY, -neg))
    return links


# -- patient (Top) layer ------------------------------------------------------

def _g(m) -> str:
    return f"{m.value:g} {m.unit}"


def ehr_entities(record: PatientRecord) -> tuple[Chunk, list[Entity]]:
    """Describe a record's present findings as Top-layer entities over one EHR chunk."""
    doc_id = f"ehr:{record.patient_id}"
    chunk_id = f"{doc_id}#c000"
    found: list[tuple[str, str, str]] = []
    m, s, b, im = record.menstrual, record.clinical_signs, record.biochemistry, record.imaging
    cycle = []
    if m.typical_cycle_min_days is not None or m.typical_cycle_max_days is not None:
        lo = "?" if m.typical_cycle_min_days is None else f"{m.typical_cycle_min_days:g}"
        hi = "?" if m.typical_cycle_max_days is None else f"{m.typical_cycle_max_days:g}"
        cycle.append(f"cycles every {lo} to {hi} days")
    if m.cycles_per_year is not None:
        cycle.append(f"{m.cycles_per_year:g} cycles per year")
    if m.longest_single_cycle_days is not None:
        cycle.append(f"longest cycle {m.longest_single_cycle_days:g} days")
    if cycle:
        found.append(("menstrual cycle pattern", "Symptom", "; ".join(cycle)))
    if s.ferriman_gallwey_score is not None:
        found.append(("hirsutism", "Symptom", f"Ferriman-Gallwey score {s.ferriman_gallwey_score}"))
    if s.acne is not None:
        found.append(("acne", "Symptom", f"acne {s.acne.value}"))
    if s.androgenic_alopecia is not None:
        found.append(("androgenic alopecia", "Symptom",
                      "alopecia present" if s.androgenic_alopecia else "no alopecia"))
    for name, label in (("total_testosterone", "total testosterone"), ("free_testosterone", "free testosterone"),
                        ("free_androgen_index", "free androgen index"), ("dheas", "DHEA-S"), ("shbg", "SHBG"),
                        ("amh", "anti-Mullerian hormone"), ("ohp_17", "17-hydroxyprogesterone"),
                        ("tsh", "thyroid stimulating hormone"), ("prolactin", "prolactin")):
        value = getattr(b, name)
        if value is not None:
            found.append((label, "LabMarker", f"{label} {_g(value)}"))
    us = []
    for side in ("left", "right"):
        c = getattr(im, f"follicle_count_{side}")
        v = getattr(im, f"ovarian_volume_{side}_ml")
        if c is not None:
            us.append(f"{side} ovary {c} follicles")
        if v is not None:
            us.append(f"{side} ovarian volume {v:g} mL")
    if us:
        found.append(("ovarian ultrasound", "ImagingFeature", "; ".join(us)))
    text = "\n\n".join(f"{n}: {c}" for n, _, c in found)
    chunk = Chunk(chunk_id, doc_id, 0, text, (0, max(1, len(found))), (0, max(1, len(found))))
    entities = [Entity(f"T:{slug(record.patient_id)}:{slug(n)}", n, t, c, Layer.TOP, (chunk_id,))
                for n, t, c in found]
    return chunk, entities


def with_ehr_layer(graph: KnowledgeGraph, record: PatientRecord, embedder: EmbeddingBackend, k: int = 3,
                   min_score: float = 0.0) -> KnowledgeGraph:
    """Session copy of ``graph`` carrying the record's Top layer; the input graph is untouched."""
    chunk, tops = ehr_entities(record)
    if not tops:
        return graph
    links = link_ehr(tops, graph, embedder, k, min_score)
    session = KnowledgeGraph(
        chunks={**graph.chunks, chunk.chunk_id: chunk},
        entities={**graph.entities, **{e.entity_id: e for e in tops}},
        relations=graph.relations,
        links=graph.links + tuple(links),
        manifest=graph.manifest,
    )
    # share cached guideline embeddings
    session.__dict__["_embedding_cache"] = graph.__dict__.setdefault("_embedding_cache", {})
    return session
