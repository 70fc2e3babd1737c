"""Two-stage graph retrieval: concept indexing, then 1-hop contextual expansion."""
from __future__ import annotations

from dataclasses import dataclass

from ..errors import EmptyGraph
from .embedding import EmbeddingBackend, cosine_matrix, safe_embed
from .graph import Citation, KnowledgeGraph, Layer
from .linking import embed_entities

CONCEPT_WEIGHT = 0.5


@dataclass(frozen=True)
class RetrievalItem:
    entity_id: str
    name: str
    type: str
    context: str
    score: float
    citations: tuple[Citation, ...]

    def to_dict(self) -> dict:
        return {"entity_id": self.entity_id, "name": self.name, "type": self.type, "context": self.context,
                "score": round(self.score, 6), "citations": [c.to_dict() for c in self.citations]}


@dataclass(frozen=True)
class RetrievalResult:
    query: str
    items: tuple[RetrievalItem, ...] = ()

    def to_dict(self) -> dict:
        return {"query": self.query, "items": [i.to_dict() for i in self.items]}

    def entity_ids(self) -> list[str]:
        return [i.entity_id for i in self.items]


def u_retrieve(query: str, graph: KnowledgeGraph, embedder: EmbeddingBackend, k: int = 5) -> RetrievalResult:
    """Rank guideline entities for ``query``.

    Stage 1 scores the concept set (dictionary-grounded guideline entities, or
    every guideline entity when nothing is grounded) against the query.  Stage 2
    adds relation neighbours of the concepts and scores each candidate as
    ``0.5 * concept score + 0.5 * own similarity``, where the concept score of a
    neighbour is that of its best adjacent concept.  Ties go to the smaller id.
    """
    if graph.is_empty():
        raise EmptyGraph("graph has no guideline entities")
    if k <= 0:
        return RetrievalResult(query)
    middle = graph.layer(Layer.MIDDLE)
    index = {e.entity_id: i for i, e in enumerate(middle)}
    sims = cosine_matrix(safe_embed(embedder, [query]), embed_entities(graph, middle, embedder))[0]
    concepts = graph.grounded_middle() or middle
    concept_score = {e.entity_id: float(sims[index[e.entity_id]]) for e in concepts}
    best: dict[str, float] = dict(concept_score)
    for cid in sorted(concept_score):
        for nid in graph.neighbors(cid):
            if nid in index and nid not in concept_score:
                best[nid] = max(best.get(nid, float("-inf")), concept_score[cid])
    scored = []
    for eid, cscore in best.items():
        own = float(sims[index[eid]])
        score = own if eid in concept_score else CONCEPT_WEIGHT * cscore + (1 - CONCEPT_WEIGHT) * own
        scored.append((-round(score, 12), eid))
    scored.sort()
    items = []
    for neg, eid in scored[:k]:
        e = graph.entities[eid]
        items.append(RetrievalItem(eid, e.name, e.type, e.context, -neg, tuple(graph.citations(eid))))
    return RetrievalResult(query, tuple(items))
