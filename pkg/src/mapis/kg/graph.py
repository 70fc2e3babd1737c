"""Knowledge-graph data model, canonical persistence and subgraph merging."""
from __future__ import annotations

import json
import re
import unicodedata
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Iterable, Mapping

from .. import _canonical
from ..errors import DictionaryError, GraphIntegrityError

GRAPH_FORMAT = "mapis.kg/1"


class Layer(str, Enum):
    BOTTOM = "Bottom"
    MIDDLE = "Middle"
    TOP = "Top"


_LAYER_PREFIX = {Layer.BOTTOM: "B", Layer.MIDDLE: "M", Layer.TOP: "T"}


class LinkKind(str, Enum):
    DICTIONARY_GROUNDING = "DictionaryGrounding"
    EMBEDDING_SIMILARITY = "EmbeddingSimilarity"


_WS = re.compile(r"\s+")
_TRAILING_PUNCT = re.compile(r"[\s\.,;:!\?]+$")
_NON_ALNUM = re.compile(r"[^0-9a-z]+")


def normalize_name(name: str) -> str:
    """Merge key: lowercase, collapse whitespace, strip terminal punctuation."""
    text = unicodedata.normalize("NFKC", name).lower()
    text = _WS.sub(" ", text).strip()
    return _TRAILING_PUNCT.sub("", text)


def normalize_alias(name: str) -> str:
    """Dictionary lookup key: merge key with all punctuation removed."""
    return _WS.sub(" ", _NON_ALNUM.sub(" ", normalize_name(name))).strip()


def slug(text: str) -> str:
    return _NON_ALNUM.sub("-", normalize_name(text)).strip("-") or "x"


# -- ontology and dictionary ------------------------------------------------

@dataclass(frozen=True)
class Ontology:
    labels: Mapping[str, str]  # label -> description
    compatible: frozenset = frozenset()  # frozenset of frozenset pairs

    def __post_init__(self):
        if not self.labels:
            raise ValueError("ontology needs at least one label")

    def is_compatible(self, a: str, b: str) -> bool:
        return a == b or frozenset((a, b)) in self.compatible

    def to_dict(self) -> dict:
        return {
            "format": "mapis.ontology/1",
            "labels": [{"label": k, "description": v} for k, v in sorted(self.labels.items())],
            "compatible": sorted(sorted(p) for p in self.compatible),
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "Ontology":
        labels: dict[str, str] = {}
        for item in data.get("labels", []):
            if item["label"] in labels:
                raise ValueError(f"duplicate ontology label {item['label']!r}")
            labels[item["label"]] = item.get("description", "")
        pairs = set()
        for a, b in data.get("compatible", []):
            if a not in labels or b not in labels:
                raise ValueError(f"compatibility pair ({a}, {b}) names an unknown label")
            pairs.add(frozenset((a, b)))
        return cls(labels, frozenset(pairs))


@dataclass(frozen=True)
class DictionaryEntry:
    canonical_name: str
    aliases: tuple[str, ...]
    type: str
    definition: str


class Dictionary:
    """Controlled vocabulary forming the bottom layer.

    Construction fails if two entries claim the same normalized alias.
    """

    def __init__(self, entries: Iterable[DictionaryEntry]):
        self.entries = tuple(sorted(entries, key=lambda e: normalize_alias(e.canonical_name)))
        self._index: dict[str, DictionaryEntry] = {}
        for entry in self.entries:
            for term in (entry.canonical_name, *entry.aliases):
                key = normalize_alias(term)
                other = self._index.get(key)
                if other is not None and other is not entry:
                    raise DictionaryError(
                        f"alias {term!r} maps to both {other.canonical_name!r} and {entry.canonical_name!r}"
                    )
                self._index[key] = entry

    def lookup(self, name: str) -> DictionaryEntry | None:
        return self._index.get(normalize_alias(name))

    def alias_map(self) -> dict[str, str]:
        return {k: e.canonical_name for k, e in sorted(self._index.items())}

    def to_dict(self) -> dict:
        return {
            "format": "mapis.dictionary/1",
            "entries": [
                {"canonical_name": e.canonical_name, "aliases": list(e.aliases), "type": e.type,
                 "definition": e.definition}
                for e in self.entries
            ],
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "Dictionary":
        return cls(
            DictionaryEntry(e["canonical_name"], tuple(e.get("aliases", ())), e["type"], e.get("definition", ""))
            for e in data.get("entries", [])
        )


def bottom_entity_id(entry: DictionaryEntry) -> str:
    return f"B:{slug(entry.canonical_name)}"


# -- graph elements ---------------------------------------------------------

@dataclass(frozen=True)
class Chunk:
    chunk_id: str
    doc_id: str
    ordinal: int
    text: str
    paragraph_span: tuple[int, int]  # [start, end) core paragraphs
    context_span: tuple[int, int]  # core span widened by the buffer

    def to_dict(self) -> dict:
        return {"chunk_id": self.chunk_id, "doc_id": self.doc_id, "ordinal": self.ordinal, "text": self.text,
                "paragraph_span": list(self.paragraph_span), "context_span": list(self.context_span)}

    @classmethod
    def from_dict(cls, d) -> "Chunk":
        return cls(d["chunk_id"], d["doc_id"], d["ordinal"], d["text"], tuple(d["paragraph_span"]),
                   tuple(d["context_span"]))


@dataclass(frozen=True)
class Entity:
    entity_id: str
    name: str
    type: str
    context: str
    layer: Layer
    source_chunks: tuple[str, ...] = ()

    @property
    def source_chunk(self) -> str | None:
        return self.source_chunks[0] if self.source_chunks else None

    @property
    def key(self) -> tuple[str, str, str]:
        return (self.layer.value, normalize_name(self.name), self.type)

    def to_dict(self) -> dict:
        return {"entity_id": self.entity_id, "name": self.name, "type": self.type, "context": self.context,
                "layer": self.layer.value, "source_chunks": list(self.source_chunks)}

    @classmethod
    def from_dict(cls, d) -> "Entity":
        return cls(d["entity_id"], d["name"], d["type"], d["context"], Layer(d["layer"]),
                   tuple(d.get("source_chunks", ())))


@dataclass(frozen=True, order=True)
class Relation:
    head: str
    relation_label: str
    tail: str
    source_chunk: str

    def to_dict(self) -> dict:
        return {"head": self.head, "relation_label": self.relation_label, "tail": self.tail,
                "source_chunk": self.source_chunk}


@dataclass(frozen=True, order=True)
class CrossLink:
    from_entity: str
    to_entity: str
    link_kind: LinkKind
    score: float

    def to_dict(self) -> dict:
        return {"from_entity": self.from_entity, "to_entity": self.to_entity, "link_kind": self.link_kind.value,
                "score": round(self.score, 6)}


@dataclass(frozen=True)
class Citation:
    doc_id: str
    chunk_id: str
    text_excerpt: str

    def to_dict(self) -> dict:
        return {"doc_id": self.doc_id, "chunk_id": self.chunk_id, "text_excerpt": self.text_excerpt}


EXCERPT_CHARS = 240


@dataclass
class KnowledgeGraph:
    chunks: dict[str, Chunk] = field(default_factory=dict)
    entities: dict[str, Entity] = field(default_factory=dict)
    relations: tuple[Relation, ...] = ()
    links: tuple[CrossLink, ...] = ()
    manifest: dict = field(default_factory=dict)

    def __post_init__(self):
        self.relations = tuple(sorted(set(self.relations)))
        self.links = tuple(sorted(set(self.links)))
        self._adjacency: dict[str, set[str]] | None = None

    # queries
    def layer(self, layer: Layer) -> list[Entity]:
        return [e for _, e in sorted(self.entities.items()) if e.layer is layer]

    def grounded_middle(self) -> list[Entity]:
        grounded = {lk.from_entity for lk in self.links if lk.link_kind is LinkKind.DICTIONARY_GROUNDING}
        return [e for e in self.layer(Layer.MIDDLE) if e.entity_id in grounded]

    def neighbors(self, entity_id: str) -> set[str]:
        if self._adjacency is None:
            adj: dict[str, set[str]] = {}
            for r in self.relations:
                adj.setdefault(r.head, set()).add(r.tail)
                adj.setdefault(r.tail, set()).add(r.head)
            self._adjacency = adj
        return self._adjacency.get(entity_id, set())

    def citations(self, entity_id: str) -> list[Citation]:
        out = []
        for cid in self.entities[entity_id].source_chunks:
            c = self.chunks[cid]
            out.append(Citation(c.doc_id, c.chunk_id, c.text[:EXCERPT_CHARS]))
        return out

    def is_empty(self) -> bool:
        return not self.layer(Layer.MIDDLE)

    # integrity
    def validate(self, ontology_labels: Iterable[str] | None = None) -> None:
        problems = []
        labels = set(ontology_labels) if ontology_labels is not None else set(self.manifest.get("ontology_labels", []))
        for eid, e in self.entities.items():
            if eid != e.entity_id:
                problems.append(f"entity key {eid} does not match id {e.entity_id}")
            if not e.name.strip():
                problems.append(f"{eid}: empty name")
            if labels and e.type not in labels:
                problems.append(f"{eid}: type {e.type!r} not in ontology")
            if e.layer is not Layer.BOTTOM and not e.source_chunks:
                problems.append(f"{eid}: {e.layer.value} entity without source chunk")
            for cid in e.source_chunks:
                if cid not in self.chunks:
                    problems.append(f"{eid}: unknown chunk {cid}")
        for r in self.relations:
            if r.head == r.tail:
                problems.append(f"relation {r.head} -> itself")
            for end in (r.head, r.tail):
                if end not in self.entities:
                    problems.append(f"relation endpoint {end} missing")
            if r.source_chunk not in self.chunks:
                problems.append(f"relation chunk {r.source_chunk} missing")
        for lk in self.links:
            src, dst = self.entities.get(lk.from_entity), self.entities.get(lk.to_entity)
            if src is None or dst is None:
                problems.append(f"link {lk.from_entity} -> {lk.to_entity} has a missing endpoint")
                continue
            expected = ((Layer.MIDDLE, Layer.BOTTOM) if lk.link_kind is LinkKind.DICTIONARY_GROUNDING
                        else (Layer.TOP, Layer.MIDDLE))
            if (src.layer, dst.layer) != expected:
                problems.append(f"{lk.link_kind.value} link {lk.from_entity} -> {lk.to_entity} breaks layer order")
        by_doc: dict[str, list[Chunk]] = {}
        for c in self.chunks.values():
            by_doc.setdefault(c.doc_id, []).append(c)
        for doc, cs in by_doc.items():
            cs.sort(key=lambda c: c.ordinal)
            pos = 0
            for i, c in enumerate(cs):
                if c.ordinal != i or c.paragraph_span[0] != pos or c.paragraph_span[1] <= pos:
                    problems.append(f"{doc}: chunks are not contiguous at ordinal {i}")
                    break
                pos = c.paragraph_span[1]
        if problems:
            raise GraphIntegrityError("; ".join(problems))

    # persistence
    def to_dict(self) -> dict:
        return {
            "format": GRAPH_FORMAT,
            "manifest": self.manifest,
            "chunks": [self.chunks[k].to_dict() for k in sorted(self.chunks)],
            "entities": [self.entities[k].to_dict() for k in sorted(self.entities)],
            "relations": [r.to_dict() for r in self.relations],
            "cross_layer_links": [lk.to_dict() for lk in self.links],
        }

    def to_bytes(self) -> bytes:
        return _canonical.dump_bytes(self.to_dict(), indent=1)

    def graph_hash(self) -> str:
        return _canonical.sha256_hex(self.to_bytes())

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "KnowledgeGraph":
        if data.get("format") != GRAPH_FORMAT:
            raise GraphIntegrityError(f"graph format must be {GRAPH_FORMAT!r}")
        try:
            g = cls(
                chunks={c["chunk_id"]: Chunk.from_dict(c) for c in data.get("chunks", [])},
                entities={e["entity_id"]: Entity.from_dict(e) for e in data.get("entities", [])},
                relations=tuple(Relation(r["head"], r["relation_label"], r["tail"], r["source_chunk"])
                                for r in data.get("relations", [])),
                links=tuple(CrossLink(lk["from_entity"], lk["to_entity"], LinkKind(lk["link_kind"]),
                                      float(lk["score"])) for lk in data.get("cross_layer_links", [])),
                manifest=dict(data.get("manifest", {})),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise GraphIntegrityError(f"malformed graph file: {exc}") from None
        g.validate()
        return g

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "KnowledgeGraph":
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, ValueError) as exc:
            raise GraphIntegrityError(f"cannot read graph {path}: {exc}") from None
        return cls.from_dict(data)


# -- merging ----------------------------------------------------------------

@dataclass
class ChunkExtraction:
    """Output of entity and relation extraction for one chunk.

    Entity ids here are chunk-local; :func:`merge_subgraphs` assigns final ids.
    """

    chunk: Chunk
    entities: list[Entity] = field(default_factory=list)
    relations: list[Relation] = field(default_factory=list)


def _entity_id(layer: Layer, norm: str, type_: str) -> str:
    return f"{_LAYER_PREFIX[layer]}:{slug(norm)}:{type_}"


def merge_subgraphs(outputs: Iterable[ChunkExtraction], *, extra_entities: Iterable[Entity] = (),
                    links: Iterable[CrossLink] = (), manifest: Mapping | None = None) -> KnowledgeGraph:
    """Aggregate per-chunk subgraphs into one graph.

    Entities sharing (layer, normalized name, type) become one node whose
    context joins the per-chunk contexts in chunk order.
    """
    outputs = sorted(outputs, key=lambda o: (o.chunk.doc_id, o.chunk.ordinal))
    groups: dict[tuple, list[tuple[Chunk, Entity]]] = {}
    local_to_key: dict[tuple[str, str], tuple] = {}
    for out in outputs:
        for e in out.entities:
            groups.setdefault(e.key, []).append((out.chunk, e))
            local_to_key[(out.chunk.chunk_id, e.entity_id)] = e.key
    key_to_id: dict[tuple, str] = {}
    taken: dict[str, tuple] = {}
    for key in sorted(groups):
        layer, norm, type_ = key
        eid = _entity_id(Layer(layer), norm, type_)
        if eid in taken:
            eid = f"{eid}~{_canonical.sha256_hex(norm)[:8]}"
        taken[eid] = key
        key_to_id[key] = eid
    entities: dict[str, Entity] = {}
    for key, members in groups.items():
        contexts, chunks = [], []
        for chunk, e in members:
            if e.context not in contexts:
                contexts.append(e.context)
            if chunk.chunk_id not in chunks:
                chunks.append(chunk.chunk_id)
        first = members[0][1]
        eid = key_to_id[key]
        entities[eid] = Entity(eid, first.name, first.type, " | ".join(contexts), first.layer, tuple(chunks))
    for e in extra_entities:
        entities[e.entity_id] = e
    relations = []
    for out in outputs:
        cid = out.chunk.chunk_id
        for r in out.relations:
            head = local_to_key.get((cid, r.head))
            tail = local_to_key.get((cid, r.tail))
            if head is None or tail is None or head == tail:
                continue
            relations.append(Relation(key_to_id[head], r.relation_label, key_to_id[tail], cid))
    return KnowledgeGraph(
        chunks={o.chunk.chunk_id: o.chunk for o in outputs},
        entities=entities,
        relations=tuple(relations),
        links=tuple(links),
        manifest=dict(manifest or {}),
    )
