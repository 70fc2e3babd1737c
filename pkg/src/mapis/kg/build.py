"""Corpus-to-graph build: chunk, extract per chunk in parallel, merge, ground."""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

from .. import __version__, _canonical
from ..errors import EmptyCorpus
from .chunking import ChunkConfig, semantic_chunk, split_paragraphs
from .embedding import EmbeddingBackend
from .extraction import extract_entities, extract_relations
from .graph import ChunkExtraction, Dictionary, KnowledgeGraph, Layer, Ontology, merge_subgraphs
from .linking import bottom_entities, link_dictionary

CORPUS_SUFFIXES = (".md", ".txt")


@dataclass
class BuildReport:
    unmatched_entities: list[str] = field(default_factory=list)
    dropped_entities: list[str] = field(default_factory=list)
    dropped_relations: list[str] = field(default_factory=list)
    counts: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"counts": self.counts, "unmatched_entities": self.unmatched_entities,
                "dropped_entities": self.dropped_entities, "dropped_relations": self.dropped_relations}


def read_corpus(corpus_dir) -> dict[str, str]:
    root = Path(corpus_dir)
    if not root.is_dir():
        raise EmptyCorpus(f"empty corpus: {root} is not a directory")
    docs = {p.stem: p.read_text(encoding="utf-8") for p in sorted(root.iterdir())
            if p.is_file() and p.suffix in CORPUS_SUFFIXES}
    docs = {k: v for k, v in docs.items() if split_paragraphs(v)}
    if not docs:
        raise EmptyCorpus(f"empty corpus: no text documents in {root}")
    return docs


def build_graph(corpus: dict[str, str], backend, embedder: EmbeddingBackend, ontology: Ontology,
                dictionary: Dictionary, chunk_cfg: ChunkConfig | None = None,
                parallelism: int = 1) -> tuple[KnowledgeGraph, BuildReport]:
    """Build the dictionary and guideline layers from ``{doc_id: text}``."""
    if not corpus:
        raise EmptyCorpus("empty corpus")
    chunk_cfg = chunk_cfg or ChunkConfig()
    chunks = []
    for doc_id in sorted(corpus):
        chunks.extend(semantic_chunk(split_paragraphs(corpus[doc_id]), embedder, chunk_cfg, doc_id))
    report = BuildReport()

    def work(chunk):
        drops_e, drops_r = [], []
        ents = extract_entities(chunk, ontology, backend, dropped=drops_e)
        rels = extract_relations(chunk, ents, backend, dropped=drops_r)
        return ChunkExtraction(chunk, ents, rels), drops_e, drops_r

    with ThreadPoolExecutor(max_workers=max(1, parallelism)) as pool:
        results = list(pool.map(work, chunks))
    for _, de, dr in results:
        report.dropped_entities.extend(de)
        report.dropped_relations.extend(dr)
    manifest = {
        "engine_version": __version__,
        "corpus": {d: _canonical.sha256_hex(corpus[d]) for d in sorted(corpus)},
        "chunking": chunk_cfg.to_dict(),
        "embedder": embedder.id,
        "extractor": backend.info.id,
        "ontology_labels": sorted(ontology.labels),
        "dictionary_hash": _canonical.content_hash(dictionary.to_dict()),
    }
    merged = merge_subgraphs([r for r, _, _ in results], extra_entities=bottom_entities(dictionary),
                             manifest=manifest)
    links, unmatched = link_dictionary(merged.layer(Layer.MIDDLE), dictionary, ontology)
    graph = KnowledgeGraph(merged.chunks, merged.entities, merged.relations, tuple(links), manifest)
    graph.validate(ontology.labels)
    report.unmatched_entities = unmatched
    report.counts = {
        "chunks": len(graph.chunks),
        "entities": {layer.value: len(graph.layer(layer)) for layer in Layer},
        "relations": len(graph.relations),
        "links": len(graph.links),
    }
    return graph, report


def build_default_graph(embedder: EmbeddingBackend | None = None, backend=None, parallelism: int = 1):
    """Graph of the bundled corpus, extracted with the rule oracle unless told otherwise."""
    from ..agents.oracle import RuleOracleBackend
    from ..data import corpus_dir, default_dictionary, default_ontology
    from .embedding import HashingEmbedder

    return build_graph(read_corpus(corpus_dir()), backend or RuleOracleBackend(), embedder or HashingEmbedder(),
                       default_ontology(), default_dictionary(), parallelism=parallelism)
