from .build import BuildReport, build_default_graph, build_graph, read_corpus
from .chunking import ChunkConfig, semantic_chunk, split_paragraphs
from .embedding import EmbeddingBackend, HashingEmbedder, RemoteEmbedder
from .extraction import extract_entities, extract_relations
from .graph import (Chunk, Citation, CrossLink, Dictionary, DictionaryEntry, Entity, KnowledgeGraph, Layer, LinkKind,
                    Ontology, Relation, merge_subgraphs)
from .linking import ehr_entities, link_dictionary, link_ehr, with_ehr_layer
from .retrieval import RetrievalItem, RetrievalResult, u_retrieve

__all__ = [
    "BuildReport", "Chunk", "ChunkConfig", "Citation", "CrossLink", "Dictionary", "DictionaryEntry",
    "EmbeddingBackend", "Entity", "HashingEmbedder", "KnowledgeGraph", "Layer", "LinkKind", "Ontology", "Relation",
    "RemoteEmbedder", "RetrievalItem", "RetrievalResult", "build_default_graph", "build_graph", "ehr_entities",
    "extract_entities", "extract_relations", "link_dictionary", "link_ehr", "merge_subgraphs", "read_corpus",
    "semantic_chunk", "split_paragraphs", "u_retrieve", "with_ehr_layer",
]
