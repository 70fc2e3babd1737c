"""Embedding-breakpoint semantic chunking over paragraphs."""
from __future__ import annotations

import re
from dataclasses import dataclass

import numpy as np

from .embedding import EmbeddingBackend, safe_embed
from .graph import Chunk

_BLANK_LINES = re.compile(r"\n\s*\n")


@dataclass(frozen=True)
class ChunkConfig:
    breakpoint_percentile: float = 25.0
    buffer_paragraphs: int = 1

    def to_dict(self) -> dict:
        return {"breakpoint_percentile": self.breakpoint_percentile, "buffer_paragraphs": self.buffer_paragraphs}


def split_paragraphs(text: str) -> list[str]:
    paras = [_BLANK_LINES.sub(" ", p).strip() for p in _BLANK_LINES.split(text)]
    return [" ".join(p.split()) for p in paras if p.strip()]


def adjacent_similarities(vectors: np.ndarray) -> np.ndarray:
    if len(vectors) < 2:
        return np.zeros(0)
    return np.round(np.sum(vectors[:-1] * vectors[1:], axis=1), 12)


def breakpoints(similarities: np.ndarray, percentile: float) -> list[int]:
    """Indices ``i`` such that a new chunk starts at paragraph ``i + 1``."""
    if len(similarities) == 0:
        return []
    cut = np.percentile(similarities, percentile)
    return [i for i, s in enumerate(similarities) if s < cut]


def semantic_chunk(document: list[str], embedder: EmbeddingBackend, chunk_cfg: ChunkConfig | None = None,
                   doc_id: str = "doc") -> list[Chunk]:
    """Split paragraphs where adjacent similarity drops below the document's percentile.

    Core spans tile the document without overlap; ``context_span`` widens each
    core span by ``buffer_paragraphs`` on both sides.
    """
    cfg = chunk_cfg or ChunkConfig()
    if not document:
        raise ValueError("document has no paragraphs")
    vectors = safe_embed(embedder, list(document))
    cuts = breakpoints(adjacent_similarities(vectors), cfg.breakpoint_percentile)
    bounds = [0] + [i + 1 for i in cuts] + [len(document)]
    chunks = []
    for ordinal, (start, end) in enumerate(zip(bounds[:-1], bounds[1:])):
        ctx = (max(0, start - cfg.buffer_paragraphs), min(len(document), end + cfg.buffer_paragraphs))
        chunks.append(Chunk(
            chunk_id=f"{doc_id}#c{ordinal:03d}",
            doc_id=doc_id,
            ordinal=ordinal,
            text="\n\n".join(document[start:end]),
            paragraph_span=(start, end),
            context_span=ctx,
        ))
    return chunks
