"""Text embedders used for chunking, EHR linking and retrieval."""
from __future__ import annotations

import hashlib
import os
import re

import numpy as np

from ..errors import EmbedError

_WS = re.compile(r"\s+")
_WORD = re.compile(r"[a-z0-9]+")


class EmbeddingBackend:
    """Maps texts to L2-normalized vectors; ``id`` identifies the model."""

    id: str = "abstract"

    def embed(self, texts: list[str]) -> np.ndarray:
        raise NotImplementedError


class HashingEmbedder(EmbeddingBackend):
    """Deterministic feature-hashing embedder over character n-grams and words.

    Same ``(dim, n, seed)`` always gives the same vectors, on any machine.
    """

    def __init__(self, dim: int = 256, n: int = 3, seed: int = 0):
        if dim <= 0 or n <= 0:
            raise ValueError("dim and n must be positive")
        self.dim = dim
        self.n = n
        self.seed = seed
        self.id = f"hash-ngram-v1:dim={dim}:n={n}:seed={seed}"
        self._key = seed.to_bytes(8, "little", signed=False)

    def _features(self, text: str):
        text = _WS.sub(" ", text.lower()).strip()
        if not text:
            return
        padded = f" {text} "
        for i in range(len(padded) - self.n + 1):
            yield "c:" + padded[i:i + self.n], 1.0
        for w in _WORD.findall(text):
            yield "w:" + w, 2.0

    def _vector(self, text: str) -> np.ndarray:
        v = np.zeros(self.dim)
        for feat, weight in self._features(text):
            h = hashlib.blake2b(feat.encode("utf-8"), digest_size=8, key=self._key).digest()
            idx = int.from_bytes(h[:4], "little") % self.dim
            sign = 1.0 if h[4] & 1 else -1.0
            v[idx] += sign * weight
        norm = np.linalg.norm(v)
        return v / norm if norm > 0 else v

    def embed(self, texts):
        if not texts:
            return np.zeros((0, self.dim))
        return np.vstack([self._vector(t) for t in texts])


class RemoteEmbedder(EmbeddingBackend):
    """Client for an OpenAI-style ``/embeddings`` endpoint."""

    def __init__(self, model: str | None = None, api_base: str | None = None, api_key: str | None = None,
                 timeout: float = 30.0, transport=None):
        self.model = model or os.environ.get("MAPIS_EMBED_MODEL", "text-embedding-3-small")
        self.api_base = (api_base or os.environ.get("MAPIS_API_BASE", "https://api.openai.com/v1")).rstrip("/")
        self.api_key = api_key or os.environ.get("MAPIS_API_KEY")
        self.timeout = timeout
        self.transport = transport
        self.id = f"remote:{self.model}"

    def embed(self, texts):
        import httpx

        if not texts:
            return np.zeros((0, 0))
        headers = {"Authorization": f"Bearer {self.api_key}"} if self.api_key else {}
        try:
            with httpx.Client(timeout=self.timeout, transport=self.transport) as client:
                resp = client.post(f"{self.api_base}/embeddings", headers=headers,
                                   json={"model": self.model, "input": list(texts)})
                resp.raise_for_status()
                data = sorted(resp.json()["data"], key=lambda d: d["index"])
            vecs = np.array([d["embedding"] for d in data], dtype=float)
        except (httpx.HTTPError, KeyError, ValueError, TypeError) as exc:
            raise EmbedError(f"embedding request failed: {exc}") from exc
        if len(vecs) != len(texts):
            raise EmbedError("embedding response size mismatch")
        norms = np.linalg.norm(vecs, axis=1, keepdims=True)
        norms[norms == 0] = 1.0
        return vecs / norms


def safe_embed(embedder: EmbeddingBackend, texts: list[str]) -> np.ndarray:
    try:
        return embedder.embed(texts)
    except EmbedError:
        raise
    except Exception as exc:
        raise EmbedError(f"{embedder.id}: {exc}") from exc


def cosine_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Cosine similarity of L2-normalized rows, rounded so ties are exact."""
    return np.round(a @ b.T, 12)


def embedder_from_id(embedder_id: str) -> EmbeddingBackend:
    """Recreate the embedder a graph was built with from its manifest id."""
    if embedder_id.startswith("hash-ngram-v1:"):
        params = dict(part.split("=", 1) for part in embedder_id.split(":")[1:])
        try:
            return HashingEmbedder(int(params["dim"]), int(params["n"]), int(params["seed"]))
        except (KeyError, ValueError):
            raise EmbedError(f"malformed embedder id {embedder_id!r}") from None
    if embedder_id.startswith("remote:"):
        return RemoteEmbedder(model=embedder_id.split(":", 1)[1])
    raise EmbedError(f"unknown embedder id {embedder_id!r}")
