"""Retrieval stack: chunked vector index, rerank, top-k, and tool fallback.

The default embedding backend hashes tokens into count buckets, which keeps
tests offline and bit-reproducible; a remote HTTP backend plugs in behind
the same interface. Retrieval runs an exact cosine scan: corpora here are
small enough that an ANN index would be pure overhead.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import re
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Protocol, Sequence

import httpx
import numpy as np

log = logging.getLogger(__name__)

DEFAULT_K_RETRIEVE = 10
DEFAULT_K_KEEP = 3
DEFAULT_MIN_EFFECTIVE_SCORE = 0.05

_TOKEN_RE = re.compile(r"[a-z0-9]+")

EMBED_URL_ENV = "CONFLOOP_EMBED_URL"
EMBED_KEY_ENV = "CONFLOOP_EMBED_KEY"


def tokenize(text: str) -> list[str]:
    return _TOKEN_RE.findall(text.lower())


@dataclass(frozen=True)
class DocumentChunk:
    id: str
    source: str
    text: str
    position: tuple[str, int]

    def __post_init__(self) -> None:
        if not self.text:
            raise ValueError(f"chunk {self.id}: empty text")

    def to_dict(self) -> dict:
        return {"id": self.id, "source": self.source, "text": self.text, "position": list(self.position)}

    @classmethod
    def from_dict(cls, d) -> "DocumentChunk":
        return cls(str(d["id"]), str(d["source"]), str(d["text"]), (str(d["position"][0]), int(d["position"][1])))


@dataclass(frozen=True)
class KnowledgeItem:
    chunk: DocumentChunk
    retrieval_score: float
    rerank_score: float | None = None
    provenance: str = "rag"

    def to_dict(self) -> dict:
        return {
            "chunk": self.chunk.to_dict(),
            "retrieval_score": self.retrieval_score,
            "rerank_score": self.rerank_score,
            "provenance": self.provenance,
        }


class EmbeddingBackend(Protocol):
    name: str
    dimension: int

    def embed(self, text: str) -> np.ndarray: ...


class Reranker(Protocol):
    def score(self, query: str, text: str) -> float: ...


class ToolSource(Protocol):
    name: str

    def fetch(self, query: str, k: int) -> list[DocumentChunk]: ...


class HashedTokenEmbedding:
    """Deterministic token-count embedding: sha256 buckets, no network."""

    def __init__(self, dimension: int = 256):
        self.name = f"hashed-token-{dimension}"
        self.dimension = dimension

    def embed(self, text: str) -> np.ndarray:
        vec = np.zeros(self.dimension, dtype=float)
        for token in tokenize(text):
            bucket = int.from_bytes(hashlib.sha256(token.encode()).digest()[:4], "big") % self.dimension
            vec[bucket] += 1.0
        return vec


class RemoteEmbeddingBackend:
    """HTTP embedding client: POST {"texts": [...]} -> {"vectors": [[...]]}.

    Endpoint and key default to the CONFLOOP_EMBED_URL / CONFLOOP_EMBED_KEY
    environment variables.
    """

    def __init__(self, url: str | None = None, api_key: str | None = None,
                 dimension: int = 0, client: httpx.Client | None = None):
        self.url = url or os.environ.get(EMBED_URL_ENV, "")
        if not self.url:
            raise ValueError(f"remote embedding backend needs a url ({EMBED_URL_ENV})")
        self.api_key = api_key if api_key is not None else os.environ.get(EMBED_KEY_ENV, "")
        self.dimension = dimension
        self.name = f"remote:{self.url}"
        self._client = client or httpx.Client(timeout=30.0)

    def embed(self, text: str) -> np.ndarray:
        headers = {"Authorization": f"Bearer {self.api_key}"} if self.api_key else {}
        resp = self._client.post(self.url, json={"texts": [text]}, headers=headers)
        resp.raise_for_status()
        vec = np.array(resp.json()["vectors"][0], dtype=float)
        if self.dimension == 0:
            self.dimension = vec.size
        return vec


class JaccardReranker:
    """Token-set Jaccard overlap between the query and chunk text."""

    def score(self, query: str, text: str) -> float:
        q = set(tokenize(query))
        t = set(tokenize(text))
        if not q or not t:
            return 0.0
        return len(q & t) / len(q | t)


@dataclass
class Index:
    """Embedded chunk store; carries the backend that embeds its queries."""

    backend: EmbeddingBackend
    chunks: tuple[DocumentChunk, ...]
    vectors: np.ndarray  # (len(chunks), backend.dimension)

    def __len__(self) -> int:
        return len(self.chunks)


def chunk_text(text: str, size: int, overlap: int) -> list[str]:
    """Fixed-size character windows with the given overlap."""
    if size < 1:
        raise ValueError("chunk size must be >= 1")
    if not 0 <= overlap < size:
        raise ValueError("overlap must be in [0, size)")
    stride = size - overlap
    return [text[start:start + size] for start in range(0, len(text), stride)]


def ingest(corpus_dir: str | Path, backend: EmbeddingBackend,
           chunk_size: int = 400, overlap: int = 100) -> Index:
    """Chunk and embed every .txt document under the corpus directory."""
    corpus = Path(corpus_dir)
    chunks: list[DocumentChunk] = []
    vectors: list[np.ndarray] = []
    files = sorted(corpus.glob("*.txt")) if corpus.is_dir() else []
    for path in files:
        text = path.read_text(encoding="utf-8")
        for i, piece in enumerate(chunk_text(text, chunk_size, overlap)):
            if not piece:
                continue
            chunk = DocumentChunk(
                id=f"{path.stem}:{i}",
                source=corpus.name,
                text=piece,
                position=(path.name, i),
            )
            chunks.append(chunk)
            vectors.append(backend.embed(piece))
    if not chunks:
        log.warning("corpus %s produced an empty index; retrieval will always fall back to tools", corpus)
        return Index(backend, (), np.zeros((0, backend.dimension)))
    return Index(backend, tuple(chunks), np.vstack(vectors))


def _cosine(matrix: np.ndarray, vec: np.ndarray) -> np.ndarray:
    if matrix.shape[0] == 0:
        return np.zeros(0)
    norms = np.linalg.norm(matrix, axis=1) * np.linalg.norm(vec)
    dots = matrix @ vec
    out = np.zeros(matrix.shape[0])
    nonzero = norms > 0
    out[nonzero] = dots[nonzero] / norms[nonzero]
    return out


def retrieve(index: Index, query: str, k: int = DEFAULT_K_RETRIEVE) -> list[KnowledgeItem]:
    """Top-k chunks by cosine similarity to the query embedding."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if len(index) == 0:
        return []
    scores = _cosine(index.vectors, index.backend.embed(query))
    order = sorted(range(len(index)), key=lambda i: (-scores[i], index.chunks[i].id))
    return [
        KnowledgeItem(chunk=index.chunks[i], retrieval_score=float(scores[i]), provenance="rag")
        for i in order[:k]
    ]


def rerank(items: Sequence[KnowledgeItem], query: str, reranker: Reranker | None = None) -> list[KnowledgeItem]:
    """Reorder retrieved items by the reranker's score, descending."""
    reranker = reranker or JaccardReranker()
    scored = [replace(item, rerank_score=float(reranker.score(query, item.chunk.text))) for item in items]
    scored.sort(key=lambda it: (-(it.rerank_score or 0.0), -it.retrieval_score, it.chunk.id))
    return scored


def top_k(items: Sequence[KnowledgeItem], k: int) -> list[KnowledgeItem]:
    if k < 0:
        raise ValueError("k must be >= 0")
    return list(items[:k])


class LocalDirectoryTool:
    """Fixture tool: ranks .txt files in a directory by query-token overlap."""

    def __init__(self, directory: str | Path, name: str | None = None):
        self.directory = Path(directory)
        self.name = name or f"local:{self.directory.name}"

    def fetch(self, query: str, k: int) -> list[DocumentChunk]:
        q_tokens = set(tokenize(query))
        scored = []
        for path in sorted(self.directory.glob("*.txt")) if self.directory.is_dir() else []:
            text = path.read_text(encoding="utf-8")
            overlap = len(q_tokens & set(tokenize(text)))
            if overlap > 0 and text:
                scored.append((-overlap, path.name, text))
        scored.sort()
        return [
            DocumentChunk(id=f"tool:{name}", source=self.name, text=text, position=(name, 0))
            for _, name, text in scored[:k]
        ]


class HttpToolSource:
    """Literature-search HTTP client: GET ?query=...&k=... -> {"documents": [...]}."""

    def __init__(self, endpoint: str, name: str = "http-tool", api_key: str | None = None,
                 client: httpx.Client | None = None):
        self.endpoint = endpoint
        self.name = name
        self.api_key = api_key
        self._client = client or httpx.Client(timeout=30.0)

    def fetch(self, query: str, k: int) -> list[DocumentChunk]:
        headers = {"Authorization": f"Bearer {self.api_key}"} if self.api_key else {}
        resp = self._client.get(self.endpoint, params={"query": query, "k": k}, headers=headers)
        resp.raise_for_status()
        docs = resp.json().get("documents", [])
        chunks = []
        for i, doc in enumerate(docs[:k]):
            text = str(doc.get("text", ""))
            if not text:
                continue
            chunks.append(
                DocumentChunk(
                    id=f"tool:{doc.get('id', i)}",
                    source=self.name,
                    text=text,
                    position=(str(doc.get("id", i)), 0),
                )
            )
        return chunks


@dataclass(frozen=True)
class GatherConfig:
    k_retrieve: int = DEFAULT_K_RETRIEVE
    k_keep: int = DEFAULT_K_KEEP
    min_effective_score: float = DEFAULT_MIN_EFFECTIVE_SCORE


@dataclass
class GatherTrace:
    """One gather's pipeline shape, for audit: counts, rerank flag, fallback."""

    query: str
    source_pref: str
    k_retrieve: int
    retrieved: int
    reranked: bool
    k_keep: int
    kept: int
    fallback: bool
    provenance: str
    tool_name: str | None = None

    def to_dict(self) -> dict:
        return {
            "query": self.query,
            "source_pref": self.source_pref,
            "k_retrieve": self.k_retrieve,
            "retrieved": self.retrieved,
            "reranked": self.reranked,
            "k_keep": self.k_keep,
            "kept": self.kept,
            "fallback": self.fallback,
            "provenance": self.provenance,
            "tool_name": self.tool_name,
        }


def gather(
    index: Index | None,
    tools: Sequence[ToolSource],
    query: str,
    cfg: GatherConfig = GatherConfig(),
    reranker: Reranker | None = None,
    source_pref: str = "rag",
    trace_out: list[GatherTrace] | None = None,
) -> list[KnowledgeItem]:
    """Retrieve -> rerank -> truncate, falling back to tools when retrieval
    yields nothing effective (or when the sub-query prefers tools outright).
    """
    trace = GatherTrace(
        query=query, source_pref=source_pref, k_retrieve=cfg.k_retrieve,
        retrieved=0, reranked=False, k_keep=cfg.k_keep, kept=0,
        fallback=False, provenance="none",
    )
    items: list[KnowledgeItem] = []

    if source_pref == "rag" and index is not None and len(index) > 0:
        retrieved = retrieve(index, query, cfg.k_retrieve)
        trace.retrieved = len(retrieved)
        reranked = rerank(retrieved, query, reranker)
        trace.reranked = True
        kept = top_k(reranked, cfg.k_keep)
        best = kept[0].rerank_score if kept else None
        if kept and best is not None and best >= cfg.min_effective_score:
            items = kept
            trace.provenance = "rag"

    if not items:
        if source_pref == "rag":
            trace.fallback = True
        for tool in tools:
            chunks = tool.fetch(query, cfg.k_keep)
            if chunks:
                items = [
                    KnowledgeItem(chunk=c, retrieval_score=0.0, rerank_score=None, provenance="tool")
                    for c in chunks[:cfg.k_keep]
                ]
                trace.provenance = "tool"
                trace.tool_name = tool.name
                break

    if not items:
        log.info("no knowledge found for query %r; agent proceeds unsupported", query)
    trace.kept = len(items)
    if trace_out is not None:
        trace_out.append(trace)
    return items


def save_index(index: Index, path: str | Path) -> None:
    payload = {
        "backend_name": index.backend.name,
        "dimension": index.backend.dimension,
        "chunks": [c.to_dict() for c in index.chunks],
        "vectors": [list(map(float, row)) for row in index.vectors],
    }
    Path(path).write_text(json.dumps(payload, sort_keys=True), encoding="utf-8")


def load_index(path: str | Path, backend: EmbeddingBackend) -> Index:
    """Load a persisted index; the backend must match the one that built it."""
    payload = json.loads(Path(path).read_text(encoding="utf-8"))
    if payload["backend_name"] != backend.name:
        raise ValueError(
            f"index was built with backend {payload['backend_name']!r}, got {backend.name!r}"
        )
    chunks = tuple(DocumentChunk.from_dict(c) for c in payload["chunks"])
    vectors = np.array(payload["vectors"], dtype=float)
    if vectors.size == 0:
        vectors = np.zeros((0, int(payload["dimension"])))
    return Index(backend, chunks, vectors)
