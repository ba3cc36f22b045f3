"""Dense retrieval: overlapping chunking, flat cosine index, sentence expansion,
and two-stage disease-KG lookup.

The index is a flat exhaustive cosine scan; at this corpus scale exactness is
cheap and the brute-force oracle in the tests stays meaningful.  Embedding is
a pluggable callable: list[str] -> list[Vector].
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, IO, Iterable, Sequence

import numpy as np

from .corpus import Span, segment_sentences

Embedder = Callable[[Sequence[str]], "list[Vector]"]

INDEX_FORMAT_VERSION = 1
DEFAULT_CHUNK_SIZE = 64
DEFAULT_CHUNK_OVERLAP = 16
DEFAULT_TOP_K = 2


class RetrievalError(Exception):
    pass


@dataclass(frozen=True)
class Vector:
    components: tuple[float, ...]
    norm: float

    @classmethod
    def of(cls, values: Iterable[float]) -> "Vector":
        comps = tuple(float(v) for v in values)
        return cls(components=comps, norm=float(np.linalg.norm(comps)))

    @property
    def dimension(self) -> int:
        return len(self.components)


def cosine(a: Vector, b: Vector) -> float:
    """Cosine similarity; zero-norm vectors score 0 by definition."""
    if a.dimension != b.dimension:
        raise RetrievalError(f"dimension mismatch: {a.dimension} vs {b.dimension}")
    if a.norm == 0.0 or b.norm == 0.0:
        return 0.0
    return float(np.dot(a.components, b.components) / (a.norm * b.norm))


@dataclass(frozen=True)
class Chunk:
    doc_id: str
    range: Span
    text: str


@dataclass(frozen=True)
class RetrievalHit:
    chunk: Chunk
    score: float
    rank: int


@dataclass(frozen=True)
class Snippet:
    text: str
    source: str  # doc id or disease name


@dataclass(frozen=True)
class KgEntry:
    disease_name: str
    description: str

    def __post_init__(self) -> None:
        if not self.disease_name:
            raise ValueError("disease_name must be non-empty")


def chunk_text(text: str, size: int, overlap: int) -> list[Chunk]:
    """Sliding windows with stride size - overlap; the final chunk may be short."""
    if overlap < 0 or overlap >= size:
        raise RetrievalError(f"overlap {overlap} must satisfy 0 <= overlap < size {size}")
    if not text:
        return []
    stride = size - overlap
    chunks: list[Chunk] = []
    start = 0
    while True:
        end = min(start + size, len(text))
        chunks.append(Chunk(doc_id="", range=Span(start, end), text=text[start:end]))
        if end == len(text):
            break
        start += stride
    return chunks


class DocIndex:
    """Immutable flat index: parallel chunk and vector arrays plus the doc store."""

    def __init__(
        self,
        chunks: list[Chunk],
        vectors: list[Vector],
        doc_store: dict[str, str],
        dimension: int,
    ) -> None:
        if len(chunks) != len(vectors):
            raise RetrievalError("chunks and vectors must be parallel")
        self.chunks = tuple(chunks)
        self.doc_store = dict(doc_store)
        self.dimension = dimension
        self._matrix = (
            np.array([v.components for v in vectors], dtype=np.float64)
            if vectors
            else np.zeros((0, dimension))
        )
        self._norms = np.linalg.norm(self._matrix, axis=1) if len(vectors) else np.zeros(0)

    def __len__(self) -> int:
        return len(self.chunks)

    @property
    def vectors(self) -> list[Vector]:
        return [Vector.of(row) for row in self._matrix]

    @classmethod
    def build(
        cls,
        docs: dict[str, str],
        embedder: Embedder,
        chunk_size: int = DEFAULT_CHUNK_SIZE,
        overlap: int = DEFAULT_CHUNK_OVERLAP,
    ) -> "DocIndex":
        chunks: list[Chunk] = []
        for doc_id in sorted(docs):
            for c in chunk_text(docs[doc_id], chunk_size, overlap):
                chunks.append(Chunk(doc_id=doc_id, range=c.range, text=c.text))
        if not chunks:
            return cls([], [], docs, dimension=0)
        try:
            vectors = embedder([c.text for c in chunks])
        except Exception as exc:
            raise RetrievalError(f"embedding failed while indexing: {exc}") from exc
        dims = {v.dimension for v in vectors}
        if len(dims) != 1:
            raise RetrievalError(f"embedder returned mixed dimensions: {sorted(dims)}")
        return cls(chunks, vectors, docs, dimension=dims.pop())

    def save(self, path: Path) -> None:
        payload = {
            "format_version": INDEX_FORMAT_VERSION,
            "dimension": self.dimension,
            "doc_store": self.doc_store,
            "chunks": [
                {"doc_id": c.doc_id, "range": c.range.as_list(), "text": c.text}
                for c in self.chunks
            ],
            "vectors": self._matrix.tolist(),
        }
        path.write_text(json.dumps(payload, ensure_ascii=False, sort_keys=True), encoding="utf-8")

    @classmethod
    def load(cls, path: Path) -> "DocIndex":
        payload = json.loads(path.read_text(encoding="utf-8"))
        if payload.get("format_version") != INDEX_FORMAT_VERSION:
            raise RetrievalError(f"unsupported index format: {payload.get('format_version')}")
        chunks = [
            Chunk(doc_id=c["doc_id"], range=Span(*c["range"]), text=c["text"])
            for c in payload["chunks"]
        ]
        vectors = [Vector.of(v) for v in payload["vectors"]]
        return cls(chunks, vectors, payload["doc_store"], payload["dimension"])


def top_k(index: DocIndex, query: Vector, k: int) -> list[RetrievalHit]:
    """The k highest-cosine chunks, ties broken by ascending chunk position."""
    if k < 1:
        raise RetrievalError("k must be >= 1")
    if len(index) == 0:
        return []
    if query.dimension != index.dimension:
        raise RetrievalError(
            f"query dimension {query.dimension} != index dimension {index.dimension}"
        )
    if query.norm == 0.0:
        scores = np.zeros(len(index))
    else:
        denom = index._norms * query.norm
        dots = index._matrix @ np.array(query.components)
        scores = np.where(denom > 0.0, dots / np.where(denom == 0.0, 1.0, denom), 0.0)
    order = sorted(range(len(index)), key=lambda i: (-scores[i], i))[:k]
    return [
        RetrievalHit(chunk=index.chunks[i], score=float(scores[i]), rank=rank)
        for rank, i in enumerate(order)
    ]


def expand_to_sentence(doc_text: str, chunk_range: Span) -> Span:
    """Grow a range outward to the nearest sentence start and end."""
    if not chunk_range.within(len(doc_text)):
        raise RetrievalError("chunk range outside document bounds")
    sentences = segment_sentences(doc_text)
    hit = [s.range for s in sentences if s.range.overlaps(chunk_range)]
    if not hit:
        return chunk_range
    return Span(hit[0].start, hit[-1].end)


def retrieve_evidence(
    index: DocIndex, query_text: str, embedder: Embedder, k: int = DEFAULT_TOP_K
) -> list[Snippet]:
    """Top-k search, sentence expansion, order-preserving dedup."""
    if len(index) == 0:
        return []
    query = embedder([query_text])[0]
    snippets: list[Snippet] = []
    seen: set[str] = set()
    for hit in top_k(index, query, k):
        doc_text = index.doc_store[hit.chunk.doc_id]
        span = expand_to_sentence(doc_text, hit.chunk.range)
        text = span.slice(doc_text)
        if text not in seen:
            seen.add(text)
            snippets.append(Snippet(text=text, source=hit.chunk.doc_id))
    return snippets


def kg_retrieve(
    kg: list[KgEntry],
    query_text: str,
    embedder: Embedder,
    k_disease: int = 1,
    k_chunk: int = DEFAULT_TOP_K,
    chunk_size: int = DEFAULT_CHUNK_SIZE,
    overlap: int = DEFAULT_CHUNK_OVERLAP,
) -> list[Snippet]:
    """Two-stage lookup: match disease names first, then search only the
    selected entries' descriptions."""
    if not kg:
        raise RetrievalError("knowledge graph is empty")
    query = embedder([query_text])[0]
    name_vectors = embedder([e.disease_name for e in kg])
    scored = sorted(
        range(len(kg)), key=lambda i: (-cosine(query, name_vectors[i]), i)
    )[:k_disease]
    selected = [kg[i] for i in scored]
    stage2 = DocIndex.build(
        {e.disease_name: e.description for e in selected},
        embedder,
        chunk_size=chunk_size,
        overlap=overlap,
    )
    snippets: list[Snippet] = []
    seen: set[str] = set()
    for hit in top_k(stage2, query, k_chunk) if len(stage2) else []:
        doc_text = stage2.doc_store[hit.chunk.doc_id]
        span = expand_to_sentence(doc_text, hit.chunk.range)
        text = span.slice(doc_text)
        if text not in seen:
            seen.add(text)
            snippets.append(Snippet(text=text, source=hit.chunk.doc_id))
    return snippets


def read_kg(stream: IO[str] | Iterable[str]) -> list[KgEntry]:
    """Parse a line-delimited KG file: {"disease_name", "description"} per line."""
    entries: list[KgEntry] = []
    for line in stream:
        if not line.strip():
            continue
        raw = json.loads(line)
        entries.append(KgEntry(disease_name=raw["disease_name"], description=raw["description"]))
    return entries
