"""Exact k-nearest-neighbor search over embedded labeled examples.

The index embeds each labeled task's question text and keeps the rendered
reference block (question, options, gold answer) used for in-context
prompting. Search is an exhaustive cosine scan: labeled sets here are small
and correctness beats speed. Results are ordered by descending similarity
with ties broken by ascending task id, so queries are fully deterministic.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .data import Dataset
from .errors import ValidationError
from .prompting import render_reference

Embedder = Callable[[list[str]], list[list[float]]]


@dataclass(frozen=True)
class IndexEntry:
    task_id: str
    vector: tuple[float, ...]
    rendered_example: str


class EmbeddingIndex:
    """Immutable cosine index; safe for concurrent queries."""

    def __init__(self, entries: Sequence[IndexEntry]):
        if not entries:
            raise ValidationError("embedding index needs at least one entry")
        dims = {len(e.vector) for e in entries}
        if len(dims) != 1:
            raise ValidationError(f"index vectors have mixed dimensions: {sorted(dims)}")
        ids = [e.task_id for e in entries]
        if len(set(ids)) != len(ids):
            raise ValidationError("index task ids must be unique")
        self.entries = list(entries)
        self.dimension = dims.pop()
        matrix = np.asarray([e.vector for e in entries], dtype=np.float64)
        norms = np.linalg.norm(matrix, axis=1)
        if np.any(norms == 0):
            zero = [entries[i].task_id for i in np.flatnonzero(norms == 0)]
            raise ValidationError(f"zero embedding vector for tasks {zero}")
        self._unit = matrix / norms[:, None]

    def __len__(self) -> int:
        return len(self.entries)

    def example_for(self, task_id: str) -> str:
        for e in self.entries:
            if e.task_id == task_id:
                return e.rendered_example
        raise KeyError(task_id)


def cosine(a: Sequence[float], b: Sequence[float]) -> float:
    va = np.asarray(a, dtype=np.float64)
    vb = np.asarray(b, dtype=np.float64)
    na = np.linalg.norm(va)
    nb = np.linalg.norm(vb)
    if na == 0 or nb == 0:
        raise ValidationError("cosine similarity is undefined for zero vectors")
    return float(np.dot(va, vb) / (na * nb))


def build_index(labeled: Dataset, embedder: Embedder) -> EmbeddingIndex:
    """Embed every labeled record's question and pair it with its reference block.

    Every record must carry a gold answer; the embedding covers the question
    text only, while the stored reference block includes options and answer.
    """
    if len(labeled) == 0:
        raise ValidationError("cannot index an empty labeled dataset")
    missing = [r.id for r in labeled if r.gold is None]
    if missing:
        raise ValidationError(f"labeled records without gold answers: {missing}")
    vectors = embedder([r.question for r in labeled])
    if len(vectors) != len(labeled):
        raise ValidationError(
            f"embedder returned {len(vectors)} vectors for {len(labeled)} records"
        )
    entries = [
        IndexEntry(
            task_id=record.id,
            vector=tuple(float(x) for x in vector),
            rendered_example=render_reference(record),
        )
        for record, vector in zip(labeled, vectors)
    ]
    return EmbeddingIndex(entries)


def knn(index: EmbeddingIndex, query_vec: Sequence[float], k: int) -> list[tuple[str, float]]:
    """Top-min(k, |index|) entries by cosine similarity, descending.

    Ties are broken by ascending task id.
    """
    if k < 1:
        raise ValidationError("k must be >= 1")
    q = np.asarray(query_vec, dtype=np.float64)
    if q.shape != (index.dimension,):
        raise ValidationError(
            f"query dimension {q.shape} does not match index dimension {index.dimension}"
        )
    qn = np.linalg.norm(q)
    if qn == 0:
        raise ValidationError("cannot query with a zero vector")
    sims = index._unit @ (q / qn)
    ranked = sorted(
        ((index.entries[i].task_id, float(sims[i])) for i in range(len(index))),
        key=lambda pair: (-pair[1], pair[0]),
    )
    return ranked[: min(k, len(index))]


def save_index(index: EmbeddingIndex, path: str | Path) -> None:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    with p.open("w", encoding="utf-8") as f:
        for e in index.entries:
            f.write(
                json.dumps(
                    {"id": e.task_id, "vector": list(e.vector), "rendered_example": e.rendered_example},
                    ensure_ascii=False,
                )
            )
            f.write("\n")


def load_index(path: str | Path) -> EmbeddingIndex:
    p = Path(path)
    if not p.exists():
        raise ValidationError(f"index file does not exist: {p}")
    entries = []
    with p.open("r", encoding="utf-8") as f:
        for raw in f:
            if not raw.strip():
                continue
            obj = json.loads(raw)
            entries.append(
                IndexEntry(
                    task_id=obj["id"],
                    vector=tuple(float(x) for x in obj["vector"]),
                    rendered_example=obj["rendered_example"],
                )
            )
    return EmbeddingIndex(entries)
