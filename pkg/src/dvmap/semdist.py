"""Semantic distance between held-out and seen questions.

Distances are cosine distances between question embeddings supplied as
data (the table records where its vectors came from; nothing here calls
an embedding service). The interesting output is how distance relates to
the per-question transfer gain.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

from .artifacts import read_jsonl
from .metrics import MetricError, pearson


class SemdistError(ValueError):
    pass


@dataclass(frozen=True)
class EmbeddingTable:
    ids: tuple[str, ...]
    vectors: tuple[tuple[float, ...], ...]
    source: str = "unspecified"

    def __post_init__(self) -> None:
        if len(self.ids) != len(self.vectors):
            raise SemdistError("ids and vectors disagree in length")
        if len(set(self.ids)) != len(self.ids):
            raise SemdistError("duplicate embedding ids")
        dims = {len(v) for v in self.vectors}
        if len(dims) > 1:
            raise SemdistError(f"mixed embedding dimensions: {sorted(dims)}")
        if dims and 0 in dims:
            raise SemdistError("zero-dimensional embeddings")

    @property
    def dim(self) -> int:
        return len(self.vectors[0]) if self.vectors else 0

    def vector(self, qid: str) -> tuple[float, ...]:
        try:
            return self.vectors[self.ids.index(qid)]
        except ValueError:
            raise SemdistError(f"no embedding for question {qid}") from None

    @classmethod
    def from_jsonl(cls, path: str | Path, source: str | None = None) -> "EmbeddingTable":
        ids: list[str] = []
        vectors: list[tuple[float, ...]] = []
        for row in read_jsonl(path):
            if "id" not in row or "vector" not in row:
                raise SemdistError(f"embedding rows need 'id' and 'vector': {row}")
            ids.append(str(row["id"]))
            vectors.append(tuple(float(v) for v in row["vector"]))
        return cls(ids=tuple(ids), vectors=tuple(vectors),
                   source=source or str(path))


def cosine_distance(u: Sequence[float], v: Sequence[float]) -> float:
    """1 - cos(u, v), clamped into [0, 2] against rounding."""
    if len(u) != len(v):
        raise SemdistError(f"dimension mismatch: {len(u)} vs {len(v)}")
    nu = math.sqrt(sum(a * a for a in u))
    nv = math.sqrt(sum(b * b for b in v))
    if nu == 0.0 or nv == 0.0:
        raise SemdistError("cosine distance undefined for zero vectors")
    dot = sum(a * b for a, b in zip(u, v))
    return min(2.0, max(0.0, 1.0 - dot / (nu * nv)))


@dataclass(frozen=True)
class DistanceRecord:
    question_id: str
    d_min: float
    d_avg: float
    nearest_id: str
    gain: float | None = None

    def to_json(self) -> dict:
        return {
            "question_id": self.question_id,
            "d_min": self.d_min,
            "d_avg": self.d_avg,
            "nearest_id": self.nearest_id,
            "gain": self.gain,
        }


def distance_profile(
    table: EmbeddingTable,
    test_ids: Sequence[str],
    train_ids: Sequence[str],
    gains: Mapping[str, float] | None = None,
) -> list[DistanceRecord]:
    """d_min / d_avg from each held-out question to the seen pool.

    Equidistant nearest neighbors resolve to the lexicographically
    smallest id so reruns agree byte for byte.
    """
    if not train_ids:
        raise SemdistError("empty train question pool")
    if not test_ids:
        raise SemdistError("no test questions")
    records: list[DistanceRecord] = []
    for qid in test_ids:
        u = table.vector(qid)
        best: tuple[float, str] | None = None
        total = 0.0
        for tid in train_ids:
            d = cosine_distance(u, table.vector(tid))
            total += d
            if best is None or (d, tid) < best:
                best = (d, tid)
        assert best is not None
        records.append(DistanceRecord(
            question_id=qid,
            d_min=best[0],
            d_avg=total / len(train_ids),
            nearest_id=best[1],
            gain=None if gains is None else gains.get(qid),
        ))
    return records


def gain_distance_correlation(records: Sequence[DistanceRecord], which: str = "d_min") -> float:
    """Pearson r between transfer gain and semantic distance."""
    if which not in ("d_min", "d_avg"):
        raise SemdistError(f"unknown distance field: {which!r}")
    xs = [getattr(r, which) for r in records if r.gain is not None]
    ys = [r.gain for r in records if r.gain is not None]
    if len(xs) < 3:
        raise SemdistError(f"need at least 3 records with gains, got {len(xs)}")
    try:
        return pearson(xs, ys)
    except MetricError as exc:
        raise SemdistError(str(exc)) from exc


def to_csv_text(records: Sequence[DistanceRecord]) -> str:
    lines = ["qid,d_min,d_avg,nearest_qid,gain"]
    for r in records:
        gain = "" if r.gain is None else f"{r.gain:.6f}"
        lines.append(f"{r.question_id},{r.d_min:.6f},{r.d_avg:.6f},{r.nearest_id},{gain}")
    return "\n".join(lines) + "\n"
