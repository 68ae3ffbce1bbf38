"""Global speaker IDs from per-utterance audio embeddings.

Utterances whose embeddings have cosine similarity at or above a threshold
are linked, and each connected component becomes one global speaker. IDs
are numbered C1, C2, ... by the earliest utterance of each component.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from decimal import Decimal
from fractions import Fraction
from typing import Any, Iterable, Mapping, Sequence

import numpy as np

from storypipe.errors import ValidationError
from storypipe.timeline import (
    GlobalSpeakerId,
    SubtitleTrack,
    check_list,
    check_record,
    dump_json,
    read_json,
)

DEFAULT_THRESHOLD = 0.85


@dataclass(frozen=True)
class UtteranceEmbedding:
    subtitle_index: int
    vector: tuple[float, ...]

    def __post_init__(self) -> None:
        vec = tuple(float(x) for x in self.vector)
        object.__setattr__(self, "vector", vec)
        if not vec:
            raise ValidationError(f"embedding for subtitle {self.subtitle_index} is empty")
        if not all(math.isfinite(x) for x in vec):
            raise ValidationError(f"embedding for subtitle {self.subtitle_index} has non-finite entries")
        if not any(vec):
            raise ValidationError(f"embedding for subtitle {self.subtitle_index} is all zeros")


@dataclass(frozen=True)
class ClusterAssignment:
    mapping: dict[int, GlobalSpeakerId]
    threshold: float

    def clusters(self) -> list[frozenset[int]]:
        """Set partition of subtitle indices, ordered by global ID."""
        groups: dict[GlobalSpeakerId, set[int]] = {}
        for idx, gid in self.mapping.items():
            groups.setdefault(gid, set()).add(idx)
        return [frozenset(groups[g]) for g in sorted(groups)]


@dataclass(frozen=True)
class LabeledPair:
    index_a: int
    index_b: int
    same_speaker: bool

    def __post_init__(self) -> None:
        if self.index_a == self.index_b:
            raise ValidationError(f"labeled pair references subtitle {self.index_a} twice")

    @property
    def key(self) -> tuple[int, int]:
        return (min(self.index_a, self.index_b), max(self.index_a, self.index_b))


@dataclass(frozen=True)
class SweepRow:
    """Pair-classification metrics at one threshold (positive = same speaker)."""

    threshold: float
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def accuracy(self) -> float:
        total = self.tp + self.fp + self.fn + self.tn
        return (self.tp + self.tn) / total if total else 0.0

    @property
    def precision(self) -> float:
        return self.tp / (self.tp + self.fp) if self.tp + self.fp else 0.0

    @property
    def recall(self) -> float:
        return self.tp / (self.tp + self.fn) if self.tp + self.fn else 0.0

    @property
    def f1(self) -> float:
        # 2PR/(P+R) rewritten on counts; zero when P+R is zero
        denom = 2 * self.tp + self.fp + self.fn
        return 2 * self.tp / denom if self.tp else 0.0

    def exact(self) -> dict[str, Fraction]:
        total = self.tp + self.fp + self.fn + self.tn
        return {
            "accuracy": Fraction(self.tp + self.tn, total) if total else Fraction(0),
            "precision": Fraction(self.tp, self.tp + self.fp) if self.tp + self.fp else Fraction(0),
            "recall": Fraction(self.tp, self.tp + self.fn) if self.tp + self.fn else Fraction(0),
            "f1": Fraction(2 * self.tp, 2 * self.tp + self.fp + self.fn) if self.tp else Fraction(0),
        }

    def to_json(self) -> dict[str, Any]:
        return {
            "threshold": self.threshold,
            "pair_accuracy": self.accuracy,
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "tp": self.tp,
            "fp": self.fp,
            "fn": self.fn,
            "tn": self.tn,
        }


def _as_array(e: UtteranceEmbedding | Sequence[float]) -> np.ndarray:
    vec = e.vector if isinstance(e, UtteranceEmbedding) else e
    return np.asarray(vec, dtype=np.float64)


def cosine(a: UtteranceEmbedding | Sequence[float], b: UtteranceEmbedding | Sequence[float]) -> float:
    """Cosine similarity clamped to [-1, 1]."""
    x, y = _as_array(a), _as_array(b)
    if x.shape != y.shape:
        raise ValidationError(f"embedding dimensions differ: {x.shape[0]} vs {y.shape[0]}")
    nx, ny = np.linalg.norm(x), np.linalg.norm(y)
    if nx == 0 or ny == 0:
        raise ValidationError("cosine similarity undefined for a zero vector")
    return float(min(1.0, max(-1.0, float(np.dot(x, y)) / (nx * ny))))


def similarity_matrix(embeddings: Sequence[UtteranceEmbedding]) -> np.ndarray:
    """All-pairs cosine similarity, symmetric by construction."""
    if not embeddings:
        return np.zeros((0, 0))
    dims = {len(e.vector) for e in embeddings}
    if len(dims) != 1:
        raise ValidationError(f"embeddings have mixed dimensions {sorted(dims)}")
    x = np.array([e.vector for e in embeddings], dtype=np.float64)
    norms = np.linalg.norm(x, axis=1)
    if np.any(norms == 0):
        raise ValidationError("cosine similarity undefined for a zero vector")
    x = x / norms[:, None]
    sims = np.clip(x @ x.T, -1.0, 1.0)
    upper = np.triu(sims, 1)
    sims = upper + upper.T
    np.fill_diagonal(sims, 1.0)
    return sims


class _DisjointSet:
    def __init__(self, n: int):
        self.parent = list(range(n))

    def find(self, i: int) -> int:
        while self.parent[i] != i:
            self.parent[i] = self.parent[self.parent[i]]
            i = self.parent[i]
        return i

    def union(self, i: int, j: int) -> None:
        ri, rj = self.find(i), self.find(j)
        if ri != rj:
            self.parent[max(ri, rj)] = min(ri, rj)


def _order_keys(indices: Sequence[int], track: SubtitleTrack | None) -> dict[int, tuple]:
    if track is None:
        return {i: (i,) for i in indices}
    lines = track.by_index()
    missing = [i for i in indices if i not in lines]
    if missing:
        raise ValidationError(f"embeddings reference subtitle indices absent from the track: {missing}")
    return {i: lines[i].sort_key for i in indices}


def cluster_from_similarities(
    indices: Sequence[int],
    sims: np.ndarray | Sequence[Sequence[float]],
    threshold: float = DEFAULT_THRESHOLD,
    track: SubtitleTrack | None = None,
) -> ClusterAssignment:
    """Connected components of the graph with an edge wherever sim >= threshold."""
    if not -1.0 <= threshold <= 1.0:
        raise ValidationError(f"threshold {threshold} outside [-1, 1]")
    if len(set(indices)) != len(indices):
        raise ValidationError("duplicate subtitle index among embeddings")
    sims = np.asarray(sims, dtype=np.float64)
    n = len(indices)
    if sims.shape != (n, n):
        raise ValidationError(f"similarity matrix shape {sims.shape} does not match {n} utterances")
    dsu = _DisjointSet(n)
    rows, cols = np.nonzero(np.triu(sims >= threshold, 1))
    for i, j in zip(rows.tolist(), cols.tolist()):
        dsu.union(i, j)

    keys = _order_keys(indices, track)
    first: dict[int, tuple] = {}
    for pos, idx in enumerate(indices):
        root = dsu.find(pos)
        if root not in first or keys[idx] < first[root]:
            first[root] = keys[idx]
    ordinal = {root: k for k, root in enumerate(sorted(first, key=first.get), start=1)}
    mapping = {idx: GlobalSpeakerId(ordinal[dsu.find(pos)]) for pos, idx in enumerate(indices)}
    return ClusterAssignment(dict(sorted(mapping.items())), float(threshold))


def cluster(
    embeddings: Sequence[UtteranceEmbedding],
    threshold: float = DEFAULT_THRESHOLD,
    track: SubtitleTrack | None = None,
) -> ClusterAssignment:
    """Threshold clustering of utterance embeddings.

    ``track`` supplies start times for ID numbering; without it subtitle
    indices (which are temporal) are used.
    """
    if not embeddings:
        raise ValidationError("cannot cluster an empty embedding list")
    # canonical order keeps the float similarities independent of input order
    embeddings = sorted(embeddings, key=lambda e: e.subtitle_index)
    indices = [e.subtitle_index for e in embeddings]
    return cluster_from_similarities(indices, similarity_matrix(embeddings), threshold, track)


def assign_global_ids(track: SubtitleTrack, assignment: ClusterAssignment) -> SubtitleTrack:
    have, want = set(assignment.mapping), set(track.indices())
    if have != want:
        parts = []
        if want - have:
            parts.append(f"missing {sorted(want - have)}")
        if have - want:
            parts.append(f"extra {sorted(have - want)}")
        raise ValidationError("cluster assignment does not cover the track: " + ", ".join(parts))
    return track.replace_lines(replace(ln, global_id=assignment.mapping[ln.index]) for ln in track)


def threshold_grid(start: float, stop: float, step: float) -> list[float]:
    """Inclusive decimal grid, e.g. 0.5, 0.55, ..., 1.0 without float drift."""
    lo, hi, st = Decimal(str(start)), Decimal(str(stop)), Decimal(str(step))
    if st <= 0:
        raise ValidationError("grid step must be positive")
    out = []
    t = lo
    while t <= hi:
        out.append(float(t))
        t += st
    return out


def pair_similarities(
    pairs: Iterable[LabeledPair], embeddings: Sequence[UtteranceEmbedding]
) -> dict[tuple[int, int], float]:
    by_index = {e.subtitle_index: e for e in embeddings}
    sims = {}
    for p in pairs:
        for idx in (p.index_a, p.index_b):
            if idx not in by_index:
                raise ValidationError(f"pair ({p.index_a}, {p.index_b}) references unknown embedding {idx}")
        sims[p.key] = cosine(by_index[p.index_a], by_index[p.index_b])
    return sims


def sweep_thresholds(
    pairs: Sequence[LabeledPair],
    sims: Mapping[tuple[int, int], float],
    grid: Iterable[float],
) -> list[SweepRow]:
    """Same-speaker classification metrics for every threshold in ``grid``.

    ``sims`` is keyed by the (smaller, larger) subtitle index of each pair.
    """
    pairs = list(pairs)
    grid = sorted(set(grid))
    if not pairs or not grid:
        raise ValidationError("sweep needs at least one pair and one threshold")
    scored = []
    for p in pairs:
        if p.key not in sims:
            raise ValidationError(f"no similarity for pair {p.key}")
        scored.append((float(sims[p.key]), p.same_speaker))
    rows = []
    for t in grid:
        tp = sum(1 for s, y in scored if s >= t and y)
        fp = sum(1 for s, y in scored if s >= t and not y)
        fn = sum(1 for s, y in scored if s < t and y)
        tn = len(scored) - tp - fp - fn
        rows.append(SweepRow(float(t), tp, fp, fn, tn))
    return rows


# ---------------------------------------------------------------------------
# files
# ---------------------------------------------------------------------------


def load_embeddings(data: bytes | str, *, strict: bool = False) -> list[UtteranceEmbedding]:
    doc = check_record(read_json(data, "embeddings"), "embeddings file", ["dim", "items"], strict=strict)
    dim = doc["dim"]
    if isinstance(dim, bool) or not isinstance(dim, int) or dim < 1:
        raise ValidationError(f"embeddings file: dim must be a positive integer, got {dim!r}")
    out = []
    seen = set()
    for i, rec in enumerate(check_list(doc["items"], "embeddings items")):
        check_record(rec, f"embedding item #{i}", ["subtitle_index", "vector"], strict=strict)
        vec = check_list(rec["vector"], f"embedding item #{i} vector")
        if len(vec) != dim:
            raise ValidationError(f"embedding for subtitle {rec['subtitle_index']} has length {len(vec)}, dim is {dim}")
        if not all(isinstance(x, (int, float)) and not isinstance(x, bool) for x in vec):
            raise ValidationError(f"embedding for subtitle {rec['subtitle_index']} has non-numeric entries")
        if rec["subtitle_index"] in seen:
            raise ValidationError(f"duplicate embedding for subtitle {rec['subtitle_index']}")
        seen.add(rec["subtitle_index"])
        out.append(UtteranceEmbedding(rec["subtitle_index"], tuple(vec)))
    return out


def load_pairs(data: bytes | str, *, strict: bool = False) -> list[LabeledPair]:
    doc = check_record(read_json(data, "pairs"), "pairs file", ["pairs"], strict=strict)
    out = []
    for i, rec in enumerate(check_list(doc["pairs"], "pairs")):
        check_record(rec, f"pair #{i}", ["a", "b", "same_speaker"], strict=strict)
        if not isinstance(rec["same_speaker"], bool):
            raise ValidationError(f"pair #{i}: same_speaker must be a boolean")
        out.append(LabeledPair(rec["a"], rec["b"], rec["same_speaker"]))
    return out


def dump_sweep(rows: Sequence[SweepRow]) -> bytes:
    return dump_json({"rows": [r.to_json() for r in rows]})
