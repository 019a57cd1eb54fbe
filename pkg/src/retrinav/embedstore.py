"""Append-only embedding store with exact cosine top-k search.

Vectors are L2-normalized on ingestion and kept as float32, so cosine
similarity is a plain inner product.  Records are grouped per scene; each
scene partition is a contiguous matrix that only ever grows.

Readers never take a lock.  A partition publishes an immutable ``_View``
(array references plus a row count) after every append, and rows below the
published count are never written again, so a reader always sees a
consistent prefix of the append log.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from . import _scan

NORM_TOL = 1e-6

# Below this many rows a float64 scan is cheaper than the coded prefilter.
_PREFILTER_MIN_ROWS = 4096


class StoreError(ValueError):
    """Raised for rejected ingestion or invalid queries."""


class DimensionMismatch(StoreError):
    pass


class DuplicateFrame(StoreError):
    pass


class EmptyPartition(StoreError):
    pass


@dataclass(frozen=True, eq=False)
class EmbeddingRecord:
    """One database frame.

    ``pose`` is ground truth kept for evaluation (pose graphs, coverage
    checks).  Nothing on the retrieval path reads it.
    """

    frame_id: int
    vector: np.ndarray
    scene_id: str
    pose: tuple[float, float] | None = None
    category_scores: Mapping[str, float] | None = None

    def to_json(self) -> dict:
        row: dict = {"frame_id": int(self.frame_id), "scene": self.scene_id}
        if self.pose is not None:
            row["pose"] = [float(self.pose[0]), float(self.pose[1])]
        if self.category_scores is not None:
            row["category_scores"] = {k: float(v) for k, v in self.category_scores.items()}
        return row


def normalize(vector: Sequence[float] | np.ndarray) -> np.ndarray:
    """Return ``vector`` scaled to unit L2 norm as float32.

    Vectors whose norm is already within ``NORM_TOL`` of 1 are only cast.
    """
    v = np.asarray(vector, dtype=np.float64)
    if v.ndim != 1:
        raise StoreError(f"expected a 1-d vector, got shape {v.shape}")
    if not np.all(np.isfinite(v)):
        raise StoreError("vector has non-finite components")
    norm = np.linalg.norm(v)
    if norm == 0.0:
        raise StoreError("zero vector cannot be normalized")
    if abs(norm - 1.0) <= NORM_TOL:
        # already unit: keep the stored bits stable across save/load cycles
        return v.astype(np.float32)
    return (v / norm).astype(np.float32)


def cosine(a: Sequence[float] | np.ndarray, b: Sequence[float] | np.ndarray) -> float:
    """Cosine similarity of two unit vectors (their inner product)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionMismatch(f"dimension mismatch: {a.shape} vs {b.shape}")
    return float(np.clip(a @ b, -1.0, 1.0))


@dataclass(frozen=True)
class _View:
    vectors: np.ndarray
    codes: np.ndarray
    scales: np.ndarray
    frame_ids: np.ndarray
    indices: np.ndarray
    count: int


class _Partition:
    def __init__(self, dimension: int):
        self.dimension = dimension
        self.view = self._allocate(16, None)

    def _allocate(self, capacity: int, old: _View | None) -> _View:
        d = self.dimension
        view = _View(
            vectors=np.zeros((capacity, d), dtype=np.float32),
            codes=np.zeros((capacity, d), dtype=np.int8),
            scales=np.ones(capacity, dtype=np.float32),
            frame_ids=np.zeros(capacity, dtype=np.uint64),
            indices=np.zeros(capacity, dtype=np.int64),
            count=0 if old is None else old.count,
        )
        if old is not None:
            n = old.count
            view.vectors[:n] = old.vectors[:n]
            view.codes[:n] = old.codes[:n]
            view.scales[:n] = old.scales[:n]
            view.frame_ids[:n] = old.frame_ids[:n]
            view.indices[:n] = old.indices[:n]
        return view

    def append(self, vectors: np.ndarray, frame_ids: np.ndarray, indices: np.ndarray) -> None:
        """Write rows past the published count, then publish them all at once."""
        view = self.view
        n, m = view.count, len(frame_ids)
        if n + m > len(view.frame_ids):
            capacity = max(2 * len(view.frame_ids), n + m)
            view = self._allocate(capacity, view)
        codes, scales = _scan.quantize(vectors)
        view.vectors[n:n + m] = vectors
        view.codes[n:n + m] = codes
        view.scales[n:n + m] = scales
        view.frame_ids[n:n + m] = frame_ids
        view.indices[n:n + m] = indices
        self.view = _View(view.vectors, view.codes, view.scales, view.frame_ids,
                          view.indices, n + m)


class EmbeddingStore:
    """Shared retrieval database.

    Record indices are assigned in append order and never change.
    """

    def __init__(self, dimension: int):
        if int(dimension) <= 0:
            raise StoreError("dimension must be positive")
        self.dimension = int(dimension)
        self._records: list[EmbeddingRecord] = []
        self._partitions: dict[str, _Partition] = {}
        self._by_frame: dict[int, int] = {}
        self._write_lock = threading.Lock()

    # ingestion -------------------------------------------------------

    def _prepare(self, raw: EmbeddingRecord, seen: set[int]) -> EmbeddingRecord:
        vec = np.asarray(raw.vector)
        if vec.ndim != 1 or vec.shape[0] != self.dimension:
            raise DimensionMismatch(
                f"frame {raw.frame_id}: vector length {vec.shape[-1] if vec.ndim else 0} "
                f"!= store dimension {self.dimension}")
        fid = int(raw.frame_id)
        if fid < 0 or fid >= 2**64:
            raise StoreError(f"frame id {fid} is not an unsigned 64-bit integer")
        if fid in self._by_frame or fid in seen:
            raise DuplicateFrame(f"duplicate frame_id {fid}")
        seen.add(fid)
        pose = None if raw.pose is None else (float(raw.pose[0]), float(raw.pose[1]))
        scores = None if raw.category_scores is None else dict(raw.category_scores)
        return EmbeddingRecord(fid, normalize(vec), str(raw.scene_id), pose, scores)

    def add_records(self, batch: Iterable[EmbeddingRecord],
                    before_commit: Callable[[list[EmbeddingRecord]], None] | None = None) -> list[int]:
        """Validate and append a batch atomically; all or nothing.

        ``before_commit`` receives the validated, normalized records while the
        writer lock is held and before any of them become visible; if it
        raises, the batch is dropped.  Returns the stable record indices of
        the batch, in order.
        """
        batch = list(batch)
        with self._write_lock:
            seen: set[int] = set()
            prepared = [self._prepare(r, seen) for r in batch]
            if before_commit is not None:
                before_commit(prepared)
            return self._append_locked(prepared)

    def add_record(self, raw: EmbeddingRecord) -> int:
        return self.add_records([raw])[0]

    def _append_locked(self, prepared: list[EmbeddingRecord]) -> list[int]:
        base = len(self._records)
        indices = list(range(base, base + len(prepared)))
        by_scene: dict[str, list[int]] = {}
        for offset, rec in enumerate(prepared):
            by_scene.setdefault(rec.scene_id, []).append(offset)
        # records list first: a published partition row must resolve
        self._records.extend(prepared)
        for offset, rec in enumerate(prepared):
            self._by_frame[rec.frame_id] = base + offset
        for scene, offsets in by_scene.items():
            part = self._partitions.get(scene)
            if part is None:
                part = _Partition(self.dimension)
            part.append(
                np.stack([prepared[o].vector for o in offsets]),
                np.array([prepared[o].frame_id for o in offsets], dtype=np.uint64),
                np.array([base + o for o in offsets], dtype=np.int64),
            )
            self._partitions[scene] = part
        return indices

    # lookup ----------------------------------------------------------

    def __len__(self) -> int:
        return len(self._records)

    def record(self, index: int) -> EmbeddingRecord:
        return self._records[index]

    def index_of(self, frame_id: int) -> int:
        try:
            return self._by_frame[int(frame_id)]
        except KeyError:
            raise StoreError(f"unknown frame_id {frame_id}") from None

    def __contains__(self, frame_id: int) -> bool:
        return int(frame_id) in self._by_frame

    def scenes(self) -> list[str]:
        return sorted(self._partitions)

    def scene_counts(self) -> dict[str, int]:
        return {s: p.view.count for s, p in sorted(self._partitions.items())}

    def _view(self, scene: str) -> _View:
        part = self._partitions.get(scene)
        if part is None:
            raise EmptyPartition(f"unknown scene {scene!r}")
        view = part.view
        if view.count == 0:
            raise EmptyPartition(f"scene {scene!r} has no records")
        return view

    def scene_indices(self, scene: str) -> np.ndarray:
        view = self._view(scene)
        return view.indices[:view.count].copy()

    def scene_matrix(self, scene: str) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(record indices, frame ids, float32 unit vectors) of a scene snapshot."""
        view = self._view(scene)
        n = view.count
        return view.indices[:n], view.frame_ids[:n], view.vectors[:n]

    def vector(self, index: int) -> np.ndarray:
        return self._records[index].vector

    def vectors(self, indices: Iterable[int]) -> np.ndarray:
        return np.stack([self._records[int(i)].vector for i in indices])

    def evaluation_poses(self, scene: str) -> dict[int, tuple[float, float]]:
        """Ground-truth poses of a scene's records, for evaluation-only code."""
        out = {}
        for idx in self.scene_indices(scene):
            pose = self._records[int(idx)].pose
            if pose is None:
                raise StoreError(f"record {idx} carries no pose")
            out[int(idx)] = pose
        return out

    # search ----------------------------------------------------------

    def topk(self, scene: str, query: Sequence[float] | np.ndarray, k: int) -> list[tuple[int, float]]:
        """Exact top-k by cosine similarity within one scene.

        Sorted by score descending, ties broken by ascending frame id.
        """
        if k < 1:
            raise StoreError("k must be >= 1")
        view = self._view(scene)
        q = np.asarray(query, dtype=np.float64)
        if q.shape != (self.dimension,):
            raise DimensionMismatch(f"query has shape {q.shape}, store dimension is {self.dimension}")
        n = view.count
        if n >= _PREFILTER_MIN_ROWS and k < n:
            rows = _scan.candidate_rows(view.codes[:n], view.scales[:n], q, k)
        else:
            rows = np.arange(n)
        scores = _scan.rescore(view.vectors, rows, q)
        order = np.lexsort((view.frame_ids[rows], -scores))[:k]
        return [(int(view.indices[rows[o]]), float(scores[o])) for o in order]


def topk(store: EmbeddingStore, scene: str, query, k: int) -> list[tuple[int, float]]:
    return store.topk(scene, query, k)
