"""REMB binary embedding files and their JSON-lines metadata sidecar.

Layout (little-endian)::

    b"REMB" | version u32 = 1 | dimension u32 | count u64
    count x { frame_id u64 | dimension x float32 }

The sidecar holds one JSON object per line: ``frame_id``, ``scene`` and the
optional ``pose`` / ``category_scores``.
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path
from typing import Iterable

import numpy as np

from .embedstore import EmbeddingRecord, EmbeddingStore

MAGIC = b"REMB"
VERSION = 1
_HEADER = struct.Struct("<4sIIQ")
_COUNT_OFFSET = 12


class FormatError(ValueError):
    pass


def sidecar_path(path: str | os.PathLike) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".jsonl") if path.suffix != ".remb" else path.with_suffix(".jsonl")


def _record_dtype(dimension: int) -> np.dtype:
    return np.dtype([("frame_id", "<u8"), ("vector", "<f4", (dimension,))])


def write_remb(path: str | os.PathLike, records: Iterable[EmbeddingRecord], dimension: int,
               sidecar: bool = True) -> int:
    """Write records to ``path`` (and its sidecar). Returns the record count."""
    records = list(records)
    rows = np.zeros(len(records), dtype=_record_dtype(dimension))
    for i, rec in enumerate(records):
        if len(rec.vector) != dimension:
            raise FormatError(f"frame {rec.frame_id}: dimension {len(rec.vector)} != {dimension}")
        rows[i] = (rec.frame_id, rec.vector)
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, dimension, len(records)))
        fh.write(rows.tobytes())
    if sidecar:
        with open(sidecar_path(path), "w", encoding="utf-8") as fh:
            for rec in records:
                fh.write(json.dumps(rec.to_json()) + "\n")
    return len(records)


def read_header(fh) -> tuple[int, int]:
    raw = fh.read(_HEADER.size)
    if len(raw) < _HEADER.size:
        raise FormatError("truncated REMB header")
    magic, version, dimension, count = _HEADER.unpack(raw)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"unsupported REMB version {version}")
    if dimension == 0:
        raise FormatError("zero dimension")
    return dimension, count


def read_remb(path: str | os.PathLike) -> tuple[int, np.ndarray, np.ndarray]:
    """Return (dimension, frame_ids u64[count], vectors f32[count, dimension]).

    Bytes past ``count`` records (an interrupted append) are ignored.
    """
    with open(path, "rb") as fh:
        dimension, count = read_header(fh)
        dtype = _record_dtype(dimension)
        payload = fh.read(count * dtype.itemsize)
    if len(payload) < count * dtype.itemsize:
        raise FormatError(f"truncated REMB body: expected {count} records")
    rows = np.frombuffer(payload, dtype=dtype, count=count)
    return dimension, rows["frame_id"].copy(), rows["vector"].copy()


def read_sidecar(path: str | os.PathLike) -> dict[int, dict]:
    meta: dict[int, dict] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                row = json.loads(line)
                meta[int(row["frame_id"])] = row
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise FormatError(f"{path}:{lineno}: bad sidecar line ({exc})") from None
    return meta


def load_records(path: str | os.PathLike) -> tuple[int, list[EmbeddingRecord]]:
    """Read a REMB file plus sidecar into records (vectors as stored)."""
    dimension, frame_ids, vectors = read_remb(path)
    side = sidecar_path(path)
    meta = read_sidecar(side) if side.exists() else {}
    records = []
    for fid, vec in zip(frame_ids.tolist(), vectors):
        row = meta.get(fid, {})
        pose = row.get("pose")
        records.append(EmbeddingRecord(
            frame_id=fid,
            vector=vec,
            scene_id=str(row.get("scene", "")),
            pose=None if pose is None else (float(pose[0]), float(pose[1])),
            category_scores=row.get("category_scores"),
        ))
    return dimension, records


def load_store(path: str | os.PathLike) -> EmbeddingStore:
    dimension, records = load_records(path)
    store = EmbeddingStore(dimension)
    store.add_records(records)
    return store


def save_store(store: EmbeddingStore, path: str | os.PathLike) -> int:
    return write_remb(path, [store.record(i) for i in range(len(store))], store.dimension)


class AppendLog:
    """Durable append log: REMB file plus sidecar, header count updated last.

    A batch is durable once :meth:`append` returns.  A crash between writing
    rows and bumping the header leaves trailing bytes that readers ignore.
    """

    def __init__(self, path: str | os.PathLike, dimension: int, fsync: bool = True):
        self.path = Path(path)
        self.sidecar = sidecar_path(self.path)
        self.fsync = fsync
        if self.path.exists():
            with open(self.path, "rb") as fh:
                dim, count = read_header(fh)
            if dim != dimension:
                raise FormatError(f"log dimension {dim} != requested {dimension}")
            self.count = count
            self._truncate_tail()
        else:
            with open(self.path, "wb") as fh:
                fh.write(_HEADER.pack(MAGIC, VERSION, dimension, 0))
            self.sidecar.touch()
            self.count = 0
        self.dimension = dimension
        self._dtype = _record_dtype(dimension)
        self._fh = open(self.path, "r+b")
        self._side = open(self.sidecar, "a", encoding="utf-8")

    def _truncate_tail(self) -> None:
        dtype_size = 8 + 4 * self._dim_from_file()
        end = _HEADER.size + self.count * dtype_size
        with open(self.path, "r+b") as fh:
            fh.truncate(end)

    def _dim_from_file(self) -> int:
        with open(self.path, "rb") as fh:
            return read_header(fh)[0]

    def append(self, records: list[EmbeddingRecord]) -> None:
        if not records:
            return
        rows = np.zeros(len(records), dtype=self._dtype)
        for i, rec in enumerate(records):
            rows[i] = (rec.frame_id, rec.vector)
        for rec in records:
            self._side.write(json.dumps(rec.to_json()) + "\n")
        self._side.flush()
        # write at the committed end; a failed earlier append may have left a tail
        self._fh.seek(_HEADER.size + self.count * self._dtype.itemsize)
        self._fh.write(rows.tobytes())
        self._fh.truncate()
        self._fh.flush()
        if self.fsync:
            os.fsync(self._side.fileno())
            os.fsync(self._fh.fileno())
        self.count += len(records)
        self._fh.seek(_COUNT_OFFSET)
        self._fh.write(struct.pack("<Q", self.count))
        self._fh.flush()
        if self.fsync:
            os.fsync(self._fh.fileno())

    def close(self) -> None:
        self._fh.close()
        self._side.close()
