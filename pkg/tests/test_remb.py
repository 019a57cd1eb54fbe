import json
import struct

import numpy as np
import pytest

from conftest import make_store, unit_vectors
from retrinav.embedstore import EmbeddingRecord
from retrinav.remb import (AppendLog, FormatError, load_records, load_store, read_remb, save_store,
                           sidecar_path, write_remb)


def _records(rng, n=40, dim=16):
    vecs = unit_vectors(rng, n, dim).astype(np.float32)
    return [EmbeddingRecord(1000 + i, vecs[i], f"s{i % 3}", (0.125 * i, -0.5 * i),
                            {"chair": 0.1 * i, "bed": -0.2} if i % 2 else None)
            for i in range(n)]


def test_round_trip_bit_exact(tmp_path, rng):
    recs = _records(rng)
    path = tmp_path / "x.remb"
    assert write_remb(path, recs, 16) == 40
    dim, fids, vecs = read_remb(path)
    assert dim == 16
    assert fids.tolist() == [r.frame_id for r in recs]
    expected = np.stack([r.vector for r in recs])
    assert vecs.tobytes() == expected.tobytes()
    _, back = load_records(path)
    for a, b in zip(recs, back):
        assert a.scene_id == b.scene_id and a.pose == b.pose
        assert a.category_scores == b.category_scores


def test_header_layout(tmp_path, rng):
    path = tmp_path / "x.remb"
    write_remb(path, _records(rng, 3, 4), 4)
    raw = path.read_bytes()
    assert raw[:4] == b"REMB"
    assert struct.unpack("<IIQ", raw[4:20]) == (1, 4, 3)
    assert len(raw) == 20 + 3 * (8 + 16)
    assert struct.unpack("<Q", raw[20:28])[0] == 1000


def test_sidecar_naming(tmp_path):
    assert sidecar_path(tmp_path / "db.remb").name == "db.jsonl"
    assert sidecar_path(tmp_path / "db.bin").name == "db.bin.jsonl"


def test_store_round_trip(tmp_path, rng):
    store = make_store(unit_vectors(rng, 25, 8))
    save_store(store, tmp_path / "s.remb")
    back = load_store(tmp_path / "s.remb")
    assert len(back) == 25
    for i in range(25):
        assert back.vector(i).tobytes() == store.vector(i).tobytes()


@pytest.mark.parametrize("corrupt,exc", [
    (lambda b: b"XXXX" + b[4:], "bad magic"),
    (lambda b: b[:10], "truncated REMB header"),
    (lambda b: b[:4] + struct.pack("<I", 9) + b[8:], "unsupported"),
    (lambda b: b[:-5], "truncated REMB body"),
])
def test_corrupt_files_rejected(tmp_path, rng, corrupt, exc):
    path = tmp_path / "x.remb"
    write_remb(path, _records(rng, 3, 4), 4)
    path.write_bytes(corrupt(path.read_bytes()))
    with pytest.raises(FormatError, match=exc):
        read_remb(path)


def test_bad_sidecar_line(tmp_path, rng):
    path = tmp_path / "x.remb"
    write_remb(path, _records(rng, 2, 4), 4)
    with open(sidecar_path(path), "a") as fh:
        fh.write("{not json\n")
    with pytest.raises(FormatError):
        load_records(path)


def test_append_log_round_trip_and_reopen(tmp_path, rng):
    recs = _records(rng, 30, 8)
    path = tmp_path / "log.remb"
    log = AppendLog(path, 8, fsync=False)
    log.append(recs[:10])
    log.append([])
    log.append(recs[10:25])
    log.close()
    log = AppendLog(path, 8, fsync=False)
    assert log.count == 25
    log.append(recs[25:])
    log.close()
    _, fids, vecs = read_remb(path)
    assert fids.tolist() == [r.frame_id for r in recs]
    assert vecs.tobytes() == np.stack([r.vector for r in recs]).tobytes()


def test_append_log_ignores_uncommitted_tail(tmp_path, rng):
    recs = _records(rng, 6, 4)
    path = tmp_path / "log.remb"
    log = AppendLog(path, 4, fsync=False)
    log.append(recs[:4])
    log.close()
    # simulate a crash after rows were written but before the header bump
    with open(path, "ab") as fh:
        fh.write(b"\x01" * 17)
    assert read_remb(path)[1].tolist() == [r.frame_id for r in recs[:4]]
    log = AppendLog(path, 4, fsync=False)
    log.append(recs[4:])
    log.close()
    assert read_remb(path)[1].tolist() == [r.frame_id for r in recs]


def test_append_log_dimension_check(tmp_path, rng):
    path = tmp_path / "log.remb"
    AppendLog(path, 4, fsync=False).close()
    with pytest.raises(FormatError):
        AppendLog(path, 5, fsync=False)


def test_sidecar_lines_are_json(tmp_path, rng):
    path = tmp_path / "x.remb"
    write_remb(path, _records(rng, 5, 4), 4)
    rows = [json.loads(line) for line in sidecar_path(path).read_text().splitlines()]
    assert [r["frame_id"] for r in rows] == list(range(1000, 1005))
    assert rows[1]["category_scores"] == {"chair": 0.1, "bed": -0.2}
