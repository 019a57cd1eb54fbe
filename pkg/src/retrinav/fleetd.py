"""Shared ingestion/query service for a fleet of collectors.

Wire format: one UTF-8 JSON object per line in each direction.  Requests
carry ``op`` (``ingest``, ``query`` or ``stats``), an optional
``request_id`` that the response echoes, and the op's fields either at the
top level or under ``payload``::

    {"op": "ingest", "request_id": "a1", "records": [{"frame_id": 7, "scene": "s",
                                                      "vector": [...], "pose": [x, y]}]}
    {"op": "query", "request_id": "a2", "scene": "s", "vector": [...], "k": 5}
    {"op": "stats", "request_id": "a3"}

An ingest batch is validated, appended to the log and fsynced, then made
visible to queries, and only then acknowledged.  Any error rejects the whole
batch.  Malformed lines get an error response; the connection stays open.
"""

from __future__ import annotations

import itertools
import json
import logging
import socket
import socketserver
import threading
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np

from .embedstore import EmbeddingRecord, EmbeddingStore, StoreError
from .remb import AppendLog, FormatError, load_records, read_header

log = logging.getLogger(__name__)

MAX_LINE = 64 * 1024 * 1024
OPS = ("ingest", "query", "stats")


class RequestError(ValueError):
    pass


def parse_address(text: str) -> tuple[str, int]:
    """``host:port`` (or bare ``port``) to a socket address."""
    host, sep, port = text.rpartition(":")
    if not sep:
        host, port = "127.0.0.1", text
    try:
        number = int(port)
    except ValueError:
        raise ValueError(f"bad listen address {text!r}") from None
    if not 0 <= number < 65536:
        raise ValueError(f"port out of range in {text!r}")
    return host.strip("[]") or "127.0.0.1", number


def _record_from_wire(row: Any) -> EmbeddingRecord:
    if not isinstance(row, Mapping):
        raise RequestError("each record must be a JSON object")
    try:
        fid = row["frame_id"]
        vector = row["vector"]
    except KeyError as exc:
        raise RequestError(f"record is missing {exc.args[0]!r}") from None
    if isinstance(fid, bool) or not isinstance(fid, int):
        raise RequestError("frame_id must be an integer")
    if not isinstance(vector, list) or not all(
            isinstance(x, (int, float)) and not isinstance(x, bool) for x in vector):
        raise RequestError(f"frame {fid}: vector must be a list of numbers")
    vec = np.asarray(vector, dtype=np.float64)
    if not np.all(np.isfinite(vec)):
        raise RequestError(f"frame {fid}: vector has non-finite entries")
    pose = row.get("pose")
    if pose is not None:
        if not (isinstance(pose, list) and len(pose) == 2):
            raise RequestError(f"frame {fid}: pose must be [x, y]")
        pose = (float(pose[0]), float(pose[1]))
    scores = row.get("category_scores")
    if scores is not None and not isinstance(scores, Mapping):
        raise RequestError(f"frame {fid}: category_scores must be an object")
    return EmbeddingRecord(fid, vec, str(row.get("scene", "")), pose, scores)


def record_to_wire(rec: EmbeddingRecord) -> dict:
    row = rec.to_json()
    row["vector"] = [float(x) for x in np.asarray(rec.vector)]
    return row


class FleetService:
    """Protocol logic, independent of the transport.

    With ``log_path`` every acked batch is durable; an existing log is
    replayed on start-up.
    """

    def __init__(self, dimension: int | None = None, log_path: str | Path | None = None,
                 fsync: bool = True):
        self.log: AppendLog | None = None
        records: list[EmbeddingRecord] = []
        if log_path is not None and Path(log_path).exists():
            with open(log_path, "rb") as fh:
                file_dim = read_header(fh)[0]
            if dimension is not None and dimension != file_dim:
                raise FormatError(f"log {log_path} has dimension {file_dim}, expected {dimension}")
            dimension = file_dim
            # open the log first: it drops any uncommitted tail
            self.log = AppendLog(log_path, dimension, fsync=fsync)
            records = load_records(log_path)[1]
        if dimension is None:
            raise ValueError("dimension is required when there is no existing log")
        if log_path is not None and self.log is None:
            self.log = AppendLog(log_path, dimension, fsync=fsync)
        self.store = EmbeddingStore(dimension)
        self.store.add_records(records)

    def close(self) -> None:
        if self.log is not None:
            self.log.close()

    # ops ---------------------------------------------------------------

    def handle_line(self, line: bytes | str) -> dict:
        try:
            request = json.loads(line)
        except (json.JSONDecodeError, UnicodeDecodeError) as exc:
            return {"ok": False, "request_id": None, "error": f"malformed JSON: {exc}"}
        if not isinstance(request, dict):
            return {"ok": False, "request_id": None, "error": "request must be a JSON object"}
        return self.handle(request)

    def handle(self, request: Mapping) -> dict:
        rid = request.get("request_id")
        fields = dict(request)
        payload = fields.pop("payload", None)
        if isinstance(payload, Mapping):
            fields.update(payload)
        op = fields.get("op")
        try:
            if op == "ingest":
                body = self.ingest(fields.get("records"))
            elif op == "query":
                body = self.query(fields.get("scene"), fields.get("vector"), fields.get("k"))
            elif op == "stats":
                body = self.stats()
            else:
                raise RequestError(f"unknown op {op!r}; expected one of {OPS}")
        except (RequestError, StoreError) as exc:
            return {"ok": False, "request_id": rid, "error": str(exc)}
        except OSError as exc:
            log.exception("log write failed")
            return {"ok": False, "request_id": rid, "error": f"storage failure: {exc}"}
        return {"ok": True, "request_id": rid, **body}

    def ingest(self, rows: Any) -> dict:
        if not isinstance(rows, list):
            raise RequestError("ingest needs a 'records' list")
        batch = [_record_from_wire(r) for r in rows]
        self.store.add_records(batch, before_commit=self._persist)
        return {"accepted_count": len(batch)}

    def _persist(self, prepared: list[EmbeddingRecord]) -> None:
        # runs under the store's writer lock, so log order is commit order
        if self.log is not None:
            self.log.append(prepared)

    def query(self, scene: Any, vector: Any, k: Any) -> dict:
        if not isinstance(scene, str):
            raise RequestError("query needs a 'scene' string")
        if isinstance(k, bool) or not isinstance(k, int) or k < 1:
            raise RequestError("k must be an integer >= 1")
        if not isinstance(vector, list):
            raise RequestError("query needs a 'vector' list")
        try:
            q = np.asarray(vector, dtype=np.float64)
        except (TypeError, ValueError):
            raise RequestError("vector must be a list of numbers") from None
        if not np.all(np.isfinite(q)):
            raise RequestError("query vector has non-finite entries")
        hits = self.store.topk(scene, q, k)
        return {"results": [[self.store.record(i).frame_id, s] for i, s in hits]}

    def stats(self) -> dict:
        counts = self.store.scene_counts()
        return {"scenes": counts, "total": int(sum(counts.values()))}


class _Handler(socketserver.StreamRequestHandler):
    def handle(self) -> None:
        service: FleetService = self.server.service
        while True:
            try:
                line = self.rfile.readline(MAX_LINE + 1)
            except OSError:
                return
            if not line:
                return
            if len(line) > MAX_LINE:
                reply = {"ok": False, "request_id": None, "error": "request line too long"}
                self._send(reply)
                return
            if not line.strip():
                continue
            if not self._send(service.handle_line(line)):
                return

    def _send(self, reply: dict) -> bool:
        try:
            self.wfile.write((json.dumps(reply) + "\n").encode("utf-8"))
            self.wfile.flush()
            return True
        except OSError:
            return False


class FleetServer(socketserver.ThreadingTCPServer):
    daemon_threads = True
    allow_reuse_address = True

    def __init__(self, address: tuple[str, int], service: FleetService):
        self.service = service
        super().__init__(address, _Handler)

    @property
    def port(self) -> int:
        return self.server_address[1]

    def serve_in_thread(self) -> threading.Thread:
        thread = threading.Thread(target=self.serve_forever, name="fleetd", daemon=True)
        thread.start()
        return thread

    def server_close(self) -> None:
        super().server_close()
        self.service.close()


def serve(listen: str, dimension: int | None, log_path: str | Path | None) -> None:
    service = FleetService(dimension, log_path)
    with FleetServer(parse_address(listen), service) as server:
        host, port = server.server_address[:2]
        log.info("fleetd listening on %s:%d (%d records)", host, port, len(service.store))
        try:
            server.serve_forever()
        except KeyboardInterrupt:
            pass


class FleetClient:
    """Blocking line-protocol client; one per thread."""

    _ids = itertools.count()

    def __init__(self, host: str, port: int, timeout: float | None = 30.0):
        self.sock = socket.create_connection((host, port), timeout=timeout)
        self._r = self.sock.makefile("rb")
        self._w = self.sock.makefile("wb")

    def __enter__(self) -> "FleetClient":
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    def close(self) -> None:
        for f in (self._r, self._w):
            try:
                f.close()
            except OSError:
                pass
        self.sock.close()

    def send_raw(self, line: bytes) -> dict:
        self._w.write(line if line.endswith(b"\n") else line + b"\n")
        self._w.flush()
        reply = self._r.readline()
        if not reply:
            raise ConnectionError("server closed the connection")
        return json.loads(reply)

    def request(self, op: str, **fields) -> dict:
        fields.setdefault("request_id", f"c{next(self._ids)}")
        return self.send_raw(json.dumps({"op": op, **fields}).encode("utf-8"))

    def ingest(self, records: Sequence[EmbeddingRecord | Mapping]) -> dict:
        rows = [record_to_wire(r) if isinstance(r, EmbeddingRecord) else dict(r) for r in records]
        return self.request("ingest", records=rows)

    def query(self, scene: str, vector, k: int) -> dict:
        return self.request("query", scene=scene, vector=[float(x) for x in vector], k=int(k))

    def stats(self) -> dict:
        return self.request("stats")
