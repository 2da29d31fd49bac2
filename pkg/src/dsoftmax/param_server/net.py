"""Socket front-end for :class:`ParameterServer`.

Every message is a frame: ``u32 LE`` payload length, then the payload.
All integers and reals are little-endian.

Request payload::

    op u8 | count u32 | body
    FETCH    (1): count x id u64
    PUSH     (2): count x [id u64 | has_expected u8 | expected u64 | n x f64]
    INFO     (3): count = 0, no body
    SNAPSHOT (4): count = byte length of a UTF-8 path, then the path

Response payload::

    status u8 (0 ok, 1 error) | body
    error:    u32 message length | UTF-8 message
    FETCH:    count u32 | count x [id u64 | version u64 | n x f64]
    PUSH:     count u32 | count x [id u64 | outcome u8 | version u64]
    INFO:     K u64 | n u64 | num_shards u32
    SNAPSHOT: empty

A malformed request gets an error response; the connection stays open.
"""

from __future__ import annotations

import logging
import socket
import socketserver
import struct
import threading
from collections import Counter

import numpy as np

from .store import Outcome, PushResult, WeightRecord

log = logging.getLogger(__name__)

OP_FETCH, OP_PUSH, OP_INFO, OP_SNAPSHOT = 1, 2, 3, 4
STATUS_OK, STATUS_ERROR = 0, 1
MAX_FRAME = 1 << 30

_LEN = struct.Struct("<I")
_REQ_HEAD = struct.Struct("<BI")


class ProtocolError(ValueError):
    pass


class RemoteError(RuntimeError):
    pass


def _recv_exact(sock, size):
    buf = bytearray()
    while len(buf) < size:
        chunk = sock.recv(size - len(buf))
        if not chunk:
            raise ConnectionError("peer closed the connection")
        buf.extend(chunk)
    return bytes(buf)


def read_frame(sock):
    (size,) = _LEN.unpack(_recv_exact(sock, _LEN.size))
    if size > MAX_FRAME:
        raise ProtocolError(f"frame of {size} bytes exceeds limit")
    return _recv_exact(sock, size)


def write_frame(sock, payload):
    sock.sendall(_LEN.pack(len(payload)) + payload)


def _push_dtype(n):
    return np.dtype([("id", "<u8"), ("has", "u1"), ("expected", "<u8"), ("vec", "<f8", (n,))])


def _record_dtype(n):
    return np.dtype([("id", "<u8"), ("version", "<u8"), ("vec", "<f8", (n,))])


_RESULT_DTYPE = np.dtype([("id", "<u8"), ("outcome", "u1"), ("version", "<u8")])


def encode_fetch(ids):
    ids = np.asarray(ids, dtype="<u8")
    return _REQ_HEAD.pack(OP_FETCH, ids.size) + ids.tobytes()


def encode_push(updates, n):
    rec = np.zeros(len(updates), dtype=_push_dtype(n))
    for j, (cid, delta, expected) in enumerate(updates):
        rec[j] = (cid, expected is not None, expected or 0, np.asarray(delta, dtype=np.float64))
    return _REQ_HEAD.pack(OP_PUSH, len(updates)) + rec.tobytes()


def _error(message):
    body = message.encode("utf-8")
    return bytes([STATUS_ERROR]) + _LEN.pack(len(body)) + body


def handle_request(store, payload):
    """Decode one request, run it against ``store``, return the response payload."""
    if len(payload) < _REQ_HEAD.size:
        raise ProtocolError("request shorter than its header")
    op, count = _REQ_HEAD.unpack_from(payload)
    body = payload[_REQ_HEAD.size:]
    n = store.n
    if op == OP_FETCH:
        if len(body) != 8 * count:
            raise ProtocolError(f"FETCH of {count} ids needs {8 * count} body bytes, got {len(body)}")
        ids = np.frombuffer(body, dtype="<u8").astype(np.int64)
        vectors, versions = store.fetch_rows(ids)
        rec = np.zeros(count, dtype=_record_dtype(n))
        rec["id"], rec["version"], rec["vec"] = ids, versions, vectors
        return bytes([STATUS_OK]) + _LEN.pack(count) + rec.tobytes()
    if op == OP_PUSH:
        dt = _push_dtype(n)
        if len(body) != dt.itemsize * count:
            raise ProtocolError(f"PUSH of {count} updates needs {dt.itemsize * count} body bytes")
        rec = np.frombuffer(body, dtype=dt)
        updates = [
            (int(r["id"]), r["vec"], int(r["expected"]) if r["has"] else None) for r in rec
        ]
        results = store.push_update(updates)
        out = np.zeros(len(results), dtype=_RESULT_DTYPE)
        for j, res in enumerate(results):
            out[j] = (res.class_id, res.outcome.value, res.version)
        return bytes([STATUS_OK]) + _LEN.pack(len(results)) + out.tobytes()
    if op == OP_INFO:
        return bytes([STATUS_OK]) + struct.pack("<QQI", store.K, store.n, store.num_shards)
    if op == OP_SNAPSHOT:
        if len(body) != count:
            raise ProtocolError("SNAPSHOT path length mismatch")
        store.snapshot(body.decode("utf-8"))
        return bytes([STATUS_OK])
    raise ProtocolError(f"unknown op code {op}")


class _Handler(socketserver.BaseRequestHandler):
    def handle(self):
        server = self.server
        while True:
            try:
                payload = read_frame(self.request)
            except ConnectionError:
                return
            except ProtocolError as exc:
                write_frame(self.request, _error(str(exc)))
                return
            op = payload[0] if payload else 0
            try:
                response = handle_request(server.store, payload)
                with server.counter_lock:
                    server.op_counts[op] += 1
            except Exception as exc:  # reported to the client; connection survives
                with server.counter_lock:
                    server.op_counts["error"] += 1
                response = _error(f"{type(exc).__name__}: {exc}")
            write_frame(self.request, response)


class PSServer(socketserver.ThreadingTCPServer):
    daemon_threads = True
    allow_reuse_address = True

    def __init__(self, address, store):
        self.store = store
        self.op_counts = Counter()
        self.counter_lock = threading.Lock()
        super().__init__(address, _Handler)

    def log_counters(self):
        names = {OP_FETCH: "fetch", OP_PUSH: "push", OP_INFO: "info", OP_SNAPSHOT: "snapshot"}
        with self.counter_lock:
            summary = {names.get(k, k): v for k, v in self.op_counts.items()}
        log.info("ps-serve op counts: %s", summary)
        return summary


def serve_in_thread(store, host="127.0.0.1", port=0):
    """Start a server on a background thread; returns ``(server, (host, port))``."""
    server = PSServer((host, port), store)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    return server, server.server_address


class PSClient:
    """Blocking client for one connection."""

    def __init__(self, host, port, timeout=10.0):
        self.sock = socket.create_connection((host, port), timeout=timeout)
        self.K, self.n, self.num_shards = self.info()

    def close(self):
        self.sock.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def _call(self, payload):
        write_frame(self.sock, payload)
        response = read_frame(self.sock)
        if response[0] == STATUS_ERROR:
            (size,) = _LEN.unpack_from(response, 1)
            raise RemoteError(response[5:5 + size].decode("utf-8"))
        return response[1:]

    def raw_call(self, payload):
        """Send an arbitrary payload and return the raw response (for testing framing)."""
        write_frame(self.sock, payload)
        return read_frame(self.sock)

    def info(self):
        body = self._call(_REQ_HEAD.pack(OP_INFO, 0))
        return struct.unpack("<QQI", body)

    def fetch_raw(self, ids):
        return self._call(encode_fetch(ids))

    def fetch_rows(self, ids):
        body = self.fetch_raw(ids)
        (count,) = _LEN.unpack_from(body)
        rec = np.frombuffer(body, dtype=_record_dtype(self.n), offset=_LEN.size, count=count)
        return rec["vec"].astype(np.float64), rec["version"].copy()

    def fetch(self, ids):
        vectors, versions = self.fetch_rows(ids)
        return [
            WeightRecord(int(i), vectors[j], int(versions[j]))
            for j, i in enumerate(np.asarray(ids).tolist())
        ]

    def push_update(self, updates):
        body = self._call(encode_push(updates, self.n))
        (count,) = _LEN.unpack_from(body)
        rec = np.frombuffer(body, dtype=_RESULT_DTYPE, offset=_LEN.size, count=count)
        return [PushResult(int(r["id"]), Outcome(int(r["outcome"])), int(r["version"])) for r in rec]

    def push_rows(self, ids, deltas, parallel=False):
        self.push_update([(int(i), d, None) for i, d in zip(np.asarray(ids).tolist(), deltas)])

    def snapshot(self, path):
        raw = str(path).encode("utf-8")
        self._call(_REQ_HEAD.pack(OP_SNAPSHOT, len(raw)) + raw)
