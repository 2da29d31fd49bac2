"""Sharded, versioned class-weight store with a read-through client cache."""

from __future__ import annotations

import os
import struct
import threading
import time
from collections import OrderedDict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np

SNAPSHOT_MAGIC = b"DSPS1"
_HEADER = struct.Struct("<QQ")


class UnknownClassError(KeyError):
    pass


class Outcome(Enum):
    APPLIED = 0
    STALE_REJECTED = 1


@dataclass(frozen=True)
class WeightRecord:
    class_id: int
    vector: np.ndarray
    version: int


@dataclass(frozen=True)
class PushResult:
    class_id: int
    outcome: Outcome
    version: int  # new version if applied, server's current version if rejected


@dataclass(frozen=True)
class ShardMap:
    num_shards: int

    def shard_of(self, class_ids):
        return np.asarray(class_ids, dtype=np.int64) % self.num_shards

    def local_index(self, class_ids):
        return np.asarray(class_ids, dtype=np.int64) // self.num_shards


class _Shard:
    def __init__(self, rows, n):
        self.data = np.zeros((rows, n))
        self.versions = np.zeros(rows, dtype=np.uint64)
        self.lock = threading.Lock()


class ParameterServer:
    """K x n class weights split across ``num_shards`` shards by ``id % num_shards``.

    Reads and writes lock a single shard, so traffic on different shards
    never contends.  ``write_latency`` (seconds) holds the shard lock for
    that long on every push, to model a remote write.
    """

    def __init__(self, weights, num_shards=1, write_latency=0.0):
        weights = np.asarray(weights, dtype=np.float64)
        if weights.ndim != 2 or not np.all(np.isfinite(weights)):
            raise ValueError("initial weights must be a finite 2-D matrix")
        if num_shards < 1:
            raise ValueError("num_shards must be >= 1")
        self.K, self.n = weights.shape
        self.shard_map = ShardMap(num_shards)
        self.write_latency = write_latency
        self._shards = []
        for s in range(num_shards):
            ids = np.arange(s, self.K, num_shards)
            shard = _Shard(ids.size, self.n)
            shard.data[:] = weights[ids]
            self._shards.append(shard)
        self._pool = None
        self.counters = {"fetch": 0, "push": 0, "rows_fetched": 0, "rows_pushed": 0}

    @property
    def num_shards(self):
        return self.shard_map.num_shards

    def _check_ids(self, ids):
        ids = np.asarray(ids, dtype=np.int64).reshape(-1)
        bad = ids[(ids < 0) | (ids >= self.K)]
        if bad.size:
            raise UnknownClassError(f"unknown class id {int(bad[0])} (K={self.K})")
        return ids

    def _by_shard(self, ids):
        shard_ids = self.shard_map.shard_of(ids)
        local = self.shard_map.local_index(ids)
        for s in range(self.num_shards):
            sel = np.flatnonzero(shard_ids == s) if self.num_shards > 1 else np.arange(ids.size)
            if sel.size:
                yield s, sel, local[sel]

    def fetch_rows(self, ids):
        """Weights and versions for ``ids`` as arrays (rows in request order)."""
        ids = self._check_ids(ids)
        out = np.empty((ids.size, self.n))
        versions = np.empty(ids.size, dtype=np.uint64)
        for s, sel, local in self._by_shard(ids):
            shard = self._shards[s]
            with shard.lock:
                out[sel] = shard.data[local]
                versions[sel] = shard.versions[local]
        self.counters["fetch"] += 1
        self.counters["rows_fetched"] += int(ids.size)
        return out, versions

    def fetch(self, ids):
        ids = self._check_ids(ids)
        vectors, versions = self.fetch_rows(ids)
        return [
            WeightRecord(int(i), vectors[j], int(versions[j])) for j, i in enumerate(ids)
        ]

    def _apply(self, s, local, deltas):
        shard = self._shards[s]
        with shard.lock:
            if self.write_latency:
                time.sleep(self.write_latency)
            shard.data[local] += deltas
            shard.versions[local] += np.uint64(1)

    def push_rows(self, ids, deltas, parallel=False):
        """Blind update ``w[id] += delta`` for unique ``ids``.

        With ``parallel=True`` shards are written from worker threads; the
        result is the same because each row is touched exactly once.
        """
        ids = self._check_ids(ids)
        deltas = np.asarray(deltas, dtype=np.float64)
        if deltas.shape != (ids.size, self.n):
            raise ValueError(f"delta shape {deltas.shape} != ({ids.size}, {self.n})")
        if np.unique(ids).size != ids.size:
            raise ValueError("push_rows requires unique ids")
        jobs = [(s, local, deltas[sel]) for s, sel, local in self._by_shard(ids)]
        if parallel and len(jobs) > 1:
            if self._pool is None:
                self._pool = ThreadPoolExecutor(max_workers=self.num_shards)
            for f in [self._pool.submit(self._apply, *job) for job in jobs]:
                f.result()
        else:
            for job in jobs:
                self._apply(*job)
        self.counters["push"] += 1
        self.counters["rows_pushed"] += int(ids.size)

    def push_update(self, updates):
        """Apply ``(class_id, delta, expected_version)`` updates one by one.

        ``expected_version=None`` is a blind push.  A versioned push whose
        expectation does not match the server is rejected and reports the
        current version.
        """
        results = []
        for class_id, delta, expected in updates:
            cid = int(self._check_ids([class_id])[0])
            delta = np.asarray(delta, dtype=np.float64).reshape(-1)
            if delta.size != self.n:
                raise ValueError(f"delta for class {cid} has dimension {delta.size}, expected {self.n}")
            if not np.all(np.isfinite(delta)):
                raise ValueError(f"delta for class {cid} is not finite")
            s = cid % self.num_shards
            local = cid // self.num_shards
            shard = self._shards[s]
            with shard.lock:
                current = int(shard.versions[local])
                if expected is not None and int(expected) != current:
                    results.append(PushResult(cid, Outcome.STALE_REJECTED, current))
                    continue
                if self.write_latency:
                    time.sleep(self.write_latency)
                shard.data[local] += delta
                shard.versions[local] += np.uint64(1)
                results.append(PushResult(cid, Outcome.APPLIED, current + 1))
        self.counters["push"] += 1
        self.counters["rows_pushed"] += len(results)
        return results

    def to_matrix(self):
        return self.fetch_rows(np.arange(self.K))[0]

    def snapshot(self, path):
        """Write every record as ``[id u64, version u64, n x f64]`` after a header."""
        vectors, versions = self.fetch_rows(np.arange(self.K))
        rec = np.zeros(self.K, dtype=_record_dtype(self.n))
        rec["id"] = np.arange(self.K)
        rec["version"] = versions
        rec["vec"] = vectors
        path = Path(path)
        tmp = path.with_name(path.name + ".tmp")
        with open(tmp, "wb") as fh:
            fh.write(SNAPSHOT_MAGIC + _HEADER.pack(self.K, self.n))
            fh.write(rec.tobytes())
        os.replace(tmp, path)

    def load(self, path):
        """Replace the store's contents from a snapshot; unchanged on error."""
        K, n, ids, versions, vectors = read_snapshot(path)
        if (K, n) != (self.K, self.n):
            raise ValueError(f"snapshot holds {K}x{n} weights, store is {self.K}x{self.n}")
        order = np.argsort(ids)
        vectors, versions = vectors[order], versions[order]
        for s, shard in enumerate(self._shards):
            rows = np.arange(s, self.K, self.num_shards)
            with shard.lock:
                shard.data[:] = vectors[rows]
                shard.versions[:] = versions[rows]

    @classmethod
    def from_snapshot(cls, path, num_shards=1):
        K, n, ids, versions, vectors = read_snapshot(path)
        order = np.argsort(ids)
        store = cls(vectors[order], num_shards=num_shards)
        for s, shard in enumerate(store._shards):
            shard.versions[:] = versions[order][np.arange(s, K, num_shards)]
        return store

    def close(self):
        if self._pool is not None:
            self._pool.shutdown()
            self._pool = None


def _record_dtype(n):
    return np.dtype([("id", "<u8"), ("version", "<u8"), ("vec", "<f8", (n,))])


def snapshot_size(K, n):
    return len(SNAPSHOT_MAGIC) + _HEADER.size + K * (16 + 8 * n)


def read_snapshot(path):
    raw = Path(path).read_bytes()
    head = len(SNAPSHOT_MAGIC) + _HEADER.size
    if len(raw) < head or raw[: len(SNAPSHOT_MAGIC)] != SNAPSHOT_MAGIC:
        raise ValueError(f"{path}: not a DSPS1 snapshot")
    K, n = _HEADER.unpack_from(raw, len(SNAPSHOT_MAGIC))
    if len(raw) != snapshot_size(K, n):
        raise ValueError(f"{path}: expected {snapshot_size(K, n)} bytes, found {len(raw)}")
    rec = np.frombuffer(raw, dtype=_record_dtype(n), offset=head)
    ids = rec["id"].astype(np.int64)
    if not np.array_equal(np.sort(ids), np.arange(K)):
        raise ValueError(f"{path}: class ids are not a permutation of 0..{K - 1}")
    return K, n, ids, rec["version"].copy(), rec["vec"].astype(np.float64)


class InMemoryWeights:
    """Plain matrix with the store's fetch/push surface; the oracle path."""

    def __init__(self, weights):
        self.matrix = np.array(weights, dtype=np.float64)
        self.K, self.n = self.matrix.shape

    def fetch_rows(self, ids):
        ids = np.asarray(ids, dtype=np.int64)
        return self.matrix[ids], np.zeros(ids.size, dtype=np.uint64)

    def push_rows(self, ids, deltas, parallel=False):
        self.matrix[np.asarray(ids, dtype=np.int64)] += deltas

    def to_matrix(self):
        return self.matrix.copy()


class ClientCache:
    """Read-through LRU cache of fetched weights.

    Only reads are cached; pushes go straight to the server and invalidate
    the cached copy, so eviction can never drop pending updates.
    """

    def __init__(self, server, capacity):
        if capacity < 1:
            raise ValueError("cache capacity must be >= 1")
        self.server = server
        self.capacity = capacity
        self._entries = OrderedDict()
        self.hits = 0
        self.misses = 0

    def __len__(self):
        return len(self._entries)

    def get(self, ids):
        ids = np.asarray(ids, dtype=np.int64).reshape(-1)
        missing = list(dict.fromkeys(int(i) for i in ids if int(i) not in self._entries))
        self.misses += len(missing)
        self.hits += int(sum(int(i) in self._entries for i in ids))
        fetched = {}
        if missing:
            vecs, vers = self.server.fetch_rows(np.asarray(missing))
            fetched = {cid: (vecs[j], int(vers[j])) for j, cid in enumerate(missing)}
        out = np.empty((ids.size, self.server.n))
        versions = np.empty(ids.size, dtype=np.uint64)
        for j, cid in enumerate(ids.tolist()):
            vec, ver = self._entries[cid] if cid in self._entries else fetched[cid]
            out[j], versions[j] = vec, ver
            self._entries[cid] = (vec, ver)
            self._entries.move_to_end(cid)
        while len(self._entries) > self.capacity:
            self._entries.popitem(last=False)
        return out, versions

    def cached_version(self, class_id):
        entry = self._entries.get(int(class_id))
        return None if entry is None else entry[1]

    def push_rows(self, ids, deltas):
        self.server.push_rows(ids, deltas)
        for cid in np.asarray(ids).tolist():
            self._entries.pop(int(cid), None)
