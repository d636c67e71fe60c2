"""Storage manager for frozen-prefix activations.

Once a prefix of layers is frozen its output no longer changes, so the
activation leaving the prefix can be stored per datapoint and reused in
later epochs instead of recomputing the prefix.  The manager

* keys records by *original* dataset index, translating the shuffled
  position of each epoch through that epoch's permutation;
* keeps records in memory first and spills to a directory of fixed-format
  binary files when memory is full, dropping new records when both tiers
  are full (it never evicts a useful record to make room);
* evicts a record when it is read at a depth shallower than the current
  frozen boundary; the caller recomputes the missing layers and writes the
  deeper record back.  The evicted bytes stay reserved for that rewrite, so
  re-caching never competes with first-time writes.

On-disk record layout (little-endian)::

    magic  b"AFCR"   4 bytes
    version u16      (1)
    original_index u64
    depth  u16
    dim    u32
    payload dim x float64
"""
from __future__ import annotations

import logging
import os
import queue
import struct
import threading
from dataclasses import dataclass
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

MAGIC = b"AFCR"
VERSION = 1
HEADER = struct.Struct("<4sHQHI")
COPY_OVERHEAD = 0.07
QUEUE_DEPTH = 4


@dataclass
class CacheRecord:
    original_index: int
    depth: int
    payload: np.ndarray

    def __post_init__(self):
        self.payload = np.ascontiguousarray(self.payload, dtype="<f8").reshape(-1)

    @property
    def dim(self) -> int:
        return self.payload.size

    @property
    def nbytes(self) -> int:
        return record_nbytes(self.dim)


def record_nbytes(dim: int) -> int:
    return HEADER.size + 8 * dim


def encode_record(rec: CacheRecord) -> bytes:
    return HEADER.pack(MAGIC, VERSION, rec.original_index, rec.depth, rec.dim) + rec.payload.tobytes()


def decode_record(buf: bytes, offset: int = 0) -> tuple[CacheRecord, int]:
    """Parse one record at ``offset``; returns it and the offset just past it."""
    if len(buf) - offset < HEADER.size:
        raise ValueError("truncated cache record header")
    magic, version, index, depth, dim = HEADER.unpack_from(buf, offset)
    if magic != MAGIC:
        raise ValueError(f"bad cache record magic {magic!r}")
    if version != VERSION:
        raise ValueError(f"unsupported cache record version {version}")
    start = offset + HEADER.size
    end = start + 8 * dim
    if len(buf) < end:
        raise ValueError("truncated cache record payload")
    payload = np.frombuffer(buf[start:end], dtype="<f8").astype(np.float64)
    return CacheRecord(index, depth, payload), end


def write_records(path: Path, records) -> None:
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        for rec in records:
            fh.write(encode_record(rec))
    os.replace(tmp, path)


def read_records(path: Path) -> list[CacheRecord]:
    buf = Path(path).read_bytes()
    out, offset = [], 0
    while offset < len(buf):
        rec, offset = decode_record(buf, offset)
        out.append(rec)
    return out


def should_cache(frozen_layers: int, per_layer_forward_time: float, batch_read_time: float) -> bool:
    """Caching pays off once skipping the frozen forward beats reading a batch back."""
    return frozen_layers * per_layer_forward_time > batch_read_time


def step_time(compute_s: float, read_bytes: float = 0.0, write_bytes: float = 0.0,
              read_bw: float = float("inf"), write_bw: float = float("inf"),
              copy_overhead: float = COPY_OVERHEAD) -> float:
    """Simulated time of one pipelined step: reader, trainer and writer overlap,
    and the trainer pays ``copy_overhead`` while it hands activations to the writer."""
    trainer = compute_s * (1.0 + copy_overhead) if write_bytes > 0 else compute_s
    return max(read_bytes / read_bw, trainer, write_bytes / write_bw)


class ShuffleMaps:
    """Per-epoch permutations mapping shuffled position -> original index."""

    def __init__(self, dataset_size: int, keep: int = 2):
        self.dataset_size = dataset_size
        self.keep = keep
        self._maps: dict[int, np.ndarray] = {}

    def register(self, epoch: int, permutation) -> None:
        perm = np.asarray(permutation)
        if perm.shape != (self.dataset_size,) or not np.issubdtype(perm.dtype, np.integer):
            raise ValueError(f"permutation must be {self.dataset_size} integers")
        seen = np.zeros(self.dataset_size, dtype=bool)
        if perm.min() < 0 or perm.max() >= self.dataset_size:
            raise ValueError("permutation entries out of range")
        seen[perm] = True
        if not seen.all():
            raise ValueError("permutation is not a bijection")
        self._maps[epoch] = perm.astype(np.int64).copy()
        for old in [e for e in self._maps if e <= epoch - self.keep]:
            del self._maps[old]

    def resolve(self, epoch: int, position: int) -> int:
        try:
            return int(self._maps[epoch][position])
        except KeyError:
            raise KeyError(f"no shuffle registered for epoch {epoch}") from None


@dataclass
class _Entry:
    tier: str
    depth: int
    nbytes: int


class StorageManager:
    """Two-tier activation cache keyed by original dataset index.

    Thread safety: every public method takes the same lock, so one reader
    thread and one writer thread may run alongside the trainer.
    """

    def __init__(self, dataset_size: int, memory_capacity: int, disk_capacity: int = 0,
                 root: str | Path | None = None):
        if disk_capacity > 0 and root is None:
            raise ValueError("a disk tier needs a root directory")
        self.dataset_size = dataset_size
        self.capacity = {"memory": int(memory_capacity), "disk": int(disk_capacity)}
        self.used = {"memory": 0, "disk": 0}
        self.reserved = {"memory": 0, "disk": 0}
        self.root = Path(root) if root is not None else None
        if self.root is not None:
            self.root.mkdir(parents=True, exist_ok=True)
        self.shuffles = ShuffleMaps(dataset_size)
        self.boundary = 0
        self._index: dict[int, _Entry] = {}
        self._memory: dict[int, CacheRecord] = {}
        self._reservations: dict[int, tuple[str, int]] = {}
        self._lock = threading.RLock()
        self.stats = {"hits": 0, "misses": 0, "evictions": 0, "writes": 0, "dropped": 0}

    # -- bookkeeping -----------------------------------------------------
    def register_shuffle(self, epoch: int, permutation) -> None:
        with self._lock:
            self.shuffles.register(epoch, permutation)

    def set_boundary(self, boundary: int) -> None:
        with self._lock:
            if boundary < self.boundary:
                raise ValueError("the frozen boundary never moves backwards")
            self.boundary = boundary

    def resolve(self, epoch: int, position: int) -> int:
        with self._lock:
            return self.shuffles.resolve(epoch, position)

    def occupancy(self) -> dict[str, int]:
        """Bytes held per tier, counting reservations for pending rewrites."""
        with self._lock:
            return {t: self.used[t] + self.reserved[t] for t in self.used}

    def __len__(self) -> int:
        with self._lock:
            return len(self._index)

    def __contains__(self, original_index: int) -> bool:
        with self._lock:
            return original_index in self._index

    def _path(self, original_index: int) -> Path:
        return self.root / f"rec_{original_index}.bin"

    def _free(self, tier: str) -> int:
        return self.capacity[tier] - self.used[tier] - self.reserved[tier]

    def _remove(self, original_index: int) -> _Entry:
        entry = self._index.pop(original_index)
        self.used[entry.tier] -= entry.nbytes
        if entry.tier == "memory":
            del self._memory[original_index]
        else:
            self._path(original_index).unlink(missing_ok=True)
        return entry

    def _load(self, original_index: int, entry: _Entry) -> CacheRecord:
        if entry.tier == "memory":
            rec = self._memory[original_index]
            return CacheRecord(rec.original_index, rec.depth, rec.payload.copy())
        rec, _ = decode_record(self._path(original_index).read_bytes())
        if rec.original_index != original_index:
            raise ValueError(f"record file for {original_index} holds index {rec.original_index}")
        return rec

    # -- public operations ----------------------------------------------
    def lookup(self, original_index: int) -> CacheRecord | None:
        """Fetch by original index without shuffle translation or eviction."""
        with self._lock:
            entry = self._index.get(original_index)
            return None if entry is None else self._load(original_index, entry)

    def read(self, epoch: int, position: int) -> CacheRecord | None:
        """Record for the datapoint at shuffled ``position`` of ``epoch``, if cached.

        A record shallower than the current boundary is returned once and
        evicted; its bytes are reserved for the deeper rewrite.
        """
        with self._lock:
            index = self.shuffles.resolve(epoch, position)
            entry = self._index.get(index)
            if entry is None:
                self.stats["misses"] += 1
                return None
            rec = self._load(index, entry)
            self.stats["hits"] += 1
            if self.boundary > entry.depth:
                self._remove(index)
                self.reserved[entry.tier] += entry.nbytes
                self._reservations[index] = (entry.tier, entry.nbytes)
                self.stats["evictions"] += 1
            return rec

    def write(self, epoch: int, position: int, record: CacheRecord,
              expected_dim: int | None = None) -> bool:
        """Store ``record`` under the original index of ``position``; False if dropped."""
        with self._lock:
            index = self.shuffles.resolve(epoch, position)
            if index != record.original_index:
                raise ValueError(
                    f"record for index {record.original_index} written at position {position} "
                    f"which maps to {index}")
            if expected_dim is not None and record.dim != expected_dim:
                raise ValueError(f"payload has {record.dim} values, layer output has {expected_dim}")
            if record.depth > self.boundary:
                raise ValueError(f"record depth {record.depth} exceeds boundary {self.boundary}")
            return self._store(record)

    def _store(self, record: CacheRecord) -> bool:
        index = record.original_index
        need = record.nbytes
        credit = {"memory": 0, "disk": 0}
        if index in self._index:
            old = self._index[index]
            credit[old.tier] += old.nbytes
        if index in self._reservations:
            tier, nbytes = self._reservations[index]
            credit[tier] += nbytes
        for tier in ("memory", "disk"):
            if tier == "disk" and self.root is None:
                continue
            if self._free(tier) + credit[tier] >= need:
                self._release(index)
                self._put(tier, record)
                self.stats["writes"] += 1
                return True
        # dropped: the stale copy goes too so outcomes do not depend on
        # whether the reader evicted it first
        self._release(index)
        self.stats["dropped"] += 1
        return False

    def _release(self, index: int) -> None:
        if index in self._index:
            self._remove(index)
        if index in self._reservations:
            tier, nbytes = self._reservations.pop(index)
            self.reserved[tier] -= nbytes

    def _put(self, tier: str, record: CacheRecord) -> None:
        index = record.original_index
        if tier == "memory":
            self._memory[index] = CacheRecord(index, record.depth, record.payload.copy())
        else:
            path = self._path(index)
            tmp = path.with_suffix(".tmp")
            tmp.write_bytes(encode_record(record))
            os.replace(tmp, path)
        self._index[index] = _Entry(tier, record.depth, record.nbytes)
        self.used[tier] += record.nbytes
        assert self.used[tier] + self.reserved[tier] <= self.capacity[tier]

    def end_epoch(self) -> None:
        """Release reservations whose rewrite never came."""
        with self._lock:
            for tier, nbytes in self._reservations.values():
                self.reserved[tier] -= nbytes
            self._reservations.clear()

    def clear(self) -> None:
        with self._lock:
            for index in list(self._index):
                self._remove(index)
            self.end_epoch()


_DONE = object()


class CachePipeline:
    """Reader and writer threads around the training loop, joined by bounded queues.

    The reader resolves and loads the records of upcoming batches; the
    writer persists new records.  Call :meth:`epoch` to iterate the reader's
    output in order, :meth:`submit` for writes and :meth:`drain` before the
    next epoch's reads start.
    """

    def __init__(self, store: StorageManager, depth: int = QUEUE_DEPTH):
        self.store = store
        self.depth = depth
        self._writes: queue.Queue = queue.Queue(maxsize=depth)
        self._writer = threading.Thread(target=self._write_loop, daemon=True)
        self._errors: list[BaseException] = []
        self._writer.start()

    def _write_loop(self):
        while True:
            item = self._writes.get()
            try:
                if item is _DONE:
                    return
                epoch, position, record, dim = item
                self.store.write(epoch, position, record, expected_dim=dim)
            except BaseException as exc:  # surfaced on drain
                self._errors.append(exc)
            finally:
                self._writes.task_done()

    def epoch(self, epoch: int, batches):
        reads: queue.Queue = queue.Queue(maxsize=self.depth)

        def read_loop():
            try:
                for positions in batches:
                    reads.put([self.store.read(epoch, int(k)) for k in positions])
            except BaseException as exc:
                reads.put(exc)
                return
            reads.put(_DONE)

        reader = threading.Thread(target=read_loop, daemon=True)
        reader.start()
        while True:
            item = reads.get()
            if item is _DONE:
                break
            if isinstance(item, BaseException):
                raise item
            yield item
        reader.join()

    def submit(self, epoch: int, position: int, record: CacheRecord, dim: int | None = None):
        self._writes.put((epoch, position, record, dim))

    def drain(self) -> None:
        self._writes.join()
        if self._errors:
            raise self._errors.pop(0)

    def close(self) -> None:
        self.drain()
        self._writes.put(_DONE)
        self._writer.join()
