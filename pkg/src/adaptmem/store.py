"""Durable memory store with an exact cosine-similarity index.

On-disk layout (one directory)::

    manifest.json   {"format_version": 1, "embedding_dim": d}
    entries.jsonl   append-only log; one canonical-JSON record per write,
                    the last record for an id is its current state
    vectors.f32     little-endian float32, row ``id - 1`` holds entry ``id``

Embeddings are kept exactly as the backend produced them, rounded to
float32; normalization happens at query time. Deletion writes a tombstone
record; :meth:`MemoryStore.compact` drops tombstones physically.
"""

from __future__ import annotations

import json
import logging
import os
import threading
from dataclasses import dataclass
from datetime import datetime, timedelta
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import Deleted, DimensionMismatch, NotFound, StorageFailure
from .types import Granularity, MemoryEntry, TurnId, canonical_json

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
MANIFEST = "manifest.json"
LOG = "entries.jsonl"
VECTORS = "vectors.f32"
_F32 = np.dtype("<f4")


@dataclass(frozen=True)
class StoreConfig:
    path: str | os.PathLike
    embedding_dim: int
    retention_limit: timedelta | None = None
    k_min: int = 5
    fsync: bool = True

    def __post_init__(self):
        if self.embedding_dim < 1:
            raise ValueError("embedding_dim must be >= 1")
        if self.k_min < 1:
            raise ValueError("k_min must be >= 1")


@dataclass(frozen=True)
class ScoredEntry:
    entry: MemoryEntry
    score: float

    def to_dict(self) -> dict:
        return {"entry": self.entry.to_dict(), "score": self.score}


def cosine(a: Sequence[float], b: Sequence[float]) -> float:
    """Cosine similarity; 0.0 when either vector has zero norm."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = float(np.linalg.norm(a)) * float(np.linalg.norm(b))
    if denom == 0.0:
        return 0.0
    return float(np.dot(a, b)) / denom


def _as_vector(v) -> np.ndarray:
    if hasattr(v, "values"):
        v = v.values
    return np.asarray(v, dtype=np.float64)


class MemoryStore:
    """Memory entries partitioned by granularity, indexed by turn and vector.

    Writes are serialized store-wide and become visible to readers only
    once the log append has completed.
    """

    def __init__(self, config: StoreConfig):
        self.config = config
        self.dim = config.embedding_dim
        self.path = Path(config.path)
        self._lock = threading.RLock()
        self._entries: dict[int, MemoryEntry] = {}
        self._vectors = np.zeros((0, self.dim), dtype=_F32)
        self._turn_index: dict[TurnId, set[int]] = {}
        self._next_id = 1
        self._seq = 0
        self._closed = False
        self._open()

    # --- lifecycle -----------------------------------------------------------

    @classmethod
    def open(cls, path, embedding_dim: int | None = None, **kwargs) -> "MemoryStore":
        """Open an existing store, reading the dimension from its manifest if not given."""
        if embedding_dim is None:
            manifest = Path(path) / MANIFEST
            embedding_dim = json.loads(manifest.read_text())["embedding_dim"]
        return cls(StoreConfig(path, embedding_dim, **kwargs))

    def _open(self) -> None:
        self.path.mkdir(parents=True, exist_ok=True)
        manifest = self.path / MANIFEST
        if manifest.exists():
            meta = json.loads(manifest.read_text())
            if meta.get("format_version") != FORMAT_VERSION:
                raise StorageFailure(f"unsupported store format {meta.get('format_version')!r}")
            if meta["embedding_dim"] != self.dim:
                raise DimensionMismatch(
                    f"store at {self.path} has dim {meta['embedding_dim']}, config says {self.dim}"
                )
        else:
            manifest.write_text(canonical_json({"format_version": FORMAT_VERSION, "embedding_dim": self.dim}) + "\n")
        (self.path / LOG).touch(exist_ok=True)
        (self.path / VECTORS).touch(exist_ok=True)
        self._load()

    def _load(self) -> None:
        raw = np.fromfile(self.path / VECTORS, dtype=_F32)
        rows = raw.size // self.dim
        if raw.size % self.dim:
            logger.warning("vector sidecar has a partial trailing row; ignoring it")
        self._vectors = raw[: rows * self.dim].reshape(rows, self.dim).astype(_F32, copy=True)

        records: dict[int, dict] = {}
        log_path = self.path / LOG
        good_bytes = 0
        with open(log_path, "rb") as fh:
            for line in fh:
                if not line.endswith(b"\n"):
                    logger.warning("entry log ends with a torn record; truncating it")
                    break
                try:
                    rec = json.loads(line)
                except ValueError:
                    logger.warning("entry log has an unreadable trailing record; truncating it")
                    break
                records[rec["id"]] = rec
                good_bytes += len(line)
        if good_bytes != log_path.stat().st_size:
            with open(log_path, "r+b") as fh:
                fh.truncate(good_bytes)

        for i, rec in sorted(records.items()):
            if i > rows:
                raise StorageFailure(f"entry {i} has no vector row")
            rec = dict(rec, embedding=self._vectors[i - 1].tolist())
            entry = MemoryEntry.from_dict(rec)
            self._entries[i] = entry
            self._index_turns(entry)
            self._seq = max(self._seq, entry.created_at)
        self._next_id = max(rows, max(records, default=0)) + 1

    def close(self) -> None:
        self._closed = True

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def _check_open(self):
        if self._closed:
            raise StorageFailure("store is closed")

    # --- internal helpers ----------------------------------------------------

    def _index_turns(self, entry: MemoryEntry) -> None:
        for t in (entry.meta.turn_id, *entry.relations):
            self._turn_index.setdefault(t, set()).add(entry.id)

    def _check_dim(self, v: np.ndarray) -> None:
        if v.ndim != 1 or v.shape[0] != self.dim:
            raise DimensionMismatch(f"expected a {self.dim}-dim vector, got shape {v.shape}")

    def _live(self, entry_id: int) -> MemoryEntry:
        entry = self._entries.get(entry_id)
        if entry is None:
            raise NotFound(f"no memory entry with id {entry_id}")
        if entry.deleted:
            raise Deleted(f"memory entry {entry_id} is deleted")
        return entry

    def _record(self, entry: MemoryEntry) -> bytes:
        d = entry.to_dict()
        del d["embedding"]
        return (canonical_json(d) + "\n").encode("utf-8")

    def _sync(self, fh) -> None:
        fh.flush()
        if self.config.fsync:
            os.fsync(fh.fileno())

    def _write_vectors(self, appended: np.ndarray, overwrites: dict[int, np.ndarray]) -> None:
        with open(self.path / VECTORS, "r+b") as fh:
            for entry_id, row in overwrites.items():
                fh.seek((entry_id - 1) * self.dim * 4)
                fh.write(row.astype(_F32).tobytes())
            if len(appended):
                fh.seek(0, os.SEEK_END)
                fh.write(appended.astype(_F32).tobytes())
            self._sync(fh)

    def _write_log(self, payload: bytes) -> None:
        with open(self.path / LOG, "ab") as fh:
            fh.write(payload)
            self._sync(fh)

    def _commit(self, entries: list[MemoryEntry], new_rows: np.ndarray, overwrites: dict[int, np.ndarray]) -> None:
        """Persist a batch of entry states atomically, then publish them.

        The log append is the commit point; on any failure both files are
        restored to their previous contents.
        """
        log_path = self.path / LOG
        vec_path = self.path / VECTORS
        log_size = log_path.stat().st_size
        vec_size = vec_path.stat().st_size
        old_rows = {i: self._vectors[i - 1].copy() for i in overwrites}
        try:
            self._write_vectors(new_rows, overwrites)
            self._write_log(b"".join(self._record(e) for e in entries))
        except Exception as exc:
            try:
                with open(log_path, "r+b") as fh:
                    fh.truncate(log_size)
                with open(vec_path, "r+b") as fh:
                    for i, row in old_rows.items():
                        fh.seek((i - 1) * self.dim * 4)
                        fh.write(row.tobytes())
                    fh.truncate(vec_size)
            except OSError:  # pragma: no cover - double fault
                logger.exception("rollback after failed commit also failed")
            raise StorageFailure(f"commit failed: {exc}") from exc

        if len(new_rows):
            self._vectors = np.concatenate([self._vectors, new_rows.astype(_F32)])
        for i, row in overwrites.items():
            self._vectors[i - 1] = row.astype(_F32)
        for e in entries:
            is_new = e.id not in self._entries
            self._entries[e.id] = e
            if is_new:
                self._index_turns(e)

    # --- writes --------------------------------------------------------------

    def insert(self, entry: MemoryEntry) -> int:
        return self.insert_many([entry])[0]

    def insert_many(self, entries: Sequence[MemoryEntry]) -> list[int]:
        """Insert a batch all-or-nothing; returns ids in input order."""
        with self._lock:
            self._check_open()
            vecs = []
            for e in entries:
                v = np.asarray(e.embedding, dtype=np.float64)
                self._check_dim(v)
                if e.deleted:
                    raise ValueError("cannot insert a tombstone")
                vecs.append(v)
            if not entries:
                return []
            rows = np.stack(vecs).astype(_F32)
            stored = []
            for k, e in enumerate(entries):
                i = self._next_id + k
                stored.append(
                    e.with_(id=i, created_at=self._seq + 1 + k, embedding=tuple(rows[k].tolist()), deleted=False)
                )
            self._commit(stored, rows, {})
            self._next_id += len(stored)
            self._seq += len(stored)
            return [e.id for e in stored]

    def update_content(self, entry_id: int, new_content: str, new_embedding, new_timestamp: datetime | None = None) -> MemoryEntry:
        return self.apply_edits([(entry_id, new_content, new_embedding, new_timestamp)], [])[0]

    def delete(self, entry_id: int) -> MemoryEntry:
        with self._lock:
            self._check_open()
            entry = self._entries.get(entry_id)
            if entry is None or entry.deleted:
                raise NotFound(f"no live memory entry with id {entry_id}")
            return self.apply_edits([], [entry_id])[0]

    def apply_edits(self, updates: Iterable[tuple], deletes: Iterable[int]) -> list[MemoryEntry]:
        """Apply content updates and deletions as one atomic write.

        ``updates`` holds ``(id, content, embedding, timestamp_or_None)``.
        Every target is validated before anything is written, so a bad id
        leaves the store untouched. Returns the new states, updates first.
        """
        updates = list(updates)
        deletes = list(dict.fromkeys(deletes))
        with self._lock:
            self._check_open()
            changed: list[MemoryEntry] = []
            overwrites: dict[int, np.ndarray] = {}
            for entry_id, content, embedding, ts in updates:
                entry = self._live(entry_id)
                v = _as_vector(embedding)
                self._check_dim(v)
                if not isinstance(content, str) or not content.strip():
                    raise ValueError("updated content must be non-empty")
                row = v.astype(_F32)
                meta = entry.meta if ts is None else type(entry.meta)(ts, entry.meta.turn_id, entry.meta.speaker)
                changed.append(entry.with_(content=content, embedding=tuple(row.tolist()), meta=meta))
                overwrites[entry_id] = row
            for entry_id in deletes:
                entry = self._live(entry_id)
                if entry_id in overwrites:
                    raise ValueError(f"entry {entry_id} is both updated and deleted")
                changed.append(entry.with_(deleted=True))
            if changed:
                self._commit(changed, np.zeros((0, self.dim), dtype=_F32), overwrites)
            return changed

    def purge_expired(self, conflict_ids: Iterable[int], now: datetime) -> list[int]:
        """Delete conflicting entries older than the retention limit.

        Only ids in ``conflict_ids`` are considered; entries with an
        Unknown timestamp are never purged.
        """
        limit = self.config.retention_limit
        if limit is None:
            return []
        with self._lock:
            expired = []
            for entry_id in dict.fromkeys(conflict_ids):
                entry = self._entries.get(entry_id)
                if entry is None or entry.deleted or entry.meta.timestamp is None:
                    continue
                if now - entry.meta.timestamp > limit:
                    expired.append(entry_id)
            if expired:
                self.apply_edits([], expired)
            return expired

    def compact(self) -> int:
        """Physically drop tombstones and superseded log records.

        Ids are not reused; the vector rows of dropped entries are zeroed.
        Returns the number of tombstones removed.
        """
        with self._lock:
            self._check_open()
            dead = [i for i, e in self._entries.items() if e.deleted]
            live = [e for _, e in sorted(self._entries.items()) if not e.deleted]
            vectors = self._vectors.copy()
            for i in dead:
                vectors[i - 1] = 0.0
            tmp_log = self.path / (LOG + ".tmp")
            tmp_vec = self.path / (VECTORS + ".tmp")
            try:
                with open(tmp_vec, "wb") as fh:
                    fh.write(vectors.astype(_F32).tobytes())
                    self._sync(fh)
                with open(tmp_log, "wb") as fh:
                    fh.write(b"".join(self._record(e) for e in live))
                    self._sync(fh)
                os.replace(tmp_vec, self.path / VECTORS)
                os.replace(tmp_log, self.path / LOG)
            except OSError as exc:
                raise StorageFailure(f"compaction failed: {exc}") from exc
            self._vectors = vectors
            for i in dead:
                entry = self._entries.pop(i)
                for t in (entry.meta.turn_id, *entry.relations):
                    self._turn_index.get(t, set()).discard(i)
            return len(dead)

    # --- reads ---------------------------------------------------------------

    def get(self, entry_id: int) -> MemoryEntry:
        with self._lock:
            return self._live(entry_id)

    def audit(self, entry_id: int) -> MemoryEntry:
        """Return an entry even if it is a tombstone."""
        with self._lock:
            entry = self._entries.get(entry_id)
            if entry is None:
                raise NotFound(f"no memory entry with id {entry_id}")
            return entry

    def tombstones(self) -> list[MemoryEntry]:
        with self._lock:
            return [e for _, e in sorted(self._entries.items()) if e.deleted]

    def all_records(self) -> list[MemoryEntry]:
        """Every entry including tombstones, ordered by id (audit view)."""
        with self._lock:
            return [e for _, e in sorted(self._entries.items())]

    def scan(self, granularity: Granularity | None = None) -> list[MemoryEntry]:
        with self._lock:
            out = [
                e
                for e in self._entries.values()
                if not e.deleted and (granularity is None or e.granularity is Granularity(granularity))
            ]
        return sorted(out, key=lambda e: e.created_at)

    def __len__(self) -> int:
        with self._lock:
            return sum(1 for e in self._entries.values() if not e.deleted)

    def get_by_turn_ids(self, ids: Iterable[TurnId]) -> list[MemoryEntry]:
        with self._lock:
            hits: set[int] = set()
            for t in ids:
                hits |= self._turn_index.get(t, set())
            out = [self._entries[i] for i in hits if not self._entries[i].deleted]
        return sorted(out, key=lambda e: e.created_at)

    def score(self, entries: Sequence[MemoryEntry], query_vec) -> list[ScoredEntry]:
        """Cosine-score arbitrary entries against ``query_vec``."""
        q = _as_vector(query_vec)
        self._check_dim(q)
        if not entries:
            return []
        with self._lock:
            m = self._vectors[[e.id - 1 for e in entries]].astype(np.float64)
        scores = _cosines(m, q)
        return [ScoredEntry(e, float(s)) for e, s in zip(entries, scores)]

    def top_k(self, granularity: Granularity, query_vec, k: int) -> list[ScoredEntry]:
        """The ``k`` most similar live entries of one granularity.

        Sorted by score descending; equal scores keep insertion order.
        """
        if k < 1:
            raise ValueError("k must be >= 1")
        q = _as_vector(query_vec)
        self._check_dim(q)
        granularity = Granularity(granularity)
        with self._lock:
            pool = [e for e in self._entries.values() if not e.deleted and e.granularity is granularity]
            if not pool:
                return []
            m = self._vectors[[e.id - 1 for e in pool]].astype(np.float64)
        scores = _cosines(m, q)
        created = np.fromiter((e.created_at for e in pool), dtype=np.int64, count=len(pool))
        order = np.lexsort((created, -scores))[:k]
        return [ScoredEntry(pool[i], float(scores[i])) for i in order]


def _cosines(m: np.ndarray, q: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(m, axis=1) * np.linalg.norm(q)
    dots = m @ q
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(norms > 0, dots / np.where(norms > 0, norms, 1.0), 0.0)
    return out
