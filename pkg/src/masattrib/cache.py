"""Durable memoization of coalition evaluations.

Log layout (all integers big-endian)::

    header   b"MASLOG" + version byte (currently 0x01)
    record*  uint32 payload length | uint32 crc32(payload) | payload

Each payload is a UTF-8 JSON object with sorted keys holding one
:class:`CacheEntry`. A truncated or corrupt trailing record (a crash during
append) is dropped and the file is cut back to the last good record on open.
"""

from __future__ import annotations

import fcntl
import json
import logging
import os
import struct
import threading
import zlib
from concurrent.futures import Future
from dataclasses import asdict, dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import Callable, Optional, Union

logger = logging.getLogger(__name__)

MAGIC = b"MASLOG"
VERSION = 1
_HEADER = MAGIC + bytes([VERSION])
_PREFIX = struct.Struct(">II")


class CacheError(RuntimeError):
    pass


class CacheLockedError(CacheError):
    pass


@dataclass(frozen=True)
class CacheKey:
    game_digest: str
    coalition: int
    protocol_digest: str
    task: str
    seed: int
    metric: str


@dataclass(frozen=True)
class Measurement:
    """What an evaluation hands back to the store."""

    score: float
    prompt_tokens: int = 0
    completion_tokens: int = 0
    cost: float = 0.0
    model: Optional[str] = None


@dataclass(frozen=True)
class CacheEntry:
    key: CacheKey
    score: float
    tokens: int
    cost: float
    timestamp: str
    prompt_tokens: int = 0
    completion_tokens: int = 0
    model: Optional[str] = None

    def to_json(self) -> bytes:
        return json.dumps(asdict(self), sort_keys=True, separators=(",", ":")).encode("utf-8")

    @classmethod
    def from_json(cls, blob: bytes) -> "CacheEntry":
        raw = json.loads(blob.decode("utf-8"))
        raw["key"] = CacheKey(**raw["key"])
        return cls(**raw)


class CacheStore:
    """Content-addressed store with single-flight evaluation per key.

    With ``path=None`` the store lives in memory only.
    """

    def __init__(self, path: Union[str, Path, None] = None):
        self.path = Path(path) if path is not None else None
        self._entries: dict = {}
        self._order: list = []
        self._inflight: dict = {}
        self._lock = threading.Lock()
        self._write_lock = threading.Lock()
        self._fh = None
        self.evaluations = 0
        if self.path is not None:
            self._open()

    def _open(self):
        self.path.parent.mkdir(parents=True, exist_ok=True)
        fh = open(self.path, "a+b")
        try:
            fcntl.flock(fh.fileno(), fcntl.LOCK_EX | fcntl.LOCK_NB)
        except BlockingIOError:
            fh.close()
            raise CacheLockedError(f"cache {self.path} is held by another process") from None
        fh.seek(0)
        data = fh.read()
        if not data:
            fh.write(_HEADER)
            fh.flush()
        else:
            if data[: len(MAGIC)] != MAGIC:
                fh.close()
                raise CacheError(f"{self.path} is not a coalition cache log")
            if len(data) < len(_HEADER) or data[len(MAGIC)] != VERSION:
                fh.close()
                raise CacheError(f"{self.path}: unsupported cache log version")
            good = self._replay(data)
            if good < len(data):
                logger.warning("dropping %d trailing bytes of %s", len(data) - good, self.path)
                fh.truncate(good)
        fh.seek(0, os.SEEK_END)
        self._fh = fh

    def _replay(self, data: bytes) -> int:
        pos = len(_HEADER)
        while pos + _PREFIX.size <= len(data):
            length, crc = _PREFIX.unpack_from(data, pos)
            end = pos + _PREFIX.size + length
            if end > len(data):
                break
            payload = data[pos + _PREFIX.size : end]
            if zlib.crc32(payload) != crc:
                break
            entry = CacheEntry.from_json(payload)
            if entry.key not in self._entries:
                self._order.append(entry.key)
            self._entries[entry.key] = entry
            pos = end
        return pos

    def _append(self, entry: CacheEntry):
        if self._fh is None:
            return
        payload = entry.to_json()
        with self._write_lock:
            self._fh.write(_PREFIX.pack(len(payload), zlib.crc32(payload)) + payload)
            self._fh.flush()

    def get(self, key: CacheKey) -> Optional[CacheEntry]:
        return self._entries.get(key)

    def __contains__(self, key: CacheKey) -> bool:
        return key in self._entries

    def __len__(self) -> int:
        return len(self._order)

    def get_or_evaluate(self, key: CacheKey, evaluate: Callable[[], Measurement]) -> CacheEntry:
        """Return the stored entry for ``key``, running ``evaluate`` at most once across threads.

        Failed evaluations are not stored; the next call retries.
        """
        with self._lock:
            hit = self._entries.get(key)
            if hit is not None:
                return hit
            fut = self._inflight.get(key)
            owner = fut is None
            if owner:
                fut = self._inflight[key] = Future()
        if not owner:
            return fut.result()
        try:
            m = evaluate()
            entry = CacheEntry(
                key=key,
                score=float(m.score),
                tokens=int(m.prompt_tokens) + int(m.completion_tokens),
                cost=float(m.cost),
                timestamp=datetime.now(timezone.utc).isoformat(),
                prompt_tokens=int(m.prompt_tokens),
                completion_tokens=int(m.completion_tokens),
                model=m.model,
            )
            if entry.tokens < 0:
                raise CacheError("token counts must be non-negative")
            if entry.score != entry.score or entry.score in (float("inf"), float("-inf")):
                raise CacheError(f"non-finite score {entry.score} for {key}")
            self._append(entry)
        except BaseException as exc:
            with self._lock:
                del self._inflight[key]
            fut.set_exception(exc)
            raise
        with self._lock:
            self._entries[key] = entry
            self._order.append(key)
            self.evaluations += 1
            del self._inflight[key]
        fut.set_result(entry)
        return entry

    def export_ledger(self) -> list:
        with self._lock:
            return [self._entries[k] for k in self._order]

    def close(self):
        if self._fh is not None:
            self._fh.flush()
            os.fsync(self._fh.fileno())
            fcntl.flock(self._fh.fileno(), fcntl.LOCK_UN)
            self._fh.close()
            self._fh = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def open_store(path: Union[str, Path, None] = None) -> CacheStore:
    return CacheStore(path)


def export_ledger(store: CacheStore) -> list:
    return store.export_ledger()
