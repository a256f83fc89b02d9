"""External attention-fact memory: storage, moving-average updates, persistence."""

from __future__ import annotations

import hashlib
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

BANK_MAGIC = b"MOVB"
BANK_VERSION = 1
_HEADER = struct.Struct("<4sIIIQ")


class FormatError(ValueError):
    """Malformed artifact file; ``offset`` is the byte where parsing failed."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


BankFormatError = FormatError


class ContractError(ValueError):
    pass


@dataclass(frozen=True)
class AttentionFact:
    sample_id: int
    head: int
    key: np.ndarray
    value: np.ndarray


@dataclass(frozen=True)
class ScheduleState:
    alpha0: float = 0.01
    t0: int = 1
    total_epochs: int = 10

    def __post_init__(self):
        if not 0 < self.alpha0 < 1:
            raise ContractError(f"alpha0 must lie in (0, 1), got {self.alpha0}")
        if not 0 < self.t0 <= self.total_epochs:
            raise ContractError(f"t0 must lie in (0, total_epochs], got t0={self.t0}, total={self.total_epochs}")

    @classmethod
    def from_fraction(cls, total_epochs: int, alpha0: float = 0.01, t0_fraction: float = 0.10) -> ScheduleState:
        # round, but never let the ramp vanish on short runs
        t0 = max(1, int(round(t0_fraction * total_epochs)))
        return cls(alpha0=alpha0, t0=min(t0, total_epochs), total_epochs=total_epochs)


def alpha_schedule(t: float, s: ScheduleState) -> float:
    """Ramp-down friction coefficient for epoch ``t``.

    ``1 - alpha0 * exp(-t0 * (1 - t/t0)**2)`` up to ``t0``, then flat at ``1 - alpha0``.
    """
    if t < 0:
        raise ContractError(f"epoch must be non-negative, got {t}")
    if t > s.t0:
        return 1.0 - s.alpha0
    return 1.0 - s.alpha0 * math.exp(-s.t0 * (1.0 - t / s.t0) ** 2)


class MemoryBank:
    """Indexed store of ``(sample_id, head) -> (key, value)``; never part of a graph.

    Facts live in per-head growable float32 arrays so retrieval can scan one
    contiguous key matrix per head.  Row order within a head is insertion order.
    """

    def __init__(self, head_dim: int, num_heads: int, ema_orientation: str = "paper"):
        if ema_orientation not in ("paper", "inverted"):
            raise ContractError(f"unknown ema_orientation {ema_orientation!r}")
        self.head_dim = int(head_dim)
        self.num_heads = int(num_heads)
        self.ema_orientation = ema_orientation
        self.epoch_counter = 0
        self._rows: list[dict[int, int]] = [{} for _ in range(num_heads)]
        self._ids = [np.zeros(0, dtype=np.int64) for _ in range(num_heads)]
        self._keys = [np.zeros((0, head_dim), dtype=np.float32) for _ in range(num_heads)]
        self._values = [np.zeros((0, head_dim), dtype=np.float32) for _ in range(num_heads)]
        self._count = [0] * num_heads
        self._index_cache: dict[int, tuple[int, object]] = {}
        self.version = 0

    def __len__(self) -> int:
        return sum(self._count)

    def __contains__(self, key: tuple[int, int]) -> bool:
        sample_id, head = key
        return 0 <= head < self.num_heads and sample_id in self._rows[head]

    def __eq__(self, other) -> bool:
        if not isinstance(other, MemoryBank):
            return NotImplemented
        if (self.head_dim, self.num_heads) != (other.head_dim, other.num_heads):
            return False
        return all(np.array_equal(a, b) for a, b in zip(self.canonical_records(), other.canonical_records()))

    def head_size(self, head: int) -> int:
        return self._count[head]

    def head_arrays(self, head: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Read-only ``(sample_ids, keys, values)`` views for one head."""
        n = self._count[head]
        views = self._ids[head][:n], self._keys[head][:n], self._values[head][:n]
        for v in views:
            v.flags.writeable = False
        return views

    def row_of(self, sample_id: int, head: int) -> int | None:
        return self._rows[head].get(int(sample_id))

    def get(self, sample_id: int, head: int) -> AttentionFact:
        row = self._rows[head][int(sample_id)]
        return AttentionFact(int(sample_id), head, self._keys[head][row].copy(), self._values[head][row].copy())

    def facts(self) -> Iterator[AttentionFact]:
        for h in range(self.num_heads):
            ids, keys, values = self.head_arrays(h)
            for i in range(len(ids)):
                yield AttentionFact(int(ids[i]), h, keys[i].copy(), values[i].copy())

    def _append(self, head: int, sample_id: int, key: np.ndarray, value: np.ndarray) -> None:
        n = self._count[head]
        if n == len(self._ids[head]):
            cap = max(16, 2 * n)
            self._ids[head] = np.resize(self._ids[head], cap)
            for store in (self._keys, self._values):
                grown = np.zeros((cap, self.head_dim), dtype=np.float32)
                grown[:n] = store[head][:n]
                store[head] = grown
        self._ids[head][n] = sample_id
        self._keys[head][n] = key
        self._values[head][n] = value
        self._rows[head][sample_id] = n
        self._count[head] = n + 1

    def _write(self, head: int, row: int, key: np.ndarray, value: np.ndarray) -> None:
        self._keys[head][row] = key
        self._values[head][row] = value

    def cached_index(self, head: int, builder):
        """Memoize a search structure over one head's keys until the next write."""
        hit = self._index_cache.get(head)
        if hit is not None and hit[0] == self.version:
            return hit[1]
        built = builder(self.head_arrays(head)[1])
        self._index_cache[head] = (self.version, built)
        return built

    def canonical_records(self) -> list[np.ndarray]:
        """Per-head arrays sorted by sample id, for order-independent comparison."""
        out = []
        for h in range(self.num_heads):
            ids, keys, values = self.head_arrays(h)
            order = np.argsort(ids, kind="stable")
            out.extend([ids[order], keys[order], values[order]])
        return out

    def checksum(self) -> str:
        digest = hashlib.sha256()
        digest.update(struct.pack("<II", self.head_dim, self.num_heads))
        for arr in self.canonical_records():
            digest.update(np.ascontiguousarray(arr).tobytes())
        return digest.hexdigest()


def cache_or_update(bank: MemoryBank, fact: AttentionFact, alpha_k: float, alpha_v: float) -> None:
    """Insert a new fact, or blend it into the stored one by a moving average.

    With the default orientation the stored key becomes
    ``alpha_k * generated + (1 - alpha_k) * old`` (and likewise for values);
    ``inverted`` swaps which side the coefficient weights.
    """
    key = np.asarray(fact.key, dtype=np.float64).reshape(-1)
    value = np.asarray(fact.value, dtype=np.float64).reshape(-1)
    if key.shape != (bank.head_dim,) or value.shape != (bank.head_dim,):
        raise ContractError(
            f"fact dimension {key.shape[0]}/{value.shape[0]} does not match bank head_dim {bank.head_dim}")
    if not 0 <= fact.head < bank.num_heads:
        raise ContractError(f"head {fact.head} out of range for a {bank.num_heads}-head bank")
    for a in (alpha_k, alpha_v):
        if not 0 < a <= 1:
            raise ContractError(f"moving-average coefficient must lie in (0, 1], got {a}")
    sid = int(fact.sample_id)
    row = bank.row_of(sid, fact.head)
    bank.version += 1
    if row is None:
        bank._append(fact.head, sid, key, value)
        return
    if bank.ema_orientation == "inverted":
        alpha_k, alpha_v = 1.0 - alpha_k, 1.0 - alpha_v
    old_k = bank._keys[fact.head][row].astype(np.float64)
    old_v = bank._values[fact.head][row].astype(np.float64)
    bank._write(fact.head, row, alpha_k * key + (1.0 - alpha_k) * old_k, alpha_v * value + (1.0 - alpha_v) * old_v)


def bank_size(bank: MemoryBank) -> int:
    return len(bank)


# ---------------------------------------------------------------- persistence

def _record_dtype(head_dim: int) -> np.dtype:
    return np.dtype([("sample_id", "<u8"), ("head", "<u4"), ("key", "<f4", (head_dim,)), ("value", "<f4", (head_dim,))])


def _bank_records(bank: MemoryBank) -> np.ndarray:
    rec = np.zeros(len(bank), dtype=_record_dtype(bank.head_dim))
    pos = 0
    for h in range(bank.num_heads):
        ids, keys, values = bank.head_arrays(h)
        n = len(ids)
        rec["sample_id"][pos:pos + n] = ids
        rec["head"][pos:pos + n] = h
        rec["key"][pos:pos + n] = keys
        rec["value"][pos:pos + n] = values
        pos += n
    return rec


def save_bank(bank: MemoryBank, path) -> None:
    """Little-endian: magic, version u32, head_dim u32, num_heads u32, count u64, then fixed-size records."""
    rec = _bank_records(bank)
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(BANK_MAGIC, BANK_VERSION, bank.head_dim, bank.num_heads, len(rec)))
        fh.write(rec.tobytes())


def read_header(buf: bytes, magic: bytes) -> tuple[int, int, int, int]:
    if len(buf) < _HEADER.size:
        raise BankFormatError("truncated header", len(buf))
    got, version, head_dim, num_heads, count = _HEADER.unpack_from(buf, 0)
    if got != magic:
        raise BankFormatError(f"bad magic {got!r}, expected {magic!r}", 0)
    if version != BANK_VERSION:
        raise BankFormatError(f"unsupported format version {version}", 4)
    if head_dim == 0:
        raise BankFormatError("head_dim must be positive", 8)
    if num_heads == 0:
        raise BankFormatError("num_heads must be positive", 12)
    return version, head_dim, num_heads, count


def read_records(buf: bytes, offset: int, count: int, head_dim: int, num_heads: int) -> np.ndarray:
    dtype = _record_dtype(head_dim)
    need = offset + count * dtype.itemsize
    if len(buf) < need:
        whole = (len(buf) - offset) // dtype.itemsize
        raise BankFormatError(f"truncated records: expected {count}, found {whole} complete", offset + whole * dtype.itemsize)
    if len(buf) > need:
        raise BankFormatError(f"{len(buf) - need} trailing bytes after {count} records", need)
    rec = np.frombuffer(buf, dtype=dtype, count=count, offset=offset)
    bad = np.nonzero(rec["head"] >= num_heads)[0]
    if len(bad):
        raise BankFormatError(f"record {bad[0]} has head {rec['head'][bad[0]]} >= {num_heads}",
                              offset + int(bad[0]) * dtype.itemsize + 8)
    return rec


def load_bank(path) -> MemoryBank:
    buf = Path(path).read_bytes()
    _, head_dim, num_heads, count = read_header(buf, BANK_MAGIC)
    rec = read_records(buf, _HEADER.size, count, head_dim, num_heads)
    bank = MemoryBank(head_dim, num_heads)
    for i in range(count):
        h = int(rec["head"][i])
        sid = int(rec["sample_id"][i])
        if sid in bank._rows[h]:
            raise BankFormatError(f"duplicate fact (sample_id={sid}, head={h})",
                                  _HEADER.size + i * rec.dtype.itemsize)
        bank._append(h, sid, rec["key"][i], rec["value"][i])
    return bank
