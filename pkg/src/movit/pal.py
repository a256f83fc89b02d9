"""Prototype distillation of a memory bank.

Keys are chosen greedily from the cached keys to minimize a cosine-similarity
MMD against the whole bank; each chosen key's value is replaced by a
softmax-weighted average of all cached values.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .memory import (BANK_VERSION, BankFormatError, ContractError, MemoryBank, _record_dtype,
                     read_header, read_records)

PROTO_MAGIC = b"MOVP"
_EXTRA = struct.Struct("<fI")
VARIANTS = ("standard", "paper")
TIE_TOL = 1e-12


def _unit_rows(x, what: str) -> np.ndarray:
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise ContractError(f"zero-norm {what} vector: cosine similarity undefined")
    return x / norms


def _cross_coef(variant: str) -> float:
    if variant not in VARIANTS:
        raise ContractError(f"unknown MMD variant {variant!r}, expected one of {VARIANTS}")
    return 2.0 if variant == "standard" else 1.0


def mmd_squared(proto_keys, all_keys, variant: str = "standard") -> float:
    """Squared MMD between two key sets with cosine similarity as the kernel.

    ``standard`` weights the cross term by 2/(PM); ``paper`` by 1/(PM), which
    leaves a nonzero self-distance.
    """
    coef = _cross_coef(variant)
    p = _unit_rows(proto_keys, "key")
    a = _unit_rows(all_keys, "key")
    if p.shape[1] != a.shape[1]:
        raise ContractError(f"key dimensions differ: {p.shape[1]} vs {a.shape[1]}")
    P, M = len(p), len(a)
    self_p = (p @ p.T).sum() / P ** 2
    cross = (p @ a.T).sum() / (P * M)
    # sum of all pairwise cosines == |sum of unit vectors|^2
    s = a.sum(axis=0)
    self_a = float(s @ s) / M ** 2
    return float(self_p - coef * cross + self_a)


def greedy_select_prototypes(keys, P: int, variant: str = "standard") -> list[int]:
    """Indices of ``P`` keys chosen one at a time, each the argmin of the MMD objective.

    Selection is without replacement; objectives within ``TIE_TOL`` of the
    minimum are ties and go to the lowest index.  Running
    sums keep every step at O(M * dim) instead of recomputing the objective.
    """
    coef = _cross_coef(variant)
    k = _unit_rows(keys, "key")
    M = len(k)
    if not 1 <= P <= M:
        raise ContractError(f"need 1 <= P <= M, got P={P}, M={M}")
    col = k.sum(axis=0)
    cross_all = k @ col                   # sum_j D(k_c, k_j) for every candidate c
    const = float(col @ col) / M ** 2
    diag = np.einsum("ij,ij->i", k, k)    # D(k_c, k_c), 1 up to rounding
    to_selected = np.zeros(M)             # sum over selected s of D(k_c, k_s)
    self_sum = 0.0
    cross_sum = 0.0
    taken = np.zeros(M, dtype=bool)
    order: list[int] = []
    for step in range(P):
        n = step + 1
        obj = (self_sum + 2.0 * to_selected + diag) / n ** 2 - coef * (cross_sum + cross_all) / (n * M) + const
        obj[taken] = np.inf
        # objectives equal up to rounding count as tied; take the lowest index
        c = int(np.flatnonzero(obj <= obj.min() + TIE_TOL)[0])
        order.append(c)
        taken[c] = True
        self_sum += 2.0 * to_selected[c] + diag[c]
        cross_sum += cross_all[c]
        to_selected += k @ k[c]
    return order


def aggregate_values(anchors, values, tau: float) -> np.ndarray:
    """Softmax(cosine / tau)-weighted averages of ``values``, one per anchor row."""
    if tau <= 0:
        raise ContractError(f"tau must be positive, got {tau}")
    vals = np.atleast_2d(np.asarray(values, dtype=np.float64))
    sims = _unit_rows(anchors, "anchor value") @ _unit_rows(vals, "value").T / tau
    sims -= sims.max(axis=1, keepdims=True)
    w = np.exp(sims)
    w /= w.sum(axis=1, keepdims=True)
    return w @ vals


@dataclass
class PrototypeBank:
    """Distilled facts with the same read interface as :class:`MemoryBank`.

    ``source_index`` holds, per prototype, the row of the key it was copied
    from within its head; it is stored in the ``sample_id`` slot on disk.
    """

    head_dim: int
    num_heads: int
    tau: float
    keys: list = field(default_factory=list)
    values: list = field(default_factory=list)
    source_index: list = field(default_factory=list)
    source_bank_hash: str = ""
    version: int = 0

    def __post_init__(self):
        if not self.keys:
            self.keys = [np.zeros((0, self.head_dim), np.float32) for _ in range(self.num_heads)]
            self.values = [np.zeros((0, self.head_dim), np.float32) for _ in range(self.num_heads)]
            self.source_index = [np.zeros(0, np.int64) for _ in range(self.num_heads)]
        self._index_cache: dict = {}

    @property
    def P(self) -> int:
        return sum(len(k) for k in self.keys)

    def __len__(self) -> int:
        return self.P

    def head_size(self, head: int) -> int:
        return len(self.keys[head])

    def head_arrays(self, head: int):
        # prototypes carry no sample identity, so self-exclusion never matches
        ids = np.full(len(self.keys[head]), -1, dtype=np.int64)
        return ids, self.keys[head], self.values[head]

    def row_of(self, sample_id: int, head: int):
        return None

    def cached_index(self, head: int, builder):
        if head not in self._index_cache:
            self._index_cache[head] = builder(self.keys[head])
        return self._index_cache[head]

    def __eq__(self, other) -> bool:
        if not isinstance(other, PrototypeBank):
            return NotImplemented
        same = (self.head_dim, self.num_heads, np.float32(self.tau)) == (other.head_dim, other.num_heads, np.float32(other.tau))
        return same and all(
            np.array_equal(a, b)
            for mine, theirs in ((self.keys, other.keys), (self.values, other.values), (self.source_index, other.source_index))
            for a, b in zip(mine, theirs))


def prototype_count(num_classes: int, multiplier: int = 32) -> int:
    return int(num_classes) * int(multiplier)


def split_across_heads(P: int, num_heads: int) -> list[int]:
    base, extra = divmod(P, num_heads)
    return [base + (1 if h < extra else 0) for h in range(num_heads)]


def distill(bank: MemoryBank, num_classes: int, tau: float = 0.5, variant: str = "standard",
            multiplier: int = 32) -> PrototypeBank:
    """Distill ``bank`` into ``num_classes * multiplier`` prototypes.

    Keys from different heads live in different spaces, so the prototype
    budget is split evenly across heads and each head is distilled on its own.
    """
    if len(bank) == 0:
        raise ContractError("cannot distill an empty bank")
    if num_classes < 1:
        raise ContractError(f"num_classes must be >= 1, got {num_classes}")
    P = prototype_count(num_classes, multiplier)
    M = len(bank)
    if P > M:
        raise ContractError(f"P = {num_classes} x {multiplier} = {P} exceeds the {M} stored facts; lower the multiplier")
    per_head = split_across_heads(P, bank.num_heads)
    out = PrototypeBank(bank.head_dim, bank.num_heads, float(tau), source_bank_hash=bank.checksum())
    for h, ph in enumerate(per_head):
        _, keys, values = bank.head_arrays(h)
        if ph > len(keys):
            raise ContractError(f"head {h} holds {len(keys)} facts but needs {ph} prototypes; lower the multiplier")
        if ph == 0:
            raise ContractError(f"P = {P} is smaller than the {bank.num_heads} heads; every head needs a prototype")
        sel = np.asarray(greedy_select_prototypes(keys, ph, variant), dtype=np.int64)
        out.keys[h] = keys[sel].copy()
        out.values[h] = aggregate_values(values[sel], values, tau).astype(np.float32)
        out.source_index[h] = sel
    return out


def save_prototypes(pb: PrototypeBank, path) -> None:
    rec = np.zeros(pb.P, dtype=_record_dtype(pb.head_dim))
    pos = 0
    for h in range(pb.num_heads):
        n = pb.head_size(h)
        rec["sample_id"][pos:pos + n] = pb.source_index[h]
        rec["head"][pos:pos + n] = h
        rec["key"][pos:pos + n] = pb.keys[h]
        rec["value"][pos:pos + n] = pb.values[h]
        pos += n
    with open(path, "wb") as fh:
        fh.write(struct.pack("<4sIIIQ", PROTO_MAGIC, BANK_VERSION, pb.head_dim, pb.num_heads, pb.P))
        fh.write(_EXTRA.pack(pb.tau, pb.P))
        fh.write(rec.tobytes())


def load_prototypes(path) -> PrototypeBank:
    buf = Path(path).read_bytes()
    _, head_dim, num_heads, count = read_header(buf, PROTO_MAGIC)
    off = struct.calcsize("<4sIIIQ")
    if len(buf) < off + _EXTRA.size:
        raise BankFormatError("truncated prototype header", len(buf))
    tau, P = _EXTRA.unpack_from(buf, off)
    if P != count:
        raise BankFormatError(f"prototype count {P} disagrees with record count {count}", off + 4)
    rec = read_records(buf, off + _EXTRA.size, count, head_dim, num_heads)
    heads = rec["head"]
    if np.any(np.diff(heads.astype(np.int64)) < 0):
        raise BankFormatError("prototype records are not grouped by head", off + _EXTRA.size)
    pb = PrototypeBank(head_dim, num_heads, float(tau))
    for h in range(num_heads):
        m = heads == h
        pb.keys[h] = rec["key"][m].copy()
        pb.values[h] = rec["value"][m].copy()
        pb.source_index[h] = rec["sample_id"][m].astype(np.int64)
    return pb
