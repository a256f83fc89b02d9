"""Local multi-head attention plus kNN-retrieved memory attention fused by a per-head gate."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .memory import AttentionFact
from .tensor import Tensor

APPROX_EXACT_LIMIT = 4096


class RetrievalError(RuntimeError):
    pass


class CompatibilityError(ValueError):
    pass


@dataclass
class RetrievalResult:
    """Top-k bank rows per query, best first.

    ``valid`` is False for padding slots (a query may have fewer eligible facts
    than requested once its own sample is excluded); their score is ``-inf``.
    """

    indices: np.ndarray
    scores: np.ndarray
    valid: np.ndarray
    keys: np.ndarray | None = None
    values: np.ndarray | None = None

    def gather(self, keys: np.ndarray, values: np.ndarray) -> RetrievalResult:
        self.keys = keys[self.indices]
        self.values = values[self.indices]
        return self


# ---------------------------------------------------------------- search

def _sorted_topk(scores: np.ndarray, k: int) -> np.ndarray:
    """Row-wise top-k column indices by descending score, ties to the lower column."""
    Q, M = scores.shape
    if k >= M:
        return np.argsort(-scores, axis=1, kind="stable")
    part = np.argpartition(-scores, k - 1, axis=1)[:, :k]
    cand = np.take_along_axis(scores, part, axis=1)
    # a tie straddling the partition boundary may have kept a higher index
    straddle = (scores >= cand.min(axis=1, keepdims=True)).sum(axis=1) > k
    order = np.lexsort((part, -cand), axis=1)
    top = np.take_along_axis(part, order, axis=1)
    if straddle.any():
        top[straddle] = np.argsort(-scores[straddle], axis=1, kind="stable")[:, :k]
    return top


class ApproxIndex:
    """Inverted-file index: keys bucketed by k-means, queries scan the best buckets."""

    def __init__(self, keys: np.ndarray, nprobe_fraction: float = 0.25, iters: int = 8, seed: int = 0):
        self.keys = np.asarray(keys, dtype=np.float32)
        M = len(self.keys)
        nlist = max(1, int(math.sqrt(M)))
        rng = np.random.default_rng(seed)
        cent = self.keys[rng.choice(M, nlist, replace=False)].astype(np.float64)
        x = self.keys.astype(np.float64)
        x2 = (x * x).sum(1)
        for _ in range(iters):
            assign = np.argmin(x2[:, None] - 2 * x @ cent.T + (cent * cent).sum(1), axis=1)
            for c in range(nlist):
                members = x[assign == c]
                if len(members):
                    cent[c] = members.mean(0)
        self.assign = np.argmin(x2[:, None] - 2 * x @ cent.T + (cent * cent).sum(1), axis=1)
        self.centroids = cent
        self.lists = [np.nonzero(self.assign == c)[0] for c in range(nlist)]
        self.nprobe = max(1, int(round(nprobe_fraction * nlist)))

    def search(self, queries: np.ndarray, k: int, exclude: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
        M = len(self.keys)
        k_eff = min(k, M)
        out_idx = np.zeros((len(queries), k_eff), dtype=np.int64)
        out_sc = np.full((len(queries), k_eff), -np.inf)
        probe = np.argsort(-(queries @ self.centroids.T), axis=1, kind="stable")[:, :self.nprobe]
        for i, q in enumerate(queries):
            cand = np.sort(np.concatenate([self.lists[c] for c in probe[i]]))
            if exclude is not None and exclude[i] >= 0:
                cand = cand[cand != exclude[i]]
            if len(cand) < k_eff:
                cand = np.arange(M) if exclude is None or exclude[i] < 0 else np.delete(np.arange(M), exclude[i])
            sc = (self.keys[cand] @ q).astype(np.float64)[None]
            top = _sorted_topk(sc, k_eff)[0][:k_eff]
            n = len(top)
            out_idx[i, :n] = cand[top]
            out_sc[i, :n] = sc[0, top]
        return out_idx, out_sc


def knn_lookup(queries, keys: np.ndarray, knn_k: int, mode: str = "exact",
               exclude: np.ndarray | None = None, index: ApproxIndex | None = None) -> RetrievalResult:
    """Top-``knn_k`` keys by inner product for each query row.

    ``exclude`` optionally gives, per query, one key row that must not be
    returned (-1 for none).  ``approx`` falls back to the exact scan for banks
    of at most ``APPROX_EXACT_LIMIT`` keys.
    """
    if knn_k < 1:
        raise RetrievalError(f"knn_k must be >= 1, got {knn_k}")
    q = np.asarray(queries.data if isinstance(queries, Tensor) else queries)
    keys = np.asarray(keys)
    if len(keys) == 0:
        raise RetrievalError("retrieval from an empty bank")
    if q.shape[-1] != keys.shape[-1]:
        raise RetrievalError(f"query dim {q.shape[-1]} does not match key dim {keys.shape[-1]}")
    if mode not in ("exact", "approx"):
        raise RetrievalError(f"unknown retrieval mode {mode!r}")
    q2 = q.reshape(-1, q.shape[-1])
    k_eff = min(knn_k, len(keys))
    if mode == "approx" and len(keys) > APPROX_EXACT_LIMIT:
        idx = index if index is not None else ApproxIndex(keys)
        top, top_sc = idx.search(q2.astype(np.float32), k_eff, exclude)
    else:
        scores = q2.astype(np.float64) @ keys.astype(np.float64).T
        if exclude is not None:
            rows = np.nonzero(exclude >= 0)[0]
            scores[rows, exclude[rows]] = -np.inf
        top = _sorted_topk(scores, k_eff)[:, :k_eff]
        top_sc = np.take_along_axis(scores, top, axis=1)
    shape = q.shape[:-1] + (k_eff,)
    return RetrievalResult(top.reshape(shape), top_sc.reshape(shape), np.isfinite(top_sc).reshape(shape))


# ---------------------------------------------------------------- attention pieces

def split_heads(x: Tensor, num_heads: int) -> Tensor:
    B, N, D = x.shape
    return T.transpose(T.reshape(x, (B, N, num_heads, D // num_heads)), (0, 2, 1, 3))


def merge_heads(x: Tensor) -> Tensor:
    B, H, N, d = x.shape
    return T.reshape(T.transpose(x, (0, 2, 1, 3)), (B, N, H * d))


def project_qkv(x: Tensor, p: dict, num_heads: int) -> tuple[Tensor, Tensor, Tensor]:
    D = x.shape[-1]
    qkv = T.matmul(x, p["qkv.w"]) + p["qkv.b"]
    q = split_heads(qkv[:, :, :D], num_heads)
    k = split_heads(qkv[:, :, D:2 * D], num_heads)
    v = split_heads(qkv[:, :, 2 * D:], num_heads)
    return q, k, v


def local_attention(q: Tensor, k: Tensor, v: Tensor) -> tuple[Tensor, Tensor]:
    """Scaled dot-product attention per head; returns (output, attention weights)."""
    scale = 1.0 / math.sqrt(q.shape[-1])
    attn = T.softmax(T.matmul(q, T.transpose(k, (0, 1, 3, 2))) * scale, axis=-1)
    return T.matmul(attn, v), attn


def memory_attention(queries: Tensor, retrieved: RetrievalResult) -> Tensor:
    """Softmax(q . k / sqrt(d)) over each query's retrieved keys, applied to their values.

    ``queries`` has shape ``(..., d)``; retrieved keys/values ``(..., k, d)``.
    Retrieved tensors enter as constants, so no gradient reaches the bank.
    """
    d = queries.shape[-1]
    lead = queries.shape[:-1]
    kk = retrieved.keys.shape[-2]
    keys_t = Tensor(np.swapaxes(retrieved.keys, -1, -2), dtype=queries.dtype)
    vals = Tensor(retrieved.values, dtype=queries.dtype)
    q = T.reshape(queries, lead + (1, d))
    logits = T.matmul(q, keys_t) * (1.0 / math.sqrt(d))
    valid = retrieved.valid.reshape(lead + (1, kk))
    # rows with nothing valid are given one dummy slot; callers discard them
    safe = valid | ~valid.any(axis=-1, keepdims=True)
    attn = T.softmax(logits, axis=-1, mask=safe)
    return T.reshape(T.matmul(attn, vals), lead + (d,))


def gate_values(gate: Tensor) -> Tensor:
    return T.sigmoid(gate)


def gated_fuse(local: Tensor, memory: Tensor, gate: Tensor, head: int | None = None) -> Tensor:
    """``g * memory + (1 - g) * local`` with ``g = sigmoid(gate bias)``.

    With ``head`` given, ``gate`` is the per-head bias vector and only that
    head's scalar is used; otherwise ``gate`` must broadcast against the inputs.
    """
    if local.shape != memory.shape:
        raise T.DimensionError(f"gated_fuse: local {local.shape} vs memory {memory.shape}")
    g = gate_values(gate)
    if head is not None:
        g = g[head]
    return g * memory + (1.0 - g) * local


# ---------------------------------------------------------------- the block

def bank_is_empty(bank) -> bool:
    return bank is None or len(bank) == 0


def check_bank_compatible(bank, num_heads: int, head_dim: int) -> None:
    if bank is None:
        return
    if bank.num_heads != num_heads or bank.head_dim != head_dim:
        raise CompatibilityError(
            f"bank has {bank.num_heads} heads x dim {bank.head_dim}, model expects {num_heads} x {head_dim}")


def retrieve_heads(q: np.ndarray, bank, knn_k: int, sample_ids=None, mode: str = "exact") -> list:
    """Per-head retrieval for queries ``q[B, H, T, d]``; None for heads with no facts."""
    B, H, Tn, d = q.shape
    results = []
    for h in range(H):
        if bank.head_size(h) == 0:
            results.append(None)
            continue
        _, keys, values = bank.head_arrays(h)
        exclude = None
        if sample_ids is not None:
            rows = [bank.row_of(s, h) for s in sample_ids]
            per_sample = np.array([-1 if r is None else r for r in rows], dtype=np.int64)
            exclude = np.repeat(per_sample, Tn)
        index = None
        if mode == "approx" and len(keys) > APPROX_EXACT_LIMIT:
            index = bank.cached_index(h, ApproxIndex)
        res = knn_lookup(q[:, h].reshape(B * Tn, d), keys, knn_k, mode, exclude, index)
        kk = res.indices.shape[-1]
        res = RetrievalResult(res.indices.reshape(B, Tn, kk), res.scores.reshape(B, Tn, kk),
                              res.valid.reshape(B, Tn, kk))
        results.append(res.gather(keys, values))
    return results


def emit_facts(k: np.ndarray, v: np.ndarray, sample_ids, cache_token: str = "cls") -> list[AttentionFact]:
    """One fact per (sample, head) from per-head keys/values ``[B, H, T, d]``."""
    if cache_token == "cls":
        ks, vs = k[:, :, 0], v[:, :, 0]
    elif cache_token == "mean":
        ks, vs = k.mean(axis=2), v.mean(axis=2)
    else:
        raise ValueError(f"unknown cache_token {cache_token!r}")
    B, H = ks.shape[:2]
    return [AttentionFact(int(sample_ids[b]), h, ks[b, h].astype(np.float32), vs[b, h].astype(np.float32))
            for b in range(B) for h in range(H)]


def movit_block_forward(x: Tensor, p: dict, num_heads: int, bank=None, mode: str = "train",
                        knn_k: int = 32, sample_ids=None, knn_mode: str = "exact",
                        cache_token: str = "cls"):
    """MoViT attention sub-layer.

    Returns ``(out, heads, facts)``: the projected output, the per-head
    ``(q, k, v)`` tensors and, in train mode, one detached fact per sample
    and head.  Training retrieval skips each sample's own stored facts.  An
    empty bank leaves the memory branch out entirely.
    """
    if mode not in ("train", "infer"):
        raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
    B = x.shape[0]
    if sample_ids is None:
        sample_ids = np.arange(B)
    q, k, v = project_qkv(x, p, num_heads)
    local, _ = local_attention(q, k, v)
    fused = local
    if not bank_is_empty(bank):
        check_bank_compatible(bank, num_heads, q.shape[-1])
        exclude_ids = sample_ids if mode == "train" else None
        results = retrieve_heads(q.data, bank, knn_k, exclude_ids, knn_mode)
        fused = _fuse_with_memory(q, local, results, p["gate"])
    out = T.matmul(merge_heads(fused), p["proj.w"]) + p["proj.b"]
    facts = emit_facts(k.data, v.data, sample_ids, cache_token) if mode == "train" else []
    return out, (q, k, v), facts


def _fuse_with_memory(q: Tensor, local: Tensor, results: list, gate: Tensor) -> Tensor:
    B, H, Tn, d = q.shape
    kk = max((r.indices.shape[-1] for r in results if r is not None), default=1)
    keys = np.zeros((B, H, Tn, kk, d), dtype=q.dtype)
    values = np.zeros((B, H, Tn, kk, d), dtype=q.dtype)
    valid = np.zeros((B, H, Tn, kk), dtype=bool)
    for h, r in enumerate(results):
        if r is None:
            continue
        n = r.indices.shape[-1]
        keys[:, h, :, :n] = r.keys
        values[:, h, :, :n] = r.values
        valid[:, h, :, :n] = r.valid
    memory = memory_attention(q, RetrievalResult(None, None, valid, keys, values))
    has_memory = valid.any(axis=-1, keepdims=True)
    memory = T.where(has_memory, memory, local)
    g = T.reshape(gate_values(gate), (1, H, 1, 1))
    return g * memory + (1.0 - g) * local
