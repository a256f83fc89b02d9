import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from movit import tensor as T
from movit.attention import (APPROX_EXACT_LIMIT, CompatibilityError, RetrievalError, gated_fuse, knn_lookup,
                             movit_block_forward)
from movit.memory import AttentionFact, MemoryBank, cache_or_update
from movit.pal import PrototypeBank
from movit.tensor import Tensor
from movit.vit import ViTConfig, block_params, init_params, mhsa_forward

from conftest import brute_topk, loop_softmax


class TestKnnLookup:
    def test_single_best(self):
        keys = np.array([[1.0, 0.0], [0.0, 1.0], [0.7, 0.7]])
        res = knn_lookup(np.array([[1.0, 0.1]]), keys, 1)
        assert res.indices.tolist() == [[0]]

    def test_ties_go_to_lower_index(self):
        keys = np.array([[1.0], [2.0], [2.0], [1.0], [2.0]])
        res = knn_lookup(np.array([[1.0]]), keys, 2)
        assert res.indices.tolist() == [[1, 2]]
        res = knn_lookup(np.array([[1.0]]), keys, 4)
        assert res.indices.tolist() == [[1, 2, 4, 0]]

    def test_k_larger_than_bank(self):
        res = knn_lookup(np.ones((1, 2)), np.eye(2), 5)
        assert res.indices.shape == (1, 2)

    def test_exclusion(self):
        keys = np.array([[3.0], [2.0], [1.0]])
        res = knn_lookup(np.array([[1.0], [1.0]]), keys, 2, exclude=np.array([0, -1]))
        assert res.indices.tolist() == [[1, 2], [0, 1]]

    def test_exclusion_leaves_padding(self):
        res = knn_lookup(np.array([[1.0]]), np.array([[1.0], [2.0]]), 2, exclude=np.array([1]))
        assert res.valid.tolist() == [[True, False]]

    @pytest.mark.parametrize("bad", [
        dict(queries=np.ones((1, 2)), keys=np.zeros((0, 2)), knn_k=1),
        dict(queries=np.ones((1, 3)), keys=np.ones((4, 2)), knn_k=1),
        dict(queries=np.ones((1, 2)), keys=np.ones((4, 2)), knn_k=0),
        dict(queries=np.ones((1, 2)), keys=np.ones((4, 2)), knn_k=1, mode="fuzzy"),
    ])
    def test_errors(self, bad):
        with pytest.raises(RetrievalError):
            knn_lookup(**bad)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(1, 60), st.integers(1, 10), st.integers(0, 2 ** 31))
    def test_matches_brute_force_with_ties(self, M, k, seed):
        r = np.random.default_rng(seed)
        keys = r.integers(-2, 3, size=(M, 3)).astype(np.float32)
        q = r.integers(-2, 3, size=(4, 3)).astype(np.float32)
        res = knn_lookup(q, keys, k)
        for i in range(4):
            assert res.indices[i].tolist() == brute_topk(q[i], keys, k)

    def test_approx_is_exact_below_threshold(self, rng):
        keys = rng.normal(size=(APPROX_EXACT_LIMIT, 4)).astype(np.float32)
        q = rng.normal(size=(5, 4)).astype(np.float32)
        a, e = knn_lookup(q, keys, 8, mode="approx"), knn_lookup(q, keys, 8)
        np.testing.assert_array_equal(a.indices, e.indices)

    def test_approx_recall_above_threshold(self, rng):
        keys = rng.normal(size=(APPROX_EXACT_LIMIT + 500, 8)).astype(np.float32)
        q = rng.normal(size=(20, 8)).astype(np.float32)
        a, e = knn_lookup(q, keys, 10, mode="approx"), knn_lookup(q, keys, 10)
        recall = np.mean([len(set(x) & set(y)) / 10 for x, y in zip(a.indices.tolist(), e.indices.tolist())])
        assert recall >= 0.6
        # whatever is returned is ranked correctly
        sc = np.take_along_axis(q @ keys.T, a.indices, axis=1)
        assert np.all(np.diff(sc, axis=1) <= 1e-6)


def make_bank(rng, num_heads, head_dim, n=6):
    bank = MemoryBank(head_dim, num_heads)
    for sid in range(100, 100 + n):
        for h in range(num_heads):
            cache_or_update(bank, AttentionFact(sid, h, rng.normal(size=head_dim).astype(np.float32),
                                                rng.normal(size=head_dim).astype(np.float32)), 1.0, 1.0)
    return bank


@pytest.fixture
def block(rng):
    cfg = ViTConfig(image_size=8, patch_size=4, embed_dim=12, depth=1, num_heads=3, num_classes=2, movit_layer=0)
    p = block_params(init_params(cfg, seed=3, dtype=np.float64), 0)
    p["qkv.w"] = Tensor(rng.normal(size=p["qkv.w"].shape) * 0.5, requires_grad=True, dtype=np.float64)
    x = Tensor(rng.normal(size=(2, 5, 12)), dtype=np.float64)
    return cfg, p, x, make_bank(rng, 3, 4)


def with_gate(p, value):
    q = dict(p)
    q["gate"] = Tensor(np.full(3, value), requires_grad=True, dtype=np.float64)
    return q


class TestMovitBlock:
    def test_empty_bank_is_vanilla(self, block):
        cfg, p, x, _ = block
        out, _, _ = movit_block_forward(x, p, 3, bank=MemoryBank(4, 3))
        np.testing.assert_array_equal(out.data, mhsa_forward(x, p, 3)[0].data)

    def test_closed_gate_is_vanilla(self, block):
        cfg, p, x, bank = block
        out, _, _ = movit_block_forward(x, with_gate(p, -20.0), 3, bank=bank, mode="infer")
        np.testing.assert_allclose(out.data, mhsa_forward(x, p, 3)[0].data, atol=1e-5)

    def test_open_gate_ignores_local_values(self, block, rng):
        cfg, p, x, bank = block
        p = with_gate(p, 20.0)
        out, _, _ = movit_block_forward(x, p, 3, bank=bank, mode="infer")
        w = p["qkv.w"].data.copy()
        w[:, 24:] += rng.normal(size=(12, 12))
        out2, _, _ = movit_block_forward(x, dict(p, **{"qkv.w": Tensor(w, dtype=np.float64)}), 3, bank=bank,
                                         mode="infer")
        np.testing.assert_allclose(out.data, out2.data, atol=1e-5)

    def test_memory_branch_matches_loop_oracle(self, block):
        cfg, p, x, bank = block
        k = 3
        out, (q, _, _), _ = movit_block_forward(x, with_gate(p, 50.0), 3, bank=bank, mode="infer", knn_k=k)
        merged = np.zeros((2, 5, 12))
        for h in range(3):
            _, keys, vals = bank.head_arrays(h)
            for b in range(2):
                for t in range(5):
                    qv = q.data[b, h, t]
                    top = brute_topk(qv, keys, k)
                    w = loop_softmax([float(qv @ keys[j]) / math.sqrt(4) for j in top])
                    merged[b, t, 4 * h:4 * h + 4] = sum(wi * vals[j] for wi, j in zip(w, top))
        expected = merged @ p["proj.w"].data + p["proj.b"].data
        np.testing.assert_allclose(out.data, expected, atol=1e-6)

    def test_zero_gate_averages_branches(self, block):
        cfg, p, x, bank = block
        mem, _, _ = movit_block_forward(x, with_gate(p, 50.0), 3, bank=bank, mode="infer")
        loc, _, _ = movit_block_forward(x, with_gate(p, -50.0), 3, bank=bank, mode="infer")
        mid, _, _ = movit_block_forward(x, with_gate(p, 0.0), 3, bank=bank, mode="infer")
        np.testing.assert_allclose(mid.data, 0.5 * (mem.data + loc.data), atol=1e-6)

    def test_train_mode_excludes_own_fact(self, rng):
        # a single stored fact belonging to the same sample leaves nothing to retrieve
        cfg = ViTConfig(image_size=8, patch_size=4, embed_dim=12, depth=1, num_heads=3, num_classes=2, movit_layer=0)
        p = with_gate(block_params(init_params(cfg, seed=0, dtype=np.float64), 0), 20.0)
        x = Tensor(rng.normal(size=(1, 5, 12)), dtype=np.float64)
        bank = MemoryBank(4, 3)
        for h in range(3):
            cache_or_update(bank, AttentionFact(7, h, np.ones(4, np.float32), 100 * np.ones(4, np.float32)), 1.0, 1.0)
        out, _, _ = movit_block_forward(x, p, 3, bank=bank, mode="train", sample_ids=[7])
        np.testing.assert_allclose(out.data, mhsa_forward(x, p, 3)[0].data, atol=1e-12)
        other, _, _ = movit_block_forward(x, p, 3, bank=bank, mode="train", sample_ids=[8])
        assert not np.allclose(other.data, out.data)

    def test_facts_per_sample_and_head(self, block):
        cfg, p, x, bank = block
        _, (_, k, v), facts = movit_block_forward(x, with_gate(p, 0.0), 3, bank=bank, sample_ids=[11, 12])
        assert len(facts) == 6
        assert {(f.sample_id, f.head) for f in facts} == {(s, h) for s in (11, 12) for h in range(3)}
        f = next(f for f in facts if f.sample_id == 12 and f.head == 2)
        np.testing.assert_allclose(f.key, k.data[1, 2, 0], rtol=1e-6)
        np.testing.assert_allclose(f.value, v.data[1, 2, 0], rtol=1e-6)

    def test_mean_cache_token(self, block):
        cfg, p, x, bank = block
        _, (_, k, _), facts = movit_block_forward(x, with_gate(p, 0.0), 3, bank=bank, cache_token="mean")
        np.testing.assert_allclose(facts[0].key, k.data[0, 0].mean(axis=0), rtol=1e-5)

    def test_infer_emits_nothing(self, block):
        cfg, p, x, bank = block
        assert movit_block_forward(x, with_gate(p, 0.0), 3, bank=bank, mode="infer")[2] == []

    def test_incompatible_bank(self, block, rng):
        cfg, p, x, _ = block
        with pytest.raises(CompatibilityError):
            movit_block_forward(x, with_gate(p, 0.0), 3, bank=make_bank(rng, 6, 2))

    def test_prototype_bank_readable(self, block, rng):
        cfg, p, x, _ = block
        pb = PrototypeBank(4, 3, 0.5, [rng.normal(size=(2, 4)).astype(np.float32) for _ in range(3)],
                           [rng.normal(size=(2, 4)).astype(np.float32) for _ in range(3)],
                           [np.arange(2) for _ in range(3)])
        out, _, _ = movit_block_forward(x, with_gate(p, 0.0), 3, bank=pb, mode="infer")
        assert out.shape == (2, 5, 12)

    def test_gradients_reach_gate_not_bank(self, block):
        cfg, p, x, bank = block
        p = with_gate(p, 0.3)
        before = bank.checksum()
        out, _, _ = movit_block_forward(x, p, 3, bank=bank, mode="infer")
        loss = (out * out).sum()
        record = T.trace(loss)
        loss.backward()
        assert p["gate"].grad is not None and np.any(p["gate"].grad != 0)
        for h in range(3):
            _, keys, values = bank.head_arrays(h)
            assert not any(np.shares_memory(n.data, keys) or np.shares_memory(n.data, values) for n in record)
        assert bank.checksum() == before


def test_gated_fuse_single_head():
    local = Tensor(np.zeros(3))
    memory = Tensor(np.ones(3))
    out = gated_fuse(local, memory, Tensor([0.0, 100.0]), head=1)
    np.testing.assert_allclose(out.data, np.ones(3))
