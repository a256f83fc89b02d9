import math
import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from movit.memory import (AttentionFact, ContractError, FormatError, MemoryBank, ScheduleState, alpha_schedule,
                          bank_size, cache_or_update, load_bank, save_bank)

from conftest import scalar_ema


def fact(sid, head, key, value=None):
    key = np.asarray(key, dtype=np.float32)
    return AttentionFact(sid, head, key, key if value is None else np.asarray(value, dtype=np.float32))


class TestAlphaSchedule:
    def test_start_of_ramp(self):
        s = ScheduleState(alpha0=0.01, t0=10, total_epochs=100)
        expected = 1 - 0.01 * math.exp(-10)
        assert abs(alpha_schedule(0, s) - expected) < 1e-15
        assert abs(alpha_schedule(0, s) - 0.99999955) < 1e-8

    def test_at_and_after_t0(self):
        s = ScheduleState(alpha0=0.01, t0=10, total_epochs=100)
        assert alpha_schedule(10, s) == pytest.approx(0.99, abs=1e-15)
        assert alpha_schedule(11, s) == 0.99
        assert alpha_schedule(99, s) == 0.99

    def test_monotone_non_increasing_on_ramp(self):
        s = ScheduleState(alpha0=0.05, t0=20, total_epochs=40)
        vals = [alpha_schedule(t, s) for t in np.linspace(0, 20, 201)]
        assert all(b <= a + 1e-15 for a, b in zip(vals, vals[1:]))

    def test_t0_rounding(self):
        assert ScheduleState.from_fraction(50).t0 == 5
        assert ScheduleState.from_fraction(3).t0 == 1
        assert ScheduleState.from_fraction(1).t0 == 1

    @pytest.mark.parametrize("kw", [dict(alpha0=0.0), dict(alpha0=1.0), dict(t0=0), dict(t0=11, total_epochs=10)])
    def test_invalid_state(self, kw):
        with pytest.raises(ContractError):
            ScheduleState(**kw)

    def test_negative_epoch(self):
        with pytest.raises(ContractError):
            alpha_schedule(-1, ScheduleState())


class TestCacheOrUpdate:
    def test_insert_then_blend(self):
        bank = MemoryBank(1, 1)
        cache_or_update(bank, fact(7, 0, [1.0]), 0.5, 0.5)
        cache_or_update(bank, fact(7, 0, [3.0]), 0.5, 0.5)
        assert bank.get(7, 0).key[0] == pytest.approx(2.0)

    def test_three_updates_match_oracle(self):
        bank = MemoryBank(1, 1)
        cache_or_update(bank, fact(0, 0, [1.0]), 0.9, 0.9)
        for g in (2.0, 3.0, 4.0):
            cache_or_update(bank, fact(0, 0, [g]), 0.9, 0.9)
        expected = scalar_ema(1.0, [2.0, 3.0, 4.0], [0.9] * 3)
        assert expected == pytest.approx(3.889, abs=1e-12)
        assert bank.get(0, 0).key[0] == pytest.approx(expected, abs=1e-6)

    def test_inverted_orientation(self):
        bank = MemoryBank(1, 1, ema_orientation="inverted")
        cache_or_update(bank, fact(0, 0, [0.0]), 0.9, 0.9)
        cache_or_update(bank, fact(0, 0, [10.0]), 0.9, 0.9)
        assert bank.get(0, 0).key[0] == pytest.approx(1.0, abs=1e-6)

    def test_keys_and_values_use_own_alpha(self):
        bank = MemoryBank(1, 1)
        cache_or_update(bank, fact(0, 0, [0.0], [0.0]), 1.0, 1.0)
        cache_or_update(bank, fact(0, 0, [1.0], [1.0]), 0.25, 0.75)
        got = bank.get(0, 0)
        assert (got.key[0], got.value[0]) == pytest.approx((0.25, 0.75))

    def test_alpha_one_replaces(self):
        bank = MemoryBank(2, 1)
        cache_or_update(bank, fact(0, 0, [1.0, 1.0]), 1.0, 1.0)
        cache_or_update(bank, fact(0, 0, [5.0, -2.0]), 1.0, 1.0)
        np.testing.assert_array_equal(bank.get(0, 0).key, [5.0, -2.0])

    def test_size_grows_only_on_new_pairs(self):
        bank = MemoryBank(2, 3)
        for rep in range(3):
            for sid in range(5):
                for h in range(3):
                    cache_or_update(bank, fact(sid, h, [sid, h]), 0.5, 0.5)
            assert bank_size(bank) == 15

    @pytest.mark.parametrize("bad", [
        lambda: fact(0, 0, [1.0, 2.0, 3.0]),
        lambda: fact(0, 5, [1.0, 2.0]),
    ])
    def test_contract_violations(self, bad):
        with pytest.raises(ContractError):
            cache_or_update(MemoryBank(2, 2), bad(), 0.5, 0.5)

    @pytest.mark.parametrize("alpha", [0.0, -0.1, 1.5])
    def test_alpha_out_of_range(self, alpha):
        with pytest.raises(ContractError):
            cache_or_update(MemoryBank(1, 1), fact(0, 0, [1.0]), alpha, 0.5)

    @settings(max_examples=40, deadline=None)
    @given(st.lists(st.floats(-1, 1), min_size=1, max_size=30), st.floats(0.01, 1.0))
    def test_matches_scalar_oracle(self, gens, alpha):
        bank = MemoryBank(1, 1)
        cache_or_update(bank, fact(3, 0, [0.5]), 1.0, 1.0)
        for g in gens:
            cache_or_update(bank, fact(3, 0, [g]), alpha, alpha)
        assert bank.get(3, 0).key[0] == pytest.approx(scalar_ema(0.5, gens, [alpha] * len(gens)), abs=1e-6)


def random_bank(rng, head_dim=4, num_heads=2, n=10):
    bank = MemoryBank(head_dim, num_heads)
    for sid in rng.permutation(1000)[:n]:
        for h in range(num_heads):
            cache_or_update(bank, AttentionFact(int(sid), h, rng.normal(size=head_dim).astype(np.float32),
                                                rng.normal(size=head_dim).astype(np.float32)), 1.0, 1.0)
    return bank


class TestPersistence:
    def test_round_trip(self, tmp_path, rng):
        bank = random_bank(rng)
        save_bank(bank, tmp_path / "b.movb")
        back = load_bank(tmp_path / "b.movb")
        assert back == bank
        assert back.checksum() == bank.checksum()

    def test_empty_round_trip(self, tmp_path):
        bank = MemoryBank(3, 2)
        save_bank(bank, tmp_path / "e.movb")
        assert len(load_bank(tmp_path / "e.movb")) == 0

    def test_header_layout(self, tmp_path, rng):
        bank = random_bank(rng, head_dim=4, num_heads=2, n=3)
        save_bank(bank, tmp_path / "b.movb")
        raw = (tmp_path / "b.movb").read_bytes()
        magic, version, d, h, count = struct.unpack_from("<4sIIIQ", raw)
        assert (magic, d, h, count) == (b"MOVB", 4, 2, 6)
        assert len(raw) == 24 + 6 * (8 + 4 + 2 * 4 * 4)

    def test_bad_magic(self, tmp_path, rng):
        save_bank(random_bank(rng), tmp_path / "b.movb")
        raw = bytearray((tmp_path / "b.movb").read_bytes())
        raw[:4] = b"XXXX"
        (tmp_path / "b.movb").write_bytes(bytes(raw))
        with pytest.raises(FormatError) as err:
            load_bank(tmp_path / "b.movb")
        assert err.value.offset == 0

    def test_truncation_reports_offset(self, tmp_path, rng):
        save_bank(random_bank(rng), tmp_path / "b.movb")
        raw = (tmp_path / "b.movb").read_bytes()
        (tmp_path / "t.movb").write_bytes(raw[:-5])
        with pytest.raises(FormatError) as err:
            load_bank(tmp_path / "t.movb")
        assert err.value.offset is not None and 24 <= err.value.offset <= len(raw) - 5

    def test_trailing_bytes_rejected(self, tmp_path, rng):
        save_bank(random_bank(rng), tmp_path / "b.movb")
        (tmp_path / "b.movb").write_bytes((tmp_path / "b.movb").read_bytes() + b"\0")
        with pytest.raises(FormatError):
            load_bank(tmp_path / "b.movb")

    def test_head_out_of_range(self, tmp_path, rng):
        save_bank(random_bank(rng, num_heads=1, n=1), tmp_path / "b.movb")
        raw = bytearray((tmp_path / "b.movb").read_bytes())
        raw[24 + 8:24 + 12] = struct.pack("<I", 9)
        (tmp_path / "b.movb").write_bytes(bytes(raw))
        with pytest.raises(FormatError):
            load_bank(tmp_path / "b.movb")

    def test_checksum_ignores_insertion_order(self, rng):
        keys = rng.normal(size=(4, 2)).astype(np.float32)
        a, b = MemoryBank(2, 1), MemoryBank(2, 1)
        for i in range(4):
            cache_or_update(a, fact(i, 0, keys[i]), 1.0, 1.0)
        for i in reversed(range(4)):
            cache_or_update(b, fact(i, 0, keys[i]), 1.0, 1.0)
        assert a.checksum() == b.checksum()


def test_head_views_are_read_only(rng):
    bank = random_bank(rng)
    _, keys, _ = bank.head_arrays(0)
    with pytest.raises(ValueError):
        keys[0, 0] = 1.0
