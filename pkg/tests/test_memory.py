import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from anticomp.core import DegenerateInputError, InvalidArgumentError, InvalidStateError, normalize
from anticomp.memory import MemoryBank, combined_anchors


def raw_rows(n, dim=8, seed=0):
    return torch.from_numpy(np.random.default_rng(seed).standard_normal((n, dim)))


def unit_rows(n, dim=8, seed=0):
    return normalize(raw_rows(n, dim, seed))


def test_push_under_capacity():
    bank = MemoryBank(4, 8, torch.float64)
    bank.push(raw_rows(2))
    rows = unit_rows(2)
    assert torch.equal(bank.snapshot(), rows)


def test_single_eviction():
    bank = MemoryBank(4, 8, torch.float64)
    for r in raw_rows(5):
        bank.push(r)
    rows = unit_rows(5)
    assert torch.equal(bank.snapshot(), rows[1:])
    assert bank.filled and len(bank) == 4


def run_against_oracle(capacity, batch_sizes, seed):
    bank = MemoryBank(capacity, 4, torch.float64)
    rng = np.random.default_rng(seed)
    pushed = []
    for n in batch_sizes:
        batch = torch.from_numpy(rng.standard_normal((n, 4)))
        bank.push(batch)
        pushed.extend(normalize(batch))
    expected = oracles.fifo_oracle(pushed, capacity)
    snap = bank.snapshot()
    return snap, expected


def test_thousand_random_sequences_match_list_oracle():
    rng = np.random.default_rng(123)
    for seq in range(1000):
        capacity = int(rng.integers(1, 12))
        sizes = rng.integers(0, 2 * capacity + 2, size=int(rng.integers(1, 8))).tolist()
        snap, expected = run_against_oracle(capacity, sizes, seq)
        assert len(snap) == len(expected)
        for got, want in zip(snap, expected):
            assert torch.equal(got, want)
        if len(snap):
            assert torch.all((snap.norm(dim=1) - 1).abs() < 1e-5)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 10), st.lists(st.integers(0, 25), min_size=1, max_size=10), st.integers(0, 2**31))
def test_fifo_property(capacity, sizes, seed):
    snap, expected = run_against_oracle(capacity, sizes, seed)
    assert len(snap) <= capacity
    assert torch.equal(snap, torch.stack(expected)) if expected else len(snap) == 0


def test_push_normalizes_and_rejects_bad_input():
    bank = MemoryBank(8, 3)
    bank.push(torch.tensor([[3.0, 4.0, 0.0]]))
    assert torch.allclose(bank.snapshot(), torch.tensor([[0.6, 0.8, 0.0]]))
    with pytest.raises(InvalidArgumentError):
        bank.push(torch.ones(2, 4))
    with pytest.raises(DegenerateInputError):
        bank.push(torch.zeros(1, 3))


def test_snapshot_shapes_and_isolation():
    bank = MemoryBank(16384, 512)
    assert bank.snapshot().shape == (0, 512)
    bank.push(unit_rows(3, 512).float())
    snap = bank.snapshot()
    assert snap.shape == (3, 512)
    before = snap.clone()
    bank.push(unit_rows(5, 512, seed=1).float())
    assert torch.equal(snap, before)
    snap.zero_()
    assert bank.snapshot().abs().sum() > 0


def test_combined_anchors_order():
    real, fake = MemoryBank(4, 8, torch.float64), MemoryBank(4, 8, torch.float64)
    assert combined_anchors(real, fake).shape == (0, 8)
    real.push(raw_rows(2))
    fake.push(raw_rows(3, seed=5))
    r, f = unit_rows(2), unit_rows(3, seed=5)
    both = combined_anchors(real, fake)
    assert both.shape == (5, 8)
    assert torch.equal(both[:2], r) and torch.equal(both[2:], f)
    with pytest.raises(InvalidArgumentError):
        combined_anchors(real, MemoryBank(4, 9))


def test_full_default_banks_give_32768_anchors():
    rng = np.random.default_rng(0)
    real, fake = MemoryBank().prefill(rng), MemoryBank().prefill(rng)
    assert combined_anchors(real, fake).shape == (32768, 512)


def test_prefill():
    bank = MemoryBank(8, 512).prefill(np.random.default_rng(4))
    assert bank.filled
    assert torch.allclose(bank.snapshot().norm(dim=1), torch.ones(8), atol=1e-5)
    again = MemoryBank(8, 512).prefill(np.random.default_rng(4))
    assert torch.equal(bank.snapshot(), again.snapshot())
    with pytest.raises(InvalidStateError):
        bank.prefill(np.random.default_rng(0))


def test_prefilled_vectors_are_nearly_orthogonal():
    snap = MemoryBank(256, 512).prefill(np.random.default_rng(0)).snapshot()
    cos = snap @ snap.T
    off = cos[~torch.eye(256, dtype=torch.bool)].abs()
    assert off.mean() < 0.2


def test_state_dict_round_trip():
    bank = MemoryBank(5, 8, torch.float64)
    bank.push(unit_rows(7))
    clone = MemoryBank.from_state_dict(bank.state_dict())
    assert torch.equal(clone.snapshot(), bank.snapshot())
    clone.push(unit_rows(1, seed=9))
    bank.push(unit_rows(1, seed=9))
    assert torch.equal(clone.snapshot(), bank.snapshot())
