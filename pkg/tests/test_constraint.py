import numpy as np
import pytest

from cmsf import constraint as cst
from cmsf.membank import AlignedBankPair, BankEntry, MemoryBank


def unit_rows(rng, n, d=4):
    m = rng.standard_normal((n, d))
    return m / np.linalg.norm(m, axis=1, keepdims=True)


def bank_with_labels(rng, labels):
    bank = MemoryBank(len(labels))
    rows = unit_rows(rng, len(labels))
    bank.push([BankEntry(embedding=rows[i], label=l, sample_id=i)
               for i, l in enumerate(labels)])
    return bank


def test_unconstrained_returns_all_indices(rng):
    bank = bank_with_labels(rng, list(range(100)))
    _, idx = cst.candidate_set(cst.Unconstrained(), bank)
    assert np.array_equal(idx, np.arange(100))


def test_label_constrained_matches_definition(rng):
    bank = bank_with_labels(rng, [0, 1, 0, 2])
    _, idx = cst.candidate_set(cst.LabelConstrained(), bank, query_label=0)
    assert np.array_equal(idx, [0, 2])


def test_label_constrained_requires_label(rng):
    bank = bank_with_labels(rng, [0, 1])
    with pytest.raises(ValueError, match="label"):
        cst.candidate_set(cst.LabelConstrained(), bank)


def test_label_missing_from_bank_signals_empty(rng):
    bank = bank_with_labels(rng, [0, 1])
    with pytest.raises(cst.EmptyCandidateSet):
        cst.candidate_set(cst.LabelConstrained(), bank, query_label=7)


def test_semi_supervised_labeled_query_uses_labeled_bank(rng):
    labeled = bank_with_labels(rng, [0, 1, 0])
    unlabeled = bank_with_labels(rng, [5, 6, 7])
    mode = cst.SemiSupervised(labeled, unlabeled)
    sbank, idx = cst.candidate_set(mode, None, query_label=0)
    assert sbank is labeled
    assert np.array_equal(idx, [0, 2])


def test_semi_supervised_unlabeled_query_uses_whole_unlabeled_bank(rng):
    labeled = bank_with_labels(rng, [0, 1, 0, 1])
    unlabeled = bank_with_labels(rng, [9, 9, 9, 9])
    mode = cst.SemiSupervised(labeled, unlabeled)
    sbank, idx = cst.candidate_set(mode, None, query_label=None)
    assert sbank is unlabeled
    assert np.array_equal(idx, np.arange(4))


def test_semi_supervised_requires_equal_capacity(rng):
    with pytest.raises(ValueError, match="capacity"):
        cst.SemiSupervised(MemoryBank(4), MemoryBank(8))


def test_crossmodal_topn_bruteforce(rng):
    pair = AlignedBankPair(8)
    rows_a = unit_rows(rng, 3)
    rows_b = unit_rows(rng, 3)
    # force cosines [0.9, 0.1, 0.8] against the probe direction
    probe = np.zeros(4)
    probe[0] = 1.0
    for i, c in enumerate([0.9, 0.1, 0.8]):
        v = np.zeros(4)
        v[0] = c
        v[1] = np.sqrt(1 - c * c)
        rows_a[i] = v
    pair.push([BankEntry(embedding=rows_a[i], label=None, sample_id=i)
               for i in range(3)],
              [BankEntry(embedding=rows_b[i], label=None, sample_id=i)
               for i in range(3)])
    sbank, idx = cst.candidate_set(cst.CrossModal(n=2), pair,
                                   query_constraint_embedding=probe)
    assert sbank is pair.bank_b
    assert np.array_equal(idx, [0, 2])


def test_crossmodal_matches_bruteforce_on_random_banks(rng):
    pair = AlignedBankPair(32)
    rows_a = unit_rows(rng, 32, 6)
    rows_b = unit_rows(rng, 32, 6)
    pair.push([BankEntry(embedding=rows_a[i], label=None, sample_id=i)
               for i in range(32)],
              [BankEntry(embedding=rows_b[i], label=None, sample_id=i)
               for i in range(32)])
    for _ in range(10):
        q = unit_rows(rng, 1, 6)[0]
        _, idx = cst.candidate_set(cst.CrossModal(n=5), pair,
                                   query_constraint_embedding=q)
        sims = rows_a @ q
        want = np.sort(np.lexsort((np.arange(32), -sims))[:5])
        assert np.array_equal(idx, want)


def test_crossmodal_n_equal_bank_degenerates_to_unconstrained(rng):
    pair = AlignedBankPair(16)
    rows_a = unit_rows(rng, 16)
    rows_b = unit_rows(rng, 16)
    pair.push([BankEntry(embedding=rows_a[i], label=None, sample_id=i)
               for i in range(16)],
              [BankEntry(embedding=rows_b[i], label=None, sample_id=i)
               for i in range(16)])
    _, idx = cst.candidate_set(cst.CrossModal(n=16), pair,
                               query_constraint_embedding=unit_rows(rng, 1)[0])
    assert np.array_equal(idx, np.arange(16))


def test_crossmodal_requires_embedding(rng):
    pair = AlignedBankPair(4)
    with pytest.raises(ValueError, match="constraint embedding"):
        cst.candidate_set(cst.CrossModal(n=1), pair)


def test_crossmodal_rejects_n_below_one():
    with pytest.raises(ValueError):
        cst.CrossModal(n=0)


def test_all_modes_return_valid_unique_indices(rng):
    bank = bank_with_labels(rng, [0, 1, 0, 1, 2, 2, 0])
    for mode, kwargs in [(cst.Unconstrained(), {}),
                         (cst.LabelConstrained(), {"query_label": 0})]:
        _, idx = cst.candidate_set(mode, bank, **kwargs)
        assert len(set(idx.tolist())) == idx.size
        assert idx.min() >= 0 and idx.max() < len(bank)


def test_label_constrained_pool_purity_is_one_with_clean_labels(rng):
    bank = bank_with_labels(rng, [0, 1, 0, 1])
    _, idx = cst.candidate_set(cst.LabelConstrained(), bank, query_label=1)
    assert all(bank.entries[i].label == 1 for i in idx)
