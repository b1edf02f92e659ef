"""Candidate-set construction: which bank indices are eligible neighbors.

Four modes: unconstrained (the whole bank), label-constrained (same stored
label as the query), semi-supervised (label-constrained over a labeled bank
when the query has a label, otherwise the whole unlabeled bank), and
cross-modal (indices of the top-n neighbors of the query's constraint-view
embedding in the aligned constraint bank).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .membank import AlignedBankPair, MemoryBank


class EmptyCandidateSet(Exception):
    """No eligible neighbors; callers fall back to a query-only step."""


@dataclass
class Unconstrained:
    pass


@dataclass
class LabelConstrained:
    pass


@dataclass
class SemiSupervised:
    labeled_bank: MemoryBank
    unlabeled_bank: MemoryBank

    def __post_init__(self):
        if self.labeled_bank.capacity != self.unlabeled_bank.capacity:
            raise ValueError("semi-supervised banks must have equal capacity")


@dataclass
class CrossModal:
    n: int

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("cross-modal n must be >= 1")


ConstraintMode = Unconstrained | LabelConstrained | SemiSupervised | CrossModal


def _label_indices(bank: MemoryBank, label: int) -> np.ndarray:
    return np.nonzero(bank.labels() == label)[0]


def candidate_set(mode: ConstraintMode, bank,
                  query_label: int | None = None,
                  query_constraint_embedding: np.ndarray | None = None,
                  ) -> tuple[MemoryBank, np.ndarray]:
    """Return (bank searched, candidate indices into it).

    Raises EmptyCandidateSet when no index qualifies.
    """
    if isinstance(mode, Unconstrained):
        if len(bank) == 0:
            raise EmptyCandidateSet
        return bank, np.arange(len(bank), dtype=np.intp)

    if isinstance(mode, LabelConstrained):
        if query_label is None:
            raise ValueError("label-constrained search needs a query label")
        idx = _label_indices(bank, query_label)
        if idx.size == 0:
            raise EmptyCandidateSet
        return bank, idx

    if isinstance(mode, SemiSupervised):
        if query_label is not None:
            idx = _label_indices(mode.labeled_bank, query_label)
            if idx.size == 0:
                raise EmptyCandidateSet
            return mode.labeled_bank, idx
        if len(mode.unlabeled_bank) == 0:
            raise EmptyCandidateSet
        return mode.unlabeled_bank, np.arange(len(mode.unlabeled_bank), dtype=np.intp)

    if isinstance(mode, CrossModal):
        if query_constraint_embedding is None:
            raise ValueError("cross-modal search needs a constraint embedding")
        if not isinstance(bank, AlignedBankPair):
            raise TypeError("cross-modal mode needs an AlignedBankPair")
        if len(bank.bank_a) == 0:
            raise EmptyCandidateSet
        q = np.asarray(query_constraint_embedding, dtype=np.float64).ravel()
        sims = bank.bank_a.embedding_matrix() @ q
        n = min(mode.n, sims.size)
        # stable ordering: similarity descending, older entry wins ties
        order = np.lexsort((np.arange(sims.size), -sims))
        return bank.bank_b, np.sort(order[:n]).astype(np.intp)

    raise TypeError(f"unknown constraint mode: {mode!r}")
