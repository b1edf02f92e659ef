"""Fixed-capacity FIFO memory bank with constrained exact top-k search."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

UNIT_NORM_TOL = 1e-6


class BankError(ValueError):
    pass


@dataclass
class BankEntry:
    embedding: np.ndarray
    label: int | None
    sample_id: int
    insert_seq: int = -1
    true_label: int | None = None

    def __post_init__(self):
        self.embedding = np.asarray(self.embedding, dtype=np.float64).ravel()
        if self.true_label is None:
            self.true_label = self.label


class MemoryBank:
    """FIFO queue of unit-norm target embeddings; oldest entries evicted."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise BankError("capacity must be >= 1")
        self.capacity = capacity
        self.entries: list[BankEntry] = []
        self._next_seq = 0
        self._matrix: np.ndarray | None = None

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def push(self, batch: list[BankEntry]):
        for e in batch:
            norm = np.linalg.norm(e.embedding)
            if abs(norm - 1.0) > UNIT_NORM_TOL:
                raise BankError(
                    f"entry for sample {e.sample_id} is not unit-norm ({norm:.6g})")
            e.insert_seq = self._next_seq
            self._next_seq += 1
            self.entries.append(e)
        if len(self.entries) > self.capacity:
            del self.entries[:len(self.entries) - self.capacity]
        self._matrix = None

    def embedding_matrix(self) -> np.ndarray:
        if self._matrix is None:
            if not self.entries:
                raise BankError("bank is empty")
            self._matrix = np.stack([e.embedding for e in self.entries])
        return self._matrix

    def labels(self) -> np.ndarray:
        return np.array([-1 if e.label is None else e.label for e in self.entries])

    def dump_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            dim = len(self.entries[0].embedding) if self.entries else 0
            w.writerow(["sample_id", "insert_seq", "label", "true_label"]
                       + [f"e{i}" for i in range(dim)])
            for e in self.entries:
                w.writerow([e.sample_id, e.insert_seq, e.label, e.true_label]
                           + [repr(float(v)) for v in e.embedding])


class AlignedBankPair:
    """Two banks kept index-aligned: constraint modality and trained modality."""

    def __init__(self, capacity: int):
        self.bank_a = MemoryBank(capacity)
        self.bank_b = MemoryBank(capacity)

    def push(self, batch_a: list[BankEntry], batch_b: list[BankEntry]):
        if len(batch_a) != len(batch_b):
            raise BankError("aligned push needs equal batch lengths")
        for ea, eb in zip(batch_a, batch_b):
            if ea.sample_id != eb.sample_id:
                raise BankError(
                    f"aligned push with mismatched sample ids "
                    f"{ea.sample_id} != {eb.sample_id}")
        self.bank_a.push(batch_a)
        self.bank_b.push(batch_b)

    def __len__(self):
        return len(self.bank_b)


def constrained_topk(bank: MemoryBank, query: np.ndarray,
                     candidates, k: int, include_query: bool,
                     query_entry: BankEntry | None = None) -> list[BankEntry]:
    """Exact top-k by cosine similarity inside a candidate index set.

    The query entry, when included, joins the pool before ranking and wins
    similarity ties against bank entries; bank-entry ties go to the older
    insert_seq. k larger than the pool returns the whole pool (top-all).
    """
    if k == 0:
        raise BankError("k must be >= 1")
    if include_query and query_entry is None:
        raise BankError("include_query requires the query entry")
    idx = np.asarray(sorted(candidates), dtype=np.intp)
    if idx.size and (idx[0] < 0 or idx[-1] >= len(bank)):
        raise BankError("candidate index out of range")
    if idx.size == 0 and not include_query:
        raise BankError("no neighbors exist: empty pool and query excluded")

    query = np.asarray(query, dtype=np.float64).ravel()
    # one matrix-vector product for every candidate, query row included:
    # identical vectors then get bitwise-identical sims and the tie rule
    # below actually fires
    members: list[tuple[int, BankEntry]] = []
    if include_query:
        members.append((-1, query_entry))
    members += [(bank.entries[i].insert_seq, bank.entries[i]) for i in idx]
    mat = np.stack([e.embedding for _, e in members])
    sims = mat @ query
    pool = [(float(s), seq, e) for s, (seq, e) in zip(sims, members)]
    pool.sort(key=lambda t: (-t[0], t[1]))
    return [e for _, _, e in pool[:min(k, len(pool))]]


def purity(selected: list[BankEntry], true_label: int) -> float:
    """Fraction of a neighbor set whose true label matches the query's."""
    if not selected:
        raise BankError("purity of an empty set is undefined")
    hits = sum(1 for e in selected if e.true_label == true_label)
    return hits / len(selected)
