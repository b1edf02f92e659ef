"""Frozen-feature evaluation: kNN accuracy, linear probe, recall@1, and
neighbor-purity diagnostics."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import constraint as cst
from . import numkit
from .datagen import LabeledDataset
from .encoder import EncoderPair
from .membank import BankEntry, MemoryBank, constrained_topk, purity
from .numkit import SgdOptimizer, Tape, Tensor


def embed_dataset(pair: EncoderPair, ds: LabeledDataset) -> np.ndarray:
    """Unit-norm target-encoder embeddings of every sample."""
    return pair.forward_target(ds.features)


def knn_classify(train_embeds: np.ndarray, train_labels: np.ndarray,
                 test_embeds: np.ndarray, test_labels: np.ndarray,
                 k_eval: int = 10) -> float:
    """Majority vote over the k cosine-nearest train points.

    Neighbor-similarity ties go to the smaller train index; vote ties go
    to the smaller class id.
    """
    if k_eval > len(train_embeds):
        raise ValueError(f"k_eval={k_eval} exceeds train size {len(train_embeds)}")
    sims = np.asarray(test_embeds) @ np.asarray(train_embeds).T
    n_train = sims.shape[1]
    correct = 0
    for i in range(sims.shape[0]):
        order = np.lexsort((np.arange(n_train), -sims[i]))
        votes = np.bincount(train_labels[order[:k_eval]])
        if votes.argmax() == test_labels[i]:
            correct += 1
    return correct / sims.shape[0]


@dataclass
class ProbeConfig:
    epochs: int = 40
    lr0: float = 0.5
    batch_size: int = 64
    weight_decay: float = 1e-4
    seed: int = 0


def _standardize(embeds: np.ndarray, mean: np.ndarray,
                 scale: np.ndarray) -> np.ndarray:
    return (embeds - mean) / scale


def linear_probe(train_embeds: np.ndarray, train_labels: np.ndarray,
                 test_embeds: np.ndarray, test_labels: np.ndarray,
                 config: ProbeConfig | None = None) -> float:
    """Single linear layer on standardized unit-norm features.

    Features are l2-normalized, then shifted/scaled to zero mean and unit
    variance per dimension using train-split statistics only.
    """
    config = config or ProbeConfig()
    classes = int(max(train_labels.max(), test_labels.max())) + 1
    if classes < 2:
        raise ValueError("linear probe needs at least 2 classes")

    tr = numkit.l2_row_normalize(train_embeds).value
    te = numkit.l2_row_normalize(test_embeds).value
    mean = tr.mean(axis=0, keepdims=True)
    scale = tr.std(axis=0, keepdims=True)
    scale[scale == 0.0] = 1.0  # constant dimension: leave it unscaled
    tr = _standardize(tr, mean, scale)
    te = _standardize(te, mean, scale)

    rng = np.random.default_rng(config.seed)
    dim = tr.shape[1]
    w = Tensor(numkit.he_uniform(rng, dim, classes))
    b = Tensor(np.zeros((1, classes)))
    opt = SgdOptimizer([w, b], config.lr0, momentum=0.9,
                       weight_decay=config.weight_decay)
    steps_per_epoch = max(1, len(tr) // config.batch_size)
    total = config.epochs * steps_per_epoch
    step = 0
    for _ in range(config.epochs):
        order = rng.permutation(len(tr))
        for s in range(steps_per_epoch):
            idx = order[s * config.batch_size:(s + 1) * config.batch_size]
            tape = Tape()
            logits = numkit.add_bias(numkit.matmul(tr[idx], w, tape), b, tape)
            loss = numkit.cross_entropy_mean(logits, train_labels[idx], tape)
            tape.backward(loss)
            opt.step(numkit.cosine_lr(step, total, config.lr0))
            opt.zero_grad()
            step += 1
    pred = (te @ w.value + b.value).argmax(axis=1)
    return float((pred == test_labels).mean())


def recall_at_1(query_embeds: np.ndarray, query_labels: np.ndarray,
                gallery_embeds: np.ndarray, gallery_labels: np.ndarray,
                query_ids: np.ndarray | None = None,
                gallery_ids: np.ndarray | None = None) -> float:
    """Fraction of queries whose nearest gallery item shares the label.

    A gallery item with the query's own sample id is excluded.
    """
    if len(gallery_embeds) == 0:
        raise ValueError("gallery must be non-empty")
    sims = np.asarray(query_embeds) @ np.asarray(gallery_embeds).T
    if query_ids is not None and gallery_ids is not None:
        same = query_ids[:, None] == gallery_ids[None, :]
        sims = np.where(same, -np.inf, sims)
    nearest = sims.argmax(axis=1)
    return float((gallery_labels[nearest] == query_labels).mean())


@dataclass
class PurityRow:
    group: str  # "clean" or "corrupted" queries, or "all"
    queries: int
    mean_topk: float
    mean_random: float

    @property
    def gap(self) -> float:
        return self.mean_topk - self.mean_random


def purity_report(bank: MemoryBank, embeds: np.ndarray, ds: LabeledDataset,
                  k: int, seed: int = 0,
                  sample_limit: int | None = None) -> list[PurityRow]:
    """Mean purity of top-k vs a random k-subset inside each query's
    label-constrained candidate set, split by query corruption."""
    rng = np.random.default_rng(seed)
    mode = cst.LabelConstrained()
    rows = {"clean": [], "corrupted": []}
    indices = np.arange(len(ds))
    if sample_limit is not None and sample_limit < len(indices):
        indices = rng.permutation(len(ds))[:sample_limit]
    for i in indices:
        label = int(ds.train_labels[i])
        true = int(ds.true_labels[i])
        try:
            sbank, idx = cst.candidate_set(mode, bank, query_label=label)
        except cst.EmptyCandidateSet:
            continue
        entry = BankEntry(embedding=embeds[i], label=label,
                          sample_id=int(ds.sample_ids[i]), true_label=true)
        top = constrained_topk(sbank, embeds[i], idx, k, True, entry)
        rand_idx = rng.choice(idx, size=min(k, idx.size), replace=False)
        rand = [sbank.entries[j] for j in rand_idx]
        group = "clean" if label == true else "corrupted"
        rows[group].append((purity(top, true), purity(rand, true)))

    out = []
    for group in ("clean", "corrupted"):
        vals = rows[group]
        if vals:
            out.append(PurityRow(group, len(vals),
                                 float(np.mean([a for a, _ in vals])),
                                 float(np.mean([b for _, b in vals]))))
    everything = rows["clean"] + rows["corrupted"]
    if everything:
        out.append(PurityRow("all", len(everything),
                             float(np.mean([a for a, _ in everything])),
                             float(np.mean([b for _, b in everything]))))
    return out
