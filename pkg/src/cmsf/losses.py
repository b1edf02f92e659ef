"""Training objectives: constrained mean-shift plus the four baselines.

All losses are built from numkit primitives so gradients flow back into
the online encoder. Bank embeddings and prototypes enter as constants and
never receive gradient.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numkit
from .membank import MemoryBank
from .numkit import Tape, Tensor

DEFAULT_TEMPERATURE = 0.1


@dataclass
class Cmsf:
    k: int | None = 10  # None means top-all


@dataclass
class CrossEntropy:
    pass


@dataclass
class SupCon:
    temperature: float = DEFAULT_TEMPERATURE
    include_target_positive: bool = True

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")


@dataclass
class ProtoNW:
    temperature: float = DEFAULT_TEMPERATURE

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")


@dataclass
class FrzProto:
    prototypes: "FrozenPrototypes" = None


LossKind = Cmsf | CrossEntropy | SupCon | ProtoNW | FrzProto


@dataclass
class FrozenPrototypes:
    """One fixed random unit-norm vector per class; never updated."""

    matrix: np.ndarray = field(repr=False)

    @staticmethod
    def create(classes: int, dim: int, rng: np.random.Generator) -> "FrozenPrototypes":
        m = rng.standard_normal((classes, dim))
        m /= np.linalg.norm(m, axis=1, keepdims=True)
        m.flags.writeable = False
        return FrozenPrototypes(m)


def cmsf_loss(v: Tensor, neighbors: np.ndarray, tape: Tape | None = None) -> Tensor:
    """Mean squared distance from v to a set of unit neighbors.

    Equals (1/k) sum_i (2 - 2 v.z_i); minimizing it pulls v toward the
    mean of the set.
    """
    z = np.atleast_2d(np.asarray(neighbors, dtype=np.float64))
    if z.size == 0:
        raise ValueError("neighbor set must be non-empty")
    k = z.shape[0]
    # 2 - (2/k) v . sum(z)
    target = (2.0 / k) * z.sum(axis=0, keepdims=True)
    dot = numkit.mean_rowwise_dot(v, target, tape)
    return numkit.add_scalar(numkit.scale(dot, -1.0, tape), 2.0, tape)


def cmsf_batch_loss(v_batch: Tensor, neighbor_sets: list[np.ndarray],
                    tape: Tape | None = None) -> Tensor:
    """Mean of cmsf_loss over a batch, computed in one fused pass."""
    n, d = v_batch.shape
    if len(neighbor_sets) != n:
        raise ValueError("one neighbor set per batch row required")
    targets = np.empty((n, d))
    for i, z in enumerate(neighbor_sets):
        z = np.atleast_2d(np.asarray(z, dtype=np.float64))
        if z.size == 0:
            raise ValueError(f"neighbor set {i} is empty")
        targets[i] = (2.0 / z.shape[0]) * z.sum(axis=0)
    dot = numkit.mean_rowwise_dot(v_batch, targets, tape)
    return numkit.add_scalar(numkit.scale(dot, -1.0, tape), 2.0, tape)


def xent_loss(logits: Tensor, labels, tape: Tape | None = None) -> Tensor:
    return numkit.cross_entropy_mean(logits, labels, tape)


def supcon_loss(v: Tensor, bank: MemoryBank, query_label: int,
                u: np.ndarray | None, temperature: float,
                tape: Tape | None = None) -> Tensor:
    """Supervised contrastive loss of one online embedding against the bank.

    Positives are same-label bank entries, plus the target embedding u when
    given; the denominator runs over the whole bank (and u).
    """
    candidates = bank.embedding_matrix()
    positives = np.nonzero(bank.labels() == query_label)[0]
    if u is not None:
        candidates = np.vstack([candidates, np.asarray(u).reshape(1, -1)])
        positives = np.append(positives, candidates.shape[0] - 1)
    if positives.size == 0:
        raise ValueError(f"no positives in bank for label {query_label}")
    logits = numkit.scale(numkit.matmul(v, candidates.T, tape),
                          1.0 / temperature, tape)
    lse = numkit.logsumexp_all(logits, tape)
    pos = numkit.mean_select(logits, positives, tape)
    return numkit.sub(lse, pos, tape)


def class_prototypes(bank: MemoryBank) -> tuple[np.ndarray, dict[int, int]]:
    """Per-class mean of bank embeddings, renormalized to unit length."""
    labels = bank.labels()
    present = sorted(int(c) for c in np.unique(labels) if c >= 0)
    if not present:
        raise ValueError("bank has no labeled entries")
    mat = bank.embedding_matrix()
    protos = np.stack([mat[labels == c].mean(axis=0) for c in present])
    protos /= np.linalg.norm(protos, axis=1, keepdims=True)
    return protos, {c: i for i, c in enumerate(present)}


def protonw_loss(v: Tensor, bank: MemoryBank, query_label: int,
                 temperature: float, tape: Tape | None = None) -> Tensor:
    """Softmax over temperature-scaled cosine to per-class bank prototypes."""
    protos, index = class_prototypes(bank)
    if query_label not in index:
        raise ValueError(f"query class {query_label} absent from bank")
    logits = numkit.scale(numkit.matmul(v, protos.T, tape), 1.0 / temperature, tape)
    lse = numkit.logsumexp_all(logits, tape)
    pos = numkit.mean_select(logits, [index[query_label]], tape)
    return numkit.sub(lse, pos, tape)


def frzproto_loss(v: Tensor, prototypes: FrozenPrototypes, query_label: int,
                  tape: Tape | None = None) -> Tensor:
    """Cosine-distance regression onto the frozen class prototype."""
    if not 0 <= query_label < prototypes.matrix.shape[0]:
        raise ValueError(f"label {query_label} outside prototype table")
    proto = prototypes.matrix[query_label:query_label + 1]
    dot = numkit.mean_rowwise_dot(v, proto, tape)
    return numkit.add_scalar(numkit.scale(dot, -1.0, tape), 1.0, tape)
