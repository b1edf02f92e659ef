"""Training loop: augment twice, forward both paths, constrain the bank
search, pull toward the top-k neighbor mean, update, push.

Step order is fixed: (1) target/online forwards, (2) candidate set,
(3) top-k, (4) loss, (5) SGD step on the online side, (6) momentum update,
(7) bank push. A sample therefore never meets its own bank entry within
the same step.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import constraint as cst
from . import datagen, losses, numkit
from .datagen import AugmentPolicy, LabeledDataset, ModalityPair
from .encoder import EncoderPair
from .membank import AlignedBankPair, BankEntry, MemoryBank, constrained_topk
from .numkit import SgdOptimizer, Tape, Tensor

CONSTRAINT_MODES = ("unconstrained", "label", "semi", "crossmodal")


@dataclass
class TrainConfig:
    loss: losses.LossKind = field(default_factory=losses.Cmsf)
    mode: str = "label"
    k: int | None = 10  # None selects top-all
    include_target: bool = True
    crossmodal_n: int = 10
    bank_capacity: int = 4096
    epochs: int = 50
    batch_size: int = 64
    lr0: float = 0.05
    momentum_m: float = 0.99
    sgd_momentum: float = 0.9
    weight_decay: float = 1e-4
    weak_policy: AugmentPolicy = field(default_factory=AugmentPolicy.weak)
    strong_policy: AugmentPolicy = field(default_factory=AugmentPolicy.strong)
    seed: int = 0

    def __post_init__(self):
        if self.mode not in CONSTRAINT_MODES:
            raise ValueError(f"unknown constraint mode {self.mode!r}; "
                             f"expected one of {CONSTRAINT_MODES}")
        if self.k is not None and self.k < 1:
            raise ValueError("k must be >= 1 (or None for top-all)")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2 (batch norm)")
        if self.bank_capacity < self.batch_size:
            raise ValueError("bank_capacity must be >= batch_size")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")


@dataclass
class TrainResult:
    pair: EncoderPair
    epoch_history: list[dict]
    step_losses: list[float]
    bank: MemoryBank | AlignedBankPair | None
    labeled_bank: MemoryBank | None = None
    classifier_head: tuple[Tensor, Tensor] | None = None
    prototypes: losses.FrozenPrototypes | None = None


class Trainer:
    """Owns one encoder pair, its optimizer, and its memory bank(s)."""

    def __init__(self, config: TrainConfig, dataset: LabeledDataset,
                 pair_views: ModalityPair | None = None,
                 constraint_encoder: EncoderPair | None = None,
                 init_pair: EncoderPair | None = None):
        self.config = config
        self.dataset = dataset
        self.rng = np.random.default_rng(config.seed)
        dim = dataset.features.shape[1]
        self.pair = init_pair if init_pair is not None else EncoderPair.create(
            dim, config.momentum_m, self.rng)

        params = self.pair.trainable_parameters()
        self.classifier_head = None
        self.prototypes = None
        if isinstance(config.loss, losses.CrossEntropy):
            w = Tensor(numkit.he_uniform(self.rng, self.pair.embed_dim,
                                         dataset.classes))
            b = Tensor(np.zeros((1, dataset.classes)))
            self.classifier_head = (w, b)
            params = params + [w, b]
        elif isinstance(config.loss, losses.FrzProto):
            self.prototypes = (config.loss.prototypes
                               or losses.FrozenPrototypes.create(
                                   dataset.classes, self.pair.embed_dim, self.rng))
        self.optimizer = SgdOptimizer(params, config.lr0, config.sgd_momentum,
                                      config.weight_decay)

        if config.mode == "semi":
            self.mode = cst.SemiSupervised(MemoryBank(config.bank_capacity),
                                           MemoryBank(config.bank_capacity))
            self.bank = self.mode.unlabeled_bank
        elif config.mode == "crossmodal":
            if pair_views is None or constraint_encoder is None:
                raise ValueError("crossmodal training needs pair_views and a "
                                 "frozen constraint encoder")
            self.mode = cst.CrossModal(config.crossmodal_n)
            self.bank = AlignedBankPair(config.bank_capacity)
        elif config.mode == "label":
            self.mode = cst.LabelConstrained()
            self.bank = MemoryBank(config.bank_capacity)
        else:
            self.mode = cst.Unconstrained()
            self.bank = MemoryBank(config.bank_capacity)
        self.pair_views = pair_views
        self.constraint_encoder = constraint_encoder

        self.global_step = 0
        steps_per_epoch = len(dataset) // config.batch_size
        self.total_steps = max(1, config.epochs * steps_per_epoch)
        self.steps_per_epoch = steps_per_epoch

    # -- neighbor selection ------------------------------------------------

    def _neighbor_set(self, u_i: np.ndarray, label, true_label, sample_id,
                      u_c_i: np.ndarray | None) -> np.ndarray:
        cfg = self.config
        entry = BankEntry(embedding=u_i, label=label, sample_id=sample_id,
                          true_label=true_label)
        try:
            sbank, idx = cst.candidate_set(
                self.mode, self.bank, query_label=label,
                query_constraint_embedding=u_c_i)
        except cst.EmptyCandidateSet:
            return u_i.reshape(1, -1)
        pool = idx.size + (1 if cfg.include_target else 0)
        if cfg.k is not None and pool < cfg.k:
            # cold start: not enough eligible candidates yet
            return u_i.reshape(1, -1)
        k = cfg.k if cfg.k is not None else pool
        selected = constrained_topk(sbank, u_i, idx, k, cfg.include_target, entry)
        return np.stack([e.embedding for e in selected])

    # -- one optimization step ---------------------------------------------

    def train_step(self, batch_indices: np.ndarray) -> float:
        cfg = self.config
        ds = self.dataset
        x = ds.features[batch_indices]
        t1 = datagen.augment(x, cfg.weak_policy, self.rng)
        t2 = datagen.augment(x, cfg.strong_policy, self.rng)

        u = self.pair.forward_target(t1)
        u_c = None
        if cfg.mode == "crossmodal":
            xc = datagen.augment(self.pair_views.view_a[batch_indices],
                                 cfg.weak_policy, self.rng)
            u_c = self.constraint_encoder.forward_target(xc)

        tape = Tape()
        loss = self._batch_loss(batch_indices, t2, u, u_c, tape)

        tape.backward(loss)
        lr = numkit.cosine_lr(self.global_step, self.total_steps, cfg.lr0)
        self.optimizer.step(lr)
        self.optimizer.zero_grad()
        self.pair.momentum_update()
        self._push(batch_indices, u, u_c)
        self.global_step += 1
        return float(loss.value[0, 0])

    def _batch_loss(self, batch_indices, t2, u, u_c, tape) -> Tensor:
        cfg = self.config
        ds = self.dataset
        labels = ds.train_labels[batch_indices]
        visible = ds.label_mask[batch_indices]

        if isinstance(cfg.loss, losses.CrossEntropy):
            trunk = self.pair.forward_online_trunk(t2, tape)
            w, b = self.classifier_head
            logits = numkit.add_bias(numkit.matmul(trunk, w, tape), b, tape)
            return losses.xent_loss(logits, labels, tape)

        v = self.pair.forward_online(t2, tape)

        if isinstance(cfg.loss, losses.Cmsf):
            sets = []
            for j, i in enumerate(batch_indices):
                label = int(labels[j]) if visible[j] else None
                sets.append(self._neighbor_set(
                    u[j], label, int(ds.true_labels[i]), int(ds.sample_ids[i]),
                    None if u_c is None else u_c[j]))
            return losses.cmsf_batch_loss(v, sets, tape)

        if isinstance(cfg.loss, losses.FrzProto):
            per_sample = [losses.frzproto_loss(numkit.take_row(v, j, tape),
                                               self.prototypes, int(labels[j]), tape)
                          for j in range(len(batch_indices))]
            return _mean_scalars(per_sample, tape)

        # contrastive baselines need a warm bank; BYOL-style cold start
        per_sample = []
        for j in range(len(batch_indices)):
            vj = numkit.take_row(v, j, tape)
            cold = len(self.bank) == 0 or (
                int(labels[j]) not in set(int(l) for l in self.bank.labels()))
            if cold:
                per_sample.append(losses.cmsf_loss(vj, u[j].reshape(1, -1), tape))
            elif isinstance(cfg.loss, losses.SupCon):
                u_pos = u[j] if cfg.loss.include_target_positive else None
                per_sample.append(losses.supcon_loss(
                    vj, self.bank, int(labels[j]), u_pos,
                    cfg.loss.temperature, tape))
            else:
                per_sample.append(losses.protonw_loss(
                    vj, self.bank, int(labels[j]), cfg.loss.temperature, tape))
        return _mean_scalars(per_sample, tape)

    def _push(self, batch_indices, u, u_c):
        ds = self.dataset
        cfg = self.config
        if isinstance(cfg.loss, (losses.CrossEntropy, losses.FrzProto)):
            return  # no bank participates in these objectives

        def entries(embs, only_labeled=False):
            out = []
            for j, i in enumerate(batch_indices):
                if only_labeled and not ds.label_mask[i]:
                    continue
                label = int(ds.train_labels[i]) if ds.label_mask[i] else None
                out.append(BankEntry(embedding=embs[j], label=label,
                                     sample_id=int(ds.sample_ids[i]),
                                     true_label=int(ds.true_labels[i])))
            return out

        if cfg.mode == "semi":
            self.mode.unlabeled_bank.push(entries(u))
            self.mode.labeled_bank.push(entries(u, only_labeled=True))
        elif cfg.mode == "crossmodal":
            self.bank.push(entries(u_c), entries(u))
        else:
            self.bank.push(entries(u))

    # -- full run ----------------------------------------------------------

    def train(self, epoch_callback=None) -> TrainResult:
        cfg = self.config
        step_losses: list[float] = []
        epoch_history: list[dict] = []
        n = len(self.dataset)
        for epoch in range(cfg.epochs):
            order = self.rng.permutation(n)
            epoch_losses = []
            for s in range(self.steps_per_epoch):
                batch = order[s * cfg.batch_size:(s + 1) * cfg.batch_size]
                try:
                    epoch_losses.append(self.train_step(batch))
                except numkit.NumericError as e:
                    raise numkit.NumericError(
                        f"step {self.global_step}: {e}") from e
            step_losses.extend(epoch_losses)
            epoch_history.append({
                "epoch": epoch,
                "mean_loss": float(np.mean(epoch_losses)) if epoch_losses else 0.0,
            })
            if epoch_callback is not None:
                epoch_callback(epoch, self.pair)
        labeled = self.mode.labeled_bank if cfg.mode == "semi" else None
        return TrainResult(pair=self.pair, epoch_history=epoch_history,
                           step_losses=step_losses, bank=self.bank,
                           labeled_bank=labeled,
                           classifier_head=self.classifier_head,
                           prototypes=self.prototypes)


def _mean_scalars(items: list[Tensor], tape: Tape) -> Tensor:
    total = items[0]
    for t in items[1:]:
        total = numkit.add(total, t, tape)
    return numkit.scale(total, 1.0 / len(items), tape)


def train(config: TrainConfig, dataset: LabeledDataset,
          pair_views: ModalityPair | None = None,
          constraint_encoder: EncoderPair | None = None,
          init_pair: EncoderPair | None = None) -> TrainResult:
    return Trainer(config, dataset, pair_views, constraint_encoder,
                   init_pair).train()
