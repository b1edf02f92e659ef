"""Deterministic synthetic corpora: multimodal class clusters, label noise,
vector-space augmentations, and paired pseudo-modalities.

Every generator is a pure function of its spec and seed.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace

import numpy as np


@dataclass
class SyntheticSpec:
    classes: int = 4
    modes_per_class: int = 3
    latent_dim: int = 8
    ambient_dim: int = 16
    within_mode_std: float = 0.1
    samples: int = 4000
    seed: int = 0

    def __post_init__(self):
        if self.modes_per_class < 1:
            raise ValueError("modes_per_class must be >= 1")
        if self.ambient_dim < self.latent_dim:
            raise ValueError("ambient_dim must be >= latent_dim")
        if self.classes < 1:
            raise ValueError("classes must be >= 1")


@dataclass
class LabeledDataset:
    features: np.ndarray
    true_labels: np.ndarray
    train_labels: np.ndarray
    label_mask: np.ndarray  # True where the train label is visible
    sample_ids: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.sample_ids is None:
            self.sample_ids = np.arange(len(self.features))

    def __len__(self):
        return len(self.features)

    @property
    def classes(self) -> int:
        return int(self.true_labels.max()) + 1


@dataclass
class ModalityPair:
    view_a: np.ndarray
    view_b: np.ndarray

    def __post_init__(self):
        if len(self.view_a) != len(self.view_b):
            raise ValueError("paired views must cover the same samples")


@dataclass
class AugmentPolicy:
    jitter_std: float = 0.0
    drop_prob: float = 0.0
    scale_range: tuple[float, float] = (1.0, 1.0)

    def __post_init__(self):
        if self.jitter_std < 0 or self.drop_prob < 0:
            raise ValueError("policy fields must be >= 0")
        self.scale_range = tuple(self.scale_range)
        lo, hi = self.scale_range
        if lo > hi or lo <= 0:
            raise ValueError("scale_range must be a positive (lo, hi) interval")

    @staticmethod
    def weak(jitter_std: float = 0.02) -> "AugmentPolicy":
        return AugmentPolicy(jitter_std=jitter_std)

    @staticmethod
    def strong(jitter_std: float = 0.1, drop_prob: float = 0.1,
               scale_range: tuple[float, float] = (0.8, 1.2)) -> "AugmentPolicy":
        return AugmentPolicy(jitter_std, drop_prob, scale_range)


def _mode_centers(rng: np.random.Generator, count: int, dim: int) -> np.ndarray:
    c = rng.standard_normal((count, dim))
    return c / np.linalg.norm(c, axis=1, keepdims=True)


def generate(spec: SyntheticSpec) -> LabeledDataset:
    """Balanced multimodal Gaussian classes embedded through tanh(W x)."""
    if spec.samples % spec.classes != 0:
        raise ValueError(
            f"samples ({spec.samples}) must divide evenly by classes "
            f"({spec.classes}) to keep balance exact")
    rng = np.random.default_rng(spec.seed)
    centers = _mode_centers(rng, spec.classes * spec.modes_per_class, spec.latent_dim)
    embed = rng.standard_normal((spec.latent_dim, spec.ambient_dim))
    embed /= np.sqrt(spec.latent_dim)

    per_class = spec.samples // spec.classes
    feats, labels = [], []
    for c in range(spec.classes):
        # spread the class count across its modes, remainder to early modes
        counts = [per_class // spec.modes_per_class] * spec.modes_per_class
        for i in range(per_class % spec.modes_per_class):
            counts[i] += 1
        for m, cnt in enumerate(counts):
            center = centers[c * spec.modes_per_class + m]
            latent = center + spec.within_mode_std * rng.standard_normal(
                (cnt, spec.latent_dim))
            feats.append(np.tanh(latent @ embed))
            labels.append(np.full(cnt, c))
    features = np.vstack(feats)
    true_labels = np.concatenate(labels)
    order = rng.permutation(spec.samples)
    return LabeledDataset(
        features=features[order],
        true_labels=true_labels[order],
        train_labels=true_labels[order].copy(),
        label_mask=np.ones(spec.samples, dtype=bool),
    )


def inject_noise(ds: LabeledDataset, rate: float, seed: int) -> LabeledDataset:
    """Corrupt exactly floor(rate*N) train labels to a different class."""
    if not 0.0 <= rate <= 1.0:
        raise ValueError("noise rate must lie in [0, 1]")
    n_corrupt = int(rate * len(ds))
    if n_corrupt > 0 and ds.classes < 2:
        raise ValueError("cannot corrupt labels with fewer than 2 classes")
    rng = np.random.default_rng(seed)
    victims = rng.permutation(len(ds))[:n_corrupt]
    train_labels = ds.true_labels.copy()
    for i in victims:
        offset = rng.integers(1, ds.classes)
        train_labels[i] = (ds.true_labels[i] + offset) % ds.classes
    return replace(ds, train_labels=train_labels,
                   features=ds.features, true_labels=ds.true_labels,
                   label_mask=ds.label_mask.copy(), sample_ids=ds.sample_ids)


def mask_labels(ds: LabeledDataset, fraction: float, seed: int) -> LabeledDataset:
    """Keep a class-balanced fraction of labels visible, hide the rest."""
    if not 0.0 <= fraction <= 1.0:
        raise ValueError("label fraction must lie in [0, 1]")
    rng = np.random.default_rng(seed)
    mask = np.zeros(len(ds), dtype=bool)
    for c in range(ds.classes):
        idx = np.nonzero(ds.train_labels == c)[0]
        keep = int(round(fraction * idx.size))
        mask[rng.permutation(idx)[:keep]] = True
    return replace(ds, label_mask=mask)


def augment(x: np.ndarray, policy: AugmentPolicy,
            rng: np.random.Generator) -> np.ndarray:
    """Gaussian jitter, then coordinate dropout, then a global scale draw.

    Works on a single vector or a batch of row vectors.
    """
    out = np.asarray(x, dtype=np.float64).copy()
    if policy.jitter_std > 0:
        out += policy.jitter_std * rng.standard_normal(out.shape)
    if policy.drop_prob > 0:
        out *= rng.random(out.shape) >= policy.drop_prob
    lo, hi = policy.scale_range
    if (lo, hi) != (1.0, 1.0):
        if out.ndim == 2:
            out *= rng.uniform(lo, hi, size=(out.shape[0], 1))
        else:
            out *= rng.uniform(lo, hi)
    return out


def generate_pair(spec: SyntheticSpec, noise_a: float = 0.0,
                  noise_b: float = 0.0) -> tuple[ModalityPair, LabeledDataset]:
    """Two nonlinear projections of one latent, with per-view noise levels."""
    if spec.samples % spec.classes != 0:
        raise ValueError("samples must divide evenly by classes")
    rng = np.random.default_rng(spec.seed)
    centers = _mode_centers(rng, spec.classes * spec.modes_per_class, spec.latent_dim)
    proj_a = rng.standard_normal((spec.latent_dim, spec.ambient_dim))
    proj_a /= np.sqrt(spec.latent_dim)
    proj_b = rng.standard_normal((spec.latent_dim, spec.ambient_dim))
    proj_b /= np.sqrt(spec.latent_dim)

    per_class = spec.samples // spec.classes
    latents, labels = [], []
    for c in range(spec.classes):
        counts = [per_class // spec.modes_per_class] * spec.modes_per_class
        for i in range(per_class % spec.modes_per_class):
            counts[i] += 1
        for m, cnt in enumerate(counts):
            center = centers[c * spec.modes_per_class + m]
            latents.append(center + spec.within_mode_std
                           * rng.standard_normal((cnt, spec.latent_dim)))
            labels.append(np.full(cnt, c))
    latent = np.vstack(latents)
    true_labels = np.concatenate(labels)
    order = rng.permutation(spec.samples)
    latent, true_labels = latent[order], true_labels[order]

    view_a = np.tanh(latent @ proj_a)
    view_b = np.tanh(latent @ proj_b)
    if noise_a > 0:
        view_a = view_a + noise_a * rng.standard_normal(view_a.shape)
    if noise_b > 0:
        view_b = view_b + noise_b * rng.standard_normal(view_b.shape)

    ds = LabeledDataset(
        features=view_b,
        true_labels=true_labels,
        train_labels=true_labels.copy(),
        label_mask=np.ones(spec.samples, dtype=bool),
    )
    return ModalityPair(view_a=view_a, view_b=view_b), ds


# ---------------------------------------------------------------------------
# dataset dump/load


def dump_csv(ds: LabeledDataset, path):
    dim = ds.features.shape[1]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sample_id", "true_label", "train_label", "labeled_flag"]
                   + [f"f{i}" for i in range(dim)])
        for i in range(len(ds)):
            w.writerow([int(ds.sample_ids[i]), int(ds.true_labels[i]),
                        int(ds.train_labels[i]), int(ds.label_mask[i])]
                       + [repr(float(v)) for v in ds.features[i]])


def load_csv(path) -> LabeledDataset:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, rows = rows[0], rows[1:]
    if header[:4] != ["sample_id", "true_label", "train_label", "labeled_flag"]:
        raise ValueError(f"unrecognized dataset header in {path}")
    ids = np.array([int(r[0]) for r in rows])
    true_labels = np.array([int(r[1]) for r in rows])
    train_labels = np.array([int(r[2]) for r in rows])
    mask = np.array([bool(int(r[3])) for r in rows])
    feats = np.array([[float(v) for v in r[4:]] for r in rows])
    return LabeledDataset(features=feats, true_labels=true_labels,
                          train_labels=train_labels, label_mask=mask,
                          sample_ids=ids)
