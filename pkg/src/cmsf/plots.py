"""Figure rendering for sweep reports. All figures go to PNG files next to
the delimited metrics output."""

from __future__ import annotations

from collections import defaultdict

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt


def _sweep_series(rows, x_field: str, metric: str):
    """Group metric rows into per-method (x, mean-value) series."""
    acc = defaultdict(lambda: defaultdict(list))
    for r in rows:
        if r.metric == metric:
            acc[r.method][getattr(r, x_field)].append(r.value)
    series = {}
    for method, by_x in acc.items():
        xs = sorted(by_x)
        series[method] = (xs, [sum(by_x[x]) / len(by_x[x]) for x in xs])
    return series


def plot_sweep(rows, x_field: str, metric: str, xlabel: str, path):
    series = _sweep_series(rows, x_field, metric)
    if not series:
        return None
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for method in sorted(series):
        xs, ys = series[method]
        ax.plot(xs, ys, marker="o", label=method)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(metric)
    ax.legend(fontsize=8)
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_noise_sweep(rows, metric: str, path):
    return plot_sweep(rows, "noise_rate", metric, "label noise rate", path)


def plot_label_fraction_sweep(rows, metric: str, path):
    return plot_sweep(rows, "label_fraction", metric, "label fraction", path)


def plot_purity(purity_rows, path):
    """Grouped bars: top-k vs random-k purity per query group."""
    if not purity_rows:
        return None
    groups = [r.group for r in purity_rows]
    xs = range(len(groups))
    fig, ax = plt.subplots(figsize=(5, 3.5))
    width = 0.35
    ax.bar([x - width / 2 for x in xs], [r.mean_topk for r in purity_rows],
           width, label="top-k")
    ax.bar([x + width / 2 for x in xs], [r.mean_random for r in purity_rows],
           width, label="random-k")
    ax.set_xticks(list(xs))
    ax.set_xticklabels(groups)
    ax.set_ylabel("mean purity")
    ax.set_ylim(0, 1.05)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_training_curves(histories: dict[str, list[dict]], path):
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for name in sorted(histories):
        hist = histories[name]
        ax.plot([h["epoch"] for h in hist], [h["mean_loss"] for h in hist],
                label=name)
    ax.set_xlabel("epoch")
    ax.set_ylabel("mean step loss")
    ax.legend(fontsize=8)
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
