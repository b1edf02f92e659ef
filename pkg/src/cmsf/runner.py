"""Experiment orchestration: sweep grids, metrics CSV, comparison reports.

A run config is a JSON file; every default the config leaves unset is
resolved and echoed back to config-echo.json so a run is fully auditable
and reproducible from its own artifacts.
"""

from __future__ import annotations

import csv
import json
import os
import re
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from . import datagen, evaluate, losses, plots
from .datagen import LabeledDataset, SyntheticSpec
from .encoder import save_checkpoint
from .membank import MemoryBank
from .trainer import TrainConfig, Trainer

METRICS_HEADER = ["run_id", "method", "noise_rate", "label_fraction",
                  "epoch", "metric", "value", "seed"]

KNOWN_EVALUATIONS = ("knn", "linear_probe", "recall_at_1", "purity")


class ConfigError(ValueError):
    def __init__(self, field_path: str, message: str):
        super().__init__(f"{field_path}: {message}")
        self.field_path = field_path


@dataclass
class MetricsRow:
    run_id: str
    method: str
    noise_rate: float
    label_fraction: float
    epoch: int
    metric: str
    value: float
    seed: int

    def to_csv_row(self):
        return [self.run_id, self.method, repr(float(self.noise_rate)),
                repr(float(self.label_fraction)), self.epoch, self.metric,
                repr(float(self.value)), self.seed]


@dataclass
class ExperimentConfig:
    seed: int = 0
    seeds: list[int] = None
    out_dir: str = "runs/default"
    dataset: SyntheticSpec = None
    test_fraction: float = 0.2
    methods: list[str] = None
    noise_rates: list[float] = None
    label_fractions: list[float] = None
    evaluations: list[str] = None
    train: TrainConfig = None
    knn_k: int = 10
    purity_k: int = 10
    checkpoint_every: int = 0
    figures: bool = True

    def __post_init__(self):
        if self.seeds is None:
            self.seeds = [self.seed]
        if self.dataset is None:
            self.dataset = SyntheticSpec()
        if self.methods is None:
            self.methods = ["cmsf-top10"]
        if self.noise_rates is None:
            self.noise_rates = [0.0]
        if self.label_fractions is None:
            self.label_fractions = [1.0]
        if self.evaluations is None:
            self.evaluations = ["knn"]
        if self.train is None:
            self.train = TrainConfig()
        if not 0.0 < self.test_fraction < 1.0:
            raise ConfigError("test_fraction", "must lie in (0, 1)")
        for e in self.evaluations:
            if e not in KNOWN_EVALUATIONS:
                raise ConfigError("evaluations",
                                  f"unknown evaluation {e!r}; "
                                  f"expected one of {KNOWN_EVALUATIONS}")
        for m in self.methods:
            method_settings(m)  # validates the name


def _build_dataclass(cls, data: dict, path: str):
    if not isinstance(data, dict):
        raise ConfigError(path, f"expected an object, got {type(data).__name__}")
    fields = {f for f in cls.__dataclass_fields__}
    unknown = set(data) - fields
    if unknown:
        raise ConfigError(f"{path}.{sorted(unknown)[0]}", "unknown field")
    return data


def load_config(path) -> ExperimentConfig:
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except json.JSONDecodeError as e:
        raise ConfigError("<root>", f"invalid JSON: {e}") from e
    return config_from_dict(raw)


def config_from_dict(raw: dict) -> ExperimentConfig:
    data = dict(_build_dataclass(ExperimentConfig, raw, "<root>"))
    if "dataset" in data:
        data["dataset"] = SyntheticSpec(
            **_build_dataclass(SyntheticSpec, data["dataset"], "dataset"))
    if "train" in data:
        tr = dict(_build_dataclass(TrainConfig, data["train"], "train"))
        for key in ("loss", "mode"):
            if key in tr:
                raise ConfigError(f"train.{key}",
                                  "set per-method via the methods list")
        for key in ("weak_policy", "strong_policy"):
            if key in tr and isinstance(tr[key], dict):
                tr[key] = datagen.AugmentPolicy(
                    **_build_dataclass(datagen.AugmentPolicy, tr[key],
                                       f"train.{key}"))
        data["train"] = TrainConfig(**tr)
    try:
        return ExperimentConfig(**data)
    except (TypeError, ValueError) as e:
        if isinstance(e, ConfigError):
            raise
        raise ConfigError("<root>", str(e)) from e


def echo_config(config: ExperimentConfig) -> dict:
    d = asdict(config)
    d["train"].pop("loss")
    d["train"].pop("mode")
    d["train"]["weak_policy"] = asdict(config.train.weak_policy)
    d["train"]["strong_policy"] = asdict(config.train.strong_policy)
    return d


# ---------------------------------------------------------------------------
# method registry


def method_settings(name: str) -> dict:
    """Map a method name to loss kind, constraint mode, and k override."""
    if name == "xent":
        return {"loss": losses.CrossEntropy(), "mode": "label"}
    if name == "supcon":
        # SupCon runs use the slower target momentum
        return {"loss": losses.SupCon(), "mode": "label", "momentum_m": 0.999}
    if name == "protonw":
        return {"loss": losses.ProtoNW(), "mode": "label"}
    if name == "frzproto":
        return {"loss": losses.FrzProto(), "mode": "label"}
    if name == "msf":
        return {"loss": losses.Cmsf(), "mode": "unconstrained"}
    if name == "cmsf-topall":
        return {"loss": losses.Cmsf(k=None), "mode": "label", "k": None}
    if name == "cmsf-semi":
        return {"loss": losses.Cmsf(), "mode": "semi"}
    m = re.fullmatch(r"cmsf-top(\d+)", name)
    if m:
        k = int(m.group(1))
        return {"loss": losses.Cmsf(k=k), "mode": "label", "k": k}
    raise ConfigError("methods", f"unknown method {name!r}")


def split_dataset(ds: LabeledDataset, test_fraction: float
                  ) -> tuple[LabeledDataset, LabeledDataset]:
    """Deterministic tail split; generation already shuffled the rows."""
    n_test = int(round(test_fraction * len(ds)))
    cut = len(ds) - n_test
    def take(sl):
        return LabeledDataset(
            features=ds.features[sl], true_labels=ds.true_labels[sl],
            train_labels=ds.train_labels[sl], label_mask=ds.label_mask[sl],
            sample_ids=ds.sample_ids[sl])
    return take(slice(0, cut)), take(slice(cut, None))


# ---------------------------------------------------------------------------
# sweep execution


def _cell_train_config(config: ExperimentConfig, method: str,
                       seed: int) -> TrainConfig:
    settings = method_settings(method)
    overrides = {"loss": settings["loss"], "mode": settings["mode"],
                 "seed": seed}
    if "k" in settings:
        overrides["k"] = settings["k"]
    if "momentum_m" in settings:
        overrides["momentum_m"] = settings["momentum_m"]
    return replace(config.train, **overrides)


def run_cell(config: ExperimentConfig, method: str, noise_rate: float,
             label_fraction: float, seed: int,
             out_dir: Path | None = None) -> tuple[list[MetricsRow], object]:
    """Train and evaluate one sweep cell; returns its metric rows."""
    run_id = f"{method}_n{noise_rate:g}_f{label_fraction:g}_s{seed}"
    # the benchmark dataset is fixed; replication seeds vary corruption,
    # masking, and training so methods are compared on one shared problem
    ds = datagen.generate(config.dataset)
    ds = datagen.inject_noise(ds, noise_rate, seed=seed * 7919 + 13)
    ds = datagen.mask_labels(ds, label_fraction, seed=seed * 104729 + 17)
    train_ds, test_ds = split_dataset(ds, config.test_fraction)

    tc = _cell_train_config(config, method, seed)
    trainer = Trainer(tc, train_ds)
    callback = None
    if out_dir is not None and config.checkpoint_every > 0:
        def callback(epoch, pair):
            if (epoch + 1) % config.checkpoint_every == 0:
                save_checkpoint(pair, Path(out_dir) / f"{run_id}_e{epoch}.ckpt")
    result = trainer.train(callback)

    rows = []
    for h in result.epoch_history:
        rows.append(MetricsRow(run_id, method, noise_rate, label_fraction,
                               h["epoch"], "train_loss", h["mean_loss"], seed))
    final_epoch = max(0, tc.epochs - 1)
    train_emb = evaluate.embed_dataset(result.pair, train_ds)
    test_emb = evaluate.embed_dataset(result.pair, test_ds)

    if "knn" in config.evaluations:
        acc = evaluate.knn_classify(train_emb, train_ds.true_labels,
                                    test_emb, test_ds.true_labels, config.knn_k)
        rows.append(MetricsRow(run_id, method, noise_rate, label_fraction,
                               final_epoch, "knn_accuracy", acc, seed))
    if "linear_probe" in config.evaluations:
        acc = evaluate.linear_probe(train_emb, train_ds.true_labels,
                                    test_emb, test_ds.true_labels)
        rows.append(MetricsRow(run_id, method, noise_rate, label_fraction,
                               final_epoch, "linear_probe_accuracy", acc, seed))
    if "recall_at_1" in config.evaluations:
        r1 = evaluate.recall_at_1(test_emb, test_ds.true_labels,
                                  train_emb, train_ds.true_labels)
        rows.append(MetricsRow(run_id, method, noise_rate, label_fraction,
                               final_epoch, "recall_at_1", r1, seed))
    if "purity" in config.evaluations and isinstance(result.bank, MemoryBank):
        report = evaluate.purity_report(result.bank, train_emb, train_ds,
                                        config.purity_k, seed=seed,
                                        sample_limit=1000)
        for row in report:
            rows.append(MetricsRow(run_id, method, noise_rate, label_fraction,
                                   final_epoch, f"purity_topk_{row.group}",
                                   row.mean_topk, seed))
            rows.append(MetricsRow(run_id, method, noise_rate, label_fraction,
                                   final_epoch, f"purity_random_{row.group}",
                                   row.mean_random, seed))

    if out_dir is not None:
        save_checkpoint(result.pair, Path(out_dir) / f"{run_id}.ckpt")
    return rows, result.epoch_history


def _run_cell_worker(args):
    config_dict, method, noise, frac, seed, out_dir = args
    config = config_from_dict(config_dict)
    return run_cell(config, method, noise, frac, seed, Path(out_dir))


def run_experiment(config: ExperimentConfig, out_dir) -> Path:
    """Run the full sweep grid and write metrics, figures, and the echo."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "config-echo.json", "w") as fh:
        json.dump(echo_config(config), fh, indent=2, sort_keys=True)
        fh.write("\n")

    cells = [(method, noise, frac, seed)
             for method in config.methods
             for noise in config.noise_rates
             for frac in config.label_fractions
             for seed in config.seeds]

    threads = int(os.environ.get("CMSF_THREADS", "1"))
    all_rows: list[MetricsRow] = []
    histories: dict[str, list[dict]] = {}
    if threads > 1 and len(cells) > 1:
        echo = echo_config(config)
        args = [(echo, *cell, str(out)) for cell in cells]
        with ProcessPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(_run_cell_worker, args))
        for cell, (rows, hist) in zip(cells, results):
            all_rows.extend(rows)
            histories["_".join(str(c) for c in cell)] = hist
    else:
        for cell in cells:
            rows, hist = run_cell(config, *cell, out_dir=out)
            all_rows.extend(rows)
            histories["_".join(str(c) for c in cell)] = hist

    write_metrics(all_rows, out / "metrics.csv")
    if config.figures:
        fig_dir = out / "figures"
        fig_dir.mkdir(exist_ok=True)
        for metric in ("knn_accuracy", "linear_probe_accuracy", "recall_at_1"):
            if len(config.noise_rates) > 1:
                plots.plot_noise_sweep(all_rows, metric,
                                       fig_dir / f"noise_sweep_{metric}.png")
            if len(config.label_fractions) > 1:
                plots.plot_label_fraction_sweep(
                    all_rows, metric, fig_dir / f"label_sweep_{metric}.png")
        plots.plot_training_curves(histories, fig_dir / "training_loss.png")
    return out / "metrics.csv"


def write_metrics(rows: list[MetricsRow], path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(METRICS_HEADER)
        for r in rows:
            w.writerow(r.to_csv_row())


def read_metrics(path) -> list[MetricsRow]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != METRICS_HEADER:
        raise ValueError(f"unrecognized metrics header in {path}")
    return [MetricsRow(r[0], r[1], float(r[2]), float(r[3]), int(r[4]),
                       r[5], float(r[6]), int(r[7])) for r in rows[1:]]


# ---------------------------------------------------------------------------
# comparison reports


def _aggregate(rows: list[MetricsRow]) -> dict[tuple, tuple[float, float, int]]:
    """(method, noise, fraction, metric) -> (mean, range, n) over seeds.

    Only final metric rows (non train_loss) participate.
    """
    acc: dict[tuple, list[float]] = {}
    for r in rows:
        if r.metric == "train_loss":
            continue
        key = (r.method, r.noise_rate, r.label_fraction, r.metric)
        acc.setdefault(key, []).append(r.value)
    return {k: (float(np.mean(v)), float(max(v) - min(v)), len(v))
            for k, v in acc.items()}


def _verdicts(agg: dict[tuple, tuple[float, float, int]]) -> list[str]:
    """Directional trend checks used by the acceptance experiments."""
    out = []
    def mean_of(method, noise, metric="knn_accuracy"):
        for (m, n, _f, met), (mean, _r, _c) in agg.items():
            if m == method and n == noise and met == metric:
                return mean
        return None
    for noise in (0.5,):
        top10 = mean_of("cmsf-top10", noise)
        topall = mean_of("cmsf-topall", noise)
        xent = mean_of("xent", noise)
        if top10 is not None and topall is not None:
            ok = top10 > topall
            out.append(f"cmsf-top10 > cmsf-topall at {int(noise*100)}% noise: "
                       f"{'PASS' if ok else 'FAIL'}")
        if top10 is not None and xent is not None:
            ok = top10 > xent
            out.append(f"cmsf-top10 > xent at {int(noise*100)}% noise: "
                       f"{'PASS' if ok else 'FAIL'}")
    return out


def compare(report_paths: list, out_dir=None) -> str:
    """Join metrics across runs; emit a markdown table, deltas, verdicts."""
    tables = [_aggregate(read_metrics(p)) for p in report_paths]
    base = tables[0]
    for i, table in enumerate(tables[1:], start=1):
        missing = sorted(set(base) ^ set(table))
        if missing:
            cells = ", ".join(str(m) for m in missing[:8])
            raise ValueError(
                f"mismatched sweep grids between {report_paths[0]} and "
                f"{report_paths[i]}; missing cells: {cells}")

    lines = ["| method | noise | frac | metric | " + " | ".join(
        f"run{i} mean±range" for i in range(len(tables)))
        + (" | delta |" if len(tables) > 1 else " |")]
    lines.append("|" + "---|" * (4 + len(tables) + (1 if len(tables) > 1 else 0)))
    csv_rows = []
    for key in sorted(base):
        method, noise, frac, metric = key
        cells = []
        for t in tables:
            mean, rng, _n = t[key]
            cells.append(f"{mean:.4f}±{rng:.4f}")
        row = f"| {method} | {noise:g} | {frac:g} | {metric} | " + " | ".join(cells)
        delta = None
        if len(tables) > 1:
            delta = tables[-1][key][0] - base[key][0]
            row += f" | {delta:+.4f} |"
        else:
            row += " |"
        lines.append(row)
        csv_rows.append([method, noise, frac, metric]
                        + [t[key][0] for t in tables]
                        + ([delta] if delta is not None else []))
    for v in _verdicts(base):
        lines.append(f"- {v}")
    report = "\n".join(lines) + "\n"

    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "comparison.md").write_text(report)
        with open(out / "comparison.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            header = ["method", "noise_rate", "label_fraction", "metric"]
            header += [f"mean_run{i}" for i in range(len(tables))]
            if len(tables) > 1:
                header.append("delta")
            w.writerow(header)
            w.writerows(csv_rows)
        all_rows = [r for p in report_paths for r in read_metrics(p)]
        for metric in sorted({r.metric for r in all_rows if r.metric != "train_loss"}):
            plots.plot_noise_sweep(all_rows, metric,
                                   out / f"compare_noise_{metric}.png")
    return report
