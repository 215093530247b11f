"""Single runs and parameter sweeps, written to CSV/JSON report files.

Each run directory holds:

* ``config.json`` -- the resolved configuration (written before training)
* ``run.csv``     -- one row per iteration: passes, gradient norm, loss, regularizer
* ``summary.json`` -- final metric, pass totals, gradient-norm variance, cache footprint
"""
from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Sequence

import numpy as np

from .config import ExperimentConfig, format_value
from .data import Dataset, generate_synthetic, load_tsv_dataset
from .model import CLASSIFICATION, Model
from .trainer import TrainResult, evaluate, grad_norm_variance, train

log = logging.getLogger(__name__)

CSV_VERSION = "# arch-reg v1"
RUN_COLUMNS = ("iteration", "fwd", "bwd", "grad_norm", "loss", "reg")
SWEEP_AXES = {"alpha": "alpha", "cache_gap": "cache_gap", "T_c": "cache_gap", "t_c": "cache_gap",
              "k": "k", "K": "k", "p": "p"}
OUT_ENV = "ARCH_REG_OUT"


def resolve_out_dir(config: ExperimentConfig) -> Path:
    return Path(os.environ.get(OUT_ENV) or config.out_dir)


def load_dataset(config: ExperimentConfig) -> Dataset:
    if config.train_tsv:
        return load_tsv_dataset(config.train_tsv, config.test_tsv or None, config.task)
    return generate_synthetic(config.synthetic_spec(), config.data_seed)


def build_model(config: ExperimentConfig, dataset: Dataset) -> Model:
    return Model(dataset.vocab_size, config.dim, config.hidden, dataset.n_classes, dataset.task)


def _prepare_dir(path: Path) -> None:
    try:
        path.mkdir(parents=True, exist_ok=True)
        probe = path / ".write-test"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise OSError(f"output directory {path} is not writable: {exc}") from exc


def _config_json(config: ExperimentConfig) -> dict:
    out = dataclasses.asdict(config)
    out["cache_gap"] = format_value("cache_gap", config.cache_gap)
    out["eps_resolved"] = config.training().eps
    return out


def write_run_csv(path: Path, result: TrainResult) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(CSV_VERSION + "\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(RUN_COLUMNS)
        for it, fwd, bwd, gnorm, loss, reg in result.history:
            writer.writerow((it, fwd, bwd, repr(gnorm), repr(loss), repr(reg)))


def read_run_csv(path: Path) -> list[dict[str, str]]:
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n")
        if header != CSV_VERSION:
            raise ValueError(f"{path}: unsupported run.csv version line {header!r}")
        return list(csv.DictReader(fh))


def summarize(config: ExperimentConfig, model: Model, dataset: Dataset,
              result: TrainResult, wall_time: float) -> dict:
    n_iter = result.iterations
    fwd_avg, bwd_avg = result.counter.average()
    metric_name = "accuracy" if model.task == CLASSIFICATION else "mse"
    entries, scalars = result.cache.memory_footprint() if result.cache is not None else (0, 0)
    summary = {
        "strategy": config.strategy,
        "seed": config.seed,
        "epochs": config.epochs,
        "iterations": n_iter,
        "metric": metric_name,
        "train_" + metric_name: evaluate(model, result.theta, dataset.train),
        "test_" + metric_name: evaluate(model, result.theta, dataset.test) if dataset.test else None,
        "forward_passes": result.counter.forward_count,
        "backward_passes": result.counter.backward_count,
        "avg_forward": float(fwd_avg),
        "avg_backward": float(bwd_avg),
        "avg_forward_exact": str(fwd_avg),
        "avg_backward_exact": str(bwd_avg),
        "grad_norm_mean": float(np.mean(result.grad_norms)),
        "grad_norm_variance": (grad_norm_variance(result.grad_norms, slice(n_iter // 2, None))
                               if n_iter - n_iter // 2 >= 2 else None),
        "final_loss": result.history[-1][4],
        "final_reg": result.history[-1][5],
        "cache_entries": entries,
        "cache_scalars": scalars,
        "wall_time_s": wall_time,
    }
    return summary


def run_single(config: ExperimentConfig, out_dir: Path, dataset: Dataset | None = None) -> dict:
    """Train once with ``config`` and write the three report files to ``out_dir``."""
    _prepare_dir(out_dir)
    (out_dir / "config.json").write_text(json.dumps(_config_json(config), indent=2) + "\n")
    dataset = dataset or load_dataset(config)
    model = build_model(config, dataset)
    embedding = np.load(config.knn_embedding) if config.knn_embedding else None

    start = time.perf_counter()
    result = train(model, dataset.train, config.training(), embedding=embedding)
    wall = time.perf_counter() - start

    write_run_csv(out_dir / "run.csv", result)
    summary = summarize(config, model, dataset, result, wall)
    (out_dir / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    if config.dump_cache and result.cache is not None:
        result.cache.dump(out_dir / "cache.bin")
    if config.dump_index and result.index is not None:
        result.index.dump(out_dir / "neighbors.txt")
    log.info("%s seed=%d: %s=%s, %d backward passes", config.strategy, config.seed,
             summary["metric"], summary["test_" + summary["metric"]], summary["backward_passes"])
    return summary


def run_experiment(config: ExperimentConfig) -> list[dict]:
    """Run ``config.repeats`` seeds; a single repeat writes straight into the output dir."""
    out_dir = resolve_out_dir(config)
    _prepare_dir(out_dir)
    dataset = load_dataset(config)
    if config.repeats == 1:
        return [run_single(config, out_dir, dataset)]
    summaries = []
    for r in range(config.repeats):
        cfg = config.replace(seed=config.seed + r)
        summaries.append(run_single(cfg, out_dir / f"seed_{cfg.seed}", dataset))
    return summaries


def _sweep_cell(args):
    config, out_dir = args
    return run_single(config, out_dir)


def _value_label(axis: str, value) -> str:
    return format_value(axis, value)


def run_sweep(base: ExperimentConfig, axis: str, values: Sequence, seeds: int = 3,
              jobs: int = 1) -> Path:
    """Train every (value, seed) cell and write ``sweep.csv`` with one row per cell."""
    if axis not in SWEEP_AXES:
        raise ValueError(f"unknown sweep axis {axis!r}; choose from alpha, cache_gap (T_c), k (K), p")
    field = SWEEP_AXES[axis]
    out_dir = resolve_out_dir(base)
    _prepare_dir(out_dir)

    cells = []
    for value in values:
        if field == "cache_gap":
            value = math.inf if str(value).lower() == "inf" else int(value)
        elif field == "k":
            value = int(value)
        else:
            value = float(value)
        for s in range(seeds):
            cfg = base.replace(**{field: value, "seed": base.seed + s})
            cell_dir = out_dir / f"{field}={_value_label(field, value)}" / f"seed_{cfg.seed}"
            cells.append((field, value, cfg, cell_dir))

    work = [(cfg, cell_dir) for _, _, cfg, cell_dir in cells]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            summaries = list(pool.map(_sweep_cell, work))
    else:
        summaries = [_sweep_cell(w) for w in work]

    path = out_dir / "sweep.csv"
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(CSV_VERSION + "\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(("axis", "value", "seed", "strategy", "random_neighbors", "metric",
                         "test_metric", "grad_norm_variance", "forward_passes",
                         "backward_passes", "cache_entries"))
        for (fld, value, cfg, _), summary in zip(cells, summaries):
            metric = summary["metric"]
            writer.writerow((fld, _value_label(fld, value), cfg.seed, cfg.strategy,
                             cfg.random_neighbors, metric, summary["test_" + metric],
                             summary["grad_norm_variance"], summary["forward_passes"],
                             summary["backward_passes"], summary["cache_entries"]))
    return path
