"""Experiment drivers behind the command-line subcommands.

Each ``run_*`` takes a validated :class:`~smamba.config.RunConfig`, writes its
artifacts under ``config.output_dir`` with names derived from the command and
seed, and returns the summary record it wrote.
"""

from __future__ import annotations

import csv
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import checkpoint
from .config import RunConfig
from .data import (
    TimeSeriesDataset,
    generate_synthetic,
    load_csv,
    reorder_variates,
    split_and_standardize,
    subset_variates,
    window_arrays,
    write_csv,
)
from .exceptions import ArtifactMismatchError, DivergenceError
from .model import SMambaModel, count_parameters, persistence_baseline
from .training import (
    BENCH_HEADER,
    benchmark_scaling,
    evaluate,
    mae,
    mse,
    predict_windows,
    scaling_slopes,
    train,
)

logger = logging.getLogger(__name__)

VC_LABELS = {"bi_mamba": "bi-Mamba VC", "attention": "Attention VC", "none": "w/o VC"}
TD_LABELS = {"ffn": "FFN TD", "none": "w/o TD"}
ABLATION_GRID = tuple((vc, td) for vc in ("bi_mamba", "attention", "none") for td in ("ffn", "none"))


def _write_json(path: Path, record: dict) -> None:
    path.write_text(json.dumps(record, sort_keys=True, indent=2) + "\n", encoding="utf-8")


def _write_table(path: Path, header, rows) -> None:
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([row[h] for h in header])


def load_dataset(config: RunConfig) -> TimeSeriesDataset:
    """Raw (unsplit) dataset from the configured source."""
    lookback, horizon = config.model["lookback"], config.model["horizon"]
    if config.csv is not None:
        return load_csv(config.csv, min_rows=lookback + horizon, granularity=config.granularity)
    return generate_synthetic(config.synthetic)


def prepare_dataset(config: RunConfig) -> TimeSeriesDataset:
    ds = load_dataset(config)
    return split_and_standardize(ds, config.ratios, min_len=config.model["lookback"] + config.model["horizon"])


def checkpoint_meta(ds: TimeSeriesDataset) -> dict:
    return {
        "variate_names": list(ds.variate_names),
        "mean": [float(x) for x in ds.mean],
        "std": [float(x) for x in ds.std],
    }


def fit_model(config: RunConfig, ds: TimeSeriesDataset, **model_overrides):
    model = SMambaModel.initialize(config.model_config(ds.n_variates, **model_overrides), config.train.dtype)
    report = train(model, ds, config.train)
    return model, report


# ---------------------------------------------------------------- commands


def run_train(config: RunConfig) -> dict:
    ds = prepare_dataset(config)
    log_path = config.output_path("train", ".log.jsonl")
    try:
        model, report = fit_model(config, ds)
    except DivergenceError as err:
        if err.report is not None:
            log_path.write_text("\n".join(err.report.log_lines()) + "\n", encoding="utf-8")
        raise
    log_path.write_text("\n".join(report.log_lines()) + "\n", encoding="utf-8")
    ckpt = config.output_path("train", ".ckpt")
    checkpoint.save(ckpt, model, checkpoint_meta(ds))
    summary = {"command": "train", "seed": config.seed, "model": model.config.to_dict(), **report.summary()}
    _write_json(config.output_path("train", ".summary.json"), summary)
    return summary


def _stats_from_meta(ds: TimeSeriesDataset, meta: dict, model) -> TimeSeriesDataset:
    n_ckpt = len(meta.get("mean", []))
    if n_ckpt != ds.n_variates:
        raise ArtifactMismatchError(f"checkpoint has {n_ckpt} variates, data has {ds.n_variates}")
    return replace(ds, mean=np.array(meta["mean"]), std=np.array(meta["std"]))


def _check_lookback(model, n_rows: int) -> None:
    if n_rows < model.config.lookback:
        raise ArtifactMismatchError(f"checkpoint lookback {model.config.lookback} exceeds data rows {n_rows}")


def run_eval(config: RunConfig, checkpoint_path) -> dict:
    model, meta = checkpoint.load(checkpoint_path)
    ds = load_dataset(config)
    ds = split_and_standardize(ds, config.ratios, min_len=model.config.lookback + model.config.horizon)
    ds = _stats_from_meta(ds, meta, model)
    metrics = evaluate(model, ds, config.experiment.split, config.train.eval_batch_size)
    summary = {"command": "eval", "seed": config.seed, "split": config.experiment.split, **metrics}
    _write_json(config.output_path("eval", ".summary.json"), summary)
    return summary


def forecast_from_values(model, meta: dict, values: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Forecast the ``T`` steps after ``values[-L:]``, in original units."""
    mean, std = np.array(meta["mean"]), np.array(meta["std"])
    if values.shape[1] != len(mean):
        raise ArtifactMismatchError(f"checkpoint has {len(mean)} variates, data has {values.shape[1]}")
    _check_lookback(model, values.shape[0])
    L = model.config.lookback
    X = ((values - mean) / std)[None, values.shape[0] - L:]
    pred = predict_windows(model, X, batch_size)[0]
    return pred * std + mean


def run_forecast(checkpoint_path, csv_path, output) -> Path:
    model, meta = checkpoint.load(checkpoint_path)
    ds = load_csv(csv_path)
    pred = forecast_from_values(model, meta, ds.values)
    write_csv(output, pred, meta.get("variate_names") or ds.variate_names)
    return Path(output)


def _ablation_cell(args):
    config, ds, vc, td = args
    model, report = fit_model(config, ds, vc_variant=vc, td_variant=td)
    return {
        "vc_variant": vc,
        "td_variant": td,
        "label": f"{VC_LABELS[vc]} + {TD_LABELS[td]}",
        "mse": report.test["mse"],
        "mae": report.test["mae"],
        "mse_orig": report.test["mse_orig"],
        "mae_orig": report.test["mae_orig"],
        "params": count_parameters(model),
        "best_epoch": report.best_epoch,
    }


def _map_cells(fn, jobs, parallel: bool):
    if parallel and len(jobs) > 1:
        with ProcessPoolExecutor() as pool:
            return list(pool.map(fn, jobs))
    return [fn(job) for job in jobs]


ABLATION_HEADER = ("vc_variant", "td_variant", "label", "mse", "mae", "mse_orig", "mae_orig", "params", "best_epoch")


def run_ablate(config: RunConfig) -> dict:
    ds = prepare_dataset(config)
    rows = _map_cells(_ablation_cell, [(config, ds, vc, td) for vc, td in ABLATION_GRID],
                      config.experiment.parallel_cells)
    _write_table(config.output_path("ablate", ".csv"), ABLATION_HEADER, rows)
    summary = {"command": "ablate", "seed": config.seed, "cells": rows}
    _write_json(config.output_path("ablate", ".summary.json"), summary)
    return summary


def _reorder_arm(args):
    config, ds, placement = args
    reordered, perm = reorder_variates(ds, placement, config.experiment.threshold)
    model, report = fit_model(config, reordered)
    return {
        "placement": placement,
        "permutation": " ".join(str(int(i)) for i in perm),
        "mse": report.test["mse"],
        "mae": report.test["mae"],
        "mse_orig": report.test["mse_orig"],
        "mae_orig": report.test["mae_orig"],
    }


REORDER_HEADER = ("placement", "permutation", "mse", "mae", "mse_orig", "mae_orig", "mse_spread")


def run_reorder(config: RunConfig) -> dict:
    ds = prepare_dataset(config)
    arms = _map_cells(_reorder_arm, [(config, ds, p) for p in config.experiment.placements],
                      config.experiment.parallel_cells)
    spread = max(a["mse"] for a in arms) - min(a["mse"] for a in arms)
    for a in arms:
        a["mse_spread"] = spread
    _write_table(config.output_path("reorder", ".csv"), REORDER_HEADER, arms)
    base = next((a["mse"] for a in arms if a["placement"] == "original"), arms[0]["mse"])
    summary = {
        "command": "reorder-exp",
        "seed": config.seed,
        "arms": arms,
        "mse_spread": spread,
        "relative_spread": spread / base if base else None,
    }
    _write_json(config.output_path("reorder", ".summary.json"), summary)
    return summary


def _per_variate_mse(pred: np.ndarray, target: np.ndarray) -> np.ndarray:
    d = pred - target
    return (d * d).mean(axis=(0, 1))


def generalization_arm(config: RunConfig, ds: TimeSeriesDataset, fraction: float) -> dict:
    sub, full, idx = subset_variates(ds, fraction, config.seed)
    model, report = fit_model(config, sub)
    L, T = model.config.lookback, model.config.horizon
    X, Y, _ = window_arrays(full, "test", L, T)
    pred = predict_windows(model, X, config.train.eval_batch_size)
    per_var = _per_variate_mse(pred, Y)
    per_var_persist = _per_variate_mse(persistence_baseline(X, T), Y)
    unseen = np.setdiff1d(np.arange(full.n_variates), idx)
    pred_o, Y_o = full.destandardize(pred), full.destandardize(Y)
    return {
        "fraction": fraction,
        "seen_variates": [int(i) for i in idx],
        "mse": mse(pred, Y),
        "mae": mae(pred, Y),
        "mse_orig": mse(pred_o, Y_o),
        "mae_orig": mae(pred_o, Y_o),
        "mse_seen": float(per_var[idx].mean()),
        "mse_unseen": float(per_var[unseen].mean()) if len(unseen) else None,
        "persistence_mse_unseen": float(per_var_persist[unseen].mean()) if len(unseen) else None,
        "persistence_mse": float(per_var_persist.mean()),
        "train_report": report.summary(),
    }


def run_generalize(config: RunConfig) -> dict:
    ds = prepare_dataset(config)
    fractions = [config.experiment.fraction] + ([1.0] if config.experiment.fraction < 1 else [])
    arms = [generalization_arm(config, ds, f) for f in fractions]
    summary = {"command": "generalize-exp", "seed": config.seed, "arms": arms}
    _write_json(config.output_path("generalize", ".summary.json"), summary)
    return summary


def run_bench(config: RunConfig) -> dict:
    e = config.experiment
    base = {k: v for k, v in config.model.items() if k not in ("vc_variant", "seed")}
    rows = benchmark_scaling(
        e.bench_variants, e.bench_variates, base, steps=e.bench_steps, repeats=e.bench_repeats,
        batch_size=config.train.batch_size, seed=config.seed, precision=config.train.precision,
    )
    _write_table(config.output_path("bench", ".csv"), BENCH_HEADER, rows)
    summary = {
        "command": "bench",
        "seed": config.seed,
        "rows": [{k: r[k] for k in BENCH_HEADER} for r in rows],
        "loglog_slopes": scaling_slopes(rows),
    }
    _write_json(config.output_path("bench", ".summary.json"), summary)
    return summary


def run_datagen(config: RunConfig) -> Path:
    ds = generate_synthetic(config.synthetic)
    path = config.output_path("datagen", ".csv")
    write_csv(path, ds.values, ds.variate_names)
    return path


__all__ = [
    "ABLATION_GRID",
    "forecast_from_values",
    "run_ablate",
    "run_bench",
    "run_datagen",
    "run_eval",
    "run_forecast",
    "run_generalize",
    "run_reorder",
    "run_train",
]
