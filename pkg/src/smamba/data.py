"""Dataset ingestion, standardization, windowing and variate experiments."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .exceptions import ContractError, LoadError, ProtocolError

logger = logging.getLogger(__name__)

STD_FLOOR = 1e-8
TIMESTAMP_HEADERS = {"date", "timestamp"}
SPLITS = ("train", "val", "test")


@dataclass(frozen=True)
class TimeSeriesDataset:
    """Chronologically ordered ``values[steps, V]`` with optional split and stats.

    ``split`` holds ``(train_end, val_end)`` step indices; ``mean``/``std`` are
    per-variate statistics from the train split.
    """

    values: np.ndarray
    variate_names: tuple[str, ...]
    granularity: str = ""
    split: tuple[int, int] | None = None
    mean: np.ndarray | None = None
    std: np.ndarray | None = None

    def __post_init__(self):
        v = self.values
        if not (isinstance(v, np.ndarray) and v.dtype == np.float64 and not v.flags.writeable):
            v = np.array(v, dtype=np.float64)  # private copy; never freeze the caller's array
        if v.ndim != 2:
            raise ContractError(f"values must be [steps, V], got shape {v.shape}")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "variate_names", tuple(self.variate_names))
        if len(self.variate_names) != v.shape[1]:
            raise ContractError(f"{len(self.variate_names)} names for {v.shape[1]} variates")
        if self.split is not None:
            tr, va = self.split
            if not 0 < tr < va <= v.shape[0]:
                raise ContractError(f"split {self.split} invalid for {v.shape[0]} steps")

    @property
    def n_steps(self) -> int:
        return self.values.shape[0]

    @property
    def n_variates(self) -> int:
        return self.values.shape[1]

    @property
    def is_standardized(self) -> bool:
        return self.mean is not None

    def bounds(self, split: str) -> tuple[int, int]:
        if self.split is None:
            raise ProtocolError("dataset has not been split")
        tr, va = self.split
        return {"train": (0, tr), "val": (tr, va), "test": (va, self.n_steps)}[split]

    def standardized(self) -> np.ndarray:
        if self.mean is None:
            raise ProtocolError("dataset has no standardization statistics")
        return (self.values - self.mean) / self.std

    def destandardize(self, x: np.ndarray, variates: Sequence[int] | None = None) -> np.ndarray:
        """Map standardized values (last axis = variates) back to original units."""
        mean, std = self.mean, self.std
        if variates is not None:
            mean, std = mean[list(variates)], std[list(variates)]
        return np.asarray(x) * std + mean

    def select_variates(self, idx: Sequence[int]) -> "TimeSeriesDataset":
        idx = list(idx)
        return replace(
            self,
            values=self.values[:, idx],
            variate_names=[self.variate_names[i] for i in idx],
            mean=None if self.mean is None else self.mean[idx],
            std=None if self.std is None else self.std[idx],
        )


@dataclass(frozen=True)
class WindowSample:
    lookback: np.ndarray
    target: np.ndarray
    origin: int


# ---------------------------------------------------------------------- csv


def load_csv(path, min_rows: int | None = None, granularity: str = "") -> TimeSeriesDataset:
    """Read a header-first numeric CSV, one row per time step.

    A leading ``date``/``timestamp`` column is dropped.  Error locations are
    1-based ``(data row, file column)``.
    """
    path = Path(path)
    try:
        fh = path.open(newline="", encoding="utf-8")
    except OSError as err:
        raise LoadError(f"cannot open {path}: {err}") from None
    with fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise LoadError(f"{path} is empty") from None
        header = [h.strip() for h in header]
        skip = 1 if header and header[0].lower() in TIMESTAMP_HEADERS else 0
        names = header[skip:]
        if not names:
            raise LoadError(f"{path} has no variate columns")
        rows = []
        for r, row in enumerate(reader, start=1):
            if not row:
                continue
            if len(row) != len(header):
                raise LoadError(f"{path}: row {r} has {len(row)} cells, header has {len(header)}")
            vals = []
            for c in range(skip, len(row)):
                try:
                    x = float(row[c])
                except ValueError:
                    raise LoadError(f"{path}: non-numeric cell {row[c]!r} at (row {r}, column {c + 1})") from None
                if not math.isfinite(x):
                    raise LoadError(f"{path}: non-finite cell {row[c]!r} at (row {r}, column {c + 1})")
                vals.append(x)
            rows.append(vals)
    if min_rows is not None and len(rows) < min_rows:
        raise LoadError(f"{path}: {len(rows)} rows, need at least {min_rows}")
    values = np.array(rows, dtype=np.float64).reshape(len(rows), len(names))
    logger.info("loaded %s: %d steps x %d variates", path, *values.shape)
    return TimeSeriesDataset(values, names, granularity)


def write_csv(path, values: np.ndarray, names: Sequence[str]) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(names)
        for row in np.asarray(values):
            w.writerow([repr(float(x)) for x in row])


# ------------------------------------------------------------ preprocessing


def split_and_standardize(
    ds: TimeSeriesDataset,
    ratios: Sequence[float] = (0.7, 0.1, 0.2),
    min_len: int | None = None,
) -> TimeSeriesDataset:
    """Chronological split; z-score every variate with train-split statistics."""
    if len(ratios) != 3 or any(r <= 0 for r in ratios) or not math.isclose(sum(ratios), 1.0, abs_tol=1e-9):
        raise ContractError(f"ratios must be three positive numbers summing to 1, got {ratios}")
    n = ds.n_steps
    train_end = int(round(n * ratios[0]))
    val_end = train_end + int(round(n * ratios[1]))
    lengths = {"train": train_end, "val": val_end - train_end, "test": n - val_end}
    if min(lengths.values()) < 1:
        raise ProtocolError(f"split lengths {lengths} leave an empty split")
    if min_len is not None:
        short = {k: v for k, v in lengths.items() if v < min_len}
        if short:
            raise ProtocolError(f"splits {short} are shorter than lookback + horizon = {min_len}")
    train = ds.values[:train_end]
    mean = train.mean(axis=0)
    std = np.maximum(train.std(axis=0), STD_FLOOR)
    return replace(ds, split=(train_end, val_end), mean=mean, std=std)


def window_arrays(
    ds: TimeSeriesDataset, split: str, lookback: int, horizon: int, stride: int = 1, standardized: bool = True
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Stack every window of one split: ``X[n, L, V]``, ``Y[n, T, V]``, ``origins[n]``."""
    if stride < 1:
        raise ContractError("stride must be >= 1")
    lo, hi = ds.bounds(split)
    vals = ds.standardized() if standardized else ds.values
    last = hi - lookback - horizon
    if last < lo:
        logger.warning("%s split has %d steps, fewer than L+T=%d; no windows", split, hi - lo, lookback + horizon)
        v = ds.n_variates
        return np.empty((0, lookback, v)), np.empty((0, horizon, v)), np.empty(0, dtype=np.int64)
    origins = np.arange(lo, last + 1, stride)
    idx_x = origins[:, None] + np.arange(lookback)
    idx_y = origins[:, None] + lookback + np.arange(horizon)
    return vals[idx_x], vals[idx_y], origins


def make_windows(
    ds: TimeSeriesDataset, split: str, lookback: int, horizon: int, stride: int = 1, standardized: bool = True
) -> list[WindowSample]:
    X, Y, origins = window_arrays(ds, split, lookback, horizon, stride, standardized)
    return [WindowSample(x, y, int(o)) for x, y, o in zip(X, Y, origins)]


# ----------------------------------------------------------------- synthetic


@dataclass(frozen=True)
class Coupling:
    """``target`` variate follows ``weight * source(t - lag)`` plus its own noise."""

    source: int
    lag: int
    weight: float


@dataclass(frozen=True)
class SyntheticSpec:
    n_steps: int = 2000
    n_periodic: int = 4
    n_aperiodic: int = 2
    periods: tuple[float, ...] = (24.0, 168.0)
    couplings: tuple[Coupling, ...] = ()
    noise_scale: float = 0.1
    walk_reversion: float = 0.0
    shuffle_columns: bool = False
    seed: int = 0
    granularity: str = "synthetic"

    @property
    def n_variates(self) -> int:
        return self.n_periodic + self.n_aperiodic + len(self.couplings)


def generate_synthetic(spec: SyntheticSpec) -> TimeSeriesDataset:
    """Periodic, aperiodic and lag-coupled variates, in that column order.

    Periodic: a sum of seeded-amplitude sines over ``periods`` plus white noise.
    Aperiodic: random walks, mean-reverting at rate ``walk_reversion``.
    Coupled: ``weight * source(t - lag)`` plus an independent white noise process,
    where ``source`` indexes any earlier column.  ``shuffle_columns`` applies a
    seeded permutation to the finished columns.
    """
    if spec.n_steps < 2 or spec.n_variates < 1:
        raise ContractError("synthetic spec needs at least 2 steps and 1 variate")
    if not 0 <= spec.walk_reversion <= 1:
        raise ContractError("walk_reversion must lie in [0, 1]")
    rng = np.random.default_rng(spec.seed)
    n = spec.n_steps
    t = np.arange(n, dtype=np.float64)
    cols, names = [], []
    for i in range(spec.n_periodic):
        amps = rng.uniform(0.5, 1.5, size=len(spec.periods))
        phase = rng.uniform(0, 2 * np.pi)
        s = sum(a * np.sin(2 * np.pi * t / p + phase) for a, p in zip(amps, spec.periods))
        cols.append(s + spec.noise_scale * rng.standard_normal(n))
        names.append(f"periodic_{i}")
    for i in range(spec.n_aperiodic):
        steps = rng.standard_normal(n)
        x = np.empty(n)
        x[0] = steps[0]
        keep = 1.0 - spec.walk_reversion
        for k in range(1, n):
            x[k] = keep * x[k - 1] + steps[k]
        cols.append(x)
        names.append(f"aperiodic_{i}")
    for i, cp in enumerate(spec.couplings):
        if not 0 <= cp.source < len(cols):
            raise ContractError(f"coupling {i} source {cp.source} must index an earlier column")
        if cp.lag < 0:
            raise ContractError("coupling lag must be >= 0")
        src = cols[cp.source]
        lagged = np.concatenate([np.zeros(cp.lag), src[: n - cp.lag]]) if cp.lag else src.copy()
        cols.append(cp.weight * lagged + spec.noise_scale * rng.standard_normal(n))
        names.append(f"coupled_{i}")
    if spec.shuffle_columns:
        order = rng.permutation(len(cols))
        cols = [cols[i] for i in order]
        names = [names[i] for i in order]
    return TimeSeriesDataset(np.stack(cols, axis=1), names, spec.granularity)


def lagged_correlation(x: np.ndarray, y: np.ndarray, lag: int) -> float:
    """Pearson correlation of ``x[t - lag]`` with ``y[t]``."""
    if lag:
        x, y = x[:-lag], y[lag:]
    return float(np.corrcoef(x, y)[0, 1])


# --------------------------------------------------------------- periodicity


PERIODICITY_THRESHOLD = 0.2


def periodicity_score(series: np.ndarray) -> float:
    """Largest single-bin share of the mean-removed power spectrum."""
    x = np.asarray(series, dtype=np.float64)
    if x.ndim != 1 or x.size < 64:
        raise ContractError(f"need a 1-d series of at least 64 steps, got shape {x.shape}")
    if np.ptp(x) == 0:
        return 0.0
    x = x - x.mean()
    power = np.abs(np.fft.rfft(x)[1:]) ** 2
    total = power.sum()
    if total == 0:
        return 0.0
    return float(power.max() / total)


def classify_periodicity(series: np.ndarray, threshold: float = PERIODICITY_THRESHOLD) -> tuple[str, float]:
    score = periodicity_score(series)
    return ("periodic" if score >= threshold else "aperiodic"), score


PLACEMENTS = ("original", "aperiodic_middle", "aperiodic_end")


def placement_permutation(labels: Sequence[str], placement: str) -> np.ndarray:
    """Stable column order moving aperiodic columns to the middle or the end."""
    if placement not in PLACEMENTS:
        raise ContractError(f"placement must be one of {PLACEMENTS}, got {placement!r}")
    idx = np.arange(len(labels))
    if placement == "original":
        return idx
    per = [i for i in idx if labels[i] == "periodic"]
    ape = [i for i in idx if labels[i] != "periodic"]
    if not ape or not per:
        return idx
    if placement == "aperiodic_end":
        return np.array(per + ape)
    half = len(per) // 2
    return np.array(per[:half] + ape + per[half:])


def reorder_variates(
    ds: TimeSeriesDataset,
    placement: str,
    threshold: float = PERIODICITY_THRESHOLD,
    split: str | None = "train",
) -> tuple[TimeSeriesDataset, np.ndarray]:
    """Return the reordered dataset and ``perm`` with ``new[:, j] = old[:, perm[j]]``.

    Classification uses the given split only (the whole series when ``split``
    is ``None`` or the dataset is unsplit).
    """
    if split is not None and ds.split is not None:
        lo, hi = ds.bounds(split)
        source = ds.values[lo:hi]
    else:
        source = ds.values
    labels = [classify_periodicity(source[:, j], threshold)[0] for j in range(ds.n_variates)]
    perm = placement_permutation(labels, placement)
    return ds.select_variates(perm), perm


def inverse_permutation(perm: np.ndarray) -> np.ndarray:
    inv = np.empty_like(perm)
    inv[perm] = np.arange(len(perm))
    return inv


def subset_variates(
    ds: TimeSeriesDataset, fraction: float, seed: int
) -> tuple[TimeSeriesDataset, TimeSeriesDataset, np.ndarray]:
    """Seeded sample of ``ceil(fraction * V)`` variates; returns (subset, full, indices)."""
    if not 0 < fraction <= 1:
        raise ContractError(f"fraction must lie in (0, 1], got {fraction}")
    v = ds.n_variates
    k = math.ceil(round(fraction * v, 9))
    if k >= v:
        idx = np.arange(v)
    else:
        idx = np.sort(np.random.default_rng(seed).choice(v, size=k, replace=False))
    return ds.select_variates(idx), ds, idx
