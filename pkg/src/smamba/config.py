"""Declarative run configuration: an INI file plus ``section.key=value`` overrides."""

from __future__ import annotations

import configparser
import os
from dataclasses import dataclass, field, fields
from pathlib import Path

from .data import PLACEMENTS, Coupling, SyntheticSpec
from .exceptions import ConfigError, ContractError
from .model import ModelConfig
from .training import TrainConfig

_MODEL_KEYS = {f.name: f.type for f in fields(ModelConfig) if f.name != "n_variates"}
_TRAIN_KEYS = {f.name: f.type for f in fields(TrainConfig)}
_SYNTH_KEYS = {f.name: f.type for f in fields(SyntheticSpec)}
_DATA_KEYS = {"csv": "str", "source": "str", "ratios": "floats", "granularity": "str"}
_EXPERIMENT_KEYS = {
    "fraction": "float",
    "threshold": "float",
    "placements": "strs",
    "bench_variants": "strs",
    "bench_variates": "ints",
    "bench_steps": "int",
    "bench_repeats": "int",
    "parallel_cells": "bool",
    "split": "str",
}
_OUTPUT_KEYS = {"dir": "str"}

SECTIONS = {
    "data": _DATA_KEYS,
    "synthetic": _SYNTH_KEYS,
    "model": _MODEL_KEYS,
    "train": _TRAIN_KEYS,
    "experiment": _EXPERIMENT_KEYS,
    "output": _OUTPUT_KEYS,
}


@dataclass
class ExperimentConfig:
    fraction: float = 0.4
    threshold: float = 0.2
    placements: tuple[str, ...] = PLACEMENTS
    bench_variants: tuple[str, ...] = ("bi_mamba", "attention")
    bench_variates: tuple[int, ...] = (64, 128, 256)
    bench_steps: int = 50
    bench_repeats: int = 3
    parallel_cells: bool = False
    split: str = "test"


@dataclass
class RunConfig:
    model: dict
    train: TrainConfig
    csv: Path | None = None
    synthetic: SyntheticSpec | None = None
    ratios: tuple[float, float, float] = (0.7, 0.1, 0.2)
    granularity: str = ""
    experiment: ExperimentConfig = field(default_factory=ExperimentConfig)
    output_dir: Path = Path("runs")

    @property
    def seed(self) -> int:
        return self.train.seed

    def model_config(self, n_variates: int, **overrides) -> ModelConfig:
        return ModelConfig(**{**self.model, "n_variates": n_variates, **overrides})

    def output_path(self, command: str, suffix: str) -> Path:
        return self.output_dir / f"{command}-s{self.seed}{suffix}"


def _convert(key: str, kind: str, raw: str):
    raw = raw.strip()
    try:
        if "None" in kind and raw.lower() in ("", "none"):
            return None
        if kind in ("floats", "tuple[float, ...]"):
            return tuple(float(x) for x in raw.split(",") if x.strip())
        if kind == "ints":
            return tuple(int(x) for x in raw.split(",") if x.strip())
        if kind == "strs":
            return tuple(x.strip() for x in raw.split(",") if x.strip())
        if kind == "tuple[Coupling, ...]":
            out = []
            for item in raw.split(","):
                if item.strip():
                    src, lag, w = item.strip().split(":")
                    out.append(Coupling(int(src), int(lag), float(w)))
            return tuple(out)
        if kind in ("int", "int | None"):
            return int(raw)
        if kind == "float":
            return float(raw)
        if kind == "bool":
            low = raw.lower()
            if low in ("1", "yes", "true", "on"):
                return True
            if low in ("0", "no", "false", "off"):
                return False
            raise ValueError(raw)
        return raw
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {kind}") from None


def read_config(path=None, overrides=()) -> dict[str, dict[str, str]]:
    """Raw ``{section: {key: value}}`` with overrides applied; flags win over the file."""
    parser = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    parser.optionxform = str
    if path is not None:
        if not Path(path).is_file():
            raise ConfigError(f"config file {path} does not exist")
        try:
            parser.read(path, encoding="utf-8")
        except configparser.Error as err:
            raise ConfigError(f"cannot parse {path}: {err}") from None
    raw = {s: dict(parser[s]) for s in parser.sections()}
    for item in overrides:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigError(f"override {item!r} must look like section.key=value")
        lhs, value = item.split("=", 1)
        section, key = lhs.strip().split(".", 1)
        raw.setdefault(section, {})[key] = value
    return raw


def parse_config(raw: dict[str, dict[str, str]], need_data: bool = True) -> RunConfig:
    """Validate every section and key, then build a :class:`RunConfig`."""
    typed: dict[str, dict] = {}
    for section, values in raw.items():
        if section not in SECTIONS:
            raise ConfigError(f"unknown config section [{section}]")
        allowed = SECTIONS[section]
        typed[section] = {}
        for key, value in values.items():
            if key not in allowed:
                raise ConfigError(f"unknown config key {section}.{key}")
            typed[section][key] = _convert(f"{section}.{key}", allowed[key], value)

    data = typed.get("data", {})
    source = data.get("source")
    has_csv = "csv" in data
    has_synth = "synthetic" in typed or source == "synthetic"
    if source not in (None, "csv", "synthetic"):
        raise ConfigError(f"data.source must be 'csv' or 'synthetic', got {source!r}")
    if source == "csv" and not has_csv:
        raise ConfigError("data.csv is required when data.source = csv")
    if has_csv and (source == "synthetic" or "synthetic" in typed):
        raise ConfigError("exactly one dataset source allowed: data.csv or [synthetic]")
    if need_data and not has_csv and not has_synth:
        raise ConfigError("no dataset source: set data.csv or a [synthetic] section")
    csv = None
    if has_csv:
        csv = Path(data["csv"])
        if not csv.is_file():
            raise ConfigError(f"data.csv: file {csv} does not exist")

    try:
        train = TrainConfig(**typed.get("train", {}))
        synthetic = SyntheticSpec(**typed["synthetic"]) if has_synth else None
        if synthetic is not None and "seed" not in typed.get("synthetic", {}):
            synthetic = SyntheticSpec(**{**typed.get("synthetic", {}), "seed": train.seed})
        model = dict(typed.get("model", {}))
        model.setdefault("seed", train.seed)
        if "lookback" not in model or "horizon" not in model:
            raise ConfigError("model.lookback and model.horizon are required")
        ModelConfig(**{**model, "n_variates": 1})
        experiment = ExperimentConfig(**typed.get("experiment", {}))
    except ContractError as err:
        raise ConfigError(str(err)) from None
    except TypeError as err:
        raise ConfigError(str(err)) from None

    if not 0 < experiment.fraction <= 1:
        raise ConfigError("experiment.fraction must lie in (0, 1]")
    if experiment.bench_repeats < 1:
        raise ConfigError("experiment.bench_repeats must be >= 1")
    if experiment.bench_steps < 1:
        raise ConfigError("experiment.bench_steps must be >= 1")
    if any(p not in PLACEMENTS for p in experiment.placements):
        raise ConfigError(f"experiment.placements must be drawn from {PLACEMENTS}")
    if experiment.split not in ("train", "val", "test"):
        raise ConfigError("experiment.split must be train, val or test")
    ratios = data.get("ratios", (0.7, 0.1, 0.2))
    if len(ratios) != 3 or any(r <= 0 for r in ratios) or abs(sum(ratios) - 1) > 1e-9:
        raise ConfigError(f"data.ratios must be three positive numbers summing to 1, got {ratios}")

    out = Path(typed.get("output", {}).get("dir", "runs"))
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as err:
        raise ConfigError(f"output.dir: cannot create {out}: {err}") from None
    if not os.access(out, os.W_OK):
        raise ConfigError(f"output.dir: {out} is not writable")

    return RunConfig(
        model=model,
        train=train,
        csv=csv,
        synthetic=synthetic,
        ratios=tuple(ratios),
        granularity=data.get("granularity", ""),
        experiment=experiment,
        output_dir=out,
    )


def load_config(path=None, overrides=(), need_data: bool = True) -> RunConfig:
    return parse_config(read_config(path, overrides), need_data=need_data)
