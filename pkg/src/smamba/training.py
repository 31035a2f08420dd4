"""Loss, metrics, Adam, the training loop and efficiency measurements."""

from __future__ import annotations

import json
import logging
import statistics
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as tn
from .data import SyntheticSpec, TimeSeriesDataset, generate_synthetic, split_and_standardize, window_arrays
from .exceptions import ComputationError, ContractError, DivergenceError
from .model import ModelConfig, SMambaModel, count_parameters
from .tensor import GradientTape, Tensor, no_grad

logger = logging.getLogger(__name__)

PRECISIONS = {"float32": np.float32, "float64": np.float64}


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 16
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    max_epochs: int = 200
    patience: int = 5
    seed: int = 0
    precision: str = "float32"
    eval_batch_size: int = 256

    def __post_init__(self):
        if self.batch_size < 1 or self.eval_batch_size < 1:
            raise ContractError("batch sizes must be positive")
        if self.lr <= 0:
            raise ContractError(f"lr must be positive, got {self.lr}")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ContractError("Adam betas must lie in (0, 1)")
        if self.eps <= 0:
            raise ContractError("eps must be positive")
        if self.max_epochs < 0 or self.patience < 1:
            raise ContractError("max_epochs must be >= 0 and patience >= 1")
        if self.max_epochs and self.patience > self.max_epochs:
            raise ContractError(f"patience ({self.patience}) exceeds max_epochs ({self.max_epochs})")
        if self.precision not in PRECISIONS:
            raise ContractError(f"precision must be one of {sorted(PRECISIONS)}")

    @property
    def dtype(self):
        return PRECISIONS[self.precision]


@dataclass
class TrainReport:
    epochs: list[dict] = field(default_factory=list)
    best_epoch: int | None = None
    best_val_loss: float | None = None
    stopped_early: bool = False
    test: dict = field(default_factory=dict)
    n_parameters: int = 0

    def summary(self) -> dict:
        """Timing-free record; identical across reruns with the same seed."""
        return {
            "best_epoch": self.best_epoch,
            "best_val_loss": self.best_val_loss,
            "epochs_run": len(self.epochs),
            "stopped_early": self.stopped_early,
            "final_train_loss": self.epochs[-1]["train_loss"] if self.epochs else None,
            "test": self.test,
            "n_parameters": self.n_parameters,
        }

    def log_lines(self) -> list[str]:
        lines = [json.dumps({"event": "epoch", **e}, sort_keys=True) for e in self.epochs]
        lines.append(json.dumps({"event": "summary", **self.summary()}, sort_keys=True))
        return lines

    def to_dict(self) -> dict:
        return asdict(self)


# ------------------------------------------------------------------- metrics


def mse(pred, target) -> float:
    d = np.asarray(pred, dtype=np.float64) - np.asarray(target, dtype=np.float64)
    return float(np.mean(d * d))


def mae(pred, target) -> float:
    return float(np.mean(np.abs(np.asarray(pred, dtype=np.float64) - np.asarray(target, dtype=np.float64))))


def mse_loss(pred: Tensor, target) -> Tensor:
    target = target if isinstance(target, Tensor) else Tensor(np.asarray(target, dtype=pred.dtype))
    return tn.reduce_mean(tn.square(tn.sub(pred, target)))


# --------------------------------------------------------------------- adam


def adam_step(params: dict, grads: dict, state: dict, t: int, config: TrainConfig) -> None:
    """One in-place bias-corrected Adam update; ``t`` counts from 1.

    ``state`` maps parameter names to ``(m, v)`` and is filled lazily.
    """
    b1, b2 = config.beta1, config.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if not np.all(np.isfinite(g)):
            raise DivergenceError(f"non-finite gradient for parameter {name}")
        m, v = state.get(name) or (np.zeros_like(p.data), np.zeros_like(p.data))
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        state[name] = (m, v)
        p.data = (p.data - config.lr * (m / c1) / (np.sqrt(v / c2) + config.eps)).astype(p.data.dtype)


class Adam:
    def __init__(self, params: dict, config: TrainConfig):
        self.params = params
        self.config = config
        self.state: dict = {}
        self.t = 0

    def step(self) -> None:
        self.t += 1
        grads = {k: p.grad for k, p in self.params.items()}
        adam_step(self.params, grads, self.state, self.t, self.config)
        for p in self.params.values():
            p.grad = None


# ---------------------------------------------------------------- evaluation


def predict_windows(model, X: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Forecast every window in ``X[n, L, V]`` without recording gradients."""
    out = []
    with no_grad():
        for i in range(0, len(X), batch_size):
            out.append(np.asarray(model.forward(X[i:i + batch_size]).data, dtype=np.float64))
    if not out:
        return np.empty((0, getattr(model.config, "horizon", 0), X.shape[2]))
    return np.concatenate(out, axis=0)


def evaluate(
    model, ds: TimeSeriesDataset, split: str = "test", batch_size: int = 256, return_predictions: bool = False
):
    """MSE/MAE over every window of ``split`` on standardized and original scales."""
    L, T = _lengths(model)
    X, Y, origins = window_arrays(ds, split, L, T)
    if len(X) == 0:
        res = {"mse": None, "mae": None, "mse_orig": None, "mae_orig": None, "n_windows": 0}
        return (res, np.empty_like(Y)) if return_predictions else res
    pred = predict_windows(model, X, batch_size)
    pred_o, Y_o = ds.destandardize(pred), ds.destandardize(Y)
    res = {
        "mse": mse(pred, Y),
        "mae": mae(pred, Y),
        "mse_orig": mse(pred_o, Y_o),
        "mae_orig": mae(pred_o, Y_o),
        "n_windows": int(len(X)),
    }
    return (res, pred) if return_predictions else res


def _lengths(model) -> tuple[int, int]:
    cfg = getattr(model, "config", None)
    if cfg is not None and hasattr(cfg, "lookback"):
        return cfg.lookback, cfg.horizon
    return model.lookback, model.horizon


# ------------------------------------------------------------------ training


def _cast_model(model, dtype) -> None:
    for p in model.parameters().values():
        p.data = p.data.astype(dtype)
    if hasattr(model, "dtype"):
        model.dtype = np.dtype(dtype).type


def train(model, ds: TimeSeriesDataset, config: TrainConfig, on_epoch=None) -> TrainReport:
    """Fit ``model`` in place on the train split; the best-validation weights are restored.

    Targets are standardized.  Validation and test windows never contribute
    gradients; test metrics are computed once, after the best weights are restored.
    """
    if not ds.is_standardized or ds.split is None:
        raise ContractError("train needs a split, standardized dataset")
    dtype = config.dtype
    _cast_model(model, dtype)
    L, T = _lengths(model)
    X, Y, _ = window_arrays(ds, "train", L, T)
    if len(X) == 0:
        raise ContractError(f"train split has no windows for L={L}, T={T}")
    X, Y = X.astype(dtype), Y.astype(dtype)
    Xv, Yv, _ = window_arrays(ds, "val", L, T)
    params = model.parameters()
    opt = Adam(params, config)
    rng = np.random.default_rng(config.seed)
    report = TrainReport(n_parameters=count_parameters(model))
    best_state = None
    bad = 0

    for epoch in range(1, config.max_epochs + 1):
        t0 = time.perf_counter()
        order = rng.permutation(len(X))
        total = 0.0
        for i in range(0, len(order), config.batch_size):
            idx = order[i:i + config.batch_size]
            try:
                with GradientTape() as tape:
                    loss = mse_loss(model.forward(X[idx]), Y[idx])
                lv = float(loss.data)
                if not np.isfinite(lv):
                    raise ComputationError("loss is not finite")
                tape.backward(loss)
                opt.step()
            except (ComputationError, DivergenceError) as err:
                raise DivergenceError(f"training diverged in epoch {epoch}: {err}", report) from err
            total += lv * len(idx)
        train_loss = total / len(X)
        if len(Xv):
            val_loss = mse(predict_windows(model, Xv.astype(dtype), config.eval_batch_size), Yv)
        else:
            val_loss = train_loss
        rec = {
            "epoch": epoch,
            "train_loss": train_loss,
            "val_loss": val_loss,
            "seconds": time.perf_counter() - t0,
        }
        report.epochs.append(rec)
        logger.info("epoch %d train %.6f val %.6f (%.2fs)", epoch, train_loss, val_loss, rec["seconds"])
        if on_epoch is not None:
            on_epoch(rec)
        if report.best_val_loss is None or val_loss < report.best_val_loss:
            report.best_val_loss = val_loss
            report.best_epoch = epoch
            best_state = {k: p.data.copy() for k, p in params.items()}
            bad = 0
        else:
            bad += 1
            if bad >= config.patience:
                report.stopped_early = True
                break

    if best_state is not None:
        for k, p in params.items():
            p.data = best_state[k]
    report.test = evaluate(model, ds, "test", config.eval_batch_size)
    return report


# ----------------------------------------------------------------- benchmark

BENCH_HEADER = ("variant", "n_variates", "median_seconds", "params", "steps", "repeats")


def benchmark_scaling(
    variants,
    n_variates_list,
    base: dict,
    steps: int = 50,
    repeats: int = 3,
    batch_size: int = 16,
    seed: int = 0,
    precision: str = "float32",
) -> list[dict]:
    """Median wall time of ``steps`` training steps for each (VC variant, V).

    ``base`` holds :class:`ModelConfig` keyword arguments other than
    ``n_variates`` and ``vc_variant``.
    """
    if repeats < 1:
        raise ContractError("repeats must be >= 1")
    if steps < 1:
        raise ContractError("steps must be >= 1")
    cfg = TrainConfig(batch_size=batch_size, seed=seed, precision=precision, max_epochs=1, patience=1)
    rows = []
    for variant in variants:
        for v in n_variates_list:
            mc = ModelConfig(**{**base, "n_variates": v, "vc_variant": variant, "seed": seed})
            need = mc.lookback + mc.horizon + batch_size
            n_steps = max(need * 10, 10 * (mc.lookback + mc.horizon))
            ds = split_and_standardize(
                generate_synthetic(SyntheticSpec(n_steps=n_steps, n_periodic=v - v // 2, n_aperiodic=v // 2,
                                                 walk_reversion=0.5, seed=seed)),
                min_len=mc.lookback + mc.horizon,
            )
            X, Y, _ = window_arrays(ds, "train", mc.lookback, mc.horizon)
            X, Y = X.astype(cfg.dtype), Y.astype(cfg.dtype)
            times = []
            n_params = 0
            for _ in range(repeats):
                model = SMambaModel.initialize(mc, cfg.dtype)
                n_params = count_parameters(model)
                opt = Adam(model.parameters(), cfg)
                order = np.random.default_rng(seed).permutation(len(X))
                t0 = time.perf_counter()
                for s in range(steps):
                    idx = np.take(order, np.arange(s * batch_size, (s + 1) * batch_size), mode="wrap")
                    with GradientTape() as tape:
                        loss = mse_loss(model.forward(X[idx]), Y[idx])
                    tape.backward(loss)
                    opt.step()
                times.append(time.perf_counter() - t0)
            rows.append({
                "variant": variant,
                "n_variates": v,
                "median_seconds": statistics.median(times),
                "params": n_params,
                "steps": steps,
                "repeats": repeats,
                "times": times,
            })
            logger.info("bench %s V=%d median %.3fs", variant, v, rows[-1]["median_seconds"])
    return rows


def loglog_slope(xs, ys) -> float:
    """Least-squares slope of ``log(ys)`` against ``log(xs)``."""
    return float(np.polyfit(np.log(np.asarray(xs, float)), np.log(np.asarray(ys, float)), 1)[0])


def scaling_slopes(rows: list[dict]) -> dict[str, float]:
    out = {}
    for variant in dict.fromkeys(r["variant"] for r in rows):
        sel = [r for r in rows if r["variant"] == variant]
        out[variant] = loglog_slope([r["n_variates"] for r in sel], [r["median_seconds"] for r in sel])
    return out
