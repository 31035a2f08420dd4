"""S-Mamba forecaster assembly, ablation variants and reference baselines."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as tn
from .exceptions import ComputationError, ContractError, DimensionError
from .ssm import MambaBlockParams, SSMConfig, bidirectional_mamba
from .tensor import Tensor

VC_VARIANTS = ("bi_mamba", "attention", "none")
TD_VARIANTS = ("ffn", "none")


@dataclass(frozen=True)
class ModelConfig:
    lookback: int
    horizon: int
    n_variates: int
    d_model: int = 128
    n_layers: int = 2
    d_state: int = 16
    expand: int = 2
    d_conv: int = 4
    dt_rank: int | None = None
    use_d_skip: bool = False
    ffn_hidden: int | None = None
    ffn_residual: bool = False
    vc_variant: str = "bi_mamba"
    td_variant: str = "ffn"
    n_heads: int = 4
    ln_eps: float = 1e-5
    seed: int = 0

    def __post_init__(self):
        for name in ("lookback", "horizon", "n_variates", "d_model", "n_layers"):
            if getattr(self, name) < 1:
                raise ContractError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.vc_variant not in VC_VARIANTS:
            raise ContractError(f"vc_variant must be one of {VC_VARIANTS}, got {self.vc_variant!r}")
        if self.td_variant not in TD_VARIANTS:
            raise ContractError(f"td_variant must be one of {TD_VARIANTS}, got {self.td_variant!r}")
        if self.hidden < self.d_model:
            raise ContractError(f"ffn_hidden ({self.hidden}) must be >= d_model ({self.d_model})")
        if self.vc_variant == "attention" and (self.n_heads < 1 or self.d_model % self.n_heads):
            raise ContractError(f"n_heads={self.n_heads} must divide d_model={self.d_model}")
        self.ssm  # validates the block hyperparameters

    @property
    def hidden(self) -> int:
        return self.ffn_hidden if self.ffn_hidden is not None else 2 * self.d_model

    @property
    def ssm(self) -> SSMConfig:
        return SSMConfig(
            d_model=self.d_model,
            d_state=self.d_state,
            expand=self.expand,
            d_conv=self.d_conv,
            dt_rank=self.dt_rank,
            use_d_skip=self.use_d_skip,
        )

    def to_dict(self) -> dict:
        return asdict(self)


def _uniform(rng, shape, fan_in):
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def _check_input(U_in: Tensor, lookback: int) -> None:
    if U_in.ndim != 3:
        raise DimensionError(f"expected input [B, L, V], got shape {U_in.shape}")
    if U_in.shape[1] != lookback:
        raise DimensionError(f"input lookback {U_in.shape[1]} != configured {lookback}")
    if U_in.shape[2] < 1:
        raise DimensionError("input has no variates")


@dataclass
class SMambaModel:
    """Parameter set plus config for the full forecaster.

    Parameters live in a flat, insertion-ordered dict so that checkpoints and
    optimizer state iterate them deterministically.  The weights are shared
    across variates, so a trained model accepts any variate count.
    """

    config: ModelConfig
    params: dict[str, Tensor] = field(default_factory=dict)
    dtype: type = np.float32

    @classmethod
    def initialize(cls, config: ModelConfig, dtype=np.float32) -> "SMambaModel":
        rng = np.random.default_rng(config.seed)
        c = config
        d, h = c.d_model, c.hidden
        raw: dict[str, np.ndarray] = {
            "tokenizer.weight": _uniform(rng, (c.lookback, d), c.lookback),
            "tokenizer.bias": _uniform(rng, (d,), c.lookback),
        }
        for i in range(c.n_layers):
            pre = f"layers.{i}"
            if c.vc_variant == "bi_mamba":
                for direction in ("fwd", "bwd"):
                    block = MambaBlockParams.initialize(c.ssm, rng)
                    for name, arr in block.items():
                        raw[f"{pre}.vc.{direction}.{name}"] = arr.data
            elif c.vc_variant == "attention":
                for name in ("q", "k", "v", "o"):
                    raw[f"{pre}.vc.W_{name}"] = _uniform(rng, (d, d), d)
                    raw[f"{pre}.vc.b_{name}"] = _uniform(rng, (d,), d)
            if c.td_variant == "ffn":
                raw[f"{pre}.td.norm1.gain"] = np.ones(d)
                raw[f"{pre}.td.norm1.bias"] = np.zeros(d)
                raw[f"{pre}.td.W1"] = _uniform(rng, (d, h), d)
                raw[f"{pre}.td.b1"] = _uniform(rng, (h,), d)
                raw[f"{pre}.td.W2"] = _uniform(rng, (h, d), h)
                raw[f"{pre}.td.b2"] = _uniform(rng, (d,), h)
                raw[f"{pre}.td.norm2.gain"] = np.ones(d)
                raw[f"{pre}.td.norm2.bias"] = np.zeros(d)
        raw["projector.weight"] = _uniform(rng, (d, c.horizon), d)
        raw["projector.bias"] = _uniform(rng, (c.horizon,), d)
        params = {k: Tensor(v.astype(dtype), requires_grad=True) for k, v in raw.items()}
        return cls(config, params, np.dtype(dtype).type)

    def parameters(self) -> dict[str, Tensor]:
        return self.params

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        if set(state) != set(self.params):
            raise DimensionError(f"state keys differ: {sorted(set(state) ^ set(self.params))}")
        for k, v in state.items():
            if v.shape != self.params[k].shape:
                raise DimensionError(f"{k}: shape {v.shape} != {self.params[k].shape}")
            self.params[k].data = np.array(v, dtype=self.params[k].dtype)

    def astype(self, dtype) -> "SMambaModel":
        params = {k: Tensor(v.data.astype(dtype), requires_grad=True) for k, v in self.params.items()}
        return type(self)(self.config, params, np.dtype(dtype).type)

    def block(self, layer: int, direction: str) -> MambaBlockParams:
        pre = f"layers.{layer}.vc.{direction}."
        arrays = {k[len(pre):]: v for k, v in self.params.items() if k.startswith(pre)}
        return MambaBlockParams(self.config.ssm, arrays)

    def layer_params(self, layer: int, part: str) -> dict[str, Tensor]:
        pre = f"layers.{layer}.{part}."
        return {k[len(pre):]: v for k, v in self.params.items() if k.startswith(pre)}

    def forward(self, U_in) -> Tensor:
        return forward(as_input(U_in, self.dtype), self)

    __call__ = forward


def as_input(U_in, dtype) -> Tensor:
    if isinstance(U_in, Tensor):
        return U_in if U_in.dtype == dtype else Tensor(U_in.data.astype(dtype))
    return Tensor(np.asarray(U_in, dtype=dtype))


# ------------------------------------------------------------------ layers


def tokenize(U_in: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """``[B, L, V]`` series to ``[B, V, D]`` tokens with one shared linear map."""
    if U_in.ndim != 3 or U_in.shape[1] != weight.shape[0]:
        raise DimensionError(f"tokenize input {U_in.shape} does not match weight {weight.shape}")
    return tn.add(tn.matmul(tn.transpose(U_in, (0, 2, 1)), weight), bias)


def ffn_td_layer(U: Tensor, p: dict[str, Tensor], eps: float = 1e-5, residual: bool = False) -> Tensor:
    x = tn.layer_norm(U, p["norm1.gain"], p["norm1.bias"], eps)
    f = tn.add(tn.matmul(tn.silu(tn.add(tn.matmul(x, p["W1"]), p["b1"])), p["W2"]), p["b2"])
    if residual:
        f = tn.add(f, x)
    return tn.layer_norm(f, p["norm2.gain"], p["norm2.bias"], eps)


def _split_heads(x: Tensor, n_heads: int) -> Tensor:
    b, v, d = x.shape
    return tn.transpose(tn.reshape(x, (b, v, n_heads, d // n_heads)), (0, 2, 1, 3))


def attention_vc_layer(U: Tensor, p: dict[str, Tensor], n_heads: int, return_weights: bool = False):
    """Unmasked multi-head self-attention across variate tokens, plus residual."""
    b, v, d = U.shape
    if d % n_heads:
        raise DimensionError(f"n_heads={n_heads} does not divide {d}")
    q, k, val = (_split_heads(tn.add(tn.matmul(U, p[f"W_{n}"]), p[f"b_{n}"]), n_heads) for n in "qkv")
    scale = np.asarray(1.0 / math.sqrt(d // n_heads), dtype=U.dtype)
    scores = tn.mul(tn.matmul(q, tn.transpose(k, (0, 1, 3, 2))), scale)
    weights = tn.softmax(scores, axis=-1)
    ctx = tn.reshape(tn.transpose(tn.matmul(weights, val), (0, 2, 1, 3)), (b, v, d))
    out = tn.add(tn.add(tn.matmul(ctx, p["W_o"]), p["b_o"]), U)
    return (out, weights) if return_weights else out


def project(U: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """``[B, V, D]`` tokens to a ``[B, T, V]`` forecast."""
    return tn.transpose(tn.add(tn.matmul(U, weight), bias), (0, 2, 1))


def forward(U_in: Tensor, model: SMambaModel) -> Tensor:
    c = model.config
    _check_input(U_in, c.lookback)
    p = model.params
    stage = "tokenizer"
    try:
        U = tokenize(U_in, p["tokenizer.weight"], p["tokenizer.bias"])
        for i in range(c.n_layers):
            stage = f"layer {i} VC ({c.vc_variant})"
            if c.vc_variant == "bi_mamba":
                U = bidirectional_mamba(U, model.block(i, "fwd"), model.block(i, "bwd"))
            elif c.vc_variant == "attention":
                U = attention_vc_layer(U, model.layer_params(i, "vc"), c.n_heads)
            stage = f"layer {i} TD ({c.td_variant})"
            if c.td_variant == "ffn":
                U = ffn_td_layer(U, model.layer_params(i, "td"), c.ln_eps, c.ffn_residual)
        stage = "projector"
        return project(U, p["projector.weight"], p["projector.bias"])
    except ComputationError as err:
        raise ComputationError(f"non-finite values in {stage}: {err}") from err


# --------------------------------------------------------------- baselines


@dataclass(frozen=True)
class LinearConfig:
    lookback: int
    horizon: int
    seed: int = 0


@dataclass
class LinearBaseline:
    """Shared per-variate linear map from lookback to horizon."""

    config: LinearConfig
    params: dict[str, Tensor] = field(default_factory=dict)
    dtype: type = np.float32

    @classmethod
    def initialize(cls, config: LinearConfig, dtype=np.float32) -> "LinearBaseline":
        rng = np.random.default_rng(config.seed)
        w = _uniform(rng, (config.lookback, config.horizon), config.lookback)
        b = _uniform(rng, (config.horizon,), config.lookback)
        params = {
            "weight": Tensor(w.astype(dtype), requires_grad=True),
            "bias": Tensor(b.astype(dtype), requires_grad=True),
        }
        return cls(config, params, np.dtype(dtype).type)

    @classmethod
    def from_arrays(cls, weight, bias, dtype=np.float64) -> "LinearBaseline":
        weight = np.asarray(weight, dtype=dtype)
        bias = np.asarray(bias, dtype=dtype)
        cfg = LinearConfig(weight.shape[0], weight.shape[1])
        return cls(cfg, {"weight": Tensor(weight, True), "bias": Tensor(bias, True)}, np.dtype(dtype).type)

    def parameters(self) -> dict[str, Tensor]:
        return self.params

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, state):
        for k, v in state.items():
            self.params[k].data = np.array(v, dtype=self.params[k].dtype)

    def forward(self, U_in) -> Tensor:
        U_in = as_input(U_in, self.dtype)
        _check_input(U_in, self.config.lookback)
        return linear_baseline(U_in, self.params["weight"], self.params["bias"])

    __call__ = forward


def linear_baseline(U_in: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    out = tn.matmul(tn.transpose(U_in, (0, 2, 1)), weight)
    if bias is not None:
        out = tn.add(out, bias)
    return tn.transpose(out, (0, 2, 1))


def fit_linear_least_squares(X: np.ndarray, Y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Closed-form per-variate linear map from windows ``X[n, L, V]`` to ``Y[n, T, V]``."""
    xs = np.transpose(X, (0, 2, 1)).reshape(-1, X.shape[1])
    ys = np.transpose(Y, (0, 2, 1)).reshape(-1, Y.shape[1])
    design = np.hstack([xs, np.ones((xs.shape[0], 1))])
    coef, *_ = np.linalg.lstsq(design, ys, rcond=None)
    return coef[:-1], coef[-1]


@dataclass
class PersistenceBaseline:
    """Repeats the last observed row for every horizon step."""

    horizon: int
    lookback: int | None = None
    params: dict = field(default_factory=dict)

    def parameters(self) -> dict[str, Tensor]:
        return self.params

    def forward(self, U_in) -> Tensor:
        return Tensor(persistence_baseline(getattr(U_in, "data", U_in), self.horizon))

    __call__ = forward


def persistence_baseline(U_in: np.ndarray, horizon: int) -> np.ndarray:
    U_in = np.asarray(U_in)
    if U_in.ndim != 3:
        raise DimensionError(f"expected [B, L, V], got {U_in.shape}")
    return np.repeat(U_in[:, -1:, :], horizon, axis=1)


def count_parameters(model) -> int:
    return int(sum(p.size for p in model.parameters().values()))
