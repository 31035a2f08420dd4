"""Selective state-space primitives and the Mamba block."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as tn
from .exceptions import ComputationError, ContractError, DimensionError
from .tensor import Tensor

# below this |delta * a| the zero-order-hold input gain uses its first-order limit
TAYLOR_THRESHOLD = 1e-8


@dataclass(frozen=True)
class SSMConfig:
    d_model: int
    d_state: int = 16
    expand: int = 2
    d_conv: int = 4
    dt_rank: int | None = None
    use_d_skip: bool = False
    dt_min: float = 1e-3
    dt_max: float = 1e-1

    def __post_init__(self):
        for name in ("d_model", "d_state", "expand", "d_conv"):
            if getattr(self, name) < 1:
                raise ContractError(f"{name} must be positive, got {getattr(self, name)}")
        if self.dt_rank is not None and not 1 <= self.dt_rank <= self.d_inner:
            raise ContractError(f"dt_rank must lie in [1, {self.d_inner}], got {self.dt_rank}")
        if not 0 < self.dt_min <= self.dt_max:
            raise ContractError("need 0 < dt_min <= dt_max")

    @property
    def d_inner(self) -> int:
        return self.expand * self.d_model

    @property
    def rank(self) -> int:
        return self.dt_rank if self.dt_rank is not None else math.ceil(self.d_model / 16)


PARAM_NAMES = ("W_in", "conv_kernel", "conv_bias", "A_log", "W_B", "W_C", "W_dt", "W_dt_up", "dt_bias", "D_skip", "W_out")


class MambaBlockParams:
    """Learnable arrays of one Mamba block, keyed by :data:`PARAM_NAMES`.

    ``D_skip`` is only present when the config enables the skip term.
    """

    def __init__(self, config: SSMConfig, arrays: dict[str, Tensor]):
        self.config = config
        self.arrays = dict(arrays)
        self._check()

    def _check(self):
        c = self.config
        d, ed, n, k, r = c.d_model, c.d_inner, c.d_state, c.d_conv, c.rank
        expected = {
            "W_in": (d, 2 * ed),
            "conv_kernel": (ed, k),
            "conv_bias": (ed,),
            "A_log": (ed, n),
            "W_B": (ed, n),
            "W_C": (ed, n),
            "W_dt": (ed, r),
            "W_dt_up": (r, ed),
            "dt_bias": (ed,),
            "W_out": (ed, d),
        }
        if c.use_d_skip:
            expected["D_skip"] = (ed,)
        if set(self.arrays) != set(expected):
            raise DimensionError(f"block arrays {sorted(self.arrays)} != {sorted(expected)}")
        for name, shape in expected.items():
            if self.arrays[name].shape != shape:
                raise DimensionError(f"{name} has shape {self.arrays[name].shape}, expected {shape}")

    def __getitem__(self, name: str) -> Tensor:
        return self.arrays[name]

    def items(self):
        return ((name, self.arrays[name]) for name in PARAM_NAMES if name in self.arrays)

    @classmethod
    def initialize(cls, config: SSMConfig, rng: np.random.Generator, dtype=np.float64) -> "MambaBlockParams":
        d, ed, n, k, r = config.d_model, config.d_inner, config.d_state, config.d_conv, config.rank

        def uniform(shape, fan_in):
            bound = 1.0 / math.sqrt(fan_in)
            return rng.uniform(-bound, bound, size=shape)

        # softplus(dt_bias) is log-uniform in [dt_min, dt_max]
        dt = np.exp(rng.uniform(math.log(config.dt_min), math.log(config.dt_max), size=ed))
        arrays = {
            "W_in": uniform((d, 2 * ed), d),
            "conv_kernel": uniform((ed, k), k),
            "conv_bias": uniform((ed,), k),
            "A_log": np.log(np.tile(np.arange(1, n + 1, dtype=np.float64), (ed, 1))),
            "W_B": uniform((ed, n), ed),
            "W_C": uniform((ed, n), ed),
            "W_dt": uniform((ed, r), ed),
            "W_dt_up": uniform((r, ed), r),
            "dt_bias": dt + np.log(-np.expm1(-dt)),
            "W_out": uniform((ed, d), ed),
        }
        if config.use_d_skip:
            arrays["D_skip"] = np.ones(ed)
        return cls(config, {k_: Tensor(v.astype(dtype), requires_grad=True) for k_, v in arrays.items()})

    @classmethod
    def zeros(cls, config: SSMConfig, dtype=np.float64) -> "MambaBlockParams":
        proto = cls.initialize(config, np.random.default_rng(0), dtype)
        return cls(config, {k: Tensor(np.zeros_like(v.data), requires_grad=True) for k, v in proto.arrays.items()})


# ---------------------------------------------------------------- discretize


def _taylor_mask(delta: np.ndarray, a: np.ndarray, da: np.ndarray) -> np.ndarray | None:
    """Mask of entries with ``|delta * a|`` under the threshold, or ``None`` if there are none."""
    # cheap bound first: the full 4-d comparison is rarely needed
    if delta.size and a.size and float(np.abs(delta).min()) * float(np.abs(a).min()) >= TAYLOR_THRESHOLD:
        return None
    small = np.abs(da) < TAYLOR_THRESHOLD
    return small if small.any() else None


def discretize(delta: Tensor, A: Tensor, B: Tensor) -> tuple[Tensor, Tensor]:
    """Zero-order-hold discretization of a diagonal state matrix.

    ``delta[B, S, ED]``, ``A[ED, N]`` and ``B[B, S, N]`` give
    ``A_bar = exp(delta * a)`` and ``B_bar = (exp(delta * a) - 1) / a * b``, both
    shaped ``[B, S, ED, N]``.  Where ``|delta * a|`` is below
    :data:`TAYLOR_THRESHOLD` the gain uses its second-order expansion
    ``delta * (1 + delta * a / 2)``, which removes the 0/0 at ``delta * a = 0``.
    """
    if delta.ndim != 3 or A.ndim != 2 or B.ndim != 3:
        raise DimensionError(f"discretize expects [B,S,ED], [ED,N], [B,S,N]; got {delta.shape}, {A.shape}, {B.shape}")
    if delta.shape[2] != A.shape[0] or B.shape[:2] != delta.shape[:2] or B.shape[2] != A.shape[1]:
        raise DimensionError(f"discretize extents disagree: {delta.shape}, {A.shape}, {B.shape}")
    dd, a, bd = delta.data, A.data, B.data
    if np.isnan(dd).any() or np.isnan(a).any() or np.isnan(bd).any():
        raise ComputationError("discretize received NaN input")
    dl = dd[..., None]
    da = dl * a
    a_bar = np.exp(da)
    small = _taylor_mask(dd, a, da)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv_a = 1.0 / a
        gain = np.expm1(da) * inv_a
    if small is not None:
        gain = np.where(small, dl * (1.0 + 0.5 * da), gain)
    b_bar = gain * bd[:, :, None, :]

    def backward_a(g):
        gd = g * a_bar
        return np.einsum("bsdn,dn->bsd", gd, a), np.einsum("bsdn,bsd->dn", gd, dd), None

    def backward_b(g):
        # d gain / d delta = exp(delta a); d gain / d a = (delta exp(delta a) - gain) / a
        gb = g * bd[:, :, None, :]
        gba = gb * a_bar
        if small is not None:
            gba_delta = np.where(small, gb * (1.0 + da), gba)
            dda = np.where(small, 0.5 * dl * dl, (dl * a_bar - gain) * inv_a)
            dA = np.einsum("bsdn,bsdn->dn", gb, dda)
        else:
            gba_delta = gba
            dA = (np.einsum("bsdn,bsd->dn", gba, dd) - np.einsum("bsdn,bsdn->dn", gb, gain)) * inv_a
        return np.einsum("bsdn->bsd", gba_delta), dA, np.einsum("bsdn,bsdn->bsn", g, gain)

    return (
        tn.custom_op("discretize_A", a_bar, (delta, A, B), backward_a),
        tn.custom_op("discretize_B", b_bar, (delta, A, B), backward_b),
    )


# ---------------------------------------------------------------------- scan


def selective_scan(A_bar: Tensor, B_bar: Tensor, C: Tensor, x: Tensor, D_skip: Tensor | None = None) -> Tensor:
    """Run ``h_t = A_bar_t * h_{t-1} + B_bar_t * x_t``, ``y_t = C_t . h_t`` from ``h_0 = 0``.

    The recurrence is sequential over the second axis and vectorized over the
    batch, channel and state axes.  With ``D_skip`` the output gains ``D * x``.
    """
    if A_bar.ndim != 4 or A_bar.shape != B_bar.shape:
        raise DimensionError(f"A_bar {A_bar.shape} and B_bar {B_bar.shape} must share a [B,S,ED,N] shape")
    bsz, s, ed, n = A_bar.shape
    if C.shape != (bsz, s, n) or x.shape != (bsz, s, ed):
        raise DimensionError(f"scan extents disagree: C {C.shape}, x {x.shape}, A_bar {A_bar.shape}")
    if D_skip is not None and D_skip.shape != (ed,):
        raise DimensionError(f"D_skip shape {D_skip.shape} != ({ed},)")
    ad, bd, cd, xd = A_bar.data, B_bar.data, C.data, x.data
    dtype = np.result_type(ad, bd, cd, xd)
    hs = np.empty((bsz, s, ed, n), dtype=dtype)
    h = np.zeros((bsz, ed, n), dtype=dtype)
    for t in range(s):
        h = ad[:, t] * h + bd[:, t] * xd[:, t, :, None]
        hs[:, t] = h
    y = np.einsum("bsdn,bsn->bsd", hs, cd)
    inputs = [A_bar, B_bar, C, x]
    if D_skip is not None:
        y = y + D_skip.data * xd
        inputs.append(D_skip)

    def backward(g):
        dC = np.einsum("bsd,bsdn->bsn", g, hs)
        dh = np.empty_like(hs)
        acc = np.zeros((bsz, ed, n), dtype=dtype)
        for t in range(s - 1, -1, -1):
            acc = g[:, t, :, None] * cd[:, t, None, :] + acc
            dh[:, t] = acc
            acc = acc * ad[:, t]
        dA = np.empty_like(hs)
        dA[:, 0] = 0.0
        np.multiply(dh[:, 1:], hs[:, :-1], out=dA[:, 1:])
        dB = dh * xd[..., None]
        dx = np.einsum("bsdn,bsdn->bsd", dh, bd)
        grads = [dA, dB, dC, dx]
        if D_skip is not None:
            dx = dx + g * D_skip.data
            grads[3] = dx
            grads.append((g * xd).sum(axis=(0, 1)))
        return grads

    return tn.custom_op("selective_scan", y, tuple(inputs), backward)


# --------------------------------------------------------------------- block


def state_matrix(params: MambaBlockParams) -> Tensor:
    """``A = -exp(A_log)``, strictly negative."""
    return tn.neg(tn.exp(params["A_log"]))


def mamba_block(X: Tensor, params: MambaBlockParams) -> Tensor:
    """Map ``X[B, S, D]`` through one Mamba block; causal along ``S``."""
    c = params.config
    if X.ndim != 3 or X.shape[2] != c.d_model:
        raise DimensionError(f"mamba_block input {X.shape} does not match d_model={c.d_model}")
    if X.shape[1] < 1:
        raise DimensionError("mamba_block needs at least one position")
    ed = c.d_inner
    xz = tn.matmul(X, params["W_in"])
    x = tn.slice_axis(xz, -1, 0, ed)
    z = tn.slice_axis(xz, -1, ed, 2 * ed)
    xc = tn.silu(tn.causal_depthwise_conv1d(x, params["conv_kernel"], params["conv_bias"]))
    B = tn.matmul(xc, params["W_B"])
    C = tn.matmul(xc, params["W_C"])
    delta = tn.softplus(tn.add(tn.matmul(tn.matmul(xc, params["W_dt"]), params["W_dt_up"]), params["dt_bias"]))
    A_bar, B_bar = discretize(delta, state_matrix(params), B)
    y = selective_scan(A_bar, B_bar, C, xc, params.arrays.get("D_skip"))
    return tn.matmul(tn.mul(y, tn.silu(z)), params["W_out"])


def bidirectional_mamba(U: Tensor, fwd: MambaBlockParams, bwd: MambaBlockParams) -> Tensor:
    """Sum of a forward and a reversed scan over the token axis, plus the input."""
    y_fwd = mamba_block(U, fwd)
    y_bwd = tn.reverse_axis(mamba_block(tn.reverse_axis(U, 1), bwd), 1)
    return tn.add(tn.add(y_fwd, y_bwd), U)
