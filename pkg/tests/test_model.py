import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from smamba import tensor as tn
from smamba.exceptions import ContractError, DimensionError
from smamba.model import (
    LinearBaseline,
    LinearConfig,
    ModelConfig,
    PersistenceBaseline,
    SMambaModel,
    attention_vc_layer,
    count_parameters,
    ffn_td_layer,
    fit_linear_least_squares,
    linear_baseline,
    persistence_baseline,
    tokenize,
)
from smamba.tensor import Tensor, finite_difference_check

TINY = dict(lookback=8, horizon=4, n_variates=3, d_model=8, d_state=2, expand=2, d_conv=2, n_layers=1)


def tiny_model(**kw):
    return SMambaModel.initialize(ModelConfig(**{**TINY, **kw}), np.float64)


def state(model):
    return {k: v.data for k, v in model.params.items()}


class TestConfig:
    @pytest.mark.parametrize("bad", [dict(lookback=0), dict(vc_variant="gru"), dict(ffn_hidden=4),
                                     dict(vc_variant="attention", n_heads=3), dict(td_variant="x")])
    def test_rejects(self, bad):
        with pytest.raises(ContractError):
            ModelConfig(**{**TINY, **bad})

    def test_defaults(self):
        c = ModelConfig(lookback=96, horizon=96, n_variates=7)
        assert (c.d_model, c.n_layers, c.hidden, c.d_state, c.expand, c.d_conv) == (128, 2, 256, 16, 2, 4)
        assert not c.ffn_residual and not c.use_d_skip


class TestTokenize:
    def test_hand_matmul(self):
        out = tokenize(Tensor([[[3.0], [4.0]]]), Tensor([[1.0], [1.0]]), Tensor([0.0]))
        assert out.data.tolist() == [[[7.0]]]

    def test_zero(self, rng):
        out = tokenize(Tensor(np.zeros((2, 5, 3))), Tensor(rng.normal(size=(5, 4))), Tensor(np.zeros(4)))
        assert np.all(out.data == 0)

    def test_permutation(self, rng):
        U, w, b = rng.normal(size=(2, 5, 6)), Tensor(rng.normal(size=(5, 4))), Tensor(rng.normal(size=4))
        perm = rng.permutation(6)
        assert np.array_equal(tokenize(Tensor(U[:, :, perm]), w, b).data, tokenize(Tensor(U), w, b).data[:, perm])


class TestFFN:
    def params(self, rng, d=8, h=16, zero=False):
        f = np.zeros if zero else (lambda s: rng.normal(size=s))
        return {
            "norm1.gain": Tensor(rng.normal(size=d) + 1), "norm1.bias": Tensor(rng.normal(size=d)),
            "W1": Tensor(f((d, h))), "b1": Tensor(f((h,))), "W2": Tensor(f((h, d))), "b2": Tensor(f((d,))),
            "norm2.gain": Tensor(rng.normal(size=d) + 1), "norm2.bias": Tensor(rng.normal(size=d)),
        }

    def test_shape(self, rng):
        U = rng.normal(size=(2, 3, 8))
        assert ffn_td_layer(Tensor(U), self.params(rng)).shape == U.shape

    def test_zero_weights_give_constants(self, rng):
        p = self.params(rng, zero=True)
        out = ffn_td_layer(Tensor(np.full((2, 3, 8), 0.7)), p).data
        # the FFN emits zeros, so the last norm sees a constant row and returns its bias
        assert np.array_equal(out, np.broadcast_to(p["norm2.bias"].data, out.shape))

    def test_composed_oracle(self, rng):
        p = self.params(rng)
        U = rng.normal(size=(2, 3, 8))
        ref = oracles.ffn(U, {k: v.data for k, v in p.items()}, 1e-5)
        assert np.abs(ffn_td_layer(Tensor(U), p).data - ref).max() < 1e-12


class TestAttention:
    def params(self, rng, d=8):
        return {f"{w}_{n}": Tensor(rng.normal(size=(d, d) if w == "W" else (d,))) for w in "Wb" for n in "qkvo"}

    def test_single_variate(self, rng):
        p = self.params(rng)
        U = rng.normal(size=(2, 1, 8))
        out = attention_vc_layer(Tensor(U), p, n_heads=2).data
        ref = (U @ p["W_v"].data + p["b_v"].data) @ p["W_o"].data + p["b_o"].data + U
        np.testing.assert_allclose(out, ref, atol=1e-12)

    def test_rows_sum_to_one(self, rng):
        _, w = attention_vc_layer(Tensor(rng.normal(size=(2, 5, 8))), self.params(rng), 4, return_weights=True)
        assert np.abs(w.data.sum(axis=-1) - 1).max() < 1e-6

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_permutation_equivariant(self, seed):
        r = np.random.default_rng(seed)
        p = self.params(r)
        U = r.normal(size=(2, 6, 8))
        perm = r.permutation(6)
        a = attention_vc_layer(Tensor(U[:, perm]), p, 2).data
        b = attention_vc_layer(Tensor(U), p, 2).data[:, perm]
        assert np.abs(a - b).max() < 1e-12


class TestForward:
    @pytest.mark.parametrize("vc", ["bi_mamba", "attention", "none"])
    @pytest.mark.parametrize("td", ["ffn", "none"])
    def test_shape(self, rng, vc, td):
        m = tiny_model(vc_variant=vc, td_variant=td, n_layers=2)
        assert m(rng.normal(size=(2, 8, 5))).shape == (2, 4, 5)

    def test_wrong_lookback(self, rng):
        with pytest.raises(DimensionError):
            tiny_model()(rng.normal(size=(2, 7, 3)))

    def test_composition_oracle(self, rng):
        for n_layers in (1, 2):
            m = tiny_model(n_layers=n_layers)
            U = rng.normal(size=(2, 8, 3))
            ref = oracles.smamba_forward(U, state(m), n_layers, 1e-5)
            assert np.abs(m(U).data - ref).max() < 1e-10

    def test_linear_collapse(self, rng):
        m = tiny_model(vc_variant="none", td_variant="none")
        U = rng.normal(size=(2, 8, 3))
        p = state(m)
        W = p["tokenizer.weight"] @ p["projector.weight"]
        b = p["tokenizer.bias"] @ p["projector.weight"] + p["projector.bias"]
        ref = np.transpose(np.transpose(U, (0, 2, 1)) @ W + b, (0, 2, 1))
        assert np.abs(m(U).data - ref).max() < 1e-12

    @settings(max_examples=30, deadline=None)
    @given(st.floats(-3, 3), st.floats(-3, 3), st.integers(0, 2**31 - 1))
    def test_superposition(self, alpha, beta, seed):
        r = np.random.default_rng(seed)
        m = tiny_model(vc_variant="none", td_variant="none", seed=seed % 1000)
        U1, U2 = r.normal(size=(2, 8, 3)), r.normal(size=(2, 8, 3))
        lhs = m(alpha * U1 + beta * U2).data
        rhs = alpha * m(U1).data + beta * m(U2).data - (alpha + beta - 1) * m(np.zeros_like(U1)).data
        assert np.abs(lhs - rhs).max() < 1e-9

    @pytest.mark.parametrize("vc", ["attention", "none"])
    def test_permutation_equivariance(self, rng, vc):
        m = tiny_model(vc_variant=vc, n_layers=2)
        for _ in range(5):
            U = rng.normal(size=(2, 8, 5))
            perm = rng.permutation(5)
            diff = np.abs(m(U[:, :, perm]).data - m(U).data[:, :, perm]).max()
            # exact up to summation order inside the softmax / matmul kernels
            assert diff < 1e-12 if vc == "attention" else diff == 0

    def test_bi_mamba_is_order_sensitive(self, rng):
        m = tiny_model(n_layers=1)
        U = rng.normal(size=(2, 8, 5))
        perm = np.array([1, 0, 3, 4, 2])
        assert np.abs(m(U[:, :, perm]).data - m(U).data[:, :, perm]).max() > 1e-6

    def test_deterministic(self, rng):
        m = tiny_model()
        U = rng.normal(size=(2, 8, 3))
        assert np.array_equal(m(U).data, m(U.copy()).data)

    def test_gradients(self, rng):
        m = tiny_model(use_d_skip=True)
        U = rng.normal(size=(2, 8, 3))
        Y = rng.normal(size=(2, 4, 3))
        f = lambda: tn.reduce_mean(tn.square(tn.sub(m(U), Y)))
        assert finite_difference_check(f, list(m.params.values()), max_entries=6) < 1e-4

    def test_forward_reports_stage_on_overflow(self, rng):
        m = tiny_model()
        m.params["layers.0.vc.fwd.A_log"].data[:] = 800.0
        with pytest.raises(Exception, match="layer 0 VC"):
            m(rng.normal(size=(1, 8, 3)))

    def test_accepts_other_variate_counts(self, rng):
        m = tiny_model()
        assert m(rng.normal(size=(1, 8, 11))).shape == (1, 4, 11)


class TestBaselines:
    def test_identity_weights_repeat_lookback(self, rng):
        U = rng.normal(size=(2, 5, 3))
        out = linear_baseline(Tensor(U), Tensor(np.eye(5))).data
        assert np.array_equal(out, U)

    def test_zero_weights_constant(self):
        out = linear_baseline(Tensor(np.ones((2, 5, 3))), Tensor(np.zeros((5, 4))), Tensor([1.0, 2.0, 3.0, 4.0]))
        assert np.array_equal(out.data[0, :, 1], [1.0, 2.0, 3.0, 4.0])

    def test_least_squares_recovers_trend(self):
        L, T = 6, 3
        t = np.arange(200, dtype=float)
        series = np.stack([0.5 * t + 2, -1.5 * t + 7], axis=1)
        X = np.stack([series[i:i + L] for i in range(200 - L - T + 1)])
        Y = np.stack([series[i + L:i + L + T] for i in range(200 - L - T + 1)])
        w, b = fit_linear_least_squares(X, Y)
        pred = LinearBaseline.from_arrays(w, b)(X).data
        assert np.abs(pred - Y).max() < 1e-6

    def test_persistence(self):
        out = persistence_baseline(np.array([[[0.0, 0.0], [1.0, 2.0]]]), 3)
        assert out[0].tolist() == [[1, 2], [1, 2], [1, 2]]
        assert PersistenceBaseline(3)(np.ones((1, 4, 2))).shape == (1, 3, 2)

    def test_persistence_constant_and_trend(self):
        assert np.all(persistence_baseline(np.full((1, 5, 2), 3.0), 4) == 3.0)
        t = np.arange(10.0)
        pred = persistence_baseline(t[None, :6, None], 4)
        assert np.mean((pred[0, :, 0] - t[6:]) ** 2) == 7.5


class TestCountParameters:
    def test_linear(self):
        assert count_parameters(LinearBaseline.initialize(LinearConfig(96, 96))) == 9312

    def test_layers_double(self):
        base = {**TINY, "vc_variant": "bi_mamba"}
        c1 = count_parameters(SMambaModel.initialize(ModelConfig(**base, )))
        c2 = count_parameters(SMambaModel.initialize(ModelConfig(**{**base, "n_layers": 2})))
        c4 = count_parameters(SMambaModel.initialize(ModelConfig(**{**base, "n_layers": 4})))
        assert c4 - c2 == 2 * (c2 - c1)
        outside = c1 - (c2 - c1)
        assert c4 - outside == 2 * (c2 - outside)

    def test_independent_of_variates(self):
        a = SMambaModel.initialize(ModelConfig(**{**TINY, "n_variates": 3}))
        b = SMambaModel.initialize(ModelConfig(**{**TINY, "n_variates": 30}))
        assert count_parameters(a) == count_parameters(b)
