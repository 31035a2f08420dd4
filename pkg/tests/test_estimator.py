import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from smamba import LinearForecaster, PersistenceForecaster, SMambaForecaster
from smamba.data import SyntheticSpec, generate_synthetic

SERIES = generate_synthetic(SyntheticSpec(n_steps=300, n_periodic=2, n_aperiodic=1, periods=(12, 24),
                                          walk_reversion=0.3)).values

FAST = dict(lookback=16, horizon=4, d_model=8, n_layers=1, d_state=2, d_conv=2, max_epochs=2, patience=2,
            batch_size=32)


def test_params_roundtrip():
    est = SMambaForecaster(**FAST)
    assert est.get_params()["d_model"] == 8
    twin = clone(est)
    assert twin.get_params() == est.get_params()
    est.set_params(d_model=16)
    assert est.d_model == 16


def test_fit_predict_shapes():
    est = SMambaForecaster(**FAST).fit(SERIES)
    assert est.n_features_in_ == 3 and est.report_.best_epoch is not None
    assert est.predict(SERIES[-16:]).shape == (4, 3)
    windows = np.stack([SERIES[i:i + 16] for i in range(5)])
    assert est.predict(windows).shape == (5, 4, 3)


def test_predict_in_original_units_matches_model():
    est = SMambaForecaster(**FAST, precision="float64").fit(SERIES)
    w = SERIES[-16:]
    z = (w - est.mean_) / est.std_
    ref = est.model_(z[None]).data[0] * est.std_ + est.mean_
    assert np.array_equal(est.predict(w), ref)


def test_deterministic():
    a = SMambaForecaster(**FAST).fit(SERIES).predict(SERIES[-16:])
    b = SMambaForecaster(**FAST).fit(SERIES).predict(SERIES[-16:])
    assert np.array_equal(a, b)


def test_unfitted():
    with pytest.raises(NotFittedError):
        SMambaForecaster(**FAST).predict(SERIES[-16:])


@pytest.mark.parametrize("bad", [SERIES[-15:], SERIES[-16:, :2], np.full((16, 3), np.nan)])
def test_rejects_bad_windows(bad):
    est = LinearForecaster(lookback=16, horizon=4).fit(SERIES)
    with pytest.raises(ValueError):
        est.predict(bad)


def test_rejects_short_or_nonfinite_series():
    with pytest.raises(ValueError):
        LinearForecaster(lookback=16, horizon=4).fit(SERIES[:10])
    bad = SERIES.copy()
    bad[5, 1] = np.inf
    with pytest.raises(ValueError):
        LinearForecaster(lookback=16, horizon=4).fit(bad)


def test_linear_recovers_trend():
    t = np.arange(200.0)
    series = np.column_stack([2 * t + 1, -t])
    est = LinearForecaster(lookback=8, horizon=3).fit(series)
    np.testing.assert_allclose(est.predict(series[-8:]), np.column_stack([2 * t[-1] + 1 + 2 * np.arange(1, 4),
                                                                          -(t[-1] + np.arange(1, 4))]), atol=1e-6)


def test_persistence_and_score():
    est = PersistenceForecaster(lookback=4, horizon=2).fit(SERIES)
    w = SERIES[:4]
    assert np.array_equal(est.predict(w), np.repeat(w[-1:], 2, axis=0))
    assert est.score(w[None], np.repeat(w[-1:], 2, axis=0)[None]) == 0.0
