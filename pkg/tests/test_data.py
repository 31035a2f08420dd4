import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from smamba.data import (
    STD_FLOOR,
    Coupling,
    SyntheticSpec,
    TimeSeriesDataset,
    classify_periodicity,
    generate_synthetic,
    inverse_permutation,
    lagged_correlation,
    load_csv,
    make_windows,
    periodicity_score,
    reorder_variates,
    split_and_standardize,
    subset_variates,
    window_arrays,
    write_csv,
)
from smamba.exceptions import ContractError, LoadError, ProtocolError


def ds_from(values, names=None):
    values = np.asarray(values, dtype=float)
    return TimeSeriesDataset(values, names or [f"v{i}" for i in range(values.shape[1])])


class TestCsv:
    def test_shape_and_names(self, tmp_path):
        p = tmp_path / "a.csv"
        p.write_text("x,y,z\n" + "\n".join(f"{i},{i * 2},{i * 3}" for i in range(5)) + "\n")
        ds = load_csv(p)
        assert ds.values.shape == (5, 3) and ds.variate_names == ("x", "y", "z")

    def test_timestamp_dropped(self, tmp_path):
        p = tmp_path / "a.csv"
        p.write_text("date,x,y\n2020-01-01,1,2\n2020-01-02,3,4\n")
        ds = load_csv(p)
        assert ds.variate_names == ("x", "y") and ds.values.tolist() == [[1, 2], [3, 4]]

    def test_bad_cell_location(self, tmp_path):
        rows = [["1", "2", "3"] for _ in range(8)]
        rows[6][1] = "abc"
        p = tmp_path / "a.csv"
        p.write_text("a,b,c\n" + "\n".join(",".join(r) for r in rows) + "\n")
        with pytest.raises(LoadError, match=r"row 7, column 2"):
            load_csv(p)

    @pytest.mark.parametrize("body", ["a,b\n1,2\n3\n", "a,b\n1,nan\n", "", "date\n2020\n"])
    def test_rejects(self, tmp_path, body):
        p = tmp_path / "a.csv"
        p.write_text(body)
        with pytest.raises(LoadError):
            load_csv(p)

    def test_missing_file(self, tmp_path):
        with pytest.raises(LoadError):
            load_csv(tmp_path / "nope.csv")

    def test_too_few_rows(self, tmp_path):
        p = tmp_path / "a.csv"
        p.write_text("a\n1\n2\n")
        with pytest.raises(LoadError, match="need at least 5"):
            load_csv(p, min_rows=5)

    @settings(max_examples=25, deadline=None)
    @given(arrays(np.float64, st.tuples(st.integers(1, 20), st.integers(1, 4)),
                  elements=st.floats(-1e12, 1e12, allow_subnormal=False)))
    def test_write_read_exact(self, tmp_path_factory, values):
        p = tmp_path_factory.mktemp("csv") / "v.csv"
        write_csv(p, values, [f"c{i}" for i in range(values.shape[1])])
        assert np.array_equal(load_csv(p).values, values)


class TestSplit:
    def test_train_stats(self, rng):
        ds = split_and_standardize(ds_from(rng.normal(3, 5, size=(500, 4))))
        z = ds.standardized()[: ds.split[0]]
        assert np.abs(z.mean(axis=0)).max() < 1e-9 and np.abs(z.std(axis=0) - 1).max() < 1e-9

    def test_constant_variate(self, rng):
        vals = np.column_stack([np.full(100, 4.0), rng.normal(size=100)])
        ds = split_and_standardize(ds_from(vals))
        assert ds.std[0] == STD_FLOOR and np.all(ds.standardized()[:, 0] == 0)

    @settings(max_examples=30, deadline=None)
    @given(arrays(np.float64, (60, 3), elements=st.floats(-1e3, 1e3)))
    def test_destandardize_inverts(self, vals):
        ds = split_and_standardize(ds_from(vals))
        assert np.abs(ds.destandardize(ds.standardized()) - vals).max() <= 1e-12 * max(1.0, np.abs(vals).max())

    def test_boundaries(self):
        ds = split_and_standardize(ds_from(np.arange(100.0)[:, None]))
        assert ds.split == (70, 80)
        assert ds.bounds("test") == (80, 100)

    def test_stats_ignore_val_and_test(self, rng):
        vals = rng.normal(size=(200, 2))
        a = split_and_standardize(ds_from(vals))
        vals[150:] += 1e6
        b = split_and_standardize(ds_from(vals))
        assert a.mean.tobytes() == b.mean.tobytes() and a.std.tobytes() == b.std.tobytes()

    def test_short_split(self):
        with pytest.raises(ProtocolError):
            split_and_standardize(ds_from(np.zeros((50, 1))), min_len=20)

    def test_bad_ratios(self):
        with pytest.raises(ContractError):
            split_and_standardize(ds_from(np.zeros((50, 1))), (0.5, 0.5, 0.5))


class TestWindows:
    def make(self, n_test, L, T):
        # 10 train steps + 10 val steps + n_test test steps with explicit bounds
        vals = np.arange(float(20 + n_test))[:, None]
        return replace(ds_from(vals), split=(10, 20), mean=np.zeros(1), std=np.ones(1))

    def test_exactly_one_window(self):
        ds = self.make(12, 8, 4)
        assert len(make_windows(ds, "test", 8, 4)) == 1

    def test_hundred_steps(self):
        ds = self.make(100, 96, 4)
        assert len(make_windows(ds, "test", 96, 4)) == 1

    def test_adjacency_and_split_containment(self, rng):
        ds = split_and_standardize(ds_from(rng.normal(size=(300, 2))))
        for split in ("train", "val", "test"):
            lo, hi = ds.bounds(split)
            for w in make_windows(ds, split, 12, 5, stride=3):
                assert lo <= w.origin and w.origin + 17 <= hi
                assert np.array_equal(w.target[0], ds.standardized()[w.origin + 12])

    def test_empty_split_warns(self, caplog):
        ds = self.make(5, 8, 4)
        X, Y, o = window_arrays(ds, "test", 8, 4)
        assert len(X) == 0 and "no windows" in caplog.text

    def test_test_perturbation_never_reaches_train(self, rng):
        vals = rng.normal(size=(300, 2))
        a = split_and_standardize(ds_from(vals))
        vals[240:] = 1e9
        b = split_and_standardize(ds_from(vals))
        assert np.array_equal(window_arrays(a, "train", 12, 5)[1], window_arrays(b, "train", 12, 5)[1])
        assert np.array_equal(window_arrays(a, "val", 12, 5)[0], window_arrays(b, "val", 12, 5)[0])


class TestSynthetic:
    def test_deterministic(self):
        spec = SyntheticSpec(n_steps=300, couplings=(Coupling(0, 3, 0.9),), seed=5)
        assert generate_synthetic(spec).values.tobytes() == generate_synthetic(spec).values.tobytes()

    def test_zero_weight_coupling_is_own_noise(self):
        spec = SyntheticSpec(n_steps=2000, n_periodic=1, n_aperiodic=0, couplings=(Coupling(0, 3, 0.0),),
                             noise_scale=0.5)
        col = generate_synthetic(spec).values[:, 1]
        assert abs(col.std() - 0.5) < 0.05 and abs(lagged_correlation(generate_synthetic(spec).values[:, 0], col, 3)) < 0.1

    def test_planted_lag_correlation(self):
        spec = SyntheticSpec(n_steps=2000, n_periodic=0, n_aperiodic=1, walk_reversion=0.3,
                             couplings=(Coupling(0, 3, 0.9),), noise_scale=0.1)
        vals = generate_synthetic(spec).values
        assert lagged_correlation(vals[:, 0], vals[:, 1], 3) > 0.8

    def test_bad_coupling(self):
        with pytest.raises(ContractError):
            generate_synthetic(SyntheticSpec(n_periodic=1, n_aperiodic=0, couplings=(Coupling(5, 1, 1.0),)))


class TestPeriodicity:
    def test_pure_sine(self):
        t = np.arange(512)
        label, score = classify_periodicity(np.sin(2 * np.pi * t / 32))
        assert label == "periodic" and score > 0.9

    def test_constant(self):
        assert classify_periodicity(np.full(128, 3.0)) == ("aperiodic", 0.0)

    def test_white_noise(self):
        scores = [periodicity_score(np.random.default_rng(s).standard_normal(512)) for s in range(100)]
        assert sum(sc < 0.2 for sc in scores) >= 95

    @settings(max_examples=40, deadline=None)
    @given(st.floats(0.01, 100), st.floats(-1e3, 1e3), st.integers(0, 2**31 - 1))
    def test_scale_and_shift_invariant(self, scale, shift, seed):
        x = np.random.default_rng(seed).standard_normal(256).cumsum()
        assert math.isclose(periodicity_score(x), periodicity_score(scale * x + shift), rel_tol=1e-6, abs_tol=1e-9)

    def test_mean_reverting_walk_is_aperiodic(self):
        spec = SyntheticSpec(n_steps=2000, n_periodic=0, n_aperiodic=4, walk_reversion=0.5)
        vals = generate_synthetic(spec).values
        assert all(classify_periodicity(vals[:, j])[0] == "aperiodic" for j in range(4))


class TestReorder:
    def mixed(self, shuffle=True):
        spec = SyntheticSpec(n_steps=1000, n_periodic=4, n_aperiodic=2, walk_reversion=0.5, periods=(24, 60),
                             shuffle_columns=shuffle, seed=1)
        return split_and_standardize(generate_synthetic(spec))

    def test_original_identity(self):
        ds, perm = reorder_variates(self.mixed(), "original")
        assert perm.tolist() == list(range(6)) and ds.values.tobytes() == self.mixed().values.tobytes()

    @pytest.mark.parametrize("placement", ["aperiodic_middle", "aperiodic_end"])
    def test_inverse_restores(self, placement):
        ds = self.mixed()
        out, perm = reorder_variates(ds, placement)
        back = out.select_variates(inverse_permutation(perm))
        assert np.array_equal(back.values, ds.values) and back.variate_names == ds.variate_names

    def test_aperiodic_end(self):
        out, _ = reorder_variates(self.mixed(), "aperiodic_end")
        assert [n.split("_")[0] for n in out.variate_names] == ["periodic"] * 4 + ["aperiodic"] * 2

    def test_aperiodic_middle(self):
        out, _ = reorder_variates(self.mixed(), "aperiodic_middle")
        assert [n.split("_")[0] for n in out.variate_names] == ["periodic"] * 2 + ["aperiodic"] * 2 + ["periodic"] * 2

    def test_all_periodic_identity(self):
        spec = SyntheticSpec(n_steps=800, n_periodic=5, n_aperiodic=0, periods=(32,))
        ds = split_and_standardize(generate_synthetic(spec))
        for p in ("original", "aperiodic_middle", "aperiodic_end"):
            assert reorder_variates(ds, p)[1].tolist() == list(range(5))


class TestSubset:
    def ds(self, v=10):
        return split_and_standardize(ds_from(np.random.default_rng(0).normal(size=(100, v))))

    def test_full(self):
        sub, full, idx = subset_variates(self.ds(), 1.0, 0)
        assert np.array_equal(sub.values, full.values) and idx.tolist() == list(range(10))

    def test_forty_percent(self):
        assert subset_variates(self.ds(), 0.4, 0)[0].n_variates == 4

    def test_seeded(self):
        assert np.array_equal(subset_variates(self.ds(), 0.4, 7)[2], subset_variates(self.ds(), 0.4, 7)[2])

    def test_stats_follow_subset(self):
        ds = self.ds()
        sub, _, idx = subset_variates(ds, 0.4, 3)
        assert np.array_equal(sub.mean, ds.mean[idx]) and np.array_equal(sub.std, ds.std[idx])
