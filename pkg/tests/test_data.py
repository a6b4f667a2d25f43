import math

import numpy as np
import pytest

from dncl.data import (
    DataError,
    Dataset,
    ScalarToySpec,
    SpiralsSpec,
    Standardizer,
    gen_scalar_toy,
    gen_spirals,
    load_csv,
    spiral_point,
    split,
)
from dncl.ensemble import scalar_dynamics


class TestSpirals:
    def test_origin_at_t0(self):
        for arm in (0, 1):
            assert np.linalg.norm(spiral_point(0.0, arm, 2.0)) == 0.0

    def test_arms_are_reflections(self):
        t = np.linspace(0, 4 * math.pi, 50)
        np.testing.assert_allclose(spiral_point(t, 1, 2.0), -spiral_point(t, 0, 2.0), atol=1e-15)

    def test_radius_grows_to_one(self):
        t = np.array([0.0, 2 * math.pi, 4 * math.pi])
        np.testing.assert_allclose(np.linalg.norm(spiral_point(t, 0, 2.0), axis=1), [0.0, 0.5, 1.0], atol=1e-15)

    def test_class_balance(self):
        ds = gen_spirals(SpiralsSpec(points_per_arm=37, seed=2))
        assert len(ds) == 74
        assert (ds.targets == 1).sum() == 37 and (ds.targets == -1).sum() == 37

    def test_noise_free_points_on_curve(self):
        ds = gen_spirals(SpiralsSpec(points_per_arm=50, noise=0.0, seed=1))
        for x, label in zip(ds.features, ds.targets[:, 0]):
            arm = 0 if label > 0 else 1
            r = np.linalg.norm(x)
            t = r * 2.0 * 2 * math.pi
            np.testing.assert_allclose(spiral_point(t, arm, 2.0), x, atol=1e-12)

    def test_deterministic(self):
        a, b = gen_spirals(SpiralsSpec(seed=5)), gen_spirals(SpiralsSpec(seed=5))
        assert a.features.tobytes() == b.features.tobytes()
        assert not np.array_equal(a.features, gen_spirals(SpiralsSpec(seed=6)).features)

    def test_invalid_spec(self):
        with pytest.raises(ValueError):
            SpiralsSpec(points_per_arm=0)
        with pytest.raises(ValueError):
            SpiralsSpec(noise=-0.1)


class TestScalarToy:
    def test_shape(self):
        ds, init = gen_scalar_toy(ScalarToySpec())
        assert ds.targets.tolist() == [[-1.5]] and init.shape == (6,)
        assert np.all((init >= -4) & (init <= 1))

    def test_closed_form(self):
        _, init = gen_scalar_toy(ScalarToySpec())
        final = scalar_dynamics(init, -1.5, 0.0, 0.1, 30)[-1]
        np.testing.assert_allclose(np.abs(final + 1.5), 0.9**30 * np.abs(init + 1.5), atol=1e-12)

    def test_single_regressor_has_no_diversity_term(self):
        _, init = gen_scalar_toy(ScalarToySpec(regressors=1))
        a = scalar_dynamics(init, -1.5, 0.0, 0.1, 30)
        b = scalar_dynamics(init, -1.5, 0.4, 0.1, 30)
        assert np.array_equal(a, b)


def write(tmp_path, text, name="d.csv"):
    p = tmp_path / name
    p.write_text(text)
    return p


class TestCsv:
    def test_two_rows_no_header(self, tmp_path):
        ds = load_csv(write(tmp_path, "1,2,3\n4,5,6\n"), [0, 1], [2])
        assert len(ds) == 2
        assert ds.features.tolist() == [[1, 2], [4, 5]] and ds.targets.tolist() == [[3], [6]]

    def test_header_by_name(self, tmp_path):
        ds = load_csv(write(tmp_path, "a,b,y\n1,2,3\n"), ["b"], ["y"])
        assert ds.features.tolist() == [[2.0]] and ds.feature_names == ["b"]

    def test_missing_cell(self, tmp_path):
        with pytest.raises(DataError, match=r"row 3, column 'b'"):
            load_csv(write(tmp_path, "a,b,y\n1,2,3\n4,,6\n"), ["a", "b"], ["y"])

    def test_non_numeric(self, tmp_path):
        with pytest.raises(DataError, match=r"row 2, column 'y'.*'abc'"):
            load_csv(write(tmp_path, "a,y\n1,abc\n"), ["a"], ["y"])

    def test_nan_rejected(self, tmp_path):
        with pytest.raises(DataError, match="NaN"):
            load_csv(write(tmp_path, "1,nan\n"), [0], [1])

    def test_header_only(self, tmp_path):
        with pytest.raises(DataError, match="empty"):
            load_csv(write(tmp_path, "a,b\n"), ["a"], ["b"])

    def test_ragged_row(self, tmp_path):
        with pytest.raises(DataError, match="row 2"):
            load_csv(write(tmp_path, "1,2\n3\n"), [0], [1])

    def test_unknown_column(self, tmp_path):
        with pytest.raises(DataError, match="not found"):
            load_csv(write(tmp_path, "a,b\n1,2\n"), ["c"], ["b"])

    def test_missing_file(self, tmp_path):
        with pytest.raises(DataError):
            load_csv(tmp_path / "nope.csv", [0], [1])

    def test_roundtrip(self, tmp_path, rng):
        ds = Dataset(rng.normal((6, 2)), rng.normal((6, 1)), feature_names=["u", "v"], target_names=["w"])
        ds.to_csv(tmp_path / "rt.csv")
        back = load_csv(tmp_path / "rt.csv", ["u", "v"], ["w"])
        assert np.array_equal(back.features, ds.features) and np.array_equal(back.targets, ds.targets)


class TestSplit:
    def data(self, n):
        return Dataset(np.arange(n, dtype=float), np.arange(n, dtype=float))

    def test_zero_fraction(self):
        tr, te = split(self.data(10), 0.0, 1)
        assert len(te) == 0 and len(tr) == 10

    def test_half(self):
        tr, te = split(self.data(10), 0.5, 1)
        assert len(tr) == len(te) == 5

    def test_partition(self):
        tr, te = split(self.data(37), 0.3, 4)
        both = np.concatenate([tr.features[:, 0], te.features[:, 0]])
        assert sorted(both) == list(range(37))
        assert not set(tr.features[:, 0]) & set(te.features[:, 0])

    def test_seeded(self):
        a = split(self.data(20), 0.25, 3)[1].features
        assert np.array_equal(a, split(self.data(20), 0.25, 3)[1].features)
        assert not np.array_equal(a, split(self.data(20), 0.25, 4)[1].features)

    def test_bad_fraction(self):
        with pytest.raises(ValueError):
            split(self.data(4), 1.5, 0)


def test_standardizer(rng):
    x = rng.normal((50, 3), 4.0) + 7.0
    x[:, 2] = 1.0
    st = Standardizer.fit(x)
    z = st.transform(x)
    np.testing.assert_allclose(z[:, :2].mean(axis=0), 0, atol=1e-12)
    np.testing.assert_allclose(z[:, :2].std(axis=0), 1, atol=1e-12)
    np.testing.assert_allclose(st.inverse(z), x, atol=1e-12)
