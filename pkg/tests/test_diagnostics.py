import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dncl.diagnostics import (
    ambiguity_identity,
    bvc_decompose,
    cumulative_score,
    pairwise_diversity,
    rademacher_group_ratio,
    rademacher_linear,
    regression_metrics,
    trait_metrics,
)


def brute_bvc(P, Y):
    """Explicit-sum bias, variance and covariance for a (T, K) array and scalar target."""
    T, K = len(P), len(P[0])
    E = [sum(P[t][k] for t in range(T)) / T for k in range(K)]
    bias = (sum(E[k] - Y for k in range(K)) / K) ** 2
    var = sum(sum((P[t][k] - E[k]) ** 2 for t in range(T)) / T for k in range(K)) / K**2
    cov = 0.0
    for k in range(K):
        for j in range(K):
            if j != k:
                cov += sum((P[t][k] - E[k]) * (P[t][j] - E[j]) for t in range(T)) / T
    mse = sum((sum(P[t]) / K - Y) ** 2 for t in range(T)) / T
    return bias, var, cov / K**2, mse


class TestDecomposition:
    def test_hand_built(self):
        P = np.array([[1.0, 2.0], [3.0, 0.0]])
        rep = bvc_decompose(P, 1.0)
        b, v, c, m = brute_bvc(P.tolist(), 1.0)
        # E = [2, 1]; bias (0.5)^2; var (1 + 1)/4; cov 2 * (-1)/4; mse ((0.5)^2 + (0.5)^2)/2
        assert (b, v, c, m) == (0.25, 0.5, -0.5, 0.25)
        assert rep.bias_sq == pytest.approx(b, abs=1e-15)
        assert rep.variance == pytest.approx(v, abs=1e-15)
        assert rep.covariance == pytest.approx(c, abs=1e-15)
        assert rep.mse_of_mean == pytest.approx(m, abs=1e-15)

    def test_identical_trials(self, rng):
        P = np.broadcast_to(rng.normal((1, 4, 6)), (5, 4, 6))
        rep = bvc_decompose(P, rng.normal(6))
        assert rep.variance == pytest.approx(0, abs=1e-28)
        assert rep.covariance == pytest.approx(0, abs=1e-28)
        assert rep.bias_sq == pytest.approx(rep.mse_of_mean, abs=1e-14)

    def test_single_head(self, rng):
        P = rng.normal((8, 1, 3))
        rep = bvc_decompose(P, np.zeros(3))
        assert rep.covariance == 0.0
        assert rep.residual == pytest.approx(0, abs=1e-12)

    def test_random_against_brute_force(self, rng):
        for _ in range(20):
            T, K = int(rng.uniform(1, 2, 6)[0]), int(rng.uniform(1, 1, 5)[0])
            P, Y = rng.normal((T, K)), float(rng.normal(1)[0])
            rep = bvc_decompose(P, Y)
            np.testing.assert_allclose(
                [rep.bias_sq, rep.variance, rep.covariance, rep.mse_of_mean], brute_bvc(P.tolist(), Y), atol=1e-12
            )

    def test_residual_exact(self, rng):
        for _ in range(200):
            T, K, N = (int(v) for v in rng.uniform(3, 2, 12))
            rep = bvc_decompose(rng.normal((T, K, N), 5.0), rng.normal(N))
            assert abs(rep.residual) < 1e-9

    def test_needs_two_trials(self, rng):
        with pytest.raises(ValueError, match="2 trials"):
            bvc_decompose(rng.normal((1, 3, 4)), np.zeros(4))


class TestAmbiguity:
    def test_example(self):
        assert ambiguity_identity([[1.0], [3.0]], [2.0]) == (0.0, 0.0)

    def test_single_member(self, rng):
        G, Y = rng.normal((1, 9)), rng.normal(9)
        lhs, rhs = ambiguity_identity(G, Y)
        assert lhs == pytest.approx(((G[0] - Y) ** 2).mean(), abs=1e-15)
        assert lhs == pytest.approx(rhs, abs=1e-15)

    def test_random(self, rng):
        for _ in range(100):
            K, N = int(rng.uniform(1, 1, 17)[0]), int(rng.uniform(1, 1, 1001)[0])
            lhs, rhs = ambiguity_identity(rng.normal((K, N), 3.0), rng.normal(N))
            assert abs(lhs - rhs) < 1e-10


class TestDiversity:
    def test_identical(self, rng):
        G = np.broadcast_to(rng.normal(5), (3, 5))
        assert not pairwise_diversity(G).d.any()

    def test_constant_offset(self):
        d = pairwise_diversity(np.array([np.zeros(4), np.ones(4)])).d
        assert d[0, 1] == d[1, 0] == 2.0

    def test_metric_shape(self, rng):
        d = pairwise_diversity(rng.normal((6, 20))).d
        assert np.array_equal(d, d.T) and not np.diag(d).any()
        for i, j, k in itertools.permutations(range(6), 3):
            assert d[i, k] <= d[i, j] + d[j, k] + 1e-12

    def test_needs_two_heads(self):
        with pytest.raises(ValueError):
            pairwise_diversity(np.zeros((1, 3)))


def exact_rademacher(phi, bound=1.0):
    """Enumerate every sign pattern (small N only)."""
    N = phi.shape[0]
    tot = 0.0
    for signs in itertools.product((-1.0, 1.0), repeat=N):
        tot += np.linalg.norm(np.array(signs) @ phi)
    return 2 * bound / N * tot / 2**N


class TestRademacher:
    def test_zero_features(self):
        est = rademacher_linear(np.zeros((5, 1)), trials=100)
        assert est.value == 0.0 and est.mc_std == 0.0

    def test_single_sample(self):
        assert rademacher_linear([[1.0]], trials=50).value == 2.0

    def test_two_equal_samples(self):
        assert exact_rademacher(np.ones((2, 1))) == 1.0
        est = rademacher_linear(np.ones((2, 1)), trials=10_000, seed=3)
        assert abs(est.value - 1.0) < 3 * est.mc_std

    def test_against_enumeration(self, rng):
        phi = rng.normal((8, 3))
        est = rademacher_linear(phi, bound=2.5, trials=20_000, seed=4)
        assert abs(est.value - exact_rademacher(phi, 2.5)) < 3 * est.mc_std

    def test_bound_scales_linearly(self, rng):
        phi = rng.normal((10, 4))
        a = rademacher_linear(phi, 1.0, 500, seed=1).value
        b = rademacher_linear(phi, 3.0, 500, seed=1).value
        assert b == pytest.approx(3 * a, rel=1e-14)

    def test_k1_ratio(self, rng):
        assert rademacher_group_ratio(rng.normal((20, 4)), 1, trials=200).ratio == 1.0

    @pytest.mark.parametrize("K", [2, 4, 8])
    def test_single_block_attains_lower_end(self, rng, K):
        phi = np.zeros((50, 8 * K))
        phi[:, :8] = rng.normal((50, 8))
        r = rademacher_group_ratio(phi, K, trials=2000, seed=K)
        assert r.ratio == pytest.approx(1 / K, abs=1e-12)

    @pytest.mark.parametrize("K", [2, 4, 8])
    def test_ratio_bounds(self, rng, K):
        r = rademacher_group_ratio(rng.normal((200, 64)), K, trials=3000, seed=K)
        assert 1 / K - 3 * r.ratio_std <= r.ratio <= 1 / math.sqrt(K) + 3 * r.ratio_std
        # isotropic features concentrate near the upper end
        assert r.ratio == pytest.approx(1 / math.sqrt(K), rel=0.05)

    def test_errors(self, rng):
        with pytest.raises(ValueError):
            rademacher_group_ratio(rng.normal((4, 5)), 2)
        with pytest.raises(ValueError):
            rademacher_linear(rng.normal((4, 5)), bound=0.0)
        with pytest.raises(ValueError):
            rademacher_linear(np.zeros((0, 2)))

    def test_deterministic(self, rng):
        phi = rng.normal((30, 6))
        assert rademacher_linear(phi, trials=5000, seed=9) == rademacher_linear(phi, trials=5000, seed=9)


def brute_metrics(p, y, level):
    n = len(p)
    e = [p[i] - y[i] for i in range(n)]
    mae = sum(abs(v) for v in e) / n
    rmse = math.sqrt(sum(v * v for v in e) / n)
    ym = sum(y) / n
    ss = sum((v - ym) ** 2 for v in y)
    r2 = 1 - sum(v * v for v in e) / ss
    cs = 100.0 * sum(1 for v in e if abs(v) <= level) / n
    return mae, rmse, 1 - mae, r2, cs


class TestMetrics:
    def test_examples(self):
        assert regression_metrics([1.0, 2.0], [1.0, 2.0]) == {"MAE": 0.0, "RMSE": 0.0}
        assert regression_metrics([1.0, -1.0], [0.0, 0.0]) == {"MAE": 1.0, "RMSE": 1.0}
        assert regression_metrics([0.0, 2.0], [0.0, 0.0]) == {"MAE": 1.0, "RMSE": math.sqrt(2)}

    def test_trait_examples(self):
        assert trait_metrics([0.2, 0.7], [0.2, 0.7]) == {"A": 1.0, "R2": 1.0, "R2_defined": True}
        assert trait_metrics([0.5, 0.5], [0.0, 1.0]) == {"A": 0.5, "R2": 0.0, "R2_defined": True}
        y = np.array([0.1, 0.4, 0.9])
        assert trait_metrics(np.full(3, y.mean()), y)["R2"] == pytest.approx(0.0, abs=1e-15)

    def test_constant_targets(self):
        r = trait_metrics([0.1, 0.2], [0.5, 0.5])
        assert math.isnan(r["R2"]) and r["R2_defined"] is False

    def test_cumulative_score(self):
        assert cumulative_score([1.0, 10.0], [0.0, 0.0], 5) == 50.0
        assert cumulative_score([5.0], [0.0], 5) == 100.0
        assert cumulative_score([1.0, 10.0], [0.0, 0.0], 1e9) == 100.0

    def test_against_brute_force(self, rng):
        for _ in range(100):
            n = int(rng.uniform(1, 2, 12)[0])
            p, y = rng.normal(n), rng.normal(n)
            level = float(rng.uniform(1, 0, 2)[0])
            m, t = regression_metrics(p, y), trait_metrics(p, y)
            got = (m["MAE"], m["RMSE"], t["A"], t["R2"], cumulative_score(p, y, level))
            np.testing.assert_allclose(got, brute_metrics(p.tolist(), y.tolist(), level), rtol=0, atol=1e-12)


@settings(max_examples=100, deadline=None)
@given(
    st.lists(
        st.tuples(st.floats(-1e3, 1e3, allow_subnormal=False), st.floats(-1e3, 1e3, allow_subnormal=False)),
        min_size=1,
        max_size=40,
    )
)
def test_rmse_dominates_mae(pairs):
    p, y = zip(*pairs)
    m = regression_metrics(p, y)
    assert m["RMSE"] >= m["MAE"] * (1 - 1e-12) - 1e-150


@settings(max_examples=100, deadline=None)
@given(
    st.lists(st.floats(-100, 100), min_size=1, max_size=30),
    st.lists(st.floats(0, 200), min_size=2, max_size=8),
)
def test_cs_monotone(errs, levels):
    levels = sorted(levels)
    cs = [cumulative_score(errs, np.zeros(len(errs)), lv) for lv in levels]
    assert all(a <= b for a, b in zip(cs, cs[1:]))
