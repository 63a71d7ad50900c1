import numpy as np
import pytest

from fvduality.forward import (
    STAR,
    ForwardError,
    ForwardParams,
    MomentTestFunction,
    PopulationState,
    evaluate_duality_function,
    generator_apply,
    initial_counts,
    moran_checkpoints,
    simulate_forward,
)
from fvduality.geometry import Geography, MigrationKernel, TypeSpace
from fvduality.oracles import forward_moment_oracle, kingman_pair_moment
from fvduality.seeding import replica_rng, stream_material


def single_site_geo():
    return Geography(MigrationKernel(order=2, mode="island"))


def neutral_two_types(m=0.0):
    return TypeSpace(fitness=(0.0, 1.0), mutation_matrix=((0.6, 0.4), (0.3, 0.7)), mutation_rate=m)


def product_state(geo, vec):
    return PopulationState(geo, np.asarray(vec, dtype=float))


class TestPopulationState:
    def test_simplex_enforced(self):
        geo = single_site_geo()
        with pytest.raises(ForwardError):
            PopulationState(geo, [0.5, 0.6])

    def test_background_and_overrides(self):
        geo = single_site_geo()
        X = PopulationState(geo, [0.5, 0.5], {geo.sites[0]: np.array([0.2, 0.8])})
        assert X.vector_at(geo.sites[0])[0] == 0.2
        assert X.vector_at(geo.sites[1])[0] == 0.5

    def test_initial_counts_exact_and_rounded(self):
        geo = single_site_geo()
        X = product_state(geo, [0.3, 0.7])
        counts = initial_counts(X, 1000)
        assert counts.sum(axis=1).tolist() == [1000, 1000]
        assert counts[0].tolist() == [300, 700]
        counts = initial_counts(product_state(geo, [1 / 3, 2 / 3]), 100)
        assert counts.sum(axis=1).tolist() == [100, 100]


class TestSimulateForward:
    def test_no_events_state_unchanged(self):
        geo = single_site_geo()
        ts = neutral_two_types()
        params = ForwardParams(moran_pop_size=50)
        X0 = product_state(geo, [0.4, 0.6])
        X1 = simulate_forward(params, ts, X0, 3.0, replica_rng(1, "noev", 0, 0))
        np.testing.assert_allclose(X1.as_matrix(), X0.as_matrix())

    def test_negative_horizon_rejected(self):
        geo = single_site_geo()
        with pytest.raises(ForwardError):
            simulate_forward(
                ForwardParams(), neutral_two_types(), product_state(geo, [1.0, 0.0]), -1.0,
                replica_rng(1, "neg", 0, 0),
            )

    def test_neutral_first_moment_martingale(self):
        # s = m = c = 0, d > 0: E[x_t] must stay at x_0 (checked at 4 SE)
        geo = single_site_geo()
        ts = neutral_two_types()
        params = ForwardParams(resampling=1.0, moran_pop_size=100)
        X0 = product_state(geo, [0.3, 0.7])
        R = 10_000
        states, gammas = stream_material(42, "mart", 0, R)
        counts = moran_checkpoints(params, ts, X0, np.array([1.0]), states, gammas)
        x1 = counts[:, 0, 0, 0] / params.moran_pop_size
        se = x1.std(ddof=1) / np.sqrt(R)
        assert abs(x1.mean() - 0.3) <= 4 * se

    def test_neutral_second_moment_matches_pair_ode(self):
        geo = single_site_geo()
        ts = neutral_two_types()
        params = ForwardParams(resampling=1.0, moran_pop_size=200)
        X0 = product_state(geo, [0.5, 0.5])
        R = 20_000
        states, gammas = stream_material(7, "kingman", 0, R)
        counts = moran_checkpoints(params, ts, X0, np.array([0.7]), states, gammas)
        x = counts[:, 0, 0, 0] / params.moran_pop_size
        x2 = x**2
        se = x2.std(ddof=1) / np.sqrt(R)
        oracle = kingman_pair_moment(0.7, 1.0, 0.5)
        assert abs(x2.mean() - oracle) <= 4 * se

    def test_simplex_preserved_with_all_mechanisms(self):
        kernel = MigrationKernel(order=2, mode="hierarchical", level_rates=(1.0, 0.5), max_depth=2)
        geo = Geography(kernel)
        ts = TypeSpace(
            fitness=(0.0, 0.5, 1.0),
            mutation_matrix=((0.8, 0.1, 0.1), (0.2, 0.7, 0.1), (0.3, 0.3, 0.4)),
            mutation_rate=0.5,
        )
        params = ForwardParams(migration=0.5, selection=0.4, mutation=0.5, resampling=1.0, moran_pop_size=60)
        X0 = product_state(geo, [0.2, 0.3, 0.5])
        X1 = simulate_forward(params, ts, X0, 1.5, replica_rng(5, "mech", 0, 0))
        mat = X1.as_matrix()
        assert np.all(mat >= 0)
        np.testing.assert_allclose(mat.sum(axis=1), 1.0, atol=1e-12)


class TestGeneratorApply:
    def test_constant_function_in_kernel(self):
        geo = single_site_geo()
        ts = neutral_two_types(m=1.0)
        params = ForwardParams(migration=0.7, selection=0.3, mutation=1.0, resampling=2.0)
        X = product_state(geo, [0.25, 0.75])
        F = MomentTestFunction((geo.sites[0], geo.sites[0]), np.ones((2, 2)))
        assert generator_apply(F, X, params, ts) == pytest.approx(0.0, abs=1e-12)

    def test_single_variable_mutation_term(self):
        geo = single_site_geo()
        ts = neutral_two_types(m=0.8)
        params = ForwardParams(mutation=0.8)
        x = np.array([0.25, 0.75])
        X = product_state(geo, x)
        M = ts.kernel()
        for j in range(2):
            f = np.zeros(2)
            f[j] = 1.0
            F = MomentTestFunction((geo.sites[0],), f)
            expected = 0.8 * sum(x[u] * (M[u, j] - (1.0 if u == j else 0.0)) for u in range(2))
            assert generator_apply(F, X, params, ts) == pytest.approx(expected, abs=1e-12)

    def test_pair_resampling_term(self):
        # n=2 same site, f = 1_j x 1_j, only d > 0: d * (x_j - x_j^2), one pair
        geo = single_site_geo()
        ts = neutral_two_types()
        params = ForwardParams(resampling=1.7)
        x = np.array([0.3, 0.7])
        X = product_state(geo, x)
        f = np.zeros((2, 2))
        f[1, 1] = 1.0
        F = MomentTestFunction((geo.sites[0], geo.sites[0]), f)
        expected = 1.7 * (x[1] - x[1] ** 2)
        assert generator_apply(F, X, params, ts) == pytest.approx(expected, abs=1e-12)

    def test_martingale_property_small_instance(self):
        # (E[F(X_dt)] - F(X_0)) / dt matches (LF)(X_0) within MC error + O(dt)
        geo = single_site_geo()
        ts = TypeSpace(
            fitness=(0.0, 1.0),
            mutation_matrix=((0.5, 0.5), (0.4, 0.6)),
            mutation_rate=0.6,
        )
        params = ForwardParams(migration=0.4, selection=0.5, mutation=0.6, resampling=1.0, moran_pop_size=400)
        X0 = product_state(geo, [0.35, 0.65])
        f = np.array([[0.0, 0.3], [1.0, -0.2]])
        F = MomentTestFunction((geo.sites[0], geo.sites[1]), f)
        dt = 0.01
        R = 100_000
        states, gammas = stream_material(99, "gen-mart", 0, R)
        counts = moran_checkpoints(params, ts, X0, np.array([dt]), states, gammas)
        freqs = counts[:, 0] / params.moran_pop_size
        vals = np.einsum("ij,ri,rj->r", f, freqs[:, 0], freqs[:, 1])
        lhs = (vals.mean() - F.value(X0)) / dt
        se = vals.std(ddof=1) / np.sqrt(R) / dt
        rhs = generator_apply(F, X0, params, ts)
        # 4 SE of MC noise plus a generous O(dt) discretization allowance
        assert abs(lhs - rhs) <= 4 * se + 0.5 * abs(rhs) * dt + 0.02

    def test_moment_ode_oracle_agrees_with_generator_slope(self):
        geo = single_site_geo()
        ts = neutral_two_types(m=0.5)
        params = ForwardParams(mutation=0.5, resampling=1.0)
        X0 = product_state(geo, [0.4, 0.6])
        f = np.zeros((2, 2))
        f[0, 0] = 1.0
        F = MomentTestFunction((geo.sites[0], geo.sites[0]), f)
        eps = 1e-6
        slope = (
            forward_moment_oracle(ts, geo, params, F, X0, eps)
            - forward_moment_oracle(ts, geo, params, F, X0, 0.0)
        ) / eps
        assert slope == pytest.approx(generator_apply(F, X0, params, ts), rel=1e-4)

    def test_moment_ode_matches_kingman(self):
        geo = single_site_geo()
        ts = neutral_two_types()
        params = ForwardParams(resampling=1.3)
        X0 = product_state(geo, [0.3, 0.7])
        f = np.zeros((2, 2))
        f[0, 0] = 1.0
        F = MomentTestFunction((geo.sites[0], geo.sites[0]), f)
        got = forward_moment_oracle(ts, geo, params, F, X0, 0.9)
        assert got == pytest.approx(kingman_pair_moment(0.9, 1.3, 0.3), abs=1e-12)


class TestMoranConsistency:
    def test_doubling_population_stays_on_pair_ode(self):
        # the symmetric-jump chain solves the same second-moment ODE as the
        # diffusion at every population size (corrections are O(1/n^2) and
        # sit below Monte-Carlo resolution even at n=4), so doubling the
        # population must never move the estimate away from the oracle
        geo = single_site_geo()
        ts = neutral_two_types()
        X0 = product_state(geo, [0.5, 0.5])
        t, R = 1.0, 200_000
        oracle = kingman_pair_moment(t, 1.0, 0.5)
        for i, n in enumerate([8, 16, 32]):
            params = ForwardParams(resampling=1.0, moran_pop_size=n)
            states, gammas = stream_material(123 + i, f"conv{n}", 0, R)
            counts = moran_checkpoints(params, ts, X0, np.array([t]), states, gammas)
            x2 = (counts[:, 0, 0, 0] / n) ** 2
            se = x2.std(ddof=1) / np.sqrt(R)
            assert abs(x2.mean() - oracle) <= 4 * se, n


class TestEvaluateDualityFunction:
    def test_constant_is_one(self):
        geo = single_site_geo()
        X = product_state(geo, [0.2, 0.8])
        val = evaluate_duality_function(X, [geo.sites[0], geo.sites[1]], np.ones((2, 2)))
        assert val == pytest.approx(1.0)

    def test_single_marginal(self):
        geo = single_site_geo()
        X = product_state(geo, [0.2, 0.8])
        f = np.array([0.0, 1.0])
        assert evaluate_duality_function(X, [geo.sites[0]], f) == pytest.approx(0.8)

    def test_two_variable_product(self):
        geo = single_site_geo()
        X = PopulationState(geo, [0.2, 0.8], {geo.sites[1]: np.array([0.6, 0.4])})
        f = np.outer([1.0, 0.0], [1.0, 1.0])  # 1_A x 1_B with A={0}, B=all
        val = evaluate_duality_function(X, [geo.sites[0], geo.sites[1]], f)
        assert val == pytest.approx(0.2 * 1.0)

    def test_star_site_uses_base_measure(self):
        geo = single_site_geo()
        X = product_state(geo, [0.2, 0.8])
        f = np.outer([0.0, 1.0], [0.0, 1.0])
        val = evaluate_duality_function(X, [geo.sites[0], STAR], f, rho=[0.5, 0.5])
        assert val == pytest.approx(0.8 * 0.5)

    def test_variable_count_mismatch(self):
        geo = single_site_geo()
        X = product_state(geo, [0.2, 0.8])
        with pytest.raises(ForwardError):
            evaluate_duality_function(X, [geo.sites[0]], np.ones((2, 2)))
