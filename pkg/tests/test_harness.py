import numpy as np
import pytest

from fvduality.forward import ForwardParams, MomentTestFunction
from fvduality.geometry import Geography, MigrationKernel, TypeSpace
from fvduality.harness import (
    DualityPairing,
    HarnessError,
    ModelConfig,
    decoupling_check,
    duality_check,
    ergodic_experiment,
    estimate_dual_expectation,
    estimate_forward_moment,
    markov_set_dual_experiment,
    standard_battery,
    welford_merge,
)
from fvduality.oracles import forward_moment_oracle
from fvduality.refined_dual import IndicatorSum


def simple_model(m=0.5, s=0.0, c=0.0, d=1.0, n=200, mbar=0.0):
    geo = Geography(MigrationKernel(order=2, mode="island"))
    ts = TypeSpace(
        fitness=(0.0, 1.0),
        mutation_matrix=((0.6, 0.4), (0.3, 0.7)),
        mutation_rate=m,
        state_independent_rate=mbar,
        base_measure=(0.5, 0.5) if mbar > 0 else None,
    )
    params = ForwardParams(migration=c, selection=s, mutation=m, resampling=d, moran_pop_size=n)
    return ModelConfig(type_space=ts, params=params, geography=geo, background=(0.4, 0.6))


class TestEstimators:
    def test_zero_horizon_deterministic(self):
        model = simple_model()
        F = MomentTestFunction((model.geography.sites[0],), np.array([0.0, 1.0]))
        est = estimate_forward_moment(model, F, 0.0, 100, 7, "t0")
        assert est.mean == pytest.approx(0.6) and est.std_error == 0.0

    def test_constant_function_exact_one(self):
        model = simple_model()
        F = MomentTestFunction((model.geography.sites[0],), np.ones(2))
        est = estimate_forward_moment(model, F, 0.7, 500, 7, "one")
        assert est.mean == pytest.approx(1.0) and est.std_error == pytest.approx(0.0, abs=1e-12)

    def test_dual_constant_is_one(self):
        model = simple_model()
        pairing = DualityPairing("const", (0, 1), (0b11, 0b11), 0.8, kind="plus")
        est = estimate_dual_expectation(model, pairing, 200, 7, "dual-one")
        assert est.mean == pytest.approx(1.0)
        assert est.std_error == pytest.approx(0.0, abs=1e-12)

    def test_se_scaling_with_replicas(self):
        # a 4x replica increase must halve the standard error within 20%
        model = simple_model()
        pairing = DualityPairing("scale", (0, 0), (0b10, 0b10), 0.8, kind="plus")
        e1 = estimate_dual_expectation(model, pairing, 2000, 7, "scale")
        e2 = estimate_dual_expectation(model, pairing, 8000, 7, "scale")
        ratio = e1.std_error / e2.std_error
        assert 2.0 / 1.2 <= ratio <= 2.0 * 1.2

    def test_worker_pool_bit_identical(self):
        model = simple_model()
        pairing = DualityPairing("pool", (0, 0), (0b10, 0b01), 0.6, kind="refined")
        a = estimate_dual_expectation(model, pairing, 3000, 11, "pool", workers=1)
        b = estimate_dual_expectation(model, pairing, 3000, 11, "pool", workers=2)
        assert a == b

    def test_fk_window_rejected_at_estimate_level(self):
        model = simple_model(s=0.5)
        pairing = DualityPairing("win", (0, 0), (0b10, 0b01), 2.0, kind="fk")
        with pytest.raises(HarnessError):
            estimate_dual_expectation(model, pairing, 10, 7, "win")

    def test_welford_merge_matches_numpy(self):
        rng = np.random.default_rng(3)
        xs = rng.normal(size=701)
        parts = []
        for chunk in np.array_split(xs, 7):
            parts.append((chunk.size, float(chunk.mean()), float(((chunk - chunk.mean()) ** 2).sum())))
        n, mean, m2 = welford_merge(parts)
        assert n == xs.size
        assert mean == pytest.approx(xs.mean())
        assert m2 / (n - 1) == pytest.approx(xs.var(ddof=1))


class TestDualityCheck:
    def test_neutral_oracle_all_kinds_agree(self):
        # s=0: dual MC for all kinds must match the moment-ODE oracle;
        # full battery versions live in the acceptance suite
        model = simple_model(m=0.8, d=1.0, n=400)
        oracle_F = MomentTestFunction(
            (model.geography.sites[0], model.geography.sites[0]),
            IndicatorSum.product(2, (0b10, 0b10)).to_tensor(),
        )
        oracle = forward_moment_oracle(
            model.type_space, model.geography, model.params, oracle_F, model.initial_state(), 0.8
        )
        for kind in ("plus", "refined", "setvalued"):
            pairing = DualityPairing(f"odemini-{kind}", (0, 0), (0b10, 0b10), 0.8, kind=kind)
            est = estimate_dual_expectation(model, pairing, 4000, 13, pairing.name)
            z = abs(est.mean - oracle) / est.std_error
            assert z <= 4, (kind, z)

    def test_neutral_spatial_oracle_with_migration(self):
        # s=0 on the depth-2 hierarchical group: migration enters the moment
        # ODE, so this pins the forward/reversed kernel conventions together
        geo = Geography(
            MigrationKernel(order=2, mode="hierarchical", level_rates=(1.0, 0.5), max_depth=2)
        )
        ts = TypeSpace(
            fitness=(0.0, 1.0), mutation_matrix=((0.6, 0.4), (0.3, 0.7)), mutation_rate=0.4
        )
        params = ForwardParams(migration=0.7, mutation=0.4, resampling=1.0, moran_pop_size=100)
        model = ModelConfig(
            type_space=ts, params=params, geography=geo, background=(0.4, 0.6),
            site_overrides=((geo.sites[2], (0.8, 0.2)),),
        )
        F = MomentTestFunction(
            (geo.sites[0], geo.sites[2]), IndicatorSum.product(2, (0b10, 0b10)).to_tensor()
        )
        oracle = forward_moment_oracle(
            ts, geo, params, F, model.initial_state(), 0.7
        )
        for kind in ("plus", "setvalued"):
            pairing = DualityPairing(f"spatial-{kind}", (0, 2), (0b10, 0b10), 0.7, kind=kind)
            est = estimate_dual_expectation(model, pairing, 6000, 47, pairing.name)
            z = abs(est.mean - oracle) / est.std_error
            assert z <= 4, (kind, z, est.mean, oracle)
        fwd = estimate_forward_moment(model, F, 0.7, 3000, 47, "spatial-fwd")
        z = abs(fwd.mean - oracle) / fwd.std_error
        assert z <= 4, ("forward", z)

    def test_forward_vs_dual_single_site(self):
        model = simple_model(m=0.5, s=0.3, d=1.0, n=500)
        pairing = DualityPairing(
            "fvd", (0, 0), (0b10, 0b01), 0.8, kind="plus",
            forward_replicas=1500, dual_replicas=8000,
        )
        res = duality_check(model, pairing, 17)
        assert res.passed, res.z_score

    def test_verdict_consistency(self):
        model = simple_model(n=100)
        pairing = DualityPairing(
            "verd", (0, 0), (0b10, 0b10), 0.5, kind="plus",
            forward_replicas=300, dual_replicas=1000,
        )
        res = duality_check(model, pairing, 19, threshold=4.0)
        assert res.passed == (res.z_score <= 4.0)


class TestStandardBattery:
    def test_battery_composition(self):
        pairs = standard_battery()
        assert len(pairs) >= 12
        kinds = {p.kind for _, p in pairs}
        assert kinds == {"fk", "plus", "gplus", "refined", "tableau", "setvalued"}
        assert any(p.star for _, p in pairs)
        assert any(p.mutation_mode == "jump" and p.kind in ("plus", "gplus") for _, p in pairs)
        geos = {len(m.geography) for m, _ in pairs}
        assert geos == {1, 3, 8}
        mbars = {m.type_space.state_independent_rate > 0 for m, _ in pairs}
        assert mbars == {True, False}

    def test_battery_models_validate(self):
        for model, pairing in standard_battery(100):
            model.initial_state().validate()
            F = pairing.moment_function(model)
            assert F.order == 2


class TestMarkovSetDual:
    def test_two_state_and_random_generators(self):
        report = markov_set_dual_experiment(
            23, two_state_replicas=20_000, three_state_replicas=4000, n_generators=2
        )
        assert all(r.passed for r in report["results"])
        z_max = max(r.z_score for r in report["results"])
        assert z_max <= 4


class TestErgodicAndDecoupling:
    def test_precondition_on_mutation_rates(self):
        model = simple_model(m=0.0)
        with pytest.raises(HarnessError, match="positive"):
            ergodic_experiment(model, (0.9, 0.1), (1.0, 2.0), 50, 29)

    def test_identical_initials_distance_is_noise(self):
        model = simple_model(m=0.6, d=1.0, n=100)
        rep = ergodic_experiment(
            model, model.background, (0.5, 1.0), 2000, 31, dual_replicas=300,
            dual_horizon=40.0,
        )
        assert rep.converged

    def test_decoupling_needs_hierarchical_geography(self):
        model = simple_model()
        with pytest.raises(HarnessError):
            decoupling_check(model, (0, 1), 10.0, 10, 37)


class TestReproducibility:
    def test_same_seed_same_estimates(self):
        model = simple_model(n=150)
        pairing = DualityPairing(
            "repro", (0, 0), (0b10, 0b01), 0.6, kind="setvalued",
            forward_replicas=400, dual_replicas=600,
        )
        r1 = duality_check(model, pairing, 41)
        r2 = duality_check(model, pairing, 41)
        assert r1 == r2

    def test_different_seed_different_estimates(self):
        model = simple_model(n=150)
        pairing = DualityPairing(
            "reseed", (0, 0), (0b10, 0b01), 0.6, kind="plus",
            forward_replicas=400, dual_replicas=600,
        )
        r1 = duality_check(model, pairing, 41)
        r2 = duality_check(model, pairing, 43)
        assert r1.lhs.mean != r2.lhs.mean
