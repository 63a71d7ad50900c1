import numpy as np
import pytest

from fvduality.dual_particle import (
    DualParticleError,
    DualRates,
    event_record,
    initial_state,
    simulate,
    step,
)
from fvduality.forward import STAR
from fvduality.geometry import Geography, MigrationKernel
from fvduality.seeding import replica_rng


def island_geo(n=2):
    return Geography(MigrationKernel(order=n, mode="island"))


def co_located(n, geo):
    return initial_state(n, [geo.sites[0]] * n)


class TestInit:
    def test_singletons(self):
        geo = island_geo()
        st = initial_state(3, [geo.sites[0], geo.sites[0], geo.sites[1]])
        assert [e.members for e in st.elements] == [(1,), (2,), (3,)]
        assert st.locations() == [geo.sites[0], geo.sites[0], geo.sites[1]]

    def test_single_individual(self):
        geo = island_geo()
        st = initial_state(1, [geo.sites[0]])
        assert st.size == 1 and st.n_individuals == 1

    def test_zero_individuals_rejected(self):
        with pytest.raises(DualParticleError):
            initial_state(0, [])

    def test_co_located_pair_is_armed(self):
        geo = island_geo()
        st = co_located(2, geo)
        assert st.co_located_pairs() == [(0, 1)]


class TestStep:
    def test_silent_when_all_rates_zero(self):
        geo = island_geo()
        st = initial_state(1, [geo.sites[0]])
        rates = DualRates()
        new, ev = step(st, rates, replica_rng(0, "silent", 0, 0))
        assert ev is None and new is st

    def test_pure_coalescence_time_and_result(self):
        geo = island_geo()
        rates = DualRates(coalescence=1.0)
        rng = replica_rng(1, "coal", 0, 0)
        waits = []
        for _ in range(4000):
            st = co_located(2, geo)
            t0 = 0.0
            st2, ev = step(st, rates, rng, now=t0)
            assert ev.kind == "coalescence"
            assert [e.members for e in st2.elements] == [(1, 2)]
            waits.append(ev.time)
        waits = np.asarray(waits)
        # Exp(1): mean 1, check within 4 SE
        assert abs(waits.mean() - 1.0) <= 4 * waits.std(ddof=1) / np.sqrt(waits.size)

    def test_partition_changes_only_at_birth_and_coalescence(self):
        geo = island_geo()
        kernel = geo.kernel
        rates = DualRates(coalescence=1.0, migration=0.7, birth=0.5, kernel=kernel)
        rng = replica_rng(3, "sizes", 0, 0)
        st = co_located(3, geo)
        sizes = [st.size]
        for _ in range(200):
            st2, ev = step(st, rates, rng)
            if ev is None:
                break
            if ev.kind == "coalescence":
                assert st2.size == st.size - 1
            elif ev.kind == "birth":
                assert st2.size == st.size + 1
            else:
                assert st2.size == st.size
            st = st2
            sizes.append(st.size)

    def test_partition_validity_after_events(self):
        geo = island_geo(3)
        rates = DualRates(coalescence=1.0, migration=1.0, birth=0.8, kernel=geo.kernel)
        rng = replica_rng(4, "valid", 0, 0)
        st = initial_state(4, [geo.sites[0], geo.sites[0], geo.sites[1], geo.sites[2]])
        for _ in range(300):
            st, ev = step(st, rates, rng)
            if ev is None:
                break
            idx = [e.index for e in st.elements]
            assert idx == sorted(idx)
            members = sorted(m for e in st.elements for m in e.members)
            assert members == list(range(1, st.n_individuals + 1))

    def test_birth_labels_and_location(self):
        geo = island_geo()
        rates = DualRates(birth=1.0)
        st = initial_state(2, [geo.sites[0], geo.sites[1]])
        st2, ev = step(st, rates, replica_rng(5, "birth", 0, 0))
        assert ev.kind == "birth"
        parent = st.elements[ev.labels[0]]
        child = st2.elements[-1]
        assert child.members == (3,)
        assert child.location == parent.location
        assert st2.n_individuals == 3

    def test_star_jump_and_absorption(self):
        geo = island_geo()
        rates = DualRates(star=2.0)
        st = initial_state(2, [geo.sites[0], geo.sites[0]])
        rng = replica_rng(6, "star", 0, 0)
        seen = 0
        while True:
            st, ev = step(st, rates, rng)
            if ev is None:
                break
            assert ev.kind == "star"
            seen += 1
        assert seen == 2
        assert all(e.location == STAR for e in st.elements)


class TestSimulate:
    def test_zero_horizon(self):
        geo = island_geo()
        st = co_located(2, geo)
        st2, log = simulate(st, DualRates(coalescence=1.0), 0.0, replica_rng(7, "h0", 0, 0))
        assert log == [] and st2 is st

    def test_yule_mean_growth(self):
        # births only: E[N_t] = k * exp(s t)
        geo = island_geo()
        s, t, k = 0.8, 1.0, 2
        rates = DualRates(birth=s)
        ns = []
        for r in range(4000):
            rng = replica_rng(8, "yule", 0, r)
            st, _ = simulate(initial_state(k, [geo.sites[0]] * k), rates, t, rng)
            ns.append(st.n_individuals)
        ns = np.asarray(ns, dtype=float)
        expected = k * np.exp(s * t)
        se = ns.std(ddof=1) / np.sqrt(ns.size)
        assert abs(ns.mean() - expected) <= 4 * se

    def test_coalescence_hitting_time_mean(self):
        # 3 co-located elements, only d: time to one block is Exp(3d) + Exp(d)
        geo = island_geo()
        d = 0.9
        rates = DualRates(coalescence=d)
        times = []
        for r in range(4000):
            rng = replica_rng(9, "hit", 0, r)
            st = co_located(3, geo)
            t = 0.0
            while st.size > 1:
                st, ev = step(st, rates, rng, now=t)
                t = ev.time
            times.append(t)
        times = np.asarray(times)
        expected = 1 / (3 * d) + 1 / d
        se = times.std(ddof=1) / np.sqrt(times.size)
        assert abs(times.mean() - expected) <= 4 * se

    def test_star_absorption_fraction(self):
        # mbar only: each element is absorbed by time t with prob 1 - exp(-mbar t)
        geo = island_geo()
        mbar, t = 0.6, 1.2
        rates = DualRates(star=mbar)
        absorbed = []
        for r in range(4000):
            rng = replica_rng(10, "starfrac", 0, r)
            st, _ = simulate(initial_state(2, [geo.sites[0], geo.sites[1]]), rates, t, rng)
            absorbed.extend(1.0 if e.location == STAR else 0.0 for e in st.elements)
        absorbed = np.asarray(absorbed)
        p = 1 - np.exp(-mbar * t)
        se = np.sqrt(p * (1 - p) / absorbed.size)
        assert abs(absorbed.mean() - p) <= 4 * se

    def test_element_count_dominated_by_yule_quantile(self):
        # with births, deaths by coalescence: |pi_t| below a pure-birth quantile
        geo = island_geo()
        s, t = 0.5, 2.0
        rates = DualRates(coalescence=1.0, migration=0.5, birth=s, kernel=geo.kernel)
        # Yule from k=3: N_t ~ 3 + NegBinomial(3, e^{-st}); bound at level 1e-4
        from scipy.stats import nbinom

        p = np.exp(-s * t)
        bound = 3 + nbinom(3, p).ppf(1 - 1e-4)
        worst = 0
        for r in range(3000):
            rng = replica_rng(11, "dom", 0, r)
            st, _ = simulate(co_located(3, geo), rates, t, rng)
            worst = max(worst, st.size)
        assert worst <= bound

    def test_event_record_roundtrip(self):
        import json

        geo = island_geo()
        rates = DualRates(coalescence=1.0, migration=1.0, birth=1.0, kernel=geo.kernel)
        rng = replica_rng(12, "records", 0, 0)
        st, log = simulate(co_located(3, geo), rates, 1.0, rng)
        times = [ev.time for ev in log]
        assert times == sorted(times)
        for ev in log:
            rec = json.loads(event_record(ev))
            assert rec["kind"] == ev.kind and rec["time"] == ev.time
