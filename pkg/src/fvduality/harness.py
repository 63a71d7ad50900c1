"""Monte-Carlo estimation of both sides of every duality relation.

The forward side runs the batched Moran engine and evaluates moment test
functions at the horizon; the dual side replays one of the dual kinds
(fk, plus, gplus, refined, tableau, setvalued) against the initial law.
Both sides use independent seed streams derived from (master seed,
experiment id, side, replica), so reruns are bit-identical and the
two-sample z-test stays valid.  Replicas aborted by a cap or by the
deliberately unsupported entangled migration are excluded and counted.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import dual_particle as dp
from .dual_function import DualFunction, ReplicaAborted, dual_value, fk_window, run_function_dual
from .forward import ForwardParams, MomentTestFunction, PopulationState, moran_checkpoints
from .geometry import Geography, MigrationKernel, TypeSpace, fitness_decomposition
from .refined_dual import IndicatorSum, refined_value, run_refined_dual
from .seeding import replica_rng, stream_material
from .tableau_dual import (
    SetDualParams,
    UnsupportedMigration,
    evaluate_set_dual,
    initial_set_dual,
    simulate_set_dual,
)

DUAL_KINDS = ("fk", "plus", "gplus", "refined", "tableau", "setvalued")
CHUNK = 2048  # fixed chunking keeps merges identical for any worker count


class HarnessError(ValueError):
    pass


@dataclass(frozen=True)
class MonteCarloEstimate:
    mean: float
    std_error: float
    replica_count: int
    seed: int
    abort_count: int = 0

    @property
    def abort_fraction(self) -> float:
        total = self.replica_count + self.abort_count
        return self.abort_count / total if total else 0.0


@dataclass(frozen=True)
class DualityCheckResult:
    name: str
    lhs: MonteCarloEstimate
    rhs: MonteCarloEstimate
    z_score: float
    threshold: float
    passed: bool


@dataclass(frozen=True)
class ModelConfig:
    """Everything one experiment needs: dynamics, geography, initial law."""

    type_space: TypeSpace
    params: ForwardParams
    geography: Geography
    background: tuple[float, ...]
    site_overrides: tuple = ()

    def initial_state(self) -> PopulationState:
        return PopulationState(
            self.geography,
            np.asarray(self.background, dtype=float),
            {site: np.asarray(v, dtype=float) for site, v in self.site_overrides},
        )

    def dual_rates(self, star: bool = False) -> dp.DualRates:
        return dp.DualRates(
            coalescence=self.params.resampling,
            migration=self.params.migration,
            birth=self.params.selection,
            star=self.type_space.state_independent_rate if star else 0.0,
            kernel=self.geography.kernel,
        )


@dataclass(frozen=True)
class DualityPairing:
    """One duality check: moment function = product of subset indicators."""

    name: str
    site_indices: tuple[int, ...]
    masks: tuple[int, ...]
    horizon: float
    kind: str = "plus"
    mutation_mode: str = "flow"  # flow | jump, for the function-valued kinds
    star: bool = False
    forward_replicas: int = 2000
    dual_replicas: int = 20000

    def __post_init__(self):
        if self.kind not in DUAL_KINDS:
            raise HarnessError(f"unknown dual kind {self.kind!r}")
        if len(self.site_indices) != len(self.masks):
            raise HarnessError("need one mask per site")

    def sites(self, geography: Geography) -> tuple:
        return tuple(geography.sites[i] for i in self.site_indices)

    def moment_function(self, model: ModelConfig) -> MomentTestFunction:
        tensor = IndicatorSum.product(model.type_space.n_types, self.masks).to_tensor()
        return MomentTestFunction(self.sites(model.geography), tensor)


def welford_merge(parts):
    """Merge (count, mean, M2) chunk statistics in the given order."""
    n, mean, m2 = 0, 0.0, 0.0
    for cn, cmean, cm2 in parts:
        if cn == 0:
            continue
        delta = cmean - mean
        tot = n + cn
        mean += delta * cn / tot
        m2 += cm2 + delta * delta * n * cn / tot
        n = tot
    return n, mean, m2


def _chunk_stats(values) -> tuple[int, float, float]:
    arr = np.asarray(values, dtype=float)
    if arr.size == 0:
        return 0, 0.0, 0.0
    return int(arr.size), float(arr.mean()), float(((arr - arr.mean()) ** 2).sum())


def estimate_forward_moment(
    model: ModelConfig,
    F: MomentTestFunction,
    horizon: float,
    replicas: int,
    master_seed: int,
    experiment_id: str,
) -> MonteCarloEstimate:
    """Moran replicas evaluated through the moment function at the horizon."""
    X0 = model.initial_state()
    if horizon == 0.0:
        return MonteCarloEstimate(F.value(X0), 0.0, replicas, master_seed)
    states, gammas = stream_material(master_seed, experiment_id, side=0, count=replicas)
    counts = moran_checkpoints(
        model.params, model.type_space, X0, np.array([horizon]), states, gammas
    )
    values = _moment_values(counts[:, 0], F, model)
    n, mean, m2 = _chunk_stats(values)
    se = math.sqrt(m2 / (n - 1) / n) if n > 1 else 0.0
    return MonteCarloEstimate(mean, se, n, master_seed)


def _moment_values(counts, F: MomentTestFunction, model: ModelConfig) -> np.ndarray:
    freqs = counts / model.params.moran_pop_size  # (R, S, K)
    idx = {site: i for i, site in enumerate(model.geography.sites)}
    letters = "abcdefghijkl"
    subs = letters[: F.order]
    operands = [F.tensor]
    for v, site in enumerate(F.sites):
        operands.append(freqs[:, idx[site], :])
    eq = subs + "," + ",".join("r" + subs[v] for v in range(F.order)) + "->r"
    return np.einsum(eq, *operands)


def _dual_replica_value(model: ModelConfig, pairing: DualityPairing, rng) -> float:
    ts = model.type_space
    X0 = model.initial_state()
    rho = np.asarray(ts.base_measure, dtype=float) if ts.base_measure is not None else None
    sites = pairing.sites(model.geography)
    kind = pairing.kind
    if kind in ("fk", "plus", "gplus"):
        eta0 = dp.initial_state(len(sites), sites)
        f0 = DualFunction(IndicatorSum.product(ts.n_types, pairing.masks).to_tensor())
        res = run_function_dual(
            eta0, f0, ts, model.dual_rates(star=pairing.star), pairing.horizon, rng,
            form=kind, mutation=pairing.mutation_mode, star=pairing.star,
        )
        return dual_value(res, X0, rho=rho)
    if kind == "refined":
        eta0 = dp.initial_state(len(sites), sites)
        f0 = IndicatorSum.product(ts.n_types, pairing.masks)
        res = run_refined_dual(
            eta0, f0, ts, model.dual_rates(star=pairing.star), pairing.horizon, rng,
            variant="gpp", star=pairing.star,
        )
        return refined_value(res, X0, rho=rho)
    # tableau (uncoupled ordered rows) or setvalued (coupled, disjoint rows)
    params = SetDualParams(
        selection=model.params.selection,
        coalescence=model.params.resampling,
        migration=model.params.migration,
        kernel=model.geography.kernel,
        selection_mode="product" if kind == "tableau" else "coupled",
    )
    state = initial_set_dual(ts.n_types, list(zip(sites, pairing.masks)))
    state = simulate_set_dual(state, params, ts, pairing.horizon, rng)
    return evaluate_set_dual(state, X0)


def _dual_chunk(args) -> tuple[int, float, float, int]:
    model, pairing, master_seed, experiment_id, start, stop = args
    values = []
    aborts = 0
    for r in range(start, stop):
        rng = replica_rng(master_seed, experiment_id, side=1, replica=r)
        try:
            values.append(_dual_replica_value(model, pairing, rng))
        except (ReplicaAborted, UnsupportedMigration):
            aborts += 1
    n, mean, m2 = _chunk_stats(values)
    return n, mean, m2, aborts


def estimate_dual_expectation(
    model: ModelConfig,
    pairing: DualityPairing,
    replicas: int,
    master_seed: int,
    experiment_id: str,
    workers: int = 1,
) -> MonteCarloEstimate:
    if pairing.kind == "fk" and pairing.horizon >= fk_window(model.params.selection):
        raise HarnessError(
            f"{pairing.name}: horizon {pairing.horizon} outside the signed-dual window "
            f"log(2)/s = {fk_window(model.params.selection):.4g}"
        )
    chunks = [
        (model, pairing, master_seed, experiment_id, start, min(start + CHUNK, replicas))
        for start in range(0, replicas, CHUNK)
    ]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(_dual_chunk, chunks))
    else:
        parts = [_dual_chunk(c) for c in chunks]
    aborts = sum(p[3] for p in parts)
    n, mean, m2 = welford_merge([p[:3] for p in parts])
    se = math.sqrt(m2 / (n - 1) / n) if n > 1 else 0.0
    return MonteCarloEstimate(mean, se, n, master_seed, abort_count=aborts)


def duality_check(
    model: ModelConfig,
    pairing: DualityPairing,
    master_seed: int,
    threshold: float = 4.0,
    workers: int = 1,
) -> DualityCheckResult:
    """Forward moment against the dual expectation, independent seeds."""
    F = pairing.moment_function(model)
    lhs = estimate_forward_moment(
        model, F, pairing.horizon, pairing.forward_replicas, master_seed, pairing.name
    )
    rhs = estimate_dual_expectation(
        model, pairing, pairing.dual_replicas, master_seed, pairing.name, workers=workers
    )
    se = math.hypot(lhs.std_error, rhs.std_error)
    z = abs(lhs.mean - rhs.mean) / se if se > 0 else 0.0
    return DualityCheckResult(
        name=pairing.name, lhs=lhs, rhs=rhs, z_score=z, threshold=threshold,
        passed=bool(z <= threshold),
    )


# ---------------------------------------------------------------------------
# ergodic theorem and decoupling experiments


@dataclass(frozen=True)
class ErgodicReport:
    t_grid: tuple[float, ...]
    moment_names: tuple[str, ...]
    distances: np.ndarray  # (T, n_moments)
    combined_se: np.ndarray
    max_final_z: float
    trapped_fraction: np.ndarray  # per t
    trapped_by_horizon: float
    dual_horizon: float
    trap_value_frequencies: tuple[float, float]  # (q0, q1)
    dual_aborts: int
    converged: bool


def ergodic_experiment(
    model: ModelConfig,
    background_b,
    t_grid,
    replicas: int,
    master_seed: int,
    experiment_id: str = "ergodic",
    dual_replicas: int = 4000,
    dual_horizon: float | None = None,
) -> ErgodicReport:
    """Two initial product laws, one dynamics: moment distances on a time
    grid plus the set-valued dual's trapping statistics.

    Requires strictly positive off-diagonal mutation rates, the ergodic
    theorem's hypothesis.
    """
    rates = model.type_space.channel_rates()
    off = rates[~np.eye(model.type_space.n_types, dtype=bool)]
    if np.any(off <= 0):
        raise HarnessError(
            "ergodic experiment requires every off-diagonal mutation rate "
            "to be positive; uniqueness of the equilibrium is proved under "
            "that hypothesis"
        )
    t_grid = np.asarray(sorted(t_grid), dtype=float)
    model_b = replace(model, background=tuple(background_b), site_overrides=())

    K = model.type_space.n_types
    geo = model.geography
    moments = []
    names = []
    for k in range(K):
        moments.append(MomentTestFunction((geo.sites[0],), np.eye(K)[k]))
        names.append(f"E[x_0({k + 1})]")
    for k in range(K):
        f = np.zeros((K, K))
        f[k, k] = 1.0
        moments.append(MomentTestFunction((geo.sites[0], geo.sites[0]), f))
        names.append(f"E[x_0({k + 1})^2]")

    sides = []
    for side, m in ((0, model), (2, model_b)):
        states, gammas = stream_material(master_seed, experiment_id, side=side, count=replicas)
        counts = moran_checkpoints(
            m.params, m.type_space, m.initial_state(), t_grid, states, gammas
        )
        vals = np.stack(
            [
                np.stack([_moment_values(counts[:, ti], F, m) for F in moments], axis=1)
                for ti in range(t_grid.size)
            ],
            axis=1,
        )  # (R, T, n_moments)
        sides.append(vals)
    a, b = sides
    dist = np.abs(a.mean(axis=0) - b.mean(axis=0))
    se = np.sqrt(a.var(axis=0, ddof=1) / replicas + b.var(axis=0, ddof=1) / replicas)

    horizon = dual_horizon if dual_horizon is not None else float(t_grid[-1])
    params = SetDualParams(
        selection=model.params.selection,
        coalescence=model.params.resampling,
        migration=model.params.migration,
        kernel=geo.kernel,
    )
    trap_times, trap_values, aborts = [], [], 0
    for r in range(dual_replicas):
        rng = replica_rng(master_seed, experiment_id, side=4, replica=r)
        state = initial_set_dual(K, [(geo.sites[0], (1 << (r % K)))])
        try:
            state = simulate_set_dual(state, params, model.type_space, horizon, rng)
        except UnsupportedMigration:
            aborts += 1
            continue
        if state.trapped:
            trap_times.append(state.trap_time)
            trap_values.append(state.trap_value)
    trap_times = np.asarray(trap_times)
    done = max(dual_replicas - aborts, 1)
    trapped_fraction = np.array([(trap_times <= t).sum() / done for t in t_grid])
    q1 = float(np.mean(trap_values)) if trap_values else 0.0
    final_z = float((dist[-1] / np.maximum(se[-1], 1e-300)).max())
    return ErgodicReport(
        t_grid=tuple(t_grid),
        moment_names=tuple(names),
        distances=dist,
        combined_se=se,
        max_final_z=final_z,
        trapped_fraction=trapped_fraction,
        trapped_by_horizon=float((trap_times <= horizon).sum() / done),
        dual_horizon=horizon,
        trap_value_frequencies=(1.0 - q1, q1),
        dual_aborts=aborts,
        converged=bool(np.all(dist[-1] <= 4 * se[-1])),
    )


@dataclass(frozen=True)
class DecouplingReport:
    distances: tuple[int, ...]
    collision_frequency: np.ndarray
    collision_se: np.ndarray
    trapping_rate: float
    bound: np.ndarray
    monotone: bool
    within_bound: bool


def decoupling_check(
    model: ModelConfig,
    distances,
    horizon: float,
    replicas: int,
    master_seed: int,
    experiment_id: str = "decoupling",
) -> DecouplingReport:
    """Collision frequency of two dual clouds as a function of their
    initial hierarchical distance; must not increase with distance and
    should sit under const * (c_l N^{-2l}) / (lambda + c_l N^{-2l}) with
    the empirically fitted trapping rate lambda."""
    geo = model.geography
    kernel = geo.kernel
    if kernel.mode != "hierarchical":
        raise HarnessError("decoupling check needs the hierarchical geography")
    K = model.type_space.n_types
    params = SetDualParams(
        selection=model.params.selection,
        coalescence=model.params.resampling,
        migration=model.params.migration,
        kernel=kernel,
    )
    freq, ses, rate_samples = [], [], []
    for ell in distances:
        origin = geo.sites[0]
        other = geo.site_at_distance(origin, ell)
        hits = 0
        done = 0
        for r in range(replicas):
            rng = replica_rng(master_seed, experiment_id, side=10 + ell, replica=r)
            state = initial_set_dual(
                K, [(origin, 0b01 if K == 2 else 1), (other, 0b10 if K == 2 else 2)]
            )
            try:
                state = simulate_set_dual(state, params, model.type_space, horizon, rng)
            except UnsupportedMigration:
                continue
            done += 1
            if state.first_collision_time is not None:
                hits += 1
            if state.trapped:
                rate_samples.append(state.trap_time)
        p = hits / max(done, 1)
        freq.append(p)
        ses.append(math.sqrt(max(p * (1 - p), 1e-12) / max(done, 1)))
    freq = np.asarray(freq)
    ses = np.asarray(ses)
    lam = 1.0 / float(np.mean(rate_samples)) if rate_samples else float("nan")
    level_rates = list(kernel.level_rates) + [0.0] * 8
    ratio = np.array(
        [
            (level_rates[ell] / kernel.order ** (2 * ell))
            / (lam + level_rates[ell] / kernel.order ** (2 * ell))
            if level_rates[ell] > 0
            else 0.0
            for ell in distances
        ]
    )
    # calibrate the constant at the first positive-distance point
    scale = 1.0
    for i, ell in enumerate(distances):
        if ell > 0 and ratio[i] > 0:
            scale = max(freq[i] / ratio[i], 1.0)
            break
    bound = np.minimum(scale * ratio, 1.0)
    monotone = bool(np.all(freq[1:] <= freq[:-1] + 4 * (ses[1:] + ses[:-1])))
    within = bool(
        all(
            freq[i] <= bound[i] + 4 * ses[i]
            for i, ell in enumerate(distances)
            if ell > 0
        )
    )
    return DecouplingReport(
        distances=tuple(distances),
        collision_frequency=freq,
        collision_se=ses,
        trapping_rate=lam,
        bound=bound,
        monotone=monotone,
        within_bound=within,
    )


# ---------------------------------------------------------------------------
# set-valued dual of finite Markov chains against matrix exponentials


def markov_set_dual_experiment(
    master_seed: int,
    two_state_replicas: int = 100_000,
    three_state_replicas: int = 20_000,
    n_generators: int = 5,
    times=(0.1, 0.5, 1.0, 2.0),
    threshold: float = 4.0,
) -> dict:
    """Membership frequencies of the subset dual versus exp(tQ).

    The 2-state symmetric rate-1 chain runs at full replica count; then
    ``n_generators`` random 3-state generators are checked on all nine
    transition probabilities over the time grid.  Membership of state i
    in a dual started at {j} estimates the i-to-j transition probability.
    """
    from scipy.linalg import expm

    from .refined_dual import simulate_subset_path

    times = tuple(float(t) for t in times)
    results = []

    Q2 = np.array([[-1.0, 1.0], [1.0, -1.0]])
    member = np.zeros(len(times))
    for r in range(two_state_replicas):
        rng = replica_rng(master_seed, "markov-2state", side=0, replica=r)
        masks = simulate_subset_path(Q2, 0, times, rng)
        for ti, mask in enumerate(masks):
            member[ti] += mask & 1
    member /= two_state_replicas
    curve_oracle = np.array([(1 + math.exp(-2 * t)) / 2 for t in times])
    for ti, t in enumerate(times):
        p = curve_oracle[ti]
        se = math.sqrt(p * (1 - p) / two_state_replicas)
        z = abs(member[ti] - p) / se
        results.append(
            DualityCheckResult(
                name=f"2state t={t:g}",
                lhs=MonteCarloEstimate(float(member[ti]), se, two_state_replicas, master_seed),
                rhs=MonteCarloEstimate(float(p), 0.0, 0, master_seed),
                z_score=float(z),
                threshold=threshold,
                passed=bool(z <= threshold),
            )
        )

    gen_rng = replica_rng(master_seed, "markov-generators", side=0, replica=0)
    K = 3
    for g in range(n_generators):
        A = gen_rng.uniform(0.2, 1.0, size=(K, K))
        np.fill_diagonal(A, 0.0)
        Q = A - np.diag(A.sum(axis=1))
        oracle = {t: expm(Q * t) for t in times}
        for j in range(K):
            counts = np.zeros((len(times), K))
            for r in range(three_state_replicas):
                rng = replica_rng(master_seed, f"markov-g{g}-start{j}", side=0, replica=r)
                masks = simulate_subset_path(Q, j, times, rng)
                for ti, mask in enumerate(masks):
                    for i in range(K):
                        counts[ti, i] += (mask >> i) & 1
            counts /= three_state_replicas
            for ti, t in enumerate(times):
                for i in range(K):
                    p = float(oracle[t][i, j])
                    se = max(math.sqrt(p * (1 - p) / three_state_replicas), 1e-9)
                    z = abs(counts[ti, i] - p) / se
                    results.append(
                        DualityCheckResult(
                            name=f"gen{g} t={t:g} P[{i + 1}->{j + 1}]",
                            lhs=MonteCarloEstimate(
                                float(counts[ti, i]), se, three_state_replicas, master_seed
                            ),
                            rhs=MonteCarloEstimate(p, 0.0, 0, master_seed),
                            z_score=float(z),
                            threshold=threshold,
                            passed=bool(z <= threshold),
                        )
                    )
    return {
        "results": results,
        "curve_times": list(times),
        "curve_mc": list(map(float, member)),
        "curve_oracle": list(map(float, curve_oracle)),
    }


# ---------------------------------------------------------------------------
# the standard battery: every dual kind and modification, three geographies


def _two_type_space(mbar: float) -> TypeSpace:
    return TypeSpace(
        fitness=(0.0, 1.0),
        mutation_matrix=((0.6, 0.4), (0.3, 0.7)),
        mutation_rate=0.5,
        state_independent_rate=mbar,
        base_measure=(0.5, 0.5) if mbar > 0 else None,
    )


def _four_type_space(mbar: float) -> TypeSpace:
    rows = tuple(tuple(0.25 for _ in range(4)) for _ in range(4))
    return TypeSpace(
        fitness=(0.0, 0.35, 1.0, 1.0),
        mutation_matrix=rows,
        mutation_rate=0.5,
        state_independent_rate=mbar,
        base_measure=(0.25, 0.25, 0.25, 0.25) if mbar > 0 else None,
    )


def _geography(name: str) -> tuple[Geography, float]:
    """(geography, migration rate); the single-site case switches c off."""
    if name == "single":
        return Geography(MigrationKernel(order=1, mode="island")), 0.0
    if name == "island3":
        return Geography(MigrationKernel(order=3, mode="island")), 0.5
    if name == "hier2":
        kernel = MigrationKernel(
            order=2, mode="hierarchical", level_rates=(1.0, 0.5, 0.25), max_depth=3
        )
        return Geography(kernel), 0.5
    raise HarnessError(f"unknown geography {name!r}")


def standard_battery(moran_pop_size: int = 1000) -> list[tuple[ModelConfig, DualityPairing]]:
    """Twelve configurations spanning geography x type count x the
    state-independent component, rotating through every dual kind and
    modification (star site, random mutation jumps, refined, tableau,
    set-valued)."""
    plan = [
        # geography, K, mbar, kind, mutation mode, star, horizon, name tag
        ("single", 2, 0.0, "fk", "flow", False, 1.0),
        ("single", 2, 0.25, "plus", "flow", True, 1.0),
        ("single", 4, 0.0, "gplus", "flow", False, 1.0),
        ("single", 4, 0.3, "refined", "jump", True, 1.0),
        ("island3", 2, 0.0, "setvalued", "jump", False, 0.6),
        ("island3", 2, 0.25, "plus", "jump", False, 0.6),
        ("island3", 4, 0.0, "tableau", "jump", False, 0.6),
        ("island3", 4, 0.3, "gplus", "flow", True, 0.6),
        ("hier2", 2, 0.0, "refined", "jump", False, 0.5),
        ("hier2", 2, 0.25, "plus", "jump", True, 0.5),
        ("hier2", 4, 0.0, "setvalued", "jump", False, 0.5),
        ("hier2", 4, 0.3, "fk", "flow", False, 0.5),
    ]
    out = []
    for geo_name, K, mbar, kind, mut, star, horizon in plan:
        geography, c = _geography(geo_name)
        ts = _two_type_space(mbar) if K == 2 else _four_type_space(mbar)
        params = ForwardParams(
            migration=c, selection=0.3, mutation=0.5, resampling=1.0,
            moran_pop_size=moran_pop_size,
        )
        background = (0.4, 0.6) if K == 2 else (0.4, 0.3, 0.2, 0.1)
        model = ModelConfig(
            type_space=ts, params=params, geography=geography, background=background
        )
        sites = (0, 0) if geo_name == "single" else (0, 1)
        masks = (0b10, 0b01) if K == 2 else (0b1110, 0b1100)
        name = f"{geo_name}-K{K}-mbar{'+' if mbar > 0 else '0'}-{kind}"
        if star:
            name += "-star"
        if mut == "jump" and kind in ("fk", "plus", "gplus"):
            name += "-jump"
        fwd = {"single": 2500, "island3": 1800, "hier2": 1000}[geo_name]
        out.append(
            (
                model,
                DualityPairing(
                    name=name,
                    site_indices=sites,
                    masks=masks,
                    horizon=horizon,
                    kind=kind,
                    mutation_mode=mut,
                    star=star,
                    forward_replicas=fwd,
                    dual_replicas=20000,
                ),
            )
        )
    return out
