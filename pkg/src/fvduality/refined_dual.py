"""Refined duals on sums of products of subset indicators (finite types).

A state is a list of rows; each row assigns one subset of the type space
(a bitmask) to each variable, and the state's value against a product
measure is the sum over rows of the per-variable subset masses.  Births
split rows through a fitness-level set, mutation channels rewrite one
variable's subsets simultaneously in every row, coalescence intersects
two variables.  Rows that acquire an empty factor are dropped on the
spot; the row count is bounded by 2^births.

The same subset jump, run for the rate matrix of an arbitrary finite
Markov chain, gives the chain's set-valued dual: membership probabilities
reproduce transition probabilities.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import dual_particle as dp
from .dual_function import ReplicaAborted
from .forward import STAR
from .geometry import FitnessDecomposition, TypeSpace, fitness_decomposition

DEFAULT_ROW_CAP = 4096


class RefinedDualError(ValueError):
    pass


def mask_vector(mask: int, n_types: int) -> np.ndarray:
    return np.array([(mask >> k) & 1 for k in range(n_types)], dtype=float)


def mask_measure(vec: np.ndarray, mask: int) -> float:
    total = 0.0
    k = 0
    while mask:
        if mask & 1:
            total += vec[k]
        mask >>= 1
        k += 1
    return float(total)


@dataclass(frozen=True)
class IndicatorSum:
    n_types: int
    arity: int
    rows: tuple[tuple[int, ...], ...]

    def __post_init__(self):
        full = self.full_mask
        for row in self.rows:
            if len(row) != self.arity:
                raise RefinedDualError("row length must equal the arity")
            for mask in row:
                if mask < 0 or mask > full:
                    raise RefinedDualError(f"mask {mask} outside the type space")

    @property
    def full_mask(self) -> int:
        return (1 << self.n_types) - 1

    @classmethod
    def product(cls, n_types: int, masks) -> "IndicatorSum":
        masks = tuple(int(m) for m in masks)
        return cls(n_types, len(masks), (masks,))

    def is_zero(self) -> bool:
        return not self.rows

    def to_tensor(self) -> np.ndarray:
        out = np.zeros((self.n_types,) * self.arity)
        for row in self.rows:
            term = np.ones(())
            for mask in row:
                term = np.multiply.outer(term, mask_vector(mask, self.n_types))
            out = out + term
        return out

    def evaluate(self, vectors) -> float:
        """Sum over rows of the product of per-variable subset masses."""
        vectors = list(vectors)
        if len(vectors) != self.arity:
            raise RefinedDualError("need one measure vector per variable")
        total = 0.0
        for row in self.rows:
            term = 1.0
            for mask, vec in zip(row, vectors):
                term *= mask_measure(vec, mask)
                if term == 0.0:
                    break
            total += term
        return total


def format_indicator_sum(f: IndicatorSum) -> str:
    """Rows of parenthesized bitstrings, one line per summand."""
    lines = []
    for row in f.rows:
        cells = []
        for mask in row:
            bits = "".join("1" if (mask >> k) & 1 else "0" for k in range(f.n_types))
            cells.append(f"({bits})")
        lines.append(" ".join(cells))
    return "\n".join(lines)


def _prune(rows) -> tuple[tuple[int, ...], ...]:
    return tuple(row for row in rows if all(mask != 0 for mask in row))


def selection_split(
    f: IndicatorSum, variable: int, level_mask: int, variant: str = "product"
) -> IndicatorSum:
    """Birth transition: each row splits through the level set at ``variable``.

    variant "product": modified row keeps (B & A) and the newborn variable
    gets the full set; offspring row keeps B and the newborn gets ~A.
    variant "coupled": the complement ~A replaces the acted factor and the
    old factor moves onto the newborn variable, which makes the two rows
    disjoint events.  Offspring rows sit directly below their parent.
    """
    if variant not in ("product", "coupled"):
        raise RefinedDualError(f"unknown selection variant {variant!r}")
    if not 0 <= variable < f.arity:
        raise RefinedDualError("selection variable out of range")
    full = f.full_mask
    if not 0 < level_mask <= full:
        raise RefinedDualError("level set must be a nonempty subset of the types")
    comp = full & ~level_mask
    new_rows = []
    for row in f.rows:
        b = row[variable]
        modified = row[:variable] + (b & level_mask,) + row[variable + 1:] + (full,)
        if variant == "product":
            offspring = row + (comp,)
        else:
            offspring = row[:variable] + (comp,) + row[variable + 1:] + (b,)
        new_rows.extend((modified, offspring))
    return replace(f, arity=f.arity + 1, rows=_prune(new_rows))


def mutation_jump(f: IndicatorSum, variable: int, source: int, target: int) -> IndicatorSum:
    """Channel (source -> target): in every row the factor at ``variable``
    gains ``source`` if it contains ``target``, loses it otherwise."""
    if source == target:
        raise RefinedDualError("mutation channel needs two distinct types")
    bit_s, bit_t = 1 << source, 1 << target
    new_rows = []
    for row in f.rows:
        b = row[variable]
        b = b | bit_s if b & bit_t else b & ~bit_s
        new_rows.append(row[:variable] + (b,) + row[variable + 1:])
    return replace(f, rows=_prune(new_rows))


def coalesce_variables(f: IndicatorSum, i: int, j: int) -> IndicatorSum:
    """Intersect variable j into variable i and drop the j-th factor."""
    if not 0 <= i < j < f.arity:
        raise RefinedDualError("need 0 <= i < j < arity")
    new_rows = []
    for row in f.rows:
        merged = row[:i] + (row[i] & row[j],) + row[i + 1: j] + row[j + 1:]
        new_rows.append(merged)
    return replace(f, arity=f.arity - 1, rows=_prune(new_rows))


def _subset_toggle_rate(mask: int, i: int, rates: np.ndarray) -> float:
    """Rate at which type i's membership in ``mask`` flips: outsiders join
    through their channels into the set, members leave through channels out."""
    K = rates.shape[0]
    inside = (mask >> i) & 1
    r = 0.0
    for ell in range(K):
        if ell == i:
            continue
        in_set = (mask >> ell) & 1
        if inside and not in_set:
            r += rates[i, ell]  # member leaves toward outside channels
        elif not inside and in_set:
            r += rates[i, ell]  # outsider joins through channels into the set
    return r


def markov_chain_set_dual(
    Q: np.ndarray, start_type: int, horizon: float, rng: np.random.Generator
) -> int:
    """Set-valued dual of a finite-state chain with generator Q.

    The returned subset A_t satisfies P[i in A_t | A_0 = {j}] =
    P[Z_t = j | Z_0 = i] for every i (membership of i in a dual started
    at the target j gives the i-to-j transition probability; for
    symmetric generators the two indices may be swapped).  Full and
    empty sets are traps.
    """
    Q = np.asarray(Q, dtype=float)
    K = Q.shape[0]
    if Q.shape != (K, K) or np.any(Q - np.diag(np.diag(Q)) < 0):
        raise RefinedDualError("Q must be a square rate matrix")
    if np.any(np.abs(Q.sum(axis=1)) > 1e-9):
        raise RefinedDualError("Q rows must sum to zero")
    rates = Q - np.diag(np.diag(Q))
    mask = 1 << start_type
    full = (1 << K) - 1
    t = 0.0
    while 0 < mask < full:
        toggles = [(i, _subset_toggle_rate(mask, i, rates)) for i in range(K)]
        total = sum(r for _, r in toggles)
        if total <= 0:
            break
        t += rng.exponential(1.0 / total)
        if t >= horizon:
            break
        u = rng.uniform() * total
        acc = 0.0
        for i, r in toggles:
            acc += r
            if u <= acc:
                mask ^= 1 << i
                break
    return mask


def simulate_subset_path(
    Q: np.ndarray, start_type: int, times, rng: np.random.Generator
) -> list[int]:
    """Subset at each checkpoint time (ascending), one trajectory."""
    Q = np.asarray(Q, dtype=float)
    rates = Q - np.diag(np.diag(Q))
    K = Q.shape[0]
    full = (1 << K) - 1
    mask = 1 << start_type
    out = []
    t = 0.0
    times = list(times)
    idx = 0
    while idx < len(times):
        toggles = [(i, _subset_toggle_rate(mask, i, rates)) for i in range(K)]
        total = sum(r for _, r in toggles)
        if total <= 0:
            break
        wait = rng.exponential(1.0 / total)
        while idx < len(times) and t + wait >= times[idx]:
            out.append(mask)
            idx += 1
        if idx >= len(times):
            return out
        t += wait
        u = rng.uniform() * total
        acc = 0.0
        for i, r in toggles:
            acc += r
            if u <= acc:
                mask ^= 1 << i
                break
    while idx < len(times):
        out.append(mask)
        idx += 1
    return out


@dataclass
class RefinedDualResult:
    state: dp.DualParticleState
    function: IndicatorSum
    locations: list
    births: int
    max_rows: int


def run_refined_dual(
    eta0: dp.DualParticleState,
    f0: IndicatorSum,
    type_space: TypeSpace,
    rates: dp.DualRates,
    horizon: float,
    rng: np.random.Generator,
    *,
    variant: str = "gpp",
    star: bool = False,
    decomposition: FitnessDecomposition | None = None,
    row_cap: int = DEFAULT_ROW_CAP,
) -> RefinedDualResult:
    """Indicator-sum dual driven by the particle system.

    variant "fpp" uses the product-form birth split, "gpp" the coupled one.
    Mutation runs as channel jumps at rate m*m_ij per variable (minus the
    dominated part when ``star`` is on), applied to all rows at once.
    """
    if variant not in ("fpp", "gpp"):
        raise RefinedDualError(f"unknown refined variant {variant!r}")
    if f0.arity != eta0.size:
        raise RefinedDualError("arity must match the particle system size")
    if f0.n_types != type_space.n_types:
        raise RefinedDualError("type-space sizes differ")
    if star and type_space.state_independent_rate <= 0:
        raise RefinedDualError("star mode requires a state-independent mutation part")

    dec = decomposition or fitness_decomposition(type_space)
    channel = type_space.channel_rates(state_dependent_only=star)
    channel_total = float(channel.sum())
    flat = channel.flatten()
    channel_probs = flat / channel_total if channel_total > 0 else None
    split_variant = "product" if variant == "fpp" else "coupled"

    state = eta0
    f = f0
    t = 0.0
    births = 0
    max_rows = len(f.rows)
    while True:
        live = [i for i, loc in enumerate(state.locations()) if loc != STAR]
        eta_rate = dp.total_event_rate(state, rates)
        mut_rate = channel_total * len(live)
        total = eta_rate + mut_rate
        if total <= 0:
            break
        wait = rng.exponential(1.0 / total)
        if t + wait >= horizon:
            break
        t += wait
        if rng.uniform() * total < mut_rate:
            var = live[int(rng.integers(len(live)))]
            pick = int(rng.choice(flat.size, p=channel_probs))
            i, j = divmod(pick, type_space.n_types)
            f = mutation_jump(f, var, i, j)
        else:
            state, ev = dp.sample_event(state, rates, rng, t)
            if ev.kind == "coalescence":
                f = coalesce_variables(f, ev.labels[0], ev.labels[1])
            elif ev.kind == "birth":
                births += 1
                level = dec.sample_level(rng)
                f = selection_split(f, ev.labels[0], dec.level_masks[level], split_variant)
                if len(f.rows) > row_cap:
                    raise ReplicaAborted(f"row cap {row_cap} reached")
            # migration / star move locations only
        max_rows = max(max_rows, len(f.rows))
        if len(f.rows) > 2**births * len(f0.rows):
            raise RefinedDualError("row count exceeded the 2^births bound")
        if f.is_zero():
            break
    return RefinedDualResult(
        state=state, function=f, locations=state.locations(), births=births, max_rows=max_rows
    )


def refined_value(result: RefinedDualResult, X0, rho=None) -> float:
    vectors = []
    for loc in result.locations:
        if loc == STAR:
            if rho is None:
                raise RefinedDualError("star variable present but no base measure")
            vectors.append(np.asarray(rho, dtype=float))
        else:
            vectors.append(X0.vector_at(loc))
    return result.function.evaluate(vectors)


def mutation_semigroup_check(
    masks,
    type_space: TypeSpace,
    horizon: float,
    replicas: int,
    rng_factory,
) -> dict:
    """Pure mutation: indicator-jump dual versus the per-variable semigroup.

    Entrywise comparison of E[product of evolved indicators] with the
    product of one-variable flows; returns per-entry z-scores.
    """
    f0 = IndicatorSum.product(type_space.n_types, masks)
    K = type_space.n_types
    channel = type_space.channel_rates()
    channel_total = float(channel.sum())
    flat = channel.flatten()
    probs = flat / channel_total if channel_total > 0 else None

    acc = np.zeros((K,) * len(masks))
    acc_sq = np.zeros_like(acc)
    for r in range(replicas):
        rng = rng_factory(r)
        f = f0
        t = 0.0
        while channel_total > 0:
            t += rng.exponential(1.0 / (channel_total * f.arity))
            if t >= horizon:
                break
            var = int(rng.integers(f.arity))
            pick = int(rng.choice(flat.size, p=probs))
            i, j = divmod(pick, K)
            f = mutation_jump(f, var, i, j)
        tensor = f.to_tensor()
        acc += tensor
        acc_sq += tensor**2
    mean = acc / replicas
    var = np.maximum(acc_sq / replicas - mean**2, 0.0)
    se = np.sqrt(var / replicas)

    from .oracles import mutation_flow_reference

    T = mutation_flow_reference(type_space, horizon)
    expected = np.ones(())
    for mask in masks:
        expected = np.multiply.outer(expected, T @ mask_vector(mask, K))
    z = np.abs(mean - expected) / np.maximum(se, 1e-12)
    return {
        "mc_mean": mean,
        "expected": expected,
        "se": se,
        "max_z": float(z.max()),
        "passed": bool(np.all(np.abs(mean - expected) <= 4 * se + 1e-9)),
    }
