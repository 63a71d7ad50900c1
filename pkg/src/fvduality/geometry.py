"""Geographic space, migration kernel, and type space with fitness levels.

The geographic space is either the N-island model (sites 0..N-1, uniform
migration) or a truncated hierarchical group: addresses are digit strings
base N, distance is the ultrametric "smallest level above which all digits
agree", and migration picks a level k with weight c_{k-1}/N^{k-1} and then
a uniform address in the radius-k ball.  Experiments declare a maximum
depth; kernel mass on deeper levels is folded into the deepest one, which
turns the group into the finite torus Z_N^depth that simulations run on.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

FITNESS_SNAP_TOL = 1e-12


class GeometryError(ValueError):
    pass


@dataclass(frozen=True)
class HierarchicalAddress:
    """Address in the hierarchical group: finitely many base-N digits.

    Digits are stored least-significant first and normalized without
    trailing zeros, so equality and hashing agree with group identity.
    """

    digits: tuple[int, ...]
    order: int

    def __post_init__(self):
        if self.order < 1:
            raise GeometryError(f"group order must be >= 1, got {self.order}")
        if any(d < 0 or d >= self.order for d in self.digits):
            raise GeometryError(f"digits out of range [0, {self.order - 1}]: {self.digits}")
        # canonical form: strip trailing zeros
        digits = self.digits
        while digits and digits[-1] == 0:
            digits = digits[:-1]
        object.__setattr__(self, "digits", digits)

    def digit(self, i: int) -> int:
        return self.digits[i] if i < len(self.digits) else 0

    def __add__(self, other: "HierarchicalAddress") -> "HierarchicalAddress":
        self._require_same_group(other)
        w = max(len(self.digits), len(other.digits))
        return HierarchicalAddress(
            tuple((self.digit(i) + other.digit(i)) % self.order for i in range(w)), self.order
        )

    def __sub__(self, other: "HierarchicalAddress") -> "HierarchicalAddress":
        self._require_same_group(other)
        w = max(len(self.digits), len(other.digits))
        return HierarchicalAddress(
            tuple((self.digit(i) - other.digit(i)) % self.order for i in range(w)), self.order
        )

    def _require_same_group(self, other: "HierarchicalAddress") -> None:
        if self.order != other.order:
            raise GeometryError(f"mixed group orders {self.order} and {other.order}")


def ultrametric_distance(a: HierarchicalAddress, b: HierarchicalAddress) -> int:
    """Smallest k such that the digits of a and b agree from index k on."""
    a._require_same_group(b)
    w = max(len(a.digits), len(b.digits))
    for k in range(w, 0, -1):
        if a.digit(k - 1) != b.digit(k - 1):
            return k
    return 0


@dataclass(frozen=True)
class MigrationKernel:
    """Migration step distribution, plus its reversal.

    mode "island": destination uniform on {0..N-1} (single-digit addresses).
    mode "hierarchical": level k in 1..max_depth chosen with weight
    c_{k-1}/N^{k-1} (tail beyond max_depth folded into the deepest level),
    then a uniform point of the radius-k ball around the origin.  Both
    directions are exposed; the reversed kernel a-bar(x, y) = a(y, x) is
    realized by negating the sampled displacement, which for these
    symmetric kernels is equal in law to the forward step.
    """

    order: int
    mode: str = "hierarchical"
    level_rates: tuple[float, ...] = (1.0,)
    max_depth: int = 3

    level_weights: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.mode not in ("island", "hierarchical"):
            raise GeometryError(f"unknown kernel mode {self.mode!r}")
        if self.order < (1 if self.mode == "island" else 2):
            raise GeometryError("kernel needs order >= 2 (island mode allows a single site)")
        if self.mode == "hierarchical":
            if self.max_depth < 1:
                raise GeometryError("max_depth must be >= 1")
            rates = np.asarray(self.level_rates, dtype=float)
            if rates.size == 0 or np.any(~np.isfinite(rates)) or np.any(rates < 0):
                raise GeometryError(f"level rates must be finite and nonnegative: {self.level_rates}")
            # raw weight of level k (1-based) is c_{k-1} / N^{k-1}
            raw = rates / self.order ** np.arange(rates.size)
            if not np.isfinite(raw.sum()) or raw.sum() <= 0:
                raise GeometryError("level rates sum to zero or diverge; kernel undefined")
            w = np.zeros(self.max_depth)
            w[: min(self.max_depth, raw.size)] = raw[: self.max_depth]
            if raw.size > self.max_depth:
                w[-1] += raw[self.max_depth:].sum()  # fold tail into deepest level
            object.__setattr__(self, "level_weights", w / w.sum())
        else:
            object.__setattr__(self, "level_weights", np.ones(1))

    @property
    def site_count(self) -> int:
        return self.order if self.mode == "island" else self.order ** self.max_depth

    def sample_displacement(self, rng: np.random.Generator) -> HierarchicalAddress:
        if self.mode == "island":
            return HierarchicalAddress((int(rng.integers(self.order)),), self.order)
        k = int(rng.choice(self.level_weights.size, p=self.level_weights)) + 1
        return HierarchicalAddress(tuple(int(rng.integers(self.order)) for _ in range(k)), self.order)

    def sample_target(self, rng: np.random.Generator, origin: HierarchicalAddress) -> HierarchicalAddress:
        """Destination of a forward migration step from ``origin``."""
        if self.mode == "island":
            return self.sample_displacement(rng)
        return origin + self.sample_displacement(rng)

    def sample_target_reversed(self, rng: np.random.Generator, origin: HierarchicalAddress) -> HierarchicalAddress:
        """Destination under the reversed kernel a-bar(x, y) = a(y, x)."""
        if self.mode == "island":
            return self.sample_displacement(rng)
        return origin - self.sample_displacement(rng)

    def step_probability(self, displacement: HierarchicalAddress) -> float:
        """Probability a(0, displacement) of one migration step."""
        if self.mode == "island":
            return 1.0 / self.order
        j = ultrametric_distance(displacement, HierarchicalAddress((), self.order))
        if j > self.max_depth:
            return 0.0
        ks = np.arange(max(j, 1), self.max_depth + 1)
        return float(np.sum(self.level_weights[ks - 1] / self.order ** ks.astype(float)))


def sample_migration_target(
    rng: np.random.Generator, origin: HierarchicalAddress, kernel: MigrationKernel
) -> HierarchicalAddress:
    if kernel.mode == "hierarchical" and origin.order != kernel.order:
        raise GeometryError("address and kernel group orders differ")
    return kernel.sample_target(rng, origin)


class Geography:
    """Finite site table for a kernel: addresses, indices, step matrices."""

    def __init__(self, kernel: MigrationKernel):
        self.kernel = kernel
        if kernel.mode == "island":
            self.sites = [HierarchicalAddress((i,), kernel.order) for i in range(kernel.order)]
        else:
            self.sites = [
                HierarchicalAddress(self._unrank(i, kernel.order, kernel.max_depth), kernel.order)
                for i in range(kernel.site_count)
            ]
        self.index = {a: i for i, a in enumerate(self.sites)}
        S = len(self.sites)
        A = np.zeros((S, S))
        for i, a in enumerate(self.sites):
            for j, b in enumerate(self.sites):
                A[i, j] = kernel.step_probability(b - a) if kernel.mode == "hierarchical" else 1.0 / S
        self.forward_matrix = A
        self.reversed_matrix = A.T.copy()

    @staticmethod
    def _unrank(i: int, order: int, depth: int) -> tuple[int, ...]:
        digits = []
        for _ in range(depth):
            digits.append(i % order)
            i //= order
        return tuple(digits)

    def __len__(self) -> int:
        return len(self.sites)

    def site_at_distance(self, origin: HierarchicalAddress, level: int) -> HierarchicalAddress:
        """Some address at exactly the given ultrametric distance from origin."""
        if level == 0:
            return origin
        delta = (0,) * (level - 1) + (1,)
        return origin + HierarchicalAddress(delta, origin.order)


@dataclass(frozen=True)
class TypeSpace:
    """Finite type space: fitness in [0,1] (min 0, max 1), mutation kernel.

    ``state_independent_rate`` (m-bar) and ``base_measure`` rho describe a
    dominated state-independent mutation component: when m-bar > 0 every
    entry must satisfy m * M[i, j] >= m-bar * rho[j].
    """

    fitness: tuple[float, ...]
    mutation_matrix: tuple[tuple[float, ...], ...]
    mutation_rate: float = 0.0
    state_independent_rate: float = 0.0
    base_measure: tuple[float, ...] | None = None

    def __post_init__(self):
        errs = self.validation_errors()
        if errs:
            raise GeometryError("; ".join(errs))

    def validation_errors(self) -> list[str]:
        errs = []
        chi = np.asarray(self.fitness, dtype=float)
        K = chi.size
        if K < 1:
            return ["fitness: empty type space"]
        if np.any(chi < 0) or np.any(chi > 1):
            errs.append(f"fitness: values outside [0,1]: {self.fitness}")
        else:
            if abs(chi.min()) > FITNESS_SNAP_TOL:
                errs.append(f"fitness: minimum must be 0, got {chi.min()}")
            if abs(chi.max() - 1.0) > FITNESS_SNAP_TOL and K > 1:
                errs.append(f"fitness: maximum must be 1, got {chi.max()}")
        M = np.asarray(self.mutation_matrix, dtype=float)
        if M.shape != (K, K):
            errs.append(f"mutation_matrix: shape {M.shape} does not match {K} types")
            return errs
        if np.any(M < 0) or np.any(np.abs(M.sum(axis=1) - 1.0) > 1e-9):
            errs.append("mutation_matrix: rows must be probability vectors")
        if self.mutation_rate < 0:
            errs.append(f"mutation_rate: must be >= 0, got {self.mutation_rate}")
        if self.state_independent_rate < 0:
            errs.append("state_independent_rate: must be >= 0")
        if self.state_independent_rate > 0:
            if self.base_measure is None:
                errs.append("state_independent_rate > 0 requires a base_measure")
            else:
                rho = np.asarray(self.base_measure, dtype=float)
                if rho.shape != (K,) or np.any(rho < 0) or abs(rho.sum() - 1.0) > 1e-9:
                    errs.append("base_measure: must be a probability vector over the types")
                else:
                    lhs = self.mutation_rate * M
                    rhs = self.state_independent_rate * rho[None, :]
                    bad = np.argwhere(lhs < rhs - 1e-12)
                    if bad.size:
                        i, j = bad[0]
                        errs.append(
                            "state-independent component not dominated: need "
                            f"m*M >= mbar*rho entrywise, violated at ({i},{j}): "
                            f"{lhs[i, j]:.6g} < {rhs[i, j]:.6g}"
                        )
        return errs

    @property
    def n_types(self) -> int:
        return len(self.fitness)

    def chi(self) -> np.ndarray:
        return np.asarray(self.fitness, dtype=float)

    def kernel(self) -> np.ndarray:
        return np.asarray(self.mutation_matrix, dtype=float)

    def rho(self) -> np.ndarray:
        if self.base_measure is None:
            raise GeometryError("type space has no base measure")
        return np.asarray(self.base_measure, dtype=float)

    def mutation_generator(self, state_dependent_only: bool = False) -> np.ndarray:
        """Rate matrix of one variable's mutation flow.

        With ``state_dependent_only`` the dominated part m-bar * (1 x rho)
        is subtracted out; that remainder drives the function-valued dual
        when star-site jumps carry the state-independent part.
        """
        m, M = self.mutation_rate, self.kernel()
        K = self.n_types
        if state_dependent_only and self.state_independent_rate > 0:
            # off-diagonal rates m*M - mbar*rho; R has row sums m - mbar
            R = m * M - self.state_independent_rate * self.rho()[None, :]
            return R - (m - self.state_independent_rate) * np.eye(K)
        return m * (M - np.eye(K))

    def channel_rates(self, state_dependent_only: bool = False) -> np.ndarray:
        """Per ordered pair (i, j), i != j: rate of the i-to-j mutation channel."""
        rates = self.mutation_rate * self.kernel()
        if state_dependent_only and self.state_independent_rate > 0:
            rates = rates - self.state_independent_rate * self.rho()[None, :]
        np.fill_diagonal(rates, 0.0)
        rates[np.abs(rates) < 1e-15] = 0.0
        if np.any(rates < 0):
            raise GeometryError("negative mutation channel rate; dominance condition violated")
        return rates


@dataclass(frozen=True)
class FitnessDecomposition:
    """Fitness rewritten as a staircase of nested level sets.

    levels e_0 < ... < e_{L-1} with e_0 = 0, e_{L-1} = 1; for each i >= 1
    the set mask A_i = {types with fitness >= e_i} and the birth-type
    probability e_i - e_{i-1}.  chi == sum_i (e_i - e_{i-1}) 1_{A_i}.
    """

    levels: tuple[float, ...]
    level_masks: tuple[int, ...]  # bitmasks, one per level index 1..L-1
    birth_probs: tuple[float, ...]
    n_types: int

    def reconstruct(self) -> np.ndarray:
        chi = np.zeros(self.n_types)
        for mask, p in zip(self.level_masks, self.birth_probs):
            for j in range(self.n_types):
                if mask >> j & 1:
                    chi[j] += p
        return chi

    def sample_level(self, rng: np.random.Generator) -> int:
        """Index into level_masks/birth_probs of one birth's selection set."""
        return int(rng.choice(len(self.birth_probs), p=np.asarray(self.birth_probs)))


def fitness_decomposition(ts: TypeSpace) -> FitnessDecomposition:
    chi = ts.chi()
    K = chi.size
    snapped = np.round(chi / FITNESS_SNAP_TOL) * FITNESS_SNAP_TOL
    levels = np.unique(snapped)
    if K == 1:
        return FitnessDecomposition(levels=(0.0,), level_masks=(), birth_probs=(), n_types=1)
    if abs(levels[0]) > FITNESS_SNAP_TOL or abs(levels[-1] - 1.0) > FITNESS_SNAP_TOL:
        raise GeometryError("fitness must reach 0 and 1 for the level decomposition")
    masks, probs = [], []
    for i in range(1, levels.size):
        mask = 0
        for j in range(K):
            if snapped[j] >= levels[i] - FITNESS_SNAP_TOL:
                mask |= 1 << j
        masks.append(mask)
        probs.append(float(levels[i] - levels[i - 1]))
    return FitnessDecomposition(
        levels=tuple(float(e) for e in levels),
        level_masks=tuple(masks),
        birth_probs=tuple(probs),
        n_types=K,
    )
