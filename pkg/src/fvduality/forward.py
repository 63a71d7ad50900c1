"""Forward-in-time interacting Fleming-Viot system.

The measure-valued diffusion is approximated by the Moran particle system
in ``_moran``; ``moran_pop_size`` is the accuracy knob and is reported with
every estimate.  The generator itself is also evaluated exactly on moment
test functions, which gives the martingale cross-check
(E[F(X_{t+dt})] - F(X_t)) / dt ~= (LF)(X_t) without any particle error.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _moran
from .geometry import Geography, HierarchicalAddress, TypeSpace

SIMPLEX_TOL = 1e-9

#: location marker for dual variables frozen at the absorbing star site
STAR = "*"


class ForwardError(ValueError):
    pass


@dataclass(frozen=True)
class ForwardParams:
    migration: float = 0.0
    selection: float = 0.0
    mutation: float = 0.0
    resampling: float = 0.0
    moran_pop_size: int = 1000

    def __post_init__(self):
        for name in ("migration", "selection", "mutation", "resampling"):
            if getattr(self, name) < 0:
                raise ForwardError(f"{name} rate must be >= 0")
        if self.moran_pop_size < 2:
            raise ForwardError("moran_pop_size must be >= 2")


class PopulationState:
    """Per-site type-frequency vectors over a finite geography.

    Sites not explicitly listed carry the ``background`` vector; a constant
    product initial law over the infinite group is expressed this way.
    """

    def __init__(self, geography: Geography, background, site_vectors=None):
        self.geography = geography
        self.background = np.asarray(background, dtype=float)
        self.site_vectors: dict[HierarchicalAddress, np.ndarray] = {
            a: np.asarray(v, dtype=float) for a, v in (site_vectors or {}).items()
        }
        self.validate()

    def validate(self) -> None:
        for v in [self.background, *self.site_vectors.values()]:
            if np.any(v < -SIMPLEX_TOL) or abs(v.sum() - 1.0) > SIMPLEX_TOL:
                raise ForwardError(f"site vector is not a probability vector: {v}")

    @property
    def n_types(self) -> int:
        return self.background.size

    def vector_at(self, site) -> np.ndarray:
        return self.site_vectors.get(site, self.background)

    def as_matrix(self) -> np.ndarray:
        out = np.tile(self.background, (len(self.geography), 1))
        for a, v in self.site_vectors.items():
            out[self.geography.index[a]] = v
        return out

    @classmethod
    def from_matrix(cls, geography: Geography, matrix) -> "PopulationState":
        matrix = np.asarray(matrix, dtype=float)
        return cls(
            geography,
            matrix[0],
            {a: matrix[i] for i, a in enumerate(geography.sites)},
        )


@dataclass(frozen=True)
class MomentTestFunction:
    """Mixed-moment test function: site list (repeats allowed) and a tensor
    of coefficients, one axis of length K per listed site."""

    sites: tuple[HierarchicalAddress, ...]
    tensor: np.ndarray = field(compare=False)

    def __post_init__(self):
        t = np.asarray(self.tensor, dtype=float)
        if t.ndim != len(self.sites) or len(self.sites) < 1:
            raise ForwardError("tensor order must equal the number of listed sites")
        if not np.all(np.isfinite(t)):
            raise ForwardError("tensor entries must be finite")
        object.__setattr__(self, "tensor", t)

    @property
    def order(self) -> int:
        return len(self.sites)

    def value(self, X: PopulationState) -> float:
        out = self.tensor
        for site in reversed(self.sites):
            out = out @ X.vector_at(site)
        return float(out)


def initial_counts(X: PopulationState, n: int) -> np.ndarray:
    """Deterministic per-site counts closest to n * x0 (largest remainder)."""
    mat = X.as_matrix()
    S, K = mat.shape
    counts = np.floor(mat * n).astype(np.int64)
    for st in range(S):
        rem = n - counts[st].sum()
        if rem > 0:
            frac = mat[st] * n - counts[st]
            for idx in np.argsort(-frac)[:rem]:
                counts[st, idx] += 1
    return counts


def moran_checkpoints(
    params: ForwardParams,
    type_space: TypeSpace,
    X0: PopulationState,
    times,
    states,
    gammas,
) -> np.ndarray:
    """Replica-batched Moran run; returns counts (R, T, S, K)."""
    geo = X0.geography
    counts0 = np.broadcast_to(
        initial_counts(X0, params.moran_pop_size), (states.size, len(geo), X0.n_types)
    )
    return _moran.moran_batch(
        counts0,
        params.resampling,
        params.mutation,
        params.selection,
        params.migration,
        type_space.chi(),
        type_space.kernel(),
        geo.forward_matrix,
        times,
        states,
        gammas,
    )


def simulate_forward(
    params: ForwardParams,
    type_space: TypeSpace,
    X0: PopulationState,
    horizon: float,
    rng: np.random.Generator,
) -> PopulationState:
    """One replica of the Moran system; empirical frequencies at the horizon."""
    if horizon < 0:
        raise ForwardError("horizon must be >= 0")
    if horizon == 0:
        return X0
    raw = rng.integers(0, 2**63, size=2, dtype=np.uint64)
    states = raw[:1]
    gammas = (raw[1:] | np.uint64(1)).copy()
    counts = moran_checkpoints(params, type_space, X0, np.array([horizon]), states, gammas)
    return PopulationState.from_matrix(X0.geography, counts[0, 0] / params.moran_pop_size)


def _partial_contraction(F: MomentTestFunction, X: PopulationState, skip: int) -> np.ndarray:
    """Contract every variable except ``skip`` with its site vector."""
    out = np.moveaxis(F.tensor, skip, 0)
    for site in [F.sites[ell] for ell in range(F.order) if ell != skip]:
        out = np.tensordot(out, X.vector_at(site), axes=([1], [0]))
    return out


def generator_apply(
    F: MomentTestFunction,
    X: PopulationState,
    params: ForwardParams,
    type_space: TypeSpace,
) -> float:
    """Exact (LF)(X): migration, selection, mutation, resampling terms."""
    geo = X.geography
    A = geo.forward_matrix
    M = type_space.kernel()
    chi = type_space.chi()
    for site in F.sites:
        if site not in geo.index:
            raise ForwardError(f"test-function site {site} outside the declared geography")

    total = 0.0
    partials = [_partial_contraction(F, X, ell) for ell in range(F.order)]
    for ell, site in enumerate(F.sites):
        v = partials[ell]  # value as a function of variable ell's marginal
        x = X.vector_at(site)
        base = float(v @ x)
        if params.migration > 0:
            row = A[geo.index[site]]
            moved = sum(row[j] * float(v @ X.vector_at(geo.sites[j])) for j in range(len(geo)))
            total += params.migration * (moved - base)
        if params.selection > 0:
            mean_chi = float(chi @ x)
            total += params.selection * (float(v @ (chi * x)) - mean_chi * base)
        if params.mutation > 0:
            total += params.mutation * (float(v @ (x @ M)) - base)

    if params.resampling > 0:
        f_val = F.value(X)
        for ell in range(F.order):
            for ellp in range(ell + 1, F.order):
                if F.sites[ell] != F.sites[ellp]:
                    continue
                merged = np.moveaxis(np.diagonal(F.tensor, axis1=ell, axis2=ellp), -1, ell)
                sites = tuple(F.sites[i] for i in range(F.order) if i != ellp)
                merged_val = MomentTestFunction(sites, merged).value(X)
                total += params.resampling * (merged_val - f_val)
    return total


def evaluate_duality_function(X: PopulationState, locations, F: np.ndarray, rho=None) -> float:
    """Integrate a bounded |locations|-variable function against the product
    of the site marginals; variables located at the star site integrate
    against the base measure rho instead."""
    F = np.asarray(F, dtype=float)
    if F.ndim != len(locations):
        raise ForwardError(
            f"function has {F.ndim} variables but {len(locations)} locations were given"
        )
    out = F
    for loc in reversed(list(locations)):
        if loc == STAR:
            if rho is None:
                raise ForwardError("star-site variable present but no base measure given")
            out = out @ np.asarray(rho, dtype=float)
        else:
            out = out @ X.vector_at(loc)
    return float(out)
