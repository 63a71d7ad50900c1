"""Independent small-instance reference values.

Everything here is computed from the generator's closed moment equations
or plain matrix exponentials (scipy), never through the dual processes or
the uniformization code they use, so estimates and oracles stay on
separate routes.
"""

from __future__ import annotations

import itertools

import numpy as np
import scipy.linalg

from .forward import ForwardParams, MomentTestFunction, PopulationState
from .geometry import Geography, TypeSpace


def kingman_pair_moment(t: float, d: float, x0: float) -> float:
    """Neutral one-site second moment: E[x_t^2] for a two-type system."""
    return float(np.exp(-d * t) * x0**2 + (1 - np.exp(-d * t)) * x0)


def ctmc_transition_matrix(Q: np.ndarray, t: float) -> np.ndarray:
    return scipy.linalg.expm(np.asarray(Q, dtype=float) * t)


def mutation_flow_reference(ts: TypeSpace, t: float, state_dependent_only: bool = False) -> np.ndarray:
    return ctmc_transition_matrix(ts.mutation_generator(state_dependent_only), t)


class MomentODE:
    """Closed linear ODE for mixed moments when selection is off.

    With s = 0, migration and mutation act order by order and resampling
    couples order k to order k-1 (two variables at one site merge), so the
    moments up to the test function's order form a finite linear system.
    Basis element of order k: (site index, type index) per variable.
    """

    def __init__(self, type_space: TypeSpace, geography: Geography, params: ForwardParams, order: int):
        if params.selection != 0:
            raise ValueError("moment ODE is closed only without selection")
        self.ts = type_space
        self.geo = geography
        self.params = params
        self.order = order
        self.K = type_space.n_types
        self.S = len(geography)
        self._offsets = {}
        dim = 0
        for k in range(order, 0, -1):
            self._offsets[k] = dim
            dim += (self.S * self.K) ** k
        self.dim = dim
        self.generator = self._build()

    def _index(self, k: int, slots) -> int:
        idx = 0
        for site, typ in slots:
            idx = idx * (self.S * self.K) + site * self.K + typ
        return self._offsets[k] + idx

    def _build(self) -> np.ndarray:
        L = np.zeros((self.dim, self.dim))
        M = self.ts.kernel()
        A = self.geo.forward_matrix
        c, m, d = self.params.migration, self.params.mutation, self.params.resampling
        for k in range(self.order, 0, -1):
            for slots in itertools.product(itertools.product(range(self.S), range(self.K)), repeat=k):
                row = self._index(k, slots)
                for ell in range(k):
                    site, typ = slots[ell]
                    if m > 0:
                        # moment of type j at slot ell gains mass from types u via M(u, j)
                        for u in range(self.K):
                            other = list(slots)
                            other[ell] = (site, u)
                            L[row, self._index(k, tuple(other))] += m * M[u, typ]
                        L[row, row] -= m
                    if c > 0:
                        for sp in range(self.S):
                            other = list(slots)
                            other[ell] = (sp, typ)
                            L[row, self._index(k, tuple(other))] += c * A[site, sp]
                        L[row, row] -= c
                if d > 0 and k >= 2:
                    for ell in range(k):
                        for ellp in range(ell + 1, k):
                            if slots[ell][0] != slots[ellp][0]:
                                continue
                            L[row, row] -= d
                            if slots[ell][1] == slots[ellp][1]:
                                reduced = tuple(s for i, s in enumerate(slots) if i != ellp)
                                L[row, self._index(k - 1, reduced)] += d
        return L

    def initial_vector(self, X0: PopulationState) -> np.ndarray:
        mat = X0.as_matrix()
        v = np.zeros(self.dim)
        for k in range(self.order, 0, -1):
            for slots in itertools.product(itertools.product(range(self.S), range(self.K)), repeat=k):
                v[self._index(k, slots)] = np.prod([mat[s, u] for s, u in slots])
        return v

    def moment_at(self, F: MomentTestFunction, X0: PopulationState, t: float) -> float:
        """E_{X0}[<F, X_t-products>] by matrix exponential of the moment system."""
        sol = scipy.linalg.expm(self.generator * t) @ self.initial_vector(X0)
        k = F.order
        sites = [self.geo.index[a] for a in F.sites]
        total = 0.0
        for types in itertools.product(range(self.K), repeat=k):
            coef = F.tensor[types]
            if coef == 0.0:
                continue
            total += coef * sol[self._index(k, tuple(zip(sites, types)))]
        return float(total)


def forward_moment_oracle(
    type_space: TypeSpace,
    geography: Geography,
    params: ForwardParams,
    F: MomentTestFunction,
    X0: PopulationState,
    t: float,
) -> float:
    ode = MomentODE(type_space, geography, params, F.order)
    return ode.moment_at(F, X0, t)
