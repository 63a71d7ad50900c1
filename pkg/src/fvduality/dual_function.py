"""Function-valued dual components and their runners.

A dual function of m variables is a dense tensor over types^m, one axis
per partition element of the driving particle system.  Coalescence folds
one axis into another, a birth appends an axis through one of three
selection transitions (signed, nonnegative-product, or the contracting
variant), and between particle events every axis follows the one-variable
mutation semigroup (uniformized) or, in the random-jump representation,
discrete kernel applications at the same expected action.

Runners replay a particle event log.  The signed form carries the
exponential weight exp(s * integral of the active element count) and is
only valid up to log(2)/s; the nonnegative forms hold for all horizons.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import dual_particle as dp
from .forward import STAR, evaluate_duality_function
from .geometry import TypeSpace

UNIFORMIZATION_TOL = 1e-12
DEFAULT_TENSOR_CAP = 2**22  # entries; arity cap is log_K of this
NORM_SLACK = 1e-9


class DualFunctionError(ValueError):
    pass


class ReplicaAborted(RuntimeError):
    """Tensor grew past the configured cap; the replica is discarded and counted."""


class NormViolation(AssertionError):
    """A run broke a proven norm bound; always a hard failure."""


class WindowError(ValueError):
    """Horizon outside the validity window of the signed weighted dual."""


@dataclass(frozen=True)
class DualFunction:
    tensor: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "tensor", np.asarray(self.tensor, dtype=float))

    @property
    def arity(self) -> int:
        return self.tensor.ndim

    @property
    def sup_norm(self) -> float:
        return float(np.abs(self.tensor).max())

    def is_nonnegative(self) -> bool:
        return bool(np.all(self.tensor >= 0))


def apply_coalescence(g: DualFunction, i: int, j: int) -> DualFunction:
    """Fold variable j into variable i (0-based, i < j); arity drops by one."""
    if not 0 <= i < j < g.arity:
        raise DualFunctionError(f"need 0 <= i < j < arity, got ({i}, {j}) at arity {g.arity}")
    merged = np.moveaxis(np.diagonal(g.tensor, axis1=i, axis2=j), -1, i)
    return DualFunction(merged.copy())


def apply_selection_signed(g: DualFunction, i: int, chi: np.ndarray) -> DualFunction:
    """chi(u_i) g - chi(u_new) g, the signed transition behind the weighted dual."""
    chi = np.asarray(chi, dtype=float)
    gi = _mul_axis(g.tensor, chi, i)
    new = gi[..., None] * np.ones_like(chi) - g.tensor[..., None] * chi
    return DualFunction(new)


def apply_selection_plus(g: DualFunction, i: int, chi: np.ndarray) -> DualFunction:
    """(chi(u_i) + 1 - chi(u_new)) g; doubles the norm at worst, keeps positivity."""
    chi = _check_chi(chi)
    gi = _mul_axis(g.tensor, chi, i)
    new = gi[..., None] + g.tensor[..., None] * (1.0 - chi)
    return DualFunction(new)


def apply_selection_gplus(g: DualFunction, i: int, chi: np.ndarray) -> DualFunction:
    """chi(u_i) 1(u_new) g + (1 - chi(u_i)) g[u_i := u_new]; sup-norm contracting."""
    chi = _check_chi(chi)
    K = chi.size
    term1 = _mul_axis(g.tensor, chi, i)[..., None] * np.ones(K)
    moved = np.moveaxis(g.tensor, i, -1)  # old variable i becomes the new variable
    moved = np.expand_dims(moved, i) * np.ones((K,)).reshape(
        (1,) * i + (K,) + (1,) * (g.arity - i)
    )
    term2 = _mul_axis(moved, 1.0 - chi, i)
    return DualFunction(term1 + term2)


def _check_chi(chi) -> np.ndarray:
    chi = np.asarray(chi, dtype=float)
    if np.any(chi < 0) or np.any(chi > 1):
        raise DualFunctionError("fitness must lie in [0, 1] for the nonnegative duals")
    return chi


def _mul_axis(tensor: np.ndarray, vec: np.ndarray, axis: int) -> np.ndarray:
    shape = [1] * tensor.ndim
    shape[axis] = vec.size
    return tensor * vec.reshape(shape)


def uniformized_transition(Q: np.ndarray, t: float, tol: float = UNIFORMIZATION_TOL) -> np.ndarray:
    """exp(tQ) for a conservative rate matrix, by uniformization to ``tol``."""
    Q = np.asarray(Q, dtype=float)
    K = Q.shape[0]
    if t < 0:
        raise DualFunctionError("duration must be >= 0")
    lam = float(max(-Q.diagonal().min(), 0.0))
    if t == 0.0 or lam == 0.0:
        return np.eye(K)
    P = np.eye(K) + Q / lam
    mu = lam * t
    weight = math.exp(-mu)
    out = weight * np.eye(K)
    Pk = np.eye(K)
    acc = weight
    k = 0
    while acc < 1.0 - tol:
        k += 1
        weight *= mu / k
        Pk = Pk @ P
        out += weight * Pk
        acc += weight
    return out


def apply_matrix_to_variable(g: DualFunction, T: np.ndarray, i: int) -> DualFunction:
    """Replace g by its kernel average in variable i: sum_v T[u_i, v] g[.. v ..]."""
    moved = np.tensordot(g.tensor, T, axes=([i], [1]))
    return DualFunction(np.moveaxis(moved, -1, i))


def mutation_flow(g: DualFunction, type_space: TypeSpace, duration: float,
                  variables=None, state_dependent_only: bool = False) -> DualFunction:
    """Deterministic mutation semigroup acting on each listed variable."""
    if duration < 0:
        raise DualFunctionError("duration must be >= 0")
    if duration == 0 or g.arity == 0:
        return g
    T = uniformized_transition(type_space.mutation_generator(state_dependent_only), duration)
    for i in variables if variables is not None else range(g.arity):
        g = apply_matrix_to_variable(g, T, i)
    return g


def mutation_jump_random(g: DualFunction, kernel: np.ndarray, variable: int) -> DualFunction:
    """One random-representation jump: kernel-average variable ``variable``."""
    return apply_matrix_to_variable(g, np.asarray(kernel, dtype=float), variable)


@dataclass
class FeynmanKacAccumulator:
    integral: float = 0.0

    def add(self, active_count: int, dt: float) -> None:
        if dt < 0:
            raise DualFunctionError("negative time increment")
        self.integral += active_count * dt

    def weight(self, selection_rate: float) -> float:
        return math.exp(selection_rate * self.integral)


def fk_window(selection_rate: float) -> float:
    """Largest horizon with a finite expected sup-norm for the signed dual."""
    return math.inf if selection_rate <= 0 else math.log(2.0) / selection_rate


@dataclass
class FunctionDualResult:
    state: dp.DualParticleState
    function: DualFunction
    fk_weight: float
    locations: list
    norm_peak_ratio: float


def _arity_cap(n_types: int, tensor_cap: int) -> int:
    cap = 1
    while n_types ** (cap + 1) <= tensor_cap:
        cap += 1
    return cap


def run_function_dual(
    eta0: dp.DualParticleState,
    f0: DualFunction,
    type_space: TypeSpace,
    rates: dp.DualRates,
    horizon: float,
    rng: np.random.Generator,
    *,
    form: str = "plus",
    mutation: str = "flow",
    star: bool = False,
    force_window: bool = False,
    tensor_cap: int = DEFAULT_TENSOR_CAP,
) -> FunctionDualResult:
    """Drive a function-valued dual along one particle trajectory.

    form: "fk" (signed + exponential weight), "plus", or "gplus".
    mutation: "flow" (semigroup between events) or "jump" (random kernel
    applications at the matching rate, same expectation).
    star: freeze star-site variables and run the function dynamics with the
    state-independent part removed; requires the type space to declare it.
    """
    if form not in ("fk", "plus", "gplus"):
        raise DualFunctionError(f"unknown dual form {form!r}")
    if mutation not in ("flow", "jump"):
        raise DualFunctionError(f"unknown mutation mode {mutation!r}")
    if f0.arity != eta0.size:
        raise DualFunctionError(
            f"function has {f0.arity} variables, particle system has {eta0.size} elements"
        )
    if form == "fk" and horizon >= fk_window(rates.birth) and not force_window:
        raise WindowError(
            f"horizon {horizon} outside the signed-dual window log(2)/s = {fk_window(rates.birth):.4g}"
        )
    if star and type_space.state_independent_rate <= 0:
        raise DualFunctionError("star mode requires a positive state-independent rate")
    if star and rates.star != type_space.state_independent_rate:
        raise DualFunctionError("particle star rate must equal the state-independent rate")

    arity_cap = _arity_cap(type_space.n_types, tensor_cap)
    chi = type_space.chi()
    jump_kernel = None
    jump_rate = 0.0
    if mutation == "jump":
        m = type_space.mutation_rate
        mbar = type_space.state_independent_rate if star else 0.0
        jump_rate = m - mbar
        if jump_rate > 0:
            jump_kernel = type_space.channel_rates(state_dependent_only=star) / jump_rate
            np.fill_diagonal(jump_kernel, 0.0)
            np.fill_diagonal(jump_kernel, 1.0 - jump_kernel.sum(axis=1))
            if np.any(jump_kernel < -1e-12):
                raise DualFunctionError("jump kernel has negative entries")
            jump_kernel = np.clip(jump_kernel, 0.0, None)

    state = eta0
    g = f0
    initial_norm = f0.sup_norm
    fk = FeynmanKacAccumulator()
    norm_peak_ratio = 1.0 if initial_norm > 0 else 0.0
    t = 0.0

    def flow_gap(g: DualFunction, dt: float, locations) -> DualFunction:
        if dt <= 0 or type_space.mutation_rate == 0:
            return g
        live = [i for i, loc in enumerate(locations) if loc != STAR]
        if not live:
            return g
        if mutation == "flow":
            return mutation_flow(g, type_space, dt, variables=live, state_dependent_only=star)
        # random-jump representation: competing Exp clocks inside the gap
        remaining = dt
        while jump_rate > 0:
            wait = rng.exponential(1.0 / (jump_rate * len(live)))
            if wait >= remaining:
                break
            remaining -= wait
            g = mutation_jump_random(g, jump_kernel, live[int(rng.integers(len(live)))])
        return g

    while True:
        total = dp.total_event_rate(state, rates)
        wait = rng.exponential(1.0 / total) if total > 0 else math.inf
        gap = min(wait, horizon - t)
        locations = state.locations()
        g = flow_gap(g, gap, locations)
        fk.add(len(state.active_labels()), gap)
        if t + wait >= horizon:
            break
        t += wait
        state, ev = dp.sample_event(state, rates, rng, t)
        if ev.kind == "coalescence":
            g = apply_coalescence(g, ev.labels[0], ev.labels[1])
        elif ev.kind == "birth":
            if g.arity + 1 > arity_cap:
                raise ReplicaAborted(f"arity cap {arity_cap} reached")
            before = g.sup_norm
            if form == "fk":
                g = apply_selection_signed(g, ev.labels[0], chi)
            elif form == "plus":
                g = apply_selection_plus(g, ev.labels[0], chi)
            else:
                g = apply_selection_gplus(g, ev.labels[0], chi)
                if g.sup_norm > before + NORM_SLACK:
                    raise NormViolation(
                        f"contracting selection increased the sup-norm: {before} -> {g.sup_norm}"
                    )
        # migration and star events only change locations, which eta tracks
        if initial_norm > 0:
            ratio = g.sup_norm / (2.0**state.n_individuals * initial_norm)
            norm_peak_ratio = max(norm_peak_ratio, ratio)
            if ratio > 1.0 + NORM_SLACK:
                raise NormViolation(
                    f"sup-norm bound exceeded: |F| = {g.sup_norm}, "
                    f"2^N |F0| = {2.0**state.n_individuals * initial_norm}"
                )
        if form in ("plus", "gplus") and f0.is_nonnegative() and not g.is_nonnegative():
            raise NormViolation("nonnegative dual produced a negative value")

    return FunctionDualResult(
        state=state,
        function=g,
        fk_weight=fk.weight(rates.birth) if form == "fk" else 1.0,
        locations=state.locations(),
        norm_peak_ratio=norm_peak_ratio,
    )


def dual_value(result: FunctionDualResult, X0, rho=None) -> float:
    """Weighted integral of the final dual function against the initial law."""
    val = evaluate_duality_function(X0, result.locations, result.function.tensor, rho=rho)
    return result.fk_weight * val
