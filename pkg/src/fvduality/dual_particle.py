"""Coalescing-branching particle system that drives every dual process.

State: ordered partition of the individuals 1..N into located elements.
An element is indexed by its smallest individual; the list is kept in
increasing index order, so list position is the element's label.  Events:

  coalescence  rate d per unordered pair of co-located elements; the pair
               merges into the smaller index, survivors keep their order
  migration    rate c per element, one step of the reversed kernel
  birth        rate s per element: individual N+1 forms a new singleton
               element, labelled last, at the parent's location
  star jump    rate m-bar per element (only when a dominated
               state-independent mutation part is declared); the element
               freezes at the star site, where every rate is zero

The event log (labels, persistent uids, times) is the contract with the
function-valued duals: they replay it and never re-randomize eta.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np

from .forward import STAR
from .geometry import MigrationKernel

__all__ = [
    "DualEvent",
    "DualParticleError",
    "DualParticleState",
    "DualRates",
    "Element",
    "event_record",
    "initial_state",
    "sample_event",
    "simulate",
    "step",
    "total_event_rate",
]


class DualParticleError(ValueError):
    pass


@dataclass(frozen=True)
class Element:
    uid: int
    members: tuple[int, ...]
    location: object  # HierarchicalAddress or STAR

    @property
    def index(self) -> int:
        return self.members[0]


@dataclass(frozen=True)
class DualEvent:
    time: float
    kind: str  # coalescence | migration | birth | star
    labels: tuple[int, ...]
    uids: tuple[int, ...]
    destination: object = None
    new_uid: int | None = None


@dataclass(frozen=True)
class DualRates:
    coalescence: float = 0.0
    migration: float = 0.0
    birth: float = 0.0
    star: float = 0.0
    kernel: MigrationKernel | None = None

    def __post_init__(self):
        for name in ("coalescence", "migration", "birth", "star"):
            if getattr(self, name) < 0:
                raise DualParticleError(f"{name} rate must be >= 0")
        if self.migration > 0 and self.kernel is None:
            raise DualParticleError("migration rate > 0 requires a kernel")


@dataclass(frozen=True)
class DualParticleState:
    elements: tuple[Element, ...]
    n_individuals: int
    next_uid: int

    def __post_init__(self):
        idx = [e.index for e in self.elements]
        if idx != sorted(idx):
            raise DualParticleError("elements must be listed in increasing index order")
        members = sorted(m for e in self.elements for m in e.members)
        if members != list(range(1, self.n_individuals + 1)):
            raise DualParticleError("partition must cover 1..N without overlap")

    @property
    def size(self) -> int:
        return len(self.elements)

    def locations(self) -> list:
        return [e.location for e in self.elements]

    def active_labels(self) -> list[int]:
        return [i for i, e in enumerate(self.elements) if e.location != STAR]

    def co_located_pairs(self) -> list[tuple[int, int]]:
        pairs = []
        for i in range(len(self.elements)):
            if self.elements[i].location == STAR:
                continue
            for j in range(i + 1, len(self.elements)):
                if self.elements[j].location == self.elements[i].location:
                    pairs.append((i, j))
        return pairs


def initial_state(n: int, locations) -> DualParticleState:
    if n < 1:
        raise DualParticleError("need at least one individual")
    locations = list(locations)
    if len(locations) != n:
        raise DualParticleError(f"{n} individuals but {len(locations)} locations")
    return DualParticleState(
        elements=tuple(Element(uid=i, members=(i + 1,), location=locations[i]) for i in range(n)),
        n_individuals=n,
        next_uid=n,
    )


def total_event_rate(state: DualParticleState, rates: DualRates) -> float:
    active = len(state.active_labels())
    pairs = len(state.co_located_pairs())
    return (
        rates.coalescence * pairs
        + (rates.migration + rates.birth + rates.star) * active
    )


def sample_event(
    state: DualParticleState, rates: DualRates, rng: np.random.Generator, time: float
) -> tuple[DualParticleState, DualEvent]:
    """One transition, conditioned on some clock having fired at ``time``."""
    pairs = state.co_located_pairs()
    active = state.active_labels()
    w = np.array(
        [
            rates.coalescence * len(pairs),
            rates.migration * len(active),
            rates.birth * len(active),
            rates.star * len(active),
        ]
    )
    total = w.sum()
    if total <= 0:
        raise DualParticleError("sample_event called with zero total rate")
    kind = int(rng.choice(4, p=w / total))

    elements = list(state.elements)
    if kind == 0:
        i, j = pairs[int(rng.integers(len(pairs)))]
        a, b = elements[i], elements[j]
        merged = Element(uid=a.uid, members=tuple(sorted(a.members + b.members)), location=a.location)
        elements[i] = merged
        del elements[j]
        new_state = replace(state, elements=tuple(elements))
        ev = DualEvent(time, "coalescence", labels=(i, j), uids=(a.uid, b.uid))
    elif kind == 1:
        i = active[int(rng.integers(len(active)))]
        e = elements[i]
        dest = rates.kernel.sample_target_reversed(rng, e.location)
        elements[i] = replace(e, location=dest)
        new_state = replace(state, elements=tuple(elements))
        ev = DualEvent(time, "migration", labels=(i,), uids=(e.uid,), destination=dest)
    elif kind == 2:
        i = active[int(rng.integers(len(active)))]
        parent = elements[i]
        child = Element(
            uid=state.next_uid, members=(state.n_individuals + 1,), location=parent.location
        )
        elements.append(child)
        new_state = DualParticleState(
            elements=tuple(elements),
            n_individuals=state.n_individuals + 1,
            next_uid=state.next_uid + 1,
        )
        ev = DualEvent(time, "birth", labels=(i,), uids=(parent.uid,), new_uid=child.uid)
    else:
        i = active[int(rng.integers(len(active)))]
        e = elements[i]
        elements[i] = replace(e, location=STAR)
        new_state = replace(state, elements=tuple(elements))
        ev = DualEvent(time, "star", labels=(i,), uids=(e.uid,), destination=STAR)
    return new_state, ev


def step(
    state: DualParticleState,
    rates: DualRates,
    rng: np.random.Generator,
    now: float = 0.0,
) -> tuple[DualParticleState, DualEvent | None]:
    """Next event after ``now``; (state, None) once every clock is silent."""
    total = total_event_rate(state, rates)
    if total <= 0:
        return state, None
    wait = rng.exponential(1.0 / total)
    return sample_event(state, rates, rng, now + wait)


def simulate(
    state: DualParticleState,
    rates: DualRates,
    horizon: float,
    rng: np.random.Generator,
) -> tuple[DualParticleState, list[DualEvent]]:
    if horizon < 0:
        raise DualParticleError("horizon must be >= 0")
    t = 0.0
    log: list[DualEvent] = []
    while True:
        total = total_event_rate(state, rates)
        if total <= 0:
            return state, log
        t = t + rng.exponential(1.0 / total)
        if t >= horizon:
            return state, log
        state, ev = sample_event(state, rates, rng, t)
        log.append(ev)


def event_record(ev: DualEvent) -> str:
    """One line-delimited record per event, for replay and debugging."""
    payload = {
        "time": ev.time,
        "kind": ev.kind,
        "labels": list(ev.labels),
        "uids": list(ev.uids),
    }
    if ev.destination is not None:
        payload["destination"] = (
            STAR if ev.destination == STAR else list(ev.destination.digits)
        )
    if ev.new_uid is not None:
        payload["new_uid"] = ev.new_uid
    return json.dumps(payload, separators=(",", ":"))
