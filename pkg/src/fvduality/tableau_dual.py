"""Ordered tableau dual and the marked set-valued jump process built on it.

A tableau block is an array of subset masks: rows are summands, columns
are ranks, every column carries a site mark and the particles whose
partition element it represents.  Births insert the offspring column
directly right of the parent rank and each row directly below its parent
row; coalescence intersects the lower rank and removes the upper one
(look-down); migration changes a column's site mark.  In the coupled mode
the two birth rows are complementary, so distinct rows stay disjoint and
the whole tableau reads as a subset of a product of type spaces: the
state of the set-valued dual.

The full state is a list of blocks whose row structures are independent;
the dual value is the product of block values.  Mutation resolves columns
into full or empty sets, pruning rows and columns, until the state traps
at the full set (value 1) or the empty set (value 0).  Migration of a
rank onto a site already carrying columns of its own block is supported
only when the rows factor across that boundary; the genuinely entangled
case is out of scope and raises.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, replace

import numpy as np

from .dual_function import ReplicaAborted
from .geometry import FitnessDecomposition, TypeSpace, fitness_decomposition

DEFAULT_ROW_CAP = 4096


class TableauError(ValueError):
    pass


class UnsupportedMigration(RuntimeError):
    """Migration onto an entangled occupied site; deliberately not handled."""


@dataclass(frozen=True)
class Column:
    site: object
    particles: tuple[int, ...]
    cloud: int = 0
    cond_id: int = -1  # key into the live pre-resolution conditionings

    @property
    def rank_index(self) -> int:
        return min(self.particles)


@dataclass(frozen=True)
class Tableau:
    """One factored block: columns (ranks) and disjoint summand rows."""

    n_types: int
    columns: tuple[Column, ...]
    rows: tuple[tuple[int, ...], ...]

    def __post_init__(self):
        for row in self.rows:
            if len(row) != len(self.columns):
                raise TableauError("row width must equal the number of columns")

    @property
    def full_mask(self) -> int:
        return (1 << self.n_types) - 1

    @property
    def n_ranks(self) -> int:
        return len(self.columns)

    def value(self, X, site_of=None) -> float:
        total = 0.0
        for row in self.rows:
            term = 1.0
            for col, mask in zip(self.columns, row):
                vec = X.vector_at(col.site)
                term *= sum(vec[k] for k in range(self.n_types) if (mask >> k) & 1)
                if term == 0.0:
                    break
            total += term
        return total

    def column_sites(self) -> list:
        return [c.site for c in self.columns]


def ranked_view(tab: Tableau) -> tuple[dict[int, int], dict[int, object]]:
    """(particle -> rank, rank -> site), validating the rank structure:
    ranks are the contiguous column positions and particles of one rank
    share the column's site."""
    particle_rank: dict[int, int] = {}
    rank_site: dict[int, object] = {}
    for rank, col in enumerate(tab.columns):
        if not col.particles:
            raise TableauError(f"rank {rank} carries no particles")
        rank_site[rank] = col.site
        for p in col.particles:
            if p in particle_rank:
                raise TableauError(f"particle {p} assigned to two ranks")
            particle_rank[p] = rank
    return particle_rank, rank_site


def tableau_from_masks(n_types: int, masks, site, first_particle: int = 1, cloud: int = 0) -> Tableau:
    cols = tuple(
        Column(site=site, particles=(first_particle + i,), cloud=cloud)
        for i in range(len(masks))
    )
    return Tableau(n_types, cols, (tuple(int(m) for m in masks),))


def format_tableau(tab: Tableau, site_labels=None) -> str:
    """Rows of parenthesized bitstrings with site subscripts, paper style."""
    def label(site):
        if site_labels and site in site_labels:
            return str(site_labels[site])
        return str(site)

    lines = []
    for row in tab.rows:
        cells = []
        for col, mask in zip(tab.columns, row):
            bits = "".join("1" if (mask >> k) & 1 else "0" for k in range(tab.n_types))
            cells.append(f"({bits})_{label(col.site)}")
        lines.append(" ".join(cells))
    return "\n".join(lines)


def tableau_selection(
    tab: Tableau,
    rank: int,
    level_mask: int,
    new_particle: int,
    mode: str = "coupled",
) -> Tableau:
    """Birth at ``rank``: offspring column at rank+1, offspring rows below
    their parents.  Coupled mode keeps the complementary pair at one rank
    (rows stay disjoint); product mode is the uncoupled ordered variant.
    A row whose acted factor is the full set is unchanged apart from the
    inserted full column, the exact one-row form of its split."""
    if not 0 <= rank < tab.n_ranks:
        raise TableauError(f"rank {rank} not active")
    if mode not in ("coupled", "product"):
        raise TableauError(f"unknown selection mode {mode!r}")
    full = tab.full_mask
    comp = full & ~level_mask
    parent = tab.columns[rank]
    new_col = Column(site=parent.site, particles=(new_particle,), cloud=parent.cloud)
    columns = tab.columns[: rank + 1] + (new_col,) + tab.columns[rank + 1:]
    rows = []
    for row in tab.rows:
        b = row[rank]
        if mode == "coupled" and b == full:
            rows.append(row[: rank + 1] + (full,) + row[rank + 1:])
            continue
        modified = row[:rank] + (b & level_mask, full) + row[rank + 1:]
        if mode == "coupled":
            offspring = row[:rank] + (comp, b) + row[rank + 1:]
        else:
            offspring = row[: rank + 1] + (comp,) + row[rank + 1:]
        for cand in (modified, offspring):
            if all(m != 0 for m in cand):
                rows.append(cand)
    return replace(tab, columns=columns, rows=tuple(rows))


def tableau_coalesce(tab: Tableau, rank: int, rank_upper: int) -> Tableau:
    """Look-down: the upper rank's factors multiply into the lower rank,
    the upper column disappears, its particles join the lower element."""
    if not 0 <= rank < rank_upper < tab.n_ranks:
        raise TableauError("need rank < rank_upper, both active")
    a, b = tab.columns[rank], tab.columns[rank_upper]
    if a.site != b.site:
        raise TableauError("only co-located ranks coalesce")
    merged = Column(
        site=a.site, particles=tuple(sorted(a.particles + b.particles)), cloud=a.cloud
    )
    columns = (
        tab.columns[:rank] + (merged,) + tab.columns[rank + 1: rank_upper] + tab.columns[rank_upper + 1:]
    )
    rows = []
    for row in tab.rows:
        cand = (
            row[:rank] + (row[rank] & row[rank_upper],) + row[rank + 1: rank_upper] + row[rank_upper + 1:]
        )
        if all(m != 0 for m in cand):
            rows.append(cand)
    return replace(tab, columns=columns, rows=tuple(rows))


def tableau_mutation(tab: Tableau, rank: int, source: int, target: int) -> Tableau:
    """Channel (source -> target) applied to one rank in every row."""
    bit_s, bit_t = 1 << source, 1 << target
    rows = []
    for row in tab.rows:
        b = row[rank]
        b = b | bit_s if b & bit_t else b & ~bit_s
        cand = row[:rank] + (b,) + row[rank + 1:]
        if all(m != 0 for m in cand):
            rows.append(cand)
    return replace(tab, rows=tuple(rows))


def _rows_factor(rows, idx: tuple[int, ...]) -> bool:
    """Do the rows factor as (columns in idx) x (the rest)?"""
    rest = tuple(i for i in range(len(rows[0])) if i not in idx)
    left = {tuple(r[i] for i in idx) for r in rows}
    right = {tuple(r[i] for i in rest) for r in rows}
    if len(left) * len(right) != len(rows):
        return False
    combos = {tuple(r[i] for i in idx) + tuple(r[i] for i in rest) for r in rows}
    return combos == {a + b for a in left for b in right}


def split_block(tab: Tableau, idx: tuple[int, ...]) -> tuple[Tableau, Tableau]:
    """Split a factoring block across the given column set."""
    if not _rows_factor(tab.rows, idx):
        raise TableauError("rows do not factor across the requested columns")
    rest = tuple(i for i in range(tab.n_ranks) if i not in idx)
    left_rows = sorted({tuple(r[i] for i in idx) for r in tab.rows})
    right_rows = sorted({tuple(r[i] for i in rest) for r in tab.rows})
    left = Tableau(tab.n_types, tuple(tab.columns[i] for i in idx), tuple(left_rows))
    right = Tableau(tab.n_types, tuple(tab.columns[i] for i in rest), tuple(right_rows))
    return left, right


def tableau_migrate(tab: Tableau, rank: int, destination) -> Tableau:
    """Relocate one rank.  A destination already carrying other ranks of
    this block is allowed only when the rows factor across (those ranks +
    the migrant) versus the rest; otherwise the move is out of scope."""
    if not 0 <= rank < tab.n_ranks:
        raise TableauError(f"rank {rank} not active")
    col = tab.columns[rank]
    if destination == col.site:
        return tab
    incumbents = tuple(
        i for i, c in enumerate(tab.columns) if c.site == destination and i != rank
    )
    if incumbents and not _rows_factor(tab.rows, incumbents + (rank,)):
        raise UnsupportedMigration(
            f"rank {rank} migrating onto site {destination} entangled with ranks {incumbents}"
        )
    columns = tab.columns[:rank] + (replace(col, site=destination),) + tab.columns[rank + 1:]
    return replace(tab, columns=columns)


def merge_complementary_rows(tab: Tableau) -> Tableau:
    """Fuse row pairs equal everywhere but one column with disjoint masks
    there (their disjoint union is the row with the united mask)."""
    rows = [list(r) for r in tab.rows]
    changed = True
    while changed:
        changed = False
        for i in range(len(rows)):
            if changed:
                break
            for j in range(i + 1, len(rows)):
                diff = [k for k in range(len(rows[i])) if rows[i][k] != rows[j][k]]
                if len(diff) == 1:
                    k = diff[0]
                    if rows[i][k] & rows[j][k] == 0:
                        rows[i][k] |= rows[j][k]
                        del rows[j]
                        changed = True
                        break
    return replace(tab, rows=tuple(tuple(r) for r in rows))


def prune_inactive_columns(tab: Tableau) -> Tableau:
    """Drop columns whose factor is the full set in every row."""
    full = tab.full_mask
    keep = [k for k in range(tab.n_ranks) if any(row[k] != full for row in tab.rows)]
    if len(keep) == tab.n_ranks:
        return tab
    return replace(
        tab,
        columns=tuple(tab.columns[k] for k in keep),
        rows=tuple(tuple(row[k] for k in keep) for row in tab.rows),
    )


def validate_tableau(tab: Tableau, coupled: bool = True) -> None:
    """Structural invariants: no zero row, no all-full column, column
    entries equal-or-disjoint off the full set, rows pairwise disjoint."""
    full = tab.full_mask
    for row in tab.rows:
        if any(m == 0 for m in row):
            raise TableauError("zero row survived pruning")
    for k in range(tab.n_ranks):
        entries = [row[k] for row in tab.rows]
        if entries and all(m == full for m in entries):
            raise TableauError(f"column {k} is inactive but was not pruned")
        nonfull = [m for m in entries if m != full]
        for a, b in itertools.combinations(set(nonfull), 2):
            if a & b not in (0, a):
                raise TableauError(f"column {k} entries neither equal nor disjoint")
    if coupled:
        for r1, r2 in itertools.combinations(tab.rows, 2):
            if all(a & b for a, b in zip(r1, r2)):
                raise TableauError("two rows overlap; summands must be disjoint")


# ---------------------------------------------------------------------------
# mutation partition chain and its h-transform


@dataclass(frozen=True)
class PartitionChain:
    """Tuple of pairwise disjoint (possibly empty) subsets of the types."""

    n_types: int
    slots: tuple[int, ...]

    def __post_init__(self):
        seen = 0
        for mask in self.slots:
            if mask & seen:
                raise TableauError("partition slots must be disjoint")
            seen |= mask

    def nonempty(self) -> list[int]:
        return [i for i, m in enumerate(self.slots) if m]

    def is_trap(self) -> bool:
        return len(self.nonempty()) <= 1


def partition_transitions(p: PartitionChain, rates: np.ndarray):
    """(next state, rate) pairs: type j moves to the slot holding j' at
    rate sum of its channels into that slot's members."""
    out = []
    for k, mask in enumerate(p.slots):
        for j in range(p.n_types):
            if not (mask >> j) & 1:
                continue
            for ell, target in enumerate(p.slots):
                if ell == k or target == 0:
                    continue
                rate = sum(rates[j, jp] for jp in range(p.n_types) if (target >> jp) & 1)
                if rate <= 0:
                    continue
                slots = list(p.slots)
                slots[k] = mask & ~(1 << j)
                slots[ell] = target | (1 << j)
                out.append((replace(p, slots=tuple(slots)), rate))
    return out


def partition_chain_step(
    p: PartitionChain, rates: np.ndarray, rng: np.random.Generator
) -> tuple[PartitionChain, float | None]:
    trans = partition_transitions(p, rates)
    total = sum(r for _, r in trans)
    if total <= 0:
        return p, None
    wait = rng.exponential(1.0 / total)
    u = rng.uniform() * total
    acc = 0.0
    for state, r in trans:
        acc += r
        if u <= acc:
            return state, wait
    return trans[-1][0], wait


def enumerate_partition_chain(p0: PartitionChain, rates: np.ndarray):
    """Reachable states, their index, and the generator matrix."""
    states = [p0]
    index = {p0: 0}
    frontier = [p0]
    edges = {}
    while frontier:
        p = frontier.pop()
        trans = partition_transitions(p, rates)
        edges[p] = trans
        for q, _ in trans:
            if q not in index:
                index[q] = len(states)
                states.append(q)
                frontier.append(q)
    n = len(states)
    Q = np.zeros((n, n))
    for p, trans in edges.items():
        i = index[p]
        for q, r in trans:
            Q[i, index[q]] += r
            Q[i, i] -= r
    return states, index, Q


def absorption_probabilities(p0: PartitionChain, rates: np.ndarray) -> dict:
    """For each trap state reachable from p0: hitting probability from
    every reachable state, by solving the linear system exactly."""
    states, index, Q = enumerate_partition_chain(p0, rates)
    traps = [p for p in states if p.is_trap()]
    transient = [p for p in states if not p.is_trap()]
    t_idx = {p: i for i, p in enumerate(transient)}
    A = np.zeros((len(transient), len(transient)))
    out = {}
    for i, p in enumerate(transient):
        A[i, i] = Q[index[p], index[p]]
        for q, r in partition_transitions(p, rates):
            if q in t_idx:
                A[i, t_idx[q]] += r
    for trap in traps:
        b = np.zeros(len(transient))
        for i, p in enumerate(transient):
            for q, r in partition_transitions(p, rates):
                if q == trap:
                    b[i] -= r
        h = np.linalg.solve(A, b) if transient else np.array([])
        table = {trap: 1.0}
        for p, i in t_idx.items():
            table[p] = float(h[i])
        for other in traps:
            if other != trap:
                table.setdefault(other, 0.0)
        out[trap] = table
    return out


def h_transform(p0: PartitionChain, rates: np.ndarray, target: PartitionChain) -> dict:
    """Rate table of the chain conditioned to hit ``target``:
    q^h(a -> b) = h(b)/h(a) q(a -> b) on states with h > 0."""
    habs = absorption_probabilities(p0, rates)
    if target not in habs:
        raise TableauError("target trap not reachable")
    h = habs[target]
    if h.get(p0, 0.0) <= 0.0:
        raise TableauError("conditioning on a null event")
    table = {}
    states, _, _ = enumerate_partition_chain(p0, rates)
    for p in states:
        if p.is_trap() or h.get(p, 0.0) <= 0.0:
            continue
        entries = []
        for q, r in partition_transitions(p, rates):
            hq = h.get(q, 0.0)
            if hq > 0:
                entries.append((q, r * hq / h[p]))
        table[p] = entries
    return table


def sample_conditioned_absorption_time(
    table: dict, p0: PartitionChain, rng: np.random.Generator
) -> float:
    t = 0.0
    p = p0
    while not p.is_trap():
        entries = table[p]
        total = sum(r for _, r in entries)
        t += rng.exponential(1.0 / total)
        u = rng.uniform() * total
        acc = 0.0
        for q, r in entries:
            acc += r
            if u <= acc:
                p = q
                break
    return t


def column_partition_state(tab: Tableau, rank: int) -> tuple[PartitionChain, tuple[int, ...]]:
    """The distinct non-full entries of a column plus the complement of
    their union form a partition of the types; mutation channels move one
    type between its slots, which is exactly the partition chain."""
    entries = sorted({row[rank] for row in tab.rows if row[rank] != tab.full_mask})
    union = 0
    for e in entries:
        union |= e
    slots = tuple(entries) + (tab.full_mask & ~union,)
    return PartitionChain(tab.n_types, slots), tuple(entries)


@dataclass
class ColumnConditioning:
    """One rank's mutation chain conditioned on its sampled resolution."""

    state: PartitionChain
    rate_table: dict  # h-transformed rates over reachable partition states

    def transitions(self):
        return self.rate_table.get(self.state, [])

    def total_rate(self) -> float:
        return sum(r for _, r in self.transitions())


def conditioning_matches(p: PartitionChain, tab: Tableau, rank: int) -> bool:
    """Does the chain state still describe the column?  Visible slots are
    the distinct non-full entries; one invisible slot holds the rest."""
    entries = sorted({row[rank] for row in tab.rows if row[rank] != tab.full_mask})
    union = 0
    for e in entries:
        union |= e
    invisible = tab.full_mask & ~union
    expected = sorted(entries + ([invisible] if invisible else []))
    return expected == sorted(s for s in p.slots if s)


def condition_column(
    tab: Tableau, rank: int, rates: np.ndarray, rng: np.random.Generator
) -> ColumnConditioning | None:
    """Sample the column's eventual trap with its absorption probability and
    return the h-transformed chain; mixing over outcomes reproduces the
    unconditioned law, so dual expectations are unchanged."""
    p, _ = column_partition_state(tab, rank)
    if p.is_trap():
        return None
    habs = absorption_probabilities(p, rates)
    traps = sorted(habs, key=lambda q: q.slots)
    probs = np.array([habs[t][p] for t in traps])
    if probs.sum() <= 0:
        return None
    target = traps[int(rng.choice(len(traps), p=probs / probs.sum()))]
    return ColumnConditioning(state=p, rate_table=h_transform(p, rates, target))


def apply_partition_move(tab: Tableau, rank: int, old: PartitionChain, new: PartitionChain) -> Tableau:
    """Rewrite one column along a single partition-chain transition (one
    type moved between two slots)."""
    changed = [k for k in range(len(old.slots)) if old.slots[k] != new.slots[k]]
    if len(changed) != 2:
        raise TableauError("partition transition must touch exactly two slots")
    rows = []
    for row in tab.rows:
        b = row[rank]
        for k in changed:
            if b == old.slots[k]:
                b = new.slots[k]
                break
        cand = row[:rank] + (b,) + row[rank + 1:]
        if all(m != 0 for m in cand):
            rows.append(cand)
    return replace(tab, rows=tuple(rows))


def partition_chain_sampler(p0: PartitionChain, rates: np.ndarray):
    """Fast absorption sampler: transitions precomputed per reachable state.

    Returns a function rng -> (trap state, absorption time).
    """
    states, _, _ = enumerate_partition_chain(p0, rates)
    table = {}
    for p in states:
        trans = partition_transitions(p, rates)
        if trans:
            targets, rr = zip(*trans)
            cum = np.cumsum(rr)
            table[p] = (list(targets), cum, float(cum[-1]))

    def sample(rng: np.random.Generator):
        p, t = p0, 0.0
        while not p.is_trap():
            targets, cum, total = table[p]
            t += rng.exponential(1.0 / total)
            p = targets[int(np.searchsorted(cum, rng.uniform() * total))]
        return p, t

    return sample


# ---------------------------------------------------------------------------
# the marked set-valued dual with migration


@dataclass(frozen=True)
class SetDualParams:
    selection: float = 0.0
    coalescence: float = 0.0
    migration: float = 0.0
    kernel: object = None  # MigrationKernel, for finite geographies
    migration_mode: str = "finite"  # or "infinite": fresh site per move
    selection_mode: str = "coupled"  # or "product": uncoupled ordered rows
    preresolve: bool = False  # sample a migrant's resolution outcome up front
    row_cap: int = DEFAULT_ROW_CAP


@dataclass
class SetDualState:
    n_types: int
    blocks: list[Tableau]
    n_individuals: int
    next_particle: int
    next_fresh_site: int = 0
    time: float = 0.0
    trap_time: float | None = None
    trap_value: float | None = None
    first_collision_time: float | None = None

    @property
    def trapped(self) -> bool:
        return self.trap_time is not None

    def support(self) -> set:
        return {c.site for b in self.blocks for c in b.columns}

    def support_size(self) -> int:
        return len(self.support())

    def all_columns(self) -> list[tuple[int, int]]:
        return [(bi, ci) for bi, b in enumerate(self.blocks) for ci in range(b.n_ranks)]

    def value(self, X) -> float:
        if self.trapped:
            return float(self.trap_value)
        out = 1.0
        for b in self.blocks:
            out *= b.value(X)
        return out


def initial_set_dual(n_types: int, factors) -> SetDualState:
    """factors: iterable of (site, mask); each starts as its own block."""
    blocks = []
    particle = 1
    for cloud, (site, mask) in enumerate(factors):
        blocks.append(
            Tableau(
                n_types,
                (Column(site=site, particles=(particle,), cloud=cloud),),
                ((int(mask),),),
            )
        )
        particle += 1
    state = SetDualState(
        n_types=n_types, blocks=blocks, n_individuals=particle - 1, next_particle=particle
    )
    _normalize(state)
    return state


def _normalize(state: SetDualState) -> None:
    """Prune, merge, split, and detect traps; keeps blocks minimal."""
    new_blocks = []
    for tab in state.blocks:
        rows = tuple(r for r in tab.rows if all(m != 0 for m in r))
        if len(rows) != len(tab.rows):
            tab = replace(tab, rows=rows)
        if not tab.rows:
            state.trap_time = state.time
            state.trap_value = 0.0
            state.blocks = []
            return
        tab = merge_complementary_rows(tab)
        tab = prune_inactive_columns(tab)
        if tab.n_ranks == 0:
            continue
        if len(tab.rows) == 1:
            row = tab.rows[0]
            for k in range(tab.n_ranks):
                new_blocks.append(Tableau(tab.n_types, (tab.columns[k],), ((row[k],),)))
        else:
            new_blocks.append(tab)
    state.blocks = new_blocks
    if not new_blocks and not state.trapped:
        state.trap_time = state.time
        state.trap_value = 1.0


def _check_collision(state: SetDualState) -> None:
    if state.first_collision_time is not None:
        return
    by_site: dict = {}
    for b in state.blocks:
        for c in b.columns:
            by_site.setdefault(c.site, set()).add(c.cloud)
    if any(len(clouds) > 1 for clouds in by_site.values()):
        state.first_collision_time = state.time


def simulate_set_dual(
    state: SetDualState,
    params: SetDualParams,
    type_space: TypeSpace,
    horizon: float,
    rng: np.random.Generator,
    *,
    decomposition: FitnessDecomposition | None = None,
    validate: bool = False,
) -> SetDualState:
    """Run the marked set-valued dual to the horizon (or to a trap)."""
    dec = decomposition or fitness_decomposition(type_space)
    channel = type_space.channel_rates()
    channel_total = float(channel.sum())
    flat = channel.flatten()
    channel_probs = flat / channel_total if channel_total > 0 else None
    K = type_space.n_types
    conditionings: dict[int, ColumnConditioning] = {}
    next_cond_id = 0

    while not state.trapped:
        cols = state.all_columns()
        n_cols = len(cols)
        sites: dict = {}
        for bi, ci in cols:
            sites.setdefault(state.blocks[bi].columns[ci].site, []).append((bi, ci))
        pairs = [
            (a, b)
            for group in sites.values()
            for a, b in itertools.combinations(group, 2)
        ]
        if params.migration_mode == "infinite":
            migratable = [
                (bi, ci) for site, group in sites.items() for (bi, ci) in group if len(group) > 1
            ]
        else:
            migratable = cols
        # conditioned columns mutate at their h-transformed total rate
        mut_rates = np.full(n_cols, channel_total)
        if conditionings:
            live = set()
            for k, (bi, ci) in enumerate(cols):
                col = state.blocks[bi].columns[ci]
                cond = conditionings.get(col.cond_id)
                if cond is None:
                    continue
                if not conditioning_matches(cond.state, state.blocks[bi], ci):
                    del conditionings[col.cond_id]  # touched since; drop the tilt
                    continue
                mut_rates[k] = cond.total_rate()
                live.add(col.cond_id)
            for stale in set(conditionings) - live:
                del conditionings[stale]
        r_sel = params.selection * n_cols
        r_coal = params.coalescence * len(pairs)
        r_mig = params.migration * len(migratable)
        r_mut = float(mut_rates.sum())
        total = r_sel + r_coal + r_mig + r_mut
        if total <= 0:
            break
        wait = rng.exponential(1.0 / total)
        if state.time + wait >= horizon:
            state.time = horizon
            break
        state.time += wait
        u = rng.uniform() * total

        if u < r_sel:
            bi, ci = cols[int(rng.integers(n_cols))]
            conditionings.pop(state.blocks[bi].columns[ci].cond_id, None)
            level = dec.sample_level(rng)
            tab = tableau_selection(
                state.blocks[bi], ci, dec.level_masks[level], state.next_particle,
                params.selection_mode,
            )
            state.next_particle += 1
            state.n_individuals += 1
            if len(tab.rows) > params.row_cap:
                raise ReplicaAborted(f"row cap {params.row_cap} reached")
            state.blocks[bi] = tab
        elif u < r_sel + r_coal:
            (bi, ci), (bj, cj) = pairs[int(rng.integers(len(pairs)))]
            conditionings.pop(state.blocks[bi].columns[ci].cond_id, None)
            conditionings.pop(state.blocks[bj].columns[cj].cond_id, None)
            if bi == bj:
                lo, hi = min(ci, cj), max(ci, cj)
                state.blocks[bi] = tableau_coalesce(state.blocks[bi], lo, hi)
            else:
                lo_b, hi_b = (bi, bj) if bi < bj else (bj, bi)
                ta, tb = state.blocks[lo_b], state.blocks[hi_b]
                ri = ci if bi == lo_b else ta.n_ranks + ci
                rj = cj if bj == lo_b else ta.n_ranks + cj
                merged = _merge_blocks(ta, tb)
                if len(merged.rows) > params.row_cap:
                    raise ReplicaAborted(f"row cap {params.row_cap} reached")
                lo, hi = sorted((ri, rj))
                state.blocks[lo_b] = tableau_coalesce(merged, lo, hi)
                del state.blocks[hi_b]
        elif u < r_sel + r_coal + r_mig:
            bi, ci = migratable[int(rng.integers(len(migratable)))]
            tab = state.blocks[bi]
            if params.migration_mode == "infinite":
                dest = ("fresh", state.next_fresh_site)
                state.next_fresh_site += 1
            else:
                dest = params.kernel.sample_target_reversed(rng, tab.columns[ci].site)
            if dest == tab.columns[ci].site:
                continue
            incumbents = tuple(
                i for i, c in enumerate(tab.columns) if c.site == dest and i != ci
            )
            if incumbents:
                idx = incumbents + (ci,)
                if _rows_factor(tab.rows, idx):
                    left, right = split_block(tab, idx)
                    left = tableau_migrate(left, left.n_ranks - 1, dest)
                    state.blocks[bi] = left
                    state.blocks.append(right)
                else:
                    raise UnsupportedMigration(
                        f"rank at {tab.columns[ci].site} onto occupied entangled site {dest}"
                    )
            else:
                fresh = dest not in {c.site for b in state.blocks for c in b.columns}
                state.blocks[bi] = tableau_migrate(tab, ci, dest)
                if params.preresolve and fresh:
                    cond = condition_column(state.blocks[bi], ci, channel, rng)
                    if cond is not None:
                        col = state.blocks[bi].columns[ci]
                        cols_new = (
                            state.blocks[bi].columns[:ci]
                            + (replace(col, cond_id=next_cond_id),)
                            + state.blocks[bi].columns[ci + 1:]
                        )
                        state.blocks[bi] = replace(state.blocks[bi], columns=cols_new)
                        conditionings[next_cond_id] = cond
                        next_cond_id += 1
        else:
            target = rng.uniform() * r_mut
            k = int(np.searchsorted(np.cumsum(mut_rates), target))
            k = min(k, n_cols - 1)
            bi, ci = cols[k]
            col = state.blocks[bi].columns[ci]
            cond = conditionings.get(col.cond_id)
            if cond is not None:
                trans = cond.transitions()
                weights = np.array([r for _, r in trans])
                pick = int(rng.choice(len(trans), p=weights / weights.sum()))
                new_state = trans[pick][0]
                state.blocks[bi] = apply_partition_move(
                    state.blocks[bi], ci, cond.state, new_state
                )
                if new_state.is_trap():
                    del conditionings[col.cond_id]
                else:
                    cond.state = new_state
            else:
                pick = int(rng.choice(flat.size, p=channel_probs))
                i, j = divmod(pick, K)
                state.blocks[bi] = tableau_mutation(state.blocks[bi], ci, i, j)

        _normalize(state)
        _check_collision(state)
        if validate:
            for tab in state.blocks:
                validate_tableau(tab, coupled=params.selection_mode == "coupled")
    if not state.trapped:
        state.time = min(state.time, horizon)
    return state


def _merge_blocks(a: Tableau, b: Tableau) -> Tableau:
    """Cartesian product of two blocks before a cross-block coalescence."""
    rows = tuple(ra + rb for ra in a.rows for rb in b.rows)
    return Tableau(a.n_types, a.columns + b.columns, rows)


def evaluate_set_dual(state: SetDualState, X) -> float:
    return state.value(X)
