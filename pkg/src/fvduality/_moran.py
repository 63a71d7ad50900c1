"""Event-driven Moran engine, batched over replicas with numba.

One replica holds ``n`` individuals per site.  Exponential clocks compete:

  resampling   rate d per unordered pair of distinct individuals at a site
               (one of the two, fair coin, adopts the other's type)
  mutation     rate m per individual, new type drawn from the kernel row
  selection    rate s * chi(type) per individual: it reproduces and the
               copy replaces a uniformly chosen individual at the site
  migration    rate c per individual: it is replaced by the type of a
               random individual at a kernel-distributed source site

Aggregated over types this is a small CTMC on count vectors, so the cost
per event is O(K + S).  Randomness is a splitmix64 stream per replica
(state plus odd increment), which makes results independent of thread
scheduling and bit-reproducible for a given seed table.
"""

from __future__ import annotations

import numpy as np
from numba import config as _numba_config
from numba import njit, prange

if _numba_config.THREADING_LAYER == "default":
    _numba_config.THREADING_LAYER = "omp"  # the bundled tbb is too old

U64 = np.uint64
_INV_2_53 = 1.0 / 9007199254740992.0


@njit(inline="always")
def _next_z(state, gamma):
    state = state + gamma
    z = state
    z = (z ^ (z >> U64(30))) * U64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> U64(27))) * U64(0x94D049BB133111EB)
    z = z ^ (z >> U64(31))
    return state, z


@njit(inline="always")
def _unif(state, gamma):
    state, z = _next_z(state, gamma)
    return state, (z >> U64(11)) * _INV_2_53


@njit(cache=True)
def _one_replica(counts, d, m, s, c, chi, M_cum, A_cum, ts, state, gamma, out):
    """Run one replica through all checkpoint times in ``ts`` (ascending)."""
    S, K = counts.shape
    n = 0
    for k in range(K):
        n += counts[0, k]
    nn = n * n

    sumsq = np.zeros(S, dtype=np.int64)
    selw = np.zeros(S)
    site_rate = np.zeros(S)
    mut_site = m * n
    mig_site = c * n
    half_d = 0.5 * d
    for st in range(S):
        acc = 0
        w = 0.0
        for k in range(K):
            acc += counts[st, k] * counts[st, k]
            w += chi[k] * counts[st, k]
        sumsq[st] = acc
        selw[st] = w
        site_rate[st] = half_d * (nn - acc) + s * w + mut_site + mig_site

    t = 0.0
    ckpt = 0
    n_ckpt = ts.shape[0]
    while True:
        total = 0.0
        for st in range(S):
            total += site_rate[st]
        if total <= 0.0:
            for j in range(ckpt, n_ckpt):
                out[j] = counts
            return state
        state, z = _next_z(state, gamma)
        u = (z >> U64(11)) * _INV_2_53
        t_next = t - np.log(u) / total
        if t_next >= ts[ckpt]:
            while ckpt < n_ckpt and t_next >= ts[ckpt]:
                out[ckpt] = counts
                ckpt += 1
            if ckpt >= n_ckpt:
                return state
        t = t_next

        if S == 1:
            st = 0
            state, z = _next_z(state, gamma)
            local = ((z >> U64(11)) * _INV_2_53) * total
        else:
            state, z = _next_z(state, gamma)
            target = ((z >> U64(11)) * _INV_2_53) * total
            st = S - 1
            acc2f = 0.0
            for sidx in range(S):
                acc2f += site_rate[sidx]
                if target <= acc2f:
                    st = sidx
                    break
            local = target - (acc2f - site_rate[st])

        res_rate = half_d * (nn - sumsq[st])
        if local < res_rate:
            if K == 2:
                # the two ordered pairs have equal weight: spare bit decides
                if z & U64(1):
                    ptype, vtype = 0, 1
                else:
                    ptype, vtype = 1, 0
            else:
                state, z = _next_z(state, gamma)
                target2 = ((z >> U64(11)) * _INV_2_53) * (nn - sumsq[st])
                acc2 = 0.0
                ptype = 0
                vtype = 1 if K > 1 else 0
                done = False
                for i in range(K):
                    ci = counts[st, i]
                    if ci == 0:
                        continue
                    for j in range(K):
                        if j == i:
                            continue
                        acc2 += ci * counts[st, j]
                        if target2 <= acc2:
                            ptype = i
                            vtype = j
                            done = True
                            break
                    if done:
                        break
            ci = counts[st, ptype]
            cj = counts[st, vtype]
            if cj > 0:
                counts[st, ptype] = ci + 1
                counts[st, vtype] = cj - 1
                sumsq[st] += 2 * (ci - cj) + 2
                selw[st] += chi[ptype] - chi[vtype]
                site_rate[st] = half_d * (nn - sumsq[st]) + s * selw[st] + mut_site + mig_site
            continue
        local -= res_rate

        if local < s * selw[st]:
            # parent type by fitness-weighted counts, victim uniform individual
            state, u = _unif(state, gamma)
            target2 = u * selw[st]
            acc2 = 0.0
            ptype = K - 1
            for i in range(K):
                acc2 += chi[i] * counts[st, i]
                if target2 <= acc2:
                    ptype = i
                    break
            state, u = _unif(state, gamma)
            vidx = np.int64(u * n)
            acc3 = 0
            vtype = K - 1
            for i in range(K):
                acc3 += counts[st, i]
                if vidx < acc3:
                    vtype = i
                    break
            if vtype != ptype:
                ci = counts[st, ptype]
                cj = counts[st, vtype]
                counts[st, ptype] = ci + 1
                counts[st, vtype] = cj - 1
                sumsq[st] += 2 * (ci - cj) + 2
                selw[st] += chi[ptype] - chi[vtype]
                site_rate[st] = half_d * (nn - sumsq[st]) + s * selw[st] + mut_site + mig_site
            continue
        local -= s * selw[st]

        if local < mut_site:
            # uniform individual mutates through the kernel row
            state, u = _unif(state, gamma)
            uidx = np.int64(u * n)
            acc3 = 0
            utype = K - 1
            for i in range(K):
                acc3 += counts[st, i]
                if uidx < acc3:
                    utype = i
                    break
            state, u = _unif(state, gamma)
            vtype = K - 1
            for j in range(K):
                if u <= M_cum[utype, j]:
                    vtype = j
                    break
            if vtype != utype:
                cu = counts[st, utype]
                cv = counts[st, vtype]
                counts[st, utype] = cu - 1
                counts[st, vtype] = cv + 1
                sumsq[st] += 2 * (cv - cu) + 2
                selw[st] += chi[vtype] - chi[utype]
                site_rate[st] = half_d * (nn - sumsq[st]) + s * selw[st] + mut_site + mig_site
            continue

        # migration: uniform individual replaced by a draw from the source site
        state, u = _unif(state, gamma)
        uidx = np.int64(u * n)
        acc3 = 0
        utype = K - 1
        for i in range(K):
            acc3 += counts[st, i]
            if uidx < acc3:
                utype = i
                break
        state, u = _unif(state, gamma)
        src = S - 1
        for j in range(S):
            if u <= A_cum[st, j]:
                src = j
                break
        state, u = _unif(state, gamma)
        widx = np.int64(u * n)
        acc3 = 0
        wtype = K - 1
        for i in range(K):
            acc3 += counts[src, i]
            if widx < acc3:
                wtype = i
                break
        if wtype != utype:
            cu = counts[st, utype]
            cw = counts[st, wtype]
            counts[st, utype] = cu - 1
            counts[st, wtype] = cw + 1
            sumsq[st] += 2 * (cw - cu) + 2
            selw[st] += chi[wtype] - chi[utype]
            site_rate[st] = half_d * (nn - sumsq[st]) + s * selw[st] + mut_site + mig_site
    return state


@njit(parallel=True, cache=True)
def _moran_batch(counts0, d, m, s, c, chi, M_cum, A_cum, ts, states, gammas, out):
    R = counts0.shape[0]
    for r in prange(R):
        work = counts0[r].copy()
        _one_replica(work, d, m, s, c, chi, M_cum, A_cum, ts, states[r], gammas[r], out[r])


@njit(cache=True)
def _neutral2_one(n, k0, d, ts, state, gamma, out):
    """Neutral one-site two-type fast path: birth-death walk on one count.

    The mixed-pair resampling clock and the fair direction coin come from
    a single stream step (time from the top 53 bits, coin from the spare
    low bit)."""
    t = 0.0
    k = k0
    ckpt = 0
    n_ckpt = ts.shape[0]
    while True:
        rate = d * k * (n - k)
        if rate <= 0.0:
            break
        state, z = _next_z(state, gamma)
        u = (z >> U64(11)) * _INV_2_53
        t_next = t - np.log(u) / rate
        if t_next >= ts[ckpt]:
            while ckpt < n_ckpt and t_next >= ts[ckpt]:
                out[ckpt, 0, 0] = k
                out[ckpt, 0, 1] = n - k
                ckpt += 1
            if ckpt >= n_ckpt:
                return state
        t = t_next
        if z & U64(1):
            k += 1
        else:
            k -= 1
    for j in range(ckpt, n_ckpt):
        out[j, 0, 0] = k
        out[j, 0, 1] = n - k
    return state


@njit(parallel=True, cache=True)
def _neutral2_batch(n, k0, d, ts, states, gammas, out):
    R = states.shape[0]
    for r in prange(R):
        _neutral2_one(n, k0, d, ts, states[r], gammas[r], out[r])


def moran_batch(counts0, d, m, s, c, chi, mutation_matrix, migration_matrix, times, states, gammas):
    """Simulate replicas of the Moran system; return counts at checkpoints.

    counts0: (R, S, K) int64, per-site populations all equal.
    times: ascending checkpoint times.
    Returns (R, T, S, K) int64.
    """
    counts0 = np.ascontiguousarray(counts0, dtype=np.int64)
    R, S, K = counts0.shape
    ts = np.ascontiguousarray(times, dtype=np.float64)
    out = np.zeros((R, ts.size, S, K), dtype=np.int64)
    states = np.ascontiguousarray(states, dtype=np.uint64)
    gammas = np.ascontiguousarray(gammas, dtype=np.uint64)
    if S == 1 and K == 2 and m == 0.0 and s == 0.0 and c == 0.0:
        same_init = np.all(counts0[:, 0, 0] == counts0[0, 0, 0]) and np.all(
            counts0[:, 0, 1] == counts0[0, 0, 1]
        )
        if same_init:
            n = int(counts0[0, 0].sum())
            _neutral2_batch(n, int(counts0[0, 0, 0]), float(d), ts, states, gammas, out)
            return out
    M_cum = np.ascontiguousarray(np.cumsum(np.asarray(mutation_matrix, dtype=np.float64), axis=1))
    A_cum = np.ascontiguousarray(np.cumsum(np.asarray(migration_matrix, dtype=np.float64), axis=1))
    _moran_batch(
        counts0,
        float(d), float(m), float(s), float(c),
        np.ascontiguousarray(chi, dtype=np.float64),
        M_cum, A_cum, ts,
        states, gammas, out,
    )
    return out
