"""Deterministic per-replica random streams.

Every estimate derives its randomness from (master_seed, experiment_id,
side, replica_index).  Replicas therefore never share a stream, results
do not depend on worker scheduling, and reruns with the same master seed
are bit-identical.
"""

from __future__ import annotations

import zlib

import numpy as np


def _experiment_key(experiment_id: str) -> int:
    return zlib.crc32(experiment_id.encode("utf-8"))


def stream_material(master_seed: int, experiment_id: str, side: int, count: int):
    """(states, gammas) uint64 arrays for splitmix64 streams in compiled kernels."""
    ss = np.random.SeedSequence(
        entropy=int(master_seed), spawn_key=(_experiment_key(experiment_id), int(side))
    )
    raw = ss.generate_state(2 * count, dtype=np.uint64)
    states = raw[:count].copy()
    gammas = (raw[count:] | np.uint64(1)).copy()
    return states, gammas


def replica_rng(master_seed: int, experiment_id: str, side: int, replica: int) -> np.random.Generator:
    ss = np.random.SeedSequence(
        entropy=int(master_seed),
        spawn_key=(_experiment_key(experiment_id), int(side), int(replica)),
    )
    return np.random.Generator(np.random.PCG64(ss))
