"""Experiment configuration: one self-describing YAML file per run.

Everything a run needs is in the file (no environment lookups), and the
whole tree is validated up front: every violated precondition is reported
with its field path, not just the first one.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .forward import ForwardParams
from .geometry import Geography, GeometryError, MigrationKernel, TypeSpace
from .harness import DUAL_KINDS, DualityPairing, ModelConfig

EXPERIMENT_KINDS = ("duality", "battery", "ergodic", "decoupling", "markov_set_dual")


class ConfigError(ValueError):
    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__("\n".join(self.errors))


@dataclass
class ExperimentConfig:
    model: ModelConfig
    kind: str
    master_seed: int
    output_dir: Path
    plots: bool
    workers: int
    threshold: float
    pairings: list[DualityPairing] = field(default_factory=list)
    t_grid: tuple[float, ...] = ()
    replicas: int = 2000
    dual_replicas: int = 4000
    background_b: tuple[float, ...] = ()
    distances: tuple[int, ...] = (0, 1, 2, 3)
    horizon: float = 1.0
    chain_replicas: int = 100_000
    raw: dict = field(default_factory=dict)


def _get(tree, path, errors, default=None, required=False):
    node = tree
    for part in path.split("."):
        if not isinstance(node, dict) or part not in node:
            if required:
                errors.append(f"{path}: missing required field")
            return default
        node = node[part]
    return node


def parse_config(path) -> ExperimentConfig:
    """Load and fully validate a config file; raises with every problem."""
    path = Path(path)
    if not path.exists():
        raise ConfigError([f"{path}: no such file"])
    with open(path) as fh:
        tree = yaml.safe_load(fh)
    if not isinstance(tree, dict):
        raise ConfigError([f"{path}: top level must be a mapping"])
    return build_config(tree)


def build_config(tree: dict) -> ExperimentConfig:
    errors: list[str] = []

    K = _get(tree, "model.n_types", errors, required=True)
    fitness = _get(tree, "model.fitness", errors, required=True)
    mutation_matrix = _get(tree, "model.mutation_matrix", errors, required=True)
    mutation_rate = _get(tree, "model.mutation_rate", errors, default=0.0)
    mbar = _get(tree, "model.state_independent_rate", errors, default=0.0)
    rho = _get(tree, "model.base_measure", errors, default=None)
    type_space = None
    if not errors:
        if fitness is not None and K is not None and len(fitness) != K:
            errors.append(f"model.fitness: expected {K} entries, got {len(fitness)}")
        try:
            type_space = TypeSpace(
                fitness=tuple(float(v) for v in fitness),
                mutation_matrix=tuple(tuple(float(v) for v in row) for row in mutation_matrix),
                mutation_rate=float(mutation_rate),
                state_independent_rate=float(mbar),
                base_measure=tuple(float(v) for v in rho) if rho is not None else None,
            )
        except GeometryError as exc:
            errors.extend(f"model.{line}" for line in str(exc).split("; "))

    mode = _get(tree, "geography.mode", errors, default="island")
    order = _get(tree, "geography.order", errors, default=2)
    level_rates = _get(tree, "geography.level_rates", errors, default=[1.0])
    max_depth = _get(tree, "geography.max_depth", errors, default=3)
    geography = None
    try:
        kernel = MigrationKernel(
            order=int(order),
            mode=str(mode),
            level_rates=tuple(float(v) for v in level_rates),
            max_depth=int(max_depth),
        )
        geography = Geography(kernel)
    except (GeometryError, ValueError, TypeError) as exc:
        errors.append(f"geography: {exc}")

    params = None
    try:
        params = ForwardParams(
            migration=float(_get(tree, "model.migration", errors, default=0.0)),
            selection=float(_get(tree, "model.selection", errors, default=0.0)),
            mutation=float(mutation_rate or 0.0),
            resampling=float(_get(tree, "model.resampling", errors, default=0.0)),
            moran_pop_size=int(_get(tree, "experiment.moran_pop_size", errors, default=1000)),
        )
    except (ValueError, TypeError) as exc:
        errors.append(f"model rates: {exc}")

    background = _get(tree, "experiment.initial", errors, default=None)
    if background is None and K is not None:
        background = [1.0 / K] * K
    if background is not None and K is not None:
        if len(background) != K:
            errors.append(f"experiment.initial: expected {K} entries")
        elif abs(sum(background) - 1.0) > 1e-9 or any(v < 0 for v in background):
            errors.append("experiment.initial: must be a probability vector")

    kind = _get(tree, "experiment.kind", errors, required=True)
    if kind is not None and kind not in EXPERIMENT_KINDS:
        errors.append(
            f"experiment.kind: unknown kind {kind!r}; choose one of {', '.join(EXPERIMENT_KINDS)}"
        )

    pairings = []
    n_sites = len(geography) if geography is not None else 0
    for i, chk in enumerate(_get(tree, "experiment.checks", errors, default=[]) or []):
        where = f"experiment.checks[{i}]"
        try:
            ck = str(chk.get("kind", "plus"))
            if ck not in DUAL_KINDS:
                errors.append(f"{where}.kind: unknown dual kind {ck!r}")
                continue
            sites = tuple(int(v) for v in chk["sites"])
            if any(s < 0 or s >= n_sites for s in sites):
                errors.append(f"{where}.sites: site index outside the geography")
                continue
            masks = tuple(int(v) for v in chk["masks"])
            if K is not None and any(m <= 0 or m >= 2**K for m in masks):
                errors.append(f"{where}.masks: each mask must be a nonempty proper bitmask")
                continue
            star = bool(chk.get("star", False))
            if star and type_space is not None and type_space.state_independent_rate <= 0:
                errors.append(f"{where}.star: needs model.state_independent_rate > 0")
                continue
            pairings.append(
                DualityPairing(
                    name=str(chk.get("name", f"check{i}")),
                    site_indices=sites,
                    masks=masks,
                    horizon=float(chk.get("t", _get(tree, "experiment.horizon", [], default=1.0))),
                    kind=ck,
                    mutation_mode=str(chk.get("mutation", "flow")),
                    star=star,
                    forward_replicas=int(
                        chk.get("forward_replicas", _get(tree, "experiment.forward_replicas", [], default=2000))
                    ),
                    dual_replicas=int(
                        chk.get("dual_replicas", _get(tree, "experiment.dual_replicas", [], default=20000))
                    ),
                )
            )
        except (KeyError, TypeError, ValueError) as exc:
            errors.append(f"{where}: {exc}")

    if kind == "ergodic" and type_space is not None:
        rates = None
        try:
            rates = type_space.channel_rates()
        except GeometryError as exc:
            errors.append(f"model: {exc}")
        if rates is not None:
            offdiag = rates[~np.eye(type_space.n_types, dtype=bool)]
            if np.any(offdiag <= 0):
                errors.append(
                    "experiment.kind=ergodic: requires strictly positive "
                    "off-diagonal mutation rates (uniqueness hypothesis)"
                )
        bg_b = _get(tree, "experiment.initial_b", errors, required=True)
        if bg_b is not None and K is not None and len(bg_b) != K:
            errors.append(f"experiment.initial_b: expected {K} entries")

    if errors:
        raise ConfigError(errors)

    model = ModelConfig(
        type_space=type_space,
        params=params,
        geography=geography,
        background=tuple(float(v) for v in background),
    )
    return ExperimentConfig(
        model=model,
        kind=str(kind),
        master_seed=int(_get(tree, "experiment.master_seed", [], default=20260809)),
        output_dir=Path(_get(tree, "output.directory", [], default="out")),
        plots=bool(_get(tree, "output.plots", [], default=True)),
        workers=int(_get(tree, "experiment.workers", [], default=1)),
        threshold=float(_get(tree, "experiment.threshold", [], default=4.0)),
        pairings=pairings,
        t_grid=tuple(float(v) for v in _get(tree, "experiment.t_grid", [], default=[5.0, 10.0, 20.0])),
        replicas=int(_get(tree, "experiment.replicas", [], default=2000)),
        dual_replicas=int(_get(tree, "experiment.dual_replicas", [], default=4000)),
        background_b=tuple(float(v) for v in (_get(tree, "experiment.initial_b", [], default=[]) or [])),
        distances=tuple(int(v) for v in _get(tree, "experiment.distances", [], default=[0, 1, 2, 3])),
        horizon=float(_get(tree, "experiment.horizon", [], default=1.0)),
        chain_replicas=int(_get(tree, "experiment.chain_replicas", [], default=100_000)),
        raw=tree,
    )
