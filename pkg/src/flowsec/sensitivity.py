"""Sensitivity rank: a damped PageRank-style fixed point over the entity graph.

Each entity's sensitivity is the weighted sensitivity of the entities it talks
to plus a base term derived from the data it holds::

    S(i) = sum_j W(i,j) * S(j) + base(i)

Outgoing weights are row-normalized to ``damping`` and the base term is capped
at ``1 - damping``, so the update is a max-norm contraction with factor
``damping`` and every rank lands in ``[0, 1)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import ConfigError, NotFoundError, ParseError, StateError, ValidationError
from .flow_model import EdgeStats, EntityGraph
from .ndjson import fmt12, iter_objects, write_lines

DAY = 86400
Edge = tuple[str, str]


@dataclass(frozen=True)
class SensitivityParams:
    damping: float = 0.85
    tolerance: float = 1e-9
    max_iterations: int = 1000
    recency_half_life: float = 7 * DAY
    history_decay: float = 0.99

    def __post_init__(self) -> None:
        if not 0.0 < self.damping < 1.0:
            raise ConfigError(f"damping must be in (0,1), got {self.damping}")
        if not self.tolerance > 0.0:
            raise ConfigError(f"tolerance must be > 0, got {self.tolerance}")
        if self.max_iterations < 1:
            raise ConfigError(f"max_iterations must be >= 1, got {self.max_iterations}")
        if not self.recency_half_life > 0.0:
            raise ConfigError("recency_half_life must be > 0")
        if not 0.0 < self.history_decay < 1.0:
            raise ConfigError(f"history_decay must be in (0,1), got {self.history_decay}")

    @property
    def base_cap(self) -> float:
        return 1.0 - self.damping

    def iteration_bound(self) -> int:
        """Iterations sufficient for convergence from the all-zero start."""
        return math.ceil(math.log(self.tolerance) / math.log(self.damping)) + 1


@dataclass(frozen=True)
class DataProfile:
    """Historical (HD) and current (CD) data scores held at one entity."""

    entity_id: str
    historical: float = 0.0
    current: float = 0.0

    def __post_init__(self) -> None:
        if self.historical < 0 or self.current < 0:
            raise ValidationError(f"profile {self.entity_id!r}: HD and CD must be >= 0")

    @property
    def total(self) -> float:
        return self.historical + self.current


@dataclass(frozen=True)
class RankVector:
    values: Mapping[str, float]
    iterations_used: int
    converged: bool
    residual: float

    def __getitem__(self, entity_id: str) -> float:
        try:
            return self.values[entity_id]
        except KeyError:
            raise NotFoundError(f"no rank for {entity_id!r}") from None

    def get(self, entity_id: str, default: float = 0.0) -> float:
        return self.values.get(entity_id, default)


def edge_weight(stats: EdgeStats, now: float, params: SensitivityParams) -> float:
    """Raw (unnormalized) communication weight of one edge.

    Product of log-frequency, log-volume, exponential recency decay and an
    authentication factor in [0.5, 1].
    """
    age = now - stats.last_seen
    if age < 0:
        raise ValidationError(f"edge {stats.src}->{stats.dst} last seen after now")
    return (
        math.log2(1 + stats.flow_count)
        * math.log2(1 + stats.total_bytes)
        * 2.0 ** (-age / params.recency_half_life)
        * (0.5 + 0.5 * stats.auth_fraction)
    )


def raw_weights(graph: EntityGraph, now: float, params: SensitivityParams) -> dict[Edge, float]:
    return {(s.src, s.dst): edge_weight(s, now, params) for s in graph.edges()}


def normalize_weights(graph: EntityGraph, raw: Mapping[Edge, float], params: SensitivityParams) -> dict[Edge, float]:
    """Scale each entity's outgoing weights to sum to ``damping`` (or to 0)."""
    totals: dict[str, float] = {}
    for key in sorted(raw):
        value = raw[key]
        if value < 0:
            raise ValidationError(f"negative raw weight on {key[0]}->{key[1]}")
        totals[key[0]] = totals.get(key[0], 0.0) + value
    out: dict[Edge, float] = {}
    for key in sorted(raw):
        total = totals[key[0]]
        out[key] = params.damping * raw[key] / total if total > 0 else 0.0
    return out


def interaction_weights(graph: EntityGraph, params: SensitivityParams, now: float | None = None) -> dict[Edge, float]:
    """Normalized W(i,j) for every communication edge of *graph*."""
    if now is None:
        now = graph.reference_time()
    return normalize_weights(graph, raw_weights(graph, now, params), params)


def data_sensitivity(profile: DataProfile | None, params: SensitivityParams) -> float:
    """Base term in ``[0, 1 - damping)``: saturating map of HD + CD."""
    if profile is None:
        return 0.0
    return params.base_cap * (1.0 - 2.0 ** (-profile.total))


def rollover_profile(profile: DataProfile, elapsed: float, new_current: float, params: SensitivityParams) -> DataProfile:
    """Fold the current score into history, decaying history per elapsed day."""
    if elapsed < 0:
        raise ValidationError("elapsed time must be >= 0")
    history = profile.historical * params.history_decay ** (elapsed / DAY) + profile.current
    return DataProfile(profile.entity_id, history, new_current)


def solve_fixed_point(
    ids: list[str],
    weights: Mapping[Edge, float],
    base: Mapping[str, float],
    params: SensitivityParams,
) -> RankVector:
    """Jacobi iteration of ``x = W x + base`` from ``x = 0``.

    Stops once the max-norm change drops below ``params.tolerance``.
    """
    index = {eid: k for k, eid in enumerate(ids)}
    n = len(ids)
    keys = sorted(k for k, w in weights.items() if w != 0.0)
    src = np.fromiter((index[k[0]] for k in keys), dtype=np.intp, count=len(keys))
    dst = np.fromiter((index[k[1]] for k in keys), dtype=np.intp, count=len(keys))
    w = np.fromiter((weights[k] for k in keys), dtype=float, count=len(keys))
    b = np.fromiter((base.get(eid, 0.0) for eid in ids), dtype=float, count=n)

    x = np.zeros(n)
    residual = math.inf
    converged = False
    iterations = 0
    while iterations < params.max_iterations:
        nxt = np.bincount(src, weights=w * x[dst], minlength=n) + b
        residual = float(np.max(np.abs(nxt - x))) if n else 0.0
        x = nxt
        iterations += 1
        if residual < params.tolerance:
            converged = True
            break
    values = {eid: float(x[k]) for k, eid in enumerate(ids)}
    return RankVector(values, iterations, converged, residual)


def compute_sensitivity_rank(
    graph: EntityGraph,
    profiles: Mapping[str, DataProfile] | None = None,
    params: SensitivityParams | None = None,
    now: float | None = None,
) -> RankVector:
    params = params or SensitivityParams()
    if not graph.frozen:
        raise StateError("sensitivity rank requires a frozen graph")
    profiles = profiles or {}
    for eid in profiles:
        if eid not in graph:
            raise NotFoundError(f"profile for unknown entity {eid!r}")
    base = {eid: data_sensitivity(profiles.get(eid), params) for eid in graph.ids()}
    return solve_fixed_point(graph.ids(), interaction_weights(graph, params, now), base, params)


# -- files ------------------------------------------------------------------

def load_profiles(path: str | Path) -> dict[str, DataProfile]:
    """Read ``{"profile":{"id":..,"hd":..,"cd":..}}`` lines."""
    out: dict[str, DataProfile] = {}
    for lineno, obj in iter_objects(path):
        try:
            p = obj["profile"]
            prof = DataProfile(p["id"], float(p.get("hd", 0.0)), float(p.get("cd", 0.0)))
        except (KeyError, TypeError, ValueError) as exc:
            raise ParseError(f"bad profile line: {exc}", lineno, str(path)) from None
        except ValidationError as exc:
            raise ValidationError(f"{path}:{lineno}: {exc}") from None
        out[prof.entity_id] = prof
    return out


def write_profiles(path: str | Path, profiles: Mapping[str, DataProfile]) -> int:
    return write_lines(path, (
        {"profile": {"id": p.entity_id, "hd": p.historical, "cd": p.current}}
        for _, p in sorted(profiles.items())
    ))


def write_rank(path: str | Path, ranks: RankVector, field_name: str) -> int:
    return write_lines(path, (
        {"entity": eid, field_name: fmt12(ranks.values[eid])} for eid in sorted(ranks.values)
    ))


def rank_meta(ranks: RankVector) -> dict:
    return {"iterations_used": ranks.iterations_used, "converged": ranks.converged, "residual": fmt12(ranks.residual)}


def load_rank(path: str | Path, field_name: str, meta: Mapping | None = None) -> RankVector:
    values: dict[str, float] = {}
    for lineno, obj in iter_objects(path):
        try:
            values[obj["entity"]] = float(obj[field_name])
        except (KeyError, TypeError, ValueError) as exc:
            raise ParseError(f"bad rank line: {exc}", lineno, str(path)) from None
    meta = meta or {}
    return RankVector(
        values,
        int(meta.get("iterations_used", 0)),
        bool(meta.get("converged", True)),
        float(meta.get("residual", 0.0)),
    )
