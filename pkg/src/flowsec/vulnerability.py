"""Vulnerability rank and attack-path queries.

Vulnerability propagates over the same normalized communication weights as
sensitivity, with each node's insider (IV) and local (LV) vulnerability as the
base term::

    V(i) = sum_j W(i,j) * V(j) + IV(i) + LV(i)

Exploit edges are kept separate from W: they carry the probability that a
compromise of ``src`` extends to ``dst`` and only drive :func:`attack_path`.
"""
from __future__ import annotations

import heapq
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Mapping

from .errors import NotFoundError, ParseError, SchemaError, StateError, ValidationError
from .flow_model import EntityGraph
from .ndjson import iter_objects, write_lines
from .sensitivity import Edge, RankVector, SensitivityParams, interaction_weights, solve_fixed_point

_BOUND_SLACK = 1e-12


@dataclass(frozen=True)
class VulnNode:
    entity_id: str
    local: float = 0.0
    insider: float = 0.0
    known_cves: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        for name, v in (("lv", self.local), ("iv", self.insider)):
            if not 0.0 <= v < 1.0:
                raise ValidationError(f"node {self.entity_id!r}: {name} must be in [0,1), got {v}")

    @property
    def base(self) -> float:
        return self.insider + self.local


@dataclass(frozen=True)
class ExploitEdge:
    src: str
    dst: str
    p: float

    def __post_init__(self) -> None:
        if not 0.0 < self.p <= 1.0:
            raise ValidationError(f"exploit edge {self.src}->{self.dst}: p must be in (0,1], got {self.p}")


@dataclass(frozen=True)
class VulnGraph:
    graph: EntityGraph
    nodes: Mapping[str, VulnNode]
    exploit_edges: Mapping[Edge, ExploitEdge]
    weights: Mapping[Edge, float]
    _succ: Mapping[str, tuple[ExploitEdge, ...]] = field(repr=False, compare=False, default_factory=dict)

    def successors(self, entity_id: str) -> tuple[ExploitEdge, ...]:
        return self._succ.get(entity_id, ())

    def without_edge(self, src: str, dst: str) -> VulnGraph:
        kept = [e for k, e in sorted(self.exploit_edges.items()) if k != (src, dst)]
        return _assemble(self.graph, self.nodes, kept, self.weights)


def _assemble(graph, nodes, edges: Iterable[ExploitEdge], weights) -> VulnGraph:
    by_key: dict[Edge, ExploitEdge] = {}
    succ: dict[str, list[ExploitEdge]] = {}
    for e in edges:
        if (e.src, e.dst) in by_key:
            raise ValidationError(f"duplicate exploit edge {e.src}->{e.dst}")
        by_key[(e.src, e.dst)] = e
        succ.setdefault(e.src, []).append(e)
    frozen_succ = {k: tuple(sorted(v, key=lambda e: e.dst)) for k, v in succ.items()}
    return VulnGraph(graph, dict(nodes), by_key, dict(weights), frozen_succ)


def build_vuln_graph(
    graph: EntityGraph,
    nodes: Iterable[VulnNode] = (),
    edges: Iterable[ExploitEdge] = (),
    params: SensitivityParams | None = None,
    now: float | None = None,
) -> VulnGraph:
    """Combine annotations with the entity graph's interaction weights.

    Unannotated entities get IV = LV = 0.
    """
    params = params or SensitivityParams()
    if not graph.frozen:
        raise StateError("vulnerability graph requires a frozen entity graph")
    table = {eid: VulnNode(eid) for eid in graph.ids()}
    seen: set[str] = set()
    for node in nodes:
        if node.entity_id not in graph:
            raise NotFoundError(f"annotation for unknown entity {node.entity_id!r}")
        if node.entity_id in seen:
            raise ValidationError(f"duplicate annotation for {node.entity_id!r}")
        if node.base > params.base_cap + _BOUND_SLACK:
            raise ValidationError(
                f"node {node.entity_id!r}: iv + lv = {node.base:g} exceeds 1 - damping = {params.base_cap:g}"
            )
        seen.add(node.entity_id)
        table[node.entity_id] = node
    edge_list = list(edges)
    for e in edge_list:
        for end in (e.src, e.dst):
            if end not in graph:
                raise NotFoundError(f"exploit edge endpoint {end!r} is not an entity")
    return _assemble(graph, table, edge_list, interaction_weights(graph, params, now))


def parse_annotations(objects: Iterable[tuple[int, dict]], source: str = "<annotations>"):
    nodes: list[VulnNode] = []
    edges: list[ExploitEdge] = []
    for lineno, obj in objects:
        try:
            if "node" in obj:
                n = obj["node"]
                nodes.append(VulnNode(n["id"], float(n.get("lv", 0.0)), float(n.get("iv", 0.0)),
                                      tuple(n.get("cves", ()))))
            elif "exploit_edge" in obj:
                e = obj["exploit_edge"]
                edges.append(ExploitEdge(e["src"], e["dst"], float(e["p"])))
            else:
                raise SchemaError("node", f"{source}:{lineno}: expected 'node' or 'exploit_edge'")
        except (KeyError, TypeError, ValueError) as exc:
            raise ParseError(f"bad annotation line: {exc}", lineno, source) from None
        except ValidationError as exc:
            raise ValidationError(f"{source}:{lineno}: {exc}") from None
    return nodes, edges


def load_vuln_annotations(
    graph: EntityGraph,
    path: str | Path | None,
    params: SensitivityParams | None = None,
    now: float | None = None,
) -> VulnGraph:
    """Read an annotation NDJSON file (``None`` means no annotations)."""
    nodes, edges = parse_annotations(iter_objects(path), str(path)) if path is not None else ([], [])
    return build_vuln_graph(graph, nodes, edges, params, now)


def write_annotations(path: str | Path, nodes: Iterable[VulnNode], edges: Iterable[ExploitEdge]) -> int:
    lines: list[dict] = []
    for n in sorted(nodes, key=lambda n: n.entity_id):
        lines.append({"node": {"id": n.entity_id, "lv": n.local, "iv": n.insider, "cves": list(n.known_cves)}})
    for e in sorted(edges, key=lambda e: (e.src, e.dst)):
        lines.append({"exploit_edge": {"src": e.src, "dst": e.dst, "p": e.p}})
    return write_lines(path, lines)


def compute_vulnerability_rank(vg: VulnGraph, params: SensitivityParams | None = None) -> RankVector:
    params = params or SensitivityParams()
    if not vg.graph.frozen:
        raise StateError("vulnerability rank requires a frozen graph")
    base = {eid: node.base for eid, node in vg.nodes.items()}
    return solve_fixed_point(vg.graph.ids(), vg.weights, base, params)


@dataclass(frozen=True)
class AttackPath:
    path: tuple[str, ...]
    probability: float
    exact: Fraction = field(default=Fraction(1), repr=False, compare=False)


def attack_path(vg: VulnGraph, source: str, target: str) -> AttackPath | None:
    """Most probable exploit path from *source* to *target*, or ``None``.

    Path probability is the product of edge probabilities. Products are kept
    as exact fractions so ties are real ties; they break on fewer hops, then
    on the lexicographically smallest id sequence. Multiplying by p <= 1
    never increases a label, so label-setting search is exact.
    """
    for end in (source, target):
        if end not in vg.nodes:
            raise NotFoundError(f"unknown entity {end!r}")
    # heap entries sort by (-probability, hops, path)
    heap: list[tuple[Fraction, int, tuple[str, ...]]] = [(Fraction(-1), 0, (source,))]
    settled: set[str] = set()
    while heap:
        neg_prob, hops, path = heapq.heappop(heap)
        node = path[-1]
        if node in settled:
            continue
        settled.add(node)
        if node == target:
            prob = -neg_prob
            return AttackPath(path, float(prob), prob)
        for e in vg.successors(node):
            if e.dst in settled:
                continue
            heapq.heappush(heap, (neg_prob * Fraction(e.p), hops + 1, path + (e.dst,)))
    return None
