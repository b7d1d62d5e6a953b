"""Compromise probability and degree of compromise over the containment forest.

``p(i)`` combines the vulnerability rank with behavioral anomaly evidence as a
noisy-OR. Degree of compromise is evaluated bottom-up::

    DC(i) = p(i) * S(i) * sum(DC(j) for child j with V(j) > 0)

Leaves, and internal nodes without a vulnerable child, use ``p(i) * S(i)``.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping

from .errors import ParseError, StateError, ValidationError
from .flow_model import EntityGraph
from .ndjson import fmt12, iter_objects, write_lines
from .sensitivity import RankVector

# default weight of each behavioral flag in the anomaly score
DEFAULT_FLAG_WEIGHTS: Mapping[str, float] = {
    "beaconing": 0.7,
    "new_endpoint_burst": 0.3,
    "ad_click_spike": 0.5,
}


@dataclass(frozen=True)
class CompromiseEvidence:
    entity_id: str
    anomaly_score: float = 0.0
    directly_observed: bool = False
    flags: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if not 0.0 <= self.anomaly_score <= 1.0:
            raise ValidationError(f"evidence {self.entity_id!r}: anomaly_score must be in [0,1]")


@dataclass(frozen=True)
class CompromiseAssessment:
    entity_id: str
    p: float
    dc: float
    contributing_children: tuple[str, ...] = ()


def anomaly_score(flags: Iterable[str], weights: Mapping[str, float] = DEFAULT_FLAG_WEIGHTS) -> float:
    """Sum of configured flag weights, clamped to 1."""
    return min(1.0, sum(weights.get(f, 0.0) for f in set(flags)))


def evidence_from_flags(
    flagged: Mapping[str, Iterable[str]],
    weights: Mapping[str, float] = DEFAULT_FLAG_WEIGHTS,
) -> dict[str, CompromiseEvidence]:
    out = {}
    for eid, flags in flagged.items():
        names = tuple(sorted(set(flags)))
        out[eid] = CompromiseEvidence(eid, anomaly_score(names, weights), False, names)
    return out


def merge_evidence(*sources: Mapping[str, CompromiseEvidence]) -> dict[str, CompromiseEvidence]:
    """Combine evidence tables: max anomaly score, OR of direct observation."""
    out: dict[str, CompromiseEvidence] = {}
    for table in sources:
        for eid, ev in table.items():
            prev = out.get(eid)
            if prev is None:
                out[eid] = ev
                continue
            out[eid] = CompromiseEvidence(
                eid,
                max(prev.anomaly_score, ev.anomaly_score),
                prev.directly_observed or ev.directly_observed,
                tuple(sorted(set(prev.flags) | set(ev.flags))),
            )
    return out


def compromise_probability(v: float, ev: CompromiseEvidence | None) -> float:
    """Noisy-OR of 'exploited via ranked vulnerability' and 'behaviorally compromised'."""
    if not 0.0 <= v < 1.0:
        raise ValidationError(f"vulnerability rank must be in [0,1), got {v}")
    if ev is None:
        return v
    if ev.directly_observed:
        return 1.0
    # same value as 1-(1-v)(1-a), but exactly v when a == 0 and monotone under rounding
    return v + ev.anomaly_score * (1.0 - v)


def compute_degree_of_compromise(
    graph: EntityGraph,
    sensitivity: RankVector,
    vulnerability: RankVector,
    evidence: Mapping[str, CompromiseEvidence] | None = None,
) -> dict[str, CompromiseAssessment]:
    if not (sensitivity.converged and vulnerability.converged):
        raise StateError("degree of compromise needs converged sensitivity and vulnerability ranks")
    evidence = evidence or {}
    out: dict[str, CompromiseAssessment] = {}
    # iterative post-order over each containment tree
    for root in graph.roots():
        stack: list[tuple[str, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            children = sorted(graph.children(node))
            if not expanded:
                stack.append((node, True))
                stack.extend((c, False) for c in reversed(children))
                continue
            p = compromise_probability(vulnerability.get(node), evidence.get(node))
            s = sensitivity.get(node)
            vulnerable = tuple(c for c in children if vulnerability.get(c) > 0.0)
            if vulnerable:
                dc = p * s * sum(out[c].dc for c in vulnerable)
            else:
                dc = p * s
            out[node] = CompromiseAssessment(node, p, dc, vulnerable)
    return out


# -- files ------------------------------------------------------------------

def load_evidence(path: str | Path) -> dict[str, CompromiseEvidence]:
    out: dict[str, CompromiseEvidence] = {}
    for lineno, obj in iter_objects(path):
        try:
            e = obj["evidence"]
            flags = e.get("flags", ())
            ev = CompromiseEvidence(
                e["id"], float(e.get("anomaly_score", 0.0)), bool(e.get("directly_observed", False)),
                tuple(sorted(flags)),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ParseError(f"bad evidence line: {exc}", lineno, str(path)) from None
        except ValidationError as exc:
            raise ValidationError(f"{path}:{lineno}: {exc}") from None
        out[ev.entity_id] = ev
    return out


def write_evidence(path: str | Path, evidence: Mapping[str, CompromiseEvidence]) -> int:
    return write_lines(path, (
        {"evidence": {"id": ev.entity_id, "anomaly_score": ev.anomaly_score,
                      "directly_observed": ev.directly_observed, "flags": list(ev.flags)}}
        for _, ev in sorted(evidence.items())
    ))


def write_assessments(path: str | Path, assessments: Mapping[str, CompromiseAssessment]) -> int:
    return write_lines(path, (
        {"entity": a.entity_id, "p": fmt12(a.p), "dc": fmt12(a.dc),
         "contributing_children": list(a.contributing_children)}
        for _, a in sorted(assessments.items())
    ))


def load_assessments(path: str | Path) -> dict[str, CompromiseAssessment]:
    out = {}
    for lineno, obj in iter_objects(path):
        try:
            a = CompromiseAssessment(obj["entity"], float(obj["p"]), float(obj["dc"]),
                                     tuple(obj.get("contributing_children", ())))
        except (KeyError, TypeError, ValueError) as exc:
            raise ParseError(f"bad assessment line: {exc}", lineno, str(path)) from None
        out[a.entity_id] = a
    return out
