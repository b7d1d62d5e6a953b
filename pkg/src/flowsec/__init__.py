"""Security analytics over network flow logs of mobile and IoT devices.

Builds an entity graph from flow records, ranks sensitivity and
vulnerability as damped fixed points, scores degree of compromise over each
device's components, and drives a per-device security state machine with
alerting, breach reports and protection recommendations.
"""
from .actions import ActionCode, RiskLevel, RiskThresholds, classify_risk, recommend_actions
from .compromise import CompromiseAssessment, CompromiseEvidence, compromise_probability, compute_degree_of_compromise
from .flow_model import EntityGraph, EntityKind, FlowRecord, parse_flow_record, resolve_entities
from .sensitivity import DataProfile, RankVector, SensitivityParams, compute_sensitivity_rank
from .state_machine import SecurityState, replay, step
from .vulnerability import attack_path, build_vuln_graph, compute_vulnerability_rank

__version__ = "0.1.0"

__all__ = [
    "ActionCode", "CompromiseAssessment", "CompromiseEvidence", "DataProfile", "EntityGraph", "EntityKind",
    "FlowRecord", "RankVector", "RiskLevel", "RiskThresholds", "SecurityState", "SensitivityParams",
    "attack_path", "build_vuln_graph", "classify_risk", "compromise_probability", "compute_degree_of_compromise",
    "compute_sensitivity_rank", "compute_vulnerability_rank", "parse_flow_record", "recommend_actions",
    "replay", "resolve_entities", "step",
]
