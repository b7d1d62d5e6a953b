"""End-to-end orchestration: records -> ranks -> assessments -> states and alerts.

:class:`Watcher` re-runs the whole analysis over all records seen so far at
the end of each epoch (batch re-ranking), feeds device metrics to the state
machine and device degrees of compromise to the edge-triggered monitor.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

from .actions import ActionRecommendation, RiskThresholds, classify_risk, recommend_actions
from .compromise import (
    DEFAULT_FLAG_WEIGHTS,
    CompromiseAssessment,
    CompromiseEvidence,
    compute_degree_of_compromise,
    evidence_from_flags,
    load_evidence,
    merge_evidence,
    write_assessments,
)
from .errors import ConfigError, ParseError
from .flow_model import EntityGraph, EntityKind, FlowRecord, ResolutionRules, load_rules, resolve_entities, write_graph
from .forensics import Alert, FlaggerParams, Monitor, flag_anomalies, write_alerts
from .kvconfig import read_key_values
from .ndjson import fmt12, iter_objects, write_lines
from .sensitivity import (
    DataProfile,
    RankVector,
    SensitivityParams,
    compute_sensitivity_rank,
    load_profiles,
    rank_meta,
    write_rank,
)
from .state_machine import (
    Event,
    EventKind,
    Metrics,
    SecurityState,
    StateThresholds,
    StateTracker,
    Transition,
    write_timeline,
)
from .vulnerability import (
    ExploitEdge,
    VulnGraph,
    VulnNode,
    build_vuln_graph,
    compute_vulnerability_rank,
    parse_annotations,
)

DEFAULT_EPOCH = 60

_PATH_KEYS = ("flows", "rules", "annotations", "evidence", "profiles", "categories", "events", "out")
_FLOAT_KEYS = {
    "threshold_s": ("thresholds", "s"),
    "threshold_v": ("thresholds", "v"),
    "threshold_c": ("thresholds", "dc"),
    "damping": ("params", "damping"),
    "tolerance": ("params", "tolerance"),
    "recency_half_life": ("params", "recency_half_life"),
    "history_decay": ("params", "history_decay"),
}


@dataclass(frozen=True)
class RunConfig:
    thresholds: RiskThresholds = field(default_factory=RiskThresholds)
    params: SensitivityParams = field(default_factory=SensitivityParams)
    epoch: int = DEFAULT_EPOCH
    flagger: FlaggerParams = field(default_factory=FlaggerParams)
    flag_weights: Mapping[str, float] = field(default_factory=lambda: dict(DEFAULT_FLAG_WEIGHTS))
    paths: Mapping[str, str] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.epoch < 1:
            raise ConfigError(f"epoch must be >= 1 second, got {self.epoch}")

    @property
    def state_thresholds(self) -> StateThresholds:
        return StateThresholds(self.thresholds.v, self.thresholds.dc)

    def with_overrides(self, values: Mapping[str, object]) -> RunConfig:
        """Apply flat ``key -> value`` overrides (config file or CLI flags)."""
        thresholds = {"s": self.thresholds.s, "v": self.thresholds.v, "dc": self.thresholds.dc}
        params = {
            "damping": self.params.damping, "tolerance": self.params.tolerance,
            "max_iterations": self.params.max_iterations,
            "recency_half_life": self.params.recency_half_life, "history_decay": self.params.history_decay,
        }
        paths = dict(self.paths)
        epoch = self.epoch
        for key, value in values.items():
            if value is None:
                continue
            try:
                if key in _PATH_KEYS:
                    paths[key] = str(value)
                elif key in _FLOAT_KEYS:
                    group, name = _FLOAT_KEYS[key]
                    (thresholds if group == "thresholds" else params)[name] = float(value)
                elif key == "max_iterations":
                    params["max_iterations"] = int(value)
                elif key == "epoch":
                    epoch = int(value)
                else:
                    raise ConfigError(f"unknown configuration key {key!r}")
            except ValueError:
                raise ConfigError(f"bad value for {key!r}: {value!r}") from None
        return RunConfig(RiskThresholds(**thresholds), SensitivityParams(**params), epoch,
                         self.flagger, self.flag_weights, paths)


def load_run_config(path: str | Path | None, overrides: Mapping[str, object] | None = None) -> RunConfig:
    cfg = RunConfig()
    if path is not None:
        pairs = read_key_values(path)
        base_dir = Path(path).parent
        values = {}
        for key, value in pairs:
            if key in _PATH_KEYS and not Path(value).is_absolute():
                value = str(base_dir / value)
            values[key] = value
        cfg = cfg.with_overrides(values)
    return cfg.with_overrides(overrides or {})


# -- inputs -----------------------------------------------------------------

@dataclass
class PipelineInputs:
    rules: ResolutionRules = field(default_factory=ResolutionRules)
    vuln_nodes: list[VulnNode] = field(default_factory=list)
    exploit_edges: list[ExploitEdge] = field(default_factory=list)
    evidence: dict[str, CompromiseEvidence] = field(default_factory=dict)
    profiles: dict[str, DataProfile] = field(default_factory=dict)
    events: list[tuple[str, int, Event]] = field(default_factory=list)

    @classmethod
    def load(cls, paths: Mapping[str, str]) -> PipelineInputs:
        inputs = cls()
        if paths.get("rules"):
            inputs.rules = load_rules(paths["rules"])
        if paths.get("annotations"):
            src = paths["annotations"]
            inputs.vuln_nodes, inputs.exploit_edges = parse_annotations(iter_objects(src), src)
        if paths.get("evidence"):
            inputs.evidence = load_evidence(paths["evidence"])
        if paths.get("profiles"):
            inputs.profiles = load_profiles(paths["profiles"])
        if paths.get("events"):
            inputs.events = load_events(paths["events"])
        return inputs


def load_events(path: str | Path) -> list[tuple[str, int, Event]]:
    """Read ``{"event":{"device":..,"at":..,"kind":"Clean"|"ManualOverride",...}}`` lines."""
    out = []
    for lineno, obj in iter_objects(path):
        try:
            e = obj["event"]
            kind = EventKind(e["kind"])
            target = SecurityState(e["target"]) if kind is EventKind.MANUAL_OVERRIDE else None
            out.append((e["device"], int(e["at"]), Event(kind, str(e.get("annotation", "")), target)))
        except (KeyError, TypeError, ValueError) as exc:
            raise ParseError(f"bad event line: {exc}", lineno, str(path)) from None
    return sorted(out, key=lambda x: (x[1], x[0], x[2].kind.value, x[2].annotation))


# -- one analysis pass ------------------------------------------------------

@dataclass
class Snapshot:
    at: int
    graph: EntityGraph
    vuln_graph: VulnGraph
    sensitivity: RankVector
    vulnerability: RankVector
    evidence: dict[str, CompromiseEvidence]
    assessments: dict[str, CompromiseAssessment]

    def metrics(self, entity_id: str) -> Metrics:
        a = self.assessments.get(entity_id)
        return Metrics(self.sensitivity.get(entity_id), self.vulnerability.get(entity_id), a.dc if a else 0.0)

    @property
    def converged(self) -> bool:
        return self.sensitivity.converged and self.vulnerability.converged


def analyze(
    records: Iterable[FlowRecord],
    inputs: PipelineInputs,
    config: RunConfig,
    at: int | None = None,
    strict: bool = True,
) -> Snapshot:
    """Resolve, rank and assess one batch of records.

    With ``strict=False`` annotations, profiles and evidence for entities not
    (yet) present in the graph are skipped instead of rejected; the watcher
    needs this because early epochs only see part of the population.
    """
    records = list(records)
    graph = resolve_entities(records, inputs.rules)
    now = graph.reference_time() if at is None else at
    nodes, edges, profiles, evidence = inputs.vuln_nodes, inputs.exploit_edges, inputs.profiles, inputs.evidence
    if not strict:
        nodes = [n for n in nodes if n.entity_id in graph]
        edges = [e for e in edges if e.src in graph and e.dst in graph]
        profiles = {k: v for k, v in profiles.items() if k in graph}
        evidence = {k: v for k, v in evidence.items() if k in graph}
    sensitivity = compute_sensitivity_rank(graph, profiles, config.params, now)
    vg = build_vuln_graph(graph, nodes, edges, config.params, now)
    vulnerability = compute_vulnerability_rank(vg, config.params)
    flagged = evidence_from_flags(flag_anomalies(records, config.flagger), config.flag_weights)
    merged = merge_evidence({k: v for k, v in evidence.items() if k in graph}, flagged)
    assessments = {}
    if sensitivity.converged and vulnerability.converged:
        assessments = compute_degree_of_compromise(graph, sensitivity, vulnerability, merged)
    return Snapshot(int(now), graph, vg, sensitivity, vulnerability, merged, assessments)


# -- epoch watcher ----------------------------------------------------------

@dataclass
class EpochResult:
    index: int
    at: int
    record_count: int
    snapshot: Snapshot
    alerts: list[Alert]
    transitions: list[Transition]

    def summary(self, tracker: StateTracker) -> dict:
        devices = []
        for did in self.snapshot.graph.of_kind(EntityKind.DEVICE):
            m = self.snapshot.metrics(did)
            a = self.snapshot.assessments.get(did)
            devices.append({"id": did, "s": fmt12(m.s), "v": fmt12(m.v), "dc": fmt12(m.dc),
                            "p": fmt12(a.p) if a else 0.0, "state": tracker.state(did).value})
        return {"epoch": self.index, "at": self.at, "records": self.record_count,
                "alerts": len(self.alerts), "devices": devices}


class Watcher:
    """Consume time-ordered records and close an analysis epoch every ``config.epoch`` seconds."""

    def __init__(self, inputs: PipelineInputs, config: RunConfig) -> None:
        self.inputs = inputs
        self.config = config
        self.records: list[FlowRecord] = []
        self.tracker = StateTracker(config.state_thresholds)
        self.monitor = Monitor(config.thresholds.dc, select=lambda eid: eid.startswith("dev:"))
        self.alerts: list[Alert] = []
        self.epochs: list[EpochResult] = []
        self.summaries: list[dict] = []
        self._boundary: int | None = None
        self._pending_events = list(inputs.events)
        self._dirty = False

    def feed(self, record: FlowRecord) -> list[EpochResult]:
        closed: list[EpochResult] = []
        if self._boundary is None:
            self._boundary = record.timestamp + self.config.epoch
        while record.timestamp >= self._boundary:
            closed.append(self._close())
        self.records.append(record)
        self._dirty = True
        return closed

    def flush(self) -> list[EpochResult]:
        """Close the current partial epoch, if it holds unprocessed records."""
        if not self._dirty or self._boundary is None:
            return []
        return [self._close()]

    def _close(self) -> EpochResult:
        at = self._boundary - 1
        index = len(self.epochs) + 1
        self._boundary += self.config.epoch
        self._dirty = False
        if not self.records:
            raise ConfigError("epoch closed before any record arrived")
        snap = analyze(self.records, self.inputs, self.config, at=at, strict=False)
        alerts = self.monitor.observe(at, snap.assessments)
        events: dict[str, list[Event]] = {}
        while self._pending_events and self._pending_events[0][1] <= at:
            device, _, ev = self._pending_events.pop(0)
            events.setdefault(device, []).append(ev)
        transitions = []
        for did in sorted(set(snap.graph.of_kind(EntityKind.DEVICE)) | set(events)):
            t = self.tracker.observe(did, snap.metrics(did), at, events.get(did, ()))
            if t is not None:
                transitions.append(t)
        result = EpochResult(index, at, len(self.records), snap, alerts, transitions)
        self.alerts.extend(alerts)
        self.epochs.append(result)
        self.summaries.append(result.summary(self.tracker))
        return result

    @property
    def last(self) -> Snapshot | None:
        return self.epochs[-1].snapshot if self.epochs else None


@dataclass
class PipelineResult:
    snapshot: Snapshot
    alerts: list[Alert]
    transitions: list[Transition]
    states: dict[str, SecurityState]
    summaries: list[dict]
    recommendations: list[ActionRecommendation]


def recommend_all(snapshot: Snapshot, thresholds: RiskThresholds, flags: Iterable[str] = ()) -> list[ActionRecommendation]:
    flags = tuple(flags)
    out = []
    for eid in snapshot.graph.ids():
        m = snapshot.metrics(eid)
        risk = classify_risk(m.s, m.v, m.dc, thresholds)
        out.append(recommend_actions(risk, eid, snapshot.graph.entity(eid).kind.value, flags))
    return out


def run_pipeline(records: Iterable[FlowRecord], inputs: PipelineInputs, config: RunConfig) -> PipelineResult:
    """Replay *records* in time order through the epoch watcher."""
    watcher = Watcher(inputs, config)
    for r in sorted(records, key=FlowRecord.sort_key):
        watcher.feed(r)
    watcher.flush()
    return finish(watcher)


def finish(watcher: Watcher) -> PipelineResult:
    snap = watcher.last
    if snap is None:
        raise ConfigError("no epochs were processed")
    states = {d: watcher.tracker.state(d) for d in sorted(watcher.tracker.timelines)}
    return PipelineResult(
        snap, list(watcher.alerts), watcher.tracker.all_transitions(), states, list(watcher.summaries),
        recommend_all(snap, watcher.config.thresholds),
    )


# -- outputs ----------------------------------------------------------------

OUTPUT_FILES = {
    "graph": "graph.ndjson",
    "sensitivity": "sensitivity.ndjson",
    "vulnerability": "vulnerability.ndjson",
    "rank_meta": "rank_meta.json",
    "assessments": "assessments.ndjson",
    "alerts": "alerts.ndjson",
    "timeline": "timeline.ndjson",
    "epochs": "epochs.ndjson",
    "recommendations": "recommendations.ndjson",
}


def write_rank_outputs(out: Path, graph: EntityGraph, sensitivity: RankVector, vulnerability: RankVector) -> None:
    write_graph(out / OUTPUT_FILES["graph"], graph)
    write_rank(out / OUTPUT_FILES["sensitivity"], sensitivity, "sensitivity")
    write_rank(out / OUTPUT_FILES["vulnerability"], vulnerability, "vulnerability")
    meta = {"sensitivity": rank_meta(sensitivity), "vulnerability": rank_meta(vulnerability)}
    (out / OUTPUT_FILES["rank_meta"]).write_text(json.dumps(meta, sort_keys=True) + "\n", encoding="utf-8")


def write_recommendations(path: Path, recs: Iterable[ActionRecommendation]) -> int:
    return write_lines(path, (r.to_dict() for r in recs))


def write_pipeline_outputs(out_dir: str | Path, result: PipelineResult) -> dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    snap = result.snapshot
    write_rank_outputs(out, snap.graph, snap.sensitivity, snap.vulnerability)
    write_assessments(out / OUTPUT_FILES["assessments"], snap.assessments)
    write_alerts(out / OUTPUT_FILES["alerts"], result.alerts)
    write_timeline(out / OUTPUT_FILES["timeline"], result.transitions)
    write_lines(out / OUTPUT_FILES["epochs"], result.summaries)
    write_recommendations(out / OUTPUT_FILES["recommendations"], result.recommendations)
    return {k: out / v for k, v in OUTPUT_FILES.items()}

