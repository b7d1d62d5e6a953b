"""``flowsec`` command line: ingest, rank, assess, state, watch, report, recommend, simulate.

Commands share a working directory (``--out``); each stage reads the files the
previous stage wrote there. Exit codes: 0 success, 1 input error,
2 rank non-convergence, 3 timeline integrity error.
"""
from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path
from typing import Sequence

from . import __version__
from .actions import INFRASTRUCTURE_COMPROMISED, classify_risk, recommend_actions
from .compromise import (
    compute_degree_of_compromise,
    evidence_from_flags,
    load_assessments,
    load_evidence,
    merge_evidence,
    write_assessments,
)
from .errors import ConfigError, FlowsecError, IntegrityError, ParseError, SchemaError, ValidationError
from .flow_model import (
    EntityGraph,
    EntityKind,
    iter_flow_log,
    load_graph,
    load_rules,
    read_flow_log,
    record_from_dict,
    resolve_entities,
    write_graph,
)
from .forensics import breach_report, flag_anomalies, load_category_rules
from .ndjson import dumps, fmt12, write_lines
from .pipeline import (
    OUTPUT_FILES,
    PipelineInputs,
    RunConfig,
    Watcher,
    finish,
    load_events,
    load_run_config,
    write_pipeline_outputs,
    write_rank_outputs,
    write_recommendations,
)
from .sensitivity import RankVector, compute_sensitivity_rank, load_profiles, load_rank
from .simgen import Scenario, ScenarioConfig, generate_trace, write_scenario
from .state_machine import Metrics, StateTracker, load_timeline, write_timeline
from .vulnerability import compute_vulnerability_rank, load_vuln_annotations

EXIT_OK, EXIT_INPUT, EXIT_NONCONVERGED, EXIT_INTEGRITY = 0, 1, 2, 3


class NonConvergence(FlowsecError):
    pass


def _config(args: argparse.Namespace) -> RunConfig:
    overrides = {
        "flows": getattr(args, "flows", None),
        "rules": getattr(args, "rules", None),
        "annotations": getattr(args, "annotations", None),
        "evidence": getattr(args, "evidence", None),
        "profiles": getattr(args, "profiles", None),
        "categories": getattr(args, "categories", None),
        "events": getattr(args, "events", None),
        "out": getattr(args, "out", None),
        "threshold_s": args.threshold_s,
        "threshold_v": args.threshold_v,
        "threshold_c": args.threshold_c,
        "epoch": getattr(args, "epoch", None),
        "max_iterations": args.max_iterations,
    }
    cfg = load_run_config(args.config, overrides)
    for key in ("flows", "rules", "annotations", "evidence", "profiles", "categories", "events"):
        path = cfg.paths.get(key)
        if path and not Path(path).is_file():
            raise ConfigError(f"{key} file not found: {path}")
    return cfg


def _out_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.paths.get("out", "."))
    out.mkdir(parents=True, exist_ok=True)
    return out


def _graph(cfg: RunConfig, out: Path) -> EntityGraph:
    """Graph from --flows when given, else the export left by ``ingest``."""
    if cfg.paths.get("flows"):
        rules = load_rules(cfg.paths["rules"]) if cfg.paths.get("rules") else None
        graph = resolve_entities(read_flow_log(cfg.paths["flows"]), rules)
        write_graph(out / OUTPUT_FILES["graph"], graph)
        return graph
    path = out / OUTPUT_FILES["graph"]
    if not path.is_file():
        raise ConfigError(f"no --flows given and no graph export at {path}; run 'ingest' first")
    return load_graph(path)


def _stored_ranks(out: Path) -> tuple[RankVector, RankVector]:
    meta_path = out / OUTPUT_FILES["rank_meta"]
    for key in ("sensitivity", "vulnerability"):
        if not (out / OUTPUT_FILES[key]).is_file():
            raise ConfigError(f"missing {out / OUTPUT_FILES[key]}; run 'rank' first")
    meta = json.loads(meta_path.read_text(encoding="utf-8")) if meta_path.is_file() else {}
    s = load_rank(out / OUTPUT_FILES["sensitivity"], "sensitivity", meta.get("sensitivity"))
    v = load_rank(out / OUTPUT_FILES["vulnerability"], "vulnerability", meta.get("vulnerability"))
    return s, v


def _emit(lines) -> None:
    for obj in lines:
        sys.stdout.write(dumps(obj) + "\n")


# -- commands ---------------------------------------------------------------

def cmd_ingest(args: argparse.Namespace) -> int:
    cfg = _config(args)
    if not cfg.paths.get("flows"):
        raise ConfigError("ingest needs --flows")
    out = _out_dir(cfg)
    graph = _graph(cfg, out)
    print(f"wrote {out / OUTPUT_FILES['graph']}: {len(graph)} nodes, {len(graph.edges())} edges")
    return EXIT_OK


def cmd_rank(args: argparse.Namespace) -> int:
    cfg = _config(args)
    out = _out_dir(cfg)
    graph = _graph(cfg, out)
    profiles = load_profiles(cfg.paths["profiles"]) if cfg.paths.get("profiles") else {}
    s = compute_sensitivity_rank(graph, profiles, cfg.params)
    vg = load_vuln_annotations(graph, cfg.paths.get("annotations"), cfg.params)
    v = compute_vulnerability_rank(vg, cfg.params)
    write_rank_outputs(out, graph, s, v)
    _emit({"entity": eid, "sensitivity": fmt12(s.values[eid]), "vulnerability": fmt12(v.values[eid])}
          for eid in graph.ids())
    for name, rv in (("sensitivity", s), ("vulnerability", v)):
        if not rv.converged:
            raise NonConvergence(f"{name} rank did not converge in {rv.iterations_used} iterations "
                                 f"(residual {rv.residual:.3g})")
    return EXIT_OK


def cmd_assess(args: argparse.Namespace) -> int:
    cfg = _config(args)
    out = _out_dir(cfg)
    graph = _graph(cfg, out)
    s, v = _stored_ranks(out)
    if not (s.converged and v.converged):
        raise NonConvergence("stored ranks are not converged; rerun 'rank'")
    evidence = load_evidence(cfg.paths["evidence"]) if cfg.paths.get("evidence") else {}
    if cfg.paths.get("flows"):
        flagged = flag_anomalies(read_flow_log(cfg.paths["flows"]), cfg.flagger)
        evidence = merge_evidence(evidence, evidence_from_flags(flagged, cfg.flag_weights))
    assessments = compute_degree_of_compromise(graph, s, v, evidence)
    write_assessments(out / OUTPUT_FILES["assessments"], assessments)
    _emit({"entity": a.entity_id, "p": fmt12(a.p), "dc": fmt12(a.dc)} for _, a in sorted(assessments.items()))
    return EXIT_OK


def cmd_state(args: argparse.Namespace) -> int:
    cfg = _config(args)
    out = _out_dir(cfg)
    graph = load_graph(out / OUTPUT_FILES["graph"])
    s, v = _stored_ranks(out)
    assessments_path = out / OUTPUT_FILES["assessments"]
    if not assessments_path.is_file():
        raise ConfigError(f"missing {assessments_path}; run 'assess' first")
    assessments = load_assessments(assessments_path)
    timeline_path = out / OUTPUT_FILES["timeline"]
    history = load_timeline(timeline_path) if timeline_path.is_file() else []
    tracker = StateTracker.from_transitions(cfg.state_thresholds, history)
    at = args.at if args.at is not None else graph.reference_time()
    events = load_events(cfg.paths["events"]) if cfg.paths.get("events") else []
    by_device: dict[str, list] = {}
    for device, ev_at, ev in events:
        if ev_at <= at:
            by_device.setdefault(device, []).append(ev)
    for did in graph.of_kind(EntityKind.DEVICE):
        a = assessments.get(did)
        tracker.observe(did, Metrics(s.get(did), v.get(did), a.dc if a else 0.0), at, by_device.get(did, ()))
    write_timeline(timeline_path, tracker.all_transitions())
    _emit({"device": d, "state": tracker.state(d).value} for d in sorted(tracker.timelines))
    return EXIT_OK


def _follow_lines(path: str, poll: float, idle_timeout: float):
    """Yield complete lines from a growing file until it stays idle for *idle_timeout*."""
    with open(path, encoding="utf-8") as fh:
        buffer = ""
        idle = 0.0
        while True:
            chunk = fh.readline()
            if chunk:
                idle = 0.0
                buffer += chunk
                if buffer.endswith("\n"):
                    yield buffer
                    buffer = ""
                continue
            if idle >= idle_timeout:
                if buffer.strip():
                    yield buffer
                return
            time.sleep(poll)
            idle += poll


def cmd_watch(args: argparse.Namespace) -> int:
    cfg = _config(args)
    if not cfg.paths.get("flows"):
        raise ConfigError("watch needs --flows")
    out = _out_dir(cfg)
    inputs = PipelineInputs.load(cfg.paths)
    watcher = Watcher(inputs, cfg)
    flows = cfg.paths["flows"]
    if args.follow:
        lineno = 0
        for line in _follow_lines(flows, args.poll_interval, args.idle_timeout):
            lineno += 1
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                if not isinstance(obj, dict):
                    raise ParseError("expected a JSON object", lineno, flows)
                record = record_from_dict(obj)
            except json.JSONDecodeError as exc:
                raise ParseError(f"malformed JSON at column {exc.colno}: {exc.msg}", lineno, flows) from None
            except (SchemaError, ValidationError) as exc:
                exc.args = (f"{flows}:{lineno}: {exc}",)
                raise
            _report_epochs(watcher.feed(record))
    else:
        for record in iter_flow_log(flows):
            _report_epochs(watcher.feed(record))
    _report_epochs(watcher.flush())
    if not watcher.epochs:
        raise ConfigError(f"{flows}: empty input")
    result = finish(watcher)
    write_pipeline_outputs(out, result)
    if not result.snapshot.converged:
        raise NonConvergence("ranks did not converge in the final epoch")
    return EXIT_OK


def _report_epochs(epochs) -> None:
    for ep in epochs:
        for alert in ep.alerts:
            sys.stdout.write(dumps(alert.to_dict()) + "\n")


def _window(text: str) -> tuple[int, int]:
    start, sep, end = text.partition(":")
    if not sep:
        raise argparse.ArgumentTypeError("window must be START:END")
    try:
        return int(start), int(end)
    except ValueError:
        raise argparse.ArgumentTypeError("window bounds must be integers") from None


def cmd_report(args: argparse.Namespace) -> int:
    cfg = _config(args)
    if not cfg.paths.get("flows"):
        raise ConfigError("report needs --flows")
    out = _out_dir(cfg)
    records = read_flow_log(cfg.paths["flows"])
    categories = load_category_rules(cfg.paths["categories"]) if cfg.paths.get("categories") else None
    timeline_path = out / OUTPUT_FILES["timeline"]
    timeline = load_timeline(timeline_path) if timeline_path.is_file() else []
    window = args.window or (min(r.timestamp for r in records), max(r.timestamp for r in records))
    report = breach_report(records, args.device, window, categories, timeline)
    lines = report.export_lines()
    write_lines(out / "report.ndjson", lines)
    _emit(lines)
    return EXIT_OK


def cmd_recommend(args: argparse.Namespace) -> int:
    cfg = _config(args)
    out = _out_dir(cfg)
    graph = load_graph(out / OUTPUT_FILES["graph"])
    s, v = _stored_ranks(out)
    a_path = out / OUTPUT_FILES["assessments"]
    assessments = load_assessments(a_path) if a_path.is_file() else {}
    flags = (INFRASTRUCTURE_COMPROMISED,) if args.infrastructure_compromised else ()
    ids = [args.entity] if args.entity else graph.ids()
    recs = []
    for eid in ids:
        kind = graph.entity(eid).kind.value
        a = assessments.get(eid)
        risk = classify_risk(s.get(eid), v.get(eid), a.dc if a else 0.0, cfg.thresholds)
        recs.append(recommend_actions(risk, eid, kind, flags))
    write_recommendations(out / OUTPUT_FILES["recommendations"], recs)
    _emit(r.to_dict() for r in recs)
    return EXIT_OK


def cmd_simulate(args: argparse.Namespace) -> int:
    out = Path(args.out or ".")
    trace = generate_trace(ScenarioConfig(
        seed=args.seed, duration=args.duration, devices=args.devices, apps_per_device=args.apps,
        scenario=Scenario(args.scenario),
    ))
    paths = write_scenario(out, trace)
    print(f"wrote {len(trace.records)} flows to {paths['flows']}")
    return EXIT_OK


# -- parser -----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="flowsec", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"flowsec {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="plain-text key = value configuration file")
    common.add_argument("--out", help="working/output directory (default: current directory)")
    common.add_argument("--threshold-s", dest="threshold_s", type=float)
    common.add_argument("--threshold-v", dest="threshold_v", type=float)
    common.add_argument("--threshold-c", dest="threshold_c", type=float)
    common.add_argument("--max-iterations", dest="max_iterations", type=int)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", parents=[common], help="build the entity graph export")
    p.add_argument("--flows")
    p.add_argument("--rules")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("rank", parents=[common], help="compute sensitivity and vulnerability ranks")
    p.add_argument("--flows")
    p.add_argument("--rules")
    p.add_argument("--annotations")
    p.add_argument("--profiles")
    p.set_defaults(func=cmd_rank)

    p = sub.add_parser("assess", parents=[common], help="compute compromise probability and degree")
    p.add_argument("--flows", help="also run the built-in behavioral flaggers over these flows")
    p.add_argument("--evidence")
    p.set_defaults(func=cmd_assess)

    p = sub.add_parser("state", parents=[common], help="advance device security states one step")
    p.add_argument("--events")
    p.add_argument("--at", type=int, help="evaluation timestamp (default: latest observation)")
    p.set_defaults(func=cmd_state)

    p = sub.add_parser("watch", parents=[common], help="replay or tail a flow log with epoch re-ranking")
    p.add_argument("--flows")
    p.add_argument("--rules")
    p.add_argument("--annotations")
    p.add_argument("--evidence")
    p.add_argument("--profiles")
    p.add_argument("--events")
    p.add_argument("--epoch", type=int, help="re-ranking cadence in flow-time seconds (default 60)")
    p.add_argument("--follow", action="store_true", help="keep reading as the file grows")
    p.add_argument("--poll-interval", type=float, default=0.5)
    p.add_argument("--idle-timeout", type=float, default=5.0)
    p.set_defaults(func=cmd_watch)

    p = sub.add_parser("report", parents=[common], help="breach report for one device")
    p.add_argument("--flows")
    p.add_argument("--categories")
    p.add_argument("--device", required=True, help="device entity id, e.g. dev:phone-1")
    p.add_argument("--window", type=_window, help="START:END timestamps, inclusive")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("recommend", parents=[common], help="risk level and protection actions")
    p.add_argument("--entity")
    p.add_argument("--infrastructure-compromised", action="store_true")
    p.set_defaults(func=cmd_recommend)

    p = sub.add_parser("simulate", help="write a synthetic scenario")
    p.add_argument("--out")
    p.add_argument("--scenario", choices=[s.value for s in Scenario], default=Scenario.BENIGN.value)
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--devices", type=int, default=5)
    p.add_argument("--apps", type=int, default=3, help="apps per device")
    p.add_argument("--duration", type=int, default=3600)
    p.set_defaults(func=cmd_simulate)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except NonConvergence as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NONCONVERGED
    except IntegrityError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INTEGRITY
    except (FlowsecError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
