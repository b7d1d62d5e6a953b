"""Threshold monitoring, breach reports and behavioral anomaly flaggers."""
from __future__ import annotations

import enum
import math
import statistics
from bisect import bisect_left
from collections import Counter, defaultdict
from dataclasses import dataclass
from fnmatch import fnmatchcase
from pathlib import Path
from typing import Callable, Iterable, Iterator, Mapping

from .compromise import CompromiseAssessment
from .errors import ConfigError, NotFoundError, ValidationError
from .flow_model import EntityGraph, FlowRecord, app_id, device_id
from .ndjson import fmt12, write_lines
from .state_machine import Transition


@dataclass(frozen=True)
class Alert:
    device: str
    at: int
    dc: float
    threshold: float
    top_contributors: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if not self.dc > self.threshold:
            raise ValidationError(f"alert for {self.device!r} with dc {self.dc} <= threshold {self.threshold}")

    def to_dict(self) -> dict:
        return {"alert": {"device": self.device, "at": self.at, "dc": fmt12(self.dc),
                          "threshold": self.threshold, "top_contributors": list(self.top_contributors)}}


class Monitor:
    """Edge-triggered threshold watch: one alert per upward crossing."""

    def __init__(self, threshold: float, select: Iterable[str] | Callable[[str], bool] | None = None) -> None:
        if not threshold > 0:
            raise ConfigError(f"alert threshold must be > 0, got {threshold}")
        self.threshold = threshold
        if select is None or callable(select):
            self._select = select
        else:
            self._select = frozenset(select).__contains__
        self._above: dict[str, bool] = {}

    def observe(self, at: int, assessments: Mapping[str, CompromiseAssessment]) -> list[Alert]:
        alerts = []
        for eid in sorted(assessments):
            if self._select is not None and not self._select(eid):
                continue
            a = assessments[eid]
            above = a.dc > self.threshold
            if above and not self._above.get(eid, False):
                contributors = sorted(
                    (c for c in a.contributing_children if c in assessments),
                    key=lambda c: (-assessments[c].dc, c),
                )
                alerts.append(Alert(eid, at, a.dc, self.threshold, tuple(contributors)))
            self._above[eid] = above
        return alerts


def monitor(
    epochs: Iterable[tuple[int, Mapping[str, CompromiseAssessment]]],
    threshold: float,
    select: Iterable[str] | Callable[[str], bool] | None = None,
) -> Iterator[Alert]:
    """Stream alerts from ``(at, assessments)`` epochs."""
    watch = Monitor(threshold, select)
    for at, assessments in epochs:
        yield from watch.observe(at, assessments)


# -- breach reports ---------------------------------------------------------

class Category(str, enum.Enum):
    MONETARY = "Monetary"
    POLITICAL = "Political"
    SOCIAL = "Social"
    PRIVATE = "Private"
    UNKNOWN = "Unknown"


@dataclass(frozen=True)
class CategoryRules:
    """Ordered hostname glob rules; first match wins."""

    rules: tuple[tuple[str, Category], ...] = ()

    def categorize(self, host: str) -> Category:
        for pattern, category in self.rules:
            if fnmatchcase(host, pattern):
                return category
        return Category.UNKNOWN

    @classmethod
    def parse(cls, text: str, source: str = "<categories>") -> CategoryRules:
        rules = []
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.rstrip("\r\n")
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            pattern, sep, name = line.partition("\t")
            if not sep:
                raise ConfigError(f"{source}:{lineno}: expected 'pattern<TAB>category'")
            try:
                rules.append((pattern.strip(), Category(name.strip())))
            except ValueError:
                raise ConfigError(f"{source}:{lineno}: unknown category {name.strip()!r}") from None
        return cls(tuple(rules))


def load_category_rules(path: str | Path) -> CategoryRules:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc.strerror}") from None
    return CategoryRules.parse(text, str(path))


@dataclass(frozen=True)
class EndpointRow:
    host: str
    flow_count: int
    total_bytes: int
    total_duration: float
    category: Category = Category.UNKNOWN


@dataclass(frozen=True)
class BreachReport:
    device: str
    window: tuple[int, int]
    endpoints: tuple[EndpointRow, ...]
    categories: Mapping[Category, int]
    state_excerpt: tuple[Transition, ...] = ()

    def export_lines(self) -> list[dict]:
        lines: list[dict] = [{"report": {
            "device": self.device,
            "window": list(self.window),
            "categories": {c.value: n for c, n in sorted(self.categories.items(), key=lambda kv: kv[0].value)},
        }}]
        for row in self.endpoints:
            lines.append({"endpoint": {"host": row.host, "flow_count": row.flow_count,
                                       "total_bytes": row.total_bytes,
                                       "total_duration": fmt12(row.total_duration),
                                       "category": row.category.value}})
        lines.extend({"transition": t.to_dict()} for t in self.state_excerpt)
        return lines


def breach_report(
    records: Iterable[FlowRecord],
    device: str,
    window: tuple[int, int],
    categories: CategoryRules | None = None,
    timeline: Iterable[Transition] = (),
    graph: EntityGraph | None = None,
) -> BreachReport:
    """Aggregate *device*'s in-window flows per endpoint (inclusive window)."""
    start, end = window
    if start > end:
        raise ValidationError(f"window start {start} is after end {end}")
    categories = categories or CategoryRules()
    records = list(records)
    known = any(device_id(r.src_device) == device for r in records)
    if not known and (graph is None or device not in graph):
        raise NotFoundError(f"unknown device {device!r}")

    rows: dict[str, list] = {}
    for r in sorted(records, key=FlowRecord.sort_key):
        if device_id(r.src_device) != device or not start <= r.timestamp <= end:
            continue
        row = rows.setdefault(r.dst_host, [0, 0, 0.0])
        row[0] += 1
        row[1] += r.total_bytes
        row[2] += r.duration
    endpoints = sorted(
        (EndpointRow(h, c, b, d, categories.categorize(h)) for h, (c, b, d) in rows.items()),
        key=lambda e: (-e.total_bytes, e.host),
    )
    counts = Counter(e.category for e in endpoints)
    excerpt = tuple(t for t in timeline if t.device == device and start <= t.at <= end)
    return BreachReport(device, (start, end), tuple(endpoints), dict(counts), excerpt)


# -- anomaly flaggers -------------------------------------------------------

@dataclass(frozen=True)
class FlaggerParams:
    min_beacons: int = 10
    min_beacon_interval: float = 5.0
    max_beacon_cv: float = 0.05
    burst_warmup: float = 600.0
    burst_window: float = 300.0
    burst_min_hosts: int = 5
    spike_window: float = 600.0
    spike_min_count: int = 5
    spike_factor: float = 3.0


def _entity_keys(r: FlowRecord) -> list[str]:
    keys = [device_id(r.src_device)]
    if r.src_app is not None:
        keys.append(app_id(r.src_device, r.src_app))
    return keys


def is_beaconing(timestamps: list[int], params: FlaggerParams = FlaggerParams()) -> bool:
    """Regular inter-arrival times: many flows with a low coefficient of variation."""
    if len(timestamps) < params.min_beacons:
        return False
    ts = sorted(timestamps)
    gaps = [b - a for a, b in zip(ts, ts[1:])]
    mean = statistics.fmean(gaps)
    if mean < params.min_beacon_interval:
        return False
    return statistics.pstdev(gaps) / mean <= params.max_beacon_cv


def has_endpoint_burst(first_contacts: list[int], active_since: int, params: FlaggerParams = FlaggerParams()) -> bool:
    """Several hosts contacted for the first time within a short window, after warm-up."""
    late = sorted(t for t in first_contacts if t - active_since >= params.burst_warmup)
    for k, t in enumerate(late):
        j = bisect_left(late, t + params.burst_window, lo=k)
        if j - k >= params.burst_min_hosts:
            return True
    return False


def has_ad_spike(ad_times: list[int], active_since: int, now: int, params: FlaggerParams = FlaggerParams()) -> bool:
    """Recent ad-fetch rate well above the entity's own earlier rate."""
    cut = now - params.spike_window
    recent = sum(1 for t in ad_times if t > cut)
    if recent < params.spike_min_count:
        return False
    earlier = len(ad_times) - recent
    baseline_span = cut - active_since
    if baseline_span <= 0:
        return False
    if earlier == 0:
        return True
    return recent / params.spike_window > params.spike_factor * earlier / baseline_span


def flag_anomalies(records: Iterable[FlowRecord], params: FlaggerParams = FlaggerParams()) -> dict[str, set[str]]:
    """Run the built-in flaggers over devices and apps; only flagged ids are returned."""
    pair_times: dict[tuple[str, str], list[int]] = defaultdict(list)
    first_contact: dict[str, dict[str, int]] = defaultdict(dict)
    active_since: dict[str, int] = {}
    ad_times: dict[str, list[int]] = defaultdict(list)
    now = -math.inf
    for r in sorted(records, key=FlowRecord.sort_key):
        now = max(now, r.timestamp)
        for key in _entity_keys(r):
            pair_times[(key, r.dst_host)].append(r.timestamp)
            first_contact[key].setdefault(r.dst_host, r.timestamp)
            active_since.setdefault(key, r.timestamp)
            if r.is_ad_fetch:
                ad_times[key].append(r.timestamp)

    flagged: dict[str, set[str]] = defaultdict(set)
    for (key, _host), times in sorted(pair_times.items()):
        if is_beaconing(times, params):
            flagged[key].add("beaconing")
    for key, hosts in sorted(first_contact.items()):
        if has_endpoint_burst(list(hosts.values()), active_since[key], params):
            flagged[key].add("new_endpoint_burst")
    for key, times in sorted(ad_times.items()):
        if has_ad_spike(times, active_since[key], int(now), params):
            flagged[key].add("ad_click_spike")
    return dict(flagged)


def write_alerts(path: str | Path, alerts: Iterable[Alert]) -> int:
    return write_lines(path, (a.to_dict() for a in alerts))
