"""Per-device security state machine and its append-only transition timeline.

States are Protected, Vulnerable, Compromised and Recovering. :func:`step`
applies a fixed rule table in priority order; crossing the degree-of-compromise
threshold always wins. Compromised is sticky until a cleaning event moves the
device to Recovering.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Mapping

from .errors import ConfigError, IntegrityError, ParseError
from .ndjson import fmt12, iter_objects, write_lines


class SecurityState(str, enum.Enum):
    PROTECTED = "Protected"
    VULNERABLE = "Vulnerable"
    COMPROMISED = "Compromised"
    RECOVERING = "Recovering"


INITIAL_STATE = SecurityState.PROTECTED


class Cause(str, enum.Enum):
    THRESHOLD_V = "ThresholdV"
    THRESHOLD_DC = "ThresholdDC"
    CLEAN_EVENT = "CleanEvent"
    RECOVERY_COMPLETE = "RecoveryComplete"
    MANUAL_OVERRIDE = "ManualOverride"


class EventKind(str, enum.Enum):
    CLEAN = "Clean"
    MANUAL_OVERRIDE = "ManualOverride"


@dataclass(frozen=True)
class Event:
    kind: EventKind
    annotation: str = ""
    target: SecurityState | None = None  # ManualOverride only

    @classmethod
    def clean(cls, annotation: str = "") -> Event:
        return cls(EventKind.CLEAN, annotation)

    @classmethod
    def override(cls, target: SecurityState, annotation: str = "") -> Event:
        return cls(EventKind.MANUAL_OVERRIDE, annotation, target)


@dataclass(frozen=True)
class Metrics:
    s: float = 0.0
    v: float = 0.0
    dc: float = 0.0


@dataclass(frozen=True)
class StateThresholds:
    v: float
    dc: float

    def __post_init__(self) -> None:
        if not 0.0 < self.v < 1.0:
            raise ConfigError(f"vulnerability threshold must be in (0,1), got {self.v}")
        if not self.dc > 0.0:
            raise ConfigError(f"degree-of-compromise threshold must be > 0, got {self.dc}")


ALLOWED_TRANSITIONS: Mapping[SecurityState, frozenset[SecurityState]] = {
    s: frozenset(t for t in SecurityState if t is not s) for s in SecurityState
}


@dataclass(frozen=True)
class Transition:
    device: str
    from_state: SecurityState
    to_state: SecurityState
    at: int
    cause: Cause
    metrics: Metrics = field(default_factory=Metrics)
    annotation: str = ""

    def __post_init__(self) -> None:
        if self.to_state not in ALLOWED_TRANSITIONS[self.from_state]:
            raise IntegrityError(f"{self.device}: transition {self.from_state.value} -> {self.to_state.value} not allowed")

    def to_dict(self) -> dict:
        return {
            "device": self.device,
            "from": self.from_state.value,
            "to": self.to_state.value,
            "at": self.at,
            "cause": self.cause.value,
            "metrics": {"s": fmt12(self.metrics.s), "v": fmt12(self.metrics.v), "dc": fmt12(self.metrics.dc)},
            "annotation": self.annotation,
        }

    @classmethod
    def from_dict(cls, obj: Mapping) -> Transition:
        m = obj.get("metrics", {})
        return cls(
            obj["device"], SecurityState(obj["from"]), SecurityState(obj["to"]), int(obj["at"]),
            Cause(obj["cause"]), Metrics(float(m.get("s", 0)), float(m.get("v", 0)), float(m.get("dc", 0))),
            str(obj.get("annotation", "")),
        )


def _decide(
    current: SecurityState, m: Metrics, events: frozenset[Event], th: StateThresholds
) -> tuple[SecurityState, Cause, str] | None:
    if m.dc > th.dc:
        return SecurityState.COMPROMISED, Cause.THRESHOLD_DC, ""
    for ev in sorted(events, key=lambda e: (e.kind.value, e.annotation, e.target.value if e.target else "")):
        if ev.kind is EventKind.MANUAL_OVERRIDE and ev.target is not None:
            return ev.target, Cause.MANUAL_OVERRIDE, ev.annotation
    if current is SecurityState.COMPROMISED:
        cleans = sorted(e.annotation for e in events if e.kind is EventKind.CLEAN)
        if cleans:
            return SecurityState.RECOVERING, Cause.CLEAN_EVENT, "; ".join(a for a in cleans if a)
        return None
    if current is SecurityState.RECOVERING:
        target = SecurityState.PROTECTED if m.v <= th.v else SecurityState.VULNERABLE
        return target, Cause.RECOVERY_COMPLETE, ""
    if current is SecurityState.PROTECTED and m.v > th.v:
        return SecurityState.VULNERABLE, Cause.THRESHOLD_V, ""
    if current is SecurityState.VULNERABLE and m.v <= th.v:
        return SecurityState.PROTECTED, Cause.THRESHOLD_V, ""
    return None


def step(
    current: SecurityState,
    metrics: Metrics,
    events: Iterable[Event],
    thresholds: StateThresholds,
    *,
    device: str = "",
    at: int = 0,
) -> tuple[SecurityState, Transition | None]:
    """Apply one evaluation of the rule table.

    Priority: DC above threshold -> Compromised; manual override; clean event
    while Compromised -> Recovering; Recovering settles to Protected or
    Vulnerable by V; Protected/Vulnerable follow the V threshold. No
    transition is emitted when the state stays the same.
    """
    decision = _decide(current, metrics, frozenset(events), thresholds)
    if decision is None or decision[0] is current:
        return current, None
    target, cause, note = decision
    return target, Transition(device, current, target, at, cause, metrics, note)


class SecurityTimeline:
    """Append-only, chain-checked list of transitions for one device."""

    def __init__(self, device: str, transitions: Iterable[Transition] = ()) -> None:
        self.device = device
        self._items: list[Transition] = []
        for t in transitions:
            self.append(t)

    def append(self, t: Transition) -> None:
        if t.device != self.device:
            raise IntegrityError(f"transition for {t.device!r} appended to timeline of {self.device!r}")
        expected = self._items[-1].to_state if self._items else INITIAL_STATE
        if t.from_state is not expected:
            raise IntegrityError(
                f"{self.device}: broken chain at t={t.at}: from {t.from_state.value}, expected {expected.value}"
            )
        if self._items and t.at <= self._items[-1].at:
            raise IntegrityError(f"{self.device}: timestamps must strictly increase (t={t.at})")
        self._items.append(t)

    @property
    def state(self) -> SecurityState:
        return self._items[-1].to_state if self._items else INITIAL_STATE

    def __iter__(self) -> Iterator[Transition]:
        return iter(self._items)

    def __len__(self) -> int:
        return len(self._items)

    def between(self, start: int, end: int) -> list[Transition]:
        return [t for t in self._items if start <= t.at <= end]


def replay(transitions: Iterable[Transition]) -> SecurityState:
    """Final state after applying *transitions* in order from Protected."""
    state = INITIAL_STATE
    last_at: int | None = None
    for t in transitions:
        if t.from_state is not state:
            raise IntegrityError(f"{t.device}: broken chain at t={t.at}: from {t.from_state.value}, expected {state.value}")
        if last_at is not None and t.at <= last_at:
            raise IntegrityError(f"{t.device}: timestamps must strictly increase (t={t.at})")
        state, last_at = t.to_state, t.at
    return state


class StateTracker:
    """Live states plus timelines for many devices."""

    def __init__(self, thresholds: StateThresholds) -> None:
        self.thresholds = thresholds
        self.timelines: dict[str, SecurityTimeline] = {}

    def state(self, device: str) -> SecurityState:
        tl = self.timelines.get(device)
        return tl.state if tl else INITIAL_STATE

    def observe(self, device: str, metrics: Metrics, at: int, events: Iterable[Event] = ()) -> Transition | None:
        tl = self.timelines.setdefault(device, SecurityTimeline(device))
        _, transition = step(tl.state, metrics, events, self.thresholds, device=device, at=at)
        if transition is not None:
            tl.append(transition)
        return transition

    def all_transitions(self) -> list[Transition]:
        out = [t for d in sorted(self.timelines) for t in self.timelines[d]]
        return sorted(out, key=lambda t: (t.at, t.device))

    @classmethod
    def from_transitions(cls, thresholds: StateThresholds, transitions: Iterable[Transition]) -> StateTracker:
        tracker = cls(thresholds)
        for t in transitions:
            tracker.timelines.setdefault(t.device, SecurityTimeline(t.device)).append(t)
        return tracker


def write_timeline(path: str | Path, transitions: Iterable[Transition]) -> int:
    return write_lines(path, (t.to_dict() for t in transitions))


def load_timeline(path: str | Path) -> list[Transition]:
    """Read transitions and verify every per-device chain."""
    out: list[Transition] = []
    for lineno, obj in iter_objects(path):
        try:
            out.append(Transition.from_dict(obj))
        except (KeyError, TypeError, ValueError) as exc:
            raise ParseError(f"bad transition line: {exc}", lineno, str(path)) from None
    by_device: dict[str, list[Transition]] = {}
    for t in out:
        by_device.setdefault(t.device, []).append(t)
    for items in by_device.values():
        replay(items)
    return out
