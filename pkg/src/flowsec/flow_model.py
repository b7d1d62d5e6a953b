"""Flow records, entity resolution and the entity graph.

Flow logs are NDJSON: one parsed communication event per line. Resolution
turns them into a typed graph whose nodes are devices, the apps and operating
systems they contain, and the remote hosts they talk to. Edge statistics
aggregated here are the raw inputs for every rank weight downstream.

Entity ids are namespaced so a hostname can never collide with a device
name::

    dev:<device>            Device
    app:<device>/<app>      App, child of its device
    os:<device>/<os_name>   OperatingSystem, child of its device
    host:<dst_host>         Server, Website or AdNetwork
"""
from __future__ import annotations

import enum
import json
from collections import defaultdict
from dataclasses import dataclass, field
from fnmatch import fnmatchcase
from pathlib import Path
from typing import Iterable, Iterator, Mapping

from .errors import (
    ConfigError,
    EmptyInputError,
    NotFoundError,
    ParseError,
    SchemaError,
    StateError,
    ValidationError,
)
from .kvconfig import read_key_values
from .ndjson import iter_objects, write_lines


class Protocol(str, enum.Enum):
    HTTP = "HTTP"
    HTTPS = "HTTPS"
    DNS = "DNS"
    DHCP = "DHCP"
    RTP = "RTP"
    SRTP = "SRTP"
    OTHER = "OTHER"


ENCRYPTED_PROTOCOLS = frozenset({Protocol.HTTPS, Protocol.SRTP})


class EntityKind(str, enum.Enum):
    DEVICE = "Device"
    APP = "App"
    OPERATING_SYSTEM = "OperatingSystem"
    SERVER = "Server"
    AD_NETWORK = "AdNetwork"
    WEBSITE = "Website"
    USER = "User"


HOST_KINDS = frozenset({EntityKind.SERVER, EntityKind.AD_NETWORK, EntityKind.WEBSITE})


@dataclass(frozen=True)
class FlowRecord:
    timestamp: int
    src_device: str
    dst_host: str
    dst_port: int
    protocol: Protocol
    bytes_sent: int
    bytes_received: int
    encrypted: bool
    authenticated: bool
    is_ad_fetch: bool
    duration: float
    src_app: str | None = None
    os_name: str | None = None
    app_version: str | None = None

    def __post_init__(self) -> None:
        if self.timestamp < 0:
            raise ValidationError(f"timestamp must be >= 0, got {self.timestamp}")
        if self.bytes_sent < 0 or self.bytes_received < 0:
            raise ValidationError("byte counters must be >= 0")
        if self.duration < 0:
            raise ValidationError(f"duration must be >= 0, got {self.duration}")
        if not 0 <= self.dst_port <= 65535:
            raise ValidationError(f"dst_port out of range: {self.dst_port}")
        if self.protocol in ENCRYPTED_PROTOCOLS and not self.encrypted:
            raise ValidationError(f"{self.protocol.value} flows must be encrypted")
        if not self.src_device:
            raise ValidationError("src_device must be non-empty")
        if not self.dst_host:
            raise ValidationError("dst_host must be non-empty")

    @property
    def total_bytes(self) -> int:
        return self.bytes_sent + self.bytes_received

    def sort_key(self) -> tuple:
        return (
            self.timestamp,
            self.src_device,
            self.src_app or "",
            self.dst_host,
            self.dst_port,
            self.protocol.value,
            self.bytes_sent,
            self.bytes_received,
            self.duration,
            self.encrypted,
            self.authenticated,
            self.is_ad_fetch,
            self.os_name or "",
            self.app_version or "",
        )

    def to_dict(self) -> dict:
        out: dict = {
            "timestamp": self.timestamp,
            "src_device": self.src_device,
        }
        if self.src_app is not None:
            out["src_app"] = self.src_app
        out.update(
            dst_host=self.dst_host,
            dst_port=self.dst_port,
            protocol=self.protocol.value,
            bytes_sent=self.bytes_sent,
            bytes_received=self.bytes_received,
            encrypted=self.encrypted,
            authenticated=self.authenticated,
            is_ad_fetch=self.is_ad_fetch,
        )
        if self.os_name is not None:
            out["os_name"] = self.os_name
        if self.app_version is not None:
            out["app_version"] = self.app_version
        out["duration"] = self.duration
        return out


_INT_FIELDS = ("timestamp", "dst_port", "bytes_sent", "bytes_received")
_BOOL_FIELDS = ("encrypted", "authenticated", "is_ad_fetch")
_STR_FIELDS = ("src_device", "dst_host")
_OPTIONAL_STR_FIELDS = ("src_app", "os_name", "app_version")
REQUIRED_FIELDS = (
    "timestamp", "src_device", "dst_host", "dst_port", "protocol", "bytes_sent",
    "bytes_received", "encrypted", "authenticated", "is_ad_fetch", "duration",
)


def record_from_dict(obj: Mapping) -> FlowRecord:
    """Validate a decoded JSON object and build a :class:`FlowRecord`."""
    for name in REQUIRED_FIELDS:
        if name not in obj:
            raise SchemaError(name)
    values: dict = {}
    for name in _INT_FIELDS:
        v = obj[name]
        if isinstance(v, bool) or not isinstance(v, int):
            raise SchemaError(name, f"field {name!r} must be an integer")
        values[name] = v
    for name in _BOOL_FIELDS:
        v = obj[name]
        if not isinstance(v, bool):
            raise SchemaError(name, f"field {name!r} must be a boolean")
        values[name] = v
    for name in _STR_FIELDS:
        v = obj[name]
        if not isinstance(v, str):
            raise SchemaError(name, f"field {name!r} must be a string")
        values[name] = v
    for name in _OPTIONAL_STR_FIELDS:
        v = obj.get(name)
        if v is not None and not isinstance(v, str):
            raise SchemaError(name, f"field {name!r} must be a string or null")
        values[name] = v
    duration = obj["duration"]
    if isinstance(duration, bool) or not isinstance(duration, (int, float)):
        raise SchemaError("duration", "field 'duration' must be a number")
    values["duration"] = float(duration)
    proto = obj["protocol"]
    try:
        values["protocol"] = Protocol(proto)
    except ValueError:
        raise ValidationError(f"unknown protocol {proto!r}") from None
    return FlowRecord(**values)


def parse_flow_record(line: str, lineno: int | None = None) -> FlowRecord:
    """Parse one NDJSON line. Unknown keys are ignored."""
    try:
        obj = json.loads(line)
    except json.JSONDecodeError as exc:
        raise ParseError(f"malformed JSON at column {exc.colno}: {exc.msg}", lineno) from None
    if not isinstance(obj, dict):
        raise ParseError("expected a JSON object", lineno)
    return record_from_dict(obj)


def iter_flow_log(path: str | Path) -> Iterator[FlowRecord]:
    """Yield records from an NDJSON flow log, locating any error as ``path:line``."""
    for lineno, obj in iter_objects(path):
        try:
            yield record_from_dict(obj)
        except (SchemaError, ValidationError) as exc:
            exc.args = (f"{path}:{lineno}: {exc}",)
            exc.line = lineno  # type: ignore[attr-defined]
            raise


def read_flow_log(path: str | Path) -> list[FlowRecord]:
    records = list(iter_flow_log(path))
    if not records:
        raise EmptyInputError(f"{path}: empty input")
    return records


def write_flow_log(path: str | Path, records: Iterable[FlowRecord]) -> int:
    return write_lines(path, (r.to_dict() for r in records))


# -- entities ---------------------------------------------------------------

def device_id(device: str) -> str:
    return f"dev:{device}"


def app_id(device: str, app: str) -> str:
    return f"app:{device}/{app}"


def os_id(device: str, os_name: str) -> str:
    return f"os:{device}/{os_name}"


def host_id(host: str) -> str:
    return f"host:{host}"


@dataclass(frozen=True)
class Entity:
    id: str
    kind: EntityKind
    attributes: Mapping[str, str] = field(default_factory=dict)
    first_seen: int = 0
    last_seen: int = 0


@dataclass(frozen=True)
class EdgeStats:
    src: str
    dst: str
    flow_count: int
    total_bytes: int
    last_seen: int
    auth_fraction: float
    ad_fraction: float
    mean_duration: float
    first_seen: int = 0

    def __post_init__(self) -> None:
        if self.flow_count < 1:
            raise ValidationError(f"edge {self.src}->{self.dst}: flow_count must be >= 1")
        if self.total_bytes < 0:
            raise ValidationError(f"edge {self.src}->{self.dst}: total_bytes must be >= 0")
        for name in ("auth_fraction", "ad_fraction"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValidationError(f"edge {self.src}->{self.dst}: {name} must be in [0,1], got {v}")
        if self.mean_duration < 0:
            raise ValidationError(f"edge {self.src}->{self.dst}: mean_duration must be >= 0")


class EntityGraph:
    """Typed entity graph with communication edges and a containment forest.

    Built single-writer, then :meth:`freeze` makes it read-only; frozen graphs
    may be shared across threads.
    """

    def __init__(self) -> None:
        self._entities: dict[str, Entity] = {}
        self._edges: dict[tuple[str, str], EdgeStats] = {}
        self._out: dict[str, list[str]] = defaultdict(list)
        self._parent: dict[str, str] = {}
        self._children: dict[str, set[str]] = defaultdict(set)
        self._frozen = False

    # mutation
    def _check_mutable(self) -> None:
        if self._frozen:
            raise StateError("graph is frozen")

    def add_entity(self, entity: Entity) -> None:
        self._check_mutable()
        if entity.id in self._entities:
            raise ValidationError(f"duplicate entity id {entity.id!r}")
        self._entities[entity.id] = entity

    def add_edge(self, stats: EdgeStats) -> None:
        self._check_mutable()
        for end in (stats.src, stats.dst):
            if end not in self._entities:
                raise NotFoundError(f"edge endpoint {end!r} is not an entity")
        key = (stats.src, stats.dst)
        if key in self._edges:
            raise ValidationError(f"duplicate edge {stats.src}->{stats.dst}")
        self._edges[key] = stats
        self._out[stats.src].append(stats.dst)

    def set_parent(self, child: str, parent: str) -> None:
        """Attach *child* under *parent*, keeping containment a forest."""
        self._check_mutable()
        for end in (child, parent):
            if end not in self._entities:
                raise NotFoundError(f"unknown entity {end!r}")
        if child in self._parent:
            raise ValidationError(f"{child!r} already has parent {self._parent[child]!r}")
        node: str | None = parent
        while node is not None:
            if node == child:
                raise ValidationError(f"containment cycle through {child!r}")
            node = self._parent.get(node)
        self._parent[child] = parent
        self._children[parent].add(child)

    def freeze(self) -> EntityGraph:
        self._frozen = True
        return self

    @property
    def frozen(self) -> bool:
        return self._frozen

    # queries
    def __contains__(self, entity_id: object) -> bool:
        return entity_id in self._entities

    def __len__(self) -> int:
        return len(self._entities)

    def entity(self, entity_id: str) -> Entity:
        try:
            return self._entities[entity_id]
        except KeyError:
            raise NotFoundError(f"unknown entity {entity_id!r}") from None

    def ids(self) -> list[str]:
        return sorted(self._entities)

    def entities(self) -> list[Entity]:
        return [self._entities[i] for i in self.ids()]

    def of_kind(self, kind: EntityKind) -> list[str]:
        return [i for i in self.ids() if self._entities[i].kind is kind]

    def edges(self) -> list[EdgeStats]:
        return [self._edges[k] for k in sorted(self._edges)]

    def edge(self, src: str, dst: str) -> EdgeStats:
        try:
            return self._edges[(src, dst)]
        except KeyError:
            raise NotFoundError(f"no edge {src}->{dst}") from None

    def out_edges(self, entity_id: str) -> list[EdgeStats]:
        return [self._edges[(entity_id, d)] for d in sorted(self._out.get(entity_id, ()))]

    def parent(self, entity_id: str) -> str | None:
        self.entity(entity_id)
        return self._parent.get(entity_id)

    def children(self, entity_id: str) -> set[str]:
        self.entity(entity_id)
        return set(self._children.get(entity_id, ()))

    def roots(self) -> list[str]:
        return [i for i in self.ids() if i not in self._parent]

    def reference_time(self) -> int:
        """Latest observation in the graph; the default 'now' for weights."""
        times = [e.last_seen for e in self._edges.values()]
        times += [e.last_seen for e in self._entities.values()]
        return max(times, default=0)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, EntityGraph):
            return NotImplemented
        return (
            self._entities == other._entities
            and self._edges == other._edges
            and self._parent == other._parent
        )

    __hash__ = None  # type: ignore[assignment]


def containment_children(graph: EntityGraph, entity_id: str) -> set[str]:
    """Direct containment children of *entity_id* (empty for leaves)."""
    return graph.children(entity_id)


# -- resolution -------------------------------------------------------------

@dataclass(frozen=True)
class ResolutionRules:
    """Hostname glob patterns that override or refine host-kind voting."""

    ad_host_patterns: tuple[str, ...] = ()
    website_patterns: tuple[str, ...] = ()

    def host_kind(self, host: str, ad_votes: int, total: int) -> EntityKind:
        if any(fnmatchcase(host, p) for p in self.ad_host_patterns):
            return EntityKind.AD_NETWORK
        if 2 * ad_votes > total:
            return EntityKind.AD_NETWORK
        if any(fnmatchcase(host, p) for p in self.website_patterns):
            return EntityKind.WEBSITE
        return EntityKind.SERVER

    @classmethod
    def from_pairs(cls, pairs: Iterable[tuple[str, str]], source: str = "<rules>") -> ResolutionRules:
        ads: list[str] = []
        sites: list[str] = []
        for key, value in pairs:
            if key == "ad_host_pattern":
                ads.append(value)
            elif key == "website_pattern":
                sites.append(value)
            else:
                raise ConfigError(f"{source}: unknown rules key {key!r}")
        return cls(tuple(ads), tuple(sites))


def load_rules(path: str | Path) -> ResolutionRules:
    return ResolutionRules.from_pairs(read_key_values(path), str(path))


class _EdgeAcc:
    __slots__ = ("count", "bytes", "first", "last", "auth", "ads", "duration")

    def __init__(self) -> None:
        self.count = 0
        self.bytes = 0
        self.first: int | None = None
        self.last = 0
        self.auth = 0
        self.ads = 0
        self.duration = 0.0

    def add(self, r: FlowRecord) -> None:
        self.count += 1
        self.bytes += r.total_bytes
        self.first = r.timestamp if self.first is None else min(self.first, r.timestamp)
        self.last = max(self.last, r.timestamp)
        self.auth += r.authenticated
        self.ads += r.is_ad_fetch
        self.duration += r.duration

    def stats(self, src: str, dst: str) -> EdgeStats:
        return EdgeStats(
            src=src,
            dst=dst,
            flow_count=self.count,
            total_bytes=self.bytes,
            last_seen=self.last,
            auth_fraction=self.auth / self.count,
            ad_fraction=self.ads / self.count,
            mean_duration=self.duration / self.count,
            first_seen=self.first or 0,
        )


class _Span:
    __slots__ = ("first", "last", "attrs")

    def __init__(self) -> None:
        self.first: int | None = None
        self.last = 0
        self.attrs: dict[str, str] = {}

    def touch(self, ts: int) -> None:
        self.first = ts if self.first is None else min(self.first, ts)
        self.last = max(self.last, ts)


def resolve_entities(records: Iterable[FlowRecord], rules: ResolutionRules | None = None) -> EntityGraph:
    """Resolve flow records into a frozen :class:`EntityGraph`.

    The result does not depend on record order: records are sorted on their
    full field tuple before aggregation, so even floating-point sums are
    reproduced exactly.
    """
    rules = rules or ResolutionRules()
    ordered = sorted(records, key=FlowRecord.sort_key)
    if not ordered:
        raise EmptyInputError("empty input: no flow records")

    devices: dict[str, _Span] = defaultdict(_Span)
    apps: dict[str, _Span] = defaultdict(_Span)
    systems: dict[str, _Span] = defaultdict(_Span)
    hosts: dict[str, _Span] = defaultdict(_Span)
    host_votes: dict[str, list[int]] = defaultdict(lambda: [0, 0])
    parents: dict[str, str] = {}
    edges: dict[tuple[str, str], _EdgeAcc] = defaultdict(_EdgeAcc)

    for r in ordered:
        dev = device_id(r.src_device)
        dspan = devices[dev]
        dspan.touch(r.timestamp)
        dspan.attrs["name"] = r.src_device
        if r.os_name is not None:
            dspan.attrs["os_name"] = r.os_name
            oid = os_id(r.src_device, r.os_name)
            ospan = systems[oid]
            ospan.touch(r.timestamp)
            ospan.attrs["name"] = r.os_name
            parents[oid] = dev

        hid = host_id(r.dst_host)
        hspan = hosts[hid]
        hspan.touch(r.timestamp)
        hspan.attrs["host"] = r.dst_host
        votes = host_votes[hid]
        votes[0] += r.is_ad_fetch
        votes[1] += 1

        edges[(dev, hid)].add(r)
        if r.src_app is not None:
            aid = app_id(r.src_device, r.src_app)
            aspan = apps[aid]
            aspan.touch(r.timestamp)
            aspan.attrs["name"] = r.src_app
            if r.app_version is not None:
                aspan.attrs["app_version"] = r.app_version
            parents[aid] = dev
            edges[(aid, hid)].add(r)

    graph = EntityGraph()

    def add(spans: dict[str, _Span], kind_of) -> None:
        for eid in sorted(spans):
            span = spans[eid]
            graph.add_entity(Entity(eid, kind_of(eid), dict(sorted(span.attrs.items())), span.first or 0, span.last))

    add(devices, lambda _: EntityKind.DEVICE)
    add(apps, lambda _: EntityKind.APP)
    add(systems, lambda _: EntityKind.OPERATING_SYSTEM)
    add(hosts, lambda eid: rules.host_kind(eid[len("host:"):], *host_votes[eid]))
    for child in sorted(parents):
        graph.set_parent(child, parents[child])
    for key in sorted(edges):
        graph.add_edge(edges[key].stats(*key))
    return graph.freeze()


# -- export -----------------------------------------------------------------

def graph_export_lines(graph: EntityGraph) -> list[dict]:
    lines: list[dict] = []
    for e in graph.entities():
        lines.append({"node": {
            "id": e.id,
            "kind": e.kind.value,
            "parent": graph.parent(e.id),
            "first_seen": e.first_seen,
            "last_seen": e.last_seen,
            "attributes": dict(sorted(e.attributes.items())),
        }})
    for s in graph.edges():
        lines.append({"edge": {
            "src": s.src,
            "dst": s.dst,
            "flow_count": s.flow_count,
            "total_bytes": s.total_bytes,
            "first_seen": s.first_seen,
            "last_seen": s.last_seen,
            "auth_fraction": s.auth_fraction,
            "ad_fraction": s.ad_fraction,
            "mean_duration": s.mean_duration,
        }})
    return lines


def write_graph(path: str | Path, graph: EntityGraph) -> int:
    return write_lines(path, graph_export_lines(graph))


def load_graph(path: str | Path) -> EntityGraph:
    """Rebuild a frozen graph from :func:`write_graph` output."""
    graph = EntityGraph()
    parents: list[tuple[str, str]] = []
    edge_rows: list[tuple[int, dict]] = []
    for lineno, obj in iter_objects(path):
        try:
            if "node" in obj:
                n = obj["node"]
                graph.add_entity(Entity(
                    n["id"], EntityKind(n["kind"]), dict(n.get("attributes", {})),
                    int(n.get("first_seen", 0)), int(n.get("last_seen", 0)),
                ))
                if n.get("parent") is not None:
                    parents.append((n["id"], n["parent"]))
            elif "edge" in obj:
                edge_rows.append((lineno, obj["edge"]))
            else:
                raise SchemaError("node", "expected a 'node' or 'edge' object")
        except (KeyError, ValueError, TypeError) as exc:
            raise ParseError(f"bad graph line: {exc}", lineno, str(path)) from None
    for child, parent in parents:
        graph.set_parent(child, parent)
    for lineno, e in edge_rows:
        try:
            graph.add_edge(EdgeStats(
                src=e["src"], dst=e["dst"], flow_count=int(e["flow_count"]),
                total_bytes=int(e["total_bytes"]), last_seen=int(e["last_seen"]),
                auth_fraction=float(e["auth_fraction"]), ad_fraction=float(e["ad_fraction"]),
                mean_duration=float(e["mean_duration"]), first_seen=int(e.get("first_seen", 0)),
            ))
        except (KeyError, ValueError, TypeError) as exc:
            raise ParseError(f"bad edge line: {exc}", lineno, str(path)) from None
    if not len(graph):
        raise EmptyInputError(f"{path}: empty graph export")
    return graph.freeze()
