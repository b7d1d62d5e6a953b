"""Deterministic synthetic flow traces with labeled compromise scenarios.

All randomness comes from a single SplitMix64 stream seeded with
``ScenarioConfig.seed``. Draws happen in this order, so a trace is fully
determined by the config:

1. per device: OS choice, then a shuffle of the app catalog (first
   ``apps_per_device`` entries are installed);
2. annotations: per device LV, then per installed app LV;
3. profiles: per device (hd, cd), per app (hd, cd), per benign host hd;
4. benign flows: per device, per app, per app server: start offset, then per
   flow (gap, bytes_sent, bytes_received, duration); then device DNS flows;
5. scenario-specific draws (see ``_beaconing``, ``_ad_malware``, ``_botnet``).

``SplitMix64.below(n)`` is ``next() % n``; the modulo bias is irrelevant at
these ranges and keeps the algorithm trivial to reproduce.
"""
from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from pathlib import Path

from .compromise import CompromiseEvidence, write_evidence
from .errors import ConfigError
from .flow_model import FlowRecord, Protocol, app_id, device_id, host_id, os_id, write_flow_log
from .sensitivity import DataProfile, write_profiles
from .vulnerability import ExploitEdge, VulnNode, write_annotations

_MASK = (1 << 64) - 1


class SplitMix64:
    def __init__(self, seed: int) -> None:
        self.state = seed & _MASK

    def next(self) -> int:
        self.state = (self.state + 0x9E3779B97F4A7C15) & _MASK
        z = self.state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
        return z ^ (z >> 31)

    def random(self) -> float:
        """Uniform float in [0, 1) from the top 53 bits."""
        return (self.next() >> 11) * (1.0 / (1 << 53))

    def uniform(self, lo: float, hi: float) -> float:
        return lo + (hi - lo) * self.random()

    def below(self, n: int) -> int:
        return self.next() % n

    def randint(self, lo: int, hi: int) -> int:
        return lo + self.below(hi - lo + 1)

    def shuffle(self, items: list) -> None:
        for i in range(len(items) - 1, 0, -1):
            j = self.below(i + 1)
            items[i], items[j] = items[j], items[i]


class Scenario(str, enum.Enum):
    BENIGN = "Benign"
    BEACONING_APP = "BeaconingApp"
    AD_MALWARE_PROPAGATION = "AdMalwarePropagation"
    BOTNET = "Botnet"


@dataclass(frozen=True)
class ScenarioConfig:
    seed: int = 42
    duration: int = 3600
    devices: int = 1
    apps_per_device: int = 2
    scenario: Scenario = Scenario.BENIGN
    start_time: int = 1_700_000_000

    def __post_init__(self) -> None:
        if not 0 <= self.seed <= _MASK:
            raise ConfigError("seed must be a 64-bit unsigned integer")
        if self.duration < 60:
            raise ConfigError("duration must be at least 60 seconds")
        if self.devices < 1:
            raise ConfigError("devices must be >= 1")
        if not 0 <= self.apps_per_device <= len(APP_CATALOG):
            raise ConfigError(f"apps_per_device must be in [0, {len(APP_CATALOG)}]")
        if self.start_time < 0:
            raise ConfigError("start_time must be >= 0")
        if self.scenario in (Scenario.BEACONING_APP, Scenario.AD_MALWARE_PROPAGATION) and self.apps_per_device < 1:
            raise ConfigError(f"{self.scenario.value} needs apps_per_device >= 1")
        if self.scenario is Scenario.BOTNET and self.devices < 2:
            raise ConfigError("Botnet needs at least 2 devices")


@dataclass(frozen=True)
class App:
    name: str
    servers: tuple[str, ...]
    period: float


OS_CATALOG = (("Android 9", 0.06), ("Android 13", 0.03), ("iOS 15", 0.04), ("iOS 17", 0.02))
APP_CATALOG = (
    App("mail", ("imap.mailhost.example",), 120),
    App("bank", ("api.bank.example",), 300),
    App("social", ("feed.social.example", "cdn.social.example"), 90),
    App("news", ("www.politics-news.example",), 240),
    App("game", ("play.games.example",), 60),
    App("maps", ("tiles.maps.example",), 180),
    App("health", ("sync.health.example",), 600),
    App("music", ("stream.music.example",), 150),
)
DNS_HOST = "dns.resolver.example"
DNS_PERIOD = 300
AD_HOST = "ads.adnet.example"
CATEGORY_RULES = (
    ("*bank*", "Monetary"),
    ("*politic*", "Political"),
    ("*social*", "Social"),
    ("*mail*", "Private"),
    ("*health*", "Private"),
)
BEACON_INTERVAL = 60
BEACON_JITTER = 0.01
BOT_INTERVAL = 120


@dataclass
class Trace:
    config: ScenarioConfig
    records: list[FlowRecord]
    labeled_compromised: tuple[str, ...]
    vuln_nodes: list[VulnNode] = field(default_factory=list)
    exploit_edges: list[ExploitEdge] = field(default_factory=list)
    evidence: dict[str, CompromiseEvidence] = field(default_factory=dict)
    profiles: dict[str, DataProfile] = field(default_factory=dict)
    benign_hosts: frozenset[str] = frozenset()
    scenario_hosts: tuple[str, ...] = ()

    def truth(self) -> dict:
        return {
            "scenario": self.config.scenario.value,
            "seed": self.config.seed,
            "devices": self.config.devices,
            "apps_per_device": self.config.apps_per_device,
            "duration": self.config.duration,
            "labeled_compromised": list(self.labeled_compromised),
            "scenario_hosts": list(self.scenario_hosts),
        }


@dataclass
class _Device:
    name: str
    os_name: str
    os_lv: float
    apps: list[App]


def _flow(dev: _Device, ts: float, host: str, *, app: str | None, port: int = 443,
          protocol: Protocol = Protocol.HTTPS, sent: int, received: int, duration: float,
          authenticated: bool = True, ad: bool = False) -> FlowRecord:
    return FlowRecord(
        timestamp=int(ts), src_device=dev.name, src_app=app, dst_host=host, dst_port=port,
        protocol=protocol, bytes_sent=sent, bytes_received=received,
        encrypted=protocol in (Protocol.HTTPS, Protocol.SRTP), authenticated=authenticated,
        is_ad_fetch=ad, os_name=dev.os_name, app_version="1.0" if app else None, duration=duration,
    )


def _periodic(rng: SplitMix64, start: float, end: float, period: float):
    """Jittered schedule: gaps uniform in [0.5, 1.5] * period."""
    t = start + rng.uniform(0, period)
    while t < end:
        yield t
        t += period * (0.5 + rng.random())


def generate_trace(config: ScenarioConfig) -> Trace:
    rng = SplitMix64(config.seed)
    t0, t1 = config.start_time, config.start_time + config.duration

    devices: list[_Device] = []
    for k in range(config.devices):
        os_name, os_lv = OS_CATALOG[rng.below(len(OS_CATALOG))]
        catalog = list(APP_CATALOG)
        rng.shuffle(catalog)
        devices.append(_Device(f"device-{k:02d}", os_name, os_lv, catalog[: config.apps_per_device]))

    nodes: list[VulnNode] = []
    edges: list[ExploitEdge] = []
    for dev in devices:
        dev_lv = round(rng.uniform(0.01, 0.03), 4)
        nodes.append(VulnNode(device_id(dev.name), dev_lv))
        nodes.append(VulnNode(os_id(dev.name, dev.os_name), dev.os_lv))
        edges.append(ExploitEdge(os_id(dev.name, dev.os_name), device_id(dev.name), 0.9))
        for app in dev.apps:
            nodes.append(VulnNode(app_id(dev.name, app.name), round(rng.uniform(0.01, 0.03), 4)))
            edges.append(ExploitEdge(app_id(dev.name, app.name), os_id(dev.name, dev.os_name), 0.2))

    profiles: dict[str, DataProfile] = {}
    for dev in devices:
        did = device_id(dev.name)
        profiles[did] = DataProfile(did, round(rng.uniform(1, 3), 3), round(rng.uniform(0.5, 2), 3))
        for app in dev.apps:
            aid = app_id(dev.name, app.name)
            profiles[aid] = DataProfile(aid, round(rng.uniform(0.5, 2.5), 3), round(rng.uniform(0.2, 1), 3))
    benign_hosts = sorted({h for dev in devices for app in dev.apps for h in app.servers} | {DNS_HOST})
    for host in benign_hosts:
        hd = 3.0 if "bank" in host else round(rng.uniform(0.5, 1.5), 3)
        profiles[host_id(host)] = DataProfile(host_id(host), hd, 0.0)

    records: list[FlowRecord] = []
    for dev in devices:
        for app in dev.apps:
            for server in app.servers:
                for ts in _periodic(rng, t0, t1, app.period):
                    records.append(_flow(
                        dev, ts, server, app=app.name, sent=rng.randint(200, 2000),
                        received=rng.randint(500, 20000), duration=round(0.1 + 2 * rng.random(), 3),
                    ))
        for ts in _periodic(rng, t0, t1, DNS_PERIOD):
            records.append(_flow(
                dev, ts, DNS_HOST, app=None, port=53, protocol=Protocol.DNS, sent=rng.randint(40, 80),
                received=rng.randint(80, 300), duration=0.05, authenticated=False,
            ))

    trace = Trace(config, records, (), nodes, edges, {}, profiles, frozenset(benign_hosts))
    if config.scenario is Scenario.BEACONING_APP:
        _beaconing(rng, trace, devices)
    elif config.scenario is Scenario.AD_MALWARE_PROPAGATION:
        _ad_malware(rng, trace, devices)
    elif config.scenario is Scenario.BOTNET:
        _botnet(rng, trace, devices)

    # evidence sidecar carries no ground truth: every device and app starts clean
    for dev in devices:
        for eid in [device_id(dev.name)] + [app_id(dev.name, a.name) for a in dev.apps]:
            trace.evidence[eid] = CompromiseEvidence(eid)
    trace.records.sort(key=FlowRecord.sort_key)
    _prune(trace)
    return trace


def _observed_ids(records: list[FlowRecord]) -> set[str]:
    ids: set[str] = set()
    for r in records:
        ids.add(device_id(r.src_device))
        ids.add(host_id(r.dst_host))
        if r.src_app is not None:
            ids.add(app_id(r.src_device, r.src_app))
        if r.os_name is not None:
            ids.add(os_id(r.src_device, r.os_name))
    return ids


def _prune(trace: Trace) -> None:
    """Drop sidecar entries for entities that never emitted or received a flow."""
    seen = _observed_ids(trace.records)
    trace.vuln_nodes = [n for n in trace.vuln_nodes if n.entity_id in seen]
    trace.exploit_edges = [e for e in trace.exploit_edges if e.src in seen and e.dst in seen]
    trace.evidence = {k: v for k, v in trace.evidence.items() if k in seen}
    trace.profiles = {k: v for k, v in trace.profiles.items() if k in seen}


def _beaconing(rng: SplitMix64, trace: Trace, devices: list[_Device]) -> None:
    """One app starts calling home to an unseen host on a fixed interval."""
    cfg = trace.config
    dev = devices[rng.below(len(devices))]
    app = dev.apps[rng.below(len(dev.apps))]
    host = f"c2-{rng.next() & 0xFFFFFF:06x}.example"
    grid = cfg.start_time + cfg.duration // 4 + rng.below(BEACON_INTERVAL)
    k = 0
    while grid + k * BEACON_INTERVAL < cfg.start_time + cfg.duration:
        jitter = rng.uniform(-BEACON_JITTER, BEACON_JITTER) * BEACON_INTERVAL
        trace.records.append(_flow(
            dev, grid + k * BEACON_INTERVAL + jitter, host, app=app.name, sent=rng.randint(150, 300),
            received=rng.randint(60, 120), duration=0.2, authenticated=False,
        ))
        k += 1
    trace.labeled_compromised = (app_id(dev.name, app.name), device_id(dev.name))
    trace.scenario_hosts = (host,)


def _ad_malware(rng: SplitMix64, trace: Trace, devices: list[_Device]) -> None:
    """A malicious ad network serves several apps, then ramps up fetches."""
    cfg = trace.config
    t0, t1 = cfg.start_time, cfg.start_time + cfg.duration
    ramp = t1 - cfg.duration // 5
    fetchers = [(dev, app) for dev in devices for app in dev.apps if rng.random() < 0.5]
    if not fetchers:
        dev = devices[rng.below(len(devices))]
        fetchers = [(dev, dev.apps[rng.below(len(dev.apps))])]
    ad_hid = host_id(AD_HOST)
    trace.vuln_nodes.append(VulnNode(ad_hid, 0.12, 0.0, ("malvertising",)))
    labeled: set[str] = set()
    for dev, app in fetchers:
        aid = app_id(dev.name, app.name)
        trace.exploit_edges.append(ExploitEdge(ad_hid, aid, 0.6))
        for ts in list(_periodic(rng, t0, ramp, 300)) + list(_periodic(rng, ramp, t1, 30)):
            trace.records.append(_flow(
                dev, ts, AD_HOST, app=app.name, port=80, protocol=Protocol.HTTP,
                sent=rng.randint(300, 800), received=rng.randint(2000, 40000), duration=0.4,
                authenticated=False, ad=True,
            ))
        labeled.update((aid, device_id(dev.name)))
    trace.profiles[ad_hid] = DataProfile(ad_hid, 0.1, 0.0)
    trace.labeled_compromised = tuple(sorted(labeled))
    trace.scenario_hosts = (AD_HOST,)


def _botnet(rng: SplitMix64, trace: Trace, devices: list[_Device]) -> None:
    """Half the devices check in with one command host on a shared schedule.

    Check-ins ride on each bot's first installed app when it has one.
    """
    cfg = trace.config
    order = list(range(len(devices)))
    rng.shuffle(order)
    bots = [devices[i] for i in sorted(order[: max(2, len(devices) // 2)])]
    host = f"cnc-{rng.next() & 0xFFFFFF:06x}.example"
    t = cfg.start_time + cfg.duration // 3
    while t < cfg.start_time + cfg.duration:
        shared = rng.uniform(-2, 2)
        for dev in bots:
            trace.records.append(_flow(
                dev, t + shared + rng.random(), host, app=dev.apps[0].name if dev.apps else None,
                port=8443, protocol=Protocol.OTHER, sent=rng.randint(100, 400),
                received=rng.randint(100, 2000), duration=0.3, authenticated=False,
            ))
        t += BOT_INTERVAL
    labeled = {device_id(d.name) for d in bots}
    labeled.update(app_id(d.name, d.apps[0].name) for d in bots if d.apps)
    trace.labeled_compromised = tuple(sorted(labeled))
    trace.scenario_hosts = (host,)


def category_rules_text() -> str:
    return "".join(f"{pattern}\t{category}\n" for pattern, category in CATEGORY_RULES)


SCENARIO_FILES = {
    "flows": "flows.ndjson",
    "annotations": "annotations.ndjson",
    "evidence": "evidence.ndjson",
    "profiles": "profiles.ndjson",
    "categories": "categories.tsv",
    "truth": "truth.json",
}


def write_scenario(out_dir: str | Path, trace: Trace) -> dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {k: out / v for k, v in SCENARIO_FILES.items()}
    write_flow_log(paths["flows"], trace.records)
    write_annotations(paths["annotations"], trace.vuln_nodes, trace.exploit_edges)
    write_evidence(paths["evidence"], trace.evidence)
    write_profiles(paths["profiles"], trace.profiles)
    paths["categories"].write_text(category_rules_text(), encoding="utf-8")
    paths["truth"].write_text(json.dumps(trace.truth(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return paths
