from __future__ import annotations

import math
import random
import sys

import numpy as np
import pytest

from flowsec.flow_model import EdgeStats, Entity, EntityGraph, EntityKind, FlowRecord, Protocol

DAY = 86400


def make_record(**overrides) -> FlowRecord:
    values = dict(
        timestamp=100, src_device="d1", dst_host="s1.example", dst_port=443, protocol=Protocol.HTTPS,
        bytes_sent=10, bytes_received=20, encrypted=True, authenticated=True, is_ad_fetch=False,
        duration=1.5,
    )
    values.update(overrides)
    return FlowRecord(**values)


def oracle_raw_weight(stats: EdgeStats, now: float, half_life: float) -> float:
    """Edge weight written out from the formula, independent of the library."""
    age = now - stats.last_seen
    return (math.log2(1 + stats.flow_count) * math.log2(1 + stats.total_bytes)
            * 2.0 ** (-age / half_life) * (0.5 + 0.5 * stats.auth_fraction))


def oracle_matrix(ids: list[str], edges: list[EdgeStats], now: float, damping=0.85, half_life=7 * DAY):
    index = {e: k for k, e in enumerate(ids)}
    raw = np.zeros((len(ids), len(ids)))
    for s in edges:
        raw[index[s.src], index[s.dst]] += oracle_raw_weight(s, now, half_life)
    w = np.zeros_like(raw)
    for i in range(len(ids)):
        total = raw[i].sum()
        if total > 0:
            w[i] = damping * raw[i] / total
    return w


def random_graph(rng: random.Random, max_nodes: int = 12, now: int = 10 * DAY) -> tuple[EntityGraph, list[EdgeStats]]:
    """Random frozen entity graph with arbitrary (possibly cyclic) communication edges."""
    n = rng.randint(1, max_nodes)
    g = EntityGraph()
    ids = [f"n{k:02d}" for k in range(n)]
    for eid in ids:
        g.add_entity(Entity(eid, rng.choice(list(EntityKind))))
    edges = []
    for a in ids:
        for b in ids:
            if a != b and rng.random() < 0.3:
                stats = EdgeStats(
                    a, b, flow_count=rng.randint(1, 50), total_bytes=rng.randint(0, 10**6),
                    last_seen=now - rng.randint(0, 20 * DAY), auth_fraction=rng.random(),
                    ad_fraction=rng.random(), mean_duration=rng.random() * 10,
                )
                g.add_edge(stats)
                edges.append(stats)
    return g.freeze(), edges


@pytest.fixture
def rng() -> random.Random:
    return random.Random(20240611)


def pytest_terminal_summary(terminalreporter):
    acceptance = sys.modules.get("test_acceptance")
    if acceptance is not None and acceptance.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(acceptance.RESULTS, key=lambda l: int(l.split()[1])):
            terminalreporter.write_line(line)
