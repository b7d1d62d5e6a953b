from __future__ import annotations

import random

import pytest
from hypothesis import example, given, settings
from hypothesis import strategies as st

from flowsec.compromise import (
    CompromiseEvidence,
    anomaly_score,
    compromise_probability,
    compute_degree_of_compromise,
    evidence_from_flags,
    load_assessments,
    load_evidence,
    merge_evidence,
    write_assessments,
    write_evidence,
)
from flowsec.errors import StateError, ValidationError
from flowsec.flow_model import Entity, EntityGraph, EntityKind
from flowsec.sensitivity import RankVector


def forest(parent_of: dict[str, str | None]) -> EntityGraph:
    g = EntityGraph()
    for eid in sorted(parent_of):
        g.add_entity(Entity(eid, EntityKind.APP))
    for eid, parent in sorted(parent_of.items()):
        if parent is not None:
            g.set_parent(eid, parent)
    return g.freeze()


def rank(values: dict[str, float], converged=True) -> RankVector:
    return RankVector(dict(values), 1, converged, 0.0)


def naive_dc(g: EntityGraph, node: str, s, v, evidence) -> float:
    p = compromise_probability(v[node], evidence.get(node))
    kids = [c for c in sorted(g.children(node)) if v[c] > 0]
    if not kids:
        return p * s[node]
    return p * s[node] * sum(naive_dc(g, c, s, v, evidence) for c in kids)


def random_forest(rnd: random.Random, max_nodes=20):
    n = rnd.randint(1, max_nodes)
    ids = [f"e{k:02d}" for k in range(n)]
    parent_of = {ids[0]: None}
    for k in range(1, n):
        parent_of[ids[k]] = rnd.choice(ids[:k]) if rnd.random() < 0.8 else None
    s = {e: rnd.choice([0.0, rnd.random()]) if rnd.random() < 0.2 else rnd.random() for e in ids}
    v = {e: 0.0 if rnd.random() < 0.25 else rnd.random() * 0.99 for e in ids}
    evidence = {}
    for e in ids:
        r = rnd.random()
        if r < 0.1:
            evidence[e] = CompromiseEvidence(e, 0.0, True)
        elif r < 0.4:
            evidence[e] = CompromiseEvidence(e, rnd.random())
    return forest(parent_of), s, v, evidence


class TestProbability:
    def test_no_evidence(self):
        assert compromise_probability(0.0, CompromiseEvidence("x")) == 0.0

    def test_direct(self):
        assert compromise_probability(0.3, CompromiseEvidence("x", 0.1, True)) == 1.0

    def test_noisy_or(self):
        assert compromise_probability(0.2, CompromiseEvidence("x", 0.5)) == pytest.approx(0.6)

    def test_missing_evidence_uses_v(self):
        assert compromise_probability(0.25, None) == 0.25

    def test_zero_score_is_exactly_v(self):
        v = 0.0010381334785269924
        assert compromise_probability(v, CompromiseEvidence("x", 0.0)) == v

    def test_v_out_of_range(self):
        with pytest.raises(ValidationError):
            compromise_probability(1.0, None)

    def test_evidence_range(self):
        with pytest.raises(ValidationError):
            CompromiseEvidence("x", 1.5)

    @given(st.floats(0, 0.999), st.floats(0, 1))
    def test_bounds_and_monotone(self, v, a):
        p = compromise_probability(v, CompromiseEvidence("x", a))
        assert 0.0 <= p <= 1.0
        assert p >= v - 1e-15 and p >= a - 1e-15


class TestFlags:
    def test_score_clamped(self):
        assert anomaly_score(["beaconing", "new_endpoint_burst", "ad_click_spike"]) == 1.0
        assert anomaly_score(["beaconing"]) == 0.7
        assert anomaly_score(["unknown"]) == 0.0

    def test_merge(self):
        a = {"x": CompromiseEvidence("x", 0.2, False, ("beaconing",))}
        b = {"x": CompromiseEvidence("x", 0.1, True), "y": CompromiseEvidence("y", 0.4)}
        m = merge_evidence(a, b)
        assert m["x"] == CompromiseEvidence("x", 0.2, True, ("beaconing",))
        assert m["y"].anomaly_score == 0.4

    def test_from_flags(self):
        ev = evidence_from_flags({"app:d/a": {"beaconing", "ad_click_spike"}})
        assert ev["app:d/a"].flags == ("ad_click_spike", "beaconing")
        assert ev["app:d/a"].anomaly_score == 1.0


class TestDegree:
    def test_leaf_no_probability(self):
        g = forest({"dev": None})
        out = compute_degree_of_compromise(g, rank({"dev": 0.4}), rank({"dev": 0.0}), {})
        assert out["dev"].dc == 0.0

    def test_internal_node(self):
        g = forest({"dev": None, "a1": "dev", "a2": "dev"})
        s = rank({"dev": 0.4, "a1": 0.2, "a2": 0.3})
        v = rank({"dev": 0.5, "a1": 0.01, "a2": 0.01})
        # children DC = p*S with p = 1 (observed) so DC(a1)=0.2, DC(a2)=0.3
        ev = {"a1": CompromiseEvidence("a1", 0, True), "a2": CompromiseEvidence("a2", 0, True)}
        out = compute_degree_of_compromise(g, s, v, ev)
        assert out["a1"].dc == pytest.approx(0.2) and out["a2"].dc == pytest.approx(0.3)
        assert out["dev"].dc == pytest.approx(0.5 * 0.4 * 0.5)
        assert out["dev"].contributing_children == ("a1", "a2")

    def test_zero_v_children_excluded(self):
        g = forest({"dev": None, "os": "dev", "a1": "dev"})
        s = rank({"dev": 0.4, "os": 0.2, "a1": 0.3})
        v = rank({"dev": 0.5, "os": 0.0, "a1": 0.1})
        out = compute_degree_of_compromise(g, s, v, {})
        assert out["dev"].contributing_children == ("a1",)
        assert out["dev"].dc == pytest.approx(0.5 * 0.4 * (0.1 * 0.3))

    def test_fallback_when_no_vulnerable_child(self):
        g = forest({"dev": None, "os": "dev"})
        out = compute_degree_of_compromise(g, rank({"dev": 0.4, "os": 0.2}), rank({"dev": 0.5, "os": 0.0}), {})
        assert out["dev"].dc == pytest.approx(0.2)
        assert out["dev"].contributing_children == ()

    def test_three_level_fixture(self, rng):
        g = forest({"dev": None, "os": "dev", "a1": "dev", "a2": "dev", "lib": "a1"})
        s = {e: rng.random() * 0.5 for e in g.ids()}
        v = {e: rng.random() * 0.2 for e in g.ids()}
        out = compute_degree_of_compromise(g, rank(s), rank(v), {})
        for eid in g.ids():
            assert out[eid].dc == naive_dc(g, eid, s, v, {})

    def test_unconverged(self):
        g = forest({"dev": None})
        with pytest.raises(StateError):
            compute_degree_of_compromise(g, rank({"dev": 0.1}, converged=False), rank({"dev": 0.1}), {})

    def test_deep_chain_has_no_recursion_limit(self):
        parent_of = {"n0000": None}
        parent_of.update({f"n{k:04d}": f"n{k - 1:04d}" for k in range(1, 3000)})
        g = forest(parent_of)
        vals = {e: 0.5 for e in parent_of}
        out = compute_degree_of_compromise(g, rank(vals), rank(vals), {})
        assert len(out) == 3000 and out["n2999"].dc == 0.25


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32))
def test_bottom_up_matches_naive_recursion(seed):
    g, s, v, evidence = random_forest(random.Random(seed))
    out = compute_degree_of_compromise(g, rank(s), rank(v), evidence)
    for eid in g.ids():
        assert out[eid].dc == naive_dc(g, eid, s, v, evidence)
        a = out[eid]
        if evidence.get(eid) and evidence[eid].directly_observed:
            assert a.p == 1.0
        if a.p == 0.0 or s[eid] == 0.0:
            assert a.dc == 0.0
        assert all(v[c] > 0 for c in a.contributing_children)
        assert list(a.contributing_children) == sorted(a.contributing_children)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32), st.floats(0.0, 0.5))
@example(seed=230, bump=0.0)  # zero-score evidence must match no evidence exactly
def test_monotone_in_inputs(seed, bump):
    g, s, v, evidence = random_forest(random.Random(seed), max_nodes=10)
    base = compute_degree_of_compromise(g, rank(s), rank(v), evidence)
    target = random.Random(seed + 1).choice(g.ids())
    s2 = dict(s)
    s2[target] = min(0.999, s[target] + bump)
    higher_s = compute_degree_of_compromise(g, rank(s2), rank(v), evidence)
    ev2 = dict(evidence)
    old = evidence.get(target, CompromiseEvidence(target))
    ev2[target] = CompromiseEvidence(target, min(1.0, old.anomaly_score + bump), old.directly_observed)
    higher_p = compute_degree_of_compromise(g, rank(s), rank(v), ev2)
    for eid in g.ids():
        assert higher_s[eid].dc >= base[eid].dc
        assert higher_p[eid].dc >= base[eid].dc


def test_files_round_trip(tmp_path):
    ev = {"a": CompromiseEvidence("a", 0.25, False, ("beaconing",)), "b": CompromiseEvidence("b", 0.0, True)}
    write_evidence(tmp_path / "e.ndjson", ev)
    assert load_evidence(tmp_path / "e.ndjson") == ev
    g = forest({"a": None, "b": "a"})
    out = compute_degree_of_compromise(g, rank({"a": 0.5, "b": 0.25}), rank({"a": 0.5, "b": 0.5}), ev)
    write_assessments(tmp_path / "a.ndjson", out)
    back = load_assessments(tmp_path / "a.ndjson")
    assert back["a"].contributing_children == ("b",)
    assert back["a"].dc == pytest.approx(out["a"].dc, rel=1e-11)


def test_evidence_without_flags_field(tmp_path):
    path = tmp_path / "e.ndjson"
    path.write_text('{"evidence":{"id":"x","anomaly_score":0.5,"directly_observed":false}}\n')
    assert load_evidence(path)["x"].anomaly_score == 0.5
