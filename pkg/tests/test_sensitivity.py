from __future__ import annotations

import math
import random

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import DAY, oracle_matrix, random_graph
from flowsec.errors import ConfigError, NotFoundError, StateError, ValidationError
from flowsec.flow_model import EdgeStats, Entity, EntityGraph, EntityKind
from flowsec.sensitivity import (
    DataProfile,
    SensitivityParams,
    compute_sensitivity_rank,
    data_sensitivity,
    edge_weight,
    load_profiles,
    load_rank,
    normalize_weights,
    rollover_profile,
    solve_fixed_point,
    write_profiles,
    write_rank,
)

P = SensitivityParams()


def stats(flow_count=1, total_bytes=1, last_seen=0, auth=1.0, src="a", dst="b") -> EdgeStats:
    return EdgeStats(src, dst, flow_count, total_bytes, last_seen, auth, 0.0, 0.0)


def small_graph(ids, edges=()) -> EntityGraph:
    g = EntityGraph()
    for eid in ids:
        g.add_entity(Entity(eid, EntityKind.SERVER))
    for s in edges:
        g.add_edge(s)
    return g.freeze()


class TestEdgeWeight:
    def test_zero_bytes(self):
        assert edge_weight(stats(total_bytes=0), 0, P) == 0.0

    def test_unit(self):
        assert edge_weight(stats(), 0, P) == 1.0

    def test_half_life(self):
        assert edge_weight(stats(), P.recency_half_life, P) == pytest.approx(0.5, abs=1e-15)

    def test_unauthenticated_halves(self):
        assert edge_weight(stats(auth=0.0), 0, P) == 0.5

    def test_future_edge_rejected(self):
        with pytest.raises(ValidationError):
            edge_weight(stats(last_seen=10), 5, P)

    @settings(max_examples=100)
    @given(st.integers(1, 10**4), st.integers(0, 10**8), st.integers(0, 100 * DAY), st.floats(0, 1))
    def test_monotone(self, fc, tb, age, auth):
        base = edge_weight(stats(fc, tb, 0, auth), age, P)
        assert edge_weight(stats(fc + 1, tb, 0, auth), age, P) >= base
        assert edge_weight(stats(fc, tb + 1, 0, auth), age, P) >= base
        if tb > 0:
            assert edge_weight(stats(fc, tb, 0, auth), age + DAY, P) < base


class TestNormalize:
    def test_single_edge(self):
        g = small_graph("ab", [stats()])
        assert normalize_weights(g, {("a", "b"): 5.0}, P) == {("a", "b"): pytest.approx(0.85)}

    def test_two_edges(self):
        g = small_graph("abc", [stats(src="a", dst="b"), stats(src="a", dst="c")])
        w = normalize_weights(g, {("a", "b"): 3.0, ("a", "c"): 1.0}, P)
        assert w[("a", "b")] == pytest.approx(0.6375)
        assert w[("a", "c")] == pytest.approx(0.2125)

    def test_all_zero(self):
        g = small_graph("abc", [stats(src="a", dst="b"), stats(src="a", dst="c")])
        w = normalize_weights(g, {("a", "b"): 0.0, ("a", "c"): 0.0}, P)
        assert all(v == 0.0 for v in w.values())


class TestDataSensitivity:
    def test_zero(self):
        assert data_sensitivity(DataProfile("x", 0, 0), P) == 0.0
        assert data_sensitivity(None, P) == 0.0

    def test_asymptote(self):
        assert data_sensitivity(DataProfile("x", 1e6, 0), P) == pytest.approx(0.15)
        assert data_sensitivity(DataProfile("x", 1e6, 0), P) <= P.base_cap

    def test_direct(self):
        assert data_sensitivity(DataProfile("x", 1, 0), P) == pytest.approx(0.075)

    def test_negative_rejected(self):
        with pytest.raises(ValidationError):
            DataProfile("x", -1, 0)

    # beyond D ~ 50 the map saturates at double precision
    @given(st.floats(0, 15), st.floats(0, 15), st.floats(0.01, 5))
    def test_strictly_increasing(self, hd, cd, bump):
        assert data_sensitivity(DataProfile("x", hd, cd + bump), P) > data_sensitivity(DataProfile("x", hd, cd), P)

    def test_rollover(self):
        prof = rollover_profile(DataProfile("x", 2.0, 1.0), 3 * DAY, 0.5, P)
        assert prof.historical == pytest.approx(2.0 * 0.99 ** 3 + 1.0)
        assert prof.current == 0.5


class TestRank:
    def test_isolated_no_data(self):
        rv = compute_sensitivity_rank(small_graph("a"))
        assert rv["a"] == 0.0 and rv.converged

    def test_isolated_with_data(self):
        rv = compute_sensitivity_rank(small_graph("a"), {"a": DataProfile("a", 1, 0)})
        assert rv["a"] == pytest.approx(0.075)

    def test_symmetric_two_cycle(self):
        g = small_graph("ij", [stats(src="i", dst="j"), stats(src="j", dst="i")])
        profiles = {e: DataProfile(e, 1, 0) for e in "ij"}
        rv = compute_sensitivity_rank(g, profiles, now=0)
        w = oracle_matrix(["i", "j"], g.edges(), 0)
        exact = np.linalg.solve(np.eye(2) - w, np.array([0.075, 0.075]))
        assert rv["i"] == rv["j"]
        assert rv["i"] == pytest.approx(0.5, abs=1e-8)
        assert rv["i"] == pytest.approx(exact[0], abs=1e-8)

    def test_chain_matches_linear_solve(self):
        edges = [stats(4, 1000, 0, 1.0, "d", "a"), stats(2, 50, 0, 0.5, "a", "s"), stats(1, 9, 0, 0.0, "d", "s")]
        g = small_graph("das", edges)
        profiles = {"d": DataProfile("d", 0.5, 0), "a": DataProfile("a", 2, 1), "s": DataProfile("s", 0, 3)}
        rv = compute_sensitivity_rank(g, profiles, now=DAY)
        ids = g.ids()
        w = oracle_matrix(ids, edges, DAY)
        base = np.array([0.15 * (1 - 2.0 ** -(profiles[e].historical + profiles[e].current)) for e in ids])
        expected = np.linalg.solve(np.eye(3) - w, base)
        for k, eid in enumerate(ids):
            assert rv[eid] == pytest.approx(expected[k], abs=1e-9)

    def test_unfrozen(self):
        g = EntityGraph()
        g.add_entity(Entity("a", EntityKind.DEVICE))
        with pytest.raises(StateError):
            compute_sensitivity_rank(g)

    def test_unknown_profile(self):
        with pytest.raises(NotFoundError):
            compute_sensitivity_rank(small_graph("a"), {"zz": DataProfile("zz", 1, 1)})

    def test_unknown_lookup(self):
        rv = compute_sensitivity_rank(small_graph("a"))
        with pytest.raises(NotFoundError):
            rv["missing"]

    def test_non_convergence_reported(self):
        g = small_graph("ij", [stats(src="i", dst="j"), stats(src="j", dst="i")])
        rv = compute_sensitivity_rank(g, {"i": DataProfile("i", 1, 0)}, SensitivityParams(max_iterations=3), now=0)
        assert not rv.converged and rv.iterations_used == 3 and rv.residual > 0


@pytest.mark.parametrize("kwargs", [dict(damping=0), dict(damping=1), dict(tolerance=0), dict(max_iterations=0),
                                    dict(history_decay=1.0), dict(recency_half_life=0)])
def test_params_validated(kwargs):
    with pytest.raises(ConfigError):
        SensitivityParams(**kwargs)


def test_iteration_bound_at_defaults():
    assert P.iteration_bound() == math.ceil(math.log(1e-9) / math.log(0.85)) + 1 == 129


def _random_profiles(rnd: random.Random, ids):
    return {e: DataProfile(e, rnd.random() * 3, rnd.random() * 3) for e in ids if rnd.random() < 0.7}


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32))
def test_oracle_equivalence_and_range(seed):
    rnd = random.Random(seed)
    g, edges = random_graph(rnd)
    ids = g.ids()
    profiles = _random_profiles(rnd, ids)
    now = 10 * DAY
    rv = compute_sensitivity_rank(g, profiles, now=now)
    base = np.array([0.15 * (1 - 2.0 ** -(profiles[e].total if e in profiles else 0.0)) for e in ids])
    expected = np.linalg.solve(np.eye(len(ids)) - oracle_matrix(ids, edges, now), base)
    assert rv.converged and rv.iterations_used <= P.iteration_bound()
    for k, eid in enumerate(ids):
        assert abs(rv[eid] - expected[k]) <= 1e-6
        assert 0.0 <= rv[eid] < 1.0


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32))
def test_positive_iff_reaches_base(seed):
    rnd = random.Random(seed)
    g, _ = random_graph(rnd)
    profiles = _random_profiles(rnd, g.ids())
    rv = compute_sensitivity_rank(g, profiles, now=10 * DAY)
    w = normalize_weights(g, {(e.src, e.dst): edge_weight(e, 10 * DAY, P) for e in g.edges()}, P)
    seeds = {e for e, p in profiles.items() if p.total > 0}
    # reverse reachability over positive-weight edges
    reach, frontier = set(seeds), list(seeds)
    while frontier:
        node = frontier.pop()
        for (src, dst), val in w.items():
            if dst == node and val > 0 and src not in reach:
                reach.add(src)
                frontier.append(src)
    for eid in g.ids():
        assert (rv[eid] > 0) == (eid in reach)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32))
def test_contraction(seed):
    rnd = random.Random(seed)
    n = rnd.randint(2, 10)
    ids = [f"x{k}" for k in range(n)]
    weights = {}
    for i in ids:
        outs = [j for j in ids if j != i and rnd.random() < 0.4]
        raw = [rnd.random() for _ in outs]
        for j, r in zip(outs, raw):
            weights[(i, j)] = 0.85 * r / sum(raw)
    base = {i: rnd.random() * 0.15 for i in ids}
    one = SensitivityParams(max_iterations=1)
    # one Jacobi step from two different starts, expressed through shifted bases
    x = np.array([rnd.random() for _ in ids])
    y = np.array([rnd.random() for _ in ids])
    w = np.zeros((n, n))
    for (i, j), val in weights.items():
        w[ids.index(i), ids.index(j)] = val
    b = np.array([base[i] for i in ids])
    fx, fy = w @ x + b, w @ y + b
    assert np.max(np.abs(fx - fy)) <= 0.85 * np.max(np.abs(x - y)) + 1e-15
    # the library's first iterate from zero is exactly the base term
    rv = solve_fixed_point(ids, weights, base, one)
    assert [rv[i] for i in ids] == pytest.approx(list(b))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32))
def test_monotone_in_base(seed):
    rnd = random.Random(seed)
    g, _ = random_graph(rnd, max_nodes=8)
    ids = g.ids()
    profiles = _random_profiles(rnd, ids)
    target = rnd.choice(ids)
    bumped = dict(profiles)
    old = profiles.get(target, DataProfile(target, 0, 0))
    bumped[target] = DataProfile(target, old.historical + 1, old.current)
    lo = compute_sensitivity_rank(g, profiles, now=10 * DAY)
    hi = compute_sensitivity_rank(g, bumped, now=10 * DAY)
    for eid in ids:
        assert hi[eid] >= lo[eid] - 1e-12


def test_rank_and_profile_files(tmp_path):
    g = small_graph("ij", [stats(src="i", dst="j"), stats(src="j", dst="i")])
    profiles = {e: DataProfile(e, 1, 0.25) for e in "ij"}
    write_profiles(tmp_path / "p.ndjson", profiles)
    assert load_profiles(tmp_path / "p.ndjson") == profiles
    rv = compute_sensitivity_rank(g, profiles, now=0)
    write_rank(tmp_path / "s.ndjson", rv, "sensitivity")
    lines = (tmp_path / "s.ndjson").read_text().splitlines()
    assert lines[0].startswith('{"entity":"i","sensitivity":')
    loaded = load_rank(tmp_path / "s.ndjson", "sensitivity")
    assert loaded["i"] == pytest.approx(rv["i"], rel=1e-11)
