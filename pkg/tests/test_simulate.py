import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.stats import binom

from upmdp_cert.benchmarks import build_benchmark
from upmdp_cert.errors import ModelError
from upmdp_cert.imdp import Policy
from upmdp_cert.model import instantiate, parse_model
from upmdp_cert.simulate import (BehaviorPolicy, CountTable, TrajectoryConfig, collect_counts,
                                 counts_from_triples, dump_trajectories, load_trajectories,
                                 pool_tied_counts, sample_trajectories)


def coin_model(expr_heads="p"):
    doc = {
        "states": 3,
        "initial": {"0": 1.0},
        "actions": {"0": ["flip"], "1": ["stay"], "2": ["stay"]},
        "parameters": {"p": {"dist": "beta", "a": 5, "b": 5}},
        "transitions": [
            {"s": 0, "a": "flip", "to": 1, "expr": expr_heads},
            {"s": 0, "a": "flip", "to": 2, "expr": f"1 - {expr_heads}"},
            {"s": 1, "a": "stay", "to": 1, "expr": "1"},
            {"s": 2, "a": "stay", "to": 2, "expr": "1"},
        ],
        "objective": {"kind": "reach", "target": [1]},
    }
    return parse_model(doc)


def test_deterministic_kernel():
    doc = {
        "states": 2, "initial": {"0": 1}, "actions": {"0": ["a"], "1": ["a"]},
        "parameters": {}, "objective": {"kind": "reach", "target": [1]},
        "transitions": [{"s": 0, "a": "a", "to": 1, "expr": "1"},
                        {"s": 1, "a": "a", "to": 1, "expr": "1"}],
    }
    m = parse_model(doc)
    c = collect_counts(instantiate(m, {}), BehaviorPolicy(), TrajectoryConfig(10, 1), np.random.default_rng(0))
    assert c.visits(0, "a") == 10
    assert c.count(0, "a", 1) == 10


def test_bookkeeping_identity(rng):
    m = build_benchmark("betting")
    c = collect_counts(instantiate(m, {"p": 0.8}), BehaviorPolicy(), TrajectoryConfig(500, 50), rng)
    assert c.is_consistent()
    topo = m.topology
    sums = np.add.reduceat(c.trans_counts, topo.choice_ptr[:-1])
    assert np.array_equal(sums, c.choice_visits)


def test_bernoulli_concentration():
    """Estimate of p=0.5 from 1e4 flips lands in [0.48, 0.52] about as often
    as the binomial distribution says."""
    m = coin_model()
    inst = instantiate(m, {"p": 0.5})
    n_seeds = 200
    hits = 0
    for seed in range(n_seeds):
        c = collect_counts(inst, BehaviorPolicy(), TrajectoryConfig(10_000, 1), np.random.default_rng(seed))
        hits += 0.48 <= c.count(0, "flip", 1) / c.visits(0, "flip") <= 0.52
    exact = binom.cdf(5200, 10_000, 0.5) - binom.cdf(4799, 10_000, 0.5)
    assert exact > 0.99
    assert hits / n_seeds >= 0.99


def test_seed_determinism_and_equivalence():
    m = build_benchmark("chain")
    inst = instantiate(m, {"p": 0.4})
    cfg = TrajectoryConfig(300, 40)
    a = collect_counts(inst, BehaviorPolicy(), cfg, np.random.default_rng(5))
    b = collect_counts(inst, BehaviorPolicy(), cfg, np.random.default_rng(5))
    t = sample_trajectories(inst, BehaviorPolicy(), cfg, np.random.default_rng(5))
    assert np.array_equal(a.trans_counts, b.trans_counts)
    assert np.array_equal(a.trans_counts, t.counts().trans_counts)
    assert np.array_equal(a.choice_visits, t.counts().choice_visits)


def test_support_safety(rng):
    m = build_benchmark("aircraft")
    inst = instantiate(m, {"p": 0.8, "q": 0.2})
    t = sample_trajectories(inst, BehaviorPolicy(), TrajectoryConfig(200, 20), rng)
    assert np.all(inst.probs[t.trans] > 0)


def test_episode_stops_at_absorbing(rng):
    m = coin_model()
    t = sample_trajectories(instantiate(m, {"p": 0.5}), BehaviorPolicy(), TrajectoryConfig(50, 100), rng)
    assert t.trans.size == 50


def test_fixed_behavior_policy(rng):
    m = build_benchmark("chain")
    pol = Policy.from_actions(m.topology, {s: "b" for s in range(7)})
    c = collect_counts(instantiate(m, {"p": 0.5}), BehaviorPolicy("fixed", pol.weights),
                       TrajectoryConfig(100, 30), rng)
    assert all(c.visits(s, "a") == 0 and c.visits(s, "c") == 0 for s in range(7))
    assert c.visits(0, "b") > 0


def test_behavior_validation():
    with pytest.raises(ValueError):
        BehaviorPolicy("greedy")
    with pytest.raises(ValueError):
        TrajectoryConfig(0)


def _table(topo, visits, counts):
    return CountTable(topo, np.asarray(visits), np.asarray(counts))


def test_pool_examples():
    m = build_benchmark("chain")
    topo = m.topology
    ta, tb = topo.transition_index(0, "a", 1), topo.transition_index(1, "a", 2)
    visits = np.zeros(topo.n_choices, dtype=np.int64)
    counts = np.zeros(topo.n_transitions, dtype=np.int64)
    visits[topo.choice_index(0, "a")], counts[ta] = 20, 10
    visits[topo.choice_index(1, "a")], counts[tb] = 30, 5
    counts[topo.transition_index(0, "a", 0)] = 10
    counts[topo.transition_index(1, "a", 0)] = 25
    c = _table(topo, visits, counts)
    pooled = pool_tied_counts(c, [np.array([ta, tb])])
    assert pooled.trans_counts[ta] == pooled.trans_counts[tb] == 15
    assert pooled.trans_visits[ta] == pooled.trans_visits[tb] == 50
    single = pool_tied_counts(c, [np.array([ta])])
    assert single.trans_counts[ta] == 10 and single.trans_visits[ta] == 20


def test_pool_three_members():
    m = build_benchmark("chain")
    topo = m.topology
    members = [topo.transition_index(s, "a", s + 1) for s in range(3)]
    visits = np.zeros(topo.n_choices, dtype=np.int64)
    counts = np.zeros(topo.n_transitions, dtype=np.int64)
    for s, (k, h) in enumerate([(1, 2), (0, 3), (4, 5)]):
        visits[topo.choice_index(s, "a")] = h
        counts[members[s]] = k
        counts[topo.transition_index(s, "a", 0)] = h - k
    pooled = pool_tied_counts(_table(topo, visits, counts), [np.array(members)])
    assert all(pooled.trans_counts[t] == 5 and pooled.trans_visits[t] == 10 for t in members)


def test_pool_rejects_mixed_expressions():
    m = build_benchmark("chain")
    topo = m.topology
    bad = np.array([topo.transition_index(0, "a", 1), topo.transition_index(0, "b", 1)])
    with pytest.raises(ModelError):
        pool_tied_counts(CountTable.empty(topo), [bad], pmdp=m)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_pool_conservation(seed):
    m = build_benchmark("chain")
    rng = np.random.default_rng(seed)
    c = collect_counts(instantiate(m, {"p": float(rng.uniform(0.1, 0.9))}), BehaviorPolicy(),
                       TrajectoryConfig(50, 30), rng)
    classes = m.tying_classes()
    pooled = pool_tied_counts(c, classes)
    for members in classes:
        assert pooled.trans_counts[members[0]] == c.trans_counts[members].sum()
        assert pooled.trans_visits[members[0]] == c.trans_visits[members].sum()
    assert sum(pooled.trans_visits[mb[0]] for mb in classes) == c.trans_visits.sum()


def test_dump_and_reload(tmp_path, rng):
    m = build_benchmark("betting")
    inst = instantiate(m, {"p": 0.7})
    t = sample_trajectories(inst, BehaviorPolicy(), TrajectoryConfig(20, 20), rng)
    path = tmp_path / "d" / "traj.txt"
    n = dump_trajectories(path, t)
    assert n == t.trans.size
    lines = path.read_text().splitlines()
    assert sum(1 for ln in lines if ln.strip()) == n
    assert sum(1 for ln in lines if not ln.strip()) == 19
    back = load_trajectories(path, m.topology)
    assert np.array_equal(back.trans_counts, t.counts().trans_counts)


def test_triples_outside_support():
    m = build_benchmark("chain")
    with pytest.raises(ModelError):
        counts_from_triples(m.topology, [(0, 0, 3)])
    with pytest.raises(ModelError):
        counts_from_triples(m.topology, [(0, 5, 1)])


def test_count_addition():
    m = build_benchmark("chain")
    inst = instantiate(m, {"p": 0.5})
    a = collect_counts(inst, BehaviorPolicy(), TrajectoryConfig(10, 10), np.random.default_rng(1))
    b = collect_counts(inst, BehaviorPolicy(), TrajectoryConfig(10, 10), np.random.default_rng(2))
    s = a + b
    assert np.array_equal(s.trans_counts, a.trans_counts + b.trans_counts)
    assert s.is_consistent()
