import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from upmdp_cert.benchmarks import build_benchmark
from upmdp_cert.errors import PropernessError
from upmdp_cert.imdp import (Policy, adversary_probs, exact_policy_value, exact_values, merge,
                             merge_all, robust_value_iteration, worst_case_distribution)
from upmdp_cert.learn import IntervalMDP, PacConfig, learn_pac_imdp
from upmdp_cert.model import EvaluationSpec, instantiate, parse_model
from upmdp_cert.simulate import BehaviorPolicy, TrajectoryConfig, collect_counts

from oracles import brute_force_robust, build_imdp, chain_value, random_interval_doc, row_vertices


def chain_imdps(n=3, seed=0, n_traj=200):
    m = build_benchmark("chain")
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        inst = instantiate(m, {"p": float(rng.beta(5, 5))})
        c = collect_counts(inst, BehaviorPolicy(), TrajectoryConfig(n_traj, 40), rng)
        out.append(learn_pac_imdp(m, c, PacConfig(1e-2)))
    return m, out


def test_merge_examples():
    m = build_benchmark("chain")
    n = m.n_transitions
    a = IntervalMDP(m.topology, np.full(n, 0.2), np.full(n, 0.9))
    lo_b, hi_b = np.full(n, 0.3), np.full(n, 0.95)
    b = IntervalMDP(m.topology, lo_b, hi_b)
    ab = merge(a, b)
    assert np.all(ab.lo == 0.2) and np.all(ab.hi == 0.95)
    aa = merge(a, a)
    assert np.array_equal(aa.lo, a.lo) and np.array_equal(aa.hi, a.hi)


def test_merge_contains_members():
    m, imdps = chain_imdps()
    merged = merge_all(imdps)
    for im in imdps:
        assert np.all(merged.lo <= im.lo) and np.all(merged.hi >= im.hi)


def test_worst_case_examples():
    assert worst_case_distribution([3, 1], [0.4, 0.6], [0.4, 0.6]).tolist() == [0.4, 0.6]
    assert np.allclose(worst_case_distribution([0, 1], [0.3, 0.3], [0.7, 0.7]), [0.7, 0.3])
    v = np.array([0, 0.5, 1])
    lo, hi = np.array([0.1, 0.2, 0.1]), np.array([0.5, 0.6, 0.8])
    p = worst_case_distribution(v, lo, hi)
    best = min(float(q @ v) for q in row_vertices(lo, hi))
    assert float(p @ v) == pytest.approx(best, abs=1e-9)
    assert p.sum() == pytest.approx(1.0, abs=1e-15)
    with pytest.raises(ValueError):
        worst_case_distribution([0, 1], [0.6, 0.6], [0.7, 0.7])


@settings(max_examples=200, deadline=None)
@given(st.integers(2, 5), st.integers(0, 2**32 - 1), st.booleans())
def test_worst_case_matches_vertices(m, seed, minimize):
    rng = np.random.default_rng(seed)
    p = rng.dirichlet(np.ones(m))
    lo = np.maximum(p - rng.uniform(0, 0.3, m), 1e-3)
    lo = np.minimum(lo, p)
    hi = np.minimum(p + rng.uniform(0, 0.3, m), 1.0)
    v = rng.normal(size=m)
    q = worst_case_distribution(v, lo, hi, minimize)
    assert np.all(q >= lo - 1e-12) and np.all(q <= hi + 1e-12)
    assert q.sum() == pytest.approx(1.0, abs=1e-12)
    vals = [float(x @ v) for x in row_vertices(lo, hi)]
    assert float(q @ v) == pytest.approx(min(vals) if minimize else max(vals), abs=1e-9)


def test_vectorised_adversary_agrees():
    m, imdps = chain_imdps(1)
    im = imdps[0]
    topo = m.topology
    rng = np.random.default_rng(4)
    q = rng.normal(size=topo.n_transitions)
    p = adversary_probs(q, im.lo, im.hi, topo, minimize=True)
    for c in range(topo.n_choices):
        a, b = topo.choice_ptr[c], topo.choice_ptr[c + 1]
        ref = worst_case_distribution(q[a:b], im.lo[a:b], im.hi[a:b])
        assert np.allclose(p[a:b], ref, atol=1e-12)


def _goal_doc(lo, hi):
    doc = {
        "states": 3, "initial": {"0": 1}, "actions": {"0": ["a"], "1": ["a"], "2": ["a"]},
        "parameters": {}, "objective": {"kind": "reach", "target": [1]},
        "transitions": [{"s": 0, "a": "a", "to": 1, "expr": "0.5"},
                        {"s": 0, "a": "a", "to": 2, "expr": "0.5"},
                        {"s": 1, "a": "a", "to": 1, "expr": "1"},
                        {"s": 2, "a": "a", "to": 2, "expr": "1"}],
    }
    return build_imdp(doc, [lo, 1 - hi, 1, 1], [hi, 1 - lo, 1, 1])


def test_single_step_adversary():
    im = _goal_doc(0.3, 0.7)
    assert robust_value_iteration(im).value == pytest.approx(0.3, abs=1e-12)
    assert robust_value_iteration(im, pessimistic=False).value == pytest.approx(0.7, abs=1e-12)


def test_singleton_matches_exact():
    for name, theta in [("chain", {"p": 0.37}), ("betting", {"p": 0.85}),
                        ("aircraft", {"p": 0.8, "q": 0.3})]:
        m = build_benchmark(name)
        inst = instantiate(m, theta)
        point = IntervalMDP.point(m.topology, inst.probs)
        r = robust_value_iteration(point)
        assert r.value == pytest.approx(exact_policy_value(inst), abs=1e-9, rel=1e-12)
        again = robust_value_iteration(point, optimize=False, policy=r.policy)
        assert again.value == pytest.approx(r.value, abs=1e-9, rel=1e-12)


def test_chain_forward_policy_linear_solve():
    """Expected steps under "always a" equal the closed form of the absorbing chain."""
    m = build_benchmark("chain")
    p = 0.6
    inst = instantiate(m, {"p": p})
    pol = Policy.from_actions(m.topology, {s: "a" for s in range(7)})
    expected = (1 / p ** 6 - 1) / (1 - p)
    assert exact_policy_value(inst, policy=pol) == pytest.approx(expected, rel=1e-9)
    half = instantiate(m, {"p": 0.5})
    assert exact_policy_value(half, policy=pol) == pytest.approx(126.0, rel=1e-12)


def test_trivial_reach_values():
    im = _goal_doc(0.4, 0.4)
    r = robust_value_iteration(im)
    assert r.values[1] == 1.0
    assert r.values[2] == 0.0


@pytest.mark.parametrize("seed", range(20))
def test_random_imdps_against_oracle(seed):
    rng = np.random.default_rng(seed)
    doc, lo, hi = random_interval_doc(rng)
    im = build_imdp(doc, lo, hi)
    r = robust_value_iteration(im)
    oracle, random_vals = brute_force_robust(im, n_random=50, rng=rng)
    assert r.value == pytest.approx(oracle, abs=1e-6)
    sign = 1 if im.objective.maximize else -1
    assert all(sign * (v - r.value) >= -1e-9 for v in random_vals)


@pytest.mark.parametrize("seed", range(10))
def test_fixed_policy_soundness(seed):
    """Robust value of a fixed policy never beats its value on included MDPs."""
    rng = np.random.default_rng(100 + seed)
    doc, lo, hi = random_interval_doc(rng)
    im = build_imdp(doc, lo, hi)
    topo = im.topology
    choices = [int(rng.integers(topo.state_ptr[s], topo.state_ptr[s + 1])) for s in range(topo.n_states)]
    pol = Policy.deterministic(topo, choices)
    r = robust_value_iteration(im, optimize=False, policy=pol)
    oracle, random_vals = brute_force_robust(im, n_random=200, rng=rng, choices=choices)
    assert r.value == pytest.approx(oracle, abs=1e-6)
    sign = 1 if im.objective.maximize else -1
    assert all(sign * (v - r.value) >= -1e-9 for v in random_vals)


def test_randomized_policy_evaluation():
    m, imdps = chain_imdps(1, n_traj=2000)
    im = imdps[0]
    pol = Policy.uniform(m.topology)
    r = robust_value_iteration(im, optimize=False, policy=pol)
    det = robust_value_iteration(im)
    assert r.value >= det.value - 1e-9  # minimising cost: the optimum is no worse


def test_merge_monotonicity():
    m, imdps = chain_imdps(2, seed=3, n_traj=3000)
    pol = robust_value_iteration(imdps[0]).policy
    va = robust_value_iteration(imdps[0], optimize=False, policy=pol).value
    vb = robust_value_iteration(imdps[1], optimize=False, policy=pol).value
    vm = robust_value_iteration(merge(*imdps), optimize=False, policy=pol).value
    assert vm >= max(va, vb) - 1e-9  # cost objective: merged is more pessimistic


def test_optimal_policy_reevaluates():
    m, imdps = chain_imdps(3, seed=5, n_traj=2000)
    merged = merge_all(imdps)
    r = robust_value_iteration(merged)
    assert r.policy.is_deterministic
    again = robust_value_iteration(merged, optimize=False, policy=r.policy)
    assert again.value == pytest.approx(r.value, rel=1e-9)


def test_improper_expected_reward():
    doc = {
        "states": 2, "initial": {"0": 1}, "actions": {"0": ["loop"], "1": ["a"]},
        "parameters": {}, "rewards": {"0": 1},
        "objective": {"kind": "exp_reward", "target": [1], "direction": "min"},
        "transitions": [{"s": 0, "a": "loop", "to": 0, "expr": "1"},
                        {"s": 1, "a": "a", "to": 1, "expr": "1"}],
    }
    m = parse_model(doc)
    with pytest.raises(PropernessError):
        robust_value_iteration(IntervalMDP.point(m.topology, np.ones(2)))


def test_policy_json_round_trip():
    m = build_benchmark("chain")
    det = Policy.from_json({str(s): "b" for s in range(7)}, m.topology)
    assert det.is_deterministic and det.action(3) == "b"
    assert Policy.from_json(det.to_json(), m.topology) == det
    mixed = Policy.from_json({str(s): {"a": 0.25, "c": 0.75} for s in range(7)}, m.topology)
    assert not mixed.is_deterministic
    assert Policy.from_json(mixed.to_json(), m.topology) == mixed
    with pytest.raises(ValueError):
        Policy.from_json({"0": "z"}, m.topology)
    with pytest.raises(ValueError):
        Policy.from_json({"0": {"a": 0.5}}, m.topology)


def test_exact_values_optimum_dominates_policies():
    m = build_benchmark("chain")
    inst = instantiate(m, {"p": 0.3})
    V, pol = exact_values(inst)
    best = exact_policy_value(inst)
    for acts in itertools.product("abc", repeat=2):
        mapping = {s: acts[s % 2] for s in range(7)}
        assert exact_policy_value(inst, policy=Policy.from_actions(m.topology, mapping)) >= best - 1e-9
