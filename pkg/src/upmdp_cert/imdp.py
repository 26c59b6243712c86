"""Robust dynamic programming on interval MDPs.

The adversary resolves each state-action row independently (rectangular
uncertainty).  Its inner problem is solved greedily: sort successors by
value and pour the free mass onto the best ones for the adversary.

Values are computed in two stages.  Value iteration gives a warm start and
policy iteration then makes it exact: for a fixed agent policy the
adversary is improved by policy iteration over its vertex choices, each
step being one sparse linear solve.  Because every interval lower bound is
positive, all included MDPs share one support graph, so the qualitative
sets (probability 0, probability 1, improper states) are computed once on
that graph and every linear system is nonsingular.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
from scipy import sparse
from scipy.sparse.linalg import spsolve

from .errors import ConvergenceError, ModelError, PropernessError
from .learn import IntervalMDP
from .model import EvaluationSpec, MDPInstance, Topology

__all__ = [
    "Policy",
    "RobustResult",
    "merge",
    "merge_all",
    "worst_case_distribution",
    "adversary_probs",
    "robust_value_iteration",
    "exact_values",
    "exact_policy_value",
    "prob0_max",
    "prob0_min",
    "prob1_max",
    "prob1_min",
]

TOL = 1e-9
MAX_ITER = 100_000
# value iteration only warm-starts policy iteration
WARM_ITER = 200


# --------------------------------------------------------------------------
# policies


class Policy:
    """Memoryless policy stored as one probability per choice."""

    def __init__(self, topology: Topology, weights):
        w = np.array(weights, dtype=float)
        if w.shape != (topology.n_choices,):
            raise ValueError("policy weights must have one entry per choice")
        if np.any(w < 0) or not np.all(np.isfinite(w)):
            raise ValueError("policy weights must be nonnegative")
        sums = np.add.reduceat(w, topology.state_ptr[:-1])
        bad = np.abs(sums - 1.0) > 1e-12
        if bad.any():
            raise ValueError(f"policy distribution at state {int(np.flatnonzero(bad)[0])} does not sum to 1")
        w.setflags(write=False)
        self.topology = topology
        self.weights = w

    @classmethod
    def deterministic(cls, topology: Topology, choices) -> "Policy":
        """``choices[s]`` is the global choice index taken in state ``s``."""
        choices = np.asarray(choices, dtype=np.int64)
        if np.any(topology.choice_state[choices] != np.arange(topology.n_states)):
            raise ValueError("chosen choice does not belong to its state")
        w = np.zeros(topology.n_choices)
        w[choices] = 1.0
        return cls(topology, w)

    @classmethod
    def uniform(cls, topology: Topology) -> "Policy":
        n_act = np.diff(topology.state_ptr)
        return cls(topology, 1.0 / n_act[topology.choice_state])

    @classmethod
    def from_actions(cls, topology: Topology, mapping) -> "Policy":
        """Build from ``state -> action`` or ``state -> {action: prob}``.

        States missing from the mapping are an error unless they have a
        single action.
        """
        w = np.zeros(topology.n_choices)
        for s in range(topology.n_states):
            entry = mapping.get(s, mapping.get(str(s)))
            if entry is None:
                if topology.state_ptr[s + 1] - topology.state_ptr[s] == 1:
                    w[topology.state_ptr[s]] = 1.0
                    continue
                raise ModelError(f"policy does not define state {s}")
            dist = entry if isinstance(entry, dict) else {entry: 1.0}
            for a, pr in dist.items():
                try:
                    c = topology.choice_index(s, str(a))
                except KeyError:
                    raise ModelError(f"policy uses action {a!r} not enabled in state {s}") from None
                w[c] += float(pr)
        try:
            return cls(topology, w)
        except ValueError as exc:
            raise ModelError(str(exc)) from None

    @classmethod
    def from_json(cls, doc, topology: Topology) -> "Policy":
        if isinstance(doc, (str, bytes)):
            doc = json.loads(doc)
        return cls.from_actions(topology, doc)

    def to_json(self) -> dict:
        topo = self.topology
        out = {}
        for s in range(topo.n_states):
            a, b = topo.state_ptr[s], topo.state_ptr[s + 1]
            w = self.weights[a:b]
            if np.count_nonzero(w) == 1:
                out[str(s)] = topo.choice_action[a + int(np.argmax(w))]
            else:
                out[str(s)] = {topo.choice_action[a + i]: float(w[i]) for i in np.flatnonzero(w)}
        return out

    @property
    def is_deterministic(self) -> bool:
        return bool(np.all((self.weights == 0) | (self.weights == 1)))

    def choices(self) -> np.ndarray:
        """Chosen choice index per state (deterministic policies only)."""
        if not self.is_deterministic:
            raise ValueError("policy is randomized")
        return np.flatnonzero(self.weights == 1.0)

    def action(self, s):
        return self.topology.choice_action[self.choices()[s]]

    def __eq__(self, other):
        return isinstance(other, Policy) and self.topology.same_graph(other.topology) \
            and np.array_equal(self.weights, other.weights)

    def __repr__(self):
        kind = "deterministic" if self.is_deterministic else "randomized"
        return f"Policy({kind}, states={self.topology.n_states})"


@dataclass(frozen=True, eq=False)
class RobustResult:
    values: np.ndarray
    value: float
    policy: Policy | None
    iterations: int
    residual: float
    adversary: np.ndarray | None = None


# --------------------------------------------------------------------------
# merging


def merge(a: IntervalMDP, b: IntervalMDP) -> IntervalMDP:
    """Pointwise interval hull of two IMDPs over the same graph."""
    if not a.topology.same_graph(b.topology):
        raise ModelError("cannot merge interval MDPs with different supports")
    return IntervalMDP(a.topology, np.minimum(a.lo, b.lo), np.maximum(a.hi, b.hi),
                       {"method": "merge", "members": 2})


def merge_all(imdps) -> IntervalMDP:
    imdps = list(imdps)
    if not imdps:
        raise ValueError("nothing to merge")
    topo = imdps[0].topology
    for m in imdps[1:]:
        if not topo.same_graph(m.topology):
            raise ModelError("cannot merge interval MDPs with different supports")
    lo = np.min([m.lo for m in imdps], axis=0)
    hi = np.max([m.hi for m in imdps], axis=0)
    return IntervalMDP(topo, lo, hi, {"method": "merge", "members": len(imdps),
                                      "learner": imdps[0].provenance.get("method")})


# --------------------------------------------------------------------------
# inner problem


def worst_case_distribution(values, lo, hi, minimize: bool = True) -> np.ndarray:
    """Distribution inside ``[lo, hi]`` minimising (or maximising) ``p @ values``.

    Successors are visited from the lowest value (highest when maximising),
    ties by position, and each receives as much mass above its lower bound
    as remains.

    >>> worst_case_distribution([0, 1], [0.3, 0.3], [0.7, 0.7]).tolist()
    [0.7, 0.3]
    """
    v = np.asarray(values, dtype=float)
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    if lo.sum() > 1 + 1e-12 or hi.sum() < 1 - 1e-12 or np.any(lo > hi):
        raise ValueError("intervals admit no probability distribution")
    order = np.argsort(v if minimize else -v, kind="stable")
    p = lo.copy()
    free = 1.0 - lo.sum()
    last = order[0]
    for i in order:
        if free <= 0:
            break
        add = min(hi[i] - lo[i], free)
        p[i] += add
        free -= add
        last = i
    p[last] = 1.0 - (p.sum() - p[last])
    return p


def adversary_probs(q, lo, hi, topo: Topology, minimize: bool) -> np.ndarray:
    """Vectorised :func:`worst_case_distribution` for every choice at once.

    ``q[t]`` is the value the adversary sees behind transition ``t``.
    """
    key = q if minimize else -q
    order = np.lexsort((np.arange(q.size), key, topo.trans_choice))
    slack = (hi - lo)[order]
    excl = np.cumsum(slack) - slack
    ptr = topo.choice_ptr[:-1]
    ch = topo.trans_choice[order]
    excl = excl - excl[ptr][ch]
    budget = 1.0 - np.add.reduceat(lo, ptr)
    add = np.clip(budget[ch] - excl, 0.0, slack)
    p = np.empty_like(lo)
    p[order] = lo[order] + add
    return p


# --------------------------------------------------------------------------
# qualitative analysis on the support graph

def _any_succ(topo, mask, enabled):
    hit = np.logical_or.reduceat(mask[topo.succ], topo.choice_ptr[:-1])
    if enabled is not None:
        hit &= enabled
    return hit


def _e_reach(topo, seed, allowed, enabled=None):
    """States that can reach ``seed`` moving only through ``allowed`` states."""
    X = seed.copy()
    while True:
        ch = _any_succ(topo, X, enabled)
        st = np.logical_or.reduceat(ch, topo.state_ptr[:-1])
        Xn = X | (st & allowed)
        if np.array_equal(Xn, X):
            return X
        X = Xn


def _stop_sets(topo, spec):
    target = np.zeros(topo.n_states, bool)
    target[list(spec.target)] = True
    avoid = np.zeros(topo.n_states, bool)
    if spec.avoid:
        avoid[list(spec.avoid)] = True
    return target, avoid


def prob0_max(topo, target, avoid, enabled=None):
    """States where even the best policy reaches ``target`` with probability 0."""
    return ~_e_reach(topo, target, ~(target | avoid), enabled)


def prob0_min(topo, target, avoid, enabled=None):
    """States where some policy avoids ``target`` almost surely."""
    X = ~target
    while True:
        inside = np.logical_and.reduceat(X[topo.succ], topo.choice_ptr[:-1])
        if enabled is not None:
            inside &= enabled
        st = np.logical_or.reduceat(inside, topo.state_ptr[:-1])
        Xn = X & (st | avoid)
        if np.array_equal(Xn, X):
            return X
        X = Xn


def prob1_min(topo, target, avoid, enabled=None):
    """States where every policy reaches ``target`` almost surely."""
    bad = prob0_min(topo, target, avoid, enabled)
    return ~_e_reach(topo, bad, ~(target | avoid), enabled)


def prob1_max(topo, target, avoid, enabled=None):
    """States where some policy reaches ``target`` almost surely."""
    U = np.ones(topo.n_states, bool)
    free = ~(target | avoid)
    while True:
        stay = np.logical_and.reduceat(U[topo.succ], topo.choice_ptr[:-1])
        if enabled is not None:
            stay &= enabled
        R = target.copy()
        while True:
            ok = stay & np.logical_or.reduceat(R[topo.succ], topo.choice_ptr[:-1])
            st = np.logical_or.reduceat(ok, topo.state_ptr[:-1])
            Rn = R | (st & free)
            if np.array_equal(Rn, R):
                break
            R = Rn
        if np.array_equal(R, U):
            return U
        U = R


def _attractor_rank(topo, target, region, enabled=None):
    """BFS distance to ``target`` using choices that stay inside ``region``.

    Returns per-state rank and, per state, a choice that strictly decreases
    it (or -1 where none exists).
    """
    rank = np.full(topo.n_states, np.iinfo(np.int64).max, dtype=np.int64)
    rank[target] = 0
    best = np.full(topo.n_states, -1, dtype=np.int64)
    stay = np.logical_and.reduceat(region[topo.succ], topo.choice_ptr[:-1])
    if enabled is not None:
        stay &= enabled
    reached = target.copy()
    level = 0
    while True:
        hit = stay & np.logical_or.reduceat(reached[topo.succ], topo.choice_ptr[:-1])
        new_states = np.zeros(topo.n_states, bool)
        cs = np.flatnonzero(hit)
        cs = cs[~reached[topo.choice_state[cs]] & region[topo.choice_state[cs]]]
        if cs.size == 0:
            return rank, best
        level += 1
        # lowest choice index per newly reached state
        st = topo.choice_state[cs]
        first = np.unique(st, return_index=True)[1]
        best[st[first]] = cs[first]
        new_states[st] = True
        rank[new_states] = level
        reached |= new_states


# --------------------------------------------------------------------------
# shared evaluation machinery


class _Problem:
    """Fixed states, targets and properness bookkeeping for one query.

    Without ``enabled`` the agent is free and the qualitative sets follow
    the optimisation direction.  With ``enabled`` (the support of a fixed
    policy) the sets are those of the induced Markov chain.
    """

    def __init__(self, topo: Topology, spec: EvaluationSpec, maximize: bool,
                 enabled=None):
        self.topo = topo
        self.spec = spec
        self.reward = spec.kind == "exp_reward"
        target, avoid = _stop_sets(topo, spec)
        self.target, self.avoid = target, avoid
        free = ~(target | avoid)
        if enabled is not None:
            zero = ~_e_reach(topo, target, free, enabled)
            one = ~_e_reach(topo, zero, free, enabled)
        elif self.reward:
            zero = None
            one = prob1_min(topo, target, avoid) if maximize else prob1_max(topo, target, avoid)
        else:
            zero = prob0_max(topo, target, avoid) if maximize else prob0_min(topo, target, avoid)
        val = np.zeros(topo.n_states)
        fixed = target | avoid
        if self.reward:
            infinite = ~one & ~target
            val[infinite] = np.inf
            fixed = fixed | infinite
        else:
            val[target] = 1.0
            fixed = fixed | zero
        self.fixed = fixed
        self.fixed_val = val
        self.free = np.flatnonzero(~fixed)

    def check_proper(self, what="target"):
        if not self.reward:
            return
        bad = np.isinf(self.fixed_val) & (self.topo.initial > 0)
        if bad.any():
            raise PropernessError(
                f"expected reward is unbounded: from initial state {int(np.flatnonzero(bad)[0])} "
                f"the {what} is not reached with probability 1")

    def q(self, V):
        """Value behind each transition."""
        v = V[self.topo.succ]
        if self.reward:
            return self.topo.trans_rewards + v
        return v

    def choice_values(self, V, p):
        topo = self.topo
        pq = p * self.q(V)
        cv = np.add.reduceat(pq, topo.choice_ptr[:-1])
        if self.reward:
            cv = cv + topo.state_rewards[topo.choice_state]
        return cv


def _aggregate(cv, topo, maximize):
    op = np.maximum if maximize else np.minimum
    return op.reduceat(cv, topo.state_ptr[:-1])


def _solve_chain(prob: _Problem, p, weights):
    """Exact values of the Markov chain with transition probabilities
    ``p * weights[choice]``; states outside ``prob.free`` keep their fixed
    values."""
    topo = prob.topo
    n = topo.n_states
    w = p * weights[topo.trans_choice]
    rows = topo.choice_state[topo.trans_choice]
    keep = w > 0
    P = sparse.csr_matrix((w[keep], (rows[keep], topo.succ[keep])), shape=(n, n))
    V = prob.fixed_val.copy()
    free = prob.free
    if free.size == 0:
        return V
    b = np.zeros(n)
    if prob.reward:
        b = topo.state_rewards * np.add.reduceat(weights, topo.state_ptr[:-1])
        b = b + np.bincount(rows, weights=w * topo.trans_rewards, minlength=n)
    Pff = P[free][:, free]
    fixed_idx = np.flatnonzero(prob.fixed)
    rhs = b[free]
    if fixed_idx.size:
        fv = prob.fixed_val[fixed_idx]
        fin = np.isfinite(fv)
        rhs = rhs + P[free][:, fixed_idx[fin]] @ fv[fin]
    A = sparse.identity(free.size, format="csc") - Pff.tocsc()
    if free.size <= 64:
        x = np.linalg.solve(A.toarray(), rhs)
    else:
        x = spsolve(A, rhs)
    V[free] = x
    return V


def _improve_keep(old_choice_val, new_choice_val, maximize, scale):
    """True where the new value is strictly better than the old one."""
    eps = 1e-12 * scale
    if maximize:
        return new_choice_val > old_choice_val + eps
    return new_choice_val < old_choice_val - eps


# --------------------------------------------------------------------------
# robust evaluation


def _robust_policy_eval(prob, lo, hi, weights, maximize, pessimistic, V0, max_rounds=1000):
    """Exact robust value of a fixed agent policy by adversary policy iteration."""
    topo = prob.topo
    adv_min = maximize == pessimistic
    V = V0.copy()
    V[~np.isfinite(V) & ~prob.fixed] = 0.0
    p = adversary_probs(prob.q(V), lo, hi, topo, adv_min)
    for it in range(max_rounds):
        V = _solve_chain(prob, p, weights)
        q = prob.q(V)
        p_new = adversary_probs(q, lo, hi, topo, adv_min)
        old = np.add.reduceat(p * q, topo.choice_ptr[:-1])
        new = np.add.reduceat(p_new * q, topo.choice_ptr[:-1])
        finite = np.isfinite(old) & np.isfinite(new)
        scale = max(1.0, float(np.max(np.abs(V[np.isfinite(V)]), initial=0.0)))
        # adversary improves when its row value moves in its own direction
        better = finite & _improve_keep(old, new, not adv_min, scale)
        if not better.any():
            return V, p, it + 1
        sel = better[topo.trans_choice]
        p = np.where(sel, p_new, p)
    raise ConvergenceError("adversary policy iteration did not stabilise")


def _bellman(prob, V, lo, hi, maximize, pessimistic, weights=None):
    topo = prob.topo
    adv_min = maximize == pessimistic
    p = adversary_probs(prob.q(V), lo, hi, topo, adv_min)
    cv = prob.choice_values(V, p)
    if weights is None:
        out = _aggregate(cv, topo, maximize)
    else:
        with np.errstate(invalid="ignore"):
            out = np.add.reduceat(np.where(weights > 0, weights * cv, 0.0), topo.state_ptr[:-1])
    Vn = np.where(prob.fixed, prob.fixed_val, out)
    return Vn, cv, p


def _residual(prob, V, Vn):
    m = ~prob.fixed & np.isfinite(V) & np.isfinite(Vn)
    return float(np.max(np.abs(Vn - V)[m], initial=0.0))


def _value_iteration(prob, lo, hi, maximize, pessimistic, tol, max_iter, weights=None):
    V = prob.fixed_val.copy()
    V[~prob.fixed] = 0.0
    res = np.inf
    it = 0
    for it in range(1, max_iter + 1):
        Vn, _, _ = _bellman(prob, V, lo, hi, maximize, pessimistic, weights)
        res = _residual(prob, V, Vn)
        V = Vn
        if res <= tol:
            break
    return V, it, res


def _greedy(prob, cv, V, maximize, tie_rank=None):
    """Per state, the best choice; near-ties go to the lowest ``tie_rank``
    and then to the lowest choice index."""
    topo = prob.topo
    best = _aggregate(cv, topo, maximize)
    scale = max(1.0, float(np.max(np.abs(V[np.isfinite(V)]), initial=0.0)))
    with np.errstate(invalid="ignore"):
        gap = np.abs(cv - best[topo.choice_state])
    near = (gap <= 1e-10 * scale) | (cv == best[topo.choice_state])
    key = np.where(near, 0, 1).astype(np.int64)
    rank = np.zeros(topo.n_choices, np.int64) if tie_rank is None else tie_rank
    order = np.lexsort((np.arange(topo.n_choices), rank, key, topo.choice_state))
    first = np.r_[True, topo.choice_state[order][1:] != topo.choice_state[order][:-1]]
    return order[first]


def _choice_rank(prob, maximize):
    """Choice-level progress rank toward the target (for tie-breaking)."""
    topo = prob.topo
    region = ~prob.fixed | prob.target
    if prob.reward:
        region &= np.isfinite(prob.fixed_val)
    srank, _ = _attractor_rank(topo, prob.target, region)
    succ_rank = srank[topo.succ]
    crank = np.minimum.reduceat(succ_rank, topo.choice_ptr[:-1])
    if prob.reward and not maximize:
        stays = np.logical_and.reduceat(region[topo.succ], topo.choice_ptr[:-1])
        crank = np.where(stays, crank, np.iinfo(np.int64).max)
    return crank


def _is_proper(prob, choices):
    topo = prob.topo
    enabled = np.zeros(topo.n_choices, bool)
    enabled[choices] = True
    target, avoid = prob.target, prob.avoid
    good = prob1_min(topo, target, avoid, enabled)
    need = ~prob.fixed
    return bool(np.all(good[need]))


def robust_value_iteration(imdp: IntervalMDP, spec: EvaluationSpec | None = None,
                           optimize: bool = True, policy: Policy | None = None,
                           tol: float = TOL, max_iter: int = MAX_ITER,
                           pessimistic: bool = True) -> RobustResult:
    """Robust value of an interval MDP.

    With ``optimize`` the agent picks actions in ``spec.direction`` and a
    deterministic optimal policy is returned; otherwise ``policy`` is
    evaluated.  The adversary works against the agent when ``pessimistic``
    (the default) and with it otherwise.
    """
    spec = spec or imdp.objective
    topo = imdp.topology
    maximize = spec.maximize
    lo, hi = imdp.lo, imdp.hi
    if not optimize:
        if policy is None:
            raise ValueError("policy evaluation needs a policy")
        if not policy.topology.same_graph(topo):
            raise ModelError("policy does not match the interval MDP")
        weights = policy.weights
        prob = _Problem(topo, spec, maximize, enabled=weights > 0)
        prob.check_proper("target under this policy")
        V0, it, _ = _value_iteration(prob, lo, hi, maximize, pessimistic, 1e-6, min(max_iter, WARM_ITER), weights)
        V, p, rounds = _robust_policy_eval(prob, lo, hi, weights, maximize, pessimistic, V0)
        Vn, _, _ = _bellman(prob, V, lo, hi, maximize, pessimistic, weights)
        res = _residual(prob, V, Vn)
        if res > tol:
            raise ConvergenceError(f"robust evaluation residual {res:.3e} above tolerance", res)
        return RobustResult(V, float(topo.initial @ _init_safe(V, topo)), policy, it + rounds, res, p)

    prob = _Problem(topo, spec, maximize)
    prob.check_proper()
    V, it, res = _value_iteration(prob, lo, hi, maximize, pessimistic, min(tol, 1e-6),
                                  min(max_iter, WARM_ITER))
    crank = _choice_rank(prob, maximize)
    _, cv, _ = _bellman(prob, V, lo, hi, maximize, pessimistic)
    choices = _greedy(prob, cv, V, maximize, crank)
    if prob.reward and not maximize and not _is_proper(prob, choices):
        choices = _greedy(prob, crank.astype(float), V, False)
    for rounds in range(1, 1001):
        w = np.zeros(topo.n_choices)
        w[choices] = 1.0
        cprob = _Problem(topo, spec, maximize, enabled=w > 0)
        V, _, _ = _robust_policy_eval(cprob, lo, hi, w, maximize, pessimistic, V)
        _, cv, _ = _bellman(prob, V, lo, hi, maximize, pessimistic)
        scale = max(1.0, float(np.max(np.abs(V[np.isfinite(V)]), initial=0.0)))
        cur = cv[choices]
        cand = _greedy(prob, cv, V, maximize, crank)
        better = _improve_keep(cur, cv[cand], maximize, scale)
        better &= ~prob.fixed
        if not better.any():
            break
        choices = np.where(better, cand, choices)
    else:
        raise ConvergenceError("robust policy iteration did not stabilise")
    Vn, _, _ = _bellman(prob, V, lo, hi, maximize, pessimistic)
    res = _residual(prob, V, Vn)
    if res > tol:
        raise ConvergenceError(f"robust value iteration residual {res:.3e} above tolerance", res)
    pol = Policy.deterministic(topo, choices)
    return RobustResult(V, float(topo.initial @ _init_safe(V, topo)), pol, it + rounds, res)


def _init_safe(V, topo):
    # initial @ V without nan from 0 * inf on unreachable improper states
    return np.where(topo.initial > 0, V, 0.0)


# --------------------------------------------------------------------------
# concrete MDPs (ground truth)


def _exact_eval(prob, probs, weights):
    topo = prob.topo
    n = topo.n_states
    w = probs * weights[topo.trans_choice]
    rows = topo.choice_state[topo.trans_choice]
    P = np.zeros((n, n)) if n <= 400 else None
    free = prob.free
    V = prob.fixed_val.copy()
    if free.size == 0:
        return V
    b = np.zeros(n)
    if prob.reward:
        b = topo.state_rewards * np.add.reduceat(weights, topo.state_ptr[:-1]) \
            + np.bincount(rows, weights=w * topo.trans_rewards, minlength=n)
    fin_fixed = prob.fixed & np.isfinite(prob.fixed_val)
    fv = np.where(fin_fixed, prob.fixed_val, 0.0)
    rhs = b + np.bincount(rows, weights=w * fv[topo.succ], minlength=n)
    if P is not None:
        np.add.at(P, (rows, topo.succ), w)
        A = np.eye(free.size) - P[np.ix_(free, free)]
        V[free] = np.linalg.solve(A, rhs[free])
    else:
        S = sparse.csr_matrix((w, (rows, topo.succ)), shape=(n, n))
        A = sparse.identity(free.size, format="csc") - S[free][:, free].tocsc()
        V[free] = spsolve(A, rhs[free])
    return V


def exact_values(mdp: MDPInstance, spec: EvaluationSpec | None = None,
                 policy: Policy | None = None, tol: float = TOL,
                 max_iter: int = MAX_ITER):
    """Per-state values and the (given or optimal) policy on a concrete MDP.

    A fixed policy is evaluated by one linear solve on the induced chain.
    Without a policy, plain value iteration is followed by policy
    iteration.
    """
    spec = spec or mdp.objective
    topo = mdp.topology
    maximize = spec.maximize
    probs = np.asarray(mdp.probs, dtype=float)
    if policy is not None:
        if not policy.topology.same_graph(topo):
            raise ModelError("policy does not match the MDP")
        prob = _Problem(topo, spec, maximize, enabled=policy.weights > 0)
        prob.check_proper("target under this policy")
        return _exact_eval(prob, probs, policy.weights), policy

    prob = _Problem(topo, spec, maximize)
    prob.check_proper()
    V = prob.fixed_val.copy()
    V[~prob.fixed] = 0.0
    for _ in range(min(max_iter, WARM_ITER)):
        cv = prob.choice_values(V, probs)
        Vn = np.where(prob.fixed, prob.fixed_val, _aggregate(cv, topo, maximize))
        done = _residual(prob, V, Vn) <= 1e-6
        V = Vn
        if done:
            break
    crank = _choice_rank(prob, maximize)
    choices = _greedy(prob, prob.choice_values(V, probs), V, maximize, crank)
    if prob.reward and not maximize and not _is_proper(prob, choices):
        choices = _greedy(prob, crank.astype(float), V, False)
    for _ in range(1000):
        w = np.zeros(topo.n_choices)
        w[choices] = 1.0
        cprob = _Problem(topo, spec, maximize, enabled=w > 0)
        V = _exact_eval(cprob, probs, w)
        cv = prob.choice_values(V, probs)
        scale = max(1.0, float(np.max(np.abs(V[np.isfinite(V)]), initial=0.0)))
        cand = _greedy(prob, cv, V, maximize, crank)
        better = _improve_keep(cv[choices], cv[cand], maximize, scale) & ~prob.fixed
        if not better.any():
            break
        choices = np.where(better, cand, choices)
    else:
        raise ConvergenceError("policy iteration did not stabilise")
    Vn = np.where(prob.fixed, prob.fixed_val, _aggregate(prob.choice_values(V, probs), topo, maximize))
    res = _residual(prob, V, Vn)
    if res > tol:
        raise ConvergenceError(f"value iteration residual {res:.3e} above tolerance", res)
    return V, Policy.deterministic(topo, choices)


def exact_policy_value(mdp: MDPInstance, spec: EvaluationSpec | None = None,
                       policy: Policy | None = None) -> float:
    """Value at the initial distribution (optimal when ``policy`` is None)."""
    V, _ = exact_values(mdp, spec, policy)
    return float(mdp.topology.initial @ _init_safe(V, mdp.topology))
