"""Trajectory generation and transition counting.

Trajectories are simulated in lock-step batches: every active episode
advances one step per iteration, so the cost is dominated by a handful of
numpy calls per step instead of per-transition Python work.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from .errors import ModelError
from .model import MDPInstance, ParametricMDP, Topology

__all__ = [
    "BehaviorPolicy",
    "TrajectoryConfig",
    "CountTable",
    "Trajectories",
    "sample_trajectories",
    "collect_counts",
    "pool_tied_counts",
    "dump_trajectories",
    "load_trajectories",
    "counts_from_triples",
]


@dataclass(frozen=True)
class BehaviorPolicy:
    """How actions are picked while gathering data.

    ``kind`` is ``"uniform"``, ``"fixed"`` (follow ``policy``) or
    ``"epsilon"`` (follow ``policy``, but with probability ``epsilon`` pick
    uniformly among the enabled actions).  ``policy`` is anything with a
    per-choice ``weights`` array, e.g. :class:`upmdp_cert.imdp.Policy`,
    or such an array itself.
    """

    kind: str = "uniform"
    policy: object = None
    epsilon: float = 0.0

    def __post_init__(self):
        if self.kind not in ("uniform", "fixed", "epsilon"):
            raise ValueError(f"unknown behavior policy kind {self.kind!r}")
        if self.kind != "uniform" and self.policy is None:
            raise ValueError(f"{self.kind} behavior needs a policy")
        if not 0.0 <= self.epsilon <= 1.0:
            raise ValueError("epsilon must lie in [0, 1]")

    def choice_weights(self, topo: Topology) -> np.ndarray:
        n_act = np.diff(topo.state_ptr)
        uniform = 1.0 / n_act[topo.choice_state]
        if self.kind == "uniform":
            return uniform
        w = np.asarray(getattr(self.policy, "weights", self.policy), dtype=float)
        if w.shape != (topo.n_choices,):
            raise ValueError("behavior policy does not match the model's choices")
        if self.kind == "fixed":
            return w
        return (1.0 - self.epsilon) * w + self.epsilon * uniform


@dataclass(frozen=True)
class TrajectoryConfig:
    n_trajectories: int = 10_000
    max_length: int = 200
    stop_at_absorbing: bool = True
    batch_size: int = 20_000

    def __post_init__(self):
        if self.n_trajectories <= 0 or self.max_length <= 0 or self.batch_size <= 0:
            raise ValueError("trajectory counts and lengths must be positive")


@dataclass(frozen=True, eq=False)
class CountTable:
    """Visit counts ``#(s,a)`` and outcome counts ``#(s,a,s')``.

    ``trans_visits[t]`` is the visit count ``H`` that goes with transition
    ``t``; it equals ``choice_visits`` of the owning choice until counts
    are pooled across a tying class.
    """

    topology: Topology
    choice_visits: np.ndarray
    trans_counts: np.ndarray
    trans_visits: np.ndarray = None
    pooled: bool = False

    def __post_init__(self):
        cv = np.asarray(self.choice_visits, dtype=np.int64)
        tc = np.asarray(self.trans_counts, dtype=np.int64)
        topo = self.topology
        if cv.shape != (topo.n_choices,) or tc.shape != (topo.n_transitions,):
            raise ValueError("count arrays do not match the topology")
        tv = cv[topo.trans_choice] if self.trans_visits is None else np.asarray(self.trans_visits, np.int64)
        object.__setattr__(self, "choice_visits", cv)
        object.__setattr__(self, "trans_counts", tc)
        object.__setattr__(self, "trans_visits", tv)

    @classmethod
    def empty(cls, topo: Topology) -> "CountTable":
        return cls(topo, np.zeros(topo.n_choices, np.int64), np.zeros(topo.n_transitions, np.int64))

    def visits(self, s, a) -> int:
        return int(self.choice_visits[self.topology.choice_index(s, a)])

    def count(self, s, a, to) -> int:
        return int(self.trans_counts[self.topology.transition_index(s, a, to)])

    def is_consistent(self) -> bool:
        """Outcome counts of every (s, a) add up to its visit count."""
        sums = np.add.reduceat(self.trans_counts, self.topology.choice_ptr[:-1])
        return bool(np.array_equal(sums, self.choice_visits))

    def __add__(self, other: "CountTable") -> "CountTable":
        if self.pooled or other.pooled:
            raise ValueError("pooled tables cannot be added")
        return CountTable(self.topology, self.choice_visits + other.choice_visits,
                          self.trans_counts + other.trans_counts)


@dataclass(frozen=True, eq=False)
class Trajectories:
    """Recorded steps in episode order: ``episode[i]`` took transition ``trans[i]``."""

    topology: Topology
    episode: np.ndarray
    trans: np.ndarray = field(repr=False)

    def counts(self) -> CountTable:
        return _counts_from_transitions(self.topology, self.trans)


def _counts_from_transitions(topo: Topology, trans: np.ndarray) -> CountTable:
    tc = np.bincount(trans, minlength=topo.n_transitions).astype(np.int64)
    cv = np.bincount(topo.trans_choice[trans], minlength=topo.n_choices).astype(np.int64)
    return CountTable(topo, cv, tc)


def _alias_tables(weights, owner, n_owners):
    """Walker alias tables for one discrete distribution per owner.

    Owner ``o`` uses slots ``start[o]:start[o]+size[o]``; slot ``j`` keeps
    its own item with probability ``cut[j]`` and otherwise yields
    ``alias[j]``.  Items are indices into ``weights``.
    """
    size = np.bincount(owner, minlength=n_owners)
    start = np.concatenate([[0], np.cumsum(size)[:-1]])
    cut = np.ones(weights.size)
    alias = np.arange(weights.size)
    for o in range(n_owners):
        a, b = start[o], start[o] + size[o]
        w = weights[a:b]
        tot = w.sum()
        if tot <= 0:
            raise ValueError(f"no positive weight for state {o}")
        scaled = w * (size[o] / tot)
        small = [i for i in range(b - a) if scaled[i] < 1.0]
        large = [i for i in range(b - a) if scaled[i] >= 1.0]
        while small and large:
            s, l = small.pop(), large.pop()
            cut[a + s] = scaled[s]
            alias[a + s] = a + l
            scaled[l] -= 1.0 - scaled[s]
            (small if scaled[l] < 1.0 else large).append(l)
        # leftovers are 1 up to rounding
        for i in small + large:
            cut[a + i] = 1.0
    return start, size, cut, alias


def _stop_mask(topo: Topology, stop_at_absorbing: bool) -> np.ndarray:
    obj = topo.objective
    stop = np.zeros(topo.n_states, dtype=bool)
    stop[list(obj.target)] = True
    if obj.avoid:
        stop[list(obj.avoid)] = True
    if stop_at_absorbing:
        stop |= topo.absorbing_states()
    return stop


def _step_tables(instance, behavior, cfg):
    topo = instance.topology
    wchoice = behavior.choice_weights(topo)
    if np.any(wchoice < 0):
        raise ValueError("negative behavior weights")
    # One draw per step picks the (action, successor) pair jointly.
    wtrans = wchoice[topo.trans_choice] * np.asarray(instance.probs, float)
    owner = topo.choice_state[topo.trans_choice]
    tables = _alias_tables(wtrans, owner, topo.n_states)
    init_cdf = np.cumsum(topo.initial)
    init_cdf[-1] = 1.0
    return tables, init_cdf, _stop_mask(topo, cfg.stop_at_absorbing)


def _run_batches(instance, behavior, cfg, rng, on_step):
    topo = instance.topology
    (start, size, cut, alias), init_cdf, stop = _step_tables(instance, behavior, cfg)
    fsize = size.astype(float)
    succ = topo.succ
    done_eps = 0
    while done_eps < cfg.n_trajectories:
        m = min(cfg.batch_size, cfg.n_trajectories - done_eps)
        ep = np.arange(done_eps, done_eps + m)
        state = np.searchsorted(init_cdf, rng.random(m), side="right")
        state = np.minimum(state, topo.n_states - 1)
        active = ~stop[state]
        ep, state = ep[active], state[active]
        for _ in range(cfg.max_length):
            if state.size == 0:
                break
            # integer part picks the slot, fractional part the coin flip
            x = rng.random(state.size) * fsize[state]
            j = x.astype(np.int64)
            slot = start[state] + j
            t = np.where(x - j < cut[slot], slot, alias[slot])
            on_step(t, ep)
            state = succ[t]
            keep = ~stop[state]
            if not keep.all():
                state, ep = state[keep], ep[keep]
        done_eps += m


def sample_trajectories(instance: MDPInstance, behavior: BehaviorPolicy,
                        cfg: TrajectoryConfig, rng: np.random.Generator):
    """Run ``cfg.n_trajectories`` episodes and keep every step.

    An episode ends when it enters a target, avoid or absorbing state or
    after ``cfg.max_length`` steps.  Steps are returned ordered by episode,
    then time.  Use :func:`collect_counts` when only counts are needed.
    """
    steps_t, steps_ep = [], []

    def record(t, ep):
        steps_t.append(t)
        steps_ep.append(ep)

    _run_batches(instance, behavior, cfg, rng, record)
    trans = np.concatenate(steps_t) if steps_t else np.zeros(0, np.int64)
    eps = np.concatenate(steps_ep) if steps_ep else np.zeros(0, np.int64)
    order = np.argsort(eps, kind="stable")
    return Trajectories(instance.topology, eps[order], trans[order])


def collect_counts(instance: MDPInstance, behavior: BehaviorPolicy,
                   cfg: TrajectoryConfig, rng: np.random.Generator) -> CountTable:
    """Simulate trajectories and return the resulting :class:`CountTable`.

    Draws the same random numbers as :func:`sample_trajectories`, so both
    give identical counts for the same seed.
    """
    topo = instance.topology
    tc = np.zeros(topo.n_transitions, np.int64)

    def tally(t, ep):
        tc[:] += np.bincount(t, minlength=topo.n_transitions)

    _run_batches(instance, behavior, cfg, rng, tally)
    cv = np.add.reduceat(tc, topo.choice_ptr[:-1])
    return CountTable(topo, cv, tc)


def pool_tied_counts(counts: CountTable, tying, pmdp: ParametricMDP | None = None) -> CountTable:
    """Sum counts over each tying class.

    ``tying`` is a list of transition-index arrays (a partition, or a part
    of one); every member of a class ends up with the class total of
    outcome counts and of visit counts.  Transitions not covered by a class
    of size > 1 keep their counts.  When ``pmdp`` is given, classes are
    re-checked for structurally identical expressions.
    """
    tc = counts.trans_counts.copy()
    tv = counts.trans_visits.copy()
    seen = np.zeros(tc.size, dtype=bool)
    for members in tying:
        members = np.asarray(members, dtype=np.int64)
        if members.size == 0:
            continue
        if seen[members].any():
            raise ValueError("tying classes overlap")
        seen[members] = True
        if members.size == 1:
            continue
        if pmdp is not None and len({pmdp.expr_key(int(t)) for t in members}) > 1:
            raise ModelError("tying class mixes structurally different expressions")
        tc[members] = counts.trans_counts[members].sum()
        tv[members] = counts.trans_visits[members].sum()
    return CountTable(counts.topology, counts.choice_visits, tc, tv, pooled=True)


# --------------------------------------------------------------------------
# text dumps: one "s a s'" triple per line, a blank line between episodes;
# ``a`` is the index of the action within the state's action list.


def dump_trajectories(path, traj: Trajectories) -> int:
    topo = traj.topology
    c = topo.trans_choice[traj.trans]
    s = topo.choice_state[c]
    a = c - topo.state_ptr[s]
    s2 = topo.succ[traj.trans]
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w") as fh:
        prev = None
        for i in range(traj.trans.size):
            e = traj.episode[i]
            if prev is not None and e != prev:
                fh.write("\n")
            fh.write(f"{s[i]} {a[i]} {s2[i]}\n")
            prev = e
    return int(traj.trans.size)


def counts_from_triples(topo: Topology, triples) -> CountTable:
    """Counts from ``(s, action_index, s')`` integer triples."""
    arr = np.asarray(triples, dtype=np.int64).reshape(-1, 3)
    trans = np.empty(len(arr), dtype=np.int64)
    for i, (s, ai, s2) in enumerate(arr):
        if not 0 <= s < topo.n_states or not 0 <= ai < topo.state_ptr[s + 1] - topo.state_ptr[s]:
            raise ModelError(f"triple {i}: unknown state-action ({s}, {ai})")
        try:
            trans[i] = topo.transition_index(s, topo.actions(s)[ai], s2)
        except KeyError:
            raise ModelError(f"triple {i}: transition ({s}, {ai}) -> {s2} outside the known support") from None
    return _counts_from_transitions(topo, trans)


def load_trajectories(path, topo: Topology) -> CountTable:
    rows = []
    with open(path) as fh:
        for ln, line in enumerate(fh, 1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 3:
                raise ModelError(f"{path}:{ln}: expected 's a s2'")
            rows.append([int(x) for x in parts])
    return counts_from_triples(topo, rows)
