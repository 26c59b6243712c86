"""Parametric MDPs with a distribution over parameters.

A :class:`ParametricMDP` couples a fixed transition graph (the
:class:`Topology`, shared by every induced MDP) with one expression per
transition and a :class:`ParameterSpace`.  Fixing a valuation gives an
:class:`MDPInstance` via :func:`instantiate`.

All graph-shaped objects in this package (instances, interval MDPs, count
tables) index their transitions the same way as the topology they were
built from: choices (state-action pairs) are grouped by state, and
transitions are grouped by choice with successors in ascending order.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy import stats

from .errors import InstantiationError, ModelError
from .expr import Expr, ExprSyntaxError, parse_expr

__all__ = [
    "BetaDist",
    "UniformDist",
    "ParameterSpace",
    "EvaluationSpec",
    "Topology",
    "ParametricMDP",
    "MDPInstance",
    "GraphReport",
    "parse_model",
    "load_model",
    "serialize_model",
    "dumps_model",
    "sample_valuation",
    "check_valuation",
    "instantiate",
    "validate_graph_preservation",
    "default_probes",
    "models_equal",
    "ROW_TOL",
]

ROW_TOL = 1e-9


def _readonly(a, dtype=None):
    a = np.array(a, dtype=dtype)
    a.setflags(write=False)
    return a


# --------------------------------------------------------------------------
# parameter distributions


@dataclass(frozen=True)
class BetaDist:
    alpha: float
    beta: float

    def __post_init__(self):
        if not (self.alpha > 0 and self.beta > 0):
            raise ModelError(f"Beta parameters must be positive, got ({self.alpha}, {self.beta})")

    @property
    def support(self) -> tuple[float, float]:
        return (0.0, 1.0)

    open_support = True

    def sample(self, rng: np.random.Generator) -> float:
        # Reject exact endpoints instead of clipping them.
        while True:
            x = float(rng.beta(self.alpha, self.beta))
            if 0.0 < x < 1.0:
                return x

    def cdf(self, x):
        return stats.beta.cdf(x, self.alpha, self.beta)

    def ppf(self, q):
        return stats.beta.ppf(q, self.alpha, self.beta)

    def to_json(self):
        return {"dist": "beta", "a": self.alpha, "b": self.beta}


@dataclass(frozen=True)
class UniformDist:
    low: float
    high: float

    def __post_init__(self):
        if not self.low < self.high:
            raise ModelError(f"uniform bounds must satisfy a < b, got ({self.low}, {self.high})")

    @property
    def support(self) -> tuple[float, float]:
        return (self.low, self.high)

    open_support = False

    def sample(self, rng: np.random.Generator) -> float:
        return float(rng.uniform(self.low, self.high))

    def cdf(self, x):
        return stats.uniform.cdf(x, self.low, self.high - self.low)

    def ppf(self, q):
        return stats.uniform.ppf(q, self.low, self.high - self.low)

    def to_json(self):
        return {"dist": "uniform", "a": self.low, "b": self.high}


def _dist_from_json(name, spec):
    if not isinstance(spec, Mapping) or "dist" not in spec:
        raise ModelError(f"parameter {name!r}: expected an object with a 'dist' key")
    kind = spec["dist"]
    try:
        a, b = float(spec["a"]), float(spec["b"])
    except (KeyError, TypeError, ValueError):
        raise ModelError(f"parameter {name!r}: numeric 'a' and 'b' are required") from None
    if kind == "beta":
        return BetaDist(a, b)
    if kind == "uniform":
        return UniformDist(a, b)
    raise ModelError(f"parameter {name!r}: unknown distribution {kind!r}")


class ParameterSpace(dict):
    """Ordered mapping ``name -> distribution``."""

    def names(self) -> list[str]:
        return list(self.keys())


def sample_valuation(space: Mapping, rng: np.random.Generator) -> dict[str, float]:
    """Draw every parameter independently from its distribution.

    Parameters are drawn in declaration order so a seeded generator gives
    the same valuation on every run.
    """
    return {name: dist.sample(rng) for name, dist in space.items()}


def check_valuation(space: Mapping, theta: Mapping[str, float]) -> None:
    missing = [n for n in space if n not in theta]
    if missing:
        raise ModelError(f"valuation misses parameters {missing}")
    for name, dist in space.items():
        lo, hi = dist.support
        x = float(theta[name])
        inside = (lo < x < hi) if dist.open_support else (lo <= x <= hi)
        if not inside:
            raise ModelError(f"parameter {name}={x} outside its support {dist.support}")


# --------------------------------------------------------------------------
# objectives


@dataclass(frozen=True)
class EvaluationSpec:
    """What ``J`` measures.

    ``kind`` is ``"reach"`` (Pr eventually T), ``"reach_avoid"``
    (Pr not C until T) or ``"exp_reward"`` (expected reward collected
    before T).  ``direction`` is ``"max"`` or ``"min"``.
    """

    kind: str
    target: frozenset
    direction: str = "max"
    avoid: frozenset = frozenset()

    def __post_init__(self):
        object.__setattr__(self, "target", frozenset(int(s) for s in self.target))
        object.__setattr__(self, "avoid", frozenset(int(s) for s in self.avoid))
        if self.kind not in ("reach", "reach_avoid", "exp_reward"):
            raise ModelError(f"unknown objective kind {self.kind!r}")
        if self.direction not in ("max", "min"):
            raise ModelError(f"direction must be 'max' or 'min', got {self.direction!r}")
        if not self.target:
            raise ModelError("objective target set is empty")
        if self.avoid and self.kind != "reach_avoid":
            raise ModelError("avoid set only allowed for reach_avoid objectives")
        if self.target & self.avoid:
            raise ModelError("target and avoid sets overlap")

    @property
    def maximize(self) -> bool:
        return self.direction == "max"

    def to_json(self):
        d = {"kind": self.kind, "target": sorted(self.target), "direction": self.direction}
        if self.avoid:
            d["avoid"] = sorted(self.avoid)
        return d

    @classmethod
    def from_json(cls, d):
        try:
            return cls(
                kind=d["kind"],
                target=frozenset(d["target"]),
                direction=d.get("direction", "max"),
                avoid=frozenset(d.get("avoid", ())),
            )
        except (KeyError, TypeError) as exc:
            raise ModelError(f"malformed objective: {exc}") from None


# --------------------------------------------------------------------------
# graph


class Topology:
    """Shared transition graph of a family of MDPs.

    Choices are stored CSR-style: the choices of state ``s`` are
    ``state_ptr[s]:state_ptr[s+1]`` and the transitions of choice ``c``
    are ``choice_ptr[c]:choice_ptr[c+1]``.
    """

    def __init__(self, n_states, initial, actions, entries, objective,
                 state_rewards=None):
        """``actions[s]`` lists action labels; ``entries`` yields
        ``(s, a, to, reward)`` tuples, one per supported transition."""
        self.n_states = int(n_states)
        if self.n_states <= 0:
            raise ModelError("model needs at least one state")
        init = np.asarray(initial, dtype=float)
        if init.shape != (self.n_states,) or np.any(init < 0) or abs(init.sum() - 1.0) > ROW_TOL:
            raise ModelError("initial distribution must be a probability vector over the states")
        self.initial = _readonly(init)
        self.objective = objective
        for s in objective.target | objective.avoid:
            if not 0 <= s < self.n_states:
                raise ModelError(f"objective refers to unknown state {s}")

        cidx = {}
        choice_state, choice_action, state_ptr = [], [], [0]
        for s in range(self.n_states):
            labels = list(actions[s]) if s < len(actions) else []
            if not labels:
                raise ModelError(f"state {s} has no actions")
            if len(set(labels)) != len(labels):
                raise ModelError(f"state {s} lists an action twice")
            for a in labels:
                cidx[(s, a)] = len(choice_state)
                choice_state.append(s)
                choice_action.append(a)
            state_ptr.append(len(choice_state))
        rows = [dict() for _ in choice_state]
        for s, a, to, rew in entries:
            key = (int(s), a)
            if key not in cidx:
                raise ModelError(f"transition from undeclared state-action pair {key}")
            to = int(to)
            if not 0 <= to < self.n_states:
                raise ModelError(f"transition {key} -> {to}: unknown successor")
            row = rows[cidx[key]]
            if to in row:
                raise ModelError(f"duplicate successor {to} for state-action pair {key}")
            row[to] = rew
        for c, row in enumerate(rows):
            if not row:
                raise ModelError(f"state-action pair ({choice_state[c]}, {choice_action[c]!r}) has no successors")
        succ, tchoice, trew, choice_ptr = [], [], [], [0]
        self._order = []  # (s, a, to) per transition, in storage order
        for c, row in enumerate(rows):
            for to in sorted(row):
                succ.append(to)
                tchoice.append(c)
                trew.append(row[to])
                self._order.append((choice_state[c], choice_action[c], to))
            choice_ptr.append(len(succ))

        self.state_ptr = _readonly(state_ptr, np.int64)
        self.choice_state = _readonly(choice_state, np.int64)
        self.choice_action = tuple(choice_action)
        self.choice_ptr = _readonly(choice_ptr, np.int64)
        self.succ = _readonly(succ, np.int64)
        self.trans_choice = _readonly(tchoice, np.int64)
        self.trans_rewards = _readonly(trew, float)
        sr = np.zeros(self.n_states) if state_rewards is None else np.asarray(state_rewards, float)
        if sr.shape != (self.n_states,):
            raise ModelError("state rewards must have one entry per state")
        self.state_rewards = _readonly(sr)
        self._cidx = cidx

    @property
    def n_choices(self) -> int:
        return len(self.choice_state)

    @property
    def n_transitions(self) -> int:
        return len(self.succ)

    @property
    def max_actions(self) -> int:
        return int(np.max(np.diff(self.state_ptr)))

    def actions(self, s) -> tuple:
        return self.choice_action[self.state_ptr[s]:self.state_ptr[s + 1]]

    def choice_index(self, s, a) -> int:
        return self._cidx[(int(s), a)]

    def transition_index(self, s, a, to) -> int:
        c = self.choice_index(s, a)
        lo, hi = self.choice_ptr[c], self.choice_ptr[c + 1]
        j = np.searchsorted(self.succ[lo:hi], to)
        if j >= hi - lo or self.succ[lo + j] != to:
            raise KeyError((s, a, to))
        return int(lo + j)

    def transition_key(self, t) -> tuple:
        return self._order[t]

    def has_rewards(self) -> bool:
        return bool(np.any(self.state_rewards) or np.any(self.trans_rewards))

    def absorbing_states(self) -> np.ndarray:
        """States whose every action returns to the state itself."""
        selfloop = self.succ == self.choice_state[self.trans_choice]
        leaves = np.ones(self.n_choices, dtype=bool)
        np.logical_and.at(leaves, self.trans_choice, selfloop)
        out = np.ones(self.n_states, dtype=bool)
        np.logical_and.at(out, self.choice_state, leaves)
        return out

    def same_graph(self, other: "Topology") -> bool:
        return other is self or (
            self.n_states == other.n_states
            and self.choice_action == other.choice_action
            and np.array_equal(self.state_ptr, other.state_ptr)
            and np.array_equal(self.choice_ptr, other.choice_ptr)
            and np.array_equal(self.succ, other.succ)
        )


# --------------------------------------------------------------------------
# models


class ParametricMDP:
    """A topology plus one expression (and optional tying label) per transition."""

    def __init__(self, topology: Topology, parameters: Mapping, exprs: Sequence[Expr],
                 ties: Sequence | None = None):
        self.topology = topology
        self.parameters = ParameterSpace(parameters)
        if len(exprs) != topology.n_transitions:
            raise ModelError("need exactly one expression per transition")
        self.exprs = tuple(exprs)
        self.ties = tuple(ties) if ties is not None else (None,) * len(self.exprs)
        declared = set(self.parameters)
        for t, e in enumerate(self.exprs):
            unknown = e.params() - declared
            if unknown:
                s, a, to = topology.transition_key(t)
                raise ModelError(f"transition ({s}, {a!r}) -> {to} uses undeclared parameter(s) {sorted(unknown)}")
        self._keys = tuple(str(e) for e in self.exprs)
        groups = {}
        for t, lab in enumerate(self.ties):
            if lab is not None:
                groups.setdefault(lab, []).append(t)
        for lab, members in groups.items():
            if len({self._keys[t] for t in members}) > 1:
                raise ModelError(f"tying class {lab!r} joins structurally different expressions")
        self._tie_groups = {lab: np.array(m, dtype=np.int64) for lab, m in groups.items()}
        self.known = _readonly([e.is_constant() for e in self.exprs], bool)

    # convenience delegation
    @property
    def n_states(self):
        return self.topology.n_states

    @property
    def n_transitions(self):
        return self.topology.n_transitions

    @property
    def objective(self) -> EvaluationSpec:
        return self.topology.objective

    def expr_key(self, t) -> str:
        return self._keys[t]

    def tying_classes(self) -> list[np.ndarray]:
        """Partition of all transitions; untied transitions are singletons."""
        classes = list(self._tie_groups.values())
        tied = np.zeros(self.n_transitions, dtype=bool)
        for m in classes:
            tied[m] = True
        classes.extend(np.array([t]) for t in np.flatnonzero(~tied))
        return classes

    def evaluate(self, theta: Mapping[str, float]) -> np.ndarray:
        cache = {}
        out = np.empty(self.n_transitions)
        for t, (k, e) in enumerate(zip(self._keys, self.exprs)):
            v = cache.get(k)
            if v is None:
                try:
                    v = float(e.evaluate(theta))
                except KeyError as exc:
                    raise ModelError(f"valuation misses parameter {exc.args[0]!r}") from None
                cache[k] = v
            out[t] = v
        return out


@dataclass(frozen=True, eq=False)
class MDPInstance:
    topology: Topology
    probs: np.ndarray
    valuation: dict = field(default_factory=dict)

    @property
    def n_states(self):
        return self.topology.n_states

    @property
    def objective(self) -> EvaluationSpec:
        return self.topology.objective


def _where(topo, c):
    return (int(topo.choice_state[c]), topo.choice_action[c])


def instantiate(pmdp: ParametricMDP, theta: Mapping[str, float]) -> MDPInstance:
    """Evaluate every transition expression at ``theta``.

    Rows are checked, never renormalised: a row sum off by more than
    ``ROW_TOL`` or an entry outside (0, 1] raises :class:`InstantiationError`.
    """
    for name in pmdp.parameters:
        if name not in theta:
            raise ModelError(f"valuation misses parameter {name!r}")
    topo = pmdp.topology
    p = pmdp.evaluate(theta)
    bad = ~np.isfinite(p) | (p <= 0.0) | (p > 1.0 + ROW_TOL)
    if bad.any():
        t = int(np.flatnonzero(bad)[0])
        s, a, to = topo.transition_key(t)
        what = "negative" if p[t] < 0 else "zero" if p[t] == 0 else "invalid"
        raise InstantiationError(
            f"{what} probability {p[t]!r} on ({s}, {a!r}) -> {to}", where=(s, a))
    sums = np.add.reduceat(p, topo.choice_ptr[:-1])
    off = np.abs(sums - 1.0) > ROW_TOL
    if off.any():
        c = int(np.flatnonzero(off)[0])
        raise InstantiationError(
            f"row {_where(topo, c)} sums to {sums[c]!r}", where=_where(topo, c))
    return MDPInstance(topo, _readonly(p), dict(theta))


# --------------------------------------------------------------------------
# graph preservation


@dataclass
class GraphReport:
    violations: list

    @property
    def ok(self) -> bool:
        return not self.violations

    def __bool__(self):
        return self.ok


def default_probes(space: Mapping, rng: np.random.Generator, n_random: int = 64,
                   max_corners: int = 1024) -> list[dict]:
    """Corners of the support box plus random interior points.

    Open (Beta) supports are probed 1e-6 inside their endpoints.  With many
    parameters only ``max_corners`` randomly chosen corners are used.
    """
    names = list(space)
    bounds = []
    for n in names:
        lo, hi = space[n].support
        if space[n].open_support:
            lo, hi = lo + 1e-6, hi - 1e-6
        bounds.append((lo, hi))
    probes = []
    n_corners = 2 ** len(names)
    if n_corners <= max_corners:
        corner_ids = range(n_corners)
    else:
        corner_ids = rng.choice(n_corners, size=max_corners, replace=False) if len(names) < 63 else \
            [int(x) for x in rng.integers(0, 2 ** 62, size=max_corners)]
    for cid in corner_ids:
        probes.append({n: bounds[i][(int(cid) >> i) & 1] for i, n in enumerate(names)})
    for _ in range(n_random):
        probes.append({n: float(rng.uniform(*bounds[i])) for i, n in enumerate(names)})
    return probes


def validate_graph_preservation(pmdp: ParametricMDP, probes=None,
                                rng: np.random.Generator | None = None) -> GraphReport:
    """Probe-based check that every valuation induces the same support.

    A transition is reported when it evaluates outside [0, 1] (or to a
    non-finite value) at some probe, or to exactly 0 at one probe and to a
    positive value at another.
    """
    if probes is None:
        probes = default_probes(pmdp.parameters, rng or np.random.default_rng(0))
    vals = np.array([pmdp.evaluate(th) for th in probes]).reshape(len(probes), pmdp.n_transitions)
    out_of_range = ~np.isfinite(vals) | (vals < 0) | (vals > 1 + ROW_TOL)
    zero = vals == 0
    pos = vals > 0
    violations = []
    for t in np.flatnonzero(out_of_range.any(axis=0) | (zero.any(axis=0) & pos.any(axis=0))):
        s, a, to = pmdp.topology.transition_key(int(t))
        kind = "out_of_range" if out_of_range[:, t].any() else "zero"
        violations.append({
            "transition": int(t), "s": s, "a": a, "to": to, "kind": kind,
            "expr": pmdp.expr_key(int(t)),
            "probes": [int(i) for i in np.flatnonzero(out_of_range[:, t] | zero[:, t])],
        })
    return GraphReport(violations)


# --------------------------------------------------------------------------
# JSON documents


def _int_key(k, what):
    try:
        return int(k)
    except (TypeError, ValueError):
        raise ModelError(f"{what}: state keys must be integers, got {k!r}") from None


def parse_model(doc) -> ParametricMDP:
    """Build a validated :class:`ParametricMDP` from a model document.

    ``doc`` may be JSON text or an already-decoded mapping.
    """
    if isinstance(doc, (str, bytes)):
        try:
            doc = json.loads(doc)
        except json.JSONDecodeError as exc:
            raise ModelError(f"syntax error at line {exc.lineno}, column {exc.colno}: {exc.msg}") from None
    if not isinstance(doc, Mapping):
        raise ModelError("model document must be a JSON object")
    for key in ("states", "initial", "actions", "parameters", "transitions", "objective"):
        if key not in doc:
            raise ModelError(f"model document misses key {key!r}")
    n = doc["states"]
    if not isinstance(n, int) or n <= 0:
        raise ModelError("'states' must be a positive integer")

    initial = np.zeros(n)
    for k, v in doc["initial"].items():
        s = _int_key(k, "initial")
        if not 0 <= s < n:
            raise ModelError(f"initial distribution refers to unknown state {s}")
        initial[s] = float(v)
    if np.any(initial < 0) or abs(initial.sum() - 1.0) > ROW_TOL:
        raise ModelError(f"initial distribution sums to {initial.sum()!r}, expected 1")

    actions = [[] for _ in range(n)]
    for k, labels in doc["actions"].items():
        s = _int_key(k, "actions")
        if not 0 <= s < n:
            raise ModelError(f"actions declared for unknown state {s}")
        actions[s] = [str(a) for a in labels]

    params = ParameterSpace()
    for name, spec in doc["parameters"].items():
        params[name] = _dist_from_json(name, spec)

    entries, exprs, ties = [], {}, {}
    for i, tr in enumerate(doc["transitions"]):
        try:
            s, a, to, text = int(tr["s"]), str(tr["a"]), int(tr["to"]), tr["expr"]
        except (KeyError, TypeError, ValueError):
            raise ModelError(f"transition #{i}: needs integer 's', 'to', an action 'a' and 'expr'") from None
        try:
            e = parse_expr(str(text))
        except ExprSyntaxError as exc:
            raise ModelError(f"transition #{i} ({s}, {a!r}) -> {to}: {exc}") from exc
        entries.append((s, a, to, float(tr.get("reward", 0.0))))
        exprs[(s, a, to)] = e
        ties[(s, a, to)] = tr.get("tie")

    srew = np.zeros(n)
    for k, v in (doc.get("rewards") or {}).items():
        s = _int_key(k, "rewards")
        if not 0 <= s < n:
            raise ModelError(f"reward for unknown state {s}")
        srew[s] = float(v)

    objective = EvaluationSpec.from_json(doc["objective"])
    topo = Topology(n, initial, actions, entries, objective, state_rewards=srew)
    order = [topo.transition_key(t) for t in range(topo.n_transitions)]
    return ParametricMDP(topo, params, [exprs[k] for k in order], [ties[k] for k in order])


def load_model(path) -> ParametricMDP:
    with open(path) as fh:
        return parse_model(fh.read())


def serialize_model(pmdp: ParametricMDP) -> dict:
    topo = pmdp.topology
    transitions = []
    for t in range(topo.n_transitions):
        s, a, to = topo.transition_key(t)
        entry = {"s": s, "a": a, "to": to, "expr": pmdp.expr_key(t)}
        if pmdp.ties[t] is not None:
            entry["tie"] = pmdp.ties[t]
        if topo.trans_rewards[t]:
            entry["reward"] = float(topo.trans_rewards[t])
        transitions.append(entry)
    doc = {
        "states": topo.n_states,
        "initial": {str(s): float(p) for s, p in enumerate(topo.initial) if p > 0},
        "actions": {str(s): list(topo.actions(s)) for s in range(topo.n_states)},
        "parameters": {n: d.to_json() for n, d in pmdp.parameters.items()},
        "transitions": transitions,
        "objective": topo.objective.to_json(),
    }
    if np.any(topo.state_rewards):
        doc["rewards"] = {str(s): float(r) for s, r in enumerate(topo.state_rewards) if r}
    return doc


def dumps_model(pmdp: ParametricMDP, **kw) -> str:
    return json.dumps(serialize_model(pmdp), **kw)


def models_equal(a: ParametricMDP, b: ParametricMDP) -> bool:
    """Structural equality (used for round-trip checks)."""
    ta, tb = a.topology, b.topology
    return (
        ta.same_graph(tb)
        and np.allclose(ta.initial, tb.initial, atol=0)
        and np.array_equal(ta.state_rewards, tb.state_rewards)
        and np.array_equal(ta.trans_rewards, tb.trans_rewards)
        and ta.objective == tb.objective
        and dict(a.parameters) == dict(b.parameters)
        and a.exprs == b.exprs
        and a.ties == b.ties
    )

