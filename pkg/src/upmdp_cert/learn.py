"""Interval MDPs learned from transition counts.

Four estimators are provided.  :func:`learn_pac_imdp` builds Wilson score
intervals with continuity correction and splits the miss probability
``gamma`` evenly over the unknown transitions, so the hidden MDP lies in
the result with probability at least ``1 - gamma``.  The other three
(:func:`learn_lui_imdp`, :func:`learn_map_imdp`, :func:`learn_ucrl2_imdp`)
carry no such guarantee and are meant for training only.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np
from scipy.special import ndtri

from .errors import LearningError, ModelError
from .model import EvaluationSpec, ParametricMDP, Topology
from .simulate import CountTable, pool_tied_counts

__all__ = [
    "IntervalMDP",
    "PacConfig",
    "LuiState",
    "DirichletPrior",
    "point_estimate",
    "normal_quantile",
    "wilson_cc_bounds",
    "wilson_cc_interval",
    "learn_pac_imdp",
    "lui_update",
    "learn_lui_imdp",
    "map_estimate",
    "learn_map_imdp",
    "ucrl2_width",
    "learn_ucrl2_imdp",
    "learn_imdp",
    "count_unknown",
    "DEFAULT_MU",
]

DEFAULT_MU = 1e-6
FEAS_TOL = 1e-12


class IntervalMDP:
    """Per-transition intervals ``[lo, hi]`` over a fixed topology."""

    def __init__(self, topology: Topology, lo, hi, provenance=None, check=True):
        self.topology = topology
        lo = np.array(lo, dtype=float)
        hi = np.array(hi, dtype=float)
        if lo.shape != (topology.n_transitions,) or hi.shape != lo.shape:
            raise ValueError("interval arrays do not match the topology")
        lo.setflags(write=False)
        hi.setflags(write=False)
        self.lo, self.hi = lo, hi
        self.provenance = dict(provenance or {})
        if check:
            self.check()

    @property
    def n_states(self):
        return self.topology.n_states

    @property
    def objective(self) -> EvaluationSpec:
        return self.topology.objective

    def check(self, tol: float = FEAS_TOL) -> None:
        """Raise :class:`LearningError` unless ``0 < lo <= hi <= 1`` and
        every row admits a distribution."""
        topo = self.topology
        bad = ~(np.isfinite(self.lo) & np.isfinite(self.hi)) | (self.lo <= 0) \
            | (self.hi > 1 + tol) | (self.lo > self.hi + tol)
        if bad.any():
            t = int(np.flatnonzero(bad)[0])
            s, a, to = topo.transition_key(t)
            raise LearningError(
                f"interval [{self.lo[t]}, {self.hi[t]}] on ({s}, {a!r}) -> {to} is invalid", where=(s, a))
        slo = np.add.reduceat(self.lo, topo.choice_ptr[:-1])
        shi = np.add.reduceat(self.hi, topo.choice_ptr[:-1])
        off = (slo > 1 + tol) | (shi < 1 - tol)
        if off.any():
            c = int(np.flatnonzero(off)[0])
            where = (int(topo.choice_state[c]), topo.choice_action[c])
            raise LearningError(
                f"row {where} is infeasible: sum(lo)={slo[c]!r}, sum(hi)={shi[c]!r}", where=where)

    def includes(self, probs, tol: float = 0.0) -> bool:
        p = np.asarray(getattr(probs, "probs", probs), dtype=float)
        return bool(np.all(p >= self.lo - tol) and np.all(p <= self.hi + tol))

    def widths(self) -> np.ndarray:
        return self.hi - self.lo

    # -- JSON ---------------------------------------------------------------

    def to_json(self) -> dict:
        topo = self.topology
        trans = []
        for t in range(topo.n_transitions):
            s, a, to = topo.transition_key(t)
            entry = {"s": s, "a": a, "to": to, "lo": float(self.lo[t]), "hi": float(self.hi[t])}
            if topo.trans_rewards[t]:
                entry["reward"] = float(topo.trans_rewards[t])
            trans.append(entry)
        doc = {
            "states": topo.n_states,
            "initial": {str(s): float(p) for s, p in enumerate(topo.initial) if p > 0},
            "actions": {str(s): list(topo.actions(s)) for s in range(topo.n_states)},
            "transitions": trans,
            "objective": topo.objective.to_json(),
            "provenance": self.provenance,
        }
        if np.any(topo.state_rewards):
            doc["rewards"] = {str(s): float(r) for s, r in enumerate(topo.state_rewards) if r}
        return doc

    def dumps(self, **kw) -> str:
        return json.dumps(self.to_json(), **kw)

    @classmethod
    def from_json(cls, doc) -> "IntervalMDP":
        if isinstance(doc, (str, bytes)):
            doc = json.loads(doc)
        try:
            n = int(doc["states"])
            initial = np.zeros(n)
            for k, v in doc["initial"].items():
                initial[int(k)] = float(v)
            actions = [[] for _ in range(n)]
            for k, labels in doc["actions"].items():
                actions[int(k)] = [str(a) for a in labels]
            srew = np.zeros(n)
            for k, v in (doc.get("rewards") or {}).items():
                srew[int(k)] = float(v)
            bounds = {}
            entries = []
            for tr in doc["transitions"]:
                key = (int(tr["s"]), str(tr["a"]), int(tr["to"]))
                entries.append(key + (float(tr.get("reward", 0.0)),))
                bounds[key] = (float(tr["lo"]), float(tr["hi"]))
        except (KeyError, TypeError, ValueError, IndexError) as exc:
            raise ModelError(f"malformed interval MDP document: {exc}") from None
        topo = Topology(n, initial, actions, entries, EvaluationSpec.from_json(doc["objective"]),
                        state_rewards=srew)
        order = [topo.transition_key(t) for t in range(topo.n_transitions)]
        lo = [bounds[k][0] for k in order]
        hi = [bounds[k][1] for k in order]
        return cls(topo, lo, hi, doc.get("provenance"))

    @classmethod
    def point(cls, topology: Topology, probs, provenance=None) -> "IntervalMDP":
        """Singleton intervals around a concrete kernel."""
        p = np.asarray(getattr(probs, "probs", probs), dtype=float)
        return cls(topology, p, p, provenance or {"method": "exact"})


# --------------------------------------------------------------------------
# shared helpers


def point_estimate(counts: CountTable, s, a, to):
    """``#(s,a,s')/#(s,a)``, or ``None`` when ``(s, a)`` was never visited."""
    t = counts.topology.transition_index(s, a, to)
    h = counts.trans_visits[t]
    if h == 0:
        return None
    return float(counts.trans_counts[t] / h)


def count_unknown(pmdp: ParametricMDP, tying: bool = True) -> int:
    """Number of learned quantities: tying classes (or single transitions)
    whose expression depends on a parameter."""
    if not tying:
        return int(np.count_nonzero(~pmdp.known))
    return sum(1 for members in pmdp.tying_classes() if not pmdp.known[members[0]])


def _known_values(pmdp: ParametricMDP) -> np.ndarray:
    vals = np.full(pmdp.n_transitions, np.nan)
    for t in np.flatnonzero(pmdp.known):
        vals[t] = pmdp.exprs[t].evaluate({})
    return vals


def _prepare(pmdp: ParametricMDP, counts: CountTable, tying: bool) -> CountTable:
    if not counts.topology.same_graph(pmdp.topology):
        raise ModelError("count table and model have different transition graphs")
    if tying and not counts.pooled:
        return pool_tied_counts(counts, pmdp.tying_classes())
    return counts


def _finish(pmdp, lo, hi, mu, provenance):
    """Insert known transitions, apply the floor ``mu`` and repair rows of
    point intervals whose floored entries push ``sum(lo)`` above 1."""
    topo = pmdp.topology
    known = _known_values(pmdp)
    kmask = pmdp.known
    lo = np.where(kmask, known, np.maximum(lo, mu))
    hi = np.where(kmask, known, np.minimum(hi, 1.0))
    hi = np.maximum(hi, lo)
    slo = np.add.reduceat(lo, topo.choice_ptr[:-1])
    for c in np.flatnonzero(slo > 1.0 + FEAS_TOL):
        a, b = topo.choice_ptr[c], topo.choice_ptr[c + 1]
        free = np.flatnonzero(~kmask[a:b])
        if free.size == 0:
            continue
        j = a + free[np.argmax(lo[a:b][free])]
        excess = slo[c] - 1.0
        if lo[j] - excess < mu:
            continue
        point = hi[j] == lo[j]
        lo[j] -= excess
        if point:
            hi[j] = lo[j]
    return IntervalMDP(topo, lo, hi, provenance)


# --------------------------------------------------------------------------
# PAC (Wilson score with continuity correction)


@dataclass(frozen=True)
class PacConfig:
    gamma: float
    mu: float = DEFAULT_MU

    def __post_init__(self):
        if not 0.0 < self.gamma < 1.0:
            raise ValueError(f"gamma must lie in (0, 1), got {self.gamma!r}")
        if not self.mu > 0.0:
            raise ValueError("mu must be positive")


def normal_quantile(q):
    """Standard normal quantile (``scipy.special.ndtri``)."""
    return ndtri(q)


def wilson_cc_bounds(H, p, z):
    """Raw Wilson-CC lower and upper bounds (vectorised, before clamping).

    Radicands are clamped at zero.  By convention the lower bound is 0 when
    ``p == 0`` and the upper bound is 1 when ``p == 1``.
    """
    H = np.asarray(H, dtype=float)
    p = np.asarray(p, dtype=float)
    z2 = z * z
    with np.errstate(divide="ignore", invalid="ignore"):
        base = 2.0 * H * p + z2
        spread = z2 - 1.0 / H + 4.0 * H * p * (1.0 - p)
        den = 2.0 * (H + z2)
        lower = (base - z * np.sqrt(np.maximum(spread + 4.0 * p - 2.0, 0.0)) - 1.0) / den
        upper = (base + z * np.sqrt(np.maximum(spread - 4.0 * p + 2.0, 0.0)) + 1.0) / den
    lower = np.where(p <= 0.0, 0.0, lower)
    upper = np.where(p >= 1.0, 1.0, upper)
    return lower, upper


def wilson_cc_interval(H: int, p: float, gamma_p: float, mu: float = DEFAULT_MU):
    """Clamped interval ``[max(mu, lower), min(upper, 1)]``; ``[mu, 1]`` for ``H = 0``.

    >>> lo, hi = wilson_cc_interval(100, 0.5, 0.05)
    >>> round(lo + hi, 12)
    1.0
    """
    if H <= 0:
        return (mu, 1.0)
    if not 0.0 < gamma_p < 1.0:
        raise ValueError("gamma_p must lie in (0, 1)")
    z = float(normal_quantile(1.0 - gamma_p / 2.0))
    lower, upper = wilson_cc_bounds(H, p, z)
    lo = max(mu, float(lower))
    hi = max(min(float(upper), 1.0), lo)
    return (lo, hi)


def learn_pac_imdp(pmdp: ParametricMDP, counts: CountTable, cfg: PacConfig,
                   tying: bool = True) -> IntervalMDP:
    """IMDP containing the hidden instance with probability ``>= 1 - gamma``."""
    counts = _prepare(pmdp, counts, tying)
    n_u = count_unknown(pmdp, tying)
    H = counts.trans_visits.astype(float)
    lo = np.full(pmdp.n_transitions, cfg.mu)
    hi = np.ones(pmdp.n_transitions)
    gamma_p = cfg.gamma / n_u if n_u else None
    seen = H > 0
    if n_u and seen.any():
        z = float(normal_quantile(1.0 - gamma_p / 2.0))
        p = counts.trans_counts[seen] / H[seen]
        lower, upper = wilson_cc_bounds(H[seen], p, z)
        lo[seen] = lower
        hi[seen] = upper
    prov = {"method": "pac", "gamma": cfg.gamma, "gamma_p": gamma_p, "n_u": n_u,
            "mu": cfg.mu, "tying": tying}
    return _finish(pmdp, lo, hi, cfg.mu, prov)


# --------------------------------------------------------------------------
# linearly updating intervals


@dataclass(frozen=True)
class LuiState:
    lo: float
    hi: float
    strength: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.lo <= self.hi <= 1.0:
            raise ValueError(f"invalid prior interval [{self.lo}, {self.hi}]")
        if self.strength < 0:
            raise ValueError("prior strength must be nonnegative")


def lui_update(state: LuiState, k: int, N: int) -> LuiState:
    """Posterior interval after observing ``k`` successes in ``N`` visits.

    >>> lui_update(LuiState(0.2, 0.8, 10), 5, 10)
    LuiState(lo=0.35, hi=0.65, strength=20)
    """
    if not 0 <= k <= N:
        raise ValueError(f"need 0 <= k <= N, got k={k}, N={N}")
    n2 = state.strength + N
    if n2 == 0:
        return state
    lo = (state.strength * state.lo + k) / n2
    hi = (state.strength * state.hi + k) / n2
    return LuiState(lo, hi, n2)


def learn_lui_imdp(pmdp: ParametricMDP, counts: CountTable, mu: float = DEFAULT_MU,
                   prior_strength: float = 0.0, tying: bool = True) -> IntervalMDP:
    """Posterior intervals from the prior ``[mu, 1]`` with the given strength."""
    counts = _prepare(pmdp, counts, tying)
    n = float(prior_strength)
    N = counts.trans_visits.astype(float)
    k = counts.trans_counts.astype(float)
    den = n + N
    with np.errstate(invalid="ignore", divide="ignore"):
        lo = np.where(den > 0, (n * mu + k) / den, mu)
        hi = np.where(den > 0, (n * 1.0 + k) / den, 1.0)
    prov = {"method": "lui", "mu": mu, "prior_strength": n, "tying": tying}
    return _finish(pmdp, lo, hi, mu, prov)


# --------------------------------------------------------------------------
# MAP (Dirichlet mode)


@dataclass(frozen=True)
class DirichletPrior:
    alpha: tuple

    def __post_init__(self):
        a = tuple(float(x) for x in self.alpha)
        if not a or any(x <= 0 for x in a):
            raise ValueError("Dirichlet concentrations must be positive")
        object.__setattr__(self, "alpha", a)

    @classmethod
    def uniform(cls, m: int, value: float = 1.0) -> "DirichletPrior":
        return cls((value,) * m)


def map_estimate(prior: DirichletPrior, k) -> np.ndarray:
    """Mode of the Dirichlet posterior.

    >>> map_estimate(DirichletPrior((2, 2)), [3, 5]).tolist()
    [0.4, 0.6]
    """
    alpha = np.asarray(prior.alpha, dtype=float)
    k = np.asarray(k, dtype=float)
    if k.shape != alpha.shape:
        raise ValueError("prior and counts have different dimensions")
    m = alpha.size
    N = k.sum()
    den = alpha.sum() + N - m
    if den <= 0:
        if N == 0 and np.all(alpha == 1.0):
            return np.full(m, 1.0 / m)
        raise ValueError("Dirichlet mode undefined for this prior and counts")
    num = alpha + k - 1.0
    if np.any(num < 0):
        raise ValueError("Dirichlet mode undefined: some alpha_i + k_i < 1")
    return num / den


def learn_map_imdp(pmdp: ParametricMDP, counts: CountTable, alpha: float = 1.0,
                   mu: float = DEFAULT_MU, tying: bool = True) -> IntervalMDP:
    """Point intervals at the Dirichlet mode with symmetric concentration ``alpha``."""
    counts = _prepare(pmdp, counts, tying)
    topo = pmdp.topology
    est = np.empty(pmdp.n_transitions)
    ptr = topo.choice_ptr
    k = counts.trans_counts
    for c in range(topo.n_choices):
        a, b = ptr[c], ptr[c + 1]
        est[a:b] = map_estimate(DirichletPrior.uniform(b - a, alpha), k[a:b])
    prov = {"method": "map", "alpha": alpha, "mu": mu, "tying": tying}
    return _finish(pmdp, est, est.copy(), mu, prov)


# --------------------------------------------------------------------------
# UCRL2


def ucrl2_width(H, n_states: int, n_actions: int, n_transitions: int, gamma: float):
    """Half-width ``sqrt(14 |S| log(2 |A| |T| / gamma) / H)``."""
    if not 0.0 < gamma < 1.0:
        raise ValueError("gamma must lie in (0, 1)")
    H = np.asarray(H, dtype=float)
    if np.any(H <= 0):
        raise ValueError("UCRL2 width needs H >= 1")
    out = np.sqrt(14.0 * n_states * math.log(2.0 * n_actions * n_transitions / gamma) / H)
    return float(out) if out.ndim == 0 else out


def learn_ucrl2_imdp(pmdp: ParametricMDP, counts: CountTable, gamma: float,
                     mu: float = DEFAULT_MU, tying: bool = True) -> IntervalMDP:
    counts = _prepare(pmdp, counts, tying)
    topo = pmdp.topology
    H = counts.trans_visits.astype(float)
    lo = np.full(pmdp.n_transitions, mu)
    hi = np.ones(pmdp.n_transitions)
    seen = H > 0
    if seen.any():
        d = ucrl2_width(H[seen], topo.n_states, topo.max_actions, topo.n_transitions, gamma)
        p = counts.trans_counts[seen] / H[seen]
        lo[seen] = p - d
        hi[seen] = p + d
    prov = {"method": "ucrl2", "gamma": gamma, "mu": mu, "tying": tying,
            "dims": [topo.n_states, topo.max_actions, topo.n_transitions]}
    return _finish(pmdp, lo, hi, mu, prov)


def learn_imdp(pmdp: ParametricMDP, counts: CountTable, method: str = "pac",
               gamma: float = 1e-4, mu: float = DEFAULT_MU, tying: bool = True) -> IntervalMDP:
    """Dispatch on ``method`` in ``{"pac", "lui", "map", "ucrl2"}``."""
    if method == "pac":
        return learn_pac_imdp(pmdp, counts, PacConfig(gamma, mu), tying)
    if method == "lui":
        return learn_lui_imdp(pmdp, counts, mu, tying=tying)
    if method == "map":
        return learn_map_imdp(pmdp, counts, mu=mu, tying=tying)
    if method == "ucrl2":
        return learn_ucrl2_imdp(pmdp, counts, gamma, mu, tying)
    raise ValueError(f"unknown learner {method!r}")
