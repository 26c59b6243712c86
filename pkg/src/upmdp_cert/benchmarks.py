"""Built-in parametric benchmark environments.

Each builder returns a model document (the same JSON structure that
:func:`upmdp_cert.model.parse_model` reads), so every builtin doubles as a
schema example; :func:`build_benchmark` parses it into a
:class:`~upmdp_cert.model.ParametricMDP`.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .model import ParametricMDP, parse_model

__all__ = [
    "BenchmarkSpec",
    "BENCHMARKS",
    "build_benchmark",
    "benchmark_document",
    "chain_document",
    "betting_document",
    "aircraft_document",
    "semiauto_document",
    "uav_document",
]


def _beta(a, b):
    return {"dist": "beta", "a": a, "b": b}


def _uniform(a, b):
    return {"dist": "uniform", "a": a, "b": b}


class _Builder:
    """Assigns state ids on first use and collects transitions."""

    def __init__(self):
        self.ids = {}
        self.actions = {}
        self.transitions = []
        self.rewards = {}

    def sid(self, key):
        if key not in self.ids:
            self.ids[key] = len(self.ids)
        return self.ids[key]

    def add(self, key, action, outcomes):
        """``outcomes`` is a list of ``(successor_key, expr)``; outcomes with
        the same successor are merged into a sum expression."""
        s = self.sid(key)
        self.actions.setdefault(s, []).append(action)
        merged = {}
        for succ, expr in outcomes:
            to = self.sid(succ)
            merged[to] = f"{merged[to]} + {expr}" if to in merged else expr
        for to, expr in merged.items():
            self.transitions.append({"s": s, "a": action, "to": to, "expr": expr, "tie": expr})

    def document(self, initial, parameters, objective):
        return {
            "states": len(self.ids),
            "initial": {str(self.sid(initial)): 1.0},
            "actions": {str(s): a for s, a in sorted(self.actions.items())},
            "parameters": parameters,
            "transitions": self.transitions,
            "rewards": {str(s): r for s, r in sorted(self.rewards.items())},
            "objective": objective,
        }


# --------------------------------------------------------------------------
# Chain


def chain_document(length: int = 6, dist=None) -> dict:
    """States ``0..length``; reaching ``length`` ends the task.

    Every state offers three actions.  Action ``a`` moves forward with
    probability ``p`` and otherwise resets to state 0, ``b`` does the same
    with ``1 - p``, and ``c`` is a cautious action whose forward probability
    ``0.4 + p / 5`` barely depends on the parameter.  Each step costs 1; the
    objective is the minimal expected number of steps.
    """
    if length < 1:
        raise ValueError("chain length must be positive")
    n = length + 1
    forward = {"a": "p", "b": "1 - p", "c": "0.4 + p / 5"}
    reset = {"a": "1 - p", "b": "p", "c": "0.6 - p / 5"}
    trans = []
    for s in range(n):
        nxt = min(s + 1, length)
        for act in ("a", "b", "c"):
            trans.append({"s": s, "a": act, "to": nxt, "expr": forward[act], "tie": forward[act]})
            trans.append({"s": s, "a": act, "to": 0, "expr": reset[act], "tie": reset[act]})
    return {
        "states": n,
        "initial": {"0": 1.0},
        "actions": {str(s): ["a", "b", "c"] for s in range(n)},
        "parameters": {"p": dist or _beta(5, 5)},
        "transitions": trans,
        "rewards": {str(s): 1.0 for s in range(length)},
        "objective": {"kind": "exp_reward", "target": [length], "direction": "min"},
    }


# --------------------------------------------------------------------------
# Betting game


def betting_document(rounds: int = 8, start: int = 10, bets=(0, 1, 2, 5, 10), dist=None) -> dict:
    """Bet for a number of rounds, starting with ``start`` coins.

    A bet of ``b <= coins`` wins ``b`` coins with probability ``p`` and loses
    them otherwise.  After the last round the coins are cashed in: state
    ``(rounds, c)`` earns reward ``c`` and moves to a terminal copy, which
    is the target.  The objective is the maximal expected final capital.
    """
    if rounds < 1 or start < 0:
        raise ValueError("need at least one round and a nonnegative start")
    b = _Builder()
    frontier = {start}
    b.sid((0, start))
    for r in range(rounds):
        nxt = set()
        for c in sorted(frontier):
            for bet in bets:
                if bet > c:
                    continue
                if bet == 0:
                    b.add((r, c), f"bet{bet}", [((r + 1, c), "1")])
                    nxt.add(c)
                else:
                    b.add((r, c), f"bet{bet}", [((r + 1, c + bet), "p"), ((r + 1, c - bet), "1 - p")])
                    nxt.update((c + bet, c - bet))
        frontier = nxt
    for c in sorted(frontier):
        s = b.sid((rounds, c))
        b.rewards[s] = float(c)
        b.add((rounds, c), "cash", [(("done", c), "1")])
    target = []
    for c in sorted(frontier):
        b.add(("done", c), "stay", [(("done", c), "1")])
        target.append(b.sid(("done", c)))
    doc = b.document((0, start), {"p": dist or _beta(20, 2)},
                     {"kind": "exp_reward", "target": target, "direction": "max"})
    _untie_constants(doc)
    return doc


def _untie_constants(doc):
    for tr in doc["transitions"]:
        if tr["expr"] == "1":
            tr.pop("tie", None)



# --------------------------------------------------------------------------
# Aircraft collision avoidance


def _prod(a, b):
    if a == "1":
        return b
    if b == "1":
        return a
    return f"({a}) * ({b})"


def _vertical_moves(y, height):
    moves = {"straight": 0}
    if y + 1 < height:
        moves["up"] = 1
    if y > 0:
        moves["down"] = -1
    return moves


def _intruder_outcomes(y, height):
    """Intruder picks an available manoeuvre uniformly; a turn succeeds with
    ``q`` and otherwise the intruder flies straight."""
    moves = _vertical_moves(y, height)
    m = len(moves)
    out = [(y, "1" if m == 1 else f"1 - {m - 1} * q / {m}")]
    for name, dy in moves.items():
        if dy:
            out.append((y + dy, f"q / {m}"))
    return out


def aircraft_document(width: int = 10, height: int = 5, dist_p=None, dist_q=None) -> dict:
    """Two aircraft fly head-on through a ``width x height`` grid.

    The agent starts in the middle of column 0 and the intruder anywhere in
    column ``width - 1``; both advance one column per step.  The agent
    chooses straight, up or down, and a turn succeeds with probability
    ``p`` (otherwise it flies straight).  The intruder manoeuvres uniformly
    at random with success probability ``q``.  Sharing a row while at most
    one column apart is a collision; reaching the last column without one
    is the goal.  The objective is the maximal reach-avoid probability.
    """
    if width < 2 or height < 1:
        raise ValueError("grid must be at least 2 x 1")
    b = _Builder()
    init = (0, height // 2, None)
    b.sid(init)
    b.sid("goal")
    b.sid("collision")

    def collide(t, ya, yi):
        return ya == yi and abs(2 * t - (width - 1)) <= 1

    def node(t, ya, yi):
        if collide(t, ya, yi):
            return "collision"
        if t == width - 1:
            return "goal"
        return (t, ya, yi)

    # the intruder's starting row is chosen uniformly before the first step
    starts = []
    for yi in range(height):
        starts.append((node(0, height // 2, yi), f"1 / {height}"))
    b.add(init, "start", starts)

    frontier = [n for n, _ in starts if isinstance(n, tuple)]
    seen = set(frontier)
    while frontier:
        nxt = []
        for key in frontier:
            t, ya, yi = key
            intr = _intruder_outcomes(yi, height)
            for act, dy in _vertical_moves(ya, height).items():
                agent = [(ya, "1")] if dy == 0 else [(ya + dy, "p"), (ya, "1 - p")]
                outcomes = []
                for ya2, ea in agent:
                    for yi2, ei in intr:
                        succ = node(t + 1, ya2, yi2)
                        outcomes.append((succ, _prod(ea, ei)))
                        if isinstance(succ, tuple) and succ not in seen:
                            seen.add(succ)
                            nxt.append(succ)
                b.add(key, act, outcomes)
        frontier = nxt
    b.add("goal", "stay", [("goal", "1")])
    b.add("collision", "stay", [("collision", "1")])
    doc = b.document(init, {"p": dist_p or _beta(10, 2), "q": dist_q or _beta(2, 10)},
                     {"kind": "reach_avoid", "target": [b.sid("goal")],
                      "avoid": [b.sid("collision")], "direction": "max"})
    _untie_constants(doc)
    return doc


# --------------------------------------------------------------------------
# Semi-autonomous vehicle


def semiauto_document(width: int = 10, height: int = 5, max_tries: int = 2, max_moves: int = 2,
                      dist_p=None, dist_q=None) -> dict:
    """An explorer crosses a ``width x height`` grid from the controller's
    corner ``(0, 0)`` to the opposite corner.

    Moving is deterministic, but after ``max_moves`` moves without a
    successful message the next move fails the task.  A message over
    channel 1 (2) is lost with probability ``(1 - p)(1 + 2d/D)``
    (``(1 - q)(1 + d/(2D))``), where ``d`` is the Manhattan distance to the
    controller and ``D`` its maximum; at most ``max_tries`` consecutive
    failed messages are allowed between moves.  The objective is the
    maximal probability of reaching the goal corner.
    """
    if width < 2 or height < 1 or max_tries < 1 or max_moves < 1:
        raise ValueError("grid and limits must be positive")
    D = (width - 1) + (height - 1)
    goal = (width - 1, height - 1)
    b = _Builder()
    init = (0, 0, 0, 0)
    b.sid(init)
    b.sid("goal")
    b.sid("fail")
    loss = {
        "ch1": lambda d: f"(1 - p) * {D + 2 * d} / {D}",
        "ch2": lambda d: f"(1 - q) * {2 * D + d} / {2 * D}",
    }

    def node(x, y, m, c):
        return "goal" if (x, y) == goal else (x, y, m, c)

    frontier = [init]
    seen = {init}
    while frontier:
        nxt = []
        for key in frontier:
            x, y, m, c = key
            succs = []
            for act, (dx, dy) in (("north", (0, 1)), ("east", (1, 0)),
                                  ("south", (0, -1)), ("west", (-1, 0))):
                x2, y2 = x + dx, y + dy
                if not (0 <= x2 < width and 0 <= y2 < height):
                    continue
                succ = "fail" if m == max_moves else node(x2, y2, m + 1, 0)
                b.add(key, act, [(succ, "1")])
                succs.append(succ)
            if c < max_tries:
                d = x + y
                for ch, f in loss.items():
                    lost = f(d)
                    ok = (x, y, 0, 0)
                    bad = (x, y, m, c + 1)
                    b.add(key, ch, [(ok, f"1 - {lost}"), (bad, lost)])
                    succs += [ok, bad]
            for succ in succs:
                if isinstance(succ, tuple) and succ not in seen:
                    seen.add(succ)
                    nxt.append(succ)
        frontier = nxt
    b.add("goal", "stay", [("goal", "1")])
    b.add("fail", "stay", [("fail", "1")])
    doc = b.document(init, {"p": dist_p or _uniform(0.75, 0.95), "q": dist_q or _uniform(0.55, 0.85)},
                     {"kind": "reach", "target": [b.sid("goal")], "direction": "max"})
    _untie_constants(doc)
    return doc


# --------------------------------------------------------------------------
# UAV


_UAV_MOVES = {
    "east": (1, 0, 0), "west": (-1, 0, 0),
    "north": (0, 1, 0), "south": (0, -1, 0),
    "up": (0, 0, 1), "down": (0, 0, -1),
}


def _uav_obstacles(nx, ny, nz):
    """Two walls the UAV has to fly around or over."""
    obs = set()
    if nx >= 4:
        w1, w2 = nx // 3, (2 * nx) // 3
        for z in range(max(nz - 1, 1)):
            for y in range(ny):
                if y < ny - 1:
                    obs.add((w1, y, z))
                if y > 0:
                    obs.add((w2, y, z))
    return obs


def uav_document(nx: int = 16, ny: int = 4, nz: int = 3, dist=None) -> dict:
    """A UAV flies from ``(0, 0, 0)`` to the far face ``x = nx - 1`` of an
    ``nx x ny x nz`` grid while avoiding obstacle cells.

    Each action moves one cell along an axis.  In column ``x`` wind blows
    the UAV with probability ``p<x>`` to one of the four cells lateral to
    the intended move instead (uniformly; drifting off the grid leaves it in
    place).  There is one parameter per column except the last, where the
    task is over.  The objective is the maximal probability of reaching the
    goal face without hitting an obstacle.
    """
    if nx < 2 or ny < 1 or nz < 1:
        raise ValueError("grid dimensions must be positive (nx >= 2)")
    obstacles = _uav_obstacles(nx, ny, nz)
    b = _Builder()
    init = (0, 0, 0)
    b.sid(init)
    b.sid("goal")
    b.sid("crash")

    def inside(c):
        return 0 <= c[0] < nx and 0 <= c[1] < ny and 0 <= c[2] < nz

    def node(c):
        if c in obstacles:
            return "crash"
        return "goal" if c[0] == nx - 1 else c

    frontier = [init]
    seen = {init}
    while frontier:
        nxt = []
        for cell in frontier:
            x = cell[0]
            par = f"p{x}"
            for act, d in _UAV_MOVES.items():
                target = tuple(a + b_ for a, b_ in zip(cell, d))
                if not inside(target):
                    continue
                outcomes = [(node(target), f"1 - {par}")]
                for lat in _UAV_MOVES.values():
                    if any(l and dd for l, dd in zip(lat, d)):
                        continue
                    drift = tuple(a + b_ for a, b_ in zip(cell, lat))
                    outcomes.append((node(drift) if inside(drift) else cell, f"{par} / 4"))
                b.add(cell, act, outcomes)
                for succ, _ in outcomes:
                    if isinstance(succ, tuple) and succ not in seen:
                        seen.add(succ)
                        nxt.append(succ)
        frontier = nxt
    b.add("goal", "stay", [("goal", "1")])
    b.add("crash", "stay", [("crash", "1")])
    params = {f"p{x}": dict(dist or _beta(2, 10)) for x in range(nx - 1)}
    doc = b.document(init, params, {"kind": "reach_avoid", "target": [b.sid("goal")],
                                    "avoid": [b.sid("crash")], "direction": "max"})
    _untie_constants(doc)
    return doc


# --------------------------------------------------------------------------
# registry


@dataclass(frozen=True)
class BenchmarkSpec:
    name: str
    options: dict = field(default_factory=dict)


BENCHMARKS = {
    "chain": chain_document,
    "betting": betting_document,
    "aircraft": aircraft_document,
    "semiauto": semiauto_document,
    "uav": uav_document,
}


def benchmark_document(spec) -> dict:
    if isinstance(spec, str):
        spec = BenchmarkSpec(spec)
    try:
        builder = BENCHMARKS[spec.name]
    except KeyError:
        raise ValueError(f"unknown benchmark {spec.name!r}; choose from {sorted(BENCHMARKS)}") from None
    return builder(**spec.options)


def build_benchmark(spec) -> ParametricMDP:
    return parse_model(benchmark_document(spec))
