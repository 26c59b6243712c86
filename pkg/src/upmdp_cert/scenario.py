"""Scenario-approach risk bounds for sampled performance guarantees.

Given ``N`` per-sample bounds that each hold with probability ``1 - gamma``,
the guarantee obtained by discarding the ``k`` worst samples is violated by
a fresh environment with probability at most ``epsilon``, with confidence
``1 - eta``.  ``epsilon`` solves

    sum_{i=K}^{N-k} C(N-k, i) (1-gamma)^i gamma^(N-k-i) - (1 - eta)
        = sum_{i=0}^{N-K} C(N, i) eps^i (1-eps)^(N-i)

for some admissible ``K``; :func:`risk_bound` enumerates ``K`` and keeps the
smallest ``epsilon``.  All binomial sums are evaluated in log-space.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy.special import betainc, gammaln, logsumexp

from .errors import CertificationInfeasible

__all__ = [
    "RiskBound",
    "PerformanceSample",
    "order_statistic",
    "binom_logcdf",
    "solve_epsilon_for_beta",
    "confidence_budget",
    "risk_bound",
    "certify",
    "certify_values",
]

# Above this N the left tail is evaluated through the incomplete beta function.
LARGE_N = 100_000


@dataclass(frozen=True)
class PerformanceSample:
    value: float
    gamma: float
    direction: str = "max"


@dataclass(frozen=True)
class RiskBound:
    epsilon: float
    K: int
    beta: float
    N: int
    k: int
    gamma: float
    eta: float
    guarantee: float | None = None
    direction: str = "max"
    meta: dict = field(default_factory=dict, compare=False)

    def to_json(self) -> dict:
        d = {
            "epsilon": self.epsilon, "K": self.K, "beta": self.beta, "N": self.N,
            "k": self.k, "gamma": self.gamma, "eta": self.eta,
            "confidence": 1.0 - self.eta, "direction": self.direction,
        }
        if self.guarantee is not None:
            d["guarantee"] = self.guarantee
        if self.meta:
            d["meta"] = dict(self.meta)
        return d


def order_statistic(values, k: int, direction: str = "max") -> float:
    """The value with exactly ``k`` samples ranked worse than it.

    For maximisation the worst samples are the smallest ones, for
    minimisation the largest.

    >>> order_statistic([3, 1, 2], 1)
    2.0
    >>> order_statistic([3, 1, 2], 0, "min")
    3.0
    """
    v = np.sort(np.asarray(values, dtype=float))
    if v.size == 0:
        raise ValueError("need at least one sample")
    if not 0 <= k < v.size:
        raise ValueError(f"k={k} must satisfy 0 <= k < N={v.size}")
    if direction == "max":
        return float(v[k])
    if direction == "min":
        return float(v[v.size - 1 - k])
    raise ValueError(f"direction must be 'max' or 'min', got {direction!r}")


@lru_cache(maxsize=64)
def _log_choose(n: int) -> np.ndarray:
    i = np.arange(n + 1)
    out = gammaln(n + 1) - gammaln(i + 1) - gammaln(n - i + 1)
    out.setflags(write=False)
    return out


def binom_logcdf(d: int, n: int, p: float) -> float:
    """``log P(Bin(n, p) <= d)``."""
    if d < 0:
        return -math.inf
    if d >= n or p <= 0.0:
        return 0.0
    if p >= 1.0:
        return -math.inf
    if n > LARGE_N:
        with np.errstate(divide="ignore"):
            return float(np.log(betainc(n - d, d + 1, 1.0 - p)))
    i = np.arange(d + 1)
    terms = _log_choose(n)[: d + 1] + i * math.log(p) + (n - i) * math.log1p(-p)
    return float(logsumexp(terms))


def solve_epsilon_for_beta(N: int, d: int, beta: float) -> float:
    """Solve ``P(Bin(N, eps) <= d) = beta`` for ``eps`` by bisection.

    The CDF is strictly decreasing in ``eps`` on (0, 1), so the root is
    unique.  Bisection runs until the bracket cannot shrink any further in
    double precision.

    >>> round(solve_epsilon_for_beta(300, 0, 0.01), 6)
    0.015233
    """
    if not 0.0 < beta < 1.0:
        raise ValueError(f"beta must lie in (0, 1), got {beta!r}")
    if not 0 <= d < N:
        raise ValueError(f"need 0 <= d < N, got d={d}, N={N}")
    if d == 0:
        # (1 - eps)^N = beta
        return float(-math.expm1(math.log(beta) / N))
    target = math.log(beta)
    lo, hi = 0.0, 1.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if mid <= lo or mid >= hi:
            break
        if binom_logcdf(d, N, mid) > target:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def confidence_budget(N: int, gamma: float, eta: float, k: int) -> np.ndarray:
    """``beta_K`` for ``K = 0..N-k`` (left-hand side of the risk equation).

    ``beta_K = eta - P(Bin(N-k, 1-gamma) < K)``; entries may be negative,
    meaning ``K`` is not admissible.
    """
    M = N - k
    i = np.arange(M + 1)
    miss = M - i
    lg = np.zeros(M + 1)
    if gamma > 0:
        lg = miss * math.log(gamma)
    else:
        lg[miss > 0] = -math.inf
    terms = _log_choose(M) + i * math.log1p(-gamma) + lg
    # log P(Bin(M, 1-gamma) <= K-1) for K = 1..M
    below = np.logaddexp.accumulate(terms)[:-1]
    out = np.empty(M + 1)
    out[0] = eta - 1.0
    out[1:] = eta - np.exp(below)
    return out


def _check_args(N, gamma, eta, k):
    if not (isinstance(N, (int, np.integer)) and N >= 1):
        raise ValueError(f"N must be a positive integer, got {N!r}")
    if not 0 <= k < N:
        raise ValueError(f"discard count k={k} must satisfy 0 <= k < N={N}")
    if not 0.0 <= gamma < 1.0:
        raise ValueError(f"gamma must lie in [0, 1), got {gamma!r}")
    if not 0.0 < eta < 1.0:
        raise ValueError(f"eta must lie in (0, 1), got {eta!r}")


def risk_bound(N: int, gamma: float, eta: float, k: int = 0,
               fixed_K: int | None = None) -> RiskBound:
    """Smallest risk ``epsilon`` over all admissible ``K``.

    ``K`` runs from ``N - k`` downwards; a ``K`` is admissible when its
    confidence budget is positive.  Because ``epsilon(d, beta)`` grows as
    ``beta`` shrinks and ``beta_K <= eta``, the enumeration stops once
    ``epsilon(N - K, eta)`` alone exceeds the best value found.

    Pass ``fixed_K`` to skip the search.  ``gamma = 0`` is accepted and
    gives the classical scenario bound.
    """
    _check_args(N, gamma, eta, k)
    budget = confidence_budget(N, gamma, eta, k)
    M = N - k
    if fixed_K is not None:
        K = int(fixed_K)
        if not 1 <= K <= M or budget[K] <= 0:
            raise CertificationInfeasible(
                f"K={K} is not admissible for N={N}, gamma={gamma}, eta={eta}, k={k}")
        eps = solve_epsilon_for_beta(N, N - K, float(budget[K]))
        return RiskBound(eps, K, float(budget[K]), N, k, gamma, eta)

    best = None
    for K in range(M, 0, -1):
        d = N - K
        if best is not None and solve_epsilon_for_beta(N, d, eta) >= best[0]:
            break
        b = float(budget[K])
        if b <= 0:
            continue
        eps = solve_epsilon_for_beta(N, d, b)
        if best is None or eps < best[0]:
            best = (eps, K, b)
    if best is None:
        raise CertificationInfeasible(
            f"no admissible K for N={N}, gamma={gamma}, eta={eta}, k={k}; "
            "gamma is too large for this many samples")
    eps, K, b = best
    return RiskBound(eps, K, b, N, k, gamma, eta)


def certify_values(values, gamma: float, eta: float, k: int = 0, direction: str = "max",
                   fixed_K: int | None = None) -> RiskBound:
    """Guarantee ``J~_(k)`` of ``values`` together with its risk bound."""
    values = np.asarray(values, dtype=float)
    if not np.all(np.isfinite(values)):
        raise ValueError("performance samples must be finite")
    guarantee = order_statistic(values, k, direction)
    rb = risk_bound(int(values.size), gamma, eta, k, fixed_K=fixed_K)
    return RiskBound(rb.epsilon, rb.K, rb.beta, rb.N, rb.k, gamma, eta,
                     guarantee=guarantee, direction=direction)


def certify(samples, eta: float, k: int = 0, fixed_K: int | None = None) -> RiskBound:
    """Certificate from :class:`PerformanceSample` objects sharing one gamma."""
    samples = list(samples)
    if not samples:
        raise ValueError("no samples to certify")
    gammas = {s.gamma for s in samples}
    dirs = {s.direction for s in samples}
    if len(gammas) > 1:
        raise ValueError(f"samples carry different gammas {sorted(gammas)}")
    if len(dirs) > 1:
        raise ValueError("samples mix optimisation directions")
    return certify_values([s.value for s in samples], gammas.pop(), eta, k,
                          dirs.pop(), fixed_K=fixed_K)
