"""End-to-end experiments: train a robust policy, certify it, check it.

The pipeline follows the usual split.  Training environments yield learned
interval MDPs that are merged and solved for a robust policy.  Each
verification environment gets a PAC interval MDP on which the policy is
evaluated robustly; the sorted values give the guarantees and the scenario
bounds their risk.  Fresh environments, evaluated exactly on the hidden
kernels, measure the empirical risk.  Hidden instances are only touched by
the simulator and by the ground-truth checks, never by the certified path.

Every environment draws from its own random stream, derived from the master
seed and ``(phase, index)``, so results do not depend on scheduling.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import brentq

from .benchmarks import BENCHMARKS, BenchmarkSpec, build_benchmark
from .errors import UpmdpError
from .imdp import Policy, exact_policy_value, merge_all, robust_value_iteration
from .learn import IntervalMDP, PacConfig, learn_imdp, learn_pac_imdp
from .model import ParametricMDP, instantiate, load_model, sample_valuation
from .scenario import certify_values
from .simulate import (BehaviorPolicy, CountTable, TrajectoryConfig, collect_counts,
                       dump_trajectories, sample_trajectories)

__all__ = [
    "ConfigError",
    "ExperimentConfig",
    "ExperimentReport",
    "load_config",
    "load_experiment_model",
    "env_seed",
    "run_experiment",
    "empirical_risk",
    "true_risk",
    "write_report",
]

TRAIN, VERIFY, FRESH = 0, 1, 2
_PHASES = {TRAIN: "train", VERIFY: "verify", FRESH: "fresh"}


class ConfigError(UpmdpError, ValueError):
    pass


@dataclass
class ExperimentConfig:
    model: str = "chain"
    model_options: dict = field(default_factory=dict)
    n_train: int = 100
    n_verify: int = 100
    n_fresh: int = 1000
    n_trajectories: int = 10_000
    max_length: int = 200
    gamma: float = 1e-4
    eta: float = 1e-2
    discard: list = field(default_factory=lambda: [0, 5, 10])
    train_learner: str = "pac"
    mu: float = 1e-6
    seed: int = 0
    output_dir: str | None = None
    workers: int = 1
    fixed_K: int | None = None
    true_risk: bool = True
    quadrature_points: int = 2000
    dump_trajectories: str | None = None
    curve: list = field(default_factory=list)

    def __post_init__(self):
        for name in ("n_train", "n_verify", "n_fresh", "n_trajectories", "max_length", "workers"):
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)) or v <= 0:
                raise ConfigError(f"{name} must be a positive integer, got {v!r}")
        for name in ("gamma", "eta"):
            v = getattr(self, name)
            if not 0.0 < v < 1.0:
                raise ConfigError(f"{name} must lie in (0, 1), got {v!r}")
        if self.train_learner not in ("pac", "lui", "map", "ucrl2"):
            raise ConfigError(f"unknown training learner {self.train_learner!r}")
        self.discard = sorted({int(k) for k in self.discard}) or [0]
        if self.discard[0] < 0 or self.discard[-1] >= self.n_verify:
            raise ConfigError(f"discard counts must lie in [0, n_verify), got {self.discard}")
        self.curve = sorted(int(c) for c in self.curve)
        if any(c <= 0 or c > self.n_trajectories for c in self.curve):
            raise ConfigError("curve points must lie in [1, n_trajectories]")

    @classmethod
    def from_dict(cls, d) -> "ExperimentConfig":
        d = dict(d.get("experiment", d))
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        return cls(**d)

    def to_json(self) -> dict:
        return dataclasses.asdict(self)


def load_config(path) -> ExperimentConfig:
    """Read a TOML or JSON experiment config (chosen by file extension)."""
    with open(path, "rb") as fh:
        raw = fh.read()
    try:
        if str(path).endswith(".json"):
            d = json.loads(raw)
        else:
            try:
                import tomllib
            except ImportError:
                import tomli as tomllib
            d = tomllib.loads(raw.decode())
    except Exception as exc:
        raise ConfigError(f"cannot parse config {path}: {exc}") from None
    return ExperimentConfig.from_dict(d)


def load_experiment_model(cfg: ExperimentConfig) -> ParametricMDP:
    if cfg.model in BENCHMARKS:
        return build_benchmark(BenchmarkSpec(cfg.model, dict(cfg.model_options)))
    if os.path.exists(cfg.model):
        return load_model(cfg.model)
    raise ConfigError(f"model {cfg.model!r} is neither a builtin nor an existing file")


def env_seed(master: int, phase: int, index: int) -> int:
    """64-bit seed of environment ``index`` in ``phase``."""
    ss = np.random.SeedSequence(entropy=master, spawn_key=(phase, index))
    return int(ss.generate_state(1, np.uint64)[0])


# --------------------------------------------------------------------------
# per-environment work (module level so it can be sent to worker processes)


def _environment(pmdp, seed):
    rng = np.random.default_rng(seed)
    theta = sample_valuation(pmdp.parameters, rng)
    return theta, instantiate(pmdp, theta), rng


def _collect(inst, rng, n_traj, cfg, dump_path=None):
    tcfg = TrajectoryConfig(n_traj, cfg.max_length)
    if dump_path is None:
        return collect_counts(inst, BehaviorPolicy(), tcfg, rng)
    traj = sample_trajectories(inst, BehaviorPolicy(), tcfg, rng)
    dump_trajectories(dump_path, traj)
    return traj.counts()


def _dump_path(cfg, phase, idx):
    if not cfg.dump_trajectories:
        return None
    return os.path.join(cfg.dump_trajectories, f"{_PHASES[phase]}_{idx:04d}.txt")


def _train_task(args):
    pmdp, cfg, idx = args
    seed = env_seed(cfg.seed, TRAIN, idx)
    theta, inst, rng = _environment(pmdp, seed)
    counts = _collect(inst, rng, cfg.n_trajectories, cfg, _dump_path(cfg, TRAIN, idx))
    imdp = learn_imdp(pmdp, counts, cfg.train_learner, cfg.gamma, cfg.mu)
    return imdp.lo, imdp.hi


def _verify_task(args):
    pmdp, cfg, idx, policy_w = args
    seed = env_seed(cfg.seed, VERIFY, idx)
    theta, inst, rng = _environment(pmdp, seed)
    policy = Policy(pmdp.topology, policy_w)
    pac = PacConfig(cfg.gamma, cfg.mu)
    curve = []
    if cfg.curve:
        counts = CountTable.empty(pmdp.topology)
        done = 0
        for point in cfg.curve + ([cfg.n_trajectories] if cfg.curve[-1] != cfg.n_trajectories else []):
            counts = counts + _collect(inst, rng, point - done, cfg)
            done = point
            imdp = learn_pac_imdp(pmdp, counts, pac)
            curve.append((point, robust_value_iteration(imdp, optimize=False, policy=policy).value))
    else:
        counts = _collect(inst, rng, cfg.n_trajectories, cfg, _dump_path(cfg, VERIFY, idx))
        imdp = learn_pac_imdp(pmdp, counts, pac)
    j_gamma = robust_value_iteration(imdp, optimize=False, policy=policy).value
    j_true = exact_policy_value(inst, policy=policy)
    return {
        "sample_id": idx, "J_gamma": j_gamma, "included_check": imdp.includes(inst),
        "seed": seed, "J_true": j_true, "theta": theta, "curve": curve,
    }


def _fresh_task(args):
    pmdp, cfg, idx, policy_w = args
    seed = env_seed(cfg.seed, FRESH, idx)
    rng = np.random.default_rng(seed)
    inst = instantiate(pmdp, sample_valuation(pmdp.parameters, rng))
    return exact_policy_value(inst, policy=Policy(pmdp.topology, policy_w))


def _map(fn, tasks, workers):
    if workers <= 1:
        return [fn(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, tasks, chunksize=max(1, len(tasks) // (4 * workers))))


# --------------------------------------------------------------------------
# risk on fresh environments


def _worse(values, guarantee, direction):
    values = np.asarray(values, dtype=float)
    return values < guarantee if direction == "max" else values > guarantee


def empirical_risk(pmdp: ParametricMDP, policy: Policy, guarantee: float, n_fresh: int,
                   rng: np.random.Generator, direction: str | None = None) -> float:
    """Fraction of fresh environments where ``policy`` does strictly worse
    than ``guarantee``."""
    if n_fresh < 1:
        raise ValueError("n_fresh must be positive")
    direction = direction or pmdp.objective.direction
    vals = [exact_policy_value(instantiate(pmdp, sample_valuation(pmdp.parameters, rng)), policy=policy)
            for _ in range(n_fresh)]
    return float(np.mean(_worse(vals, guarantee, direction)))


def true_risk(pmdp: ParametricMDP, policy: Policy, guarantees, n_points: int = 2000,
              direction: str | None = None):
    """Violation probability of each guarantee for single-parameter models.

    The policy value is tabulated at ``n_points`` quantiles of the parameter
    distribution; every sign change of ``J - guarantee`` between neighbours
    is refined by root finding and the violating mass is read off the CDF.
    Returns None for models with more parameters.
    """
    if len(pmdp.parameters) != 1:
        return None
    direction = direction or pmdp.objective.direction
    (name, dist), = pmdp.parameters.items()

    def J(x):
        return exact_policy_value(instantiate(pmdp, {name: float(x)}), policy=policy)

    lo, hi = dist.support
    qs = (np.arange(n_points) + 0.5) / n_points
    xs = dist.ppf(qs)
    vals = np.array([J(x) for x in xs])
    out = []
    for g in guarantees:
        bad = _worse(vals, g, direction)
        # breakpoints between grid cells: the support ends and every refined crossing
        edges = [lo]
        for i in np.flatnonzero(bad[1:] != bad[:-1]):
            a, b = xs[i], xs[i + 1]
            try:
                edges.append(brentq(lambda x: J(x) - g, a, b, xtol=1e-14))
            except ValueError:
                edges.append(0.5 * (a + b))
        edges.append(hi)
        cdf = np.clip(dist.cdf(np.array(edges, dtype=float)), 0.0, 1.0)
        # segment j lies between edges j and j + 1 and carries the state of its grid points
        flags = [bad[0]] + [not bad[0] if (j % 2) else bad[0] for j in range(1, len(edges) - 1)]
        risk = sum(cdf[j + 1] - cdf[j] for j, f in enumerate(flags) if f)
        out.append(float(risk))
    return out


# --------------------------------------------------------------------------
# the experiment


@dataclass
class ExperimentReport:
    config: dict
    samples: list
    certificates: list
    policy: dict
    train_value: float
    true_robust: float
    fresh_values: list
    timings: dict = field(default_factory=dict)
    error: str | None = None

    def to_json(self, timings: bool = True) -> dict:
        d = {
            "config": self.config,
            "policy": self.policy,
            "train_value": self.train_value,
            "true_robust": self.true_robust,
            "certificates": self.certificates,
            "samples": [{k: v for k, v in s.items() if k != "curve"} for s in self.samples],
        }
        if self.error:
            d["error"] = self.error
        if timings:
            d["timings"] = self.timings
        return d


def run_experiment(cfg: ExperimentConfig, pmdp: ParametricMDP | None = None) -> ExperimentReport:
    """Train, certify and check one policy.  Deterministic given ``cfg.seed``."""
    pmdp = pmdp or load_experiment_model(cfg)
    direction = pmdp.objective.direction
    timings = {}
    report = ExperimentReport(cfg.to_json(), [], [], {}, math.nan, math.nan, [], timings)
    try:
        t0 = time.perf_counter()
        trained = _map(_train_task, [(pmdp, cfg, i) for i in range(cfg.n_train)], cfg.workers)
        merged = merge_all(IntervalMDP(pmdp.topology, lo, hi, check=False) for lo, hi in trained)
        res = robust_value_iteration(merged)
        policy = res.policy
        report.policy = policy.to_json()
        report.train_value = res.value
        timings["train"] = time.perf_counter() - t0

        t0 = time.perf_counter()
        samples = _map(_verify_task, [(pmdp, cfg, i, policy.weights) for i in range(cfg.n_verify)],
                       cfg.workers)
        report.samples = samples
        timings["verify"] = time.perf_counter() - t0

        t0 = time.perf_counter()
        jg = [s["J_gamma"] for s in samples]
        jt = [s["J_true"] for s in samples]
        report.true_robust = float(min(jt) if direction == "max" else max(jt))
        fresh = _map(_fresh_task, [(pmdp, cfg, i, policy.weights) for i in range(cfg.n_fresh)],
                     cfg.workers)
        report.fresh_values = fresh
        bounds = [certify_values(jg, cfg.gamma, cfg.eta, k, direction, cfg.fixed_K) for k in cfg.discard]
        exact = true_risk(pmdp, policy, [b.guarantee for b in bounds], cfg.quadrature_points) \
            if cfg.true_risk else None
        for i, b in enumerate(bounds):
            entry = b.to_json()
            entry["empirical_risk"] = float(np.mean(_worse(fresh, b.guarantee, direction)))
            entry["true_risk"] = None if exact is None else exact[i]
            entry["bounds_true_robust"] = bool(
                b.guarantee <= report.true_robust if direction == "max" else b.guarantee >= report.true_robust)
            report.certificates.append(entry)
        timings["certify"] = time.perf_counter() - t0
    except Exception as exc:
        report.error = f"{type(exc).__name__}: {exc}"
        if cfg.output_dir:
            write_report(report, cfg.output_dir)
        raise
    if cfg.output_dir:
        write_report(report, cfg.output_dir)
    return report


def write_report(report: ExperimentReport, out_dir) -> None:
    """``samples.csv``, ``certificate.json``, ``report.json`` and, when
    requested, ``curve.csv`` (guarantee against trajectory count)."""
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "samples.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sample_id", "J_gamma", "included_check", "seed"])
        for s in report.samples:
            w.writerow([s["sample_id"], repr(s["J_gamma"]), int(s["included_check"]), s["seed"]])
    cert = {"certificates": report.certificates, "policy": report.policy}
    if report.error:
        cert["error"] = report.error
    with open(os.path.join(out_dir, "certificate.json"), "w") as fh:
        json.dump(cert, fh, indent=2)
    with open(os.path.join(out_dir, "report.json"), "w") as fh:
        json.dump(report.to_json(), fh, indent=2)
    if report.samples and report.samples[0].get("curve"):
        points = [p for p, _ in report.samples[0]["curve"]]
        direction = report.certificates[0]["direction"] if report.certificates else "max"
        with open(os.path.join(out_dir, "curve.csv"), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["n_trajectories", "guarantee_k0", "mean_J_gamma"])
            for i, p in enumerate(points):
                vals = [s["curve"][i][1] for s in report.samples]
                g = min(vals) if direction == "max" else max(vals)
                w.writerow([p, repr(g), repr(float(np.mean(vals)))])
