"""Command line interface ``upmdp-cert``.

Exit codes: 0 success, 2 validation error, 3 certification infeasible,
4 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys

import numpy as np

from .benchmarks import BENCHMARKS, BenchmarkSpec, benchmark_document, build_benchmark
from .errors import CertificationInfeasible, ConvergenceError, UpmdpError
from .harness import ExperimentConfig, load_config, run_experiment
from .imdp import Policy, exact_policy_value, robust_value_iteration
from .learn import IntervalMDP, learn_imdp
from .model import check_valuation, instantiate, load_model, sample_valuation
from .scenario import certify_values, risk_bound
from .simulate import BehaviorPolicy, TrajectoryConfig, dump_trajectories, sample_trajectories

__all__ = ["main", "build_parser", "EXIT_OK", "EXIT_VALIDATION", "EXIT_INFEASIBLE", "EXIT_NUMERIC"]

EXIT_OK, EXIT_VALIDATION, EXIT_INFEASIBLE, EXIT_NUMERIC = 0, 2, 3, 4


def _emit(obj, path=None):
    text = json.dumps(obj, indent=2)
    if path:
        with open(path, "w") as fh:
            fh.write(text + "\n")
    else:
        print(text)


def _load_json(path):
    with open(path) as fh:
        return json.load(fh)


def _load_pmdp(ref):
    if ref in BENCHMARKS:
        return build_benchmark(ref)
    return load_model(ref)


def _parse_options(items):
    """``key=value`` pairs; values are read as JSON when possible."""
    out = {}
    for item in items or ():
        key, sep, val = item.partition("=")
        if not sep:
            raise ValueError(f"option {item!r} is not of the form key=value")
        try:
            out[key] = json.loads(val)
        except json.JSONDecodeError:
            out[key] = val
    return out


def read_bounds(path):
    """Per-sample values from a CSV with a ``J_gamma`` column, a JSON list,
    or a plain file with one number per line."""
    with open(path) as fh:
        text = fh.read()
    stripped = text.lstrip()
    if stripped.startswith("["):
        return [float(v) for v in json.loads(text)]
    first = stripped.splitlines()[0] if stripped else ""
    if "J_gamma" in first:
        rows = csv.DictReader(stripped.splitlines())
        return [float(r["J_gamma"]) for r in rows]
    return [float(line.split(",")[0]) for line in stripped.splitlines()
            if line.strip() and not line.startswith("#")]


# --------------------------------------------------------------------------
# subcommands


def cmd_run(args):
    cfg = load_config(args.config)
    overrides = {}
    if args.output_dir:
        overrides["output_dir"] = args.output_dir
    if args.dump_trajectories:
        overrides["dump_trajectories"] = args.dump_trajectories
    if args.workers:
        overrides["workers"] = args.workers
    if args.seed is not None:
        overrides["seed"] = args.seed
    if overrides:
        cfg = ExperimentConfig.from_dict({**cfg.to_json(), **overrides})
    if cfg.dump_trajectories:
        os.makedirs(cfg.dump_trajectories, exist_ok=True)
    report = run_experiment(cfg)
    _emit({"policy": report.policy, "train_value": report.train_value,
           "certificates": report.certificates})


def cmd_bound(args):
    rb = risk_bound(args.n, args.gamma, args.eta, args.discard, fixed_K=args.fixed_K)
    _emit({"epsilon": rb.epsilon, "K": rb.K, "beta": rb.beta})


def cmd_certify(args):
    values = read_bounds(args.bounds)
    out = [certify_values(values, args.gamma, args.eta, k, args.direction, args.fixed_K).to_json()
           for k in args.discard]
    _emit(out[0] if len(out) == 1 else out, args.output)


def cmd_evaluate(args):
    pmdp = _load_pmdp(args.model)
    policy = Policy.from_json(_load_json(args.policy), pmdp.topology)
    out = {}
    if args.theta:
        theta = _load_json(args.theta)
        check_valuation(pmdp.parameters, theta)
        out["exact"] = exact_policy_value(instantiate(pmdp, theta), policy=policy)
    if args.imdp:
        imdp = IntervalMDP.from_json(_load_json(args.imdp))
        if not imdp.topology.same_graph(pmdp.topology):
            raise ValueError("interval MDP and model have different graphs")
        res = robust_value_iteration(imdp, pmdp.objective, optimize=False, policy=policy)
        out["robust"] = res.value
        out["residual"] = res.residual
    if not out:
        raise ValueError("evaluate needs --theta and/or --imdp")
    _emit(out)


def cmd_simulate(args):
    pmdp = _load_pmdp(args.model)
    rng = np.random.default_rng(args.seed)
    if args.theta:
        theta = _load_json(args.theta)
        check_valuation(pmdp.parameters, theta)
    else:
        theta = sample_valuation(pmdp.parameters, rng)
    inst = instantiate(pmdp, theta)
    behavior = BehaviorPolicy()
    if args.policy:
        pol = Policy.from_json(_load_json(args.policy), pmdp.topology)
        behavior = BehaviorPolicy("epsilon", pol.weights, args.epsilon) if args.epsilon > 0 \
            else BehaviorPolicy("fixed", pol.weights)
    traj = sample_trajectories(inst, behavior, TrajectoryConfig(args.n, args.max_length), rng)
    out = {"theta": theta, "n_trajectories": args.n, "steps": int(len(traj.trans))}
    if args.dump_trajectories:
        os.makedirs(args.dump_trajectories, exist_ok=True)
        path = os.path.join(args.dump_trajectories, "trajectories.txt")
        dump_trajectories(path, traj)
        out["dump"] = path
    if args.learn:
        imdp = learn_imdp(pmdp, traj.counts(), args.learn, args.gamma, args.mu)
        path = args.imdp_out or "imdp.json"
        with open(path, "w") as fh:
            fh.write(imdp.dumps(indent=2))
        out["imdp"] = path
    _emit(out)


def cmd_bench_export(args):
    doc = benchmark_document(BenchmarkSpec(args.name, _parse_options(args.option)))
    _emit(doc, args.output)


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="upmdp-cert",
                                description="Learn and certify robust policies for uncertain MDPs.")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run an experiment from a TOML or JSON config")
    r.add_argument("--config", required=True)
    r.add_argument("--output-dir")
    r.add_argument("--dump-trajectories", metavar="DIR")
    r.add_argument("--workers", type=int)
    r.add_argument("--seed", type=int)
    r.set_defaults(func=cmd_run)

    b = sub.add_parser("bound", help="risk bound for N samples")
    b.add_argument("--n", type=int, required=True)
    b.add_argument("--gamma", type=float, required=True)
    b.add_argument("--eta", type=float, required=True)
    b.add_argument("--discard", type=int, default=0)
    b.add_argument("--fixed-K", dest="fixed_K", type=int)
    b.set_defaults(func=cmd_bound)

    c = sub.add_parser("certify", help="certify a file of per-sample lower/upper bounds")
    c.add_argument("--bounds", required=True)
    c.add_argument("--gamma", type=float, required=True)
    c.add_argument("--eta", type=float, required=True)
    c.add_argument("--discard", type=int, nargs="+", default=[0])
    c.add_argument("--direction", choices=("max", "min"), default="max")
    c.add_argument("--fixed-K", dest="fixed_K", type=int)
    c.add_argument("--output", "-o")
    c.set_defaults(func=cmd_certify)

    e = sub.add_parser("evaluate", help="evaluate a policy exactly or on an interval MDP")
    e.add_argument("--model", required=True, help="model file or builtin name")
    e.add_argument("--policy", required=True)
    e.add_argument("--theta", help="JSON valuation for an exact evaluation")
    e.add_argument("--imdp", help="interval MDP JSON for a robust evaluation")
    e.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("simulate", help="sample trajectories from one instance")
    s.add_argument("--model", required=True, help="model file or builtin name")
    s.add_argument("--theta", help="JSON valuation (sampled when omitted)")
    s.add_argument("--n", type=int, default=1000)
    s.add_argument("--max-length", type=int, default=200)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--policy", help="behaviour policy JSON (uniform when omitted)")
    s.add_argument("--epsilon", type=float, default=0.0)
    s.add_argument("--dump-trajectories", metavar="DIR")
    s.add_argument("--learn", choices=("pac", "lui", "map", "ucrl2"))
    s.add_argument("--gamma", type=float, default=1e-4)
    s.add_argument("--mu", type=float, default=1e-6)
    s.add_argument("--imdp-out")
    s.set_defaults(func=cmd_simulate)

    bench = sub.add_parser("bench", help="builtin benchmarks")
    bsub = bench.add_subparsers(dest="bench_command", required=True)
    ex = bsub.add_parser("export", help="print a builtin model document")
    ex.add_argument("name", choices=sorted(BENCHMARKS))
    ex.add_argument("--option", action="append", metavar="KEY=VALUE")
    ex.add_argument("--output", "-o")
    ex.set_defaults(func=cmd_bench_export)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except CertificationInfeasible as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except (ConvergenceError, ArithmeticError, np.linalg.LinAlgError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (UpmdpError, ValueError, KeyError, TypeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
