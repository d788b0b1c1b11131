"""Command-line interface: ``recroute <command> [options]``.

Exit codes: 0 success, 1 computational failure, 2 usage error (bad flags,
missing or malformed input files).
"""

from __future__ import annotations

import argparse
import sys

import numpy as np

from .em import EMConfig
from .estimate import ALGORITHMS, EstimationResult, estimate, evaluate_complete_ll
from .exceptions import NetworkError, ObservationError, RecrouteError
from .experiment import ExperimentConfig, run_sweep
from .model import ParamVector
from .network import generate_grid_network, load_network, save_network, write_id_map
from .observations import (corrupt_trips, load_trips, save_manifest, save_trips,
                           simulate_observations)


class UsageError(Exception):
    pass


def _floats(text):
    if text is None:
        return None
    return [float(x) for x in text.replace(",", " ").split()]


def _words(text):
    if text is None:
        return None
    return [x for x in text.replace(",", " ").split()]


def _add_network(p, features=True):
    p.add_argument("--network", required=True, help="links CSV")
    p.add_argument("--nodes", help="node coordinates CSV (enables turn features)")
    p.add_argument("--pairs", help="transition attributes CSV")
    if features:
        p.add_argument("--features", help="utility feature names, comma separated")
        p.add_argument("--scale-features", help="NRL scale attribute names, comma separated")


def _network(args):
    return load_network(args.network, args.nodes, args.pairs,
                        utility=_words(getattr(args, "features", None)),
                        scale=_words(getattr(args, "scale_features", None)))


def _params(args, net, model, theta_flag="theta", omega_flag="omega"):
    theta = _floats(getattr(args, theta_flag))
    omega = _floats(getattr(args, omega_flag)) or []
    if theta is None:
        return None
    if len(theta) != net.n_features:
        raise UsageError(f"--{theta_flag} needs {net.n_features} values ({', '.join(net.feature_names)})")
    if model == "nrl" and omega and len(omega) != net.n_scale:
        raise UsageError(f"--{omega_flag} needs {net.n_scale} values")
    if model == "nrl" and not omega:
        omega = [0.0] * net.n_scale
    return ParamVector(theta, omega if model == "nrl" else [])


def cmd_generate_network(args):
    nx, ny = (int(x) for x in args.grid.lower().split("x"))
    net = generate_grid_network(nx, ny, diagonals=args.diagonals,
                                bidirectional=args.bidirectional, seed=args.seed)
    save_network(net, args.out, args.nodes_out)
    if args.id_map:
        write_id_map(net, args.id_map)
    print(f"{net.n_links} links, {net.n_nodes} nodes")


def cmd_simulate(args):
    net = _network(args)
    params = _params(args, net, args.model)
    if params is None:
        raise UsageError("--theta is required")
    obs = simulate_observations(net, params, args.model, args.n, dests=_words(args.dests),
                                seed=args.seed, min_links=args.min_links)
    save_trips(obs, args.out)
    print(f"{len(obs)} trips")


def cmd_corrupt(args):
    net = _network(args)
    obs = load_trips(args.trips, net)
    out, manifest = corrupt_trips(obs, args.p, seed=args.seed)
    save_trips(out, args.out)
    if args.manifest:
        save_manifest(manifest, args.manifest)
    print(f"{out.n_unconnected()} unconnected pairs")


def cmd_estimate(args):
    net = _network(args)
    obs = load_trips(args.trips, net)
    theta0 = _params(args, net, args.model, "theta0", "omega0")
    em = EMConfig(samples=args.samples, xi=args.xi, max_iter=args.em_max_iter,
                  exact=args.exact_e, seed=args.seed, gtol=args.tol,
                  m_max_iter=args.max_iter, threads=args.threads, weighting=args.em_weighting)
    res = estimate(obs, args.algo, args.model, theta0=theta0, tol=args.tol,
                   max_iter=args.max_iter, threads=args.threads, em_config=em,
                   with_se=args.std_errors)
    text = res.to_json(args.out)
    if not args.out:
        print(text)
    else:
        print(f"{args.algo}: theta = {np.array2string(res.theta_hat.flat(), precision=6)}, "
              f"LL = {res.ll_at_solution:.6f}, converged = {res.converged}")
    if not res.converged:
        print(f"warning: {res.diagnostics.get('status')}", file=sys.stderr)


def cmd_evaluate(args):
    res = EstimationResult.from_json(args.params)
    net = load_network(args.network, args.nodes, args.pairs,
                       utility=list(res.feature_names) or None,
                       scale=list(res.scale_names) or None)
    obs = load_trips(args.trips, net)
    print(f"{evaluate_complete_ll(res.theta_hat, obs, res.model, threads=args.threads):.10g}")


SWEEP_KEYS = ("network", "nodes", "trips", "features", "model", "algorithms", "p_grid", "seeds",
              "n_trips", "theta", "omega", "dests", "tol", "samples", "xi", "em_max_iter",
              "exact_e", "threads", "workers", "out", "sim_seed", "corrupt_seed")


def cmd_sweep(args):
    overrides = {k: getattr(args, k) for k in SWEEP_KEYS if getattr(args, k, None) is not None}
    if args.exact_e is False:
        overrides.pop("exact_e", None)
    try:
        cfg = (ExperimentConfig.from_file(args.config, overrides) if args.config
               else ExperimentConfig.from_mapping(overrides))
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    table = run_sweep(cfg, log=(lambda m: print(m, file=sys.stderr)) if args.verbose else None)
    for r in table.rows:
        print(f"{r['model']} p={r['p']:.2f} {r['algorithm']:7s} "
              f"LL {r['ll_mean']:.2f} +/- {r['ll_se']:.2f}  "
              f"per-iter {r['per_iteration_time_mean']:.4f}s  total {r['total_time_mean']:.3f}s")


def build_parser():
    parser = argparse.ArgumentParser(prog="recroute",
                                     description="Route choice estimation from incomplete trips")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate-network", help="write a synthetic grid network")
    p.add_argument("--grid", default="8x7", help="NXxNY nodes")
    p.add_argument("--diagonals", action="store_true")
    p.add_argument("--bidirectional", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--nodes-out")
    p.add_argument("--id-map")
    p.set_defaults(func=cmd_generate_network)

    p = sub.add_parser("simulate", help="simulate complete trips")
    _add_network(p)
    p.add_argument("--model", choices=("rl", "nrl"), default="rl")
    p.add_argument("--theta", required=True)
    p.add_argument("--omega")
    p.add_argument("--dests", required=True, help="destination node ids")
    p.add_argument("--n", type=int, default=2000)
    p.add_argument("--min-links", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("corrupt", help="remove interior links at random")
    _add_network(p, features=False)
    p.add_argument("--trips", required=True)
    p.add_argument("--p", type=float, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--manifest")
    p.set_defaults(func=cmd_corrupt)

    p = sub.add_parser("estimate", help="estimate model parameters")
    _add_network(p)
    p.add_argument("--trips", required=True)
    p.add_argument("--model", choices=("rl", "nrl"), default="rl")
    p.add_argument("--algo", choices=ALGORITHMS, default="dc")
    p.add_argument("--theta0", help="starting utility coefficients (default zero)")
    p.add_argument("--omega0")
    p.add_argument("--tol", type=float, default=1e-6)
    p.add_argument("--max-iter", type=int, default=500)
    p.add_argument("--samples", type=int, default=5)
    p.add_argument("--xi", type=float, default=1e-4)
    p.add_argument("--em-max-iter", type=int, default=50)
    p.add_argument("--em-weighting", choices=("probability", "uniform"), default="probability")
    p.add_argument("--exact-e", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--std-errors", action="store_true")
    p.add_argument("--out")
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("evaluate", help="complete-trip log-likelihood at an estimate")
    _add_network(p, features=False)
    p.add_argument("--params", required=True, help="estimation result JSON")
    p.add_argument("--trips", required=True)
    p.add_argument("--threads", type=int, default=1)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("sweep", help="corruption sweep with aggregated tables")
    p.add_argument("--config", help="flat key = value file")
    p.add_argument("--network")
    p.add_argument("--nodes")
    p.add_argument("--trips")
    p.add_argument("--features")
    p.add_argument("--model", choices=("rl", "nrl"))
    p.add_argument("--algorithms")
    p.add_argument("--p-grid", dest="p_grid")
    p.add_argument("--seeds", type=int)
    p.add_argument("--n-trips", dest="n_trips", type=int)
    p.add_argument("--theta")
    p.add_argument("--omega")
    p.add_argument("--dests")
    p.add_argument("--tol", type=float)
    p.add_argument("--samples", type=int)
    p.add_argument("--xi", type=float)
    p.add_argument("--em-max-iter", dest="em_max_iter", type=int)
    p.add_argument("--exact-e", dest="exact_e", action="store_true")
    p.add_argument("--threads", type=int)
    p.add_argument("--workers", type=int)
    p.add_argument("--sim-seed", dest="sim_seed", type=int)
    p.add_argument("--corrupt-seed", dest="corrupt_seed", type=int)
    p.add_argument("--out")
    p.add_argument("-v", "--verbose", action="store_true")
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        args.func(args)
    except (UsageError, NetworkError, ObservationError, FileNotFoundError) as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    except (RecrouteError, ValueError, KeyError, OSError, ArithmeticError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
