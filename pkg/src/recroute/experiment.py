"""Synthetic corruption sweeps: simulate, corrupt, estimate, evaluate, tabulate.

Every ``(p, seed, algorithm)`` cell is written to ``<out>/runs`` as one JSON
file; cells already on disk are skipped, so an interrupted sweep can be
rerun.  Aggregates go to ``results.csv`` (mean and standard error over seeds
per ``(model, p, algorithm)``) and ``plot_data.csv`` (one record per
quantity, algorithm and ``p``).
"""

from __future__ import annotations

import configparser
import csv
import json
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .em import EMConfig
from .estimate import ALGORITHMS, estimate, evaluate_complete_ll
from .model import ParamVector
from .network import generate_grid_network, load_network
from .observations import corrupt_trips, load_trips, simulate_observations

QUANTITIES = ("ll", "per_iteration_time", "total_time", "theta_error")
PLOT_QUANTITIES = ("ll", "per_iteration_time", "total_time")


def _floats(text):
    return [float(x) for x in str(text).replace(",", " ").split()]


def _words(text):
    return [x for x in str(text).replace(",", " ").split()]


@dataclass
class ExperimentConfig:
    """Sweep settings.

    ``network`` is a links CSV path or ``grid:NXxNY`` (``grid:8x7d`` adds
    diagonal links); ``dests`` are node ids (default: the north-east corner
    and its two neighbours for grids).  ``theta`` (then ``omega``) are the
    true coefficients used to simulate trips when ``trips`` is empty.
    """

    network: str = "grid:8x7"
    nodes: str = ""
    trips: str = ""
    features: list = field(default_factory=lambda: ["travel_time", "LT"])
    scale_features: list = field(default_factory=lambda: ["travel_time", "OL"])
    model: str = "rl"
    algorithms: list = field(default_factory=lambda: ["dc", "em", "nfxp-i"])
    p_grid: list = field(default_factory=lambda: [round(0.1 * i, 1) for i in range(1, 10)])
    seeds: int = 10
    n_trips: int = 2000
    theta: list = field(default_factory=lambda: [-2.0, -0.8])
    omega: list = field(default_factory=list)
    dests: list = field(default_factory=list)
    sim_seed: int = 1
    corrupt_seed: int = 0
    tol: float = 1e-6
    max_iter: int = 500
    samples: int = 5
    xi: float = 1e-4
    em_max_iter: int = 50
    exact_e: bool = False
    threads: int = 1
    workers: int = 1
    out: str = "sweep_out"

    _LISTS = {"features": _words, "scale_features": _words, "algorithms": _words,
              "p_grid": _floats, "theta": _floats, "omega": _floats, "dests": _words}

    def __post_init__(self):
        self.validate()

    def validate(self):
        if not all(0.0 <= p <= 1.0 for p in self.p_grid):
            raise ValueError("p_grid values must lie in [0, 1]")
        if self.seeds < 1:
            raise ValueError("seeds must be at least 1")
        if self.model not in ("rl", "nrl"):
            raise ValueError(f"unknown model {self.model!r}")
        bad = set(self.algorithms) - set(ALGORITHMS)
        if bad:
            raise ValueError(f"unknown algorithms {sorted(bad)}")

    @classmethod
    def from_mapping(cls, values, base=None):
        """Override ``base`` (or the defaults) with string or typed values."""
        current = asdict(base) if base is not None else {}
        types = {f.name: f.type for f in fields(cls)}
        for key, raw in values.items():
            key = key.replace("-", "_")
            if key not in types:
                raise ValueError(f"unknown config key {key!r}")
            if raw is None:
                continue
            if key in cls._LISTS:
                val = cls._LISTS[key](raw) if isinstance(raw, str) else list(raw)
            elif types[key] in ("int", int):
                val = int(raw)
            elif types[key] in ("float", float):
                val = float(raw)
            elif types[key] in ("bool", bool):
                val = raw if isinstance(raw, bool) else str(raw).lower() in ("1", "true", "yes", "on")
            else:
                val = str(raw)
            current[key] = val
        return cls(**current)

    @classmethod
    def from_file(cls, path, overrides=None):
        """Flat ``key = value`` file (no section headers), then ``overrides``."""
        parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#",))
        with open(path) as fh:
            parser.read_string("[sweep]\n" + fh.read())
        cfg = cls.from_mapping(dict(parser["sweep"]))
        return cls.from_mapping(overrides or {}, cfg) if overrides else cfg

    def to_dict(self):
        return asdict(self)


# --- context shared by all cells -------------------------------------------------

def build_network(config):
    if config.network.startswith("grid:"):
        shape = config.network[5:]
        diag = shape.endswith("d")
        nx, ny = (int(x) for x in shape.rstrip("d").split("x"))
        return generate_grid_network(nx, ny, diagonals=diag, utility=config.features,
                                     scale=config.scale_features)
    return load_network(config.network, config.nodes or None, utility=config.features,
                        scale=config.scale_features)


def _default_dests(net):
    names = []
    for node in net.node_ids:
        if node.startswith("n") and "_" in node:
            i, j = (int(x) for x in node[1:].split("_"))
            names.append((i + j, node))
    if not names:
        raise ValueError("dests must be given for non-grid networks")
    top = sorted(names, reverse=True)[:3]
    return [n for _, n in top]


def true_params(config):
    return ParamVector(config.theta, config.omega if config.model == "nrl" else [])


def build_context(config):
    """Network and complete observations for a sweep."""
    net = build_network(config)
    if config.trips:
        obs = load_trips(config.trips, net)
    else:
        dests = config.dests or _default_dests(net)
        obs = simulate_observations(net, true_params(config), config.model, config.n_trips,
                                    dests=dests, seed=config.sim_seed)
    return net, obs


_CONTEXT = {}


def _context(config):
    key = json.dumps(config.to_dict(), sort_keys=True)
    if key not in _CONTEXT:
        _CONTEXT.clear()
        _CONTEXT[key] = build_context(config)
    return _CONTEXT[key]


# --- cells -----------------------------------------------------------------------

def cell_name(p, seed, algorithm):
    return f"p{p:.2f}_s{seed}_{algorithm}.json"


def _atomic_write(path, payload):
    tmp = f"{path}.tmp{os.getpid()}"
    with open(tmp, "w") as fh:
        json.dump(payload, fh, indent=1)
    os.replace(tmp, path)


def run_cell(config, p, seed, algorithm):
    """Corrupt, estimate and evaluate one cell; errors are recorded, not raised."""
    _, obs = _context(config)
    record = {"model": config.model, "p": p, "seed": seed, "algorithm": algorithm}
    t0 = time.perf_counter()
    try:
        data = obs
        if p > 0:
            data, _ = corrupt_trips(obs, p, seed=[config.corrupt_seed, seed, int(round(p * 1e6))])
        em = EMConfig(samples=config.samples, xi=config.xi, max_iter=config.em_max_iter,
                      exact=config.exact_e, seed=config.corrupt_seed + seed, gtol=config.tol,
                      m_max_iter=config.max_iter, threads=config.threads)
        res = estimate(data, algorithm, config.model, tol=config.tol, max_iter=config.max_iter,
                       threads=config.threads, em_config=em)
        record.update(status="ok", result=res.to_dict(),
                      ll=evaluate_complete_ll(res.theta_hat, obs, config.model,
                                              threads=config.threads),
                      per_iteration_time=res.per_iteration_time, total_time=res.total_time,
                      n_unconnected=data.n_unconnected())
        if not config.trips:
            truth = true_params(config).flat()
            record["theta_error"] = float(np.linalg.norm(res.theta_hat.flat() - truth))
    except Exception as exc:  # noqa: BLE001 - a failed cell must not stop the sweep
        record.update(status="failed", error=f"{type(exc).__name__}: {exc}")
    record["wall_time"] = time.perf_counter() - t0
    return record


def _run_and_store(args):
    config, p, seed, algorithm, path = args
    record = run_cell(config, p, seed, algorithm)
    _atomic_write(path, record)
    return path


def sweep_cells(config):
    """``(p, seed, algorithm)`` triples of a sweep; ``p = 0`` is a single NFXP-C cell."""
    cells = [(0.0, 0, "nfxp-c")]
    for p in config.p_grid:
        if p == 0:
            continue
        for seed in range(config.seeds):
            for algo in config.algorithms:
                cells.append((float(p), seed, algo))
    return cells


def run_sweep(config, log=None):
    """Run (or resume) a sweep and write its aggregates.  Returns the :class:`ResultsTable`."""
    runs = os.path.join(config.out, "runs")
    os.makedirs(runs, exist_ok=True)
    with open(os.path.join(config.out, "run_report.json"), "w") as fh:
        json.dump({"config": config.to_dict()}, fh, indent=1)
    todo = []
    for p, seed, algo in sweep_cells(config):
        path = os.path.join(runs, cell_name(p, seed, algo))
        if not os.path.exists(path):
            todo.append((config, p, seed, algo, path))
    if log:
        log(f"{len(todo)} cells to run")
    if config.workers > 1 and len(todo) > 1:
        with ProcessPoolExecutor(max_workers=config.workers) as pool:
            for path in pool.map(_run_and_store, todo):
                if log:
                    log(f"done {os.path.basename(path)}")
    else:
        for args in todo:
            _run_and_store(args)
            if log:
                log(f"done {os.path.basename(args[-1])}")
    table = aggregate(config.out, config.p_grid, config.algorithms)
    table.write(config.out)
    return table


# --- aggregation -----------------------------------------------------------------

def load_runs(out):
    runs = os.path.join(out, "runs")
    records = []
    for name in sorted(os.listdir(runs)):
        if name.endswith(".json"):
            with open(os.path.join(runs, name)) as fh:
                records.append(json.load(fh))
    return records


def mean_se(values):
    x = np.asarray(values, dtype=float)
    if x.size == 0:
        return float("nan"), float("nan")
    se = float(x.std(ddof=1) / np.sqrt(x.size)) if x.size > 1 else 0.0
    return float(x.mean()), se


@dataclass
class ResultsTable:
    """Rows ``{model, p, algorithm, n, failed, <q>_mean, <q>_se}``."""

    rows: list

    def get(self, p, algorithm, quantity="ll"):
        for r in self.rows:
            if abs(r["p"] - p) < 1e-12 and r["algorithm"] == algorithm:
                return r[f"{quantity}_mean"], r[f"{quantity}_se"]
        raise KeyError((p, algorithm))

    def write(self, out):
        cols = ["model", "p", "algorithm", "n", "failed"] + [
            f"{q}_{s}" for q in QUANTITIES for s in ("mean", "se")]
        with open(os.path.join(out, "results.csv"), "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=cols)
            w.writeheader()
            for r in self.rows:
                w.writerow(r)
        with open(os.path.join(out, "plot_data.csv"), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["quantity", "algorithm", "p", "mean", "stderr"])
            for q in PLOT_QUANTITIES:
                for r in self.rows:
                    w.writerow([q, r["algorithm"], r["p"], r[f"{q}_mean"], r[f"{q}_se"]])


def aggregate(out, p_grid=None, algorithms=None):
    """Mean and standard error over seeds per ``(model, p, algorithm)``.

    The ``p = 0`` NFXP-C cell is repeated under every algorithm.
    """
    records = load_runs(out)
    groups = {}
    for r in records:
        groups.setdefault((r["model"], r["p"], r["algorithm"]), []).append(r)
    algos = algorithms or sorted({r["algorithm"] for r in records if r["p"] > 0})
    rows = []
    for (model, p, algo), recs in sorted(groups.items()):
        ok = [r for r in recs if r["status"] == "ok"]
        row = {"model": model, "p": p, "algorithm": algo, "n": len(ok),
               "failed": len(recs) - len(ok)}
        for q in QUANTITIES:
            row[f"{q}_mean"], row[f"{q}_se"] = mean_se([r[q] for r in ok if q in r])
        if p == 0:
            for a in algos:
                rows.append({**row, "algorithm": a})
        else:
            rows.append(row)
    rows.sort(key=lambda r: (r["model"], r["p"], r["algorithm"]))
    return ResultsTable(rows)
