"""Expectation-maximization over the missing segments of incomplete trips.

The E-step replaces every unconnected pair ``(u, v)`` with ``S`` connecting
paths drawn by random walks from ``u`` under the current link choice
probabilities; a walk is accepted on its first arrival at ``v`` and rejected
when it is absorbed at the destination or exceeds the step cap.  Accepted
paths are weighted by their probabilities normalized over the pair, and the
weighted transitions are added to the observed edge counts.  The M-step
maximizes the resulting weighted log-likelihood.

Random draws for the walks of one destination come from a stream seeded by
``(seed, dest, round)`` and do not change across EM iterations (unless
``fresh_streams`` is set), so the E-step is a deterministic function of the
current parameters and the iteration can settle on a fixed point.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field

import numpy as np

from .exceptions import EnumerationOverflow, UnsampleablePair
from .likelihood import count_log_likelihood
from .model import DEFAULT_OPTIONS, ParamVector, solve_value
from .observations import TransitionSampler
from .optimize import maximize
from .reach import PairQuery, enumerate_paths, map_destinations


@dataclass(frozen=True)
class PathSample:
    """One connecting path for an unconnected pair.

    ``links`` runs from ``u`` to ``v`` inclusive and ``edges`` holds the
    matching edge indices of the extended network.  Dummy fillers have no
    links and zero weight.
    """

    pair: PairQuery
    links: tuple
    edges: tuple
    prob: float
    weight: float
    is_dummy: bool = False
    trip: int = -1
    position: int = -1


@dataclass
class EMConfig:
    samples: int = 5
    xi: float = 1e-4
    max_iter: int = 50
    step_cap_factor: int = 4
    retry_cap: int = 50
    exact: bool = False
    max_enum_paths: int = 10**4
    seed: int = 0
    fresh_streams: bool = False
    gtol: float = 1e-6
    m_max_iter: int = 500
    threads: int = 1
    weighting: str = "probability"


@dataclass
class SamplingStats:
    walkers: int = 0
    steps: int = 0
    accepted: int = 0
    dummies: int = 0
    enumerated_pairs: int = 0

    def add(self, other):
        for k in vars(self):
            setattr(self, k, getattr(self, k) + getattr(other, k))


def _normalize(pair, found, S, trip=-1, position=-1, weighting="probability"):
    """PathSamples with weights ``p / sum(p)`` (or ``1 / n``), padded to ``S`` with dummies."""
    total = sum(p for _, _, p in found)
    n = len(found)
    out = [PathSample(pair, tuple(links), tuple(edges), p,
                      p / total if weighting == "probability" else 1.0 / n, False, trip, position)
           for links, edges, p in found]
    out += [PathSample(pair, (), (), 0.0, 0.0, True, trip, position)] * (S - len(found))
    return out


def _walk_batch(ext, sampler, log_prob, starts, targets, cap, rng):
    """Random walks from ``starts``; returns, per walker, the accepted edge path or None."""
    W = len(starts)
    pos = np.array(starts, dtype=np.int64)
    alive = np.ones(W, dtype=bool)
    hist = np.empty((W, cap), dtype=np.int64)
    length = np.zeros(W, dtype=np.int64)
    done = np.zeros(W, dtype=bool)
    steps = 0
    for t in range(cap):
        idx = np.flatnonzero(alive)
        if idx.size == 0:
            break
        e = sampler.step_edge(pos[idx], rng.random(idx.size))
        steps += idx.size
        hist[idx, t] = e
        pos[idx] = ext.edge_dst[e]
        hit = pos[idx] == targets[idx]
        done[idx[hit]] = True
        length[idx[hit]] = t + 1
        alive[idx[hit | (pos[idx] == ext.dummy)]] = False
    paths = [hist[w, :length[w]] if done[w] else None for w in range(W)]
    return paths, steps


def sample_connecting_paths(ext, vf, pair, S=5, step_cap=None, retry_cap=50, rng=None,
                            weighting="probability"):
    """Up to ``S`` sampled paths from ``pair.u`` to its first arrival at ``pair.v``.

    ``weighting="probability"`` weights accepted paths by their probability
    normalized over the pair; ``"uniform"`` gives each accepted path
    ``1 / n_accepted`` (walks already follow the conditional path law).
    Raises :class:`UnsampleablePair` when no walk is accepted within
    ``retry_cap * S`` attempts.
    """
    [samples], _ = _sample_pairs(ext, vf, [pair], S, step_cap, retry_cap,
                                 rng if rng is not None else np.random.default_rng(),
                                 weighting=weighting)
    if samples is None:
        raise UnsampleablePair(f"no walk from {pair.u} reached {pair.v}")
    return samples


def _sample_pairs(ext, vf, pairs, S, step_cap, retry_cap, rng, meta=None,
                  weighting="probability"):
    """Vectorized acceptance sampling for many pairs of one destination.

    Returns a list with, per pair, its PathSamples or None if unsampleable.
    """
    cap = step_cap or 4 * max(ext.diameter, 1)
    sampler = TransitionSampler(vf)
    log_prob = vf.log_prob
    n = len(pairs)
    u = np.array([q.u for q in pairs], dtype=np.int64)
    v = np.array([q.v for q in pairs], dtype=np.int64)
    found = [[] for _ in range(n)]
    attempts = np.zeros(n, dtype=np.int64)
    stats = SamplingStats()
    batch = 2 * S
    while True:
        short = np.array([len(f) < S for f in found], dtype=bool)
        need = np.flatnonzero(short & (attempts < retry_cap * S))
        if need.size == 0:
            break
        who = np.repeat(need, batch)
        attempts[need] += batch
        paths, steps = _walk_batch(ext, sampler, log_prob, u[who], v[who], cap, rng)
        stats.walkers += who.size
        stats.steps += steps
        for j, path in zip(who, paths):
            if path is not None and len(found[j]) < S:
                edges = tuple(int(e) for e in path)
                links = (int(u[j]),) + tuple(int(a) for a in ext.edge_dst[path])
                found[j].append((links, edges, float(np.exp(log_prob[path].sum()))))
    out = []
    for j, q in enumerate(pairs):
        if not found[j]:
            out.append(None)
            continue
        trip, position = meta[j] if meta is not None else (-1, -1)
        stats.accepted += len(found[j])
        stats.dummies += S - len(found[j])
        out.append(_normalize(q, found[j], S, trip, position, weighting))
    return out, stats


def exact_connecting_paths(ext, vf, pair, max_paths=10**4, trip=-1, position=-1):
    """Every connecting path of ``pair`` with its exact conditional weight."""
    paths = enumerate_paths(ext, vf, pair.u, pair.v, max_paths=max_paths)
    if not paths:
        raise UnsampleablePair(f"link {pair.v} cannot be reached from {pair.u}")
    return _normalize(pair, paths, len(paths), trip, position)


def e_step(obs, params, model="rl", config=None, options=DEFAULT_OPTIONS, iteration=0):
    """Connecting-path samples for every unconnected pair at ``params``.

    Returns ``({dest: [PathSample, ...]}, SamplingStats)``.
    """
    config = config or EMConfig()
    tallies = obs.tallies
    dests = [d for d in tallies if tallies[d].pairs]

    def one(d):
        tally = tallies[d]
        ext = tally.ext
        vf = solve_value(ext, params, model, jacobian=False, options=options)
        stats = SamplingStats()
        pairs = [PairQuery(u, v, d) for _, _, u, v in tally.pairs]
        meta = [(i, pos) for i, pos, _, _ in tally.pairs]
        result = [None] * len(pairs)
        todo = list(range(len(pairs)))
        if config.exact:
            todo = []
            for j, q in enumerate(pairs):
                try:
                    result[j] = exact_connecting_paths(ext, vf, q, config.max_enum_paths, *meta[j])
                    stats.enumerated_pairs += 1
                except EnumerationOverflow:
                    todo.append(j)
        if todo:
            key = [config.seed, d] + ([iteration] if config.fresh_streams else [])
            rng = np.random.default_rng(key)
            sampled, st = _sample_pairs(ext, vf, [pairs[j] for j in todo], config.samples,
                                        config.step_cap_factor * max(ext.diameter, 1),
                                        config.retry_cap, rng, [meta[j] for j in todo],
                                        config.weighting)
            stats.add(st)
            for j, s in zip(todo, sampled):
                if s is None:
                    # rare: fall back to enumeration when the pair is small enough
                    try:
                        s = exact_connecting_paths(ext, vf, pairs[j], config.max_enum_paths,
                                                   *meta[j])
                    except EnumerationOverflow:
                        q = pairs[j]
                        raise UnsampleablePair(
                            f"pair ({q.u}, {q.v}) of trip {obs.trips[meta[j][0]].id!r} could not "
                            f"be sampled and has too many paths to enumerate") from None
                    stats.enumerated_pairs += 1
                result[j] = s
        return [s for group in result for s in group], stats

    parts = map_destinations(one, dests, config.threads)
    stats = SamplingStats()
    for _, st in parts:
        stats.add(st)
    return {d: p[0] for d, p in zip(dests, parts)}, stats


@dataclass(eq=False)
class ExpectedLL:
    """Weighted log-likelihood of observed plus sampled transitions.

    ``weights[dest] = (ext, w)`` with ``w`` the observed edge counts plus
    the sample-weighted edge counts; the weights are constants in ``theta``.
    """

    obs: object
    theta_t: ParamVector
    model: str
    samples: dict
    weights: dict
    options: object = DEFAULT_OPTIONS
    threads: int = 1

    def params(self, x):
        x = np.asarray(x, dtype=float)
        return ParamVector.from_flat(x, self.theta_t.theta.size, self.theta_t.mu)

    def __call__(self, x):
        """``(R, grad R)`` at flat parameters ``x``."""
        return count_log_likelihood(self.weights, self.params(x), self.model,
                                    options=self.options, threads=self.threads)

    def term_by_term(self, x):
        """Same quantity assembled pair by pair (bookkeeping check)."""
        p = self.params(x)
        ll, grad = 0.0, np.zeros(p.size if self.model == "nrl" else p.theta.size)
        for d, tally in self.obs.tallies.items():
            vf = solve_value(tally.ext, p, self.model, options=self.options)
            ll += float(tally.counts @ vf.log_prob)
            grad += tally.counts @ vf.dlog_prob
            for s in self.samples.get(d, ()):
                if s.is_dummy:
                    continue
                e = np.array(s.edges, dtype=np.int64)
                ll += s.weight * float(vf.log_prob[e].sum())
                grad += s.weight * vf.dlog_prob[e].sum(axis=0)
        return ll, grad


def build_expected_ll(obs, samples, theta_t, model="rl", options=DEFAULT_OPTIONS, threads=1):
    """Fold connecting-path samples into per-destination edge weights."""
    weights = {}
    for d, tally in obs.tallies.items():
        w = tally.counts.astype(float).copy()
        for s in samples.get(d, ()):
            if s.weight > 0:
                np.add.at(w, np.array(s.edges, dtype=np.int64), s.weight)
        weights[d] = (tally.ext, w)
    return ExpectedLL(obs, theta_t, model, samples, weights, options, threads)


@dataclass
class EMTrace:
    records: list = field(default_factory=list)
    converged: bool = False
    status: str = "max_iter"
    elapsed: float = 0.0
    m_iterations: int = 0

    @property
    def iterations(self):
        return len(self.records)

    def write_jsonl(self, path):
        with open(path, "w") as fh:
            for r in self.records:
                fh.write(json.dumps(r) + "\n")


def em_estimate(obs, theta0, model="rl", config=None, options=DEFAULT_OPTIONS,
                marginal_ll=None, trace_path=None):
    """Alternate E- and M-steps until ``max|theta_t+1 - theta_t| < xi``.

    Parameters
    ----------
    theta0 : ParamVector
        Feasible starting point.
    marginal_ll : callable, optional
        ``params -> float`` evaluated after every iteration and stored in the
        trace (excluded from the timings).

    Returns
    -------
    theta_hat : ParamVector
    trace : EMTrace
    """
    config = config or EMConfig()
    theta = theta0
    trace = EMTrace()
    complete = all(not t.pairs for t in obs.tallies.values())
    for it in range(config.max_iter):
        t0 = time.perf_counter()
        samples, stats = e_step(obs, theta, model, config, options, iteration=it)
        t1 = time.perf_counter()
        rhat = build_expected_ll(obs, samples, theta, model, options, config.threads)
        res = maximize(rhat, theta.flat(), tol=config.gtol, max_iter=config.m_max_iter)
        t2 = time.perf_counter()
        new = rhat.params(res.x)
        step = float(np.max(np.abs(res.x - theta.flat()), initial=0.0))
        record = {
            "iteration": it + 1,
            "theta": res.x.tolist(),
            "step": step,
            "rhat": res.value,
            "m_iterations": res.iterations,
            "m_status": res.status,
            "e_time": t1 - t0,
            "m_time": t2 - t1,
            "walkers": stats.walkers,
            "walk_steps": stats.steps,
            "dummies": stats.dummies,
            "enumerated_pairs": stats.enumerated_pairs,
        }
        trace.elapsed += t2 - t0
        trace.m_iterations += res.iterations
        if marginal_ll is not None:
            record["marginal_ll"] = float(marginal_ll(new))
        trace.records.append(record)
        theta = new
        if res.status == "line_search_failure" and step == 0.0:
            trace.status = "m_step_failure"
            break
        if step < config.xi or complete:
            trace.converged, trace.status = True, "converged"
            break
    if trace_path is not None:
        trace.write_jsonl(trace_path)
    return theta, trace
