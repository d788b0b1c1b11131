"""Reach probabilities of unconnected link pairs and the DC log-likelihood.

Two exact routes are provided:

* :func:`solve_reach_single` solves, for one target link ``a``, the
  absorbing system ``pi = Q^a pi + h^a`` whose solution holds the
  probability of reaching ``a`` from every link.
* :func:`build_composed_system` / :func:`solve_reach_matrix` solve a single
  multi right-hand-side system ``(I - Q0) Pi = H`` for all pairs of one
  destination.  ``Q0`` carries the *transposed* transition matrix
  (``Q0[s, s'] = P(s | s')``) so that column ``j`` of ``Pi`` propagates
  mass forward from ``u_j``; an extra state (last index) plays the
  artificial entry link and ``H[:, j]`` has ones at ``u_j`` and there.

On acyclic networks both agree with :func:`brute_force_reach`, which sums
path probabilities by enumeration.  When the target can be revisited
(cyclic networks) the composed solution counts expected visits instead.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .exceptions import EnumerationOverflow, InfeasibleParameters
from .model import DEFAULT_OPTIONS, solve_value

PROB_FLOOR = 1e-300
MAX_PATHS = 10**6


@dataclass
class SolveCounter:
    """Instrumentation of linear solves (one call = one multi-RHS solve)."""

    composed: int = 0
    factorizations: int = 0
    destinations: int = 0

    def reset(self):
        self.composed = self.factorizations = self.destinations = 0


@dataclass(frozen=True)
class PairQuery:
    u: int
    v: int
    dest: int


@dataclass(eq=False)
class ComposedSystem:
    """``(I - Q0) Pi = H`` for the queries of one destination."""

    ext: object
    vf: object
    queries: list
    Q0: sp.csc_matrix
    H: np.ndarray
    lu: object = None

    @property
    def size(self):
        return self.Q0.shape[0]

    def factor(self, counter=None):
        if self.lu is None:
            A = (sp.identity(self.size, format="csc") - self.Q0).tocsc()
            self.lu = splu(A)
            if counter is not None:
                counter.factorizations += 1
        return self.lu


@dataclass(eq=False)
class ReachMatrix:
    Pi: np.ndarray
    queries: list
    grad: np.ndarray | None = None

    def prob(self, j):
        return float(self.Pi[self.queries[j].v, j])

    def probs(self):
        v = np.array([q.v for q in self.queries], dtype=np.int64)
        return self.Pi[v, np.arange(len(self.queries))]


def brute_force_reach(ext, vf, u, v, max_len=None, max_paths=MAX_PATHS):
    """Sum of path probabilities over every path from ``u`` to its first arrival at ``v``.

    Exact on acyclic networks; ``max_len`` (number of transitions) bounds
    the enumeration on cyclic ones.
    """
    if u == v:
        return 1.0
    prob = vf.prob
    total = 0.0
    n_paths = 0
    stack = [(int(u), 1.0, 0)]
    while stack:
        k, pk, depth = stack.pop()
        if max_len is not None and depth >= max_len:
            continue
        for e in range(ext.edge_ptr[k], ext.edge_ptr[k + 1]):
            a = int(ext.edge_dst[e])
            pa = pk * prob[e]
            if a == v:
                total += pa
                n_paths += 1
                if n_paths > max_paths:
                    raise EnumerationOverflow(f"more than {max_paths} paths from {u} to {v}")
            elif a != ext.dummy:
                stack.append((a, pa, depth + 1))
    return total


def enumerate_paths(ext, vf, u, v, max_paths=10**4, max_len=None):
    """All paths from ``u`` to first arrival at ``v`` with their probabilities.

    Returns a list of ``(links, edge_indices, probability)``; raises
    :class:`EnumerationOverflow` past ``max_paths``.
    """
    prob = vf.prob
    out = []
    stack = [((int(u),), (), 1.0)]
    while stack:
        links, edges, pk = stack.pop()
        k = links[-1]
        if max_len is not None and len(edges) >= max_len:
            continue
        for e in range(ext.edge_ptr[k], ext.edge_ptr[k + 1]):
            a = int(ext.edge_dst[e])
            if prob[e] == 0.0:
                continue
            item = (links + (a,), edges + (e,), pk * prob[e])
            if a == v:
                out.append(item)
                if len(out) > max_paths:
                    raise EnumerationOverflow(f"more than {max_paths} paths from {u} to {v}")
            elif a != ext.dummy:
                stack.append(item)
    out.sort(key=lambda t: t[0])
    return out


def _transition_matrix(ext, values, transpose=False, size=None):
    n = size or ext.n_states
    rows, cols = (ext.edge_dst, ext.edge_src) if transpose else (ext.edge_src, ext.edge_dst)
    return sp.csc_matrix((values, (rows, cols)), shape=(n, n))


def solve_reach_single(ext, vf, target):
    """Probability of reaching ``target`` from every state.

    ``Q^a`` equals the transition matrix with row ``target`` zeroed and
    ``h^a = e_target``; the returned vector has ``pi[target] = 1``.
    """
    keep = ext.edge_src != target
    Q = _transition_matrix(ext, np.where(keep, vf.prob, 0.0))
    A = (sp.identity(ext.n_states, format="csc") - Q).tocsc()
    h = np.zeros(ext.n_states)
    h[target] = 1.0
    return splu(A).solve(h)


def build_composed_system(ext, vf, queries):
    """Assemble ``Q0`` and ``H`` for the pair queries of one destination."""
    queries = list(queries)
    if not queries:
        raise ValueError("at least one query is required")
    if any(q.dest != ext.dest for q in queries):
        raise ValueError("all queries must share the destination of the extended network")
    r = ext.n_states
    Q0 = _transition_matrix(ext, vf.prob, transpose=True, size=r + 1)
    H = np.zeros((r + 1, len(queries)))
    for j, q in enumerate(queries):
        H[q.u, j] = 1.0
        H[r, j] = 1.0
    return ComposedSystem(ext, vf, queries, Q0, H)


def solve_reach_matrix(system, counter=None):
    """Solve ``(I - Q0) Pi = H`` with one LU (cached on ``system``)."""
    lu = system.factor(counter)
    Pi = lu.solve(system.H)
    if counter is not None:
        counter.composed += 1
    return ReachMatrix(Pi=Pi.reshape(system.H.shape), queries=system.queries)


def transition_derivatives(system):
    """``dQ0/dp_t`` for every parameter, as sparse matrices shaped like ``Q0``."""
    ext, vf = system.ext, system.vf
    dP = vf.dprob
    return [_transition_matrix(ext, dP[:, t], transpose=True, size=system.size)
            for t in range(dP.shape[1])]


def reach_jacobian(system, reach, dQ0=None, counter=None):
    """``dPi/dp_t = (I - Q0)^-1 (dQ0/dp_t) Pi`` for every parameter.

    One multi-RHS solve per parameter, reusing the factorization of
    ``system``.  Returns an array shaped ``(n_params, size, J)`` and
    stores it on ``reach.grad``.
    """
    if dQ0 is None:
        dQ0 = transition_derivatives(system)
    lu = system.factor(counter)
    out = np.empty((len(dQ0), *reach.Pi.shape))
    for t, D in enumerate(dQ0):
        out[t] = lu.solve(np.asarray(D @ reach.Pi)).reshape(reach.Pi.shape)
        if counter is not None:
            counter.composed += 1
    reach.grad = out
    return out


@dataclass(eq=False)
class DestinationLL:
    dest: int
    ll: float
    grad: np.ndarray
    n_pairs: int = 0
    max_visit_excess: float = 0.0
    timings: dict = field(default_factory=dict)


def _destination_ll(tally, params, model, options, counter):
    ext = tally.ext
    vf = solve_value(ext, params, model, jacobian=True, options=options)
    ll = float(tally.counts @ vf.log_prob)
    grad = tally.counts @ vf.dlog_prob
    if not tally.pairs:
        return DestinationLL(ext.dest, ll, grad)
    if np.any(vf.log_prob[tally.counts > 0] < np.log(PROB_FLOOR)):
        raise InfeasibleParameters("observed transition has zero probability")
    u = tally.pair_u
    v = tally.pair_v
    # columns of Pi depend only on the entry link u
    sources, col = np.unique(u, return_inverse=True)
    queries = [PairQuery(int(s), int(v[np.argmax(u == s)]), ext.dest) for s in sources]
    system = build_composed_system(ext, vf, queries)
    reach = solve_reach_matrix(system, counter)
    dPi = reach_jacobian(system, reach, counter=counter)
    p = reach.Pi[v, col]
    if np.any(p <= PROB_FLOOR):
        bad = int(np.argmin(p))
        raise InfeasibleParameters(
            f"reach probability of pair ({u[bad]}, {v[bad]}) underflows at this parameter point")
    ll += float(np.sum(np.log(p)))
    grad = grad + (dPi[:, v, col] / p).sum(axis=1)
    if counter is not None:
        counter.destinations += 1
    return DestinationLL(ext.dest, ll, grad, len(u), float(max(0.0, p.max() - 1.0)))


def map_destinations(fn, items, threads=1):
    """Apply ``fn`` over ``items`` preserving order; optional thread pool."""
    if threads and threads > 1 and len(items) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(fn, items))
    return [fn(x) for x in items]


def dc_log_likelihood(obs, params, model="rl", *, options=DEFAULT_OPTIONS,
                      counter=None, threads=1, details=False):
    """Exact log-likelihood of incomplete trips and its gradient.

    Connected pairs contribute ``ln P(a|k)``; unconnected pairs contribute
    ``ln Pi[v, u]`` from the composed system of their destination.  Each
    destination with unconnected pairs costs one factorization and
    ``n_params + 1`` solves.  Destination terms are summed in a fixed order.
    """
    tallies = obs.tallies
    dests = list(tallies)
    parts = map_destinations(
        lambda d: _destination_ll(tallies[d], params, model, options, counter),
        dests, threads)
    ll = 0.0
    grad = np.zeros(params.size if model == "nrl" else params.theta.size)
    for part in parts:
        ll += part.ll
        grad += part.grad
    if details:
        return ll, grad, parts
    return ll, grad
