"""Trip observations: splitting, simulation and link-removal corruption."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .exceptions import ObservationError
from .model import solve_value
from .network import extend_for_destination

MIN_TRIP_LINKS = 5


@dataclass(frozen=True)
class Trip:
    """Observed link sequence ending with the destination dummy link.

    ``dest`` is a node index; ``links`` are link indices of the base network
    with the dummy encoded as ``n_links``.
    """

    id: str
    dest: int
    links: tuple

    def __post_init__(self):
        if not self.links:
            raise ObservationError(f"trip {self.id!r} is empty")
        object.__setattr__(self, "links", tuple(int(k) for k in self.links))

    @property
    def pairs(self):
        return list(zip(self.links[:-1], self.links[1:]))


@dataclass(frozen=True)
class SplitTrip:
    connected: list
    unconnected: list


def split_trip(trip, ext):
    """Partition consecutive pairs into connected and unconnected ones, order preserved."""
    connected, unconnected = [], []
    for k, a in trip.pairs:
        (connected if ext.is_connected(k, a) else unconnected).append((k, a))
    return SplitTrip(connected, unconnected)


@dataclass(eq=False)
class DestinationTally:
    """Per-destination aggregate of observations.

    ``counts[e]`` is the number of observed connected transitions on edge
    ``e`` of ``ext``; ``pairs`` lists the unconnected pairs as
    ``(trip_index, position, u, v)``.
    """

    ext: object
    counts: np.ndarray
    pairs: list = field(default_factory=list)

    @property
    def pair_u(self):
        return np.array([p[2] for p in self.pairs], dtype=np.int64)

    @property
    def pair_v(self):
        return np.array([p[3] for p in self.pairs], dtype=np.int64)


class ObservationSet:
    """A list of trips on one network, grouped by destination.

    Extended networks are built lazily and cached per destination.
    """

    def __init__(self, network, trips, extended=None):
        self.network = network
        self.trips = list(trips)
        self._ext = dict(extended or {})
        for t in self.trips:
            if not 0 <= t.dest < network.n_nodes:
                raise ObservationError(f"trip {t.id!r}: unknown destination")
            if t.links[-1] != network.n_links:
                raise ObservationError(f"trip {t.id!r} does not end with the destination dummy")
            if any(not 0 <= k < network.n_links for k in t.links[:-1]):
                raise ObservationError(f"trip {t.id!r}: link index out of range")

    def __len__(self):
        return len(self.trips)

    def __iter__(self):
        return iter(self.trips)

    def extended(self, dest):
        if dest not in self._ext:
            self._ext[dest] = extend_for_destination(self.network, dest)
        return self._ext[dest]

    def with_trips(self, trips):
        """New set on the same network sharing the cached extensions."""
        return ObservationSet(self.network, trips, self._ext)

    @cached_property
    def by_dest(self):
        groups = {}
        for i, t in enumerate(self.trips):
            groups.setdefault(t.dest, []).append(i)
        return dict(sorted(groups.items()))

    @property
    def destinations(self):
        return list(self.by_dest)

    def split(self, i):
        t = self.trips[i]
        return split_trip(t, self.extended(t.dest))

    def n_unconnected(self):
        return sum(len(self.split(i).unconnected) for i in range(len(self.trips)))

    def is_complete(self):
        return self.n_unconnected() == 0

    @cached_property
    def tallies(self):
        out = {}
        for dest, idx in self.by_dest.items():
            ext = self.extended(dest)
            counts = np.zeros(ext.n_edges)
            pairs = []
            for i in idx:
                t = self.trips[i]
                for pos, (k, a) in enumerate(t.pairs):
                    if not (ext.retained[k] and ext.retained[a]):
                        raise ObservationError(
                            f"trip {t.id!r} uses a link from which its destination is unreachable")
                    e = ext.edge_index(k, a)
                    if e is None:
                        pairs.append((i, pos, k, a))
                    else:
                        counts[e] += 1
            out[dest] = DestinationTally(ext, counts, pairs)
        return out


class TransitionSampler:
    """Draws successor links from the probabilities of a :class:`ValueField`."""

    def __init__(self, vf):
        ext = vf.ext
        self.ext = ext
        p = vf.prob
        # cumulative probabilities within each source row, offset by row index
        within = np.zeros_like(p)
        for k in np.flatnonzero(np.diff(ext.edge_ptr)):
            lo, hi = ext.edge_ptr[k], ext.edge_ptr[k + 1]
            c = np.cumsum(p[lo:hi])
            within[lo:hi] = c / c[-1]
        self.cum = ext.edge_src + within
        self.dst = ext.edge_dst
        self.ptr = ext.edge_ptr

    def step_edge(self, k, u):
        """Edge index (or indices) chosen from link(s) ``k`` given uniform draw(s) ``u``."""
        k = np.asarray(k)
        idx = np.searchsorted(self.cum, k + np.asarray(u), side="left")
        return np.minimum(idx, self.ptr[k + 1] - 1)

    def step(self, k, u):
        """Successor(s) of link(s) ``k`` given uniform draw(s) ``u``."""
        return self.dst[self.step_edge(k, u)]


def _origin_candidates(ext, min_links):
    ok = ext.retained.copy()
    ok[ext.dummy] = False
    ok &= ext.hops >= min_links
    return np.flatnonzero(ok)


def simulate_trips(ext, params, model="rl", n=1000, origins=None, seed=0,
                   min_links=MIN_TRIP_LINKS, step_cap=None, id_prefix="t",
                   max_attempts=50):
    """Sample ``n`` complete trips towards the destination of ``ext``.

    Each trip starts on an origin link drawn from ``origins`` (a mapping
    link -> weight, or a sequence of links; default uniform over retained
    links at least ``min_links`` hops away) and follows the link choice
    probabilities until absorption.  Trips with fewer than ``min_links``
    real links are redrawn.  Trip ``i`` uses its own random stream spawned
    from ``seed``, so results do not depend on evaluation order.
    """
    vf = solve_value(ext, params, model, jacobian=False)
    sampler = TransitionSampler(vf)
    if origins is None:
        cand = _origin_candidates(ext, min_links)
        weights = np.ones(len(cand))
    elif isinstance(origins, dict):
        cand = np.array(list(origins), dtype=np.int64)
        weights = np.array(list(origins.values()), dtype=float)
    else:
        cand = np.asarray(origins, dtype=np.int64)
        weights = np.ones(len(cand))
    if len(cand) == 0:
        raise ObservationError("no admissible origin links for this destination")
    if np.any(~ext.retained[cand]):
        raise ObservationError("origin links must be able to reach the destination")
    weights = weights / weights.sum()
    cap = step_cap or 20 * max(ext.diameter, 1) + 20
    streams = np.random.SeedSequence(seed).spawn(n)
    trips = []
    for i, ss in enumerate(streams):
        rng = np.random.default_rng(ss)
        for _ in range(max_attempts):
            k = int(cand[rng.choice(len(cand), p=weights)])
            path = [k]
            while k != ext.dummy:
                if len(path) > cap:
                    raise ObservationError("trip did not reach the destination within the step cap")
                k = int(sampler.step(k, rng.random()))
                path.append(k)
            if len(path) - 1 >= min_links:
                break
        else:
            raise ObservationError(f"could not draw a trip with at least {min_links} links")
        trips.append(Trip(f"{id_prefix}{i}", ext.dest, tuple(path)))
    return ObservationSet(ext.base, trips, {ext.dest: ext})


def simulate_observations(net, params, model="rl", n=1000, dests=None, seed=0,
                          min_links=MIN_TRIP_LINKS):
    """Trips spread evenly over several destinations.

    Destination ``j`` gets ``n // len(dests)`` trips (the first ``n % len``
    destinations one more), simulated with seed ``(seed, j)``.
    """
    if dests is None:
        raise ValueError("dests is required")
    dests = [net.node_index(d) if isinstance(d, str) else int(d) for d in dests]
    trips, exts = [], {}
    base, extra = divmod(n, len(dests))
    for j, d in enumerate(dests):
        ext = extend_for_destination(net, d)
        exts[d] = ext
        m = base + (1 if j < extra else 0)
        obs = simulate_trips(ext, params, model, m, seed=[seed, j], min_links=min_links,
                             id_prefix=f"t{j}_")
        trips.extend(obs.trips)
    return ObservationSet(net, trips, exts)


def corrupt_trips(obs, p, seed=0):
    """Remove each interior link of each trip with probability ``p``.

    The first link and the final dummy are always kept.  Returns the new
    :class:`ObservationSet` and a manifest recording the removed positions.
    """
    if not 0.0 <= p <= 1.0:
        raise ValueError("p must lie in [0, 1]")
    streams = np.random.SeedSequence(seed).spawn(len(obs.trips))
    out, removed = [], {}
    for t, ss in zip(obs.trips, streams):
        rng = np.random.default_rng(ss)
        interior = len(t.links) - 2
        drop = rng.random(max(interior, 0)) < p
        keep = [t.links[0]] + [k for k, d in zip(t.links[1:-1], drop) if not d] + [t.links[-1]]
        if len(t.links) == 1:
            keep = list(t.links)
        removed[t.id] = [int(i) + 1 for i in np.flatnonzero(drop)]
        out.append(Trip(t.id, t.dest, tuple(keep)))
    manifest = {"p": p, "seed": seed if isinstance(seed, int) else list(seed), "removed": removed}
    return obs.with_trips(out), manifest


def save_trips(obs, path):
    """Trips CSV: ``trip_id,dest_node,link_sequence`` (dummy omitted)."""
    net = obs.network
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["trip_id", "dest_node", "link_sequence"])
        for t in obs.trips:
            w.writerow([t.id, net.node_ids[t.dest], " ".join(net.link_ids[k] for k in t.links[:-1])])


def load_trips(path, net):
    """Read a trips CSV; the destination dummy is appended to each sequence."""
    trips = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        need = {"trip_id", "dest_node", "link_sequence"}
        if reader.fieldnames is None or not need <= set(reader.fieldnames):
            raise ObservationError(f"{path}: header must be trip_id,dest_node,link_sequence")
        for row in reader:
            seq = row["link_sequence"].split()
            if not seq:
                raise ObservationError(f"{path}: trip {row['trip_id']!r} has no links")
            links = [net.link_index(x) for x in seq] + [net.n_links]
            trips.append(Trip(row["trip_id"], net.node_index(row["dest_node"]), tuple(links)))
    return ObservationSet(net, trips)


def save_manifest(manifest, path):
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=1)
