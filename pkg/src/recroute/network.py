"""Directed link graphs and their per-destination extensions.

Links are the states of the route choice model.  A link ``a`` is an
outgoing link of ``k`` when ``to_node(k) == from_node(a)``; the resulting
link-to-link transitions are stored as CSR-style edge arrays sorted by
source link.  Every transition carries a non-negative utility feature
vector and every link a scale-attribute vector (used by the nested model).

For estimation each destination gets an :class:`ExtendedNetwork`: the base
graph plus one absorbing dummy link appended at index ``n_links``.
"""

from __future__ import annotations

import csv
import json
import math
from collections import deque
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import scipy.sparse as sp

from .exceptions import (
    DimensionError,
    IsolatedDestinationError,
    NetworkFormatError,
    TopologyError,
)

LEFT_TURN_MIN = 40.0
UTURN_MIN = 177.0

LINK_HEADER = ("link_id", "from_node", "to_node", "travel_time")


def _frozen(a):
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


def turn_angle(p0, p1, q0, q1):
    """Signed turn angle in degrees from segment p0->p1 onto q0->q1.

    Positive angles are counter-clockwise (left) turns; a reversal is
    close to +-180.
    """
    dx1, dy1 = p1[0] - p0[0], p1[1] - p0[1]
    dx2, dy2 = q1[0] - q0[0], q1[1] - q0[1]
    if (dx1 == 0 and dy1 == 0) or (dx2 == 0 and dy2 == 0):
        return 0.0
    cross = dx1 * dy2 - dy1 * dx2
    dot = dx1 * dx2 + dy1 * dy2
    return math.degrees(math.atan2(cross, dot))


def turn_dummies(angle):
    """(left-turn, u-turn) indicators for a turn angle in degrees."""
    lt = 1.0 if LEFT_TURN_MIN < angle <= UTURN_MIN else 0.0
    ut = 1.0 if abs(angle) > UTURN_MIN else 0.0
    return lt, ut


@dataclass(frozen=True, eq=False)
class Network:
    """Immutable link graph with utility and scale features.

    Attributes
    ----------
    link_ids, node_ids : tuple of str
        External identifiers; position is the dense index.
    from_node, to_node : ndarray of int
        Node index of each link's tail and head.
    link_attrs : dict
        Per-link numeric attributes read from the link file.
    edge_src, edge_dst : ndarray of int
        Link-to-link transitions ``(k, a)`` with ``a`` in ``A(k)``,
        sorted by ``k``; ``edge_ptr`` indexes the rows.
    features : ndarray, shape (n_edges, n_features)
        Utility feature vector ``x(a|k)`` of each transition.
    scale : ndarray, shape (n_links, n_scale)
        Scale attributes ``s_k`` of each link.
    coords : ndarray or None
        Node coordinates, when known.
    """

    link_ids: tuple
    node_ids: tuple
    from_node: np.ndarray
    to_node: np.ndarray
    link_attrs: Mapping[str, np.ndarray]
    edge_src: np.ndarray
    edge_dst: np.ndarray
    edge_ptr: np.ndarray
    features: np.ndarray
    feature_names: tuple
    scale: np.ndarray
    scale_names: tuple
    coords: np.ndarray | None = None
    pair_attrs: Mapping[str, np.ndarray] = field(default_factory=dict)

    @property
    def n_links(self):
        return len(self.link_ids)

    @property
    def n_nodes(self):
        return len(self.node_ids)

    @property
    def n_edges(self):
        return len(self.edge_src)

    @property
    def n_features(self):
        return self.features.shape[1]

    @property
    def n_scale(self):
        return self.scale.shape[1]

    def outgoing(self, k):
        """Indices of the links in ``A(k)``."""
        return self.edge_dst[self.edge_ptr[k]:self.edge_ptr[k + 1]]

    @cached_property
    def _link_index(self):
        return {lid: i for i, lid in enumerate(self.link_ids)}

    @cached_property
    def _node_index(self):
        return {nid: i for i, nid in enumerate(self.node_ids)}

    def link_index(self, link_id):
        try:
            return self._link_index[str(link_id)]
        except KeyError:
            raise TopologyError(f"unknown link {link_id!r}") from None

    def node_index(self, node_id):
        try:
            return self._node_index[str(node_id)]
        except KeyError:
            raise TopologyError(f"unknown node {node_id!r}") from None

    @cached_property
    def incoming_by_node(self):
        """List, per node, of the links whose head is that node."""
        out = [[] for _ in range(self.n_nodes)]
        for k, t in enumerate(self.to_node):
            out[t].append(k)
        return out

    @cached_property
    def outgoing_by_node(self):
        out = [[] for _ in range(self.n_nodes)]
        for k, f in enumerate(self.from_node):
            out[f].append(k)
        return out

    def id_map(self):
        return {"links": list(self.link_ids), "nodes": list(self.node_ids)}


def build_network(link_ids, from_nodes, to_nodes, link_attrs, *,
                  node_ids=None, coords=None, pair_attrs=None,
                  utility=None, scale=None):
    """Assemble and validate a :class:`Network`.

    Parameters
    ----------
    link_ids, from_nodes, to_nodes : sequences of str
        One entry per link; node references are external node ids.
    link_attrs : dict of str -> sequence of float
        Per-link attributes; must contain ``travel_time``.
    node_ids : sequence of str, optional
        Declared node set.  When given, links must only reference these.
    coords : dict of node id -> (x, y), optional
        Enables the ``LT`` and ``UT`` turn dummies.
    pair_attrs : dict of str -> dict of (from_link_id, to_link_id) -> float
        Extra transition attributes; unlisted transitions get 0.
    utility : sequence of str, optional
        Names of the utility features.  Each name is a link attribute (of
        the entered link), a pair attribute, ``LT``/``UT`` or ``LC`` (the
        link constant).  Defaults to every available name.
    scale : sequence of str, optional
        Names of the scale attributes: link attributes or ``OL`` (number of
        outgoing links).  Defaults to ``("travel_time", "OL")``.
    """
    link_ids = tuple(str(x) for x in link_ids)
    n = len(link_ids)
    if len(set(link_ids)) != n:
        raise NetworkFormatError("duplicate link ids")
    if len(from_nodes) != n or len(to_nodes) != n:
        raise DimensionError("from/to node lists must match the link list")
    attrs = {}
    for name, values in link_attrs.items():
        arr = np.asarray(values, dtype=float)
        if arr.shape != (n,):
            raise DimensionError(f"attribute {name!r} has {arr.shape[0]} values for {n} links")
        attrs[name] = _frozen(arr)
    if "travel_time" not in attrs:
        raise NetworkFormatError("links need a travel_time attribute")

    from_nodes = [str(x) for x in from_nodes]
    to_nodes = [str(x) for x in to_nodes]
    if node_ids is None:
        seen = {}
        for nid in (*from_nodes, *to_nodes):
            seen.setdefault(nid, len(seen))
        node_ids = tuple(seen)
    else:
        node_ids = tuple(str(x) for x in node_ids)
        if len(set(node_ids)) != len(node_ids):
            raise NetworkFormatError("duplicate node ids")
    node_index = {nid: i for i, nid in enumerate(node_ids)}
    for lid, f, t in zip(link_ids, from_nodes, to_nodes):
        for nid in (f, t):
            if nid not in node_index:
                raise TopologyError(f"link {lid!r} references unknown node {nid!r}")
    fnode = np.array([node_index[x] for x in from_nodes], dtype=np.int64)
    tnode = np.array([node_index[x] for x in to_nodes], dtype=np.int64)

    xy = None
    if coords is not None:
        xy = np.full((len(node_ids), 2), np.nan)
        for nid, (x, y) in coords.items():
            if str(nid) in node_index:
                xy[node_index[str(nid)]] = (float(x), float(y))
        if np.isnan(xy).any():
            raise TopologyError("coordinates missing for some nodes")

    by_from = [[] for _ in range(len(node_ids))]
    for k in range(n):
        by_from[fnode[k]].append(k)
    src, dst = [], []
    for k in range(n):
        succ = by_from[tnode[k]]
        src.extend([k] * len(succ))
        dst.extend(succ)
    edge_src = np.array(src, dtype=np.int64)
    edge_dst = np.array(dst, dtype=np.int64)
    edge_ptr = np.zeros(n + 1, dtype=np.int64)
    np.add.at(edge_ptr, edge_src + 1, 1)
    edge_ptr = np.cumsum(edge_ptr)
    edge_pos = {(int(k), int(a)): e for e, (k, a) in enumerate(zip(edge_src, edge_dst))}

    pairs = {}
    link_pos = {lid: i for i, lid in enumerate(link_ids)}
    for name, table in (pair_attrs or {}).items():
        col = np.zeros(len(edge_src))
        for (kid, aid), value in table.items():
            try:
                key = (link_pos[str(kid)], link_pos[str(aid)])
            except KeyError:
                raise TopologyError(f"pair attribute {name!r} references unknown link") from None
            if key not in edge_pos:
                raise TopologyError(f"pair ({kid}, {aid}) is not a transition of the network")
            col[edge_pos[key]] = float(value)
        pairs[name] = _frozen(col)

    if xy is not None:
        lt = np.zeros(len(edge_src))
        ut = np.zeros(len(edge_src))
        for e, (k, a) in enumerate(zip(edge_src, edge_dst)):
            ang = turn_angle(xy[fnode[k]], xy[tnode[k]], xy[fnode[a]], xy[tnode[a]])
            lt[e], ut[e] = turn_dummies(ang)
        pairs.setdefault("LT", _frozen(lt))
        pairs.setdefault("UT", _frozen(ut))

    if utility is None:
        utility = [*attrs, *pairs, "LC"]
    cols = []
    for name in utility:
        if name in attrs:
            cols.append(attrs[name][edge_dst])
        elif name in pairs:
            cols.append(pairs[name])
        elif name == "LC":
            cols.append(np.ones(len(edge_src)))
        else:
            raise NetworkFormatError(f"unknown utility feature {name!r}")
    features = np.column_stack(cols) if cols else np.zeros((len(edge_src), 0))
    if features.size and features.min() < 0:
        raise NetworkFormatError("utility features must be non-negative")

    outdeg = np.diff(edge_ptr).astype(float)
    if scale is None:
        scale = ("travel_time", "OL")
    scols = []
    for name in scale:
        if name in attrs:
            scols.append(attrs[name])
        elif name == "OL":
            scols.append(outdeg)
        else:
            raise NetworkFormatError(f"unknown scale attribute {name!r}")
    smat = np.column_stack(scols) if scols else np.zeros((n, 0))

    return Network(
        link_ids=link_ids,
        node_ids=node_ids,
        from_node=_frozen(fnode),
        to_node=_frozen(tnode),
        link_attrs=attrs,
        edge_src=_frozen(edge_src),
        edge_dst=_frozen(edge_dst),
        edge_ptr=_frozen(edge_ptr),
        features=_frozen(features.astype(float)),
        feature_names=tuple(utility),
        scale=_frozen(smat.astype(float)),
        scale_names=tuple(scale),
        coords=None if xy is None else _frozen(xy),
        pair_attrs=pairs,
    )


def _parse_float(value, where):
    try:
        return float(value)
    except (TypeError, ValueError):
        raise NetworkFormatError(f"{where}: cannot parse {value!r} as a number") from None


def _read_rows(path, required):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise NetworkFormatError(f"{path}: empty file") from None
        if tuple(header[:len(required)]) != tuple(required):
            raise NetworkFormatError(
                f"{path}: header must start with {','.join(required)}, got {','.join(header)}")
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise DimensionError(
                    f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            rows.append((lineno, [c.strip() for c in row]))
    return header, rows


def load_network(path, nodes=None, pairs=None, *, utility=None, scale=None):
    """Read a network from CSV files.

    ``path`` holds ``link_id,from_node,to_node,travel_time[,extra...]``.
    ``nodes`` (``node_id,x,y``) adds coordinates and the turn dummies;
    ``pairs`` (``from_link,to_link[,attrs...]``) adds transition attributes.
    """
    header, rows = _read_rows(path, LINK_HEADER)
    extra = header[3:]
    link_ids, fnodes, tnodes = [], [], []
    attrs = {name: [] for name in extra}
    for lineno, row in rows:
        link_ids.append(row[0])
        fnodes.append(row[1])
        tnodes.append(row[2])
        for name, value in zip(extra, row[3:]):
            attrs[name].append(_parse_float(value, f"{path}:{lineno}"))

    node_ids = coords = None
    if nodes is not None:
        _, nrows = _read_rows(nodes, ("node_id", "x", "y"))
        node_ids = [r[0] for _, r in nrows]
        coords = {r[0]: (_parse_float(r[1], f"{nodes}:{ln}"), _parse_float(r[2], f"{nodes}:{ln}"))
                  for ln, r in nrows}

    pair_attrs = None
    if pairs is not None:
        pheader, prows = _read_rows(pairs, ("from_link", "to_link"))
        pair_attrs = {name: {} for name in pheader[2:]}
        for lineno, row in prows:
            for name, value in zip(pheader[2:], row[2:]):
                pair_attrs[name][(row[0], row[1])] = _parse_float(value, f"{pairs}:{lineno}")

    return build_network(link_ids, fnodes, tnodes, attrs, node_ids=node_ids,
                         coords=coords, pair_attrs=pair_attrs,
                         utility=utility, scale=scale)


def save_network(net, path, nodes=None):
    """Write ``net`` in the CSV layout read by :func:`load_network`."""
    names = ["travel_time", *[a for a in net.link_attrs if a != "travel_time"]]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["link_id", "from_node", "to_node", *names])
        for k, lid in enumerate(net.link_ids):
            w.writerow([lid, net.node_ids[net.from_node[k]], net.node_ids[net.to_node[k]],
                        *[repr(float(net.link_attrs[a][k])) for a in names]])
    if nodes is not None and net.coords is not None:
        with open(nodes, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["node_id", "x", "y"])
            for i, nid in enumerate(net.node_ids):
                w.writerow([nid, repr(float(net.coords[i, 0])), repr(float(net.coords[i, 1]))])


def write_id_map(net, path):
    """Sidecar JSON mapping dense indices back to external ids."""
    Path(path).write_text(json.dumps(net.id_map(), indent=1))


@dataclass(frozen=True, eq=False)
class ExtendedNetwork:
    """A base network plus the absorbing dummy link of one destination.

    States are indexed ``0..n_links`` with the dummy at ``dummy == n_links``.
    Links that cannot reach the destination are *pruned*: they keep their
    index but own no transitions.  ``edge_*`` arrays hold the transitions
    among retained links followed by nothing else; dummy transitions are
    marked with ``edge_base == -1`` and zero features.
    """

    base: Network
    dest: int
    dummy: int
    retained: np.ndarray
    hops: np.ndarray
    edge_src: np.ndarray
    edge_dst: np.ndarray
    edge_base: np.ndarray
    edge_ptr: np.ndarray
    features: np.ndarray
    scale: np.ndarray

    @property
    def n_states(self):
        return self.dummy + 1

    @property
    def n_edges(self):
        return len(self.edge_src)

    @property
    def pruned(self):
        return np.flatnonzero(~self.retained[:self.dummy])

    def outgoing(self, k):
        return self.edge_dst[self.edge_ptr[k]:self.edge_ptr[k + 1]]

    @cached_property
    def edge_lookup(self):
        return {(int(k), int(a)): e for e, (k, a) in enumerate(zip(self.edge_src, self.edge_dst))}

    def edge_index(self, k, a):
        return self.edge_lookup.get((int(k), int(a)))

    def is_connected(self, k, a):
        return (int(k), int(a)) in self.edge_lookup

    @cached_property
    def src_incidence(self):
        """Sparse (n_states x n_edges) matrix summing edge values into their source rows."""
        E = self.n_edges
        return sp.csr_matrix((np.ones(E), (self.edge_src, np.arange(E))),
                             shape=(self.n_states, E))

    @cached_property
    def is_dummy_edge(self):
        return self.edge_base < 0

    @cached_property
    def diameter(self):
        """Largest hop count to the destination over retained links."""
        return int(self.hops[self.retained].max())


def extend_for_destination(net, dest):
    """Attach the absorbing dummy link for node ``dest``.

    Parameters
    ----------
    net : Network
    dest : int or str
        Node index, or external node id when given as a string.
    """
    if isinstance(dest, str):
        dest = net.node_index(dest)
    dest = int(dest)
    if not 0 <= dest < net.n_nodes:
        raise TopologyError(f"destination node index {dest} out of range")
    entering = net.incoming_by_node[dest]
    if not entering:
        raise IsolatedDestinationError(f"destination {net.node_ids[dest]!r} has no incoming link")

    n = net.n_links
    # hop distance (in nodes) to the destination, by backward BFS over nodes
    node_dist = np.full(net.n_nodes, -1, dtype=np.int64)
    node_dist[dest] = 0
    queue = deque([dest])
    while queue:
        x = queue.popleft()
        for k in net.incoming_by_node[x]:
            y = net.from_node[k]
            if node_dist[y] < 0:
                node_dist[y] = node_dist[x] + 1
                queue.append(y)

    hops = np.full(n + 1, -1, dtype=np.int64)
    head_dist = node_dist[net.to_node]
    ok = head_dist >= 0
    hops[:n][ok] = head_dist[ok] + 1
    hops[n] = 0
    retained = hops >= 0

    keep = retained[net.edge_src] & retained[net.edge_dst]
    base_idx = np.flatnonzero(keep)
    into_dest = np.array(sorted(entering), dtype=np.int64)
    src = np.concatenate([net.edge_src[base_idx], into_dest])
    dst = np.concatenate([net.edge_dst[base_idx], np.full(len(into_dest), n)])
    bidx = np.concatenate([base_idx, np.full(len(into_dest), -1)])
    order = np.lexsort((dst, src))
    src, dst, bidx = src[order], dst[order], bidx[order]
    feats = np.zeros((len(src), net.n_features))
    real = bidx >= 0
    feats[real] = net.features[bidx[real]]
    ptr = np.zeros(n + 2, dtype=np.int64)
    np.add.at(ptr, src + 1, 1)
    ptr = np.cumsum(ptr)
    scale = np.vstack([net.scale, np.zeros((1, net.n_scale))])

    return ExtendedNetwork(
        base=net,
        dest=dest,
        dummy=n,
        retained=_frozen(retained),
        hops=_frozen(hops),
        edge_src=_frozen(src),
        edge_dst=_frozen(dst),
        edge_base=_frozen(bidx),
        edge_ptr=_frozen(ptr),
        features=_frozen(feats),
        scale=_frozen(scale),
    )


def generate_grid_network(nx=7, ny=6, *, diagonals=True, bidirectional=False,
                          tt_range=(0.5, 1.5), seed=0, utility=None, scale=None):
    """Synthetic grid with random travel times.

    Links run east and north (and north-east when ``diagonals``); with
    ``bidirectional`` every link gets a reverse twin, which makes the graph
    cyclic.  The default 7 x 6 grid with diagonals has 101 links.
    """
    rng = np.random.default_rng(seed)
    node = lambda i, j: f"n{i}_{j}"  # noqa: E731
    coords = {node(i, j): (float(i), float(j)) for j in range(ny) for i in range(nx)}
    moves = [(1, 0), (0, 1)] + ([(1, 1)] if diagonals else [])
    ends = []
    for j in range(ny):
        for i in range(nx):
            for di, dj in moves:
                if i + di < nx and j + dj < ny:
                    ends.append((node(i, j), node(i + di, j + dj), math.hypot(di, dj)))
                    if bidirectional:
                        ends.append((node(i + di, j + dj), node(i, j), math.hypot(di, dj)))
    lo, hi = tt_range
    tt = [length * rng.uniform(lo, hi) for _, _, length in ends]
    ids = [f"l{i}" for i in range(len(ends))]
    return build_network(ids, [e[0] for e in ends], [e[1] for e in ends],
                         {"travel_time": tt}, node_ids=list(coords), coords=coords,
                         utility=utility, scale=scale)


def random_acyclic_network(rng, n_nodes=6, max_links=12, edge_prob=0.5,
                           n_features=2, n_scale=1):
    """Small random DAG (nodes ordered, links only go forward).

    Every node has a forward link so the last node is reachable; the
    number of links is capped at ``max_links``.  Returns the network and
    the index of its last node, which is a valid destination.
    """
    pairs = [(i, i + 1) for i in range(n_nodes - 1)]
    extra = [(i, j) for i in range(n_nodes) for j in range(i + 2, n_nodes)
             if rng.random() < edge_prob]
    rng.shuffle(extra)
    pairs += extra[:max(0, max_links - len(pairs))]
    ids = [f"e{i}" for i in range(len(pairs))]
    attrs = {"travel_time": rng.uniform(0.2, 1.5, len(pairs))}
    for f in range(1, n_features):
        attrs[f"x{f}"] = rng.uniform(0.0, 1.0, len(pairs))
    for s in range(n_scale):
        attrs[f"s{s}"] = rng.uniform(0.0, 1.0, len(pairs))
    utility = ["travel_time", *[f"x{f}" for f in range(1, n_features)]]
    scale = [f"s{s}" for s in range(n_scale)]
    net = build_network(ids, [str(a) for a, _ in pairs], [str(b) for _, b in pairs], attrs,
                        node_ids=[str(i) for i in range(n_nodes)],
                        utility=utility, scale=scale)
    return net, n_nodes - 1
