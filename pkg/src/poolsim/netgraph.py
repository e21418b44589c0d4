"""Road network representation with density-coupled edge speeds.

Edge speeds follow the Greenshields linear speed-density relation: each edge
carries a standing base density plus the density contributed by simulated
vehicles currently on it, and its speed updates instantly when that count
changes. Shortest paths are computed on travel-time weights and are
deterministic: ties are broken by the lexicographically smallest edge-id
sequence.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components, dijkstra

EARTH_RADIUS_M = 6371000.0


class NetworkError(ValueError):
    """Raised when a network fails to load or validate."""


@dataclass(frozen=True)
class Node:
    node_id: int
    lon: float
    lat: float


@dataclass(frozen=True)
class Edge:
    edge_id: int
    from_node: int
    to_node: int
    length_m: float
    lanes: int
    free_flow_kmh: float
    base_density: float  # veh/km/lane, standing load from background traffic
    jam_density: float   # veh/km/lane


@dataclass(frozen=True)
class NetworkDefaults:
    free_flow_kmh: float = 45.0
    jam_density: float = 100.0
    base_density: float = 0.0
    speed_floor_kmh: float = 5.0


@dataclass(frozen=True)
class Path:
    edge_ids: tuple
    total_time_s: float
    total_length_m: float


def haversine_m(lon1, lat1, lon2, lat2):
    """Great-circle distance in meters."""
    p1, p2 = math.radians(lat1), math.radians(lat2)
    dp = p2 - p1
    dl = math.radians(lon2 - lon1)
    a = math.sin(dp / 2.0) ** 2 + math.cos(p1) * math.cos(p2) * math.sin(dl / 2.0) ** 2
    return 2.0 * EARTH_RADIUS_M * math.asin(math.sqrt(a))


class RoadNetwork:
    """Directed road graph with per-edge simulated-vehicle counts.

    Nodes and edges are stored sorted by id; public APIs speak ids, the
    internal arrays use dense indexes. All speed and travel-time lookups
    reflect the current vehicle counts.
    """

    def __init__(self, nodes, edges, defaults=None):
        defaults = defaults or NetworkDefaults()
        self.defaults = defaults
        self.nodes = sorted(nodes, key=lambda n: n.node_id)
        self.edges = sorted(edges, key=lambda e: e.edge_id)
        self._validate()

        self.node_ids = np.array([n.node_id for n in self.nodes], dtype=np.int64)
        self.node_lon = np.array([n.lon for n in self.nodes])
        self.node_lat = np.array([n.lat for n in self.nodes])
        self._node_idx = {n.node_id: i for i, n in enumerate(self.nodes)}

        self.edge_ids = np.array([e.edge_id for e in self.edges], dtype=np.int64)
        self._edge_idx = {e.edge_id: i for i, e in enumerate(self.edges)}
        self.efrom = np.array([self._node_idx[e.from_node] for e in self.edges], dtype=np.int64)
        self.eto = np.array([self._node_idx[e.to_node] for e in self.edges], dtype=np.int64)
        self.elen_m = np.array([e.length_m for e in self.edges])
        self.elanes = np.array([e.lanes for e in self.edges], dtype=np.int64)
        self.eu0 = np.array([e.free_flow_kmh for e in self.edges])
        self.ekb = np.array([e.base_density for e in self.edges])
        self.ekj = np.array([e.jam_density for e in self.edges])
        self.lane_km = self.elen_m / 1000.0 * self.elanes
        self.speed_floor_kmh = defaults.speed_floor_kmh

        self.counts = np.zeros(len(self.edges), dtype=np.int64)
        # out_edges[u] lists edge indexes leaving u, ascending edge id
        self.out_edges = [[] for _ in self.nodes]
        for i in range(len(self.edges)):
            self.out_edges[self.efrom[i]].append(i)

        self._speed = None
        self._tt = None
        self._build_csr()
        # static baseline (zero simulated vehicles), used for direct trips
        self._tt0 = self._travel_times(np.zeros_like(self.counts))
        self._baseline_cache = {}

    # -- construction helpers -------------------------------------------------

    def _validate(self):
        seen = set()
        for n in self.nodes:
            if n.node_id in seen:
                raise NetworkError(f"duplicate node id {n.node_id}")
            seen.add(n.node_id)
        node_ids = seen
        seen = set()
        for e in self.edges:
            if e.edge_id in seen:
                raise NetworkError(f"duplicate edge id {e.edge_id}")
            seen.add(e.edge_id)
            if e.from_node not in node_ids or e.to_node not in node_ids:
                raise NetworkError(f"dangling endpoint, edge {e.edge_id}")
            if e.length_m <= 0:
                raise NetworkError(f"non-positive length on edge {e.edge_id}")
            if e.lanes < 1:
                raise NetworkError(f"lanes < 1 on edge {e.edge_id}")
            if e.free_flow_kmh <= 0 or e.jam_density <= 0:
                raise NetworkError(f"non-positive speed or jam density on edge {e.edge_id}")
            if e.base_density < 0:
                raise NetworkError(f"negative base density on edge {e.edge_id}")

    def _build_csr(self):
        n = len(self.nodes)
        order = np.lexsort((self.eto, self.efrom))
        pairs = []          # unique (from, to) in csr order
        groups = []         # edge indexes per pair
        for i in order:
            key = (self.efrom[i], self.eto[i])
            if pairs and pairs[-1] == key:
                groups[-1].append(i)
            else:
                pairs.append(key)
                groups.append([i])
        self._csr_rep = np.array([g[0] for g in groups], dtype=np.int64)
        self._csr_multi = [(pos, np.array(g, dtype=np.int64))
                           for pos, g in enumerate(groups) if len(g) > 1]
        rows = np.array([p[0] for p in pairs], dtype=np.int64)
        cols = np.array([p[1] for p in pairs], dtype=np.int64)
        data = np.ones(len(pairs))
        self._csr = csr_matrix((data, (rows, cols)), shape=(n, n))

        orderT = np.lexsort((self.efrom, self.eto))
        pairsT, groupsT = [], []
        for i in orderT:
            key = (self.eto[i], self.efrom[i])
            if pairsT and pairsT[-1] == key:
                groupsT[-1].append(i)
            else:
                pairsT.append(key)
                groupsT.append([i])
        self._csrT_rep = np.array([g[0] for g in groupsT], dtype=np.int64)
        self._csrT_multi = [(pos, np.array(g, dtype=np.int64))
                            for pos, g in enumerate(groupsT) if len(g) > 1]
        rowsT = np.array([p[0] for p in pairsT], dtype=np.int64)
        colsT = np.array([p[1] for p in pairsT], dtype=np.int64)
        self._csrT = csr_matrix((np.ones(len(pairsT)), (rowsT, colsT)), shape=(n, n))
        self._dirty = True

    def check_strongly_connected(self):
        ncomp, labels = connected_components(self._csr, directed=True, connection="strong")
        if ncomp > 1:
            a = int(np.argmax(labels == 0))
            b = int(np.argmax(labels != labels[a]))
            raise NetworkError(
                "network is not strongly connected: no route between nodes "
                f"{self.node_ids[a]} and {self.node_ids[b]}")

    # -- speeds ---------------------------------------------------------------

    def _speeds_for(self, counts):
        k = self.ekb + counts / self.lane_km
        u = self.eu0 * (1.0 - np.minimum(k, self.ekj) / self.ekj)
        return np.maximum(u, self.speed_floor_kmh)

    def _travel_times(self, counts):
        return 3.6 * self.elen_m / self._speeds_for(counts)

    def _refresh(self):
        if self._dirty:
            self._speed = self._speeds_for(self.counts)
            self._tt = 3.6 * self.elen_m / self._speed
            self._csr.data[:] = self._tt[self._csr_rep]
            for pos, g in self._csr_multi:
                self._csr.data[pos] = self._tt[g].min()
            self._csrT.data[:] = self._tt[self._csrT_rep]
            for pos, g in self._csrT_multi:
                self._csrT.data[pos] = self._tt[g].min()
            self._dirty = False

    @property
    def speeds_kmh(self):
        self._refresh()
        return self._speed

    @property
    def travel_times_s(self):
        self._refresh()
        return self._tt

    def edge_speed_kmh(self, edge_id):
        """Current speed of one edge under Greenshields with the live count."""
        return float(self.speeds_kmh[self._edge_idx[edge_id]])

    def enter_edge(self, eidx):
        self.counts[eidx] += 1
        self._dirty = True

    def leave_edge(self, eidx):
        if self.counts[eidx] <= 0:
            raise NetworkError(
                f"leave_edge on empty edge {int(self.edge_ids[eidx])}")
        self.counts[eidx] -= 1
        self._dirty = True

    # -- queries --------------------------------------------------------------

    def node_index(self, node_id):
        return self._node_idx[node_id]

    def edge_index(self, edge_id):
        return self._edge_idx[edge_id]

    def nearest_node(self, lon, lat):
        """Closest node by haversine distance; ties go to the lowest id."""
        d = _haversine_vec(self.node_lon, self.node_lat, lon, lat)
        return int(self.node_ids[int(np.argmin(d))])

    def times_from(self, origin_idx):
        """Travel-time seconds from origin to every node at current speeds."""
        self._refresh()
        return dijkstra(self._csr, directed=True, indices=origin_idx)

    def times_to(self, dest_idx):
        """Travel-time seconds from every node to dest at current speeds."""
        self._refresh()
        return dijkstra(self._csrT, directed=True, indices=dest_idx)

    def times_to_many(self, dest_idxs):
        """Rows of times_to for several destinations in one solver call."""
        self._refresh()
        if len(dest_idxs) == 0:
            return np.zeros((0, len(self.nodes)))
        return np.atleast_2d(dijkstra(self._csrT, directed=True,
                                      indices=list(dest_idxs)))

    def next_edge_along(self, u_idx, dist_to):
        """First hop of the quickest path given a times_to row, as an edge
        index; the lowest edge id wins ties, matching shortest_path."""
        self._refresh()
        for ei in self.out_edges[u_idx]:
            if self._tt[ei] + dist_to[self.eto[ei]] == dist_to[u_idx]:
                return ei
        return None

    def shortest_path(self, origin_id, dest_id):
        """Minimum travel-time path at current speeds, or None if unreachable.

        Among equal-time paths the lexicographically smallest edge-id
        sequence is returned, so repeated queries are reproducible.
        """
        o = self._node_idx[origin_id]
        d = self._node_idx[dest_id]
        dist_to = self.times_to(d)
        return self._walk(o, d, dist_to, self._tt)

    def baseline_path(self, origin_id, dest_id):
        """Shortest path with zero simulated vehicles (standing load only)."""
        o = self._node_idx[origin_id]
        d = self._node_idx[dest_id]
        dist_to = self.baseline_times_to(d)
        return self._walk(o, d, dist_to, self._tt0)

    def baseline_times_to(self, dest_idx):
        if dest_idx not in self._baseline_cache:
            saved = self._csrT.data.copy()
            self._csrT.data[:] = self._tt0[self._csrT_rep]
            for pos, g in self._csrT_multi:
                self._csrT.data[pos] = self._tt0[g].min()
            out = dijkstra(self._csrT, directed=True, indices=dest_idx)
            self._csrT.data[:] = saved
            self._baseline_cache[dest_idx] = out
        return self._baseline_cache[dest_idx]

    def baseline_times_from(self, origin_idx):
        key = ("fwd", origin_idx)
        if key not in self._baseline_cache:
            saved = self._csr.data.copy()
            self._csr.data[:] = self._tt0[self._csr_rep]
            for pos, g in self._csr_multi:
                self._csr.data[pos] = self._tt0[g].min()
            out = dijkstra(self._csr, directed=True, indices=origin_idx)
            self._csr.data[:] = saved
            self._baseline_cache[key] = out
        return self._baseline_cache[key]

    def mean_baseline_speed_kmh(self):
        """Length-weighted mean speed of the empty network."""
        u = self._speeds_for(np.zeros_like(self.counts))
        return float(np.sum(u * self.elen_m) / np.sum(self.elen_m))

    def _walk(self, o, d, dist_to, tt):
        if not np.isfinite(dist_to[o]):
            return None
        edge_seq = []
        length = 0.0
        u = o
        guard = len(self.edges) + len(self.nodes) + 1
        while u != d:
            nxt = None
            for ei in self.out_edges[u]:
                v = self.eto[ei]
                # exact equality: dijkstra relaxed dist_to[u] as tt + dist_to[v]
                if tt[ei] + dist_to[v] == dist_to[u]:
                    nxt = ei
                    break
            if nxt is None:
                raise NetworkError("shortest-path reconstruction stalled")
            edge_seq.append(int(self.edge_ids[nxt]))
            length += float(self.elen_m[nxt])
            u = self.eto[nxt]
            guard -= 1
            if guard < 0:
                raise NetworkError("shortest-path reconstruction cycled")
        return Path(tuple(edge_seq), float(dist_to[o]), length)


def _haversine_vec(lon, lat, lon0, lat0):
    p = np.radians(lat)
    p0 = math.radians(lat0)
    dp = p - p0
    dl = np.radians(lon) - math.radians(lon0)
    a = np.sin(dp / 2.0) ** 2 + np.cos(p) * math.cos(p0) * np.sin(dl / 2.0) ** 2
    return 2.0 * EARTH_RADIUS_M * np.arcsin(np.sqrt(a))


# -- loading ------------------------------------------------------------------

_NODE_REQUIRED = ("node_id", "lon", "lat")
_EDGE_REQUIRED = ("edge_id", "from_node", "to_node", "length_m", "lanes")
_EDGE_OPTIONAL = ("free_flow_kmh", "base_density", "jam_density")


def load_network(nodes_csv, edges_csv, defaults=None, require_connected=True):
    """Build a RoadNetwork from the two documented CSV files.

    Optional per-edge columns (free_flow_kmh, base_density, jam_density)
    fall back to the supplied defaults when the column or cell is absent.
    Malformed rows are reported with their line number.
    """
    defaults = defaults or NetworkDefaults()
    nodes = []
    for row, lineno in _read_rows(nodes_csv, _NODE_REQUIRED):
        try:
            nodes.append(Node(int(row["node_id"]), float(row["lon"]), float(row["lat"])))
        except (TypeError, ValueError):
            raise NetworkError(f"malformed node row at line {lineno} of {nodes_csv}")
    edges = []
    for row, lineno in _read_rows(edges_csv, _EDGE_REQUIRED):
        try:
            edges.append(Edge(
                edge_id=int(row["edge_id"]),
                from_node=int(row["from_node"]),
                to_node=int(row["to_node"]),
                length_m=float(row["length_m"]),
                lanes=int(row["lanes"]),
                free_flow_kmh=_opt(row, "free_flow_kmh", defaults.free_flow_kmh),
                base_density=_opt(row, "base_density", defaults.base_density),
                jam_density=_opt(row, "jam_density", defaults.jam_density),
            ))
        except (TypeError, ValueError):
            raise NetworkError(f"malformed edge row at line {lineno} of {edges_csv}")
    net = RoadNetwork(nodes, edges, defaults)
    if require_connected:
        net.check_strongly_connected()
    return net


def _opt(row, key, default):
    val = row.get(key)
    if val is None or val == "":
        return default
    return float(val)


def _read_rows(path, required):
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise NetworkError(f"{path} is empty")
        missing = [c for c in required if c not in reader.fieldnames]
        if missing:
            raise NetworkError(f"{path} missing columns: {', '.join(missing)}")
        for lineno, row in enumerate(reader, start=2):
            yield row, lineno


# -- grid fixture -------------------------------------------------------------

def grid_network(rows, cols, spacing_m=250.0, defaults=None,
                 lon0=0.0, lat0=0.0, lanes=1):
    """Rectangular grid with bidirectional edges between 4-neighbors.

    Node ids are row-major (r * cols + c); a rows x cols grid has
    2 * (rows*(cols-1) + cols*(rows-1)) directed edges. Coordinates are laid
    out in degrees around (lon0, lat0) at the requested spacing.
    """
    defaults = defaults or NetworkDefaults()
    m_per_deg = math.pi * EARTH_RADIUS_M / 180.0
    dlat = spacing_m / m_per_deg
    dlon = spacing_m / (m_per_deg * math.cos(math.radians(lat0)))
    nodes = []
    for r in range(rows):
        for c in range(cols):
            nodes.append(Node(r * cols + c, lon0 + c * dlon, lat0 + r * dlat))
    edges = []
    eid = 0
    for r in range(rows):
        for c in range(cols):
            u = r * cols + c
            for v in ((r, c + 1), (r + 1, c)):
                if v[0] >= rows or v[1] >= cols:
                    continue
                w = v[0] * cols + v[1]
                for a, b in ((u, w), (w, u)):
                    edges.append(Edge(eid, a, b, spacing_m, lanes,
                                      defaults.free_flow_kmh,
                                      defaults.base_density,
                                      defaults.jam_density))
                    eid += 1
    return RoadNetwork(nodes, edges, defaults)


def write_network_csv(net, nodes_path, edges_path):
    """Dump a network to the documented CSV schema (full columns)."""
    with open(nodes_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(_NODE_REQUIRED)
        for n in net.nodes:
            w.writerow([n.node_id, repr(n.lon), repr(n.lat)])
    with open(edges_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(list(_EDGE_REQUIRED) + list(_EDGE_OPTIONAL))
        for e in net.edges:
            w.writerow([e.edge_id, e.from_node, e.to_node, repr(e.length_m),
                        e.lanes, repr(e.free_flow_kmh), repr(e.base_density),
                        repr(e.jam_density)])
