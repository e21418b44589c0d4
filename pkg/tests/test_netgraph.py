"""Network loading, Greenshields speeds, and deterministic shortest paths."""

from __future__ import annotations

import csv
import math
import random

import numpy as np
import pytest

from poolsim import netgraph
from poolsim.netgraph import (
    Edge, NetworkDefaults, NetworkError, Node, RoadNetwork,
    grid_network, haversine_m, load_network, write_network_csv,
)


def _square_net(**kw):
    return grid_network(2, 2, spacing_m=250.0, defaults=NetworkDefaults(**kw))


# -- independent oracles ------------------------------------------------------

def _scan_nearest(net, lon, lat):
    """Brute-force nearest node by haversine, lowest id on ties."""
    best, best_d = None, None
    for n in net.nodes:
        d = haversine_m(n.lon, n.lat, lon, lat)
        if best_d is None or d < best_d - 1e-9:
            best, best_d = n.node_id, d
    return best


def _all_paths(net, o_id, d_id, max_edges):
    """Every simple path from o to d with at most max_edges edges."""
    tt = net.travel_times_s
    o = net.node_index(o_id)
    d = net.node_index(d_id)
    out = []

    def rec(u, seen, edges, t):
        if u == d:
            out.append((t, tuple(int(net.edge_ids[e]) for e in edges)))
            return
        if len(edges) == max_edges:
            return
        for ei in net.out_edges[u]:
            v = net.eto[ei]
            if v in seen:
                continue
            rec(v, seen | {v}, edges + [ei], t + tt[ei])

    rec(o, {o}, [], 0.0)
    return out


# -- speed model --------------------------------------------------------------

def test_empty_square_grid_runs_at_free_flow():
    net = _square_net()
    assert len(net.nodes) == 4 and len(net.edges) == 8
    for e in net.edges:
        assert net.edge_speed_kmh(e.edge_id) == pytest.approx(45.0)


def test_speed_at_half_and_full_jam_density():
    half = _square_net(base_density=50.0)
    assert half.edge_speed_kmh(0) == pytest.approx(22.5)
    jam = _square_net(base_density=100.0)
    assert jam.edge_speed_kmh(0) == pytest.approx(5.0)  # floor kicks in
    over = _square_net(base_density=240.0)
    assert over.edge_speed_kmh(0) == pytest.approx(5.0)


def test_ten_vehicles_on_loaded_edge():
    nodes = [Node(0, 0.0, 0.0), Node(1, 0.01, 0.0)]
    edges = [Edge(0, 0, 1, 1000.0, 1, 45.0, 20.0, 100.0),
             Edge(1, 1, 0, 1000.0, 1, 45.0, 20.0, 100.0)]
    net = RoadNetwork(nodes, edges)
    for _ in range(10):
        net.enter_edge(0)
    # k = 20 + 10/(1.0 km * 1 lane) = 30 -> 45 * (1 - 30/100)
    assert net.edge_speed_kmh(0) == pytest.approx(31.5)


def test_enter_then_leave_restores_speed():
    net = _square_net(base_density=12.0)
    before = net.edge_speed_kmh(3)
    ei = net.edge_index(3)
    net.enter_edge(ei)
    assert net.edge_speed_kmh(3) < before
    net.leave_edge(ei)
    assert net.edge_speed_kmh(3) == pytest.approx(before)


def test_leave_empty_edge_aborts():
    net = _square_net()
    with pytest.raises(NetworkError, match="leave_edge on empty edge 2"):
        net.leave_edge(net.edge_index(2))


def test_congestion_ratio_never_below_one():
    net = grid_network(4, 4, defaults=NetworkDefaults(base_density=8.0))
    rng = random.Random(5)
    for _ in range(40):
        net.enter_edge(rng.randrange(len(net.edges)))
    assert np.all(net.eu0 / net.speeds_kmh >= 1.0)


# -- grid construction --------------------------------------------------------

def test_grid_fixture_counts():
    net = grid_network(20, 20)
    assert len(net.nodes) == 400
    assert len(net.edges) == 1520


def test_grid_spacing_matches_haversine():
    net = grid_network(3, 3, spacing_m=250.0)
    a, b = net.nodes[0], net.nodes[1]
    assert haversine_m(a.lon, a.lat, b.lon, b.lat) == pytest.approx(250.0, rel=1e-3)


# -- nearest node -------------------------------------------------------------

def test_nearest_node_simple():
    net = _square_net()
    n = net.nodes[3]
    assert net.nearest_node(n.lon + 1e-5, n.lat) == n.node_id


def test_nearest_node_tie_takes_lowest_id():
    nodes = [Node(2, -0.01, 0.0), Node(7, 0.01, 0.0)]
    edges = [Edge(0, 2, 7, 100.0, 1, 45.0, 0.0, 100.0),
             Edge(1, 7, 2, 100.0, 1, 45.0, 0.0, 100.0)]
    net = RoadNetwork(nodes, edges)
    assert net.nearest_node(0.0, 0.0) == 2


def test_nearest_node_matches_scan():
    net = grid_network(6, 5, spacing_m=300.0)
    rng = random.Random(11)
    for _ in range(200):
        lon = rng.uniform(-0.002, 0.014)
        lat = rng.uniform(-0.002, 0.016)
        assert net.nearest_node(lon, lat) == _scan_nearest(net, lon, lat)


# -- shortest paths -----------------------------------------------------------

def test_single_edge_path():
    net = _square_net()
    p = net.shortest_path(0, 1)
    assert p.edge_ids == (0,)
    assert p.total_length_m == pytest.approx(250.0)
    assert p.total_time_s == pytest.approx(3.6 * 250.0 / 45.0)


def test_origin_equals_destination():
    net = _square_net()
    p = net.shortest_path(2, 2)
    assert p.edge_ids == () and p.total_time_s == 0.0 and p.total_length_m == 0.0


def test_path_matches_exhaustive_enumeration_under_random_densities():
    rng = random.Random(17)
    for trial in range(30):
        net = grid_network(5, 5, spacing_m=250.0)
        net.ekb = np.array([rng.uniform(0.0, 30.0) for _ in net.edges])
        net._dirty = True
        o = rng.randrange(25)
        d = rng.randrange(25)
        if abs(o // 5 - d // 5) + abs(o % 5 - d % 5) > 4:
            continue
        p = net.shortest_path(o, d)
        cands = _all_paths(net, o, d, max_edges=6)
        assert cands, f"oracle found no path for trial {trial}"
        best = min(t for t, _ in cands)
        assert p.total_time_s == pytest.approx(best, rel=1e-9)


def test_tie_break_is_lexicographic_edge_sequence():
    net = grid_network(4, 4, spacing_m=250.0)
    for o, d in [(0, 5), (0, 15), (4, 7), (12, 3)]:
        p = net.shortest_path(o, d)
        cands = _all_paths(net, o, d, max_edges=6)
        best = min(t for t, _ in cands)
        optimal = sorted(seq for t, seq in cands if t == best)
        assert p.edge_ids == optimal[0]


def test_times_arrays_agree_with_paths():
    net = grid_network(5, 4, defaults=NetworkDefaults(base_density=10.0))
    rng = random.Random(3)
    for _ in range(25):
        net.enter_edge(rng.randrange(len(net.edges)))
    for o, d in [(0, 19), (7, 3), (12, 12), (18, 1)]:
        p = net.shortest_path(o, d)
        assert net.times_from(net.node_index(o))[net.node_index(d)] == pytest.approx(
            p.total_time_s, rel=1e-9)
        assert net.times_to(net.node_index(d))[net.node_index(o)] == pytest.approx(
            p.total_time_s, rel=1e-9)


def test_added_vehicle_never_speeds_up_routes():
    rng = random.Random(23)
    net = grid_network(5, 5, defaults=NetworkDefaults(base_density=20.0))
    for trial in range(25):
        o, d = rng.sample(range(25), 2)
        before = net.shortest_path(o, d)
        loaded = rng.randrange(len(net.edges))
        net.enter_edge(loaded)
        after = net.shortest_path(o, d)
        assert after.total_time_s >= before.total_time_s - 1e-9
        if int(net.edge_ids[loaded]) not in before.edge_ids:
            # the old route avoided the loaded edge, so its cost is untouched
            assert after.total_time_s == pytest.approx(before.total_time_s, rel=1e-12)
        net.leave_edge(loaded)


def test_baseline_path_ignores_live_counts():
    net = grid_network(4, 4, defaults=NetworkDefaults(base_density=10.0))
    base = net.baseline_path(0, 15)
    for ei in range(10):
        net.enter_edge(ei)
    assert net.baseline_path(0, 15) == base
    live = net.shortest_path(0, 15)
    assert live.total_time_s >= base.total_time_s - 1e-9


# -- CSV loading and validation -----------------------------------------------

def _write_csvs(tmp_path, nodes_rows, edges_rows,
                node_cols=("node_id", "lon", "lat"),
                edge_cols=("edge_id", "from_node", "to_node", "length_m", "lanes")):
    np_, ep = tmp_path / "nodes.csv", tmp_path / "edges.csv"
    with open(np_, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(node_cols)
        w.writerows(nodes_rows)
    with open(ep, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(edge_cols)
        w.writerows(edges_rows)
    return np_, ep


def test_csv_round_trip(tmp_path):
    net = grid_network(3, 3, defaults=NetworkDefaults(base_density=7.5))
    write_network_csv(net, tmp_path / "n.csv", tmp_path / "e.csv")
    back = load_network(tmp_path / "n.csv", tmp_path / "e.csv",
                        NetworkDefaults(base_density=7.5))
    assert len(back.nodes) == 9 and len(back.edges) == 24
    assert np.allclose(back.speeds_kmh, net.speeds_kmh)
    assert [e.edge_id for e in back.edges] == [e.edge_id for e in net.edges]


def test_missing_optional_columns_use_defaults(tmp_path):
    n, e = _write_csvs(
        tmp_path,
        [(0, 0.0, 0.0), (1, 0.003, 0.0)],
        [(0, 0, 1, 300.0, 2), (1, 1, 0, 300.0, 2)])
    net = load_network(n, e, NetworkDefaults(free_flow_kmh=50.0, base_density=10.0))
    assert net.edges[0].free_flow_kmh == 50.0
    assert net.edge_speed_kmh(0) == pytest.approx(45.0)  # 50 * (1 - 10/100)


def test_blank_optional_cell_uses_default(tmp_path):
    cols = ("edge_id", "from_node", "to_node", "length_m", "lanes", "free_flow_kmh")
    n, e = _write_csvs(
        tmp_path,
        [(0, 0.0, 0.0), (1, 0.003, 0.0)],
        [(0, 0, 1, 300.0, 1, 60.0), (1, 1, 0, 300.0, 1, "")],
        edge_cols=cols)
    net = load_network(n, e)
    assert net.edges[0].free_flow_kmh == 60.0
    assert net.edges[1].free_flow_kmh == 45.0


def test_dangling_endpoint_is_named(tmp_path):
    n, e = _write_csvs(
        tmp_path,
        [(0, 0.0, 0.0), (1, 0.003, 0.0)],
        [(0, 0, 1, 300.0, 1), (7, 1, 99, 300.0, 1)])
    with pytest.raises(NetworkError, match="dangling endpoint, edge 7"):
        load_network(n, e)


def test_duplicate_ids_rejected(tmp_path):
    n, e = _write_csvs(
        tmp_path,
        [(0, 0.0, 0.0), (0, 0.003, 0.0)],
        [(0, 0, 0, 300.0, 1)])
    with pytest.raises(NetworkError, match="duplicate node id 0"):
        load_network(n, e)


def test_non_positive_length_rejected(tmp_path):
    n, e = _write_csvs(
        tmp_path,
        [(0, 0.0, 0.0), (1, 0.003, 0.0)],
        [(0, 0, 1, 0.0, 1), (1, 1, 0, 300.0, 1)])
    with pytest.raises(NetworkError, match="non-positive length on edge 0"):
        load_network(n, e)


def test_malformed_row_reports_line(tmp_path):
    n, e = _write_csvs(
        tmp_path,
        [(0, 0.0, 0.0), (1, "oops", 0.0)],
        [(0, 0, 1, 300.0, 1), (1, 1, 0, 300.0, 1)])
    with pytest.raises(NetworkError, match="line 3"):
        load_network(n, e)


def test_disconnected_network_rejected(tmp_path):
    n, e = _write_csvs(
        tmp_path,
        [(0, 0.0, 0.0), (1, 0.003, 0.0), (2, 0.006, 0.0)],
        [(0, 0, 1, 300.0, 1), (1, 1, 0, 300.0, 1), (2, 1, 2, 300.0, 1)])
    with pytest.raises(NetworkError, match="not strongly connected"):
        load_network(n, e)


def test_missing_required_column_rejected(tmp_path):
    n, e = _write_csvs(
        tmp_path,
        [(0, 0.0), (1, 0.003)],
        [(0, 0, 1, 300.0, 1), (1, 1, 0, 300.0, 1)],
        node_cols=("node_id", "lon"))
    with pytest.raises(NetworkError, match="missing columns: lat"):
        load_network(n, e)
