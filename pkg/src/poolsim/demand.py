"""Trip requests: CSV ingestion, synthetic generation, and downsampling.

Request timestamps are rounded half-up onto the dispatch batch grid at load
time. Coordinates snap to the nearest network node; trips whose endpoints
snap to the same node are dropped and counted. Each request carries the
direct (empty network) travel time and distance of its origin-destination
pair, which later feed the wait/detour constraints and the passenger-mile
denominators.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

# request lifecycle states
WAITING = "waiting"
ASSIGNED = "assigned"
ONBOARD = "onboard"
COMPLETED = "completed"
ABANDONED = "abandoned"


class DemandError(ValueError):
    """Raised when request input fails to parse or validate."""


@dataclass
class Request:
    request_id: int
    request_time: float          # seconds, aligned to the batch grid
    origin_node: int
    dest_node: int
    direct_time_s: float
    direct_distance_m: float
    state: str = WAITING
    assign_time: float | None = None
    pickup_time: float | None = None
    dropoff_time: float | None = None
    vehicle_id: int | None = None


@dataclass(frozen=True)
class BBox:
    lon_min: float
    lon_max: float
    lat_min: float
    lat_max: float

    def contains(self, lon, lat):
        return (self.lon_min <= lon <= self.lon_max
                and self.lat_min <= lat <= self.lat_max)


@dataclass(frozen=True)
class DemandProfile:
    horizon_s: float
    base_rate_per_s: float
    hot_zone: BBox | None = None
    hot_zone_weight: float = 0.0
    mean_direct_m: float = 2500.0
    window_lo: float = 0.5       # accepted direct times, as multiples of target
    window_hi: float = 1.5


def align_to_batch(t, batch_s):
    """Round half-up onto the batch grid (3.4 s at 2 s batches -> 4 s)."""
    return math.floor(t / batch_s + 0.5) * batch_s


def _direct(net, o_id, d_id):
    p = net.baseline_path(o_id, d_id)
    if p is None:
        raise DemandError(f"no route between nodes {o_id} and {d_id}")
    return p.total_time_s, p.total_length_m


_REQUIRED = ("request_id", "t_seconds", "origin_lon", "origin_lat",
             "dest_lon", "dest_lat")


def load_requests(path, net, batch_s=2.0):
    """Read the documented request CSV. Returns (requests, dropped_count).

    dropped_count is the number of rows whose endpoints snapped to the same
    node. Malformed rows are rejected with their line numbers.
    """
    rows = []
    bad = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise DemandError(f"{path} is empty")
        missing = [c for c in _REQUIRED if c not in reader.fieldnames]
        if missing:
            raise DemandError(f"{path} missing columns: {', '.join(missing)}")
        for lineno, row in enumerate(reader, start=2):
            try:
                rows.append((int(row["request_id"]), float(row["t_seconds"]),
                             float(row["origin_lon"]), float(row["origin_lat"]),
                             float(row["dest_lon"]), float(row["dest_lat"])))
            except (TypeError, ValueError):
                bad.append(lineno)
    if bad:
        raise DemandError(f"malformed request rows at lines {bad} of {path}")
    seen = set()
    for rid, t, *_ in rows:
        if rid in seen:
            raise DemandError(f"duplicate request id {rid}")
        seen.add(rid)
        if t < 0:
            raise DemandError(f"negative request time on request {rid}")
    requests, dropped = [], 0
    for rid, t, olon, olat, dlon, dlat in rows:
        o = net.nearest_node(olon, olat)
        d = net.nearest_node(dlon, dlat)
        if o == d:
            dropped += 1
            continue
        dt, dd = _direct(net, o, d)
        requests.append(Request(rid, align_to_batch(t, batch_s), o, d, dt, dd))
    requests.sort(key=lambda r: (r.request_time, r.request_id))
    return requests, dropped


def generate_demand(profile, net, seed, batch_s=2.0):
    """Poisson request stream with hot-zone concentrated origins.

    Arrival count is Poisson(rate * horizon) with arrival times uniform on
    the horizon. Origins fall inside the hot zone with probability
    hot_zone_weight; destinations are drawn uniformly among nodes whose
    direct time sits in a window around the target mean. Deterministic for
    a fixed (profile, seed).
    """
    rng = np.random.default_rng([seed, 101])
    n = int(rng.poisson(profile.base_rate_per_s * profile.horizon_s))
    times = np.sort(rng.uniform(0.0, profile.horizon_s, size=n))

    hot_idx, cold_idx = _split_nodes(net, profile.hot_zone)
    target_t = 3.6 * profile.mean_direct_m / net.mean_baseline_speed_kmh()

    requests = []
    for i in range(n):
        if profile.hot_zone is not None and len(hot_idx) and rng.random() < profile.hot_zone_weight:
            o_idx = int(hot_idx[rng.integers(len(hot_idx))])
        elif len(cold_idx):
            o_idx = int(cold_idx[rng.integers(len(cold_idx))])
        else:
            o_idx = int(hot_idx[rng.integers(len(hot_idx))])
        d_idx = _draw_destination(net, rng, o_idx, target_t,
                                  profile.window_lo, profile.window_hi)
        o_id = int(net.node_ids[o_idx])
        d_id = int(net.node_ids[d_idx])
        dt, dd = _direct(net, o_id, d_id)
        requests.append(Request(i, align_to_batch(float(times[i]), batch_s),
                                o_id, d_id, dt, dd))
    return requests


def _split_nodes(net, bbox):
    idx = np.arange(len(net.nodes))
    if bbox is None:
        return idx[:0], idx
    inside = np.array([bbox.contains(n.lon, n.lat) for n in net.nodes])
    return idx[inside], idx[~inside]


def _draw_destination(net, rng, o_idx, target_t, lo, hi, max_widen=4):
    t = net.baseline_times_from(o_idx)
    for _ in range(max_widen):
        ok = np.flatnonzero((t >= lo * target_t) & (t <= hi * target_t))
        ok = ok[ok != o_idx]
        if len(ok):
            return int(ok[rng.integers(len(ok))])
        lo, hi = lo * 0.5, hi * 1.5
    # window never matched anything: fall back to the node nearest the target
    t = np.where(np.arange(len(t)) == o_idx, np.inf, t)
    return int(np.argmin(np.abs(t - target_t)))


def downsample(requests, fraction, seed):
    """Keep each request independently with probability `fraction`."""
    if not 0.0 <= fraction <= 1.0:
        raise DemandError(f"downsample fraction {fraction} outside [0, 1]")
    if fraction == 1.0:
        return list(requests)
    rng = np.random.default_rng([seed, 202])
    keep = rng.random(len(requests)) < fraction
    return [r for r, k in zip(requests, keep) if k]


def write_requests_csv(requests, net, path):
    """Dump requests in the documented input schema (node coordinates)."""
    coord = {n.node_id: (n.lon, n.lat) for n in net.nodes}
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(_REQUIRED)
        for r in requests:
            olon, olat = coord[r.origin_node]
            dlon, dlat = coord[r.dest_node]
            w.writerow([r.request_id, repr(r.request_time),
                        repr(olon), repr(olat), repr(dlon), repr(dlat)])
