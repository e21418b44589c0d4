"""Batch simulation loop coupling dispatch, motion, and traffic feedback.

Each batch of step_s seconds runs six phases:

1. newly placed requests join the waiting pool,
2. waiting requests past their pickup deadline are abandoned,
3. the dispatcher matches on the batch-start speed snapshot and the chosen
   plans are bound to their vehicles,
4. every vehicle moves for step_s seconds at snapshot speeds, finishing its
   current edge before following plan legs; planless vehicles cruise over
   uniformly random outgoing edges; stops are instantaneous at nodes and
   several edges can be crossed in one batch,
5. edge occupancy deltas collected during motion are committed, which is
   what feeds Greenshields speeds for the next batch,
6. the congestion term (mean free-flow/current speed ratio), scheduled
   loads, and every edge whose speed changed are sampled at batch end.

Determinism: vehicles are processed in id order, randomness comes from
per-vehicle generators derived from the scenario seed, and all mutation
happens at batch boundaries, so a (network, requests, seed) triple always
produces byte-identical logs.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field

import numpy as np

from .demand import ABANDONED, ASSIGNED, COMPLETED, ONBOARD, Request
from .dispatch import Dispatcher, VehicleOffer
from .pooling import Constraints, OnboardRider, VehicleSnapshot


class EngineError(RuntimeError):
    pass


@dataclass(frozen=True)
class TraversalEvent:
    vehicle_id: int
    edge_id: int
    t_entry: float
    t_exit: float
    onboard: int          # riders aboard when the edge was entered


@dataclass(frozen=True)
class BatchSample:
    t_end: float
    congestion: float     # mean over edges of free-flow speed / speed
    scheduled: float      # mean over vehicles of onboard + committed
    waiting: int


@dataclass
class Vehicle:
    vehicle_id: int
    capacity: int
    node: int             # current node id when edge is None
    edge: int | None = None
    pos_m: float = 0.0
    entry_t: float = 0.0
    entry_onboard: int = 0
    stops: list = field(default_factory=list)
    onboard: dict = field(default_factory=dict)     # request_id -> OnboardRider
    committed: dict = field(default_factory=dict)   # request_id -> Request
    riding: dict = field(default_factory=dict)      # request_id -> Request
    odometer_m: float = 0.0
    rng: object = None


@dataclass
class SimParams:
    fleet_size: int
    capacity: int
    horizon_s: float
    step_s: float = 2.0
    radius_s: float = 360.0
    routing: str = "nn"
    seed: int = 0
    audit: bool = True
    constraints: Constraints = field(default_factory=Constraints)


@dataclass
class SimOutput:
    params: SimParams
    requests: list
    traversals: list
    df_log: list          # (t, edge_id, speed_kmh) change log, full row at t=0
    batches: list         # BatchSample per batch
    diagnostics: dict


def place_fleet(net, requests, fleet_size, seed):
    """Start nodes drawn from the request-origin distribution."""
    rng = np.random.default_rng([seed, 303])
    if requests:
        origins = np.array(sorted(r.origin_node for r in requests))
    else:
        origins = np.array([n.node_id for n in net.nodes])
    picks = rng.integers(0, len(origins), size=fleet_size)
    return [int(origins[i]) for i in picks]


def run_sim(net, requests, params):
    """Simulate one scenario; mutates the passed Request objects in place."""
    t_wall = time.perf_counter()
    cons = params.constraints
    dispatcher = Dispatcher(net, constraints=cons, radius_s=params.radius_s,
                            routing=params.routing)
    starts = place_fleet(net, requests, params.fleet_size, params.seed)
    vehicles = [
        Vehicle(vehicle_id=i, capacity=params.capacity, node=starts[i],
                rng=np.random.default_rng([params.seed, 404, i]))
        for i in range(params.fleet_size)
    ]
    requests = sorted(requests, key=lambda r: (r.request_time, r.request_id))
    idx = net._node_idx
    eto_id = [int(net.node_ids[j]) for j in net.eto]
    edge_ids = net.edge_ids

    traversals = []
    df_log = []
    batches = []
    diag = {"stale_batches": 0, "router_misses": 0, "expired": 0,
            "assigned_total": 0, "trips_built": 0, "max_component": 0}
    pending = {}
    waiting = []
    arrive_ptr = 0

    speeds = np.array(net.speeds_kmh, dtype=float)
    last_logged = speeds.copy()
    for j in range(len(net.edges)):
        df_log.append((0.0, int(edge_ids[j]), float(speeds[j])))

    n_batches = int(round(params.horizon_s / params.step_s))
    for k in range(n_batches):
        now = k * params.step_s
        t_end = now + params.step_s

        # 1. arrivals
        while arrive_ptr < len(requests) and requests[arrive_ptr].request_time <= now:
            waiting.append(requests[arrive_ptr])
            arrive_ptr += 1

        # 2. deadline expiry of unmatched requests
        still = []
        for r in waiting:
            if now >= r.request_time + cons.max_wait_s:
                r.state = ABANDONED
                diag["expired"] += 1
            else:
                still.append(r)
        waiting = still

        # 3. dispatch on the batch-start snapshot
        if waiting or any(v.onboard or v.committed for v in vehicles):
            offers = [_offer_for(v, net, speeds) for v in vehicles]
            res = dispatcher.dispatch(now, offers, waiting)
            diag["stale_batches"] += len(res.stale)
            diag["trips_built"] += res.n_trips
            diag["max_component"] = max(diag["max_component"], res.max_component)
            req_by_id = {r.request_id: r for r in waiting}
            for trip in res.assignments:
                v = vehicles[trip.vehicle_id]
                v.stops = list(trip.plan.stops)
                for rid in trip.request_ids:
                    r = req_by_id[rid]
                    r.state = ASSIGNED
                    r.assign_time = now
                    r.vehicle_id = trip.vehicle_id
                    v.committed[rid] = r
                    waiting.remove(r)
                    diag["assigned_total"] += 1
            for vid, plan in res.refreshed.items():
                vehicles[vid].stops = list(plan.stops)

        # route rows for every stop node so mid-step legs never re-solve
        targets = sorted({idx[s.node] for v in vehicles for s in v.stops})
        rows = dict(zip(targets, net.times_to_many(targets)))

        # 4. motion at frozen snapshot speeds
        v_ms = speeds / 3.6
        for v in vehicles:
            _move(v, net, now, t_end, v_ms, rows, pending, traversals,
                  diag, idx, eto_id)

        # 5. commit occupancy deltas
        if pending:
            for ei, delta in pending.items():
                if delta:
                    net.counts[ei] += delta
            if np.any(net.counts < 0):
                raise EngineError(f"negative edge count at t={t_end}")
            net._dirty = True
            pending.clear()

        # 6. end-of-batch sampling and speed-change log
        speeds = np.array(net.speeds_kmh, dtype=float)
        for j in np.nonzero(speeds != last_logged)[0]:
            df_log.append((t_end, int(edge_ids[int(j)]), float(speeds[int(j)])))
        last_logged = speeds.copy()
        congestion = float(np.mean(net.eu0 / speeds))
        scheduled = (sum(len(v.onboard) + len(v.committed) for v in vehicles)
                     / len(vehicles)) if vehicles else 0.0
        batches.append(BatchSample(t_end, congestion, scheduled, len(waiting)))

        if params.audit:
            _audit(net, vehicles, t_end)

    diag["runtime_s"] = time.perf_counter() - t_wall
    diag["batches"] = n_batches
    diag["never_arrived"] = len(requests) - arrive_ptr
    diag["final_waiting"] = len(waiting)
    diag["final_assigned"] = sum(len(v.committed) for v in vehicles)
    diag["final_onboard"] = sum(len(v.onboard) for v in vehicles)
    # binding assignments can slip past their promise when speeds drift
    # between the planning snapshot and execution; count, never hide
    diag["late_pickups"] = sum(
        1 for r in requests if r.pickup_time is not None
        and r.pickup_time > r.request_time + cons.max_wait_s)
    diag["detour_overruns"] = sum(
        1 for r in requests
        if r.pickup_time is not None and r.dropoff_time is not None
        and r.dropoff_time - r.pickup_time
        > (1.0 + cons.detour_ratio) * r.direct_time_s)
    return SimOutput(params, requests, traversals, df_log, batches, diag)


def _offer_for(v, net, speeds):
    if v.edge is None:
        snap = VehicleSnapshot(
            vehicle_id=v.vehicle_id, anchor_node=v.node, capacity=v.capacity,
            onboard=tuple(sorted(v.onboard.values(), key=lambda o: o.request_id)))
    else:
        remain = float(net.elen_m[v.edge]) - v.pos_m
        lead = remain / (float(speeds[v.edge]) / 3.6)
        snap = VehicleSnapshot(
            vehicle_id=v.vehicle_id, anchor_node=_edge_head(net, v.edge),
            capacity=v.capacity, lead_time_s=lead, lead_distance_m=remain,
            onboard=tuple(sorted(v.onboard.values(), key=lambda o: o.request_id)))
    committed = tuple(sorted(v.committed.values(), key=lambda r: r.request_id))
    return VehicleOffer(snapshot=snap, committed=committed)


def _edge_head(net, ei):
    return int(net.node_ids[net.eto[ei]])


def _move(v, net, t0, end, v_ms, rows, pending, traversals, diag, idx, eto_id):
    t = t0
    while t < end:
        if v.edge is None:
            _process_stops(v, t)
            if v.stops:
                target = idx[v.stops[0].node]
                row = rows.get(target)
                if row is None:
                    row = net.times_to(target)
                    rows[target] = row
                    diag["router_misses"] += 1
                ei = net.next_edge_along(idx[v.node], row)
                if ei is None:
                    raise EngineError(
                        f"no route from node {v.node} toward stop "
                        f"{v.stops[0].node}")
            else:
                out = net.out_edges[idx[v.node]]
                ei = out[int(v.rng.integers(len(out)))]
            v.edge = ei
            v.pos_m = 0.0
            v.entry_t = t
            v.entry_onboard = len(v.onboard)
            pending[ei] = pending.get(ei, 0) + 1
        speed = float(v_ms[v.edge])
        dt_need = max(float(net.elen_m[v.edge]) - v.pos_m, 0.0) / speed
        if t + dt_need <= end:
            t = t + dt_need
            pending[v.edge] = pending.get(v.edge, 0) - 1
            traversals.append(TraversalEvent(
                v.vehicle_id, int(net.edge_ids[v.edge]), v.entry_t, t,
                v.entry_onboard))
            v.odometer_m += float(net.elen_m[v.edge])
            v.node = eto_id[v.edge]
            v.edge = None
            v.pos_m = 0.0
        else:
            v.pos_m += speed * (end - t)
            t = end
    if v.edge is None:
        _process_stops(v, end)


def _process_stops(v, t):
    while v.stops and v.stops[0].node == v.node:
        stop = v.stops.pop(0)
        rid = stop.request_id
        if stop.kind == "pickup":
            r = v.committed.pop(rid, None)
            if r is None:
                raise EngineError(
                    f"pickup for request {rid} not committed to vehicle "
                    f"{v.vehicle_id}")
            r.state = ONBOARD
            r.pickup_time = t
            v.onboard[rid] = OnboardRider(
                request_id=rid, dest_node=r.dest_node, pickup_time=t,
                direct_time_s=r.direct_time_s)
            v.riding[rid] = r
        else:
            ob = v.onboard.pop(rid, None)
            if ob is None:
                raise EngineError(
                    f"dropoff for request {rid} not aboard vehicle "
                    f"{v.vehicle_id}")
            r = v.riding.pop(rid)
            r.state = COMPLETED
            r.dropoff_time = t
        if len(v.onboard) > v.capacity:
            raise EngineError(f"vehicle {v.vehicle_id} over capacity at t={t}")


def _audit(net, vehicles, t_end):
    recount = np.zeros(len(net.edges), dtype=np.int64)
    for v in vehicles:
        if v.edge is not None:
            recount[v.edge] += 1
        if len(v.onboard) > v.capacity:
            raise EngineError(
                f"vehicle {v.vehicle_id} over capacity at t={t_end}")
    if not np.array_equal(recount, net.counts):
        bad = int(np.nonzero(recount != net.counts)[0][0])
        raise EngineError(
            f"edge count drift on edge {int(net.edge_ids[bad])} at t={t_end}: "
            f"tracked {int(net.counts[bad])}, actual {int(recount[bad])}")


# -- event-log files ------------------------------------------------------


def write_traversals_csv(traversals, path):
    rows = sorted(traversals, key=lambda e: (e.t_entry, e.vehicle_id,
                                             e.t_exit, e.edge_id))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["vehicle_id", "edge_id", "t_entry", "t_exit", "onboard"])
        for e in rows:
            w.writerow([e.vehicle_id, e.edge_id, repr(float(e.t_entry)),
                        repr(float(e.t_exit)), e.onboard])


def read_traversals_csv(path):
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            out.append(TraversalEvent(
                int(row["vehicle_id"]), int(row["edge_id"]),
                float(row["t_entry"]), float(row["t_exit"]),
                int(row["onboard"])))
    return out


def write_df_csv(df_log, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "edge_id", "speed_kmh"])
        for t, eid, speed in df_log:
            w.writerow([repr(t), eid, repr(speed)])


def read_df_csv(path):
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            out.append((float(row["t"]), int(row["edge_id"]),
                        float(row["speed_kmh"])))
    return out


_REQ_LOG_COLS = ("request_id", "request_time", "origin_node", "dest_node",
                 "direct_time_s", "direct_distance_m", "state", "assign_time",
                 "pickup_time", "dropoff_time", "vehicle_id")


def write_request_log(requests, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(_REQ_LOG_COLS)
        for r in sorted(requests, key=lambda r: r.request_id):
            w.writerow([
                r.request_id, repr(float(r.request_time)), r.origin_node,
                r.dest_node, repr(float(r.direct_time_s)),
                repr(float(r.direct_distance_m)), r.state,
                "" if r.assign_time is None else repr(float(r.assign_time)),
                "" if r.pickup_time is None else repr(float(r.pickup_time)),
                "" if r.dropoff_time is None else repr(float(r.dropoff_time)),
                "" if r.vehicle_id is None else r.vehicle_id,
            ])


def read_request_log(path):
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            out.append(Request(
                request_id=int(row["request_id"]),
                request_time=float(row["request_time"]),
                origin_node=int(row["origin_node"]),
                dest_node=int(row["dest_node"]),
                direct_time_s=float(row["direct_time_s"]),
                direct_distance_m=float(row["direct_distance_m"]),
                state=row["state"],
                assign_time=float(row["assign_time"]) if row["assign_time"] else None,
                pickup_time=float(row["pickup_time"]) if row["pickup_time"] else None,
                dropoff_time=float(row["dropoff_time"]) if row["dropoff_time"] else None,
                vehicle_id=int(row["vehicle_id"]) if row["vehicle_id"] else None,
            ))
    return out
