"""Batch matching of waiting requests to vehicles.

Every batch the dispatcher, working on one frozen speed snapshot:

1. pairs each waiting request with the vehicles that can reach its origin
   within the matching radius and still have a seat in the schedule,
2. grows feasible trips incrementally: a request set of size k is only
   tried when all of its (k-1)-subsets were feasible for that vehicle,
   each trip carrying the route built by the configured constructor
   (greedy nn or exhaustive enumeration),
3. scores each trip as requests served minus a small penalty on vehicle
   time added over the vehicle's keep-current-commitments plan, and
4. picks the exact value-maximizing conflict-free set of trips with a
   branch-and-bound over each connected conflict component, breaking value
   ties toward the lexicographically smallest chosen trip index set.

Assignments are binding: a request, once matched, stays with its vehicle.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field, replace

from .pooling import (
    Constraints,
    RoutePlan,
    VehicleSnapshot,
    enumerate_best_route,
    make_time_provider,
    nn_route,
)


@dataclass(frozen=True)
class VehicleOffer:
    """One vehicle as the dispatcher sees it for a single batch."""
    snapshot: VehicleSnapshot
    committed: tuple = ()   # assigned Requests not yet picked up


@dataclass(frozen=True)
class Trip:
    vehicle_id: int
    request_ids: tuple      # new requests only, ascending
    plan: RoutePlan
    value: float


@dataclass
class DispatchResult:
    assignments: list       # chosen Trips, one per winning vehicle
    refreshed: dict         # vehicle_id -> RoutePlan for unchosen vehicles
    stale: list             # vehicle_ids whose standing plan no longer routes
    n_candidates: int = 0   # request-vehicle pairs inside the radius
    n_trips: int = 0        # feasible trips built (all sizes)
    max_component: int = 0  # largest conflict component solved
    trips: list = field(default_factory=list)   # every feasible trip built


class Dispatcher:
    def __init__(self, net, constraints=None, radius_s=360.0, routing="nn",
                 epsilon_per_hour=1e-3):
        if routing not in ("nn", "enumeration"):
            raise ValueError(f"unknown routing mode {routing!r}")
        self.net = net
        self.constraints = constraints or Constraints()
        self.radius_s = radius_s
        self.routing = routing
        self.epsilon_per_hour = epsilon_per_hour

    def _route(self, snapshot, riders, now, times):
        if self.routing == "nn":
            return nn_route(snapshot, riders, self.constraints, now, times)
        return enumerate_best_route(snapshot, riders, self.constraints,
                                    now, times)

    def dispatch(self, now, offers, waiting):
        """Match waiting requests to vehicles; see the module docstring."""
        times = make_time_provider(self.net)
        offers = sorted(offers, key=lambda o: o.snapshot.vehicle_id)
        waiting = sorted(waiting, key=lambda r: r.request_id)
        result = DispatchResult([], {}, [])

        # keep-current plans; vehicles whose commitments no longer route at
        # today's speeds take no new work and keep their old stop order
        base = {}
        for off in offers:
            vid = off.snapshot.vehicle_id
            if not off.snapshot.onboard and not off.committed:
                base[vid] = RoutePlan((), (), 0.0, 0.0)
                continue
            plan = self._route(off.snapshot, list(off.committed), now, times)
            if plan is None:
                result.stale.append(vid)
            else:
                base[vid] = plan

        live = [o for o in offers if o.snapshot.vehicle_id in base]
        by_vid = {o.snapshot.vehicle_id: o for o in live}

        # radius filter, one backward pass per distinct origin
        idx = self.net._node_idx
        to_origin = {}
        for r in waiting:
            if r.origin_node not in to_origin:
                to_origin[r.origin_node] = self.net.times_to(idx[r.origin_node])
        reachable = {}   # request_id -> [vehicle_id]
        n_cand = 0
        for r in waiting:
            col = to_origin[r.origin_node]
            vids = []
            for off in live:
                snap = off.snapshot
                room = snap.capacity - len(snap.onboard) - len(off.committed)
                if room < 1:
                    continue
                t_reach = snap.lead_time_s + float(col[idx[snap.anchor_node]])
                if t_reach <= self.radius_s:
                    vids.append(snap.vehicle_id)
            reachable[r.request_id] = vids
            n_cand += len(vids)
        result.n_candidates = n_cand

        # request-pair screen: no vehicle can serve both when neither origin
        # reaches the other inside its wait budget (times obey the triangle
        # inequality, so this never rejects a servable pair)
        req_by_id = {r.request_id: r for r in waiting}
        compat = set()
        for a, b in itertools.combinations(waiting, 2):
            t_ab = times(a.origin_node, b.origin_node)
            t_ba = times(b.origin_node, a.origin_node)
            if (now + t_ab <= b.request_time + self.constraints.max_wait_s
                    or now + t_ba <= a.request_time + self.constraints.max_wait_s):
                compat.add((a.request_id, b.request_id))

        def compatible(rid_a, rid_b):
            key = (rid_a, rid_b) if rid_a < rid_b else (rid_b, rid_a)
            return key in compat

        # trip growth, one level at a time
        trips = []
        feasible_sets = {}   # vehicle_id -> {frozenset(request_ids): Trip}
        for off in live:
            vid = off.snapshot.vehicle_id
            room = (off.snapshot.capacity - len(off.snapshot.onboard)
                    - len(off.committed))
            if room < 1:
                continue
            level = {}
            for r in waiting:
                if vid not in reachable[r.request_id]:
                    continue
                riders = list(off.committed) + [r]
                plan = self._route(off.snapshot, riders, now, times)
                if plan is None:
                    continue
                t = Trip(vid, (r.request_id,), plan,
                         self._value(1, plan, base[vid]))
                level[frozenset([r.request_id])] = t
            feasible_sets[vid] = dict(level)
            size = 1
            while level and size < room:
                size += 1
                nxt = {}
                for prev_set, prev_trip in level.items():
                    for r in waiting:
                        rid = r.request_id
                        if rid in prev_set or vid not in reachable[rid]:
                            continue
                        cand = prev_set | {rid}
                        if cand in nxt or cand in feasible_sets[vid]:
                            continue
                        if not all(compatible(rid, other) for other in prev_set):
                            continue
                        if any(cand - {x} not in feasible_sets[vid] for x in cand):
                            continue
                        riders = list(off.committed) + [req_by_id[x]
                                                        for x in sorted(cand)]
                        plan = self._route(off.snapshot, riders, now, times)
                        if plan is None:
                            continue
                        nxt[cand] = Trip(vid, tuple(sorted(cand)), plan,
                                         self._value(size, plan, base[vid]))
                feasible_sets[vid].update(nxt)
                level = nxt
            trips.extend(feasible_sets[vid].values())

        trips.sort(key=lambda t: (t.vehicle_id, len(t.request_ids),
                                  t.request_ids))
        result.n_trips = len(trips)
        result.trips = trips

        chosen_idx, max_comp = solve_assignment(trips)
        result.max_component = max_comp
        chosen = [trips[i] for i in chosen_idx]
        result.assignments = chosen

        won = {t.vehicle_id for t in chosen}
        for vid, plan in base.items():
            if vid not in won and (by_vid[vid].snapshot.onboard
                                   or by_vid[vid].committed):
                result.refreshed[vid] = self._fill_added(plan, base[vid])
        result.assignments = [replace(t, plan=self._fill_added(t.plan, base[t.vehicle_id]))
                              for t in chosen]
        return result

    def _value(self, n_requests, plan, base_plan):
        added_h = max(0.0, plan.total_time_s - base_plan.total_time_s) / 3600.0
        return float(n_requests) - self.epsilon_per_hour * added_h

    @staticmethod
    def _fill_added(plan, base_plan):
        return replace(
            plan,
            added_time_s=plan.total_time_s - base_plan.total_time_s,
            added_distance_m=plan.total_distance_m - base_plan.total_distance_m)


def _find(parent, x):
    while parent[x] != x:
        parent[x] = parent[parent[x]]
        x = parent[x]
    return x


def _union(parent, a, b):
    ra, rb = _find(parent, a), _find(parent, b)
    if ra != rb:
        parent[rb] = ra


def solve_assignment(trips):
    """Exact max-value conflict-free trip selection.

    Trips conflict when they share a vehicle or a request. Returns
    (sorted chosen indices, largest component size). Among equal-value
    optima the lexicographically smallest index tuple wins.
    """
    if not trips:
        return [], 0
    parent = {}
    for i, t in enumerate(trips):
        keys = [("v", t.vehicle_id)] + [("r", rid) for rid in t.request_ids]
        for k in keys:
            parent.setdefault(k, k)
        for k in keys[1:]:
            _union(parent, keys[0], k)

    comp_trips = {}
    for i, t in enumerate(trips):
        root = _find(parent, ("v", t.vehicle_id))
        comp_trips.setdefault(root, []).append(i)

    chosen = []
    max_comp = 0
    for root in sorted(comp_trips, key=lambda r: comp_trips[r][0]):
        idxs = comp_trips[root]
        max_comp = max(max_comp, len(idxs))
        chosen.extend(_solve_component(trips, idxs))
    return sorted(chosen), max_comp


def _solve_component(trips, idxs):
    vids = sorted({trips[i].vehicle_id for i in idxs})
    per_veh = {v: [] for v in vids}
    for i in idxs:
        per_veh[trips[i].vehicle_id].append(i)
    # high-value trips first builds a strong incumbent for the bound
    for v in vids:
        per_veh[v].sort(key=lambda i: (-trips[i].value, i))
    best_tail = [0.0] * (len(vids) + 1)
    for pos in range(len(vids) - 1, -1, -1):
        top = max((trips[i].value for i in per_veh[vids[pos]]), default=0.0)
        best_tail[pos] = best_tail[pos + 1] + max(0.0, top)

    best = {"value": 0.0, "ids": []}

    def rec(pos, used, value, picked):
        if pos == len(vids):
            ids = sorted(picked)
            if (value > best["value"]
                    or (value == best["value"] and ids < best["ids"])):
                best["value"] = value
                best["ids"] = ids
            return
        if value + best_tail[pos] < best["value"]:
            return
        for i in per_veh[vids[pos]]:
            t = trips[i]
            if any(rid in used for rid in t.request_ids):
                continue
            used.update(t.request_ids)
            picked.append(i)
            rec(pos + 1, used, value + t.value, picked)
            picked.pop()
            used.difference_update(t.request_ids)
        rec(pos + 1, used, value, picked)   # vehicle keeps its current plan

    rec(0, set(), 0.0, [])
    return best["ids"]
