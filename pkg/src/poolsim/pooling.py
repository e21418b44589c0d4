"""Single-vehicle route construction for pooled trips.

Given a vehicle snapshot and a set of riders to serve, builds an ordered
stop sequence subject to three constraints: pickups within the rider's
maximum wait, in-vehicle time within (1 + detour_ratio) times the rider's
direct time, and occupancy never above capacity.

Two constructors are provided. enumerate_best_route searches every
precedence-valid interleaving of the stops (pickup before dropoff per
rider) and returns the minimum-duration feasible plan, breaking ties by
the lexicographically smallest stop sequence; its pruning is exact, so the
result never depends on the prune flag. nn_route is the fast greedy
heuristic that repeatedly drives to the nearest eligible stop, used by the
dispatcher at scale and benchmarked against the enumerator.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

PICKUP = "pickup"
DROPOFF = "dropoff"
_KIND_RANK = {PICKUP: 0, DROPOFF: 1}


@dataclass(frozen=True)
class Stop:
    kind: str
    request_id: int
    node: int

    @property
    def key(self):
        return (self.request_id, _KIND_RANK[self.kind])


@dataclass(frozen=True)
class Constraints:
    max_wait_s: float = 300.0
    detour_ratio: float = 0.5   # in-vehicle time <= (1 + ratio) * direct time


@dataclass(frozen=True)
class OnboardRider:
    request_id: int
    dest_node: int
    pickup_time: float
    direct_time_s: float


@dataclass(frozen=True)
class VehicleSnapshot:
    """What route construction needs to know about one vehicle.

    The anchor node is where routing can start: the vehicle's node when
    stationary, otherwise the end of the edge it is on, reached after
    lead_time_s (a vehicle always finishes its current edge first).
    """
    vehicle_id: int
    anchor_node: int
    capacity: int
    lead_time_s: float = 0.0
    lead_distance_m: float = 0.0
    onboard: tuple = ()


@dataclass(frozen=True)
class RoutePlan:
    stops: tuple                 # Stop sequence
    arrivals_s: tuple            # absolute seconds, one per stop
    total_time_s: float          # from now to the last stop
    total_distance_m: float      # legs measured on the empty network
    added_time_s: float = 0.0    # filled by the dispatcher vs. the old plan
    added_distance_m: float = 0.0


@dataclass(frozen=True)
class Verdict:
    feasible: bool
    violation: str | None = None


def _no_dist(o, d):
    return 0.0


def check_plan(snapshot, stops, riders, constraints, now, times):
    """Validate a stop sequence against structure and service constraints.

    riders: Requests to be picked up under this plan (committed or new).
    Onboard riders come from the snapshot. Returns a Verdict whose
    violation names the first failure, e.g. "max_wait, request 3".
    """
    verdict, _, _, _ = _evaluate(snapshot, tuple(stops), riders, constraints,
                                 now, times, _no_dist)
    return verdict


def _evaluate(snapshot, stops, riders, constraints, now, times, dist):
    rider_by_id = {r.request_id: r for r in riders}
    if len(rider_by_id) != len(riders):
        return Verdict(False, "structure, duplicate rider"), (), 0.0, 0.0
    onboard_by_id = {o.request_id: o for o in snapshot.onboard}
    need = {rid: [1, 1] for rid in rider_by_id}      # pickups, dropoffs owed
    for rid in onboard_by_id:
        if rid in need:
            return Verdict(False, f"structure, request {rid} both onboard and new"), (), 0.0, 0.0
        need[rid] = [0, 1]

    t = now + snapshot.lead_time_s
    d_m = snapshot.lead_distance_m
    pos = snapshot.anchor_node
    occupancy = len(snapshot.onboard)
    picked_at = {o.request_id: o.pickup_time for o in onboard_by_id.values()}
    arrivals = []
    for i, stop in enumerate(stops):
        if stop.request_id not in need:
            return Verdict(False, f"structure, unknown request {stop.request_id}"), (), 0.0, 0.0
        owed = need[stop.request_id]
        t += times(pos, stop.node)
        d_m += dist(pos, stop.node)
        pos = stop.node
        arrivals.append(t)
        if stop.kind == PICKUP:
            if owed[0] != 1:
                return Verdict(False, f"structure, extra pickup for request {stop.request_id}"), (), 0.0, 0.0
            owed[0] = 0
            occupancy += 1
            if occupancy > snapshot.capacity:
                return Verdict(False, f"capacity, stop {i}"), (), 0.0, 0.0
            r = rider_by_id[stop.request_id]
            if t > r.request_time + constraints.max_wait_s:
                return Verdict(False, f"max_wait, request {stop.request_id}"), (), 0.0, 0.0
            picked_at[stop.request_id] = t
        else:
            if owed[0] != 0 or owed[1] != 1:
                return Verdict(False, f"structure, dropoff before pickup for request {stop.request_id}"), (), 0.0, 0.0
            owed[1] = 0
            occupancy -= 1
            direct = (onboard_by_id[stop.request_id].direct_time_s
                      if stop.request_id in onboard_by_id
                      else rider_by_id[stop.request_id].direct_time_s)
            if t - picked_at[stop.request_id] > (1.0 + constraints.detour_ratio) * direct:
                return Verdict(False, f"detour, request {stop.request_id}"), (), 0.0, 0.0
    unserved = [rid for rid, owed in need.items() if owed != [0, 0]]
    if unserved:
        return Verdict(False, f"structure, unserved request {unserved[0]}"), (), 0.0, 0.0
    return Verdict(True), tuple(arrivals), t - now, d_m


def _stop_pool(snapshot, riders):
    stops = [Stop(DROPOFF, o.request_id, o.dest_node) for o in snapshot.onboard]
    for r in riders:
        stops.append(Stop(PICKUP, r.request_id, r.origin_node))
        stops.append(Stop(DROPOFF, r.request_id, r.dest_node))
    return sorted(stops, key=lambda s: s.key)


def stop_orderings(pickup_ids, dropoff_only_ids):
    """Yield every precedence-valid stop-key ordering.

    pickup_ids are riders needing pickup then dropoff; dropoff_only_ids are
    already-onboard riders. Exactly (2p + d)! / 2**p orderings are yielded,
    the space enumerate_best_route searches.
    """
    items = sorted([(rid, 1) for rid in dropoff_only_ids]
                   + [(rid, 0) for rid in pickup_ids])
    picked = set(dropoff_only_ids)

    def rec(remaining, prefix):
        if not remaining:
            yield tuple(prefix)
            return
        for i, it in enumerate(remaining):
            rid, kind = it
            if kind == 1 and rid not in picked:
                continue
            if kind == 0:
                picked.add(rid)
                prefix.append((rid, 0))
                rest = remaining[:i] + remaining[i + 1:] + [(rid, 1)]
                rest.sort()
                yield from rec(rest, prefix)
                prefix.pop()
                picked.discard(rid)
            else:
                prefix.append((rid, 1))
                yield from rec(remaining[:i] + remaining[i + 1:], prefix)
                prefix.pop()

    # dropoffs of un-picked riders are injected after their pickup instead
    start = [(rid, 0) for rid in sorted(pickup_ids)] + [
        (rid, 1) for rid in sorted(dropoff_only_ids)]
    start.sort()
    yield from rec(start, [])


def enumerate_best_route(snapshot, riders, constraints, now, times,
                         dist=_no_dist, prune=True, stats=None):
    """Optimal feasible stop sequence, or None when no ordering is feasible.

    Searches all precedence-valid interleavings; with prune=True, branches
    that already violate a wait or detour bound, exceed capacity, or cannot
    beat the incumbent duration are cut without changing the result. Ties
    on duration resolve to the lexicographically smallest stop sequence.
    stats, when given, collects the number of complete orderings examined.
    """
    riders = sorted(riders, key=lambda r: r.request_id)
    rider_by_id = {r.request_id: r for r in riders}
    onboard_by_id = {o.request_id: o for o in snapshot.onboard}
    pool = _stop_pool(snapshot, riders)
    if stats is not None:
        stats["examined"] = 0

    best = {"total": None, "seq": None, "arrivals": None, "dist": None}
    deadline = {r.request_id: r.request_time + constraints.max_wait_s for r in riders}
    ride_cap = {}
    for r in riders:
        ride_cap[r.request_id] = (1.0 + constraints.detour_ratio) * r.direct_time_s
    for o in snapshot.onboard:
        ride_cap[o.request_id] = (1.0 + constraints.detour_ratio) * o.direct_time_s

    start_t = now + snapshot.lead_time_s
    start_d = snapshot.lead_distance_m

    def rec(pos, t, d_m, occupancy, picked_at, remaining, seq, arrivals, bad):
        if not remaining:
            if stats is not None:
                stats["examined"] += 1
            if bad:
                return
            total = t - now
            if (best["total"] is None or total < best["total"]
                    or (total == best["total"] and [s.key for s in seq] < [s.key for s in best["seq"]])):
                best.update(total=total, seq=list(seq), arrivals=list(arrivals), dist=d_m)
            return
        for i, stop in enumerate(remaining):
            if stop.kind == DROPOFF and stop.request_id not in picked_at:
                continue
            nt = t + times(pos, stop.node)
            nd = d_m + dist(pos, stop.node)
            this_bad = bad
            occ = occupancy
            if stop.kind == PICKUP:
                occ += 1
                if occ > snapshot.capacity or nt > deadline[stop.request_id]:
                    this_bad = True
            else:
                occ -= 1
                if nt - picked_at[stop.request_id] > ride_cap[stop.request_id]:
                    this_bad = True
            if prune and this_bad:
                continue
            if prune and best["total"] is not None and nt - now > best["total"]:
                continue
            new_picked = picked_at
            if stop.kind == PICKUP:
                new_picked = dict(picked_at)
                new_picked[stop.request_id] = nt
            seq.append(stop)
            arrivals.append(nt)
            rec(stop.node, nt, nd, occ, new_picked,
                remaining[:i] + remaining[i + 1:], seq, arrivals, this_bad)
            seq.pop()
            arrivals.pop()

    picked0 = {o.request_id: o.pickup_time for o in snapshot.onboard}
    rec(snapshot.anchor_node, start_t, start_d, len(snapshot.onboard),
        picked0, pool, [], [], False)

    if best["total"] is None:
        return None
    return RoutePlan(tuple(best["seq"]), tuple(best["arrivals"]),
                     best["total"], best["dist"])


def nn_route(snapshot, riders, constraints, now, times, dist=_no_dist):
    """Greedy nearest-stop plan, validated before being returned.

    From the anchor, repeatedly drives to the closest eligible stop:
    pickups while a seat is free, dropoffs of anyone on board. Travel-time
    ties break toward the lowest request id, pickup before dropoff. Returns
    None when the greedy order violates a constraint.
    """
    riders = sorted(riders, key=lambda r: r.request_id)
    pending = _stop_pool(snapshot, riders)
    picked = {o.request_id for o in snapshot.onboard}
    occupancy = len(snapshot.onboard)
    pos = snapshot.anchor_node
    seq = []
    while pending:
        choice = None
        choice_t = None
        for stop in pending:
            if stop.kind == PICKUP:
                if occupancy >= snapshot.capacity:
                    continue
            elif stop.request_id not in picked:
                continue
            leg = times(pos, stop.node)
            key = (leg, stop.request_id, _KIND_RANK[stop.kind])
            if choice is None or key < choice_t:
                choice, choice_t = stop, key
        if choice is None:
            return None  # seats full with nobody to drop: malformed input
        seq.append(choice)
        pending.remove(choice)
        pos = choice.node
        if choice.kind == PICKUP:
            picked.add(choice.request_id)
            occupancy += 1
        else:
            occupancy -= 1
    verdict, arrivals, total, d_m = _evaluate(
        snapshot, tuple(seq), riders, constraints, now, times, dist)
    if not verdict.feasible:
        return None
    return RoutePlan(tuple(seq), arrivals, total, d_m)


def make_time_provider(net):
    """times(o, d) callable over current network speeds, cached per origin.

    Call .invalidate() after speeds change (the dispatcher does this once
    per batch so all checks in a batch share one speed snapshot).
    """
    cache = {}
    idx = net._node_idx

    def times(o, d):
        row = cache.get(o)
        if row is None:
            row = net.times_from(idx[o])
            cache[o] = row
        return float(row[idx[d]])

    def invalidate():
        cache.clear()

    times.invalidate = invalidate
    return times


def make_base_dist_provider(net):
    """dist(o, d) in meters along the empty-network quickest path."""
    cache = {}

    def dist(o, d):
        key = (o, d)
        if key not in cache:
            if o == d:
                cache[key] = 0.0
            else:
                p = net.baseline_path(o, d)
                cache[key] = p.total_length_m if p else float("inf")
        return cache[key]

    return dist
