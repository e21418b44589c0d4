"""Speed-dependent emission factors and per-edge emission accounting.

Emission factors follow the standard rational hot-emission curve in speed,
EF(v) = (alpha v^2 + beta v + gamma + delta/v) / (epsilon v^2 + zeta v + eta)
in g/km, with speeds clamped into each pollutant's valid range. Every
completed edge traversal contributes EF(l/dt) * l to its edge's ledger,
where l/dt is the realized traversal speed.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from importlib import resources

log = logging.getLogger(__name__)

POLLUTANTS = ("CO2", "CO", "NOx", "HC")


class EmissionError(ValueError):
    """Raised on malformed coefficients or impossible traversal speeds."""


@dataclass(frozen=True)
class EmissionCurve:
    pollutant: str
    alpha: float
    beta: float
    gamma: float
    delta: float
    epsilon: float
    zeta: float
    eta: float
    v_min: float
    v_max: float

    def factor(self, v_kmh):
        """EF in g/km at speed v, clamped into [v_min, v_max]."""
        v = min(max(v_kmh, self.v_min), self.v_max)
        num = self.alpha * v * v + self.beta * v + self.gamma + self.delta / v
        den = self.epsilon * v * v + self.zeta * v + self.eta
        return num / den


@dataclass
class EmissionParams:
    curves: dict  # pollutant -> EmissionCurve

    def factor(self, pollutant, v_kmh):
        return self.curves[pollutant].factor(v_kmh)

    @property
    def pollutants(self):
        return tuple(self.curves)


_COLUMNS = ("pollutant", "alpha", "beta", "gamma", "delta", "epsilon",
            "zeta", "eta", "v_min", "v_max")


def load_params(path=None):
    """Read a coefficient table; the packaged Euro-4 petrol set by default.

    Lines starting with '#' are comments. Malformed rows are rejected with
    the offending pollutant named.
    """
    if path is None:
        text = resources.files("poolsim").joinpath("data/euro4_petrol.csv").read_text()
        lines = text.splitlines()
    else:
        with open(path) as fh:
            lines = fh.read().splitlines()
    rows = [ln for ln in lines if ln.strip() and not ln.lstrip().startswith("#")]
    reader = csv.DictReader(rows)
    missing = [c for c in _COLUMNS if c not in (reader.fieldnames or ())]
    if missing:
        raise EmissionError(f"coefficient table missing columns: {', '.join(missing)}")
    curves = {}
    for row in reader:
        name = (row.get("pollutant") or "").strip()
        try:
            curve = EmissionCurve(
                name, *(float(row[c]) for c in _COLUMNS[1:]))
        except (TypeError, ValueError):
            raise EmissionError(f"malformed coefficient row for pollutant {name!r}")
        if not name:
            raise EmissionError("coefficient row with empty pollutant name")
        if name in curves:
            raise EmissionError(f"duplicate coefficient row for pollutant {name}")
        if curve.v_min <= 0 or curve.v_max <= curve.v_min:
            raise EmissionError(f"bad speed range for pollutant {name}")
        v = curve.v_min
        while v <= curve.v_max:
            den = curve.epsilon * v * v + curve.zeta * v + curve.eta
            if den <= 0:
                raise EmissionError(
                    f"non-positive denominator for pollutant {name} at {v} km/h")
            v += 1.0
        curves[name] = curve
    if not curves:
        raise EmissionError("coefficient table has no rows")
    return EmissionParams(curves)


@dataclass
class EmissionLedger:
    """Per-edge, per-pollutant grams plus totals and clamp diagnostics."""
    per_edge: dict = field(default_factory=dict)   # pollutant -> {edge_id: g}
    totals: dict = field(default_factory=dict)     # pollutant -> g
    clamped_events: int = 0

    def total(self, pollutant):
        return self.totals.get(pollutant, 0.0)

    def edge_grams(self, pollutant):
        return self.per_edge.get(pollutant, {})


def traversal_speed_kmh(length_m, t_entry, t_exit):
    dt = t_exit - t_entry
    if dt <= 0:
        raise EmissionError(
            f"traversal with non-positive duration ({t_entry} -> {t_exit})")
    return 3.6 * length_m / dt


def accumulate(events, edge_length_m, params):
    """Ledger over completed traversals.

    events: iterables with edge_id, t_entry, t_exit attributes.
    edge_length_m: mapping edge_id -> meters.
    """
    ledger = EmissionLedger(
        per_edge={p: {} for p in params.pollutants},
        totals={p: 0.0 for p in params.pollutants})
    for ev in events:
        l_m = edge_length_m[ev.edge_id]
        v = traversal_speed_kmh(l_m, ev.t_entry, ev.t_exit)
        clamped = False
        l_km = l_m / 1000.0
        for p, curve in params.curves.items():
            if v < curve.v_min or v > curve.v_max:
                clamped = True
            g = curve.factor(v) * l_km
            ledger.per_edge[p][ev.edge_id] = ledger.per_edge[p].get(ev.edge_id, 0.0) + g
            ledger.totals[p] += g
        if clamped:
            ledger.clamped_events += 1
    if ledger.clamped_events:
        log.info("emission speeds clamped on %d traversals", ledger.clamped_events)
    return ledger


def speed_effect(events, ns_speed_kmh, edge_length_m, params, fallback_kmh=None):
    """Emission savings attributable to faster traffic alone.

    For each traversal, compares the factor at the realized speed against
    the factor at the reference scenario's mean speed for the same edge
    (see metrics.edge_mean_speeds). Edges absent from the reference field
    fall back to its network-wide mean. Returns
    {pollutant: grams_saved} plus the fallback count.
    """
    if fallback_kmh is None:
        if ns_speed_kmh:
            fallback_kmh = sum(ns_speed_kmh.values()) / len(ns_speed_kmh)
        else:
            fallback_kmh = 0.0
    saved = {p: 0.0 for p in params.pollutants}
    missing = 0
    for ev in events:
        l_m = edge_length_m[ev.edge_id]
        v_rs = traversal_speed_kmh(l_m, ev.t_entry, ev.t_exit)
        v_ns = ns_speed_kmh.get(ev.edge_id)
        if v_ns is None:
            v_ns = fallback_kmh
            missing += 1
        l_km = l_m / 1000.0
        for p, curve in params.curves.items():
            saved[p] += (curve.factor(v_ns) - curve.factor(v_rs)) * l_km
    if missing:
        log.info("speed-effect fallback used on %d traversals", missing)
    return saved, missing


def write_emissions_csv(ledger, path):
    """edge_id,pollutant,grams rows, edges ascending within each pollutant."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["edge_id", "pollutant", "grams"])
        for p in ledger.per_edge:
            for eid in sorted(ledger.per_edge[p]):
                w.writerow([eid, p, repr(ledger.per_edge[p][eid])])


def read_emissions_csv(path):
    """Inverse of write_emissions_csv: {pollutant: {edge_id: grams}}."""
    out = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            out.setdefault(row["pollutant"], {})[int(row["edge_id"])] = float(row["grams"])
    return out
