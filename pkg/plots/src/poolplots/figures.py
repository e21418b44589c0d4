"""The five figure kinds, each a pure function of written run files.

Fit statistics on the regression scatter are read from the analysis report
and drawn verbatim; nothing here ever re-fits. Figures are built on the
object API so no interactive backend is touched.
"""

import csv
import json

from matplotlib.figure import Figure

CAP_COLORS = {1: "#555555", 2: "#1f77b4", 4: "#2ca02c", 6: "#d62728"}
POLLUTANTS = ("CO2", "CO", "NOx", "HC")

METRIC_LABELS = {
    "def": "distance efficiency (veh-km / person-km)",
    "pef_co2": "CO2 per person-km (g/km)",
    "pef_co": "CO per person-km (g/km)",
    "pef_nox": "NOx per person-km (g/km)",
    "pef_hc": "HC per person-km (g/km)",
    "df": "delay factor",
    "avg_scheduled": "scheduled riders per vehicle",
}


class PlotError(ValueError):
    pass


def _color(cap):
    return CAP_COLORS.get(cap, "#9467bd")


def read_sweep(path):
    """Usable sweep rows: status ok, numeric fields parsed."""
    rows = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            if row.get("status") != "ok":
                continue
            out = {"capacity": int(row["capacity"]),
                   "target_sr": float(row["target_sr"]),
                   "seed": int(row["seed"])}
            for k, v in row.items():
                if k not in out and k not in ("status", "error") and v != "":
                    out[k] = float(v)
            rows.append(out)
    if not rows:
        raise PlotError(f"{path} holds no usable rows")
    return rows


def _by_capacity(rows):
    caps = {}
    for r in rows:
        caps.setdefault(r["capacity"], []).append(r)
    for cells in caps.values():
        cells.sort(key=lambda r: r["target_sr"])
    return dict(sorted(caps.items()))


def sr_curves(sweep_csv, metric="pef_co2"):
    """One line per capacity: metric against achieved service rate."""
    rows = read_sweep(sweep_csv)
    if any(metric not in r for r in rows):
        raise PlotError(f"metric {metric!r} missing from some sweep rows")
    fig = Figure(figsize=(6.0, 4.2))
    ax = fig.add_subplot(111)
    for cap, cells in _by_capacity(rows).items():
        pts = sorted((c["sr"], c[metric]) for c in cells)
        ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o",
                color=_color(cap), label=f"capacity {cap}")
    ax.set_xlabel("achieved service rate")
    ax.set_ylabel(METRIC_LABELS.get(metric, metric))
    ax.grid(alpha=0.3)
    ax.legend()
    fig.tight_layout()
    return fig, {"kind": "sr_curves", "metric": metric, "n_rows": len(rows)}


def delta_curves(sweep_csv, metric="pef_co2"):
    """Relative change vs capacity 1, percent, per capacity above 1."""
    rows = read_sweep(sweep_csv)
    col = f"d_{metric}"
    if any(col not in r for r in rows):
        raise PlotError(f"delta column {col!r} missing from some sweep rows")
    fig = Figure(figsize=(6.0, 4.2))
    ax = fig.add_subplot(111)
    for cap, cells in _by_capacity(rows).items():
        if cap == 1:
            continue
        xs = [c["target_sr"] for c in cells]
        ys = [100.0 * c[col] for c in cells]
        ax.plot(xs, ys, marker="s", color=_color(cap),
                label=f"capacity {cap}")
    ax.axhline(0.0, color="#555555", lw=0.8)
    ax.set_xlabel("service rate target")
    ax.set_ylabel(f"change vs capacity 1 (%), {metric}")
    ax.grid(alpha=0.3)
    ax.legend()
    fig.tight_layout()
    return fig, {"kind": "delta_curves", "metric": metric, "n_rows": len(rows)}


def speed_effect(report_json):
    """Bars of the speed-driven saving per pollutant, percent of baseline."""
    with open(report_json) as fh:
        report = json.load(fh)
    if report.get("kind") != "speed_effect":
        raise PlotError(f"{report_json} is not a speed-effect report")
    pols = [p for p in POLLUTANTS if p in report["pollutants"]]
    shares = [100.0 * report["pollutants"][p]["share_of_baseline"]
              for p in pols]
    saved = [report["pollutants"][p]["saved_g"] for p in pols]
    fig = Figure(figsize=(5.4, 4.0))
    ax = fig.add_subplot(111)
    bars = ax.bar(pols, shares, color="#1f77b4")
    for rect, g in zip(bars, saved):
        ax.annotate(f"{g:.1f} g", (rect.get_x() + rect.get_width() / 2,
                                   rect.get_height()),
                    ha="center", va="bottom", fontsize=8)
    ax.set_ylabel("saving from higher speeds (% of baseline)")
    ax.grid(alpha=0.3, axis="y")
    fig.tight_layout()
    return fig, {"kind": "speed_effect", "pollutants": pols,
                 "shares_pct": shares}


def regression_scatter(points_csv, report_json, pollutant="CO2"):
    """Per-edge baseline grams vs reduction, with the reported fit drawn.

    Slope and R2 come from the report and are rendered as-is.
    """
    with open(report_json) as fh:
        report = json.load(fh)
    if report.get("kind") != "regression":
        raise PlotError(f"{report_json} is not a regression report")
    if pollutant not in report["pollutants"]:
        raise PlotError(f"report lacks pollutant {pollutant!r}")
    slope = report["pollutants"][pollutant]["slope"]
    r2 = report["pollutants"][pollutant]["r2"]
    xs, ys = [], []
    with open(points_csv, newline="") as fh:
        for row in csv.DictReader(fh):
            if row["pollutant"] == pollutant:
                xs.append(float(row["baseline_grams"]))
                ys.append(float(row["reduction_grams"]))
    if not xs:
        raise PlotError(f"{points_csv} holds no {pollutant} points")
    annotation = f"y = {slope:.3f} x\nR$^2$ = {r2:.3f}"
    fig = Figure(figsize=(5.4, 5.0))
    ax = fig.add_subplot(111)
    ax.scatter(xs, ys, s=10, alpha=0.55, color="#1f77b4", edgecolors="none")
    xmax = max(xs)
    ax.plot([0.0, xmax], [0.0, slope * xmax], color="#d62728", lw=1.4)
    ax.annotate(annotation, (0.05, 0.92), xycoords="axes fraction",
                va="top", fontsize=10)
    ax.set_xlabel(f"baseline {pollutant} on edge (g)")
    ax.set_ylabel(f"{pollutant} reduction on edge (g)")
    ax.grid(alpha=0.3)
    fig.tight_layout()
    return fig, {"kind": "regression_scatter", "pollutant": pollutant,
                 "slope": slope, "r2": r2, "n_points": len(xs),
                 "annotation": annotation}


def scheduled_bars(sweep_csv):
    """Mean scheduled riders per vehicle, grouped by service-rate target."""
    rows = read_sweep(sweep_csv)
    caps = sorted({r["capacity"] for r in rows})
    levels = sorted({r["target_sr"] for r in rows})
    fig = Figure(figsize=(6.0, 4.2))
    ax = fig.add_subplot(111)
    width = 0.8 / max(len(levels), 1)
    for j, lvl in enumerate(levels):
        vals = []
        for cap in caps:
            cell = [r for r in rows
                    if r["capacity"] == cap and r["target_sr"] == lvl]
            vals.append(cell[0]["avg_scheduled"] if cell else 0.0)
        xs = [i + (j - (len(levels) - 1) / 2) * width
              for i in range(len(caps))]
        ax.bar(xs, vals, width=width * 0.95, label=f"target SR {lvl:g}")
    ax.set_xticks(range(len(caps)))
    ax.set_xticklabels([str(c) for c in caps])
    ax.set_xlabel("vehicle capacity")
    ax.set_ylabel(METRIC_LABELS["avg_scheduled"])
    ax.grid(alpha=0.3, axis="y")
    ax.legend()
    fig.tight_layout()
    return fig, {"kind": "scheduled_bars", "capacities": caps,
                 "levels": levels}


FIGURE_KINDS = ("sr_curves", "delta_curves", "speed_effect",
                "regression_scatter", "scheduled_bars")


def render(kind, in_path, out_path, annotations=None, metric="pef_co2",
           pollutant="CO2", dpi=150):
    """Build one figure kind and write it to out_path. Returns its meta."""
    if kind == "sr_curves":
        fig, meta = sr_curves(in_path, metric=metric)
    elif kind == "delta_curves":
        fig, meta = delta_curves(in_path, metric=metric)
    elif kind == "speed_effect":
        fig, meta = speed_effect(in_path)
    elif kind == "regression_scatter":
        if not annotations:
            raise PlotError("regression_scatter needs --annotations "
                            "(the analysis report JSON)")
        fig, meta = regression_scatter(in_path, annotations,
                                       pollutant=pollutant)
    elif kind == "scheduled_bars":
        fig, meta = scheduled_bars(in_path)
    else:
        raise PlotError(f"unknown figure kind {kind!r}")
    fig.savefig(out_path, dpi=dpi)
    meta["out"] = out_path
    return meta
