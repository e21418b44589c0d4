"""Command line front end.

Subcommands:
  run <config>        simulate one scenario, write its file set
  sweep <config>      run the capacity x service-rate grid, write sweep.csv
  bench-nn            greedy-vs-exhaustive routing benchmark, write bench.csv
  analyze             cross-run comparisons on written run directories

Config or schema problems exit nonzero with the reason on stderr.
"""

import argparse
import concurrent.futures
import csv
import dataclasses
import json
import os
import sys

from .config import (
    ConfigError,
    ScenarioError,
    load_config,
    load_run,
    run_scenario,
)
from .emissions import EmissionError, POLLUTANTS, accumulate
from .engine import EngineError
from .metrics import (
    edge_lengths,
    edge_reduction_points,
    interpolate_at,
    nn_benchmark,
    regress_through_origin,
    traffic_speed_effect,
)
from .netgraph import NetworkError

_ERRORS = (ConfigError, ScenarioError, EngineError, NetworkError,
           EmissionError, FileNotFoundError, OSError)

SWEEP_COLUMNS = [
    "capacity", "target_sr", "seed", "status", "fleet_size", "sr", "def",
    "pef_co2", "pef_co", "pef_nox", "pef_hc", "df", "avg_scheduled",
    "d_def", "d_pef_co2", "d_pef_co", "d_pef_nox", "d_pef_hc", "d_df",
    "error",
]
_DELTA_METRICS = ["def", "pef_co2", "pef_co", "pef_nox", "pef_hc", "df"]

BENCH_COLUMNS = ["capacity", "method", "instances", "tp", "tn", "fp", "fn",
                 "sp", "accuracy", "consistency", "wall_s"]


def main(argv=None):
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except _ERRORS as exc:
        print(f"poolsim: {exc}", file=sys.stderr)
        return 2


def _build_parser():
    parser = argparse.ArgumentParser(
        prog="poolsim",
        description="Ride-pooling traffic and emission simulator.")
    sub = parser.add_subparsers(required=True)

    p_run = sub.add_parser("run", help="simulate one scenario from a config")
    p_run.add_argument("config")
    p_run.add_argument("--out", default=None,
                       help="override the config's out_dir")
    p_run.set_defaults(func=cmd_run)

    p_sweep = sub.add_parser(
        "sweep", help="run the capacity x service-rate grid from a config")
    p_sweep.add_argument("config")
    p_sweep.add_argument("--out", default=None,
                         help="override the config's out_dir")
    p_sweep.add_argument("--seeds", default=None,
                         help="comma list of seeds replacing the config seed")
    p_sweep.add_argument("--workers", type=int, default=1,
                         help="parallel cell workers (default 1)")
    p_sweep.set_defaults(func=cmd_sweep)

    p_bench = sub.add_parser(
        "bench-nn", help="greedy routing benchmark against exhaustive search")
    p_bench.add_argument("--capacity", type=int, required=True)
    p_bench.add_argument("--instances", type=int, required=True)
    p_bench.add_argument("--seed", type=int, default=0)
    p_bench.add_argument("--out", default="bench.csv")
    p_bench.add_argument("--append", action="store_true",
                         help="append rows instead of rewriting the file")
    p_bench.set_defaults(func=cmd_bench)

    p_an = sub.add_parser(
        "analyze", help="comparisons between two written run directories")
    mode = p_an.add_mutually_exclusive_group(required=True)
    mode.add_argument("--regression", action="store_true",
                      help="per-edge baseline emissions vs pooled reduction")
    mode.add_argument("--speed-effect", action="store_true",
                      help="emission change from the pooled run's speeds")
    p_an.add_argument("baseline", help="run directory of the reference scenario")
    p_an.add_argument("pooled", help="run directory of the pooled scenario")
    p_an.add_argument("--out", default=None, help="write the JSON report here")
    p_an.add_argument("--points", default=None,
                      help="regression only: write per-edge points CSV here")
    p_an.set_defaults(func=cmd_analyze)
    return parser


# -- run ------------------------------------------------------------------


def cmd_run(args):
    cfg = load_config(args.config)
    res = run_scenario(cfg, out_root=args.out)
    print(json.dumps(res["summary"], indent=2))
    print(f"wrote {res['run_dir']}", file=sys.stderr)
    return 0


# -- sweep ------------------------------------------------------------------


def _cell_config(cfg, capacity, level, seed):
    cell = dataclasses.replace(
        cfg, capacity=int(capacity), target_sr=float(level), fleet_size=None,
        seed=int(seed), sr_tol=float(cfg.sweep.tol),
        name=f"c{capacity}_sr{int(round(level * 100))}_s{seed}")
    return cell


def _run_cell(cfg, capacity, level, seed, out_root):
    row = {"capacity": int(capacity), "target_sr": float(level),
           "seed": int(seed)}
    try:
        res = run_scenario(_cell_config(cfg, capacity, level, seed),
                           out_root=out_root)
    except _ERRORS as exc:
        row.update(status="failed", error=str(exc))
        return row
    row.update(status="ok", error="")
    s = res["summary"]
    for k in ("fleet_size", "sr", "def", "pef_co2", "pef_co", "pef_nox",
              "pef_hc", "df", "avg_scheduled"):
        row[k] = s[k]
    return row


def _attach_deltas(rows):
    """Relative change vs the capacity-1 cell at the same nominal level.

    Each capacity's metric is first interpolated against its achieved
    service rates, then evaluated at the nominal levels, so cells whose
    bisection landed a little off target still compare like for like.
    """
    by_cap_seed = {}
    for r in rows:
        if r["status"] == "ok":
            by_cap_seed.setdefault((r["capacity"], r["seed"]), []).append(r)

    def level_value(cells, metric, level):
        pts = [(c["sr"], c[metric]) for c in cells if c[metric] is not None]
        if not pts:
            return None
        xs, ys = zip(*pts)
        return interpolate_at(list(xs), list(ys), level)

    for r in rows:
        key = (r["capacity"], r["seed"])
        base = by_cap_seed.get((1, r["seed"]))
        for m in _DELTA_METRICS:
            col = f"d_{m}"
            if r["status"] != "ok":
                r[col] = None
            elif r["capacity"] == 1:
                r[col] = 0.0
            elif base:
                own = level_value(by_cap_seed.get(key, []), m, r["target_sr"])
                ref = level_value(base, m, r["target_sr"])
                r[col] = ((own - ref) / ref
                          if own is not None and ref not in (None, 0.0)
                          else None)
            else:
                r[col] = None
    return rows


def cmd_sweep(args):
    cfg = load_config(args.config)
    out_root = args.out or cfg.out_dir
    seeds = ([int(s) for s in args.seeds.split(",")] if args.seeds
             else [cfg.seed])
    cells = [(cap, lvl, seed)
             for seed in seeds
             for cap in cfg.sweep.capacities
             for lvl in cfg.sweep.sr_levels]

    if args.workers > 1:
        with concurrent.futures.ProcessPoolExecutor(args.workers) as pool:
            futs = [pool.submit(_run_cell, cfg, cap, lvl, seed, out_root)
                    for cap, lvl, seed in cells]
            rows = [f.result() for f in futs]
    else:
        rows = []
        for cap, lvl, seed in cells:
            rows.append(_run_cell(cfg, cap, lvl, seed, out_root))
            r = rows[-1]
            note = (f"sr={r['sr']:.3f} fleet={r['fleet_size']}"
                    if r["status"] == "ok" else r["error"])
            print(f"cell capacity={cap} target_sr={lvl} seed={seed}: "
                  f"{r['status']} {note}", file=sys.stderr)

    _attach_deltas(rows)
    os.makedirs(out_root, exist_ok=True)
    path = os.path.join(out_root, "sweep.csv")
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=SWEEP_COLUMNS)
        w.writeheader()
        for r in rows:
            w.writerow({k: _cell_str(r.get(k)) for k in SWEEP_COLUMNS})
    failed = sum(1 for r in rows if r["status"] != "ok")
    print(f"wrote {path} ({len(rows)} cells, {failed} failed)",
          file=sys.stderr)
    return 0 if failed == 0 else 1


def _cell_str(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return v


# -- bench ------------------------------------------------------------------


def cmd_bench(args):
    if args.capacity < 2:
        raise ConfigError("bench-nn needs capacity >= 2")
    if args.instances < 1:
        raise ConfigError("bench-nn needs instances >= 1")
    rows = nn_benchmark(args.capacity, args.instances, args.seed)
    fresh = not (args.append and os.path.exists(args.out))
    with open(args.out, "a" if not fresh else "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=BENCH_COLUMNS)
        if fresh:
            w.writeheader()
        for r in rows:
            w.writerow({k: ("" if r.get(k) is None else r.get(k))
                        for k in BENCH_COLUMNS})
    enum = next(r for r in rows if r["method"] == "enumeration")
    nn = next(r for r in rows if r["method"] == "nn")
    speedup = enum["wall_s"] / nn["wall_s"] if nn["wall_s"] > 0 else float("inf")
    print(f"capacity={args.capacity} instances={args.instances} "
          f"accuracy={nn['accuracy']:.4f} "
          f"consistency={nn['consistency'] if nn['consistency'] is not None else 'n/a'} "
          f"speedup={speedup:.1f}x", file=sys.stderr)
    print(f"wrote {args.out}", file=sys.stderr)
    return 0


# -- analyze ------------------------------------------------------------------


def cmd_analyze(args):
    base = load_run(args.baseline)
    pooled = load_run(args.pooled)
    if args.regression:
        report = _regression_report(base, pooled, args.points)
    else:
        report = _speed_effect_report(base, pooled)
    text = json.dumps(report, indent=2)
    print(text)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text + "\n")
        print(f"wrote {args.out}", file=sys.stderr)
    return 0


def _regression_report(base, pooled, points_path=None):
    elen = edge_lengths(base["net"])
    led_b = accumulate(base["traversals"], elen, base["epar"])
    led_p = accumulate(pooled["traversals"], edge_lengths(pooled["net"]),
                       pooled["epar"])
    report = {"kind": "regression", "baseline_dir_sr": base["summary"]["sr"],
              "pooled_dir_sr": pooled["summary"]["sr"], "pollutants": {}}
    points = []
    for p in POLLUTANTS:
        xs, ys = edge_reduction_points(led_b, led_p, p)
        slope, r2 = regress_through_origin(xs, ys)
        report["pollutants"][p] = {"slope": slope, "r2": r2, "n_edges": len(xs)}
        if points_path:
            gx = led_b.edge_grams(p)
            gy = led_p.edge_grams(p)
            for eid in sorted(set(gx) | set(gy)):
                x = gx.get(eid, 0.0)
                points.append((eid, p, x, x - gy.get(eid, 0.0)))
    if points_path:
        with open(points_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["edge_id", "pollutant", "baseline_grams",
                        "reduction_grams"])
            for row in points:
                w.writerow([row[0], row[1], repr(row[2]), repr(row[3])])
    return report


def _speed_effect_report(base, pooled):
    elen = edge_lengths(base["net"])
    saved, share, missing = traffic_speed_effect(
        pooled["traversals"], base["traversals"], elen, pooled["epar"])
    return {
        "kind": "speed_effect",
        "fallback_edges": missing,
        "pollutants": {
            p: {"saved_g": saved[p], "share_of_baseline": share[p]}
            for p in POLLUTANTS
        },
    }


if __name__ == "__main__":
    sys.exit(main())
