"""Scenario configuration and the run driver.

One YAML file describes one scenario: the network, the demand, the fleet
(either a fixed size or a service-rate target), and the matching knobs.
``run_scenario`` executes it and writes the documented file set under
``<out_dir>/<name>/``; ``replay_summary`` recomputes the summary from those
files alone, which the tests hold bit-identical to the engine's own numbers.
"""

import json
import os
import time
from dataclasses import asdict, dataclass, field

import yaml

from .demand import (
    COMPLETED,
    BBox,
    DemandProfile,
    downsample,
    generate_demand,
    load_requests,
)
from .emissions import accumulate, load_params, write_emissions_csv
from .engine import (
    SimParams,
    read_df_csv,
    read_request_log,
    read_traversals_csv,
    run_sim,
    write_df_csv,
    write_request_log,
    write_traversals_csv,
)
from .metrics import edge_lengths, solve_fleet_for_sr, summary_metrics
from .netgraph import NetworkDefaults, grid_network, load_network, write_network_csv
from .pooling import Constraints


class ConfigError(ValueError):
    pass


class ScenarioError(RuntimeError):
    pass


@dataclass
class NetworkConfig:
    kind: str = "grid"              # grid | csv
    rows: int = 20
    cols: int = 20
    spacing_m: float = 250.0
    lanes: int = 1
    nodes_csv: str | None = None
    edges_csv: str | None = None
    free_flow_kmh: float = 45.0
    jam_density: float = 100.0
    base_density: float = 0.0


@dataclass
class DemandConfig:
    kind: str = "generate"          # generate | csv
    requests_csv: str | None = None
    horizon_s: float = 5400.0
    base_rate_per_s: float = 0.4
    mean_direct_m: float = 2500.0
    hot_zone: tuple | None = None   # (lon_lo, lon_hi, lat_lo, lat_hi)
    hot_zone_weight: float = 0.0
    downsample: float | None = None  # keep probability in (0, 1]


@dataclass
class SweepConfig:
    capacities: tuple = (1, 2, 4, 6)
    sr_levels: tuple = (0.5, 0.8)
    tol: float = 0.02


@dataclass
class ScenarioConfig:
    name: str = "scenario"
    seed: int = 0
    capacity: int = 1
    fleet_size: int | None = None
    target_sr: float | None = None
    sr_tol: float = 0.02
    horizon_s: float = 7200.0
    step_s: float = 2.0
    out_dir: str = "out"
    max_wait_s: float = 300.0
    detour_ratio: float = 0.5
    radius_s: float = 360.0
    routing: str = "nn"
    emissions_csv: str | None = None
    audit: bool = False
    network: NetworkConfig = field(default_factory=NetworkConfig)
    demand: DemandConfig = field(default_factory=DemandConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)


_TOP_KEYS = {
    "name", "seed", "capacity", "fleet_size", "target_sr", "sr_tol",
    "horizon_s", "step_s", "out_dir", "max_wait_s", "detour_ratio",
    "radius_s", "routing", "emissions_csv", "audit", "network", "demand",
    "sweep",
}
_NET_KEYS = {"kind", "rows", "cols", "spacing_m", "lanes", "nodes_csv",
             "edges_csv", "free_flow_kmh", "jam_density", "base_density"}
_DEM_KEYS = {"kind", "requests_csv", "horizon_s", "base_rate_per_s",
             "mean_direct_m", "hot_zone", "hot_zone_weight", "downsample"}
_SWEEP_KEYS = {"capacities", "sr_levels", "tol"}


def _check_keys(d, allowed, where):
    extra = sorted(set(d) - allowed)
    if extra:
        raise ConfigError(f"unknown {where} keys: {', '.join(extra)}")


def parse_config(raw, name_hint=None):
    """Validate a mapping into a ScenarioConfig."""
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a mapping")
    _check_keys(raw, _TOP_KEYS, "config")
    net_raw = dict(raw.get("network") or {})
    dem_raw = dict(raw.get("demand") or {})
    sweep_raw = dict(raw.get("sweep") or {})
    _check_keys(net_raw, _NET_KEYS, "network")
    _check_keys(dem_raw, _DEM_KEYS, "demand")
    _check_keys(sweep_raw, _SWEEP_KEYS, "sweep")

    if dem_raw.get("hot_zone") is not None:
        hz = tuple(float(v) for v in dem_raw["hot_zone"])
        if len(hz) != 4:
            raise ConfigError("hot_zone needs 4 numbers: lon_lo lon_hi lat_lo lat_hi")
        dem_raw["hot_zone"] = hz
    if sweep_raw.get("capacities") is not None:
        sweep_raw["capacities"] = tuple(int(c) for c in sweep_raw["capacities"])
    if sweep_raw.get("sr_levels") is not None:
        sweep_raw["sr_levels"] = tuple(float(s) for s in sweep_raw["sr_levels"])

    cfg = ScenarioConfig(
        network=NetworkConfig(**net_raw),
        demand=DemandConfig(**dem_raw),
        sweep=SweepConfig(**sweep_raw),
        **{k: v for k, v in raw.items()
           if k not in ("network", "demand", "sweep")},
    )
    if name_hint and "name" not in raw:
        cfg.name = name_hint
    _validate(cfg)
    return cfg


def _validate(cfg):
    have_fleet = cfg.fleet_size is not None
    have_target = cfg.target_sr is not None
    if have_fleet == have_target:
        raise ConfigError("set exactly one of fleet_size and target_sr")
    if have_fleet and int(cfg.fleet_size) < 1:
        raise ConfigError("fleet_size must be >= 1")
    if have_target and not (0.0 < float(cfg.target_sr) <= 1.0):
        raise ConfigError("target_sr must lie in (0, 1]")
    if int(cfg.capacity) < 1:
        raise ConfigError("capacity must be >= 1")
    if cfg.horizon_s <= 0 or cfg.step_s <= 0:
        raise ConfigError("horizon_s and step_s must be positive")
    if cfg.routing not in ("nn", "enumeration"):
        raise ConfigError("routing must be 'nn' or 'enumeration'")
    if cfg.max_wait_s <= 0 or cfg.detour_ratio < 0 or cfg.radius_s <= 0:
        raise ConfigError("max_wait_s and radius_s must be positive, detour_ratio >= 0")

    net = cfg.network
    if net.kind == "grid":
        if net.rows < 2 or net.cols < 2:
            raise ConfigError("grid network needs rows >= 2 and cols >= 2")
    elif net.kind == "csv":
        if not net.nodes_csv or not net.edges_csv:
            raise ConfigError("csv network needs nodes_csv and edges_csv")
    else:
        raise ConfigError("network.kind must be 'grid' or 'csv'")

    dem = cfg.demand
    if dem.kind == "generate":
        if dem.horizon_s <= 0 or dem.base_rate_per_s <= 0:
            raise ConfigError("demand horizon_s and base_rate_per_s must be positive")
        if not (0.0 <= dem.hot_zone_weight < 1.0):
            raise ConfigError("hot_zone_weight must lie in [0, 1)")
        if dem.hot_zone_weight > 0.0 and dem.hot_zone is None:
            raise ConfigError("hot_zone_weight needs a hot_zone box")
    elif dem.kind == "csv":
        if not dem.requests_csv:
            raise ConfigError("csv demand needs requests_csv")
    else:
        raise ConfigError("demand.kind must be 'generate' or 'csv'")
    if dem.downsample is not None and not (0.0 < dem.downsample <= 1.0):
        raise ConfigError("downsample must lie in (0, 1]")


def load_config(path):
    with open(path) as fh:
        raw = yaml.safe_load(fh)
    stem = os.path.splitext(os.path.basename(path))[0]
    return parse_config(raw or {}, name_hint=stem)


def config_to_dict(cfg):
    """Canonical plain-dict form; dump + parse gives back an equal config."""
    d = asdict(cfg)
    d["network"] = asdict(cfg.network)
    d["demand"] = asdict(cfg.demand)
    sw = asdict(cfg.sweep)
    sw["capacities"] = list(cfg.sweep.capacities)
    sw["sr_levels"] = list(cfg.sweep.sr_levels)
    d["sweep"] = sw
    if cfg.demand.hot_zone is not None:
        d["demand"]["hot_zone"] = list(cfg.demand.hot_zone)
    return d


def dump_config(cfg, path=None):
    text = yaml.safe_dump(config_to_dict(cfg), sort_keys=False)
    if path is not None:
        with open(path, "w") as fh:
            fh.write(text)
    return text


# -- builders -----------------------------------------------------------------


def build_network(cfg):
    net = cfg.network
    defaults = NetworkDefaults(free_flow_kmh=net.free_flow_kmh,
                               jam_density=net.jam_density,
                               base_density=net.base_density)
    if net.kind == "csv":
        return load_network(net.nodes_csv, net.edges_csv, defaults=defaults)
    return grid_network(net.rows, net.cols, spacing_m=net.spacing_m,
                        defaults=defaults, lanes=net.lanes)


def build_demand(cfg, net):
    dem = cfg.demand
    if dem.kind == "csv":
        requests, dropped = load_requests(dem.requests_csv, net,
                                          batch_s=cfg.step_s)
        meta = {"source": dem.requests_csv, "dropped": dropped}
    else:
        profile = DemandProfile(
            horizon_s=dem.horizon_s,
            base_rate_per_s=dem.base_rate_per_s,
            hot_zone=BBox(*dem.hot_zone) if dem.hot_zone else None,
            hot_zone_weight=dem.hot_zone_weight,
            mean_direct_m=dem.mean_direct_m,
        )
        requests = generate_demand(profile, net, cfg.seed, batch_s=cfg.step_s)
        meta = {"source": "generated", "dropped": 0}
    if dem.downsample is not None and dem.downsample < 1.0:
        requests = downsample(requests, dem.downsample, cfg.seed)
    meta["n_requests"] = len(requests)
    return requests, meta


def build_params(cfg, fleet_size):
    return SimParams(
        fleet_size=int(fleet_size),
        capacity=int(cfg.capacity),
        horizon_s=float(cfg.horizon_s),
        step_s=float(cfg.step_s),
        radius_s=float(cfg.radius_s),
        routing=cfg.routing,
        seed=int(cfg.seed),
        audit=bool(cfg.audit),
        constraints=Constraints(max_wait_s=cfg.max_wait_s,
                                detour_ratio=cfg.detour_ratio),
    )


def _simulate(cfg, fleet_size):
    # fresh network and requests per run: the engine mutates both
    net = build_network(cfg)
    requests, meta = build_demand(cfg, net)
    out = run_sim(net, requests, build_params(cfg, fleet_size))
    return net, out, meta


def resolve_fleet(cfg, progress=None):
    """Fleet size for the scenario, bisecting when a target SR is set.

    Returns (fleet_size, evals) where evals maps probed sizes to achieved
    service rates (empty for a fixed fleet). An unreachable target raises
    ScenarioError naming the achievable range.
    """
    if cfg.fleet_size is not None:
        return int(cfg.fleet_size), {}

    def run_at(n):
        _, out, _ = _simulate(cfg, n)
        served = sum(1 for r in out.requests if r.state == COMPLETED)
        sr = served / len(out.requests) if out.requests else 0.0
        if progress:
            progress(n, sr)
        return sr

    fleet, achieved, evals = solve_fleet_for_sr(run_at, cfg.target_sr,
                                                tol=cfg.sr_tol)
    if abs(achieved - cfg.target_sr) > cfg.sr_tol:
        lo, hi = min(evals.values()), max(evals.values())
        raise ScenarioError(
            f"target_sr={cfg.target_sr} unreachable within tolerance "
            f"{cfg.sr_tol}; achievable range over probed fleets: "
            f"[{lo:.3f}, {hi:.3f}]")
    return fleet, evals


def run_scenario(cfg, out_root=None, fleet_size=None, progress=None):
    """Execute one scenario and write its file set.

    Layout under <out_root>/<cfg.name>/: traversals.csv, df.csv,
    requests.csv, summary.json, plus emissions.csv, the network pair
    (nodes.csv, edges.csv) and diagnostics.json so a summary can be
    recomputed from the directory alone.
    """
    t0 = time.perf_counter()
    fleet_evals = {}
    if fleet_size is None:
        fleet_size, fleet_evals = resolve_fleet(cfg, progress=progress)
    net, out, meta = _simulate(cfg, fleet_size)

    epar = load_params(cfg.emissions_csv)
    summary = summary_metrics(
        out.requests, out.traversals, out.df_log, net, epar,
        fleet_size=fleet_size, capacity=cfg.capacity, seed=cfg.seed,
        horizon_s=cfg.horizon_s, step_s=cfg.step_s)

    run_dir = os.path.join(out_root or cfg.out_dir, cfg.name)
    os.makedirs(run_dir, exist_ok=True)
    write_traversals_csv(out.traversals, os.path.join(run_dir, "traversals.csv"))
    write_df_csv(out.df_log, os.path.join(run_dir, "df.csv"))
    write_request_log(out.requests, os.path.join(run_dir, "requests.csv"))
    write_network_csv(net, os.path.join(run_dir, "nodes.csv"),
                      os.path.join(run_dir, "edges.csv"))
    ledger = accumulate(out.traversals, edge_lengths(net), epar)
    write_emissions_csv(ledger, os.path.join(run_dir, "emissions.csv"))
    with open(os.path.join(run_dir, "summary.json"), "w") as fh:
        json.dump(summary, fh, indent=2)
        fh.write("\n")

    diagnostics = dict(out.diagnostics)
    diagnostics.update({
        "horizon_s": cfg.horizon_s,
        "step_s": cfg.step_s,
        "fleet_size": int(fleet_size),
        "capacity": int(cfg.capacity),
        "seed": int(cfg.seed),
        "routing": cfg.routing,
        "emissions_params": cfg.emissions_csv or "builtin",
        "demand": meta,
        "fleet_search": {str(k): v for k, v in fleet_evals.items()},
        "wall_s": time.perf_counter() - t0,
    })
    with open(os.path.join(run_dir, "diagnostics.json"), "w") as fh:
        json.dump(diagnostics, fh, indent=2)
        fh.write("\n")
    return {"summary": summary, "run_dir": run_dir, "diagnostics": diagnostics}


# -- reading a run back -------------------------------------------------------


def load_run(run_dir):
    """The file set of one run, parsed. Raises on a missing piece."""
    def p(name):
        path = os.path.join(run_dir, name)
        if not os.path.exists(path):
            raise ScenarioError(f"{run_dir} misses {name}")
        return path

    with open(p("diagnostics.json")) as fh:
        diagnostics = json.load(fh)
    with open(p("summary.json")) as fh:
        summary = json.load(fh)
    net = load_network(p("nodes.csv"), p("edges.csv"))
    emis = diagnostics.get("emissions_params", "builtin")
    epar = load_params(None if emis == "builtin" else emis)
    return {
        "summary": summary,
        "diagnostics": diagnostics,
        "net": net,
        "epar": epar,
        "requests": read_request_log(p("requests.csv")),
        "traversals": read_traversals_csv(p("traversals.csv")),
        "df_log": read_df_csv(p("df.csv")),
    }


def replay_summary(run_dir):
    """Summary recomputed purely from the files in run_dir."""
    run = load_run(run_dir)
    d = run["diagnostics"]
    return summary_metrics(
        run["requests"], run["traversals"], run["df_log"], run["net"],
        run["epar"], fleet_size=d["fleet_size"], capacity=d["capacity"],
        seed=d["seed"], horizon_s=d["horizon_s"], step_s=d["step_s"])
