"""Command-line entry point: ``privmod <subcommand> ...``.

Exit codes: 0 on success, 1 on a runtime error, 2 on a usage error.
Every JSON output embeds a run manifest (subcommand, flags, seed, input
digests, version). Output paths are not part of the manifest, so a rerun
into another directory produces byte-identical files.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
import warnings
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .assignment import AssignmentError, costs_to_passengers, hungarian, redundant_assign_posteriors, solve_batch
from .continuous_sim import SimConfig, demand_from_trips, run
from .data_io import (
    DataFormatError,
    EmpiricalLocationSampler,
    build_sampler,
    dumps_stable,
    file_digest,
    hotspot_sampler,
    parse_trips,
    read_graph,
    synthetic_grid_city,
    synthetic_trips,
    write_graph,
    write_results,
)
from .privacy_mechanism import PlanarLaplace, posterior_over_vertices, radial_inverse_cdf, sample
from .road_graph import GraphError, RoadGraph, estimate_edge_weights, nearest_vertices

log = logging.getLogger("privmod")

WORKERS_ENV = "PRIVMOD_WORKERS"
ASSIGN_MODES = ("optimal", "private", "private-redundant")
SIM_MODES = {"non-private": "non-private", "private": "non-redundant", "non-redundant": "non-redundant",
             "private-redundant": "redundant", "redundant": "redundant"}
# flags that only say where to write, so they stay out of the manifest
_OUTPUT_FLAGS = {"out", "events", "verbose", "func"}
# flags that name input files; the manifest records their digests instead
_INPUT_FLAGS = {"graph", "nodes", "edges", "trips", "demand"}


class UsageError(Exception):
    pass


# -- argument helpers -------------------------------------------------------


def _floats(text, n=None, name="value"):
    try:
        vals = [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"{name}: expected comma-separated numbers, got {text!r}") from None
    if n is not None and len(vals) != n:
        raise argparse.ArgumentTypeError(f"{name}: expected {n} comma-separated numbers, got {text!r}")
    return vals


def _grid_spec(text):
    n, m, spacing, speed = _floats(text, 4, "--grid")
    if n != int(n) or m != int(m):
        raise argparse.ArgumentTypeError("--grid: rows and columns must be integers")
    return int(n), int(m), spacing, speed


def _float_list(text):
    return _floats(text, name="list")


def _int_list(text):
    vals = _floats(text, name="list")
    if any(v != int(v) for v in vals):
        raise argparse.ArgumentTypeError(f"expected integers, got {text!r}")
    return [int(v) for v in vals]


def manifest(args, inputs: dict[str, Path]) -> dict:
    flags = {k: v for k, v in sorted(vars(args).items()) if k not in _OUTPUT_FLAGS | _INPUT_FLAGS}
    flags = json.loads(json.dumps(flags, default=str))
    return {
        "subcommand": args.subcommand,
        "flags": flags,
        "seed": getattr(args, "seed", None),
        "inputs": {role: file_digest(p) for role, p in sorted(inputs.items())},
        "version": __version__,
    }


def _load_graph(args, inputs) -> RoadGraph:
    if getattr(args, "grid", None):
        return synthetic_grid_city(*args.grid)
    if not getattr(args, "graph", None):
        raise UsageError("give --graph DIR (with nodes.csv and edges.csv) or --grid n,m,spacing,speed")
    d = Path(args.graph)
    inputs["nodes"], inputs["edges"] = d / "nodes.csv", d / "edges.csv"
    g, _ = read_graph(inputs["nodes"], inputs["edges"])
    return g


def _write_json(path, obj):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dumps_stable(obj))


# -- build-graph ------------------------------------------------------------


def cmd_build_graph(args) -> int:
    inputs = {}
    if args.grid:
        g = synthetic_grid_city(*args.grid)
        has_w = True
    elif args.nodes and args.edges:
        inputs["nodes"], inputs["edges"] = Path(args.nodes), Path(args.edges)
        g, has_w = read_graph(args.nodes, args.edges, default_speed=args.default_speed)
    else:
        raise UsageError("build-graph needs --grid or both --nodes and --edges")
    if args.trips:
        inputs["trips"] = Path(args.trips)
        trips = parse_trips(args.trips)
        g = estimate_edge_weights(g, trips, default_speed=args.default_speed, snap_radius=args.snap_radius)
    elif not has_w:
        log.info("no weight column and no trips: using length / %.3f m/s", args.default_speed)
    nodes, edges = write_graph(g, args.out)
    _write_json(Path(args.out) / "manifest.json", manifest(args, inputs))
    print(f"wrote {nodes} and {edges} ({g.n_vertices} vertices, {g.n_edges} edges)")
    return 0


# -- assign -----------------------------------------------------------------


def _vertex_choice(spec: str, g: RoadGraph, rng, sampler: EmpiricalLocationSampler | None, what: str):
    """``"3,5,8"`` lists vertex ids; ``"random:N"`` samples N vertices."""
    if spec.startswith("random:"):
        try:
            n = int(spec.split(":", 1)[1])
        except ValueError:
            raise UsageError(f"--{what}: bad count in {spec!r}") from None
        sampler = sampler or EmpiricalLocationSampler.uniform(g.n_vertices)
        return [int(v) for v in sampler.sample(rng, size=n)]
    try:
        ids = [int(x) for x in spec.split(",") if x.strip()]
    except ValueError:
        raise UsageError(f"--{what}: expected vertex ids or random:N, got {spec!r}") from None
    bad = [i for i in ids if not 0 <= i < g.n_vertices]
    if bad:
        raise ValueError(f"--{what}: vertex id(s) {bad} outside 0..{g.n_vertices - 1}")
    if not ids:
        raise UsageError(f"--{what}: no vertices given")
    return ids


def assign_instance(g: RoadGraph, vehicles, passengers, mode: str, eps: float, p_min: float, D: int,
                    rng: np.random.Generator) -> dict:
    """One batch: obfuscate vehicles, assign, and measure waiting from true origins."""
    F = costs_to_passengers(g, passengers)
    true_cost = F[np.asarray(vehicles)]
    if mode == "optimal":
        a = hungarian(true_cost)
        expected = [float(true_cost[i, j]) for i, j in a.pairs]
        reported = [tuple(map(float, g.xy[v])) for v in vehicles]
    else:
        m = PlanarLaplace(eps)
        reported = [tuple(map(float, sample(m, g.xy[v], rng))) for v in vehicles]
        posts = [posterior_over_vertices(g, m, r, p_min) for r in reported]
        if mode == "private-redundant":
            a = redundant_assign_posteriors(posts, F, D)
            expected = list(a.expected_waiting)
        else:
            C = np.vstack([p.probs @ F[p.vertices] for p in posts])
            a = solve_batch(C)
            expected = [float(C[i, j]) for i, j in a.pairs]
    groups = a.groups(len(passengers))
    realized = [float(min(true_cost[i, j] for i in z)) if z else None for j, z in enumerate(groups)]
    served = [w for w in realized if w is not None]
    return {
        "mode": mode,
        "pairs": [list(p) for p in a.pairs],
        "expected_waiting_s": expected,
        "realized_waiting_s": realized,
        "realized_mean_s": float(np.mean(served)) if served else None,
        "reported_points": [list(r) for r in reported],
        "rounds": a.rounds,
    }


def cmd_assign(args) -> int:
    inputs = {}
    g = _load_graph(args, inputs)
    rng = np.random.default_rng(args.seed)
    veh_sampler = pas_sampler = None
    if args.trips:
        inputs["trips"] = Path(args.trips)
        trips = parse_trips(args.trips)
        veh_sampler = build_sampler(trips, g, "dropoff")
        pas_sampler = build_sampler(trips, g, "pickup")
    vehicles = _vertex_choice(args.vehicles, g, rng, veh_sampler, "vehicles")
    passengers = _vertex_choice(args.passengers, g, rng, pas_sampler, "passengers")
    report = assign_instance(g, vehicles, passengers, args.mode, args.epsilon, args.pmin, args.redundancy, rng)
    report["vehicles"], report["passengers"] = vehicles, passengers
    report["manifest"] = manifest(args, inputs)
    text = dumps_stable(report)
    if args.out:
        _write_json(args.out, report)
    sys.stdout.write(text)
    return 0


# -- simulate ---------------------------------------------------------------


def sim_config(args) -> SimConfig:
    return SimConfig(
        batch_seconds=args.batch_seconds,
        max_wait_seconds=args.max_wait_minutes * 60.0,
        fleet_multiplier=args.fleet_multiplier,
        fleet_cap=args.fleet_cap,
        min_fleet=args.min_fleet,
        eps=args.epsilon,
        p_min=args.pmin,
        redundancy_mode=SIM_MODES[args.mode],
        D_max=args.D_max,
        reserve_fraction=args.reserve_fraction,
        forecast_batches=args.forecast_batches,
        occupancy_window_seconds=args.occupancy_window_minutes * 60.0,
        seed=args.seed,
    )


def synthetic_demand(g: RoadGraph, rate: float, hours: float, seed: int, hotspots: int, scale: float):
    """Demand and drop-off sampler for a synthetic city (own stream, independent of the run seed)."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5EED]))
    if hotspots > 0:
        ps = hotspot_sampler(g, hotspots, scale, rng)
        ds = hotspot_sampler(g, hotspots, scale, rng)
    else:
        ps = ds = EmpiricalLocationSampler.uniform(g.n_vertices)
    trips = synthetic_trips(g, rate, hours, rng, pickup_sampler=ps, dropoff_sampler=ds)
    return demand_from_trips(trips, g), ds


def cmd_simulate(args) -> int:
    inputs = {}
    g = _load_graph(args, inputs)
    config = sim_config(args)
    if args.demand:
        inputs["demand"] = Path(args.demand)
        trips = parse_trips(args.demand)
        demand = demand_from_trips(trips, g, args.snap_radius)
        dropoff_sampler = build_sampler(trips, g, "dropoff") if trips else None
    elif args.synthetic_demand:
        rate, hours = args.synthetic_demand
        scale = args.hotspot_scale or float(np.ptp(g.xy[:, 0]) + np.ptp(g.xy[:, 1])) / 12
        demand, dropoff_sampler = synthetic_demand(g, rate, hours, args.demand_seed, args.hotspots, scale)
    else:
        raise UsageError("simulate needs --demand trips.csv or --synthetic-demand rate,hours")
    events = [] if args.events else None
    metrics = run(config, g, demand, dropoff_sampler=dropoff_sampler, events=events)
    paths = write_results(metrics, config, args.out, manifest=manifest(args, inputs), events=events)
    s = metrics.summary()
    mean = "n/a" if s["waiting_mean_s"] is None else f"{s['waiting_mean_s']:.3f} s"
    print(f"{config.redundancy_mode}: {s['n_served']}/{s['n_requests']} served, mean waiting {mean}, "
          f"drop rate {s['drop_rate']:.6f}")
    for p in paths:
        print(f"wrote {p}")
    return 0


# -- sweep ------------------------------------------------------------------


def sweep_repetition(g: RoadGraph, n_vehicles: int, n_passengers: int, epsilons, Ds, p_min: float, seed: int,
                     index: int, veh_sampler=None, pas_sampler=None) -> list[dict]:
    """One random instance evaluated at every (eps, D).

    Vehicle and passenger locations and the unit noise draws are shared across
    the grid, so noise radii scale exactly as 1 / eps between cells.
    """
    rng = np.random.default_rng(np.random.SeedSequence([seed, index]))
    veh_sampler = veh_sampler or EmpiricalLocationSampler.uniform(g.n_vertices)
    pas_sampler = pas_sampler or veh_sampler
    vehicles = veh_sampler.sample(rng, size=n_vehicles)
    passengers = pas_sampler.sample(rng, size=n_passengers)
    theta = rng.uniform(0.0, 2 * np.pi, n_vehicles)
    u = rng.random(n_vehicles)
    F = costs_to_passengers(g, passengers)
    true_cost = F[vehicles]
    opt = hungarian(true_cost)
    opt_mean = float(np.mean([true_cost[i, j] for i, j in opt.pairs]))
    rows = []
    for eps in epsilons:
        m = PlanarLaplace(eps)
        r = radial_inverse_cdf(u, eps)
        pts = g.xy[vehicles] + np.column_stack((r * np.cos(theta), r * np.sin(theta)))
        posts = [posterior_over_vertices(g, m, p, p_min) for p in pts]
        for D in Ds:
            a = redundant_assign_posteriors(posts, F, D) if D > 1 else solve_batch(
                np.vstack([p.probs @ F[p.vertices] for p in posts]))
            waits = [min(true_cost[i, j] for i in z) for j, z in enumerate(a.groups(n_passengers)) if z]
            rows.append({"repetition": index, "epsilon": eps, "D": D, "mean_waiting_s": float(np.mean(waits)),
                         "optimal_mean_waiting_s": opt_mean})
    return rows


def _sweep_task(payload):
    g, kw, index = payload
    return sweep_repetition(g, index=index, **kw)


def sweep_table(g: RoadGraph, n_vehicles: int, n_passengers: int, epsilons, Ds, repetitions: int, seed: int,
                p_min: float = 1e-6, workers: int = 1, veh_sampler=None, pas_sampler=None):
    """Per-repetition rows and the aggregated table (mean, stderr, % increase over optimal)."""
    kw = dict(n_vehicles=n_vehicles, n_passengers=n_passengers, epsilons=list(epsilons), Ds=list(Ds),
              p_min=p_min, seed=seed, veh_sampler=veh_sampler, pas_sampler=pas_sampler)
    payloads = [(g, kw, i) for i in range(repetitions)]
    if workers > 1:
        with ProcessPoolExecutor(workers) as ex:
            per_rep = list(ex.map(_sweep_task, payloads))
    else:
        per_rep = [_sweep_task(p) for p in payloads]
    rows = [r for rep in per_rep for r in rep]
    table = []
    for eps in epsilons:
        for D in Ds:
            cell = [r for r in rows if r["epsilon"] == eps and r["D"] == D]
            w = np.array([r["mean_waiting_s"] for r in cell])
            o = np.array([r["optimal_mean_waiting_s"] for r in cell])
            inc = 100.0 * (w - o) / o
            se = lambda x: float(x.std(ddof=1) / np.sqrt(len(x))) if len(x) > 1 else float("nan")
            table.append({"epsilon": eps, "D": D, "repetitions": len(cell),
                          "mean_waiting_s": float(w.mean()), "stderr_waiting_s": se(w),
                          "optimal_mean_waiting_s": float(o.mean()),
                          "increase_pct": float(inc.mean()), "stderr_increase_pct": se(inc)})
    return rows, table


SWEEP_FIELDS = ("epsilon", "D", "repetitions", "mean_waiting_s", "stderr_waiting_s", "optimal_mean_waiting_s",
                "increase_pct", "stderr_increase_pct")


def cmd_sweep(args) -> int:
    inputs = {}
    g = _load_graph(args, inputs)
    veh_sampler = pas_sampler = None
    if args.trips:
        inputs["trips"] = Path(args.trips)
        trips = parse_trips(args.trips)
        veh_sampler, pas_sampler = build_sampler(trips, g, "dropoff"), build_sampler(trips, g, "pickup")
    workers = int(os.environ.get(WORKERS_ENV, "1") or 1)
    _, table = sweep_table(g, args.vehicles, args.passengers, args.epsilons, args.D, args.repetitions, args.seed,
                           args.pmin, workers, veh_sampler, pas_sampler)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SWEEP_FIELDS)
    for row in table:
        w.writerow([row[k] if isinstance(row[k], int) else f"{row[k]:.6f}" for k in SWEEP_FIELDS])
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(buf.getvalue())
    _write_json(out.with_suffix(".manifest.json"), manifest(args, inputs))
    sys.stdout.write(buf.getvalue())
    return 0


# -- sample -----------------------------------------------------------------


def cmd_sample(args) -> int:
    rng = np.random.default_rng(args.seed)
    pts = sample(PlanarLaplace(args.epsilon), args.center, rng, size=args.n)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("x", "y", "radius"))
    r = np.hypot(pts[:, 0] - args.center[0], pts[:, 1] - args.center[1])
    for (x, y), rr in zip(pts, r):
        w.writerow((f"{x:.6f}", f"{y:.6f}", f"{rr:.6f}"))
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(buf.getvalue())
        _write_json(out.with_suffix(".manifest.json"), manifest(args, {}))
    summary = {"n": args.n, "epsilon": args.epsilon, "mean_radius_m": float(r.mean()),
               "expected_mean_radius_m": 2.0 / args.epsilon, "manifest": manifest(args, {})}
    sys.stdout.write(dumps_stable(summary))
    return 0


# -- parser -----------------------------------------------------------------


def _add_graph_source(p):
    src = p.add_mutually_exclusive_group()
    src.add_argument("--graph", help="directory holding nodes.csv and edges.csv")
    src.add_argument("--grid", type=_grid_spec, metavar="N,M,SPACING,SPEED", help="synthetic grid city")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="privmod", description="Privacy-preserving vehicle assignment.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="subcommand", required=True)

    p = sub.add_parser("build-graph", help="write nodes.csv/edges.csv from a grid or CSVs")
    p.add_argument("--grid", type=_grid_spec, metavar="N,M,SPACING,SPEED")
    p.add_argument("--nodes")
    p.add_argument("--edges")
    p.add_argument("--trips", help="trips CSV used to estimate edge travel times")
    p.add_argument("--default-speed", type=float, default=5.0, help="m/s for edges without data")
    p.add_argument("--snap-radius", type=float, default=500.0, help="m; trips farther from the graph are skipped")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_build_graph)

    p = sub.add_parser("assign", help="solve one batch assignment")
    _add_graph_source(p)
    p.add_argument("--vehicles", required=True, help="vertex ids (1,2,3) or random:N")
    p.add_argument("--passengers", required=True, help="vertex ids or random:M")
    p.add_argument("--trips", help="trips CSV whose drop-offs/pick-ups drive random:N sampling")
    p.add_argument("--mode", choices=ASSIGN_MODES, default="private")
    p.add_argument("--epsilon", type=float, default=0.02, help="inverse noise scale, 1/m")
    p.add_argument("--pmin", type=float, default=1e-6)
    p.add_argument("--redundancy", type=int, default=1, metavar="D")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="also write the report to this JSON file")
    p.set_defaults(func=cmd_assign)

    p = sub.add_parser("simulate", help="day-long continuous dispatch simulation")
    _add_graph_source(p)
    p.add_argument("--demand", help="trips CSV")
    p.add_argument("--synthetic-demand", type=lambda s: _floats(s, 2, "--synthetic-demand"),
                   metavar="RATE_PER_HOUR,HOURS")
    p.add_argument("--hotspots", type=int, default=4, help="synthetic demand hotspots (0: uniform)")
    p.add_argument("--hotspot-scale", type=float, default=None, help="m; default scales with the city")
    p.add_argument("--demand-seed", type=int, default=0)
    p.add_argument("--snap-radius", type=float, default=500.0)
    p.add_argument("--mode", choices=sorted(SIM_MODES), default="non-redundant")
    p.add_argument("--batch-seconds", type=float, default=20.0)
    p.add_argument("--max-wait-minutes", type=float, default=20.0)
    p.add_argument("--fleet-multiplier", type=float, default=1.56)
    p.add_argument("--fleet-cap", type=int, default=6000)
    p.add_argument("--min-fleet", type=int, default=1)
    p.add_argument("--epsilon", type=float, default=0.02)
    p.add_argument("--pmin", type=float, default=1e-6)
    p.add_argument("--D-max", type=int, default=3)
    p.add_argument("--reserve-fraction", type=float, default=1.0)
    p.add_argument("--forecast-batches", type=int, default=15)
    p.add_argument("--occupancy-window-minutes", type=float, default=30.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--events", action="store_true", help="also write the operator-visible event log")
    p.add_argument("--out", required=True, help="output path prefix")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("sweep", help="batch waiting time over an (epsilon, D) grid")
    _add_graph_source(p)
    p.add_argument("--trips")
    p.add_argument("--vehicles", type=int, default=500)
    p.add_argument("--passengers", type=int, default=250)
    p.add_argument("--epsilons", type=_float_list, default=[0.005, 0.01, 0.02, 0.05, 0.1])
    p.add_argument("--D", type=_int_list, default=[1, 2, 3, 4])
    p.add_argument("--repetitions", type=int, default=20)
    p.add_argument("--pmin", type=float, default=1e-6)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output CSV")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("sample", help="draw planar Laplace samples")
    p.add_argument("--epsilon", type=float, required=True)
    p.add_argument("--n", type=int, default=1000)
    p.add_argument("--center", type=lambda s: _floats(s, 2, "--center"), default=[0.0, 0.0])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="CSV of samples")
    p.set_defaults(func=cmd_sample)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("default")
            return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"privmod: error: {exc}", file=sys.stderr)
        return 2
    except (GraphError, DataFormatError, AssignmentError, ValueError, OSError) as exc:
        print(f"privmod: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
