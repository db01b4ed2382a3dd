"""File formats, synthetic instances and empirical location sampling."""
from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .road_graph import DEFAULT_SPEED, RoadGraph, TripRecord, nearest_vertex

log = logging.getLogger(__name__)

TRIP_HEADER = ("pickup_time", "dropoff_time", "pickup_x", "pickup_y", "dropoff_x", "dropoff_y")
PASSENGER_HEADER = ("passenger_id", "request_time", "pickup_time", "waiting_s", "mode")


class DataFormatError(ValueError):
    """Input file is unreadable or lacks the expected header."""


class ParsedTrips(list):
    """List of trip records that also remembers how many rows were skipped."""

    def __init__(self, records=(), skipped=0, skipped_rows=()):
        super().__init__(records)
        self.skipped = skipped
        self.skipped_rows = list(skipped_rows)


def _open_text(path):
    try:
        return open(path, newline="", encoding="utf-8", errors="replace")
    except OSError as exc:
        raise DataFormatError(f"cannot read {path}: {exc}") from exc


def _header_index(header, required, path):
    cols = [h.strip() for h in header]
    missing = [c for c in required if c not in cols]
    if missing:
        raise DataFormatError(f"{path}: header row 1 is missing column(s) {', '.join(missing)}; got {cols}")
    return {c: cols.index(c) for c in cols}


def _int_seconds(text: str) -> int:
    value = float(text)
    if not math.isfinite(value) or value != int(value):
        raise ValueError(f"not an integer epoch time: {text!r}")
    return int(value)


def _finite(text: str) -> float:
    value = float(text)
    if not math.isfinite(value):
        raise ValueError(f"non-finite coordinate: {text!r}")
    return value


def parse_trips(path) -> ParsedTrips:
    """Read a trips CSV into time-sorted :class:`TripRecord` objects.

    Rows that fail to parse (wrong arity, non-numeric fields, non-positive
    duration) are skipped and counted in ``result.skipped``.
    """
    with _open_text(path) as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataFormatError(f"{path}: empty file, expected header {','.join(TRIP_HEADER)}") from None
        except csv.Error as exc:
            raise DataFormatError(f"{path}: row 1: {exc}") from exc
        idx = _header_index(header, TRIP_HEADER, path)
        records, skipped = [], []
        row_no = 1
        while True:
            try:
                row = next(reader)
            except StopIteration:
                break
            except csv.Error as exc:
                row_no += 1
                skipped.append((row_no, str(exc)))
                continue
            row_no += 1
            if not row or all(not cell.strip() for cell in row):
                continue
            try:
                if len(row) != len(header):
                    raise ValueError(f"expected {len(header)} fields, got {len(row)}")
                rec = TripRecord(
                    _int_seconds(row[idx["pickup_time"]]),
                    _int_seconds(row[idx["dropoff_time"]]),
                    (_finite(row[idx["pickup_x"]]), _finite(row[idx["pickup_y"]])),
                    (_finite(row[idx["dropoff_x"]]), _finite(row[idx["dropoff_y"]])),
                )
            except ValueError as exc:
                skipped.append((row_no, str(exc)))
                continue
            records.append(rec)
    if skipped:
        log.warning("%s: skipped %d malformed row(s), first at row %d: %s", path, len(skipped), *skipped[0])
    records.sort(key=lambda r: (r.pickup_time, r.dropoff_time))
    return ParsedTrips(records, len(skipped), skipped)


def write_trips(trips: Iterable[TripRecord], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRIP_HEADER)
        for t in trips:
            w.writerow([t.pickup_time, t.dropoff_time, repr(float(t.pickup[0])), repr(float(t.pickup[1])),
                        repr(float(t.dropoff[0])), repr(float(t.dropoff[1]))])


# -- graph files ------------------------------------------------------------


def read_graph(nodes_path, edges_path, *, default_speed: float = DEFAULT_SPEED, check_connected=True):
    """Load ``nodes.csv`` / ``edges.csv``.

    Returns ``(graph, has_weights)``. Without a ``weight`` column every edge
    gets ``length / default_speed``.
    """
    with _open_text(nodes_path) as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise DataFormatError(f"{nodes_path}: empty file, expected header id,x,y")
    idx = _header_index(rows[0], ("id", "x", "y"), nodes_path)
    ids, xy = [], []
    for n, row in enumerate(rows[1:], start=2):
        try:
            ids.append(int(row[idx["id"]]))
            xy.append((_finite(row[idx["x"]]), _finite(row[idx["y"]])))
        except (ValueError, IndexError) as exc:
            raise DataFormatError(f"{nodes_path}: row {n}: {exc}") from exc
    order = np.argsort(ids)
    if sorted(ids) != list(range(len(ids))):
        raise DataFormatError(f"{nodes_path}: vertex ids must be dense 0..{len(ids) - 1}")
    xy = np.asarray(xy, dtype=float).reshape(-1, 2)[order]

    with _open_text(edges_path) as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise DataFormatError(f"{edges_path}: empty file, expected header src,dst,length[,weight]")
    idx = _header_index(rows[0], ("src", "dst", "length"), edges_path)
    has_weights = "weight" in idx
    src, dst, length, weight = [], [], [], []
    for n, row in enumerate(rows[1:], start=2):
        try:
            src.append(int(row[idx["src"]]))
            dst.append(int(row[idx["dst"]]))
            length.append(_finite(row[idx["length"]]))
            if has_weights and row[idx["weight"]].strip():
                weight.append(_finite(row[idx["weight"]]))
            else:
                weight.append(length[-1] / default_speed)
        except (ValueError, IndexError) as exc:
            raise DataFormatError(f"{edges_path}: row {n}: {exc}") from exc
    g = RoadGraph(xy, src, dst, length, weight, check_connected=check_connected)
    return g, has_weights


def write_graph(g: RoadGraph, directory) -> tuple[Path, Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    nodes, edges = directory / "nodes.csv", directory / "edges.csv"
    with open(nodes, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("id", "x", "y"))
        for i, (x, y) in enumerate(g.xy):
            w.writerow((i, f"{x:.6f}", f"{y:.6f}"))
    with open(edges, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("src", "dst", "length", "weight"))
        for s, d, ln, wt in zip(g.src, g.dst, g.length, g.weight):
            w.writerow((int(s), int(d), f"{ln:.6f}", f"{wt:.6f}"))
    return nodes, edges


def synthetic_grid_city(n: int, m: int, spacing: float, speed: float) -> RoadGraph:
    """``n x m`` Manhattan-style grid with two-way streets of uniform speed."""
    if n < 2 or m < 2:
        raise ValueError("grid needs at least 2 rows and 2 columns")
    if spacing <= 0 or speed <= 0:
        raise ValueError("spacing and speed must be positive")
    rr, cc = np.meshgrid(np.arange(n), np.arange(m), indexing="ij")
    xy = np.column_stack((cc.ravel() * spacing, rr.ravel() * spacing)).astype(float)
    vid = np.arange(n * m).reshape(n, m)
    horiz = np.column_stack((vid[:, :-1].ravel(), vid[:, 1:].ravel()))
    vert = np.column_stack((vid[:-1, :].ravel(), vid[1:, :].ravel()))
    und = np.vstack((horiz, vert))
    pairs = np.vstack((und, und[:, ::-1]))
    order = np.lexsort((pairs[:, 1], pairs[:, 0]))
    pairs = pairs[order]
    length = np.full(len(pairs), float(spacing))
    return RoadGraph(xy, pairs[:, 0], pairs[:, 1], length, length / speed)


# -- sampling ---------------------------------------------------------------


@dataclass(frozen=True)
class EmpiricalLocationSampler:
    """Categorical distribution over vertex ids."""

    vertices: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        if len(w) == 0 or (w < 0).any() or not w.sum() > 0:
            raise ValueError("sampler needs non-negative weights with a positive sum")
        object.__setattr__(self, "vertices", np.asarray(self.vertices, dtype=np.int64))
        object.__setattr__(self, "weights", w / w.sum())

    def sample(self, rng: np.random.Generator, size=None):
        idx = rng.choice(len(self.vertices), size=size, p=self.weights)
        return self.vertices[idx] if size is not None else int(self.vertices[idx])

    @classmethod
    def uniform(cls, n_vertices: int) -> "EmpiricalLocationSampler":
        return cls(np.arange(n_vertices), np.ones(n_vertices))


def build_sampler(trips: Sequence[TripRecord], g: RoadGraph, which: str) -> EmpiricalLocationSampler:
    """Histogram of nearest vertices of the trips' pickups or dropoffs."""
    if which not in ("pickup", "dropoff"):
        raise ValueError("which must be 'pickup' or 'dropoff'")
    if not trips:
        raise ValueError("cannot build a location sampler from zero trips")
    pts = [getattr(t, which) for t in trips]
    verts = np.array([nearest_vertex(g, p) for p in pts])
    ids, counts = np.unique(verts, return_counts=True)
    return EmpiricalLocationSampler(ids, counts.astype(float))


def hotspot_sampler(g: RoadGraph, n_spots: int, scale: float, rng: np.random.Generator, base: float = 0.2):
    """Sampler mixing a uniform floor with Gaussian hotspots (synthetic demand)."""
    centers = g.xy[rng.choice(g.n_vertices, size=n_spots, replace=False)]
    w = np.full(g.n_vertices, base / g.n_vertices)
    for c in centers:
        d2 = np.sum((g.xy - c) ** 2, axis=1)
        k = np.exp(-0.5 * d2 / scale**2)
        w += (1 - base) / n_spots * k / k.sum()
    return EmpiricalLocationSampler(np.arange(g.n_vertices), w)


def daily_profile(hour):
    """Relative demand intensity over the day, with morning and evening peaks."""
    h = np.asarray(hour, dtype=float) % 24
    return (0.25 + 0.9 * np.exp(-0.5 * ((h - 8.5) / 1.5) ** 2) + 0.5 * np.exp(-0.5 * ((h - 13) / 1.2) ** 2)
            + 1.0 * np.exp(-0.5 * ((h - 18) / 2.0) ** 2))


def synthetic_trips(g: RoadGraph, rate_per_hour: float, hours: float, rng: np.random.Generator, *,
                    pickup_sampler=None, dropoff_sampler=None, start: int = 0, profile=True,
                    min_trip_seconds: float = 60.0) -> list[TripRecord]:
    """Poisson trip records over ``hours``; durations are shortest travel times.

    With ``profile`` the intensity follows :func:`daily_profile` scaled so that
    ``rate_per_hour`` is the daily average.
    """
    pickup_sampler = pickup_sampler or EmpiricalLocationSampler.uniform(g.n_vertices)
    dropoff_sampler = dropoff_sampler or pickup_sampler
    horizon = hours * 3600.0
    if profile:
        grid = np.linspace(0, 24, 24 * 60 + 1)
        peak = daily_profile(grid).max()
        mean = daily_profile(grid).mean()
        lam_max = rate_per_hour * peak / mean / 3600.0
    else:
        lam_max = rate_per_hour / 3600.0
    n = rng.poisson(lam_max * horizon)
    times = np.sort(rng.uniform(0.0, horizon, n))
    if profile:
        keep = rng.random(n) < daily_profile(times / 3600.0) / peak
        times = times[keep]
    times = np.floor(times).astype(np.int64) + int(start)
    trips = []
    for t in times:
        for _ in range(100):
            a, b = pickup_sampler.sample(rng), dropoff_sampler.sample(rng)
            dur = g.costs_from(a)[b]
            if a != b and dur >= min_trip_seconds:
                break
        trips.append(TripRecord(int(t), int(t) + max(1, int(round(dur))), tuple(g.xy[a]), tuple(g.xy[b])))
    return trips


# -- results ----------------------------------------------------------------


def _fmt(obj, indent=0) -> str:
    pad = "  " * (indent + 1)
    end = "  " * indent
    if obj is None or isinstance(obj, bool):
        return json.dumps(obj)
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        return "null" if not math.isfinite(x) else f"{x:.6f}"
    if isinstance(obj, str):
        return json.dumps(obj)
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = [f"{pad}{json.dumps(str(k))}: {_fmt(obj[k], indent + 1)}" for k in sorted(obj, key=str)]
        return "{\n" + ",\n".join(items) + "\n" + end + "}"
    if isinstance(obj, (list, tuple, np.ndarray)):
        if len(obj) == 0:
            return "[]"
        if all(isinstance(v, (int, float, np.integer, np.floating)) or v is None for v in obj):
            return "[" + ", ".join(_fmt(v) for v in obj) + "]"
        return "[\n" + ",\n".join(pad + _fmt(v, indent + 1) for v in obj) + "\n" + end + "]"
    if hasattr(obj, "to_dict"):
        return _fmt(obj.to_dict(), indent)
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def dumps_stable(obj) -> str:
    """JSON with sorted keys and fixed 6-decimal floats (byte-stable)."""
    return _fmt(obj) + "\n"


def write_results(metrics, config, path_prefix, manifest=None, events=None) -> list[Path]:
    """Write ``<prefix>.json`` (config, metrics, manifest) and ``<prefix>_passengers.csv``.

    ``events`` (optional) goes to ``<prefix>_events.csv``.
    """
    prefix = Path(path_prefix)
    try:
        prefix.parent.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {prefix.parent}: {exc}") from exc
    summary = {"config": config.to_dict() if hasattr(config, "to_dict") else dict(config),
               "metrics": metrics.summary()}
    if manifest is not None:
        summary["manifest"] = manifest
    json_path = prefix.with_name(prefix.name + ".json")
    csv_path = prefix.with_name(prefix.name + "_passengers.csv")
    json_path.write_text(dumps_stable(summary))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(PASSENGER_HEADER)
    for rec in metrics.passengers:
        w.writerow((rec.passenger_id, f"{rec.request_time:.6f}",
                    "" if rec.pickup_time is None else f"{rec.pickup_time:.6f}",
                    "" if rec.waiting_s is None else f"{rec.waiting_s:.6f}", rec.mode))
    csv_path.write_text(buf.getvalue())
    out = [json_path, csv_path]
    if events is not None:
        ev_path = prefix.with_name(prefix.name + "_events.csv")
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        fields = ["time", "kind", "vehicle", "passenger", "reported_x", "reported_y", "reported_available_at"]
        w.writerow(fields)
        for ev in events:
            w.writerow(["" if ev.get(f) is None else (f"{ev[f]:.6f}" if isinstance(ev[f], float) else ev[f])
                        for f in fields])
        ev_path.write_text(buf.getvalue())
        out.append(ev_path)
    return out


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()
