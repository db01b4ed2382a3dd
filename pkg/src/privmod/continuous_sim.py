"""Day-long batched dispatch with privacy-consistent availability reports.

Every vehicle carries two states. The *true* one (vertex, time it is
physically free) drives motion and waiting times. The *reported* one
(obfuscated point, announced availability time) is all the operator, and
therefore the assignment step, ever sees.

Times inside the loop are integer milliseconds; inputs and outputs are
seconds.
"""
from __future__ import annotations

import math
from collections import deque
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from .assignment import (
    AssignmentError,
    costs_to_passengers,
    expected_cost_matrix,
    hungarian,
    redundant_assign_posteriors,
)
from .privacy_mechanism import PlanarLaplace, VertexPosterior, posterior_over_vertices, sample
from .road_graph import RoadGraph, nearest_vertex

MODES = ("non-private", "non-redundant", "redundant")
MS = 1000


def _ms(seconds) -> int:
    return int(round(float(seconds) * MS))


@dataclass
class VehicleState:
    id: int
    true_vertex: int
    reported_point: tuple[float, float]
    reported_available_at: int  # ms
    truly_available_at: int  # ms
    status: str = "idle"  # idle | en-route | fake-trip
    posterior: VertexPosterior | None = field(default=None, repr=False)

    def report(self) -> "ReportedVehicle":
        return ReportedVehicle(self.id, self.reported_point, self.reported_available_at)


@dataclass(frozen=True)
class ReportedVehicle:
    """Operator-side view of a vehicle: nothing about its true state."""

    id: int
    reported_point: tuple[float, float]
    reported_available_at: int


@dataclass(frozen=True)
class PassengerRequest:
    request_time: float  # s
    pickup_vertex: int
    dropoff_vertex: int
    id: int = 0
    recorded_duration: float | None = None  # s, ride length in the source data

    def operator_view(self) -> "OperatorRequest":
        return OperatorRequest(self.id, self.request_time, self.pickup_vertex)


@dataclass(frozen=True)
class OperatorRequest:
    id: int
    request_time: float
    pickup_vertex: int


@dataclass
class SimConfig:
    batch_seconds: float = 20.0
    max_wait_seconds: float = 1200.0
    fleet_multiplier: float = 1.56
    fleet_cap: int = 6000
    min_fleet: int = 1
    eps: float = 0.02
    p_min: float = 1e-6
    redundancy_mode: str = "non-redundant"
    D_max: int = 3
    reserve_fraction: float = 1.0
    forecast_batches: int = 15
    occupancy_window_seconds: float = 1800.0
    seed: int = 0

    def __post_init__(self):
        if self.redundancy_mode not in MODES:
            raise ValueError(f"redundancy_mode must be one of {MODES}, got {self.redundancy_mode!r}")
        positive = ("batch_seconds", "max_wait_seconds", "fleet_multiplier", "fleet_cap", "D_max",
                    "forecast_batches", "occupancy_window_seconds")
        for name in positive:
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.redundancy_mode != "non-private" and not self.eps > 0:
            raise ValueError("eps must be positive in private modes")
        if self.p_min < 0 or self.reserve_fraction < 0 or self.min_fleet < 0:
            raise ValueError("p_min, reserve_fraction and min_fleet must be non-negative")

    @property
    def private(self) -> bool:
        return self.redundancy_mode != "non-private"

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class PassengerRecord:
    passenger_id: int
    request_time: float
    pickup_time: float | None
    waiting_s: float | None
    mode: str
    status: str  # served | dropped | pending


@dataclass
class Metrics:
    """Waiting-time statistics measured against true pickups."""

    passengers: list[PassengerRecord]
    backlog_s: np.ndarray = field(default_factory=lambda: np.empty(0))
    fleet_sizes: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int64))
    mode: str = ""
    histogram_bin_s: float = 60.0

    @property
    def waiting(self) -> np.ndarray:
        return np.array([p.waiting_s for p in self.passengers if p.status == "served"], dtype=float)

    def _count(self, status):
        return sum(p.status == status for p in self.passengers)

    @property
    def n_total(self) -> int:
        return len(self.passengers)

    @property
    def n_served(self) -> int:
        return self._count("served")

    @property
    def n_dropped(self) -> int:
        return self._count("dropped")

    @property
    def n_pending(self) -> int:
        return self._count("pending")

    @property
    def drop_rate(self) -> float:
        return self.n_dropped / self.n_total if self.n_total else 0.0

    @property
    def mean(self):
        w = self.waiting
        return float(w.mean()) if len(w) else None

    def summary(self) -> dict:
        w = self.waiting
        has = len(w) > 0
        q = np.percentile(w, [25, 50, 75]) if has else [None] * 3
        if has:
            edges = np.arange(0.0, w.max() + self.histogram_bin_s, self.histogram_bin_s)
            if len(edges) < 2:
                edges = np.array([0.0, self.histogram_bin_s])
            counts, edges = np.histogram(w, bins=edges)
            hist = {"bin_edges_s": edges.tolist(), "counts": counts.tolist()}
        else:
            hist = {"bin_edges_s": [], "counts": []}
        b = self.backlog_s
        return {
            "mode": self.mode,
            "n_requests": self.n_total,
            "n_served": self.n_served,
            "n_dropped": self.n_dropped,
            "n_pending_at_end": self.n_pending,
            "drop_rate": self.drop_rate,
            "waiting_mean_s": float(w.mean()) if has else None,
            "waiting_std_s": float(w.std()) if has else None,
            "waiting_median_s": float(q[1]) if has else None,
            "waiting_p25_s": float(q[0]) if has else None,
            "waiting_p75_s": float(q[2]) if has else None,
            "waiting_histogram": hist,
            "backlog_mean_s": float(b.mean()) if len(b) else None,
            "backlog_stderr_s": float(b.std(ddof=1) / math.sqrt(len(b))) if len(b) > 1 else None,
            "n_rides_reported": int(len(b)),
            "fleet_size_max": int(self.fleet_sizes.max()) if len(self.fleet_sizes) else 0,
            "fleet_size_mean": float(self.fleet_sizes.mean()) if len(self.fleet_sizes) else 0.0,
        }


# -- per-ride protocol ------------------------------------------------------


def _project(g: RoadGraph, point) -> int:
    return nearest_vertex(g, point)


def reported_ride(v: VehicleState, pickup: int, true_dropoff: int, m: PlanarLaplace | None, g: RoadGraph,
                  rng: np.random.Generator):
    """Reported drop-off and the reported and true ride durations (s).

    The true duration runs from the true origin through the pickup to the true
    drop-off. The reported one runs from the projection of the reported
    origin through the pickup to the projection of a freshly sampled noisy
    drop-off. With ``m=None`` (no privacy) both coincide.
    """
    t_true = g.costs_from(v.true_vertex)[pickup] + g.costs_from(pickup)[true_dropoff]
    if m is None:
        return tuple(map(float, g.xy[true_dropoff])), float(t_true), float(t_true)
    reported = sample(m, g.xy[true_dropoff], rng)
    origin = _project(g, v.reported_point)
    t_rep = g.costs_from(origin)[pickup] + g.costs_from(pickup)[_project(g, reported)]
    return (float(reported[0]), float(reported[1])), float(t_rep), float(t_true)


@dataclass(frozen=True)
class RendezvousLeg:
    vehicle_id: int
    carries_passenger: bool
    destination_vertex: int  # true drop-off, or fake destination for the others
    reported_dropoff: tuple[float, float]
    reported_seconds: float  # t~ from the vehicle's own reported origin
    true_seconds: float  # true origin -> pickup -> destination_vertex


def _true_depart(v: VehicleState, now_ms: int) -> int:
    return max(now_ms, v.truly_available_at)


def redundant_rendezvous(vs: Sequence[VehicleState], pickup: int, true_dropoff: int, m: PlanarLaplace | None,
                         g: RoadGraph, rng: np.random.Generator, now_ms: int = 0) -> list[RendezvousLeg]:
    """Plan the legs of all vehicles sent to one passenger.

    The vehicle that truly reaches the pickup first (ties: lowest id)
    carries the passenger and samples the single shared noisy drop-off.
    Every other vehicle drives through the pickup to the vertex nearest that
    noisy drop-off. All report the same drop-off point; each reports its own
    duration from its own reported origin.
    """
    if not vs:
        raise ValueError("redundant_rendezvous needs at least one vehicle")
    to_pickup = g.costs_to(pickup)
    arrival = [(_true_depart(v, now_ms) + _ms(to_pickup[v.true_vertex]), v.id, k) for k, v in enumerate(vs)]
    winner = vs[min(arrival)[2]]
    after = g.costs_from(pickup)
    if m is None:
        shared = tuple(map(float, g.xy[true_dropoff]))
        fake_dest = true_dropoff
    else:
        pt = sample(m, g.xy[true_dropoff], rng)
        shared = (float(pt[0]), float(pt[1]))
        fake_dest = _project(g, shared)
    legs = []
    for v in vs:
        carries = v is winner
        dest = true_dropoff if carries else fake_dest
        t_true = to_pickup[v.true_vertex] + after[dest]
        if m is None:
            t_rep = t_true
        else:
            t_rep = to_pickup[_project(g, v.reported_point)] + after[fake_dest]
        legs.append(RendezvousLeg(v.id, carries, int(dest), shared, float(t_rep), float(t_true)))
    return legs


def choose_D(available: int, pending_requests: int, forecast_next: float, D_max: int,
             reserve_fraction: float = 1.0) -> int:
    """Vehicles per passenger, keeping a reserve for the next batch's demand."""
    reserve = math.ceil(reserve_fraction * forecast_next)
    d = (available - reserve) // max(pending_requests, 1)
    return int(min(max(d, 1), D_max))


def fleet_target(occupied: float, multiplier: float, cap: int, floor: int = 0) -> int:
    return int(min(cap, max(floor, round(multiplier * occupied))))


def occupancy_series(demand: Sequence[PassengerRequest], times_s: np.ndarray, g: RoadGraph,
                     window_s: float) -> np.ndarray:
    """Rides in progress in the demand trace, averaged over a centred window."""
    starts = np.array([r.request_time for r in demand], dtype=float)
    dur = np.array([r.recorded_duration if r.recorded_duration is not None
                    else g.costs_from(r.pickup_vertex)[r.dropoff_vertex] for r in demand], dtype=float)
    ends = np.sort(starts + dur)
    starts = np.sort(starts)
    if len(times_s) == 0:
        return np.empty(0)
    step = times_s[1] - times_s[0] if len(times_s) > 1 else window_s
    half = max(1, int(round(window_s / step / 2)))
    lo_t = times_s[0] - half * step
    fine = lo_t + step * np.arange(len(times_s) + 2 * half)
    occ = np.searchsorted(starts, fine, side="right") - np.searchsorted(ends, fine, side="right")
    csum = np.concatenate(([0.0], np.cumsum(occ)))
    width = 2 * half + 1
    sums = csum[width:] - csum[:-width]
    return sums[: len(times_s)] / width


def fleet_resize(vehicles: dict, target_total: int, dropoff_sampler, rng: np.random.Generator, g: RoadGraph,
                 now_ms: int, m: PlanarLaplace | None, next_id: list) -> int:
    """Grow or shrink the fleet toward ``target_total``.

    New vehicles appear idle at vertices drawn from ``dropoff_sampler``.
    Shrinking removes idle vehicles only, chosen uniformly at random; any
    shortfall is left for later batches. Returns the number removed (negative)
    or added (positive).
    """
    diff = target_total - len(vehicles)
    if diff > 0:
        for _ in range(diff):
            vid = next_id[0]
            next_id[0] += 1
            vert = int(dropoff_sampler.sample(rng))
            point = tuple(map(float, g.xy[vert])) if m is None else tuple(map(float, sample(m, g.xy[vert], rng)))
            vehicles[vid] = VehicleState(vid, vert, point, now_ms, now_ms)
        return diff
    if diff < 0:
        idle = sorted(vid for vid, v in vehicles.items()
                      if v.reported_available_at <= now_ms and v.truly_available_at <= now_ms)
        k = min(-diff, len(idle))
        if k:
            for vid in rng.choice(idle, size=k, replace=False):
                del vehicles[int(vid)]
        return -k
    return 0


# -- main loop --------------------------------------------------------------


def _plan(config: SimConfig, g: RoadGraph, reports: list[ReportedVehicle], posteriors: list[VertexPosterior],
          requests: list[OperatorRequest], D: int):
    """Operator step: sees reports and pickup vertices only."""
    F = costs_to_passengers(g, [r.pickup_vertex for r in requests])
    if config.redundancy_mode == "redundant" and D > 1 and len(reports) >= len(requests):
        return redundant_assign_posteriors(posteriors, F, D)
    return hungarian(expected_cost_matrix(posteriors, F))


def run(config: SimConfig, g: RoadGraph, demand: Sequence[PassengerRequest], *, dropoff_sampler=None,
        events: list | None = None, trace: list | None = None, planner: Callable | None = None) -> Metrics:
    """Simulate batched dispatch over ``demand`` (sorted by request time).

    Requests wait in a queue and are offered to every batch until served or
    older than ``max_wait_seconds``. When more requests wait than vehicles
    are reported free, the oldest ones are offered first. ``events`` (a list)
    receives operator-visible records; it never contains true drop-offs.
    ``trace`` (a list) receives the true per-vehicle legs, for auditing.
    """
    from .data_io import EmpiricalLocationSampler

    demand = list(demand)
    if any(b.request_time < a.request_time for a, b in zip(demand, demand[1:])):
        raise ValueError("demand must be sorted by request_time")
    mode = config.redundancy_mode
    if not demand:
        return Metrics([], mode=mode)
    planner = planner or _plan
    streams = np.random.SeedSequence(config.seed).spawn(3)
    rng_noise, rng_fleet, rng_drop = (np.random.default_rng(s) for s in streams)
    mech = PlanarLaplace(config.eps) if config.private else None
    if dropoff_sampler is None:
        ids, counts = np.unique([r.dropoff_vertex for r in demand], return_counts=True)
        dropoff_sampler = EmpiricalLocationSampler(ids, counts.astype(float))

    batch = _ms(config.batch_seconds)
    max_wait = _ms(config.max_wait_seconds)
    t0 = (_ms(demand[0].request_time) // batch) * batch
    t_last = _ms(demand[-1].request_time)
    # first boundary closes the window that holds the first request
    boundaries = np.arange(t0 + batch, t_last + max_wait + 2 * batch, batch, dtype=np.int64)
    occupied = occupancy_series(demand, boundaries / MS, g, config.occupancy_window_seconds)

    vehicles: dict[int, VehicleState] = {}
    next_id = [0]
    records: dict[int, PassengerRecord] = {}
    pending: deque[PassengerRequest] = deque()
    recent = deque(maxlen=config.forecast_batches)
    backlog = []
    fleet_sizes = []
    d_idx = 0
    req_ms = [_ms(r.request_time) for r in demand]

    def record(req, pickup_ms, status):
        pickup = None if pickup_ms is None else pickup_ms / MS
        wait = None if pickup_ms is None else (pickup_ms - req_ms_by_id[req.id]) / MS
        records[req.id] = PassengerRecord(req.id, req.request_time, pickup, wait, mode, status)

    req_ms_by_id = {}
    for r, t in zip(demand, req_ms):
        if r.id in req_ms_by_id:
            raise ValueError(f"duplicate request id {r.id}")
        req_ms_by_id[r.id] = t

    for b_idx, T in enumerate(boundaries):
        T = int(T)
        arrived = 0
        while d_idx < len(demand) and req_ms[d_idx] < T:
            pending.append(demand[d_idx])
            d_idx += 1
            arrived += 1
        recent.append(arrived)
        while pending and T - req_ms_by_id[pending[0].id] > max_wait:
            record(pending.popleft(), None, "dropped")
        # deque is in arrival order, so expired requests are at the front only
        target = fleet_target(occupied[b_idx], config.fleet_multiplier, config.fleet_cap, config.min_fleet)
        fleet_resize(vehicles, target, dropoff_sampler, rng_fleet, g, T, mech, next_id)
        fleet_sizes.append(len(vehicles))
        if not pending:
            if d_idx >= len(demand):
                break
            continue
        free = sorted((v for v in vehicles.values() if v.reported_available_at <= T), key=lambda v: v.id)
        if not free:
            continue
        offered = list(pending)[: len(free)]
        reports = [v.report() for v in free]
        posteriors = []
        for v in free:
            if mech is None:
                v.posterior = VertexPosterior.point_mass(v.true_vertex)
            elif v.posterior is None:
                v.posterior = posterior_over_vertices(g, mech, v.reported_point, config.p_min)
            posteriors.append(v.posterior)
        forecast = float(np.mean(recent)) if recent else 0.0
        D = choose_D(len(free), len(offered), forecast, config.D_max, config.reserve_fraction)
        plan = planner(config, g, reports, posteriors, [r.operator_view() for r in offered], D)

        served_ids = set()
        for j, group in enumerate(plan.groups(len(offered))):
            if not group:
                continue
            req = offered[j]
            vs = [free[i] for i in group]
            legs = redundant_rendezvous(vs, req.pickup_vertex, req.dropoff_vertex, mech, g, rng_drop, T)
            for v, leg in zip(vs, legs):
                depart = _true_depart(v, T)
                if leg.carries_passenger:
                    pickup_ms = depart + _ms(g.costs_to(req.pickup_vertex)[v.true_vertex])
                    record(req, pickup_ms, "served")
                    served_ids.add(req.id)
                v.truly_available_at = depart + _ms(leg.true_seconds)
                v.reported_available_at = T + _ms(leg.reported_seconds)
                v.true_vertex = leg.destination_vertex
                v.reported_point = leg.reported_dropoff
                v.posterior = None
                v.status = "en-route" if leg.carries_passenger else "fake-trip"
                backlog.append((v.reported_available_at - v.truly_available_at) / MS)
                if events is not None:
                    events.append({"time": T / MS, "kind": "assign", "vehicle": v.id, "passenger": req.id,
                                   "reported_x": leg.reported_dropoff[0], "reported_y": leg.reported_dropoff[1],
                                   "reported_available_at": v.reported_available_at / MS})
                if trace is not None:
                    trace.append({"vehicle": v.id, "passenger": req.id, "assigned": T / MS, "depart": depart / MS,
                                  "free": v.truly_available_at / MS, "carries": leg.carries_passenger,
                                  "reported_free": v.reported_available_at / MS})
        if served_ids:
            pending = deque(r for r in pending if r.id not in served_ids)

    for r in pending:
        record(r, None, "pending")
    for r in demand[d_idx:]:
        record(r, None, "pending")
    ordered = [records[r.id] for r in demand]
    return Metrics(ordered, np.asarray(backlog, dtype=float), np.asarray(fleet_sizes, dtype=np.int64), mode)


def demand_from_trips(trips, g: RoadGraph, snap_radius: float = 500.0) -> list[PassengerRequest]:
    """Passenger requests from trip records; trips off the network are dropped."""
    out = []
    for t in trips:
        a, b = nearest_vertex(g, t.pickup), nearest_vertex(g, t.dropoff)
        if np.hypot(*(g.xy[a] - t.pickup)) > snap_radius or np.hypot(*(g.xy[b] - t.dropoff)) > snap_radius:
            continue
        out.append(PassengerRequest(float(t.pickup_time), a, b, len(out), float(t.duration)))
    return out
