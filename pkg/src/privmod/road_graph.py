"""Road network: planar vertex coordinates, travel-time and length costs.

Coordinates are planar meters. Edge ``weight`` is a traversal time in seconds,
edge ``length`` a distance in meters.
"""
from __future__ import annotations

import math
import threading
import warnings
from collections import OrderedDict
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components, dijkstra
from scipy.spatial import cKDTree

DEFAULT_SPEED = 5.0  # m/s, for edges never observed in trip data
DEFAULT_SNAP_RADIUS = 500.0  # m

_PATH_TOL = 1e-9


class GraphError(ValueError):
    """Raised for malformed or disconnected road graphs."""


@dataclass(frozen=True)
class TripRecord:
    pickup_time: int
    dropoff_time: int
    pickup: tuple[float, float]
    dropoff: tuple[float, float]

    def __post_init__(self):
        if not self.dropoff_time > self.pickup_time:
            raise ValueError(
                f"dropoff_time ({self.dropoff_time}) must exceed pickup_time ({self.pickup_time})"
            )

    @property
    def duration(self) -> int:
        return self.dropoff_time - self.pickup_time


def _dedup_min(src, dst, values, n):
    # csr_matrix sums duplicates; parallel edges must keep the cheapest one
    order = np.lexsort((values, dst, src))
    s, d, v = src[order], dst[order], values[order]
    keep = np.ones(len(s), dtype=bool)
    keep[1:] = (s[1:] != s[:-1]) | (d[1:] != d[:-1])
    return csr_matrix((v[keep], (s[keep], d[keep])), shape=(n, n))


class _LRU:
    def __init__(self, maxsize):
        self.maxsize = maxsize
        self._data = OrderedDict()
        self._lock = threading.Lock()

    def get(self, key):
        with self._lock:
            value = self._data.get(key)
            if value is not None:
                self._data.move_to_end(key)
            return value

    def put(self, key, value):
        with self._lock:
            self._data[key] = value
            self._data.move_to_end(key)
            if self.maxsize is not None and len(self._data) > self.maxsize:
                self._data.popitem(last=False)

    # caches travel to worker processes empty
    def __getstate__(self):
        return {"maxsize": self.maxsize}

    def __setstate__(self, state):
        self.__init__(state["maxsize"])


class RoadGraph:
    """Strongly connected weighted directed graph with planar vertex positions.

    Parameters
    ----------
    xy : array_like, shape (V, 2)
        Vertex coordinates in meters; vertex ids are the row indices.
    src, dst : array_like of int
        Edge endpoints.
    length : array_like of float
        Edge lengths in meters.
    weight : array_like of float
        Edge traversal times in seconds.
    check_connected : bool
        Verify strong connectivity on construction.

    Notes
    -----
    Instances are treated as immutable. Shortest-path rows are cached per
    source (and per target on the reversed graph); caches are lock-protected
    so a graph can be shared across threads.
    """

    def __init__(self, xy, src, dst, length, weight, *, check_connected=True, cache_size=None):
        self.xy = np.asarray(xy, dtype=float).reshape(-1, 2)
        self.src = np.asarray(src, dtype=np.int64)
        self.dst = np.asarray(dst, dtype=np.int64)
        self.length = np.asarray(length, dtype=float)
        self.weight = np.asarray(weight, dtype=float)
        n = len(self.xy)
        m = len(self.src)
        if not (len(self.dst) == len(self.length) == len(self.weight) == m):
            raise GraphError("edge arrays must have equal length")
        if m and (self.src.min() < 0 or self.dst.min() < 0 or max(self.src.max(), self.dst.max()) >= n):
            raise GraphError("edge endpoint outside vertex id range 0..|V|-1")
        if np.any(~(self.length > 0)):
            raise GraphError("all edge lengths must be > 0")
        if np.any(~(self.weight > 0)):
            raise GraphError("all edge weights must be > 0")
        for arr in (self.xy, self.src, self.dst, self.length, self.weight):
            arr.setflags(write=False)

        self._time = _dedup_min(self.src, self.dst, self.weight, n)
        self._time_rev = self._time.T.tocsr()
        self._len = _dedup_min(self.src, self.dst, self.length, n)
        self._len_rev = self._len.T.tocsr()
        self._tree = cKDTree(self.xy) if n else None
        self._from_cache = _LRU(cache_size)
        self._to_cache = _LRU(cache_size)
        self._len_to_cache = _LRU(256)
        self._relevant_cache = _LRU(None)
        if check_connected and n:
            pair = self.unreachable_pair()
            if pair is not None:
                raise GraphError(f"graph is not strongly connected: no path from {pair[0]} to {pair[1]}")

    @property
    def n_vertices(self) -> int:
        return len(self.xy)

    @property
    def n_edges(self) -> int:
        return len(self.src)

    def __repr__(self):
        return f"RoadGraph(|V|={self.n_vertices}, |E|={self.n_edges})"

    def with_weights(self, weight) -> "RoadGraph":
        return RoadGraph(self.xy, self.src, self.dst, self.length, weight, check_connected=False)

    def unreachable_pair(self) -> tuple[int, int] | None:
        """Return some ordered pair (a, b) with no a→b path, or None."""
        n_comp, labels = connected_components(self._time, directed=True, connection="strong")
        if n_comp <= 1:
            return None
        reach = np.isfinite(dijkstra(self._time, indices=0, unweighted=True))
        if not reach.all():
            return 0, int(np.flatnonzero(~reach)[0])
        back = np.isfinite(dijkstra(self._time_rev, indices=0, unweighted=True))
        return int(np.flatnonzero(~back)[0]), 0

    # -- time costs ---------------------------------------------------------

    def costs_from(self, i: int) -> np.ndarray:
        """Shortest travel times from vertex ``i`` to every vertex."""
        row = self._from_cache.get(i)
        if row is None:
            row = dijkstra(self._time, indices=int(i))
            row.setflags(write=False)
            self._from_cache.put(i, row)
        return row

    def costs_to(self, j: int) -> np.ndarray:
        """Shortest travel times from every vertex to vertex ``j``."""
        col = self._to_cache.get(j)
        if col is None:
            col = dijkstra(self._time_rev, indices=int(j))
            col.setflags(write=False)
            self._to_cache.put(j, col)
        return col

    def _lengths_to(self, j: int) -> np.ndarray:
        col = self._len_to_cache.get(j)
        if col is None:
            col = dijkstra(self._len_rev, indices=int(j))
            self._len_to_cache.put(j, col)
        return col

    def edge_index(self) -> dict[tuple[int, int], int]:
        """Map (src, dst) to the index of the shortest parallel edge."""
        idx = {}
        for e in np.lexsort((self.length, self.dst, self.src)):
            key = (int(self.src[e]), int(self.dst[e]))
            idx.setdefault(key, int(e))
        return idx


def nearest_vertex(g: RoadGraph, p) -> int:
    """Vertex closest to ``p`` in Euclidean distance; ties go to the smallest id."""
    if g.n_vertices == 0:
        raise GraphError("nearest_vertex on an empty graph")
    p = np.asarray(p, dtype=float)
    if g.n_vertices == 1:
        return 0
    d, idx = g._tree.query(p, k=2)
    if d[1] > d[0] * (1 + 1e-12) + 1e-12:
        return int(idx[0])
    cand = g._tree.query_ball_point(p, d[0] * (1 + 1e-12) + 1e-12)
    dists = np.hypot(*(g.xy[cand] - p).T)
    best = dists.min()
    return int(min(c for c, dc in zip(cand, dists) if dc == best))


def nearest_vertices(g: RoadGraph, points) -> np.ndarray:
    points = np.asarray(points, dtype=float).reshape(-1, 2)
    return np.array([nearest_vertex(g, p) for p in points], dtype=np.int64)


def shortest_time_cost(g: RoadGraph, i: int, j: int) -> float:
    """Travel time in seconds along the minimum-weight path from ``i`` to ``j``."""
    if i == j:
        return 0.0
    return float(g.costs_from(i)[j])


def shortest_length_path(g: RoadGraph, i: int, j: int) -> list[int]:
    """Minimum-length vertex sequence from ``i`` to ``j``.

    Among equally short paths the lexicographically smallest sequence wins:
    walking forward from ``i``, the smallest-id neighbour lying on some
    shortest path is taken at every step.
    """
    i, j = int(i), int(j)
    path = [i]
    if i == j:
        return path
    dist = g._lengths_to(j)
    indptr, indices, data = g._len.indptr, g._len.indices, g._len.data
    u = i
    while u != j:
        lo, hi = indptr[u], indptr[u + 1]
        nbrs, lens = indices[lo:hi], data[lo:hi]
        tol = _PATH_TOL * max(1.0, dist[u])
        tight = np.abs(lens + dist[nbrs] - dist[u]) <= tol
        u = int(nbrs[tight].min())
        path.append(u)
    return path


def path_edges(g: RoadGraph, path: Sequence[int], index: dict | None = None) -> list[int]:
    index = g.edge_index() if index is None else index
    return [index[(a, b)] for a, b in zip(path[:-1], path[1:])]


def estimate_edge_weights(
    g: RoadGraph,
    trips: Iterable[TripRecord],
    *,
    default_speed: float = DEFAULT_SPEED,
    snap_radius: float = DEFAULT_SNAP_RADIUS,
) -> RoadGraph:
    """Edge travel times as the mean of trip durations apportioned by length.

    Each trip is snapped to its nearest vertices and assumed to follow the
    length-shortest path; its duration is split over the path's edges in
    proportion to edge length. Edges no trip traverses get
    ``length / default_speed``. An empty trip list emits a ``UserWarning``.
    """
    trips = list(trips)
    totals = np.zeros(g.n_edges)
    counts = np.zeros(g.n_edges, dtype=np.int64)
    index = g.edge_index()
    used = 0
    for trip in trips:
        a, b = np.asarray(trip.pickup, float), np.asarray(trip.dropoff, float)
        u, v = nearest_vertex(g, a), nearest_vertex(g, b)
        if np.hypot(*(g.xy[u] - a)) > snap_radius or np.hypot(*(g.xy[v] - b)) > snap_radius:
            continue
        if u == v:
            continue
        edges = path_edges(g, shortest_length_path(g, u, v), index)
        lens = g.length[edges]
        np.add.at(totals, edges, trip.duration * lens / lens.sum())
        np.add.at(counts, edges, 1)
        used += 1
    if used == 0:
        warnings.warn("no usable trips; all edge weights set to length/default_speed", UserWarning, stacklevel=2)
    weight = g.length / default_speed
    seen = counts > 0
    weight[seen] = totals[seen] / counts[seen]
    return g.with_weights(weight)


def density_radius(eps: float, p_min: float) -> float:
    """Distance beyond which the planar Laplace density drops to ``p_min`` or below."""
    peak = eps * eps / (2 * math.pi)
    if p_min <= 0:
        return math.inf
    if p_min >= peak:
        return -math.inf
    return math.log(peak / p_min) / eps


def vertices_within_density(g: RoadGraph, point, eps: float, p_min: float):
    """Vertices whose planar Laplace density about ``point`` exceeds ``p_min``.

    Returns ``(ids, densities)`` with ids ascending.
    """
    point = np.asarray(point, dtype=float)
    r = density_radius(eps, p_min)
    if r == -math.inf:
        ids = np.empty(0, dtype=np.int64)
    elif math.isinf(r):
        ids = np.arange(g.n_vertices)
    else:
        ids = np.array(sorted(g._tree.query_ball_point(point, r * (1 + 1e-9))), dtype=np.int64)
    dist = np.hypot(*(g.xy[ids] - point).T) if len(ids) else np.empty(0)
    dens = eps * eps / (2 * math.pi) * np.exp(-eps * dist)
    keep = dens > p_min
    return ids[keep], dens[keep]


def relevant_vertex_ids(g: RoadGraph, k: int, eps: float, p_min: float) -> np.ndarray:
    """Ascending ids of the relevant-node set of ``k`` (cached per graph)."""
    key = (int(k), float(eps), float(p_min))
    ids = g._relevant_cache.get(key)
    if ids is None:
        ids = np.sort([v for v, _ in relevant_nodes(g, k, eps, p_min)])
        ids.setflags(write=False)
        g._relevant_cache.put(key, ids)
    return ids


def relevant_nodes(g: RoadGraph, k: int, eps: float, p_min: float) -> list[tuple[int, float]]:
    """Vertices ``l`` with density of ``x_l`` about ``x_k`` above ``p_min``.

    Sorted by descending density (ascending id among equal densities).
    """
    if eps <= 0:
        raise ValueError("eps must be > 0")
    if p_min < 0:
        raise ValueError("p_min must be >= 0")
    ids, dens = vertices_within_density(g, g.xy[k], eps, p_min)
    if len(ids) == 0:
        raise ValueError(
            f"no vertex has density above p_min={p_min:g} at eps={eps:g}; lower p_min "
            f"(peak density is {eps * eps / (2 * math.pi):.3g})"
        )
    order = np.lexsort((ids, -dens))
    return [(int(ids[o]), float(dens[o])) for o in order]


def max_relevant_set_size(g: RoadGraph, eps: float, p_min: float) -> int:
    """Largest relevant-node set over all vertices."""
    return max(len(relevant_nodes(g, k, eps, p_min)) for k in range(g.n_vertices))
