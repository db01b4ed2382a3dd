"""Vehicle-to-passenger assignment: exact, expected-cost and redundant.

Cost matrices are ``(N vehicles, M passengers)`` arrays of seconds; ``inf``
marks a forbidden pairing.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .privacy_mechanism import PlanarLaplace, VertexPosterior, posterior_over_vertices
from .road_graph import RoadGraph


class AssignmentError(ValueError):
    """No finite-cost complete matching exists."""


@dataclass(frozen=True)
class Assignment:
    """Set of (vehicle, passenger) pairs.

    ``expected_waiting`` holds, for redundant plans, the expected minimum
    waiting time per passenger as computed by the planner.
    """

    pairs: tuple[tuple[int, int], ...]
    mode: str = "non-redundant"
    cost: float = 0.0
    expected_waiting: tuple[float, ...] | None = None
    rounds: int = 1

    def __post_init__(self):
        object.__setattr__(self, "pairs", tuple(sorted((int(i), int(j)) for i, j in self.pairs)))

    @property
    def pair_set(self) -> frozenset:
        return frozenset(self.pairs)

    def groups(self, n_passengers: int) -> list[tuple[int, ...]]:
        """Vehicle indices assigned to each passenger."""
        out = [[] for _ in range(n_passengers)]
        for i, j in self.pairs:
            out[j].append(i)
        return [tuple(z) for z in out]

    def vehicle_for(self) -> dict[int, int]:
        return {i: j for i, j in self.pairs}


@dataclass(frozen=True)
class RedundantPlan:
    D: int
    Z: tuple[tuple[int, ...], ...]
    p_min: float

    def __post_init__(self):
        seen = set()
        for z in self.Z:
            if len(z) > self.D:
                raise ValueError(f"group {z} exceeds D={self.D}")
            if seen & set(z):
                raise ValueError("vehicle sets must be pairwise disjoint")
            seen |= set(z)

    @classmethod
    def from_assignment(cls, a: Assignment, n_passengers: int, D: int, p_min: float) -> "RedundantPlan":
        return cls(D, tuple(a.groups(n_passengers)), p_min)


# -- linear sum assignment ------------------------------------------------


def _lsap(cost: np.ndarray):
    """Shortest-augmenting-path Hungarian method for ``n <= m`` finite costs.

    Returns ``(col_of_row, u, v)``: reduced costs ``cost - u[:, None] - v``
    are non-negative, zero on the matching, and ``v <= 0`` with ``v == 0``
    on unmatched columns.
    """
    n, m = cost.shape
    u = np.zeros(n + 1)
    v = np.zeros(m + 1)
    p = np.zeros(m + 1, dtype=np.int64)  # p[j]: 1-based row matched to column j
    way = np.zeros(m + 1, dtype=np.int64)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(m + 1, np.inf)
        used = np.zeros(m + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            free = ~used[1:]
            cur = cost[i0 - 1] - u[i0] - v[1:]
            better = free & (cur < minv[1:])
            minv[1:][better] = cur[better]
            way[1:][better] = j0
            masked = np.where(free, minv[1:], np.inf)
            j1 = int(np.argmin(masked)) + 1
            delta = masked[j1 - 1]
            u[p[used]] += delta
            v[used] -= delta
            minv[1:][free] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
    col_of_row = np.full(n, -1, dtype=np.int64)
    matched = np.flatnonzero(p[1:])
    col_of_row[p[1:][matched] - 1] = matched
    return col_of_row, u[1:], v[1:]


def _lex_smallest(tight, row_opt, col_opt, col_of_row):
    """Lexicographically smallest optimal matching.

    Works on the square problem padded to ``k = max(N, M)``: padding columns
    ``M..k-1`` are tight for rows flagged in ``row_opt``, padding rows
    ``N..k-1`` are tight for columns flagged in ``col_opt``. Every optimal
    assignment is a perfect matching of tight edges, so real rows are fixed
    in increasing order, each to the smallest real column that still admits
    one; rows that admit none stay on padding.
    """
    N, M = tight.shape
    k = len(col_of_row)
    row_of_col = np.empty(k, dtype=np.int64)
    row_of_col[col_of_row] = np.arange(k)
    col_fixed = np.zeros(k, dtype=bool)
    real_nbrs = [np.flatnonzero(tight[x]) for x in range(N)]
    opt_cols = np.flatnonzero(col_opt)
    parent_row = np.empty(k, dtype=np.int64)
    parent_col = np.empty(k, dtype=np.int64)

    def shift(x, y, i, t):
        # x takes y, every row on the chain takes its parent's old column, i takes t
        while True:
            px, py = parent_row[x], parent_col[x]
            col_of_row[x] = y
            row_of_col[y] = x
            if px < 0:
                col_of_row[i] = t
                row_of_col[t] = i
                return True
            x, y = px, py

    def reroute(i, t):
        goal = col_of_row[i]
        visited = col_fixed.copy()
        visited[t] = True
        seen_row = np.zeros(k, dtype=bool)
        seen_row[i] = True
        r = row_of_col[t]
        parent_row[r], parent_col[r] = -1, t
        seen_row[r] = True
        queue = [r]
        pads_left = M < k
        dummy_done = False
        for x in queue:
            if x >= N:
                if dummy_done:
                    continue
                dummy_done = True
                cols = opt_cols
            else:
                cols = real_nbrs[x]
            for y in cols:
                if visited[y]:
                    continue
                visited[y] = True
                if y == goal:
                    return shift(x, y, i, t)
                x2 = row_of_col[y]
                if not seen_row[x2]:
                    seen_row[x2] = True
                    parent_row[x2], parent_col[x2] = x, y
                    queue.append(x2)
            if x < N and row_opt[x] and pads_left:
                if goal >= M:
                    return shift(x, goal, i, t)
                pads_left = False
                for y in range(M, k):
                    if visited[y]:
                        continue
                    visited[y] = True
                    x2 = row_of_col[y]
                    if not seen_row[x2]:
                        seen_row[x2] = True
                        parent_row[x2], parent_col[x2] = x, y
                        queue.append(x2)
        return False

    for i in range(N):
        cand = real_nbrs[i]
        for j in cand[~col_fixed[cand]]:
            if col_of_row[i] == j or reroute(i, j):
                break
        col_fixed[col_of_row[i]] = True
    return col_of_row


def hungarian(C, *, tie_break: bool = True, tol: float = 1e-9) -> Assignment:
    """Minimum-cost assignment for a rectangular cost matrix.

    Assigns ``min(N, M)`` pairs with each vehicle and passenger used at most
    once. Among optimal solutions (costs equal within ``tol`` relative) the
    lexicographically smallest sorted pair list is returned.

    Raises
    ------
    AssignmentError
        If every complete matching uses a forbidden (``inf``) entry.
    """
    C = np.asarray(C, dtype=float)
    if C.ndim != 2 or min(C.shape) < 1:
        raise ValueError(f"cost matrix must be 2-D with both dimensions >= 1, got shape {C.shape}")
    if np.isnan(C).any() or (C < 0).any():
        raise ValueError("cost entries must be >= 0 or +inf")
    N, M = C.shape
    k = max(N, M)
    forbidden = np.isinf(C)
    finite_max = float(C[~forbidden].max()) if (~forbidden).any() else 0.0
    big = 2.0 * k * (finite_max + 1.0) + 1.0
    work = np.where(forbidden, big, C)

    # the solver augments over the smaller side
    if N <= M:
        col_of_row, u_row, v_col = _lsap(work)
    else:
        row_of_col, v_col, u_row = _lsap(work.T)
        col_of_row = np.full(N, -1, dtype=np.int64)
        col_of_row[row_of_col] = np.arange(M)

    if tie_break:
        atol = tol * max(1.0, finite_max)
        tight = work - u_row[:, None] - v_col[None, :] <= atol
        square = np.empty(k, dtype=np.int64)
        square[:N] = col_of_row
        if N < M:
            square[N:] = np.setdiff1d(np.arange(M), col_of_row)
        elif N > M:
            free_rows = col_of_row < 0
            square[:N][free_rows] = np.arange(M, k)
        square = _lex_smallest(tight, u_row >= -atol if N > M else np.zeros(N, bool),
                               v_col >= -atol if N < M else np.zeros(M, bool), square)
        col_of_row = np.where(square[:N] < M, square[:N], -1)

    pairs = [(i, int(col_of_row[i])) for i in range(N) if col_of_row[i] >= 0]
    if any(forbidden[i, j] for i, j in pairs):
        raise AssignmentError("no complete matching with finite cost exists")
    cost = float(sum(C[i, j] for i, j in pairs))
    return Assignment(tuple(pairs), "non-redundant", cost)


def solve_batch(C_expected) -> Assignment:
    """Assignment minimizing the total expected cost."""
    return hungarian(C_expected)


# -- cost matrices ----------------------------------------------------------


def costs_to_passengers(g: RoadGraph, passenger_vertices: Sequence[int]) -> np.ndarray:
    """``(V, M)`` array of travel times from every vertex to each passenger."""
    return np.column_stack([g.costs_to(int(p)) for p in passenger_vertices])


def cost_matrix_true(g: RoadGraph, vehicle_vertices, passenger_vertices) -> np.ndarray:
    F = costs_to_passengers(g, passenger_vertices)
    return F[np.asarray(vehicle_vertices, dtype=np.int64)]


def expected_cost_matrix(posteriors: Sequence[VertexPosterior], F: np.ndarray) -> np.ndarray:
    return np.vstack([post.probs @ F[post.vertices] for post in posteriors])


def cost_matrix_expected(g: RoadGraph, reported_points, passenger_vertices, eps: float, p_min: float) -> np.ndarray:
    """Expected travel time from each reported vehicle to each passenger."""
    mech = PlanarLaplace(eps)
    posts = [posterior_over_vertices(g, mech, r, p_min) for r in np.asarray(reported_points, float).reshape(-1, 2)]
    return expected_cost_matrix(posts, costs_to_passengers(g, passenger_vertices))


# -- expected minimum waiting -----------------------------------------------


@dataclass(frozen=True)
class SurvivalFunction:
    """Step survival function P(W > t) of a discrete non-negative waiting time.

    ``survival[k]`` is P(W > support[k]); P(W > t) = 1 for t below the
    smallest support value.
    """

    support: np.ndarray
    survival: np.ndarray

    @classmethod
    def from_distribution(cls, values, probs) -> "SurvivalFunction":
        values = np.asarray(values, dtype=float)
        probs = np.asarray(probs, dtype=float)
        support, inv = np.unique(values, return_inverse=True)
        mass = np.bincount(inv.ravel(), weights=probs, minlength=len(support))
        surv = np.clip(1.0 - np.cumsum(mass), 0.0, 1.0)
        surv[-1] = 0.0
        return cls(support, surv)

    def __call__(self, t):
        idx = np.searchsorted(self.support, t, side="right") - 1
        return np.where(idx >= 0, self.survival[np.maximum(idx, 0)], 1.0)

    def mean(self) -> float:
        prev = np.concatenate(([1.0], self.survival[:-1]))
        return float(np.sum(self.support * (prev - self.survival)))

    def _integral_knots(self):
        knots = self.support
        heights = np.concatenate(([1.0], self.survival[:-1]))
        if knots[0] > 0:
            knots = np.concatenate(([0.0], knots))
            heights = np.concatenate(([1.0], heights))
        cum = np.concatenate(([0.0], np.cumsum(np.diff(knots) * heights[1:])))
        return knots, cum

    def truncated_mean(self, b) -> np.ndarray:
        """E[min(W, b)] for each b >= 0, i.e. the integral of P(W > t) over [0, b]."""
        # the integral is piecewise linear with knots at the support
        knots, cum = self._integral_knots()
        return np.interp(b, knots, cum)

    def min_with(self, other: "SurvivalFunction") -> "SurvivalFunction":
        """Survival of min(A, B) for independent A (self) and B."""
        support = np.union1d(self.support, other.support)
        return SurvivalFunction(support, self(support) * other(support))


def _values_for(posterior: VertexPosterior, f_to_passenger) -> np.ndarray:
    if isinstance(f_to_passenger, Mapping):
        return np.array([f_to_passenger[int(k)] for k in posterior.vertices], dtype=float)
    return np.asarray(f_to_passenger, dtype=float)[posterior.vertices]


def expected_min_waiting(sf: SurvivalFunction | None, posterior_i: VertexPosterior, f_to_passenger):
    """E[min(W_current, W_i)] and the survival function of that minimum.

    ``W_i`` takes value ``f_to_passenger[k]`` with probability
    ``posterior_i(k)``; ``W_current`` (described by ``sf``) is independent.
    With ``sf=None`` this is the plain expectation of ``W_i``.
    """
    values = _values_for(posterior_i, f_to_passenger)
    sf_i = SurvivalFunction.from_distribution(values, posterior_i.probs)
    if sf is None:
        return float(posterior_i.probs @ values), sf_i
    expected = float(posterior_i.probs @ sf.truncated_mean(values))
    return expected, sf.min_with(sf_i)


def expected_min_oracle(posteriors: Sequence[VertexPosterior], f_to_passenger, cap: float = 1e7) -> float:
    """E[min_i W_i] by enumerating every joint tuple of candidate vertices."""
    sizes = [len(p) for p in posteriors]
    if math.prod(sizes) > cap:
        raise ValueError(f"{math.prod(sizes)} joint tuples exceed the enumeration cap {cap:g}")
    vals = [_values_for(p, f_to_passenger) for p in posteriors]
    total = 0.0
    for idx in itertools.product(*(range(s) for s in sizes)):
        prob = 1.0
        for p, k in zip(posteriors, idx):
            prob *= p.probs[k]
        total += prob * min(v[k] for v, k in zip(vals, idx))
    return total


# -- redundant assignment ---------------------------------------------------


def redundant_assign_posteriors(posteriors: Sequence[VertexPosterior], F: np.ndarray, D: int) -> Assignment:
    """Iterative Hungarian redundant assignment over precomputed posteriors.

    ``F[k, j]`` is the travel time from vertex ``k`` to passenger ``j``.
    Round one is the expected-cost assignment. Each further round (up to
    ``D``) runs only while at least ``M`` vehicles are still unassigned; it
    prices every free vehicle by the expected minimum waiting of its
    passenger's group plus that vehicle, and merges one more vehicle per
    passenger.
    """
    N, M = len(posteriors), F.shape[1]
    if D < 1:
        raise ValueError("D must be >= 1")
    if N < M:
        raise AssignmentError(f"redundant assignment needs N >= M vehicles (N={N}, M={M})")
    values = [F[p.vertices] for p in posteriors]  # (s_i, M) per vehicle
    C = np.vstack([p.probs @ v for p, v in zip(posteriors, values)])
    first = hungarian(C)
    pairs = list(first.pairs)
    groups: list[list[int]] = [[] for _ in range(M)]
    sfs: list[SurvivalFunction | None] = [None] * M
    for i, j in pairs:
        groups[j].append(i)
        sfs[j] = SurvivalFunction.from_distribution(values[i][:, j], posteriors[i].probs)
    rounds = 1
    for r in range(2, D + 1):
        if N < M * r:
            break
        taken = np.zeros(N, dtype=bool)
        taken[[i for i, _ in pairs]] = True
        free = np.flatnonzero(~taken)
        # one interpolation per passenger over the stacked supports of all free vehicles
        starts = np.cumsum([0] + [len(posteriors[i]) for i in free])
        stacked = np.vstack([values[i] for i in free])
        probs = np.concatenate([posteriors[i].probs for i in free])
        C = np.full((N, M), np.inf)
        for j in range(M):
            weighted = probs * sfs[j].truncated_mean(stacked[:, j])
            C[free, j] = np.add.reduceat(weighted, starts[:-1])
        new = hungarian(C)
        for i, j in new.pairs:
            sf_i = SurvivalFunction.from_distribution(values[i][:, j], posteriors[i].probs)
            sfs[j] = sfs[j].min_with(sf_i)
            groups[j].append(i)
        pairs.extend(new.pairs)
        rounds = r
    waits = tuple(sf.mean() for sf in sfs)
    return Assignment(tuple(pairs), "redundant", float(sum(waits)), waits, rounds)


def redundant_assign(g: RoadGraph, reported_points, passenger_vertices, D: int, eps: float, p_min: float) -> Assignment:
    """Assign up to ``D`` vehicles per passenger from obfuscated vehicle reports."""
    mech = PlanarLaplace(eps)
    posts = [posterior_over_vertices(g, mech, r, p_min) for r in np.asarray(reported_points, float).reshape(-1, 2)]
    return redundant_assign_posteriors(posts, costs_to_passengers(g, passenger_vertices), D)
