"""Planar Laplace mechanism for geo-indistinguishable location reports.

``eps`` is an inverse length scale in 1/meter: the mean displacement is
``2 / eps`` meters (eps = 0.02 gives 100 m).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .road_graph import RoadGraph, nearest_vertex, relevant_vertex_ids

_INV_E = math.exp(-1.0)


def lambertw_m1(x, tol=1e-12, max_iter=100):
    """Lower branch W_{-1} of the Lambert W function on [-1/e, 0).

    Halley iteration on ``w * exp(w) - x`` starting from the branch-point
    series near -1/e and the log asymptote elsewhere.
    """
    x = np.asarray(x, dtype=float)
    scalar = x.ndim == 0
    x = np.atleast_1d(x)
    if np.any((x < -_INV_E - 1e-15) | (x >= 0)):
        raise ValueError("W_{-1} is defined on [-1/e, 0)")
    x = np.maximum(x, -_INV_E)

    w = np.empty_like(x)
    near = x < -0.25
    p = -np.sqrt(np.maximum(2.0 * (1.0 + math.e * x[near]), 0.0))
    w[near] = -1.0 + p - p * p / 3.0 + 11.0 / 72.0 * p ** 3
    lx = np.log(-x[~near])
    w[~near] = lx - np.log(-lx)

    active = np.ones(len(x), dtype=bool)
    active &= x > -_INV_E  # W = -1 exactly at the branch point
    w[~active] = -1.0
    for _ in range(max_iter):
        if not active.any():
            break
        wa, xa = w[active], x[active]
        ew = np.exp(wa)
        f = wa * ew - xa
        wp1 = wa + 1.0
        denom = ew * wp1 - (wa + 2.0) * f / (2.0 * wp1)
        step = np.where(denom != 0, f / denom, 0.0)
        w_new = wa - step
        w[active] = w_new
        done = np.abs(step) <= tol * np.abs(w_new)
        idx = np.flatnonzero(active)
        active[idx[done]] = False
    return float(w[0]) if scalar else w


def radial_cdf(r, eps):
    """P(radius <= r) for the planar Laplace radius: 1 - (1 + eps r) e^{-eps r}."""
    r = np.maximum(np.asarray(r, dtype=float), 0.0)
    return 1.0 - (1.0 + eps * r) * np.exp(-eps * r)


def _lambertw_m1_scalar(x, tol=1e-12):
    if x <= -_INV_E:
        return -1.0
    if x < -0.25:
        p = -math.sqrt(max(2.0 * (1.0 + math.e * x), 0.0))
        w = -1.0 + p - p * p / 3.0 + 11.0 / 72.0 * p**3
    else:
        lx = math.log(-x)
        w = lx - math.log(-lx)
    for _ in range(100):
        ew = math.exp(w)
        f = w * ew - x
        wp1 = w + 1.0
        denom = ew * wp1 - (w + 2.0) * f / (2.0 * wp1)
        if denom == 0:
            break
        step = f / denom
        w -= step
        if abs(step) <= tol * abs(w):
            break
    return w


def radial_inverse_cdf(u, eps):
    """Radius at cumulative probability ``u`` in [0, 1)."""
    if np.ndim(u) == 0:
        return -(_lambertw_m1_scalar((float(u) - 1.0) * _INV_E) + 1.0) / eps
    u = np.asarray(u, dtype=float)
    return -(lambertw_m1((u - 1.0) * _INV_E) + 1.0) / eps


@dataclass(frozen=True)
class PlanarLaplace:
    """Two-dimensional Laplace noise with inverse scale ``eps`` (1/m)."""

    eps: float

    def __post_init__(self):
        if not self.eps > 0:
            raise ValueError(f"eps must be > 0, got {self.eps}")

    @property
    def peak_density(self) -> float:
        return self.eps * self.eps / (2 * math.pi)

    @property
    def mean_radius(self) -> float:
        return 2.0 / self.eps


def pdf(m: PlanarLaplace, center, query):
    """Density (1/m^2) of reporting ``query`` when the true location is ``center``."""
    diff = np.asarray(query, dtype=float) - np.asarray(center, dtype=float)
    r = np.hypot(diff[..., 0], diff[..., 1])
    return m.peak_density * np.exp(-m.eps * r)


def sample(m: PlanarLaplace, center, rng: np.random.Generator, size=None):
    """Draw noisy location(s) around ``center``.

    Angle is uniform on [0, 2 pi); the radius is drawn by inverting the
    radial CDF through W_{-1}. With ``size`` given, returns an array of
    shape ``(size, 2)``.
    """
    if size is None:
        theta = rng.uniform(0.0, 2 * math.pi)
        r = radial_inverse_cdf(rng.random(), m.eps)
        cx, cy = center
        return np.array((cx + r * math.cos(theta), cy + r * math.sin(theta)))
    n = int(size)
    theta = rng.uniform(0.0, 2 * math.pi, n)
    r = radial_inverse_cdf(rng.random(n), m.eps)
    pts = np.asarray(center, dtype=float) + np.column_stack((r * np.cos(theta), r * np.sin(theta)))
    return pts


def obfuscate_vertex(g: RoadGraph, m: PlanarLaplace, v: int, rng: np.random.Generator):
    """Return (reported point, nearest vertex to it) for a vehicle at vertex ``v``."""
    reported = sample(m, g.xy[v], rng)
    return reported, nearest_vertex(g, reported)


@dataclass(frozen=True)
class VertexPosterior:
    """Normalized distribution over candidate true vertices for a report."""

    vertices: np.ndarray
    probs: np.ndarray
    eps: float = math.inf
    center: tuple[float, float] | None = field(default=None)

    def __post_init__(self):
        if len(self.vertices) == 0 or len(self.vertices) != len(self.probs):
            raise ValueError("posterior needs matching, non-empty vertices and probs")

    @classmethod
    def point_mass(cls, v: int) -> "VertexPosterior":
        return cls(np.array([int(v)]), np.array([1.0]))

    def __len__(self):
        return len(self.vertices)

    def expect(self, values_by_vertex: np.ndarray) -> float:
        """Expectation of a per-vertex quantity (indexed by vertex id)."""
        return float(self.probs @ np.asarray(values_by_vertex)[self.vertices])


def posterior_over_vertices(g: RoadGraph, m: PlanarLaplace, reported, p_min: float) -> VertexPosterior:
    """Posterior over true vertices given a reported point, under a flat prior.

    The support is the relevant-node set of the vertex nearest to
    ``reported`` (vertices whose density about it exceeds ``p_min``); each
    candidate is weighted by the density of ``reported`` about it and the
    weights are normalized over that support.
    """
    reported = np.asarray(reported, dtype=float)
    ids = relevant_vertex_ids(g, nearest_vertex(g, reported), m.eps, p_min)
    # shift exponents so far-away reports do not underflow
    dist = np.hypot(*(g.xy[ids] - reported).T)
    w = np.exp(-m.eps * (dist - dist.min()))
    return VertexPosterior(ids, w / w.sum(), m.eps, (float(reported[0]), float(reported[1])))


def leakage(m: PlanarLaplace, x, x_alt, z) -> float:
    """|ln(pdf(x, z) / pdf(x_alt, z))|, computed in log space."""
    x, x_alt, z = (np.asarray(a, dtype=float) for a in (x, x_alt, z))
    rx = np.hypot(*(z - x).T)
    ralt = np.hypot(*(z - x_alt).T)
    return np.abs(m.eps * (ralt - rx))
