import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate, stats

from privmod.data_io import synthetic_grid_city
from privmod.privacy_mechanism import (
    PlanarLaplace,
    VertexPosterior,
    lambertw_m1,
    leakage,
    obfuscate_vertex,
    pdf,
    posterior_over_vertices,
    radial_cdf,
    radial_inverse_cdf,
    sample,
)
from privmod.road_graph import RoadGraph


class TestLambertW:
    def test_matches_mpmath(self):
        xs = np.concatenate((-np.logspace(-300, math.log10(math.exp(-1)) - 1e-12, 200),
                             -math.exp(-1) + np.logspace(-14, -2, 50)))
        xs = xs[(xs < 0) & (xs >= -math.exp(-1))]
        w = lambertw_m1(xs)
        for x, got in zip(xs, w):
            ref = float(mpmath.lambertw(mpmath.mpf(x), -1).real)
            assert got == pytest.approx(ref, rel=1e-7, abs=1e-7)

    def test_branch_point(self):
        assert lambertw_m1(-math.exp(-1)) == -1.0

    def test_out_of_domain(self):
        with pytest.raises(ValueError):
            lambertw_m1(0.1)

    @given(st.floats(1e-9, 1 - 1e-9))
    def test_inverse_cdf_roundtrip(self, u):
        eps = 0.02
        assert radial_cdf(radial_inverse_cdf(u, eps), eps) == pytest.approx(u, abs=1e-9)

    def test_scalar_and_vector_agree(self):
        u = np.linspace(0.001, 0.999, 57)
        vec = radial_inverse_cdf(u, 0.05)
        sc = [radial_inverse_cdf(float(x), 0.05) for x in u]
        np.testing.assert_allclose(vec, sc, rtol=1e-10)


class TestPdf:
    def test_peak(self):
        m = PlanarLaplace(0.02)
        assert pdf(m, (3.0, 4.0), (3.0, 4.0)) == pytest.approx(0.02**2 / (2 * math.pi))

    def test_ratio_identity(self, rng):
        m = PlanarLaplace(0.03)
        for _ in range(3):
            x, xa, z = rng.uniform(-500, 500, (3, 2))
            ratio = pdf(m, x, z) / pdf(m, xa, z)
            expected = math.exp(m.eps * (np.linalg.norm(z - xa) - np.linalg.norm(z - x)))
            assert ratio == pytest.approx(expected, rel=1e-12)

    def test_disc_integral(self):
        # mass inside radius 10/eps is 1 - 11 e^-10
        m = PlanarLaplace(0.02)
        R = 10 / m.eps
        val, _ = integrate.dblquad(lambda r, th: pdf(m, (0, 0), (r * math.cos(th), r * math.sin(th))) * r,
                                   0, 2 * math.pi, 0, R)
        assert val == pytest.approx(1 - 11 * math.exp(-10), abs=1e-4)
        assert val == pytest.approx(0.99950, abs=1e-4)

    def test_invalid_eps(self):
        with pytest.raises(ValueError):
            PlanarLaplace(0.0)


class TestSample:
    def test_mean_radius(self):
        m = PlanarLaplace(0.02)
        pts = sample(m, (10.0, -5.0), np.random.default_rng(1), size=1_000_000)
        r = np.hypot(pts[:, 0] - 10.0, pts[:, 1] + 5.0)
        assert abs(r.mean() - 2 / m.eps) / (2 / m.eps) < 0.01

    def test_radius_distribution_ks(self):
        m = PlanarLaplace(0.02)
        pts = sample(m, (0.0, 0.0), np.random.default_rng(2), size=100_000)
        r = np.hypot(*pts.T)
        assert stats.kstest(r, lambda x: radial_cdf(x, m.eps)).pvalue > 0.01
        # Gamma(2, 1/eps) is the same law
        assert stats.kstest(r, stats.gamma(2, scale=1 / m.eps).cdf).pvalue > 0.01

    def test_angles_uniform(self):
        m = PlanarLaplace(0.02)
        pts = sample(m, (0.0, 0.0), np.random.default_rng(3), size=1_000_000)
        theta = np.mod(np.arctan2(pts[:, 1], pts[:, 0]), 2 * math.pi)
        counts, _ = np.histogram(theta, bins=36, range=(0, 2 * math.pi))
        assert stats.chisquare(counts).pvalue > 0.01

    def test_deterministic(self):
        m = PlanarLaplace(0.02)
        a = sample(m, (0, 0), np.random.default_rng(9), size=50)
        b = sample(m, (0, 0), np.random.default_rng(9), size=50)
        np.testing.assert_array_equal(a, b)
        r1, r2 = np.random.default_rng(4), np.random.default_rng(4)
        for _ in range(10):
            np.testing.assert_array_equal(sample(m, (1, 2), r1), sample(m, (1, 2), r2))

    def test_single_draw_shape(self, rng):
        assert sample(PlanarLaplace(0.1), (0, 0), rng).shape == (2,)


class TestObfuscate:
    def test_large_eps_projects_home(self):
        g = synthetic_grid_city(4, 4, 10.0, 5.0)
        m = PlanarLaplace(10.0)
        rng = np.random.default_rng(5)
        hits = sum(obfuscate_vertex(g, m, 5, rng)[1] == 5 for _ in range(2000))
        assert hits / 2000 > 0.99

    def test_returns_raw_point(self, grid5, rng):
        pt, v = obfuscate_vertex(grid5, PlanarLaplace(0.02), 12, rng)
        assert pt.shape == (2,)
        assert 0 <= v < grid5.n_vertices

    def test_multiplicity_decays_from_center(self):
        # 100 samples projected onto a 100 m grid concentrate at the true
        # vertex and thin out ring by ring
        g = synthetic_grid_city(21, 21, 100.0, 10.0)
        center = 10 * 21 + 10
        m = PlanarLaplace(0.02)
        rng = np.random.default_rng(2024)
        hits = np.bincount([obfuscate_vertex(g, m, center, rng)[1] for _ in range(100)],
                           minlength=g.n_vertices)
        ring = np.max(np.abs(g.xy - g.xy[center]), axis=1) // 100
        per_vertex = [hits[ring == k].mean() for k in range(4)]
        assert hits[center] == hits.max()
        assert all(a > b for a, b in zip(per_vertex, per_vertex[1:]))


class TestPosterior:
    def test_single_vertex(self):
        g = RoadGraph([(0.0, 0.0)], [], [], [], [])
        post = posterior_over_vertices(g, PlanarLaplace(0.02), (40.0, 3.0), 1e-6)
        assert list(post.vertices) == [0]
        assert post.probs[0] == 1.0

    def test_equidistant_split(self):
        g = RoadGraph([(0, 0), (100, 0)], [0, 1], [1, 0], [100.0, 100.0], [10.0, 10.0])
        post = posterior_over_vertices(g, PlanarLaplace(0.02), (50.0, 30.0), 1e-9)
        np.testing.assert_allclose(post.probs, [0.5, 0.5], rtol=1e-12)

    def test_full_support_normalization(self, rng):
        g = synthetic_grid_city(4, 5, 80.0, 8.0)
        m = PlanarLaplace(0.02)
        z = rng.uniform(0, 300, 2)
        post = posterior_over_vertices(g, m, z, 0.0)
        dens = pdf(m, g.xy, z)
        oracle = dens / dens.sum()
        got = np.zeros(g.n_vertices)
        got[post.vertices] = post.probs
        np.testing.assert_allclose(got, oracle, rtol=0, atol=1e-12)

    @settings(max_examples=50, deadline=None)
    @given(st.floats(-200, 600), st.floats(-200, 600), st.sampled_from([1e-5, 1e-6, 1e-8]))
    def test_sums_to_one_and_ordered(self, x, y, p_min):
        g = synthetic_grid_city(5, 5, 100.0, 10.0)
        post = posterior_over_vertices(g, PlanarLaplace(0.02), (x, y), p_min)
        assert post.probs.sum() == pytest.approx(1.0, abs=1e-12)
        assert np.all(post.probs > 0)
        d = np.hypot(*(g.xy[post.vertices] - (x, y)).T)
        order = np.argsort(d, kind="stable")
        assert np.all(np.diff(post.probs[order]) <= 1e-15)

    def test_point_mass(self):
        pm = VertexPosterior.point_mass(7)
        assert len(pm) == 1 and pm.expect(np.arange(10.0)) == 7.0


class TestLeakage:
    def test_same_point(self):
        assert leakage(PlanarLaplace(0.02), (1, 1), (1, 1), (50, 7)) == 0.0

    def test_collinear_is_tight(self):
        m = PlanarLaplace(0.05)
        x, xa, z = np.array([0.0, 0.0]), np.array([30.0, 40.0]), np.array([60.0, 80.0])
        assert leakage(m, x, xa, z) == pytest.approx(m.eps * 50.0, rel=1e-12)

    @pytest.mark.parametrize("eps", [0.005, 0.02, 0.1])
    def test_bound_on_random_triples(self, eps):
        rng = np.random.default_rng(int(eps * 1000))
        x, xa, z = (rng.uniform(-2000, 2000, (100_000, 2)) for _ in range(3))
        lk = leakage(PlanarLaplace(eps), x, xa, z)
        bound = eps * np.hypot(*(x - xa).T)
        assert np.all(lk <= bound * (1 + 1e-12) + 1e-12)

    def test_matches_log_density_ratio(self, rng):
        m = PlanarLaplace(0.02)
        x, xa, z = rng.uniform(-100, 100, (3, 2))
        assert leakage(m, x, xa, z) == pytest.approx(abs(math.log(pdf(m, x, z) / pdf(m, xa, z))), rel=1e-10)
