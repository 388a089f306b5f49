import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from mixedray.geometry import (BallShellChart, ConformalChart, GeometryError,
                               SampledChart, boundary_convexity_alpha, christoffel_symbols,
                               frame_inner_products, parallel_transport, shoot_geodesic)


def shell_point(x, y, R=1.0):
    """Cartesian point of chart point (x, y) on the inward shell, coded by hand."""
    y = np.asarray(y)
    return (R - x) * np.concatenate([[1.0], y]) / np.sqrt(1.0 + y @ y)


def shell_chart_of(q, R=1.0):
    return np.concatenate([[R - np.linalg.norm(q)], q[1:] / q[0]])


def fd_christoffel(chart, p, h=1e-5):
    n = p.size
    dg = np.zeros((n, n, n))
    for l in range(n):
        e = np.zeros(n)
        e[l] = h
        dg[l] = (chart.metric(p + e) - chart.metric(p - e)) / (2 * h)
    ginv = np.linalg.inv(chart.metric(p))
    G = np.zeros((n, n, n))
    for k in range(n):
        for i in range(n):
            for j in range(n):
                G[k, i, j] = 0.5 * sum(ginv[k, l] * (dg[i, j, l] + dg[j, i, l] - dg[l, i, j])
                                       for l in range(n))
    return G


def unit(chart, z, v):
    v = np.asarray(v, dtype=float)
    return v / chart.norm(np.asarray(z, dtype=float), v)


class TestChristoffel:
    def test_flat_is_zero(self, flat):
        assert np.all(christoffel_symbols(flat, [0.3, 0.4, 0.5]) == 0)

    def test_conformal_hand_values(self):
        # g = exp(2x) delta at the origin
        chart = ConformalChart([-0.5] * 3, [0.5] * 3, a=[1.0, 0.0, 0.0])
        G = christoffel_symbols(chart, [0.0, 0.0, 0.0])
        want = np.zeros((3, 3, 3))
        want[0, 0, 0] = 1.0
        want[0, 1, 1] = want[0, 2, 2] = -1.0
        want[1, 0, 1] = want[1, 1, 0] = 1.0
        want[2, 0, 2] = want[2, 2, 0] = 1.0
        np.testing.assert_allclose(G, want, atol=1e-14)
        np.testing.assert_allclose(fd_christoffel(chart, np.zeros(3)), want, atol=1e-8)

    @pytest.mark.parametrize("p", [[0.2, 0.1, -0.1], [0.25, -0.3, 0.4]])
    def test_shell_closed_form_matches_differences(self, shell_in, shell_out, p):
        for chart in (shell_in, shell_out):
            G = christoffel_symbols(chart, p)
            np.testing.assert_allclose(G, fd_christoffel(chart, np.array(p)), atol=1e-7)

    def test_sampled_metric_is_symmetric(self, rng):
        A = rng.normal(size=(5, 5, 5, 3, 3)) * 0.1
        samples = np.eye(3) + np.einsum("...ij,...kj->...ik", A, A)
        chart = SampledChart([0, 0, 0], [1, 1, 1], samples)
        G = christoffel_symbols(chart, [0.4, 0.55, 0.3])
        assert np.array_equal(G, np.swapaxes(G, 1, 2))

    def test_outside_box(self, flat):
        with pytest.raises(GeometryError):
            christoffel_symbols(flat, [1.5, 0.5, 0.5])


class TestShooting:
    def test_flat_segment(self, flat):
        z, v = np.array([0.5, 0.25, 0.5]), np.array([0.0, 1.0, 0.0])
        path = shoot_geodesic(flat, z, v)
        assert path.t[0] == pytest.approx(-0.25, abs=1e-10)
        assert path.t[-1] == pytest.approx(0.75, abs=1e-10)
        np.testing.assert_allclose(path.points, z + path.t[:, None] * v, atol=1e-13)

    @given(x=st.floats(0.02, 0.28), y1=st.floats(-0.4, 0.4), y2=st.floats(-0.4, 0.4),
           ang=st.floats(0, 2 * math.pi), tilt=st.floats(-0.3, 0.3))
    def test_shell_chords_are_straight(self, shell_in, x, y1, y2, ang, tilt):
        z = np.array([x, y1, y2])
        zeta = unit(shell_in, z, [tilt, math.cos(ang), math.sin(ang)])
        path = shoot_geodesic(shell_in, z, zeta, step=5e-3)
        # Cartesian velocity by complex step through the hand-coded map
        eps = 1e-30
        zc = z + 1j * eps * zeta
        q0 = shell_point(x, [y1, y2])
        u = np.imag((1 - zc[0]) * np.concatenate([[1.0], zc[1:]]) / np.sqrt(1 + zc[1:] @ zc[1:])) / eps
        line = q0 + path.t[:, None] * u
        expect = np.array([shell_chart_of(q) for q in line])
        assert np.max(np.abs(path.points - expect)) <= 1e-8

    def test_unit_speed(self, conformal):
        z = np.array([0.5, 0.1, -0.2])
        path = shoot_geodesic(conformal, z, unit(conformal, z, [0.3, 1.0, 0.4]))
        drift = np.max(np.abs(path.speed(conformal) - 1.0))
        assert drift <= 1e-8 * max(path.length, 1.0)

    def test_time_reversal(self, conformal):
        z = np.array([0.5, 0.1, -0.2])
        zeta = unit(conformal, z, [0.3, 1.0, 0.4])
        path = shoot_geodesic(conformal, z, zeta, max_length=0.5)
        m = path.t.size - 1
        back = shoot_geodesic(conformal, path.points[m], -path.velocities[m], max_length=0.5)
        assert np.linalg.norm(back.points[-1] - z) <= 1e-7

    def test_rejects_non_unit(self, flat):
        with pytest.raises(GeometryError):
            shoot_geodesic(flat, [0.5, 0.5, 0.5], [0.0, 2.0, 0.0])

    def test_rejects_outside(self, flat):
        with pytest.raises(GeometryError):
            shoot_geodesic(flat, [-0.1, 0.5, 0.5], [0.0, 1.0, 0.0])


class TestTransport:
    def test_flat_constant(self, flat):
        path = shoot_geodesic(flat, [0.5, 0.5, 0.5], [0.6, 0.8, 0.0])
        w = parallel_transport(flat, path, [1.0, -2.0, 0.5])
        assert np.array_equal(w, np.broadcast_to([1.0, -2.0, 0.5], w.shape))

    def test_inner_products_preserved(self, conformal, rng):
        z = np.array([0.5, 0.1, -0.2])
        path = shoot_geodesic(conformal, z, unit(conformal, z, [0.3, 1.0, 0.4]), transport=True)
        g = conformal.metric(path.points)
        # orthonormal pairs at every sample
        B = rng.normal(size=(3, 3))
        for u0, v0 in [(B[0], B[1]), (B[1], B[2])]:
            u = np.broadcast_to(u0, path.points.shape).copy()
            v = np.broadcast_to(v0, path.points.shape).copy()
            su = np.sqrt(np.einsum("ki,kij,kj->k", u, g, u))
            u /= su[:, None]
            v -= (np.einsum("ki,kij,kj->k", u, g, v))[:, None] * u
            v /= np.sqrt(np.einsum("ki,kij,kj->k", v, g, v))[:, None]
            assert np.max(np.abs(frame_inner_products(conformal, path, u, v))) <= 1e-8
            assert np.max(np.abs(frame_inner_products(conformal, path, u, u))) <= 1e-8

    @pytest.mark.parametrize("chart_name", ["conformal", "shell_out"])
    def test_conormal_covector_stays_conormal(self, chart_name, request):
        chart = request.getfixturevalue(chart_name)
        z = np.array([0.15, 0.1, -0.2])
        zeta = unit(chart, z, [0.05, 1.0, 0.4])
        eta0 = np.cross(zeta, [0.0, 0.0, 1.0])
        eta0 -= (eta0 @ zeta) / (zeta @ zeta) * zeta      # eta0(zeta) = 0
        path = shoot_geodesic(chart, z, zeta)
        eta = parallel_transport(chart, path, eta0, covector=True)
        assert np.max(np.abs(np.einsum("ki,ki->k", eta, path.velocities))) <= 1e-9

    def test_richardson_order(self, conformal):
        z = np.array([0.5, 0.1, -0.2])
        zeta = unit(conformal, z, [0.3, 1.0, 0.4])
        w0 = np.array([0.2, -0.5, 1.0])
        ends = []
        for h in (0.04, 0.02, 0.01):
            path = shoot_geodesic(conformal, z, zeta, step=h, max_length=0.6)
            ends.append(parallel_transport(conformal, path, w0, max_length=0.6)[-1])
        ratio = np.linalg.norm(ends[0] - ends[1]) / np.linalg.norm(ends[1] - ends[2])
        assert 14.0 <= ratio <= 18.0

    def test_rejects_nan(self, flat):
        path = shoot_geodesic(flat, [0.5, 0.5, 0.5], [0.0, 1.0, 0.0])
        with pytest.raises(FloatingPointError):
            parallel_transport(flat, path, [np.nan, 0.0, 0.0])


class TestConvexity:
    def test_slab_is_flat(self, flat):
        assert boundary_convexity_alpha(flat, [0.5, 0.5])["alpha"] == 0.0

    def test_inward_ball_is_convex(self):
        # k = (R - x)^2 sigma, g^xx = 1: H = (R - x) sigma, half of H relative to k is 1/(2R)
        for R in (1.0, 2.0):
            res = boundary_convexity_alpha(BallShellChart(3, R, 0.3, 0.6, "inward"), [0.2, -0.1])
            assert res["alpha"] == pytest.approx(0.5 / R, rel=1e-6)
            assert res["isotropic"]

    def test_outward_ball_is_concave(self, shell_out):
        # k = (R - w + x)^2 sigma: the same formula with the sign flipped
        res = boundary_convexity_alpha(shell_out, [0.2, -0.1])
        assert res["alpha"] == pytest.approx(-0.5 / 0.7, rel=1e-6)
        assert res["isotropic"]

    def test_anisotropic_reports_range(self):
        # g = diag(1, 1 + x, 1 + 2x): half of H at x = 0 is diag(-1/4, -1/2)
        axes = [np.linspace(0, 1, 5)] * 3
        X = np.meshgrid(*axes, indexing="ij")[0]
        samples = np.zeros(X.shape + (3, 3))
        samples[..., 0, 0] = 1.0
        samples[..., 1, 1] = 1.0 + X
        samples[..., 2, 2] = 1.0 + 2 * X
        res = boundary_convexity_alpha(SampledChart([0, 0, 0], [1, 1, 1], samples), [0.5, 0.5])
        assert not res["isotropic"]
        np.testing.assert_allclose(res["range"], (-0.5, -0.25), atol=1e-8)
        assert res["alpha"] == pytest.approx(-0.5, abs=1e-8)
