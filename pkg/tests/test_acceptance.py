"""End-to-end acceptance checks; each prints one ``criterion k: PASS/FAIL`` line."""

import time
from fractions import Fraction

import numpy as np
import pytest

from fields import A0, BumpPotential, admissible_rays, smooth_tracefree
from mixedray.gauge import GaugeSystem
from mixedray.geometry import frame_inner_products, parallel_transport, shoot_geodesic
from mixedray.inversion import (Reconstructor, box_bump, gauge_sensitivity, interior_potential,
                                layer_sweep, nested_layers)
from mixedray.normal_op import (CutoffProfile, QuadratureSpec, apply_normal_NF,
                                assemble_normal_matrices)
from mixedray.symbols import (direction_grid, ellipticity_scan, equatorial_integral,
                              extension_coefficients, gauge_symbol_check, integrand_matrix,
                              kernel_system_check)
from mixedray.tensors import Grid
from mixedray.transforms import forward_batch, mixed_classic_batch

SHELL_BOX = ([0.05, -0.3, -0.3], [0.25, 0.3, 0.3])
CONFORMAL_BOX = ([0.3, -0.5, -0.5], [0.7, 0.5, 0.5])


def test_criterion_1_transform_equivalence(shell_out, conformal, rng, record_criterion):
    start = time.perf_counter()
    worst = 0.0
    for chart, box in ((shell_out, SHELL_BOX), (conformal, CONFORMAL_BOX)):
        z, zeta, theta, eta0 = admissible_rays(chart, rng, 200, *box)
        vec = forward_batch(chart, smooth_tracefree, z, zeta, theta, "L11")
        classic = mixed_classic_batch(chart, smooth_tracefree, z, zeta, eta0)
        gap = np.abs(np.einsum("ri,ri->r", vec, eta0) - classic) / np.maximum(1.0, np.abs(classic))
        worst = max(worst, float(gap.max()))
    secs = time.perf_counter() - start
    ok = worst <= 1e-6 and secs <= 60
    record_criterion(1, ok, f"max scaled gap {worst:.2e} (<= 1e-6) over 2 x 200 rays, {secs:.1f} s")
    assert ok


def test_criterion_2_gauge_annihilation(shell_out, rng, record_criterion):
    start = time.perf_counter()
    z, zeta, theta, _ = admissible_rays(shell_out, rng, 50, *SHELL_BOX)
    w = lambda p: (np.sin(5 * p[..., 0]) * np.cos(p[..., 1]) + p[..., 2])[..., None, None] * np.eye(3)
    trace_worst = float(np.abs(forward_batch(shell_out, w, z, zeta, theta, "L11")).max())

    potential_worst = 0.0
    for _ in range(50):
        r = rng.uniform(0.1, 0.12)
        c = np.array([rng.uniform(r + 0.02, 0.28 - r), *rng.uniform(-0.3, 0.3, size=2)])
        v = BumpPotential(c, r, rng.normal(size=3))
        zs, zetas, thetas, _ = admissible_rays(shell_out, rng, 4, c - 1e-3, c + 1e-3)
        out = forward_batch(shell_out, v.dB(shell_out), zs, zetas, thetas, "L11")
        potential_worst = max(potential_worst, float(np.abs(out).max()) / v.norm)

    # ray k carries the constant field consts[k]; by linearity it is assembled from basis fields
    consts = rng.normal(size=(50, 3))
    basis = [forward_batch(shell_out, lambda p, e=e: np.broadcast_to(e, p.shape), z, zeta, theta, "T1")
             for e in np.eye(3)]
    t1 = sum(consts[:, i, None] * basis[i] for i in range(3))
    t1_min = float((np.linalg.norm(t1, axis=1) / np.linalg.norm(consts, axis=1)).min())
    secs = time.perf_counter() - start
    ok = trace_worst <= 1e-12 and potential_worst <= 1e-5 and t1_min > 0 and secs <= 60
    record_criterion(2, ok, f"trace {trace_worst:.1e} (<= 1e-12), potentials {potential_worst:.1e}|v| "
                            f"(<= 1e-5), min |T1 c|/|c| {t1_min:.3f} (> 0), {secs:.1f} s")
    assert ok


def test_criterion_3_ellipticity(record_criterion):
    start = time.perf_counter()
    dirs = direction_grid(3, 64)
    Fs = (1 / 0.05, 1 / 0.1, 1 / 0.2)
    reports = {
        "T1_FIBER": ellipticity_scan("T1_FIBER", dirs, restricted=False),
        "T1_BASE": ellipticity_scan("T1_BASE", dirs, Fs, restricted=False),
        "L11_FIBER": ellipticity_scan("L11_FIBER", dirs),
        "L11_BASE": ellipticity_scan("L11_BASE", dirs, Fs),
    }
    dims = {k: {r["dim"] for r in rep.rows} for k, rep in reports.items()}
    secs = time.perf_counter() - start
    ok = (all(rep.passed for rep in reports.values()) and dims["L11_FIBER"] == {5}
          and dims["L11_BASE"] == {5} and secs <= 120)
    mins = ", ".join(f"{k} {rep.min_eig:.2e}" for k, rep in reports.items())
    record_criterion(3, ok, f"min eigenvalues {mins}; L11 subspace dims {sorted(dims['L11_BASE'])}, {secs:.1f} s")
    assert ok


def test_criterion_4_closed_forms(record_criterion):
    m = equatorial_integral("T1_FIBER", 1.0, [0.0, 0.0]).matrix
    want = np.diag([2 * np.pi, np.pi, np.pi])
    rel = float(np.abs(m - want).max() / np.pi)
    Y = np.array([0.6, 0.8])
    display = np.array([[1.0, 0.0, 0.0],
                        [0.0, 1 - Y[0] ** 2, -Y[0] * Y[1]],
                        [0.0, -Y[0] * Y[1], 1 - Y[1] ** 2]])
    exact = bool(np.array_equal(integrand_matrix("T1_FIBER", S=0.0, Y=Y), display))
    ok = rel <= 1e-6 and exact
    record_criterion(4, ok, f"diag(2pi, pi, pi) relative error {rel:.1e} (<= 1e-6), S=0 display exact: {exact}")
    assert ok


def test_criterion_5_gauge_symbols(rng, record_criterion):
    comp = dec = 0.0
    m_min = np.inf
    for _ in range(100):
        res = gauge_symbol_check(rng.normal(), rng.normal(size=2), abs(rng.normal()))
        comp, dec = max(comp, res["composition"]), max(dec, res["decomposition"])
        m_min = min(m_min, res["M_min_eig"])
    det_gap = max(abs(kernel_system_check(r) + 2 * (r + 1) ** 2) for r in np.linspace(0, 10, 101))
    ext = extension_coefficients()
    ok = (comp <= 1e-12 and dec <= 1e-12 and m_min >= -1e-12 and det_gap <= 1e-12
          and ext == (Fraction(-6), Fraction(16), Fraction(-9)))
    record_criterion(5, ok, f"composition {comp:.1e}, decomposition {dec:.1e} (<= 1e-12), min eig M {m_min:.2e}, "
                            f"det gap {det_gap:.1e}, extension {tuple(str(a) for a in ext)}")
    assert ok


def test_criterion_6_discrete_gauge(shell_out, rng, record_criterion):
    start = time.perf_counter()
    grid = Grid((0.1, -0.3, -0.3), (0.28, 0.3, 0.3), (6, 6, 6))
    system = GaugeSystem(shell_out, grid, 5.0)
    lam = system.min_eigenvalue()
    f = rng.normal(size=(grid.size, 3, 3))
    f -= np.trace(f, axis1=1, axis2=2)[:, None, None] / 3 * np.eye(3)
    S, P = system.split(f)
    # S is formed as f - P, so S + P returns f up to one rounding
    sum_gap = float(np.abs(S + P - f).max() / np.abs(f).max())
    pot = system.potential(rng.normal(size=system.unknowns))
    kill = float(np.linalg.norm(system.split(pot)[0]) / np.linalg.norm(pot))
    secs = time.perf_counter() - start
    ok = (system.hermitian_residual <= 1e-12 and lam > 0 and sum_gap <= 4 * np.finfo(float).eps
          and kill <= 1e-6 and secs <= 120)
    record_criterion(6, ok, f"hermitian residual {system.hermitian_residual:.1e}, min eig {lam:.3f} (> 0), "
                            f"S+P-f {sum_gap:.1e}, potential left {kill:.1e} (<= 1e-6), {secs:.1f} s")
    assert ok


@pytest.mark.slow
def test_criterion_7_local_inversion(shell_out, record_criterion):
    start = time.perf_counter()
    grid = Grid((0.12, -0.3, -0.3), (0.28, 0.3, 0.3), (8, 8, 8))
    mats = assemble_normal_matrices(("T1", "L11"), shell_out, grid, 5.0, CutoffProfile(),
                                    QuadratureSpec(16, 32, 1e-2))
    bump = box_bump(grid)
    t1_truth = bump[:, None] * np.array([0.3, 1.0, -0.5])
    t1 = Reconstructor(mats["T1"])(mats["T1"].apply(t1_truth), t1_truth).report.relative_error

    gauge = GaugeSystem(shell_out, grid, 5.0)
    truth = bump[:, None, None] * A0
    du = interior_potential(gauge, 1, (1.0, -0.5, 0.3))
    du *= np.linalg.norm(gauge.split(truth)[0]) / np.linalg.norm(du)
    res = gauge_sensitivity(Reconstructor(mats["L11"], gauge), truth, du)
    secs = time.perf_counter() - start
    ok = t1 <= 0.05 and res["error"] <= 0.05 and res["change"] <= 0.01 and secs <= 600
    record_criterion(7, ok, f"T1 error {t1:.1e}, L11 solenoidal error {res['error']:.1e} (<= 5%), "
                            f"potential change {res['change']:.1e} (<= 1%), {secs:.0f} s")
    assert ok


@pytest.mark.slow
@pytest.mark.filterwarnings("ignore:weight exponent reached:RuntimeWarning")
def test_criterion_8_layer_stripping(record_criterion):
    start = time.perf_counter()
    layers = nested_layers([0.15, 0.3], (6, 6, 6))
    c, w = np.array([0.86, 0.0, 0.0]), np.array([0.06, 0.12, 0.12])

    def truth(p):
        return np.exp(-np.sum(((p - c) / w) ** 2, axis=-1))[:, None] * np.array([0.3, 1.0, -0.5])

    res = layer_sweep(layers, truth, F=5.0, cutoff=CutoffProfile(), quadspec=QuadratureSpec(16, 32, 1e-2))
    secs = time.perf_counter() - start
    ok = res.stitched_error <= 0.10 and all(r.converged for r in res.reports) and secs <= 900
    record_criterion(8, ok, f"stitched T1 error {res.stitched_error:.1e} (<= 10%) over 2 shells, {secs:.0f} s")
    assert ok


def test_criterion_9_numerics_hygiene(conformal, shell_out, record_criterion):
    z = np.array([0.5, 0.1, -0.2])
    v = np.array([0.3, 1.0, 0.4])
    zeta = v / conformal.norm(z, v)
    path = shoot_geodesic(conformal, z, zeta, transport=True)
    speed = float(np.abs(path.speed(conformal) - 1).max())

    g = conformal.metric(path.points)
    u = np.broadcast_to([1.0, 0.0, 0.0], path.points.shape).copy()
    u /= np.sqrt(np.einsum("ki,kij,kj->k", u, g, u))[:, None]
    inner = float(np.abs(frame_inner_products(conformal, path, u, u)).max())

    ends = []
    for h in (0.04, 0.02, 0.01):
        p = shoot_geodesic(conformal, z, zeta, step=h, max_length=0.6)
        ends.append(parallel_transport(conformal, p, [0.2, -0.5, 1.0], max_length=0.6)[-1])
    order = float(np.log2(np.linalg.norm(ends[0] - ends[1]) / np.linalg.norm(ends[1] - ends[2])))

    doubling = 0.0
    fields = {"T1": lambda p: smooth_tracefree(p)[..., 0], "L11": smooth_tracefree}
    for kind, f in fields.items():
        for point in ([0.2, 0.1, -0.05], [0.12, -0.2, 0.15]):
            base = apply_normal_NF(kind, shell_out, f, point, 5.0, CutoffProfile(), QuadratureSpec())
            fine = apply_normal_NF(kind, shell_out, f, point, 5.0, CutoffProfile(), QuadratureSpec().doubled())
            doubling = max(doubling, float(np.abs(base - fine).max() / np.abs(fine).max()))
    ok = speed <= 1e-8 and inner <= 1e-8 and order >= 3.8 and doubling <= 1e-6
    record_criterion(9, ok, f"speed drift {speed:.1e}, inner-product drift {inner:.1e} (<= 1e-8), "
                            f"Richardson order {order:.2f} (>= 3.8), N_F doubling {doubling:.1e} (<= 1e-6)")
    assert ok
