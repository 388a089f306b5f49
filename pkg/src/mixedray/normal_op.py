"""Cutoff profiles, the backprojection L and the weighted normal operator N_F."""

from __future__ import annotations

import math
import time
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.integrate import quad
from scipy.special import roots_jacobi

from .geometry import DEFAULT_STEP, GeometryError, MetricChart
from .tensors import Grid, GridError, tracefree_projector
from .transforms import (EXPONENT_WARN, KINDS, forward_batch, projectors_along, trace_batch,
                         weight_exponent)

DEFAULT_CAP = 8000
# ray step for dense assembly; the matrix is used with data built from
# itself, so the coarser step only shifts it slightly from pointwise N_F
ASSEMBLY_STEP = 1e-2


@dataclass(frozen=True)
class CutoffProfile:
    """Even non-negative cutoff with ``chi(0) = 1``.

    ``bump`` is ``exp(1 - 1/(1 - (s/width)^2))`` on ``|s| < width``;
    ``gaussian`` is ``exp(-s^2 / (2 nu))``.
    """

    kind: str = "bump"
    width: float = 1.0
    nu: float | None = None

    def __post_init__(self):
        if self.kind not in ("bump", "gaussian"):
            raise ValueError(f"unknown cutoff kind {self.kind!r}")
        if self.kind == "bump" and not 0 < self.width <= 1:
            raise ValueError("bump width must lie in (0, 1]")
        if self.kind == "gaussian" and not (self.nu and self.nu > 0):
            raise ValueError("gaussian cutoff needs nu > 0")

    @classmethod
    def gaussian_from_alpha(cls, alpha: float, F: float) -> "CutoffProfile":
        if alpha <= 0 or F <= 0:
            raise ValueError("the variance rule nu = alpha / F needs alpha > 0 and F > 0")
        return cls("gaussian", nu=alpha / F)

    def __call__(self, s):
        s = np.asarray(s, dtype=float)
        if self.kind == "gaussian":
            return np.exp(-s * s / (2 * self.nu))
        u = s / self.width
        out = np.zeros_like(u)
        inside = np.abs(u) < 1
        out[inside] = np.exp(1.0 - 1.0 / (1.0 - u[inside] ** 2))
        return out

    @property
    def half_support(self) -> float:
        return self.width if self.kind == "bump" else 6.0 * math.sqrt(self.nu)

    def l1_norm(self) -> float:
        if self.kind == "gaussian":
            return math.sqrt(2 * math.pi * self.nu)
        return 2 * quad(self, 0, self.width, epsabs=0, epsrel=1e-12, limit=200)[0]

    def rule(self, order: int):
        """Nodes ``s`` and weights already multiplied by ``chi(s)``.

        The bump uses the midpoint rule after ``s = width tanh(u)``, which
        converges much faster than Gauss-Legendre against the flat ends;
        the Gaussian uses Gauss-Hermite nodes.
        """
        if order < 2:
            raise ValueError("radial order must be at least 2")
        if self.kind == "gaussian":
            x, w = np.polynomial.hermite.hermgauss(order)
            scale = math.sqrt(2 * self.nu)
            return x * scale, w * scale
        U = 1.1 * order ** 0.22
        h = 2 * U / order
        u = -U + h * (np.arange(order) + 0.5)
        s = self.width * np.tanh(u)
        w = h * self.width / np.cosh(u) ** 2 * self(s)
        return s, w

    def to_dict(self) -> dict:
        return asdict(self)


def sphere_rule(dim: int, order: int):
    """Quadrature on the unit sphere ``S^dim`` in ``R^(dim+1)``.

    ``S^1`` uses equispaced angles; higher spheres split off one coordinate
    with Gauss-Jacobi nodes and recurse.
    """
    if dim == 0:
        return np.array([[1.0], [-1.0]]), np.array([1.0, 1.0])
    if dim == 1:
        th = 2 * np.pi * np.arange(order) / order
        return np.stack([np.cos(th), np.sin(th)], axis=1), np.full(order, 2 * np.pi / order)
    a = (dim - 2) / 2
    t, wt = roots_jacobi(max(order // 2, 2), a, a)
    sub, wsub = sphere_rule(dim - 1, order)
    r = np.sqrt(1 - t * t)
    pts = np.concatenate([np.repeat(t, sub.shape[0])[:, None],
                          (r[:, None, None] * sub[None]).reshape(-1, dim)], axis=1)
    return pts, np.outer(wt, wsub).ravel()


@dataclass(frozen=True)
class QuadratureSpec:
    radial: int = 16
    angular: int = 32
    step: float = DEFAULT_STEP

    def doubled(self) -> "QuadratureSpec":
        return QuadratureSpec(2 * self.radial, 2 * self.angular, self.step)


@dataclass
class RayFan:
    """All quadrature rays through one point."""

    point: np.ndarray
    s: np.ndarray          # (R,)
    omega: np.ndarray      # (R, n-1)
    weight: np.ndarray     # (R,) radial * angular weights (chi included)
    zeta: np.ndarray       # (R, n) unit-speed initial velocities
    theta: np.ndarray      # (R, n) reference covectors (0, k omega)
    proj: np.ndarray       # (R, n, n) backprojection projector
    cov: np.ndarray        # (R, n) x^2 g_sc(lambda d_x + omega d_y)

    @property
    def x(self) -> float:
        return float(self.point[0])


def ray_fan(chart: MetricChart, point, cutoff: CutoffProfile, quadspec: QuadratureSpec) -> RayFan:
    point = np.asarray(point, dtype=float)
    x = float(chart.bdf(point))
    if x <= 0:
        raise GeometryError("backprojection point must satisfy x > 0")
    chart.check_inside(point)
    n = chart.n
    s, ws = cutoff.rule(quadspec.radial)
    om, wo = sphere_rule(n - 2, quadspec.angular)
    S = np.repeat(s, om.shape[0])
    O = np.tile(om, (s.size, 1))
    W = np.outer(ws, wo).ravel()
    g = chart.metric(point)
    k = g[1:, 1:]
    zeta = np.concatenate([(x * S)[:, None], O], axis=1)
    zeta /= np.sqrt(np.einsum("ri,ij,rj->r", zeta, g, zeta))[:, None]
    kom = O @ k
    theta = np.concatenate([np.zeros((S.size, 1)), kom], axis=1)
    cov = np.concatenate([(S / x)[:, None], kom], axis=1)
    Wv = np.concatenate([np.zeros((S.size, 1)), O], axis=1)
    proj = np.eye(n) - Wv[:, :, None] * cov[:, None, :] / np.einsum("ri,ri->r", Wv, cov)[:, None, None]
    return RayFan(point, S, O, W, zeta, theta, proj, cov)


def backprojection_factors(kind: str, fan: RayFan) -> np.ndarray:
    """Per-ray linear maps from data vectors to the backprojected value.

    T1: ``(R, n, n)``; L11: ``(R, n*n, n)`` acting as
    ``v -> B[(p v) (x) x^2 g_sc(zeta)]`` with ``B`` the trace-free projector.
    Both carry ``x^-2`` and the ``d lambda = x ds`` Jacobian.
    """
    scale = fan.weight / fan.x
    if kind == "T1":
        return scale[:, None, None] * fan.proj
    if kind != "L11":
        raise ValueError(f"unknown kind {kind!r}")
    n = fan.proj.shape[-1]
    outer = np.einsum("rik,rj->rijk", fan.proj, fan.cov).reshape(-1, n * n, n)
    return scale[:, None, None] * (tracefree_projector(n) @ outer)


def apply_backprojection_L(kind: str, chart: MetricChart, point, data, cutoff: CutoffProfile,
                           quadspec: QuadratureSpec = QuadratureSpec()) -> np.ndarray:
    """Backproject ray data to ``point``.

    ``data`` is either an array ``(R, n)`` aligned with :func:`ray_fan` or a
    callable ``data(lam, omega)`` taking ``(R,)`` and ``(R, n-1)`` arrays.
    """
    fan = ray_fan(chart, point, cutoff, quadspec)
    if callable(data):
        vals = np.asarray(data(fan.x * fan.s, fan.omega), dtype=float)
    else:
        vals = np.asarray(data, dtype=float)
    if vals.shape != fan.zeta.shape:
        raise ValueError("ray data has the wrong shape")
    out = np.einsum("rok,rk->o", backprojection_factors(kind, fan), vals)
    n = chart.n
    return out if kind == "T1" else out.reshape(n, n)


def apply_normal_NF(kind: str, chart: MetricChart, f, point, F: float, cutoff: CutoffProfile,
                    quadspec: QuadratureSpec = QuadratureSpec()) -> np.ndarray:
    """``N_F f`` at one point, computed ray by ray without any matrix."""
    if F < 0:
        raise ValueError("F must be non-negative")
    fan = ray_fan(chart, point, cutoff, quadspec)
    data = forward_batch(chart, f, np.broadcast_to(fan.point, fan.zeta.shape), fan.zeta, fan.theta,
                         kind, step=quadspec.step, F=F, x_ref=np.full(fan.s.size, fan.x))
    out = np.einsum("rok,rk->o", backprojection_factors(kind, fan), data)
    n = chart.n
    return out if kind == "T1" else out.reshape(n, n)


# ---------------------------------------------------------------------------
# dense assembly

@dataclass
class NormalMatrix:
    kind: str
    grid: Grid
    F: float
    matrix: np.ndarray
    meta: dict = field(default_factory=dict)

    @property
    def block(self) -> int:
        return self.grid.n if self.kind == "T1" else self.grid.n ** 2

    def apply(self, values: np.ndarray) -> np.ndarray:
        return self.matrix @ np.asarray(values, dtype=float).ravel()

    def zero_columns(self) -> np.ndarray:
        return np.flatnonzero(~np.any(self.matrix != 0, axis=0))

    def diagnostics(self) -> dict:
        M = self.matrix
        norm = np.linalg.norm(M)
        sym = 0.5 * (M + M.T)
        return {"asymmetry": float(np.linalg.norm(M - M.T) / norm) if norm else 0.0,
                "sym_min_eig": float(np.linalg.eigvalsh(sym)[0]),
                "zero_columns": int(self.zero_columns().size)}


def _sample_operators(kind, p, frame, vel):
    """Matrices taking the field value at a sample to the transported integrand."""
    Tp = np.matmul(frame, p)
    if kind == "T1":
        return Tp
    n = vel.shape[-1]
    return np.einsum("sik,sj->sikj", Tp, vel).reshape(-1, n, n * n)


def _ray_sums(grid: Grid, R: int, ray, pos, C) -> np.ndarray:
    """``G[r, node] = sum_s interp_s(node) C_s`` over the samples of each ray.

    ``ray`` holds the local ray index of each sample.  The interpolation
    matrix is built directly in CSR form (a fixed stencil per sample).
    """
    idx, w = grid.interp_weights(pos)
    S, m = idx.shape
    N = grid.size
    cols = (ray[:, None] * N + idx).ravel()
    I = sp.csr_matrix((w.ravel(), cols, np.arange(0, S * m + 1, m)), shape=(S, R * N))
    G = I.T @ C.reshape(S, -1)
    return G.reshape(R, N, *C.shape[1:])


def _check_kinds(kinds) -> tuple:
    kinds = tuple(kinds)
    for kind in kinds:
        if kind not in KINDS:
            raise ValueError(f"unknown kind {kind!r}")
    return kinds


def _assemble(kinds, chart: MetricChart, rows: Grid, columns: list[Grid], F: float,
              cutoff: CutoffProfile, quadspec: QuadratureSpec, rays_per_chunk: int):
    """Blocks ``N_F`` from the basis fields of each column grid to the row nodes.

    Every ray first sums its samples against the interpolation stencil;
    the backprojection factor is applied once per point afterwards.
    Returns ``({kind: [block per column grid]}, meta)``.
    """
    n, N = rows.n, rows.size
    blocks = {k: (n if k == "T1" else n * n) for k in kinds}
    start = time.perf_counter()
    nodes = rows.nodes
    fans = [ray_fan(chart, z, cutoff, quadspec) for z in nodes]
    R = fans[0].s.size
    per_chunk = max(1, rays_per_chunk // R)
    out = {k: [np.zeros((N, blocks[k], c.size, blocks[k])) for c in columns] for k in kinds}
    boxes = [(np.array(c.lower) - 1e-9, np.array(c.upper) + 1e-9) for c in columns]
    peak = 0.0
    for c0 in range(0, N, per_chunk):
        chunk = list(range(c0, min(N, c0 + per_chunk)))
        z = np.repeat(nodes[chunk], R, axis=0)
        zeta = np.concatenate([fans[i].zeta for i in chunk])
        theta = np.concatenate([fans[i].theta for i in chunk])
        xref = np.repeat(chart.bdf(nodes[chunk]), R)
        batch = trace_batch(chart, z, zeta, theta, quadspec.step)
        sums = {k: [[np.zeros((R, c.size, n, blocks[k])) for c in columns] for _ in chunk] for k in kinds}
        for mask, w, pos, vel, frame, th in batch.samples():
            e, pk = weight_exponent(F, chart.bdf(pos), xref)
            peak = max(peak, pk)
            for b, (col, (lo, hi)) in enumerate(zip(columns, boxes)):
                # samples outside a column box carry exactly zero weight
                inside = mask & np.all((pos >= lo) & (pos <= hi), axis=-1)
                for a in range(len(chunk)):
                    r, k_ = np.nonzero(inside[a * R:(a + 1) * R])
                    if r.size == 0:
                        continue
                    g = r + a * R
                    V = vel[g, k_]
                    p = projectors_along(V, th[g, k_])
                    scale = (w[g, k_] * np.exp(e[g, k_]))[:, None, None]
                    for kind in kinds:
                        C = _sample_operators(kind, p, frame[g, k_], V) * scale
                        sums[kind][a][b] += _ray_sums(col, R, r, pos[g, k_], C)
        for kind in kinds:
            q = blocks[kind]
            for a, i in enumerate(chunk):
                left = backprojection_factors(kind, fans[i]).transpose(1, 0, 2).reshape(q, R * n)
                for b, col in enumerate(columns):
                    right = sums[kind][a][b].transpose(0, 2, 1, 3).reshape(R * n, col.size * q)
                    out[kind][b][i] = (left @ right).reshape(q, col.size, q)
    if peak > EXPONENT_WARN:
        warnings.warn(f"weight exponent reached {peak:.1f} during assembly", RuntimeWarning, stacklevel=3)
    meta = {"F": float(F), "cutoff": cutoff.to_dict(), "quadrature": asdict(quadspec),
            "rays_per_point": int(R), "peak_exponent": float(peak),
            "assembly_seconds": time.perf_counter() - start}
    mats = {k: [B.reshape(N * blocks[k], -1) for B in out[k]] for k in kinds}
    return mats, meta


def _check_rows(chart: MetricChart, grid: Grid):
    if grid.n != chart.n:
        raise GridError("grid and chart dimensions differ")
    if min(grid.shape) < 5:
        raise GridError("grid needs at least 5 nodes per axis")


def assemble_normal_matrices(kinds, chart: MetricChart, grid: Grid, F: float,
                             cutoff: CutoffProfile, quadspec: QuadratureSpec = QuadratureSpec(),
                             cap: int = DEFAULT_CAP, rays_per_chunk: int = 4096) -> dict[str, NormalMatrix]:
    """Dense matrices of ``N_F`` for the grid's cardinal basis fields.

    Row block ``i`` is ``N_F`` evaluated at node ``i``; column block ``j``
    holds the response to the basis field of node ``j`` (hat functions for
    ``order=1`` grids, Lagrange cubics for ``order=3``).  Several kinds
    share one set of traced rays.
    """
    kinds = _check_kinds(kinds)
    _check_rows(chart, grid)
    for k in kinds:
        q = grid.n if k == "T1" else grid.n ** 2
        if grid.size * q > cap:
            raise GridError(f"{k} matrix would have {grid.size * q} unknowns (cap {cap})")
    mats, meta = _assemble(kinds, chart, grid, [grid], F, cutoff, quadspec, rays_per_chunk)
    return {k: NormalMatrix(k, grid, float(F), mats[k][0], {"kind": k, "grid": grid.to_dict(), **meta})
            for k in kinds}


def assemble_normal_matrix(kind: str, chart: MetricChart, grid: Grid, F: float,
                           cutoff: CutoffProfile, quadspec: QuadratureSpec = QuadratureSpec(),
                           cap: int = DEFAULT_CAP) -> NormalMatrix:
    return assemble_normal_matrices((kind,), chart, grid, F, cutoff, quadspec, cap)[kind]


def assemble_blocks(kind: str, chart: MetricChart, rows: Grid, columns: list[Grid], F: float,
                    cutoff: CutoffProfile, quadspec: QuadratureSpec = QuadratureSpec(),
                    rays_per_chunk: int = 4096) -> list[np.ndarray]:
    """``N_F`` from the basis fields of several grids, evaluated at the nodes of ``rows``.

    All grids are given in the coordinates of ``chart``.  Used when a field
    is represented on a different grid than the one carrying the data.
    """
    (kind,) = _check_kinds((kind,))
    _check_rows(chart, rows)
    mats, _ = _assemble((kind,), chart, rows, list(columns), F, cutoff, quadspec, rays_per_chunk)
    return mats[kind]
