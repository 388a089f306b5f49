"""Regularized reconstruction from normal-operator data, and the layer sweep."""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .gauge import GaugeSystem, SolverError
from .geometry import BallShellChart
from .normal_op import (CutoffProfile, NormalMatrix, QuadratureSpec, assemble_blocks)
from .tensors import Grid, GridError

MODES = ("T1", "L11")
DEFAULT_REG = 1e-6
CG_TOL = 1e-8


class ConfigMismatch(ValueError):
    pass


@dataclass
class ReconstructionReport:
    mode: str
    grid: dict
    F: float
    regularization: float
    iterations: int
    relative_error: float | None
    residual: float
    tolerance: float
    condition_estimate: float
    unknowns: int
    converged: bool
    seconds: float = 0.0
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


def operator_norm(M: np.ndarray) -> float:
    """Largest singular value, from a deterministic Lanczos run."""
    M = np.asarray(M, dtype=float)
    if not np.any(M):
        return 0.0
    if min(M.shape) < 64:
        return float(np.linalg.norm(M, 2))
    v0 = np.ones(min(M.shape))
    return float(spla.svds(M, k=1, v0=v0, return_singular_vectors=False)[0])


class TikhonovSystem:
    """``(K^T K + lam^2 I) z = K^T d`` with the normal matrix formed once."""

    def __init__(self, K: np.ndarray, lam: float):
        self.K = np.asarray(K, dtype=float)
        self.lam = float(lam)
        self.A = self.K.T @ self.K
        self.A[np.diag_indices_from(self.A)] += self.lam ** 2

    def condition(self) -> float:
        ev = sla.eigvalsh(self.A)
        return float(ev[-1] / ev[0]) if ev[0] > 0 else float("inf")

    def solve(self, d: np.ndarray, tol: float = CG_TOL, maxiter: int | None = None):
        """Returns ``(z, iterations, relative residual)``; raises if CG stalls."""
        b = self.K.T @ np.asarray(d, dtype=float)
        m = b.size
        bnorm = np.linalg.norm(b)
        if bnorm == 0:
            return np.zeros(m), 0, 0.0
        diag = self.A.diagonal().copy()
        diag[diag == 0] = 1.0
        pre = spla.LinearOperator((m, m), matvec=lambda r: r / diag)
        count = [0]
        maxiter = maxiter or 20 * m

        def tick(_):
            count[0] += 1

        z, info = spla.cg(self.A, b, rtol=tol, atol=0.0, maxiter=maxiter, M=pre, callback=tick)
        res = float(np.linalg.norm(self.A @ z - b) / bnorm)
        if info != 0:
            raise SolverError(f"CG did not reach {tol:g} in {maxiter} iterations (residual {res:.2e})")
        return z, count[0], res


def tracefree_interior_basis(grid: Grid) -> sp.csr_matrix:
    """Columns spanning trace-free (1,1) values on the interior nodes.

    Each interior node gets an orthonormal basis of the trace-free
    ``n x n`` matrices; boundary nodes are held at zero.
    """
    n = grid.n
    local = sla.null_space(np.eye(n).reshape(1, n * n))          # (n^2, n^2 - 1)
    inner = np.flatnonzero(grid.interior)
    blocks = [sp.csr_matrix(local)] * inner.size
    body = sp.block_diag(blocks, format="csr")
    rows = (inner[:, None] * n * n + np.arange(n * n)).ravel()
    P = sp.csr_matrix((np.ones(rows.size), (rows, np.arange(rows.size))),
                      shape=(grid.size * n * n, rows.size))
    return (P @ body).tocsr()


@dataclass
class Reconstruction:
    values: np.ndarray              # (N, n) for T1, (N, n, n) solenoidal part for L11
    report: ReconstructionReport
    fit: np.ndarray | None = None   # L11: full fitted field including its potential


class Reconstructor:
    """Prepared solver for one normal matrix; reusable across data sets.

    T1 solves for every nodal vector.  L11 solves for a trace-free field
    held at zero on the grid boundary plus a potential ``d^B_F u`` with
    ``u`` interior; the potential absorbs the gauge freedom of the data and
    the answer is the solenoidal part of the fitted field.
    """

    def __init__(self, normal: NormalMatrix, gauge: GaugeSystem | None = None,
                 reg: float | None = None, reg_factor: float = DEFAULT_REG):
        if normal.kind not in MODES:
            raise ValueError(f"unknown mode {normal.kind!r}")
        self.normal = normal
        self.mode = normal.kind
        M = normal.matrix
        if M.shape[0] != M.shape[1]:
            raise ConfigMismatch("normal matrix is not square")
        self.norm = operator_norm(M)
        self.reg = float(reg) if reg is not None else reg_factor * self.norm
        if self.mode == "T1":
            self.system = TikhonovSystem(M, self.reg)
            self.gauge = None
        else:
            if gauge is None:
                raise ConfigMismatch("L11 reconstruction needs a gauge system")
            if gauge.grid.to_dict() != normal.grid.to_dict() or abs(gauge.F - normal.F) > 1e-12:
                raise ConfigMismatch("gauge system and normal matrix disagree on grid or F")
            self.gauge = gauge
            self.E = tracefree_interior_basis(normal.grid)
            ME = (self.E.T @ M.T).T
            MD = (gauge.D_int.T @ M.T).T
            self.split_at = ME.shape[1]
            self.system = TikhonovSystem(np.hstack([ME, MD]), self.reg)
        self._condition = None

    @property
    def condition(self) -> float:
        if self._condition is None:
            self._condition = self.system.condition()
        return self._condition

    def __call__(self, data, truth=None, tol: float = CG_TOL) -> Reconstruction:
        start = time.perf_counter()
        grid = self.normal.grid
        n, N = grid.n, grid.size
        data = np.asarray(data, dtype=float).ravel()
        if data.size != self.normal.matrix.shape[0]:
            raise ConfigMismatch("data length does not match the normal matrix")
        z, its, res = self.system.solve(data, tol)
        fit = None
        if self.mode == "T1":
            values = z.reshape(N, n)
            ref = None if truth is None else np.asarray(truth, dtype=float).reshape(N, n)
        else:
            field_ = (self.E @ z[:self.split_at]).reshape(N, n, n)
            values = self.gauge.split(field_)[0]
            fit = field_ + self.gauge.potential(z[self.split_at:])
            ref = None if truth is None else self.gauge.split(np.asarray(truth, dtype=float).reshape(N, n, n))[0]
        err = None
        if ref is not None:
            scale = np.linalg.norm(ref)
            err = float(np.linalg.norm(values - ref) / scale) if scale else float(np.linalg.norm(values))
        report = ReconstructionReport(
            mode=self.mode, grid=grid.to_dict(), F=self.normal.F, regularization=self.reg,
            iterations=its, relative_error=err, residual=res, tolerance=tol,
            condition_estimate=self.condition, unknowns=int(self.system.A.shape[0]),
            converged=res <= tol, seconds=time.perf_counter() - start,
            extra={"operator_norm": self.norm})
        return Reconstruction(values, report, fit)


def reconstruct(mode: str, normal: NormalMatrix, data, gauge: GaugeSystem | None = None,
                reg: float | None = None, truth=None, tol: float = CG_TOL) -> Reconstruction:
    if mode != normal.kind:
        raise ConfigMismatch(f"mode {mode!r} does not match a {normal.kind} matrix")
    return Reconstructor(normal, gauge, reg)(data, truth, tol)


# ---------------------------------------------------------------------------
# studies


def box_bump(grid: Grid, width: float = 0.18) -> np.ndarray:
    """Gaussian centred in the grid box, widths a fixed fraction of each side."""
    lo, hi = np.array(grid.lower), np.array(grid.upper)
    c = 0.5 * (lo + hi)
    return np.exp(-np.sum(((grid.nodes - c) / (width * (hi - lo))) ** 2, axis=-1))


def interior_potential(gauge: GaugeSystem, power: int = 1, direction=None) -> np.ndarray:
    """``d^B_F u`` for ``u`` a product of sines vanishing on the grid boundary."""
    grid = gauge.grid
    n = grid.n
    lo, hi = np.array(grid.lower), np.array(grid.upper)
    direction = np.ones(n) if direction is None else np.asarray(direction, dtype=float)
    pts = grid.nodes[gauge.cols // n]
    s = np.prod(np.sin(np.pi * (pts - lo) / (hi - lo)), axis=1) ** power
    return gauge.potential(s * direction[gauge.cols % n])


def noise_sweep(rec: Reconstructor, truth, levels, seed: int = 0) -> list[dict]:
    """Relative error against relative Gaussian data noise (reported only)."""
    clean = rec.normal.apply(truth)
    rng = np.random.default_rng(seed)
    e = rng.standard_normal(clean.size)
    e *= np.linalg.norm(clean) / np.linalg.norm(e)
    out = []
    for lv in levels:
        r = rec(clean + lv * e, truth)
        out.append({"noise": float(lv), "relative_error": r.report.relative_error})
    return out


def gauge_sensitivity(rec: Reconstructor, truth, potential) -> dict:
    """Change of the recovered solenoidal part when a potential is added."""
    M = rec.normal
    base = rec(M.apply(truth), truth)
    pert = rec(M.apply(np.asarray(truth) + np.asarray(potential).reshape(np.shape(truth))), truth)
    change = np.linalg.norm(pert.values - base.values) / np.linalg.norm(base.values)
    return {"error": base.report.relative_error, "perturbed_error": pert.report.relative_error,
            "change": float(change)}


# ---------------------------------------------------------------------------
# layer stripping


@dataclass(frozen=True)
class Layer:
    """One shell ``{R - depth <= r}``; ``grid`` is in that shell's chart,
    where the first coordinate is ``x = r - (R - depth)``."""

    depth: float
    grid: Grid


def nested_layers(levels, shape, *, radius: float = 1.0, lateral: float = 0.3,
                  gap: float = 0.15, order: int = 3) -> list[Layer]:
    """Stacked layer grids, one per shell depth.

    Layer ``j`` starts ``gap`` times its thickness above its own inner
    sphere and ends on the inner sphere of layer ``j-1``.  Rays from a
    shallower layer never cross that sphere, so they do not see the deeper
    grids.  The first layer stops the same relative gap below the outer
    sphere.
    """
    levels = [float(c) for c in levels]
    if any(b <= a for a, b in zip(levels, levels[1:])) or levels[0] <= 0 or levels[-1] >= radius:
        raise ValueError("levels must increase strictly inside (0, radius)")
    out = []
    prev = 0.0
    for j, c in enumerate(levels):
        thick = c - prev
        hi = c - gap * thick if j == 0 else thick
        lower = (gap * thick,) + (-lateral,) * (len(shape) - 1)
        upper = (hi,) + (lateral,) * (len(shape) - 1)
        out.append(Layer(c, Grid(lower, upper, tuple(shape), order=order)))
        prev = c
    return out


def _shifted(grid: Grid, dx: float) -> Grid:
    lower = (grid.lower[0] + dx,) + tuple(grid.lower[1:])
    upper = (grid.upper[0] + dx,) + tuple(grid.upper[1:])
    return Grid(lower, upper, grid.shape, order=grid.order)


@dataclass
class LayerSweep:
    reports: list[ReconstructionReport]
    values: list[np.ndarray]
    stitched_error: float | None
    seconds: float


def layer_sweep(layers: list[Layer], truth, *, F: float, cutoff: CutoffProfile,
                quadspec: QuadratureSpec = QuadratureSpec(), radius: float = 1.0,
                half_angle: float = 0.6, reg_factor: float = DEFAULT_REG,
                tol: float = CG_TOL) -> LayerSweep:
    """T1 layer stripping from the outer sphere inward.

    ``truth(points)`` takes points ``(r, y)`` and returns chart-basis
    vectors (the bases of all layer charts coincide).  Data for layer ``j``
    is ``N_F`` of the truth in that layer's chart; the re-simulated
    contribution of every shallower reconstruction is subtracted before
    solving on layer ``j``.  Nodes shared with a shallower layer keep the
    shallower value.
    """
    start = time.perf_counter()
    depths = [L.depth for L in layers]
    if any(b <= a for a, b in zip(depths, depths[1:])):
        raise ValueError("layers must be ordered by strictly increasing depth")
    true_vals = [np.asarray(truth(_radial(L, radius)), dtype=float) for L in layers]
    reports, recovered = [], []
    for j, L in enumerate(layers):
        chart = BallShellChart(L.grid.n, radius, L.depth, half_angle, orientation="outward")
        cols = [_shifted(K.grid, L.depth - K.depth) for K in layers]
        blocks = assemble_blocks("T1", chart, L.grid, cols, F, cutoff, quadspec)
        data = sum(B @ v.ravel() for B, v in zip(blocks, true_vals))
        for k in range(j):
            data = data - blocks[k] @ recovered[k].ravel()
        normal = NormalMatrix("T1", L.grid, float(F), blocks[j], {"depth": L.depth})
        rec = Reconstructor(normal, reg_factor=reg_factor)(data, true_vals[j], tol)
        rec.report.extra["depth"] = L.depth
        reports.append(rec.report)
        recovered.append(rec.values)
    err = _stitched_error(layers, recovered, true_vals, radius)
    return LayerSweep(reports, recovered, err, time.perf_counter() - start)


def _radial(layer: Layer, radius: float) -> np.ndarray:
    """Layer nodes with the first coordinate replaced by the radius."""
    p = layer.grid.nodes.copy()
    p[:, 0] += radius - layer.depth
    return p


def _stitched_error(layers, recovered, true_vals, radius) -> float:
    seen: list[np.ndarray] = []
    num = den = 0.0
    for L, got, ref in zip(layers, recovered, true_vals):
        r = _radial(L, radius)
        keep = np.ones(L.grid.size, dtype=bool)
        for prev in seen:
            d = np.min(np.linalg.norm(r[:, None, :] - prev[None, :, :], axis=-1), axis=1)
            keep &= d > 1e-9
        num += float(np.sum((got[keep] - ref[keep]) ** 2))
        den += float(np.sum(ref[keep] ** 2))
        seen.append(r)
    return float(np.sqrt(num / den)) if den else 0.0
