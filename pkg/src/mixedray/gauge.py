"""Dirichlet problem for Delta^B_F = delta^B_F d^B_F and the solenoidal/potential split."""

from __future__ import annotations

from functools import cached_property

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .geometry import MetricChart
from .tensors import CovariantDerivative, Grid, GridError


class SolverError(RuntimeError):
    pass


class GaugeSystem:
    """Discrete Delta^B_F on zero-Dirichlet interior vector unknowns.

    ``stiffness`` is the weak form ``D_int^T W_t D_int`` of ``-Delta^B_F``; it
    is symmetric by construction and is paired with the block ``mass``
    matrix ``W_v`` of the interior nodes.
    """

    def __init__(self, chart: MetricChart, grid: Grid, F: float, weight: str = "scattering"):
        if min(grid.shape) < 5:
            raise GridError("gauge system needs at least 5 nodes per axis")
        self.chart, self.grid, self.F, self.weight = chart, grid, float(F), weight
        self.op = CovariantDerivative(chart, grid, F, weight)
        n = grid.n
        self.cols = self.op.interior_columns()
        bnodes = np.flatnonzero(grid.boundary)
        self.bcols = (bnodes[:, None] * n + np.arange(n)).ravel()
        D = self.op.matrix
        self.D_int = D[:, self.cols].tocsc()
        self.D_bd = D[:, self.bcols].tocsc()
        K = (self.D_int.T @ (self.op.Wt @ self.D_int)).tocsr()
        scale = sp.linalg.norm(K)
        self.hermitian_residual = float(sp.linalg.norm(K - K.T) / scale) if scale else 0.0
        self.stiffness = ((K + K.T) * 0.5).tocsc()
        self.mass = self.op.Wv[self.cols][:, self.cols].tocsc()

    @property
    def unknowns(self) -> int:
        return self.cols.size

    @cached_property
    def _lu(self):
        return spla.splu(self.stiffness)

    def eigenvalues(self) -> np.ndarray:
        """Generalized eigenvalues of ``-Delta^B_F`` in the weighted geometry."""
        return sla.eigh(self.stiffness.toarray(), self.mass.toarray(), eigvals_only=True)

    def min_eigenvalue(self) -> float:
        return float(self.eigenvalues()[0])

    def rank(self) -> int:
        return int(np.linalg.matrix_rank(self.stiffness.toarray()))

    def laplacian(self, u: np.ndarray) -> np.ndarray:
        """``Delta^B_F u`` at interior nodes for a full nodal field ``u``."""
        u = np.asarray(u, dtype=float).ravel()
        T = self.op.matrix @ u
        flux = self.D_int.T @ (self.op.Wt @ T)
        return -spla.spsolve(self.mass, flux)

    def solve_dirichlet(self, rhs: np.ndarray, boundary: np.ndarray | None = None,
                        rtol: float = 1e-10) -> np.ndarray:
        """Solve ``Delta^B_F u = rhs`` inside with ``u = boundary`` on the grid boundary.

        ``rhs`` and ``boundary`` are full nodal fields ``(N, n)``; only the
        interior of ``rhs`` and the boundary of ``boundary`` are read.
        Returns the full nodal solution.
        """
        N, n = self.grid.size, self.grid.n
        rhs = np.asarray(rhs, dtype=float).reshape(N * n)
        ub = np.zeros(self.bcols.size)
        if boundary is not None:
            ub = np.asarray(boundary, dtype=float).reshape(N * n)[self.bcols]
        b = -(self.mass @ rhs[self.cols])
        if np.any(ub):
            b = b - self.D_int.T @ (self.op.Wt @ (self.D_bd @ ub))
        u = np.zeros(N * n)
        u[self.bcols] = ub
        if np.any(b):
            diag = self.stiffness.diagonal()
            M = spla.LinearOperator(self.stiffness.shape, matvec=lambda r: r / diag)
            maxiter = 10 * self.unknowns
            sol, info = spla.cg(self.stiffness, b, rtol=rtol, atol=0.0, maxiter=maxiter, M=M)
            if info != 0:
                raise SolverError(f"CG did not converge in {maxiter} iterations")
            u[self.cols] = sol
        return u.reshape(N, n)

    def potential_solve(self, f: np.ndarray) -> np.ndarray:
        """Interior ``u`` with ``Delta u = delta f`` and zero boundary values."""
        rhs = self.D_int.T @ (self.op.Wt @ np.asarray(f, dtype=float).ravel())
        return self._lu.solve(rhs)

    def split(self, f: np.ndarray):
        """Return ``(S f, P f)`` with ``P f = d^B_F u`` and ``S f = f - P f``."""
        f = np.asarray(f, dtype=float)
        P = (self.D_int @ self.potential_solve(f)).reshape(f.shape)
        return f - P, P

    def potential(self, u_interior: np.ndarray) -> np.ndarray:
        n = self.grid.n
        return (self.D_int @ np.asarray(u_interior).ravel()).reshape(-1, n, n)

    def divergence_interior(self, f: np.ndarray) -> np.ndarray:
        """Interior rows of ``delta^B_F f`` (weighted by the mass matrix inverse)."""
        flux = -(self.D_int.T @ (self.op.Wt @ np.asarray(f, dtype=float).ravel()))
        return spla.spsolve(self.mass, flux)

    def inner(self, A, B) -> float:
        return self.op.inner_tensor(A, B)


def assemble_laplacian_BF(chart: MetricChart, grid: Grid, F: float,
                          weight: str = "scattering") -> GaugeSystem:
    return GaugeSystem(chart, grid, F, weight)


def solve_dirichlet(system: GaugeSystem, rhs, boundary=None, rtol: float = 1e-10) -> np.ndarray:
    return system.solve_dirichlet(rhs, boundary, rtol)


def solenoidal_split(system: GaugeSystem, f):
    return system.split(f)


def eigenvalue_scan(chart: MetricChart, grid: Grid, Fs, weight: str = "scattering") -> list[dict]:
    """Smallest eigenvalue of ``-Delta^B_F`` for each F; ``F0`` is the first positive one."""
    out = []
    for F in Fs:
        sysF = GaugeSystem(chart, grid, F, weight)
        out.append({"F": float(F), "min_eig": sysF.min_eigenvalue()})
    return out
