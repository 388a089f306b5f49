"""Grids, vector and (1,1)-tensor fields, and the discrete operators d^B_F and delta^B_F.

Stacked layouts are node-major in C order: a vector field is ``(N, n)`` and
a (1,1) tensor field ``(N, n, n)`` with ``T[node, i, j] = T^i_j``.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from functools import cached_property

import numpy as np
import scipy.sparse as sp

from .geometry import MetricChart

TRACE_TOL = 1e-10


class GridError(ValueError):
    pass


@dataclass(frozen=True)
class Grid:
    """Uniform tensor grid.  ``order`` selects multilinear (1) or local cubic (3) interpolation."""

    lower: tuple
    upper: tuple
    shape: tuple
    order: int = 3

    def __post_init__(self):
        object.__setattr__(self, "lower", tuple(float(v) for v in self.lower))
        object.__setattr__(self, "upper", tuple(float(v) for v in self.upper))
        object.__setattr__(self, "shape", tuple(int(v) for v in self.shape))
        if not (len(self.lower) == len(self.upper) == len(self.shape)):
            raise GridError("grid bounds and shape disagree in dimension")
        if min(self.shape) < 2 or any(u <= l for l, u in zip(self.lower, self.upper)):
            raise GridError("degenerate grid")
        if self.order not in (1, 3):
            raise GridError("interpolation order must be 1 or 3")
        if self.order == 3 and min(self.shape) < 4:
            raise GridError("cubic interpolation needs at least 4 nodes per axis")

    @property
    def n(self) -> int:
        return len(self.shape)

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))

    @property
    def spacing(self) -> np.ndarray:
        return (np.array(self.upper) - np.array(self.lower)) / (np.array(self.shape) - 1)

    @property
    def axes(self) -> list[np.ndarray]:
        return [np.linspace(l, u, k) for l, u, k in zip(self.lower, self.upper, self.shape)]

    @cached_property
    def nodes(self) -> np.ndarray:
        mesh = np.meshgrid(*self.axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=-1)

    @cached_property
    def boundary(self) -> np.ndarray:
        idx = np.indices(self.shape).reshape(self.n, -1).T
        return np.any((idx == 0) | (idx == np.array(self.shape) - 1), axis=1)

    @property
    def interior(self) -> np.ndarray:
        return ~self.boundary

    def interp_weights(self, points: np.ndarray):
        """Interpolation stencil of each point; zero outside the grid box.

        Order 1 uses the ``2**n`` cell corners.  Order 3 uses tensor
        Lagrange cubics on ``4**n`` nodes, centred on the cell and shifted
        inwards next to the box faces.  Returns ``(index, weight)`` of shape
        ``(P, stencil)``.
        """
        pts = np.asarray(points, dtype=float).reshape(-1, self.n)
        shape = np.array(self.shape)
        u = (pts - np.array(self.lower)) / self.spacing
        tol = 1e-9
        inside = np.all((u >= -tol) & (u <= shape - 1 + tol), axis=1)
        u = np.clip(u, 0.0, shape - 1)
        strides = np.array([int(np.prod(self.shape[a + 1:])) for a in range(self.n)])
        if self.order == 1:
            start = np.clip(np.floor(u).astype(int), 0, shape - 2)
            t = u - start
            w1 = np.stack([1.0 - t, t], axis=-1)                 # (P, n, 2)
        else:
            start = np.clip(np.floor(u).astype(int) - 1, 0, shape - 4)
            t = (u - start)[..., None]
            k = np.arange(4.0)
            w1 = np.ones(t.shape[:-1] + (4,))
            for j in range(4):
                factor = np.where(k == j, 1.0, (t - j) / np.where(k == j, 1.0, k - j))
                w1 *= factor
        m = w1.shape[-1]
        # separable tensor product, last axis fastest
        idx = np.zeros((pts.shape[0], 1), dtype=np.int64)
        w = np.ones((pts.shape[0], 1))
        for a in range(self.n):
            nodes = start[:, a, None] + np.arange(m)
            idx = (idx[:, :, None] + (nodes * strides[a])[:, None, :]).reshape(pts.shape[0], -1)
            w = (w[:, :, None] * w1[:, a, None, :]).reshape(pts.shape[0], -1)
        w *= inside[:, None]
        return idx, w

    def interp_matrix(self, points: np.ndarray) -> sp.csr_matrix:
        idx, w = self.interp_weights(points)
        P = idx.shape[0]
        rows = np.repeat(np.arange(P), idx.shape[1])
        return sp.csr_matrix((w.ravel(), (rows, idx.ravel())), shape=(P, self.size))

    def to_dict(self) -> dict:
        return {"lower": list(self.lower), "upper": list(self.upper), "shape": list(self.shape),
                "order": self.order}


class GridField:
    """Nodal field on a grid, evaluated off-grid with the grid's interpolation."""

    def __init__(self, grid: Grid, values: np.ndarray):
        values = np.asarray(values, dtype=float)
        if values.shape[0] != grid.size:
            raise GridError("field does not match the grid size")
        if not np.all(np.isfinite(values)):
            raise GridError("field has non-finite entries")
        self.grid = grid
        self.values = values

    @property
    def value_shape(self) -> tuple:
        return self.values.shape[1:]

    def __call__(self, points: np.ndarray) -> np.ndarray:
        pts = np.asarray(points, dtype=float)
        idx, w = self.grid.interp_weights(pts)
        flat = self.values.reshape(self.grid.size, -1)
        out = np.einsum("pc,pcq->pq", w, flat[idx])
        return out.reshape(pts.shape[:-1] + self.value_shape)


class VectorField(GridField):
    def __init__(self, grid: Grid, values: np.ndarray):
        values = np.asarray(values, dtype=float).reshape(grid.size, -1)
        if values.shape[1] != grid.n:
            raise GridError("vector field must have n components per node")
        super().__init__(grid, values)


class TensorField11(GridField):
    def __init__(self, grid: Grid, values: np.ndarray):
        values = np.asarray(values, dtype=float).reshape(grid.size, grid.n, grid.n)
        super().__init__(grid, values)

    def max_trace(self) -> float:
        return float(np.max(np.abs(np.trace(self.values, axis1=1, axis2=2))))


def sum_fields(*fields):
    """Pointwise sum of callables mapping points to values."""
    def f(points):
        return sum(g(points) for g in fields)
    return f


# ---------------------------------------------------------------------------
# pointwise algebra

def trace_split(T: np.ndarray):
    T = np.asarray(T)
    if T.ndim < 2 or T.shape[-1] != T.shape[-2]:
        raise ValueError("trace_split needs square matrices")
    n = T.shape[-1]
    tr = np.trace(T, axis1=-2, axis2=-1)
    return T - (tr / n)[..., None, None] * np.eye(n), tr


def trace_free(T: np.ndarray) -> np.ndarray:
    return trace_split(T)[0]


def lambda_embed(w, n: int) -> np.ndarray:
    w = np.asarray(w, dtype=float)
    return w[..., None, None] * np.eye(n)


def mu_trace(T: np.ndarray) -> np.ndarray:
    return np.trace(np.asarray(T), axis1=-2, axis2=-1)


def pair11(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """Flat contraction ``A^i_j B^i_j`` (Euclidean chart components)."""
    return np.einsum("...ij,...ij->...", A, B)


# ---------------------------------------------------------------------------
# discrete covariant derivative

_SBP_ROWS = (
    (-24 / 17, 59 / 34, -4 / 17, -3 / 34),
    (-1 / 2, 0.0, 1 / 2),
    (4 / 43, -59 / 86, 0.0, 59 / 86, -4 / 43),
    (3 / 98, 0.0, -59 / 98, 0.0, 32 / 49, -4 / 49),
)
_SBP_NORM = (17 / 48, 59 / 48, 43 / 48, 49 / 48)
_CENTRAL = (1 / 12, -2 / 3, 0.0, 2 / 3, -1 / 12)
SBP_MIN_NODES = 8


def fd_matrix(m: int, h: float):
    """Fourth-order first derivative on ``m`` uniform nodes and its norm.

    With at least 8 nodes this is the diagonal-norm summation-by-parts
    operator (second order in the four boundary rows), so ``H D + (H D)^T``
    only touches the two end nodes and transposition stays consistent.
    Smaller grids use plain one-sided fourth-order closures with the
    trivial norm.
    """
    if m < 5:
        raise GridError("at least 5 nodes per axis are needed for the stencil")
    D = np.zeros((m, m))
    if m >= SBP_MIN_NODES:
        for i, row in enumerate(_SBP_ROWS):
            D[i, :len(row)] = row
            D[m - 1 - i, m - len(row):] = -np.array(row[::-1])
        for i in range(4, m - 4):
            D[i, i - 2:i + 3] = _CENTRAL
        norm = np.ones(m)
        norm[:4] = _SBP_NORM
        norm[-4:] = _SBP_NORM[::-1]
    else:
        for i in range(2, m - 2):
            D[i, i - 2:i + 3] = _CENTRAL
        D[0, :5] = np.array([-25, 48, -36, 16, -3]) / 12
        D[1, :5] = np.array([-3, -10, 18, -6, 1]) / 12
        D[m - 2, m - 5:] = -D[1, :5][::-1]
        D[m - 1, m - 5:] = -D[0, :5][::-1]
        norm = np.ones(m)
    return sp.csr_matrix(D / h), norm * h


def partial_matrices(grid: Grid) -> list[sp.csr_matrix]:
    mats = []
    for a in range(grid.n):
        parts = [sp.identity(k, format="csr") for k in grid.shape]
        parts[a] = fd_matrix(grid.shape[a], grid.spacing[a])[0]
        M = parts[0]
        for P in parts[1:]:
            M = sp.kron(M, P, format="csr")
        mats.append(M)
    return mats


def node_volumes(grid: Grid) -> np.ndarray:
    """Quadrature weights matching the derivative norm, one per node."""
    w = np.ones(1)
    for k, h in zip(grid.shape, grid.spacing):
        w = np.outer(w, fd_matrix(k, h)[1]).ravel()
    return w


def _block_diag(blocks: np.ndarray) -> sp.bsr_matrix:
    N, r, c = blocks.shape
    return sp.bsr_matrix((blocks, np.arange(N), np.arange(N + 1)), shape=(N * r, N * c))


def tracefree_projector(n: int) -> np.ndarray:
    v = np.eye(n).ravel()
    return np.eye(n * n) - np.outer(v, v) / n


def scattering_scales(n: int) -> np.ndarray:
    """Powers of x relating chart components to the basis (x^2 d_x, x d_y)."""
    return np.array([2.0] + [1.0] * (n - 1))


@dataclass
class FiberWeights:
    """Per-node volume weight and fibre metric used by all grid inner products."""

    volume: np.ndarray      # (N,)
    metric: np.ndarray      # (N, n, n)

    @property
    def vector_blocks(self) -> np.ndarray:
        return self.volume[:, None, None] * self.metric

    @property
    def tensor_blocks(self) -> np.ndarray:
        ginv = np.linalg.inv(self.metric)
        N, n, _ = self.metric.shape
        K = np.einsum("aik,ajl->aijkl", self.metric, ginv).reshape(N, n * n, n * n)
        return self.volume[:, None, None] * K


def fiber_weights(chart: MetricChart, grid: Grid, weight: str = "scattering") -> FiberWeights:
    """Volume weight and fibre metric at the grid nodes.

    The volume weight includes the grid quadrature of :func:`node_volumes`.
    ``"scattering"`` uses ``x^(-n-1) sqrt(det g)`` with the metric
    ``x^-4 dx^2 + x^-2 k``; ``"chart"`` uses ``sqrt(det g)`` with ``g``.
    """
    p = grid.nodes
    g = chart.metric(p)
    vol = np.sqrt(np.linalg.det(g)) * node_volumes(grid)
    if weight == "chart":
        return FiberWeights(vol, g)
    if weight != "scattering":
        raise ValueError(f"unknown volume weight {weight!r}")
    x = chart.bdf(p)
    if np.any(x <= 0):
        raise GridError("scattering weights need the grid inside {x > 0}")
    s = x[:, None] ** (-scattering_scales(grid.n))
    return FiberWeights(vol * x ** (-grid.n - 1), g * s[:, :, None] * s[:, None, :])


class CovariantDerivative:
    """Sparse discrete d^B_F on a grid together with its weighted adjoint."""

    def __init__(self, chart: MetricChart, grid: Grid, F: float = 0.0, weight: str = "scattering"):
        if F < 0:
            raise ValueError("F must be non-negative")
        if grid.n != chart.n:
            raise GridError("grid and chart dimensions differ")
        self.chart, self.grid, self.F, self.weight = chart, grid, float(F), weight
        n, N = grid.n, grid.size
        p = grid.nodes
        x = chart.bdf(p)
        if F > 0 and np.any(x <= 0):
            raise GridError("F-weighted derivative needs the grid inside {x > 0}")
        # derivative part: row (i, j) of each node takes d_j of component i
        D = sp.csr_matrix((N * n * n, N * n))
        for j, Dj in enumerate(partial_matrices(grid)):
            S = np.zeros((n * n, n))
            for i in range(n):
                S[i * n + j, i] = 1.0
            D = D + sp.kron(Dj, S, format="csr")
        # connection and conjugation part, block diagonal per node
        G = chart.christoffel(p)                       # (N, k, i, j)
        C = G.reshape(N, n * n, n).copy()              # [i*n+j, k] = G^i_{jk}
        if F > 0:
            for i in range(n):
                C[:, i * n, i] -= F / x ** 2
        D = D + _block_diag(C).tocsr()
        B = sp.kron(sp.identity(N), tracefree_projector(n), format="csr")
        self.matrix = (B @ D).tocsr()
        self.weights = fiber_weights(chart, grid, weight)
        self.Wv = _block_diag(self.weights.vector_blocks).tocsr()
        self.Wt = _block_diag(self.weights.tensor_blocks).tocsr()
        self._Wv_inv = _block_diag(np.linalg.inv(self.weights.vector_blocks)).tocsr()

    @cached_property
    def adjoint_matrix(self) -> sp.csr_matrix:
        """delta^B_F = -W_v^{-1} D^T W_t."""
        return (-(self._Wv_inv @ self.matrix.T @ self.Wt)).tocsr()

    def apply(self, v: np.ndarray) -> np.ndarray:
        n = self.grid.n
        return (self.matrix @ np.asarray(v, dtype=float).ravel()).reshape(-1, n, n)

    def apply_adjoint(self, T: np.ndarray, check_trace: bool = True) -> np.ndarray:
        T = np.asarray(T, dtype=float)
        if check_trace and np.max(np.abs(mu_trace(T.reshape(-1, self.grid.n, self.grid.n)))) > TRACE_TOL:
            raise ValueError("delta^B expects a trace-free tensor field")
        return (self.adjoint_matrix @ T.ravel()).reshape(-1, self.grid.n)

    def inner_vector(self, u, v) -> float:
        return float(np.ravel(u) @ (self.Wv @ np.ravel(v)))

    def inner_tensor(self, A, B) -> float:
        return float(np.ravel(A) @ (self.Wt @ np.ravel(B)))

    def interior_columns(self) -> np.ndarray:
        n = self.grid.n
        return (np.flatnonzero(self.grid.interior)[:, None] * n + np.arange(n)).ravel()


def covariant_dB(chart: MetricChart, v: VectorField, F: float = 0.0,
                 weight: str = "scattering") -> TensorField11:
    op = CovariantDerivative(chart, v.grid, F, weight)
    return TensorField11(v.grid, op.apply(v.values))


def delta_B(chart: MetricChart, T: TensorField11, F: float = 0.0,
            weight: str = "scattering") -> VectorField:
    op = CovariantDerivative(chart, T.grid, F, weight)
    return VectorField(T.grid, op.apply_adjoint(T.values))
