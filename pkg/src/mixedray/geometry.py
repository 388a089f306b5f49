"""Coordinate charts, geodesic shooting and parallel transport.

Every chart is in normal form with respect to its boundary defining
function: ``x`` is the first coordinate, so ``x(p) = p[..., 0]`` and the
working region is ``{x >= 0}`` intersected with the coordinate box.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
import numpy as np
from scipy.interpolate import RegularGridInterpolator

DEFAULT_STEP = 1e-3
FD_STEP = 1e-5
EXIT_TOL = 1e-10
MAX_STEPS = 10_000
SPEED_TOL = 1e-10


class GeometryError(ValueError):
    """Invalid chart input (outside the box, bad direction, ...)."""


class TrappedRayError(RuntimeError):
    """A ray did not leave the working region within the step budget."""


class MetricChart:
    """Single-chart Riemannian metric on an axis-aligned box.

    Subclasses provide ``metric`` and optionally ``metric_derivative`` or
    ``christoffel``; the base class falls back to central differences.
    All evaluators are vectorised over leading axes.
    """

    kind = "abstract"

    def __init__(self, lower, upper):
        self.lower = np.asarray(lower, dtype=float)
        self.upper = np.asarray(upper, dtype=float)
        if self.lower.shape != self.upper.shape or self.lower.ndim != 1:
            raise GeometryError("box bounds must be 1-d arrays of equal length")
        if self.lower.size < 3:
            raise GeometryError("dimension must be at least 3")
        if np.any(self.upper <= self.lower):
            raise GeometryError("empty coordinate box")

    @property
    def n(self) -> int:
        return self.lower.size

    def params(self) -> dict:
        return {"lower": self.lower.tolist(), "upper": self.upper.tolist()}

    def metric(self, p: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def metric_derivative(self, p: np.ndarray) -> np.ndarray:
        """``dg[..., l, i, j] = d_l g_ij`` by central differences."""
        p = np.asarray(p, dtype=float)
        out = np.empty(p.shape[:-1] + (self.n, self.n, self.n))
        for l in range(self.n):
            e = np.zeros(self.n)
            e[l] = FD_STEP
            out[..., l, :, :] = (self.metric(p + e) - self.metric(p - e)) / (2 * FD_STEP)
        return out

    def christoffel(self, p: np.ndarray) -> np.ndarray:
        """``G[..., k, i, j]`` is the symbol with upper index k."""
        p = np.asarray(p, dtype=float)
        ginv = np.linalg.inv(self.metric(p))
        dg = self.metric_derivative(p)
        # first kind, indexed [l, i, j]: d_i g_jl + d_j g_il - d_l g_ij
        first = (np.einsum("...ijl->...lij", dg) + np.einsum("...jil->...lij", dg) - dg)
        return 0.5 * np.einsum("...kl,...lij->...kij", ginv, first)

    def connection_matrix(self, p: np.ndarray, v: np.ndarray) -> np.ndarray:
        """``A[..., k, j] = G^k_{ij} v^i``, the connection contracted with ``v``."""
        return np.einsum("...kij,...i->...kj", self.christoffel(p), v)

    def bdf(self, p: np.ndarray) -> np.ndarray:
        return np.asarray(p)[..., 0]

    def margin(self, p: np.ndarray) -> np.ndarray:
        """Signed distance-like quantity, >= 0 exactly on the working region."""
        p = np.asarray(p)
        m = np.minimum(np.min(p - self.lower, axis=-1), np.min(self.upper - p, axis=-1))
        return np.minimum(m, self.bdf(p))

    def check_inside(self, p: np.ndarray, tol: float = 0.0) -> None:
        if np.any(self.margin(p) < -tol):
            raise GeometryError("point outside the working region")

    def norm(self, p, v) -> np.ndarray:
        g = self.metric(p)
        return np.sqrt(np.einsum("...i,...ij,...j->...", v, g, v))


class EmbeddedChart(MetricChart):
    """Chart given by an explicit map into Euclidean space.

    ``embedding(p)`` returns ``(P, J, H)`` with ``J[..., a, i] = d_i P^a`` and
    ``H[..., a, i, j] = d_i d_j P^a``; geodesics are then straight lines in
    the ambient space and the Christoffel symbols are ``J^{-1} H``.
    """

    def embedding(self, p):
        raise NotImplementedError

    def to_cartesian(self, p):
        return self.embedding(np.asarray(p, dtype=float))[0]

    def from_cartesian(self, q):
        raise NotImplementedError

    def metric(self, p):
        _, J, _ = self.embedding(np.asarray(p, dtype=float))
        return np.einsum("...ai,...aj->...ij", J, J)

    def metric_derivative(self, p):
        _, J, H = self.embedding(np.asarray(p, dtype=float))
        t = np.einsum("...ali,...aj->...lij", H, J)
        return t + np.swapaxes(t, -2, -1)

    def christoffel(self, p):
        _, J, H = self.embedding(np.asarray(p, dtype=float))
        return np.linalg.solve(J, H.reshape(H.shape[:-2] + (-1,))).reshape(H.shape)


class EuclideanChart(EmbeddedChart):
    kind = "euclidean-cartesian"

    def embedding(self, p):
        shape = p.shape[:-1]
        J = np.broadcast_to(np.eye(self.n), shape + (self.n, self.n))
        return p, J, np.zeros(shape + (self.n,) * 3)

    def from_cartesian(self, q):
        return np.asarray(q, dtype=float)

    def christoffel(self, p):
        p = np.asarray(p)
        return np.zeros(p.shape[:-1] + (self.n,) * 3)


class BallShellChart(EmbeddedChart):
    """Shell of the Euclidean ball in radius/gnomonic coordinates.

    The point ``(x, y)`` maps to ``rho(x) (1, y) / sqrt(1 + |y|^2)``.  With
    ``orientation="inward"`` the radius is ``rho = R - x`` so ``x`` is the
    depth below the sphere of radius ``R``; with ``"outward"`` it is
    ``rho = R - width + x`` so ``x`` vanishes on the inner sphere.
    """

    kind = "euclidean-ball-shell"

    def __init__(self, n: int = 3, radius: float = 1.0, width: float = 0.3,
                 half_angle: float = 0.6, orientation: str = "inward"):
        if orientation not in ("inward", "outward"):
            raise GeometryError(f"unknown orientation {orientation!r}")
        if not 0 < width < radius:
            raise GeometryError("shell width must lie in (0, radius)")
        if not 0 < half_angle < math.pi / 2:
            raise GeometryError("half_angle must lie in (0, pi/2)")
        t = math.tan(half_angle)
        super().__init__([0.0] + [-t] * (n - 1), [width] + [t] * (n - 1))
        self.radius = float(radius)
        self.width = float(width)
        self.half_angle = float(half_angle)
        self.orientation = orientation

    def params(self):
        return {"radius": self.radius, "width": self.width,
                "half_angle": self.half_angle, "orientation": self.orientation}

    def _rho(self, x):
        if self.orientation == "inward":
            return self.radius - x, -1.0
        return self.radius - self.width + x, 1.0

    def embedding(self, p):
        n = self.n
        x, y = p[..., 0], p[..., 1:]
        rho, drho = self._rho(x)
        s = np.sqrt(1.0 + np.sum(y * y, axis=-1))
        u1 = np.concatenate([np.ones(x.shape + (1,)), y], axis=-1)
        u = u1 / s[..., None]
        # du[a, i] and d2u[a, i, j] for the tangential coordinates
        E = np.eye(n)[:, 1:]
        s3 = s[..., None, None] ** 3
        du = E / s[..., None, None] - u1[..., :, None] * y[..., None, :] / s3
        m = n - 1
        d2u = (-E[:, :, None] * y[..., None, None, :] / s3[..., None]
               - E[:, None, :] * y[..., None, :, None] / s3[..., None]
               - u1[..., :, None, None] * np.eye(m) / s3[..., None]
               + 3 * u1[..., :, None, None] * y[..., None, :, None] * y[..., None, None, :]
               / (s[..., None, None, None] ** 5))
        P = rho[..., None] * u
        J = np.empty(p.shape[:-1] + (n, n))
        J[..., :, 0] = drho * u
        J[..., :, 1:] = rho[..., None, None] * du
        H = np.zeros(p.shape[:-1] + (n, n, n))
        H[..., :, 0, 1:] = drho * du
        H[..., :, 1:, 0] = drho * du
        H[..., :, 1:, 1:] = rho[..., None, None, None] * d2u
        return P, J, H

    def connection_matrix(self, p, v):
        # closed form: radial part plus the projectively flat gnomonic sphere,
        # whose symbols are -(delta^k_i y_j + delta^k_j y_i) / (1 + |y|^2)
        x, y = p[..., 0], p[..., 1:]
        vx, vy = v[..., 0], v[..., 1:]
        rho, s = self._rho(x)
        q = 1.0 + np.sum(y * y, axis=-1)
        yv = np.sum(y * vy, axis=-1)
        kv = (vy * q[..., None] - y * yv[..., None]) / (q * q)[..., None]
        A = np.zeros(p.shape[:-1] + (self.n, self.n))
        A[..., 0, 1:] = -s * rho[..., None] * kv
        A[..., 1:, 0] = (s / rho)[..., None] * vy
        diag = s * vx / rho - yv / q
        A[..., 1:, 1:] = diag[..., None, None] * np.eye(self.n - 1) - vy[..., :, None] * y[..., None, :] / q[..., None, None]
        return A

    def from_cartesian(self, q):
        q = np.asarray(q, dtype=float)
        r = np.linalg.norm(q, axis=-1)
        x = self.radius - r if self.orientation == "inward" else r - (self.radius - self.width)
        y = q[..., 1:] / q[..., :1]
        return np.concatenate([x[..., None], y], axis=-1)


class ConformalChart(MetricChart):
    """``g = exp(2 phi) delta`` with ``phi(p) = a.p + p.Q.p / 2``."""

    kind = "conformal"

    def __init__(self, lower, upper, a=None, Q=None):
        super().__init__(lower, upper)
        n = self.n
        self.a = np.zeros(n) if a is None else np.asarray(a, dtype=float)
        self.Q = np.zeros((n, n)) if Q is None else np.asarray(Q, dtype=float)
        if self.a.shape != (n,) or self.Q.shape != (n, n):
            raise GeometryError("conformal coefficients have the wrong shape")
        self.Q = 0.5 * (self.Q + self.Q.T)

    def params(self):
        return {**super().params(), "a": self.a.tolist(), "Q": self.Q.tolist()}

    def _phi(self, p):
        phi = p @ self.a + 0.5 * np.einsum("...i,ij,...j->...", p, self.Q, p)
        return phi, self.a + p @ self.Q

    def metric(self, p):
        p = np.asarray(p, dtype=float)
        phi, _ = self._phi(p)
        return np.exp(2 * phi)[..., None, None] * np.eye(self.n)

    def metric_derivative(self, p):
        p = np.asarray(p, dtype=float)
        phi, dphi = self._phi(p)
        return (2 * np.exp(2 * phi)[..., None] * dphi)[..., :, None, None] * np.eye(self.n)

    def christoffel(self, p):
        p = np.asarray(p, dtype=float)
        _, d = self._phi(p)
        I = np.eye(self.n)
        # delta^k_i d_j phi + delta^k_j d_i phi - delta_ij d_k phi
        return (I[:, :, None] * d[..., None, None, :] + I[:, None, :] * d[..., None, :, None]
                - d[..., :, None, None] * I)

    def connection_matrix(self, p, v):
        p = np.asarray(p, dtype=float)
        _, d = self._phi(p)
        dv = np.sum(d * v, axis=-1)
        return (v[..., :, None] * d[..., None, :] + dv[..., None, None] * np.eye(self.n)
                - d[..., :, None] * v[..., None, :])


class SampledChart(MetricChart):
    """Metric given by samples on a regular grid, interpolated cubically."""

    kind = "grid-sampled"

    def __init__(self, lower, upper, samples: np.ndarray, method: str = "cubic"):
        super().__init__(lower, upper)
        samples = np.asarray(samples, dtype=float)
        n = self.n
        if samples.ndim != n + 2 or samples.shape[-2:] != (n, n):
            raise GeometryError("metric samples must have shape (*nodes, n, n)")
        samples = 0.5 * (samples + np.swapaxes(samples, -1, -2))
        if np.min(np.linalg.eigvalsh(samples)) <= 0:
            raise GeometryError("sampled metric is not positive definite")
        axes = [np.linspace(lo, hi, k) for lo, hi, k in zip(self.lower, self.upper, samples.shape[:n])]
        self.samples = samples
        self._interp = RegularGridInterpolator(axes, samples, method=method,
                                               bounds_error=False, fill_value=None)

    def params(self):
        return {**super().params(), "nodes": list(self.samples.shape[:self.n])}

    def metric(self, p):
        p = np.asarray(p, dtype=float)
        g = self._interp(p.reshape(-1, self.n)).reshape(p.shape[:-1] + (self.n, self.n))
        return 0.5 * (g + np.swapaxes(g, -1, -2))


def christoffel_symbols(chart: MetricChart, point) -> np.ndarray:
    """Christoffel symbols ``G[k, i, j]`` at a point inside the box."""
    point = np.asarray(point, dtype=float)
    chart.check_inside(point)
    G = chart.christoffel(point)
    if not np.all(np.isfinite(G)):
        raise FloatingPointError("non-finite Christoffel symbols (singular metric?)")
    return G


def boundary_convexity_alpha(chart: MetricChart, y) -> dict:
    """Half the eigenvalues of ``H = -1/2 g^xx d_x k`` at ``(0, y)``.

    Eigenvalues are taken relative to ``k`` so the answer does not depend on
    the tangential coordinates.  ``alpha`` is the smallest of them and
    ``isotropic`` tells whether all of them agree to 1e-8.
    """
    p = np.concatenate([[0.0], np.asarray(y, dtype=float)])
    g = chart.metric(p)
    dxk = chart.metric_derivative(p)[0, 1:, 1:]
    k = g[1:, 1:]
    H = -0.5 * np.linalg.inv(g)[0, 0] * dxk
    L = np.linalg.cholesky(k)
    Li = np.linalg.inv(L)
    eig = 0.5 * np.linalg.eigvalsh(Li @ H @ Li.T)
    return {"alpha": float(eig[0]), "range": (float(eig[0]), float(eig[-1])),
            "H": H, "isotropic": bool(eig[-1] - eig[0] <= 1e-8)}


# ---------------------------------------------------------------------------
# batched geodesic integration

@dataclass
class RayHalf:
    """Samples along one time direction for a batch of rays.

    Arrays are padded to the longest ray; entries past ``count`` are junk
    and carry zero quadrature weight.
    """

    t: np.ndarray          # (N, K)
    pos: np.ndarray        # (N, K, n)
    vel: np.ndarray        # (N, K, n)
    covectors: np.ndarray | None   # (N, K, m, n)
    vectors: np.ndarray | None     # (N, K, m, n)
    weights: np.ndarray    # (N, K) Simpson weights in |t|
    count: np.ndarray      # (N,)
    exit: np.ndarray       # (N,) 0 region exit, 1 max length


def _rhs(chart, pos, vel, cov, vec):
    A = chart.connection_matrix(pos, vel)
    acc = -np.matmul(A, vel[..., None])[..., 0]
    # covectors: w_k' = G^i_{jk} v^j w_i; vectors: w^k' = -G^k_{ij} v^i w^j
    dcov = None if cov is None else np.matmul(cov, A)
    dvec = None if vec is None else -np.matmul(vec, np.swapaxes(A, -1, -2))
    return vel, acc, dcov, dvec


def _rk4(chart, h, state):
    pos, vel, cov, vec = state

    def add(s, k, c):
        return tuple(None if a is None else a + c * b for a, b in zip(s, k))

    k1 = _rhs(chart, *state)
    k2 = _rhs(chart, *add(state, k1, h / 2))
    k3 = _rhs(chart, *add(state, k2, h / 2))
    k4 = _rhs(chart, *add(state, k3, h))
    out = []
    for s, a, b, c, d in zip(state, k1, k2, k3, k4):
        out.append(None if s is None else s + (h / 6) * (a + 2 * b + 2 * c + d))
    return tuple(out)


def _index(state, mask):
    return tuple(None if s is None else s[mask] for s in state)


def _rk4_var(chart, tau, state):
    """RK4 with a per-ray step ``tau`` (shape (N,))."""
    def sc(a, c):
        return c.reshape(c.shape + (1,) * (a.ndim - 1)) * a

    def add(s, k, c):
        return tuple(None if a is None else a + sc(b, c) for a, b in zip(s, k))

    k1 = _rhs(chart, *state)
    k2 = _rhs(chart, *add(state, k1, tau / 2))
    k3 = _rhs(chart, *add(state, k2, tau / 2))
    k4 = _rhs(chart, *add(state, k3, tau))
    return tuple(None if s is None else s + sc(a + 2 * b + 2 * c + d, tau / 6)
                 for s, a, b, c, d in zip(state, k1, k2, k3, k4))


def _pair_weights(j, start, end, h):
    """Composite Simpson weights on the uniform samples ``start..end``."""
    inside = (j >= start) & (j <= end) & (end > start)
    edge = (j == start) | (j == end)
    odd = ((j - start) % 2) == 1
    return np.where(inside, np.where(edge, h / 3, np.where(odd, 4 * h / 3, 2 * h / 3)), 0.0)


def simpson_weights(count: np.ndarray, h: float, last: np.ndarray, kmax: int) -> np.ndarray:
    """Quadrature weights for samples ``0, h, ..., (c-2)h, (c-2)h + last``.

    ``count`` holds the number of samples per ray.  Uniform intervals use
    composite Simpson (with one 3/8 panel when their number is odd); the
    final short interval integrates the quadratic through the last three
    samples, which stays well conditioned however short it is.
    """
    count = np.asarray(count)
    K = (count - 1)[:, None]
    b = np.asarray(last, dtype=float)[:, None]
    j = np.arange(kmax)[None, :]
    w = np.zeros((count.size, kmax))

    one = K == 1
    w += np.where(one & (j <= 1), b / 2, 0.0)

    two = K == 2
    wide = two & (b >= h / 4)
    s = h + b
    bs = np.where(b > 0, b, 1.0)
    pair = np.where(j == 0, s / 6 * (2 - b / h),
                    np.where(j == 1, s ** 3 / (6 * h * bs), np.where(j == 2, s / 6 * (2 - h / bs), 0.0)))
    w += np.where(wide, pair, 0.0)
    narrow = two & ~wide
    w += np.where(narrow & (j == 0), h / 2, 0.0)
    w += np.where(narrow & (j == 1), (h + b) / 2, 0.0)
    w += np.where(narrow & (j == 2), b / 2, 0.0)

    odd = (K >= 3) & (K % 2 == 1)
    w += np.where(odd, _pair_weights(j, 0, K - 1, h), 0.0)
    even = (K >= 4) & (K % 2 == 0)
    eighth = np.where(j == 0, 3 * h / 8, np.where((j == 1) | (j == 2), 9 * h / 8,
                                                  np.where(j == 3, 3 * h / 8, 0.0)))
    w += np.where(even, eighth + _pair_weights(j, 3, K - 1, h), 0.0)

    tail = K >= 3
    a = h
    w += np.where(tail & (j == K - 2), -b ** 3 / (6 * a * (a + b)), 0.0)
    w += np.where(tail & (j == K - 1), b * (3 * a + b) / (6 * a), 0.0)
    w += np.where(tail & (j == K), b * (2 * b + 3 * a) / (6 * (a + b)), 0.0)
    return w


def _exit_time(chart, base, tau, m_hi):
    """Step length at which rays starting from ``base`` leave the region.

    Bracketed root finding on the margin (Illinois variant of regula falsi
    with a bisection fallback).  Returns a time inside the region within
    ``EXIT_TOL`` of the crossing.
    """
    M = m_hi.size
    lo, hi = np.zeros(M), np.broadcast_to(np.asarray(tau, dtype=float), (M,)).copy()
    f_lo = chart.margin(base[0])
    f_hi = np.array(m_hi, dtype=float)
    side = np.zeros(M, dtype=int)
    done = np.zeros(M, dtype=bool)
    for it in range(200):
        width = hi - lo
        done |= width <= EXIT_TOL
        if np.all(done):
            break
        denom = f_lo - f_hi
        mid = np.where(denom > 0, lo + f_lo * width / np.where(denom > 0, denom, 1.0), 0.5 * (lo + hi))
        # keep the trial strictly inside the bracket; every few rounds bisect
        bad = (mid <= lo) | (mid >= hi) | (it % 4 == 3)
        mid = np.where(bad, 0.5 * (lo + hi), mid)
        fm = chart.margin(_rk4_var(chart, mid, base)[0])
        inside = fm >= 0
        close = np.abs(fm) <= 1e-13
        upd_lo = inside & ~done
        upd_hi = ~inside & ~done
        lo = np.where(upd_lo, mid, lo)
        f_lo = np.where(upd_lo, fm, f_lo)
        hi = np.where(upd_hi, mid, hi)
        f_hi = np.where(upd_hi, fm, f_hi)
        # Illinois: halve the stale endpoint value when the same side repeats
        f_hi = np.where(upd_lo & (side == 1), 0.5 * f_hi, f_hi)
        f_lo = np.where(upd_hi & (side == -1), 0.5 * f_lo, f_lo)
        side = np.where(upd_lo, 1, np.where(upd_hi, -1, side))
        done |= close & inside
    return lo


def trace_half(chart: MetricChart, z, v, *, step: float = DEFAULT_STEP, sign: float = 1.0,
               covectors=None, vectors=None, max_length: float | None = None,
               max_steps: int = MAX_STEPS) -> RayHalf:
    """Integrate a batch of rays in one time direction until they stop.

    ``z`` and ``v`` have shape (N, n).  Optional ``covectors``/``vectors`` of
    shape (N, m, n) are parallel transported along.  Exit of the working
    region is located on the last step to ``EXIT_TOL`` by bracketed root finding.
    """
    z = np.atleast_2d(np.asarray(z, dtype=float))
    v = np.atleast_2d(np.asarray(v, dtype=float)) * sign
    N = z.shape[0]
    h = float(step)
    cov = None if covectors is None else np.array(covectors, dtype=float)
    vec = None if vectors is None else np.array(vectors, dtype=float)
    current = (z.copy(), v.copy(), cov, vec)
    samples = [current]
    active = np.ones(N, dtype=bool)
    count = np.ones(N, dtype=int)
    last = np.zeros(N)
    exit_kind = np.zeros(N, dtype=int)
    max_length = np.inf if max_length is None else float(max_length)

    # rays sitting on the boundary and pointing outwards stop immediately
    edge = chart.margin(z) <= 0
    if np.any(edge):
        probe = _rk4(chart, 1e-7, _index(current, edge))
        active[np.flatnonzero(edge)[chart.margin(probe[0]) < 0]] = False

    pending = []
    k = 0
    while np.any(active):
        k += 1
        if k > max_steps:
            raise TrappedRayError(f"step budget of {max_steps} exhausted")
        ids = np.flatnonzero(active)
        cur = _index(current, ids)
        tau = min(h, max_length - (k - 1) * h)
        capped = tau < h or max_length - k * h <= 0
        new = _rk4(chart, tau, cur)
        out = chart.margin(new[0]) < 0
        nxt = tuple(None if s is None else s.copy() for s in current)
        stay = ids[~out]
        for f, s in zip(nxt, new):
            if f is not None:
                f[stay] = s[~out]
        last[stay] = tau
        count[ids] += 1
        if capped:
            exit_kind[stay] = 1
            active[stay] = False
        if np.any(out):
            # exits are refined together once the march is over
            oid = ids[out]
            pending.append((oid, _index(cur, out), np.full(oid.size, tau), chart.margin(new[0][out])))
            active[oid] = False
        samples.append(nxt)
        current = nxt

    kmax = len(samples)
    pos = np.stack([s[0] for s in samples], axis=1)
    vel = np.stack([s[1] for s in samples], axis=1)
    covs = None if cov is None else np.stack([s[2] for s in samples], axis=1)
    vecs = None if vec is None else np.stack([s[3] for s in samples], axis=1)
    if pending:
        oid = np.concatenate([p[0] for p in pending])
        base = tuple(None if s is None else np.concatenate([p[1][i] for p in pending])
                     for i, s in enumerate(pending[0][1]))
        taus = np.concatenate([p[2] for p in pending])
        lo = _exit_time(chart, base, taus, np.concatenate([p[3] for p in pending]))
        end = _rk4_var(chart, lo, base)
        slot = count[oid] - 1
        for arr, val in zip((pos, vel, covs, vecs), end):
            if arr is not None:
                arr[oid, slot] = val
        last[oid] = lo
    t = np.arange(kmax)[None, :] * h * np.ones((N, 1))
    rows = np.flatnonzero(count > 1)
    t[rows, count[rows] - 1] = (count[rows] - 2) * h + last[rows]
    w = simpson_weights(count, h, last, kmax)
    return RayHalf(t=t * sign, pos=pos, vel=vel * sign, covectors=covs, vectors=vecs,
                   weights=w, count=count, exit=exit_kind)


# ---------------------------------------------------------------------------
# single-ray public API

@dataclass
class GeodesicPath:
    t: np.ndarray
    points: np.ndarray
    velocities: np.ndarray
    weights: np.ndarray
    exit_backward: str
    exit_forward: str
    step: float
    frame: np.ndarray | None = None   # rows: transported dual basis, (K, n, n)

    @property
    def length(self) -> float:
        return float(self.t[-1] - self.t[0])

    def speed(self, chart: MetricChart) -> np.ndarray:
        return chart.norm(self.points, self.velocities)


_EXIT_NAMES = {0: "region", 1: "max_length"}


def _join(back: RayHalf, fwd: RayHalf, attr: str, r: int = 0):
    b = getattr(back, attr)
    f = getattr(fwd, attr)
    if b is None:
        return None
    cb, cf = back.count[r], fwd.count[r]
    return np.concatenate([b[r, :cb][::-1], f[r, 1:cf]], axis=0)


def _shoot(chart, z, zeta, step, max_length, covectors=None, vectors=None):
    z = np.asarray(z, dtype=float)
    zeta = np.asarray(zeta, dtype=float)
    if z.shape != (chart.n,) or zeta.shape != (chart.n,):
        raise GeometryError("point and direction must have length n")
    chart.check_inside(z)
    speed = float(chart.norm(z, zeta))
    if abs(speed - 1.0) > SPEED_TOL:
        raise GeometryError(f"direction is not unit speed (|zeta|_g = {speed!r})")
    kw = dict(step=step, max_length=max_length)
    cv = None if covectors is None else covectors[None]
    vv = None if vectors is None else vectors[None]
    fwd = trace_half(chart, z[None], zeta[None], sign=1.0, covectors=cv, vectors=vv, **kw)
    back = trace_half(chart, z[None], zeta[None], sign=-1.0, covectors=cv, vectors=vv, **kw)
    return back, fwd


def shoot_geodesic(chart: MetricChart, z, zeta, *, step: float = DEFAULT_STEP,
                   max_length: float | None = None, transport: bool = False) -> GeodesicPath:
    """Geodesic through ``z`` with unit velocity ``zeta``, both directions.

    With ``transport=True`` the dual basis at ``z`` is transported along and
    stored as ``frame``; ``frame[m] @ w`` carries a vector ``w`` at
    ``gamma(t_m)`` back to ``z``.
    """
    cov = np.eye(chart.n) if transport else None
    back, fwd = _shoot(chart, z, zeta, step, max_length, covectors=cov)
    wb = back.weights[0, :back.count[0]][::-1]
    wf = fwd.weights[0, :fwd.count[0]]
    weights = np.concatenate([wb[:-1], [wb[-1] + wf[0]], wf[1:]])
    return GeodesicPath(
        t=_join(back, fwd, "t"), points=_join(back, fwd, "pos"),
        velocities=_join(back, fwd, "vel"), weights=weights,
        exit_backward=_EXIT_NAMES[int(back.exit[0])], exit_forward=_EXIT_NAMES[int(fwd.exit[0])],
        step=step, frame=_join(back, fwd, "covectors"))


def parallel_transport(chart: MetricChart, path: GeodesicPath, w0, *, covector: bool = False,
                       max_length: float | None = None) -> np.ndarray:
    """Parallel transport of ``w0`` (given at ``gamma(0)``) along ``path``.

    The geodesic is re-integrated together with ``w0`` on the same step grid,
    so the result lines up sample-for-sample with ``path``.
    """
    w0 = np.asarray(w0, dtype=float)
    if w0.shape != (chart.n,):
        raise GeometryError("transported quantity must have length n")
    if not np.all(np.isfinite(w0)):
        raise FloatingPointError("non-finite input to parallel transport")
    i0 = int(np.argmin(np.abs(path.t)))
    z, zeta = path.points[i0], path.velocities[i0]
    kw = {"covectors" if covector else "vectors": w0[None]}
    back, fwd = _shoot(chart, z, zeta, path.step, max_length, **kw)
    out = _join(back, fwd, "covectors" if covector else "vectors")[:, 0, :]
    if out.shape[0] != path.t.size:
        raise GeometryError("transport grid does not match the path")
    if not np.all(np.isfinite(out)):
        raise FloatingPointError("non-finite transported field")
    return out


def frame_inner_products(chart: MetricChart, path: GeodesicPath, u, v) -> np.ndarray:
    """``<T u, T v>`` at ``gamma(0)`` minus ``<u, v>`` at each sample.

    ``u`` and ``v`` are arrays (K, n) of vectors living at the samples.
    """
    i0 = int(np.argmin(np.abs(path.t)))
    g0 = chart.metric(path.points[i0])
    Tu = np.einsum("kij,kj->ki", path.frame, u)
    Tv = np.einsum("kij,kj->ki", path.frame, v)
    gt = chart.metric(path.points)
    return (np.einsum("ki,ij,kj->k", Tu, g0, Tv)
            - np.einsum("ki,kij,kj->k", u, gt, v))


def make_chart(kind: str, n: int = 3, **params) -> MetricChart:
    """Build a chart from its kind name and keyword parameters."""
    if kind == "euclidean-cartesian":
        lower = params.get("lower", [0.0] * n)
        upper = params.get("upper", [1.0] * n)
        return EuclideanChart(lower, upper)
    if kind == "euclidean-ball-shell":
        return BallShellChart(n=n, **params)
    if kind == "conformal":
        return ConformalChart(params.get("lower", [0.0] * n), params.get("upper", [1.0] * n),
                              params.get("a"), params.get("Q"))
    if kind == "grid-sampled":
        return SampledChart(params["lower"], params["upper"], params["samples"],
                            params.get("method", "cubic"))
    raise GeometryError(f"unknown chart kind {kind!r}")

