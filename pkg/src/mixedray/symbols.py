"""Symbol-level checks: kernel matrices, equatorial integrals and the gauge symbols."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np
import scipy.linalg as sla

from .normal_op import CutoffProfile, sphere_rule

SYMBOL_KINDS = ("T1_FIBER", "T1_BASE", "L11_FIBER", "L11_BASE")
UNIT_TOL = 1e-12
HERMITIAN_TOL = 1e-12
EXCISION = 1e-6
MIN_ORDER = 8
DEFAULT_FIBER_ORDER = 1024
DEFAULT_BASE_ORDER = 512


def sphere_area(dim: int) -> float:
    """Area of the unit sphere ``S^dim``."""
    return 2 * math.pi ** ((dim + 1) / 2) / math.gamma((dim + 1) / 2)


def _unit(Y) -> np.ndarray:
    Y = np.asarray(Y, dtype=float)
    if abs(np.linalg.norm(Y) - 1) > UNIT_TOL * 1e3:
        raise ValueError("Y-hat must be a unit vector")
    return Y


def _lambda(w: np.ndarray) -> np.ndarray:
    """Matrix of ``f -> f w`` on row-major (1,1) tensors: shape (n, n*n)."""
    n = w.size
    return np.kron(np.eye(n), w[None, :])


def _fiber_block(S: float, Y: np.ndarray) -> np.ndarray:
    n = Y.size + 1
    M = np.zeros((n, n))
    M[0, 0] = 1.0
    M[0, 1:] = -S * Y
    M[1:, 0] = -S * Y
    M[1:, 1:] = np.eye(n - 1) + (S * S - 1) * np.outer(Y, Y)
    return M


def _base_block(xi: float, Y: np.ndarray, eta) -> tuple[np.ndarray, complex]:
    b = float(Y @ np.asarray(eta, dtype=float)) / (xi * xi + 1)
    n = Y.size + 1
    M = np.zeros((n, n), dtype=complex)
    M[0, 0] = 1.0
    M[0, 1:] = (xi - 1j) * b * Y
    M[1:, 0] = (xi + 1j) * b * Y
    M[1:, 1:] = np.eye(n - 1) + (b * b * (xi * xi + 1) - 1) * np.outer(Y, Y)
    return M, b


def integrand_matrix(kind: str, *, S: float = 0.0, Y=None, xi_F: float = 0.0, eta_F=None,
                     chi: CutoffProfile | None = None) -> np.ndarray:
    """Front-face kernel matrix at one direction parameter.

    Fiber kinds take ``(S, Y)``, base kinds ``(xi_F, Y, eta_F)``.  The
    (1,1) kinds act on row-major ``n*n`` vectors ``f[i*n + j] = f^i_j``.
    Only ``T1_FIBER`` carries the factor ``chi(S)``.
    """
    Y = _unit(Y)
    if kind == "T1_FIBER":
        chi = chi or CutoffProfile()
        return float(chi(np.array(S))) * _fiber_block(S, Y)
    if kind == "L11_FIBER":
        L = _lambda(np.concatenate([[S], Y]))
        return L.T @ _fiber_block(S, Y) @ L
    eta_F = np.zeros(Y.size) if eta_F is None else np.asarray(eta_F, dtype=float)
    M, b = _base_block(xi_F, Y, eta_F)
    if kind == "T1_BASE":
        return M
    if kind == "L11_BASE":
        L = _lambda(np.concatenate([[-(xi_F - 1j) * b], Y]))
        return L.conj().T @ M @ L
    raise ValueError(f"unknown symbol kind {kind!r}")


def _complement(v: np.ndarray) -> np.ndarray:
    """Orthonormal basis (columns) of the orthogonal complement of ``v``."""
    return sla.null_space(v[None, :])


def _hermitize(A: np.ndarray) -> tuple[np.ndarray, float]:
    H = 0.5 * (A + A.conj().T)
    norm = np.linalg.norm(A)
    return H, float(np.linalg.norm(A - H) / norm) if norm else 0.0


def _batched(kind: str, S, Y, xi_F=0.0, eta_F=None) -> np.ndarray:
    """:func:`integrand_matrix` (without any chi) for many directions at once."""
    m, k = Y.shape
    n = k + 1
    outer = np.einsum("pi,pj->pij", Y, Y)
    if kind.endswith("FIBER"):
        M = np.zeros((m, n, n))
        M[:, 0, 0] = 1.0
        M[:, 0, 1:] = -S[:, None] * Y
        M[:, 1:, 0] = -S[:, None] * Y
        M[:, 1:, 1:] = np.eye(k) + (S * S - 1)[:, None, None] * outer
        w = np.concatenate([S[:, None], Y], axis=1)
    else:
        b = Y @ eta_F / (xi_F * xi_F + 1)
        M = np.zeros((m, n, n), dtype=complex)
        M[:, 0, 0] = 1.0
        M[:, 0, 1:] = ((xi_F - 1j) * b)[:, None] * Y
        M[:, 1:, 0] = ((xi_F + 1j) * b)[:, None] * Y
        M[:, 1:, 1:] = np.eye(k) + (b * b * (xi_F * xi_F + 1) - 1)[:, None, None] * outer
        w = np.concatenate([(-(xi_F - 1j) * b)[:, None], Y], axis=1)
    if kind.startswith("T1"):
        return M
    # (Lambda(w)^H M Lambda(w))[(i,j),(k,l)] = conj(w_j) M_ik w_l
    full = np.einsum("pj,pik,pl->pijkl", w.conj(), M, w)
    return full.reshape(m, n * n, n * n)


@dataclass
class EquatorialIntegral:
    matrix: np.ndarray
    anti_part: float
    excised: float = 0.0


def equatorial_integral(kind: str, xi: float, eta, F: float = 0.0, order: int | None = None, *,
                        alpha: float | None = None, chi: CutoffProfile | None = None
                        ) -> EquatorialIntegral:
    """Integral of :func:`integrand_matrix` over the directions of one regime.

    Fiber kinds integrate over unit ``w`` orthogonal to ``(xi, eta)`` with
    ``S = w_0/|w'|`` and ``Y = w'/|w'|``, weighted by ``chi(S)`` and dropping
    ``|w'| < 1e-6``.  Base kinds take ``(xi, eta)`` as the rescaled
    frequency and integrate over ``Y`` in ``S^(n-2)`` with the Gaussian
    weight of semiclassical parameter ``1/F``, divided by ``|S^(n-2)|``.
    """
    if kind not in SYMBOL_KINDS:
        raise ValueError(f"unknown symbol kind {kind!r}")
    fiber = kind.endswith("FIBER")
    order = order or (DEFAULT_FIBER_ORDER if fiber else DEFAULT_BASE_ORDER)
    if order < MIN_ORDER:
        raise ValueError("quadrature order must be at least 8")
    eta = np.atleast_1d(np.asarray(eta, dtype=float))
    n = eta.size + 1
    pts, wts = sphere_rule(n - 2, order)
    if fiber:
        zeta = np.concatenate([[xi], eta])
        if np.linalg.norm(zeta) == 0:
            raise ValueError("fiber regime needs (xi, eta) != 0")
        chi = chi or CutoffProfile()
        W = pts @ _complement(zeta / np.linalg.norm(zeta)).T
        r = np.linalg.norm(W[:, 1:], axis=1)
        keep = r >= EXCISION
        S = W[keep, 0] / r[keep]
        Y = W[keep, 1:] / r[keep, None]
        weights = wts[keep] * chi(S)
        total = np.einsum("p,pij->ij", weights, _batched(kind, S, Y))
        H, anti = _hermitize(total)
        return EquatorialIntegral(H, anti, float(wts[~keep].sum()))
    if F <= 0:
        raise ValueError("base regime needs F > 0")
    if alpha is None or alpha <= 0:
        raise ValueError("base regime needs alpha > 0")
    phi = alpha * (xi * xi + 1)
    weights = wts * np.exp(-(pts @ eta) ** 2 * F / (2 * phi))
    total = np.einsum("p,pij->ij", weights, _batched(kind, None, pts, xi, eta))
    H, anti = _hermitize(total / sphere_area(n - 2))
    return EquatorialIntegral(H, anti)


def solenoidal_tracefree_basis(regime: str, xi: float, eta, tol: float = 1e-10) -> np.ndarray:
    """Orthonormal basis (columns) of trace-free ``f`` with ``f c = 0``.

    ``c = (xi, eta)`` at fiber infinity and ``(xi_F - i, eta_F)`` at base
    infinity; the basis is complex in the latter case.
    """
    eta = np.atleast_1d(np.asarray(eta, dtype=float))
    n = eta.size + 1
    if regime == "fiber":
        c = np.concatenate([[xi], eta]).astype(float)
    elif regime == "base":
        c = np.concatenate([[xi - 1j], eta])
    else:
        raise ValueError(f"unknown regime {regime!r}")
    rows = [np.eye(n).ravel().astype(c.dtype)]
    rows += list(_lambda(c))
    return sla.null_space(np.array(rows), rcond=tol)


@dataclass
class SymbolReport:
    kind: str
    restricted: bool
    rows: list[dict] = field(default_factory=list)

    @property
    def min_eig(self) -> float:
        return min(r["min_eig"] for r in self.rows)

    @property
    def max_anti_part(self) -> float:
        return max(r["anti_part"] for r in self.rows)

    @property
    def passed(self) -> bool:
        return all(r["pass"] for r in self.rows)


def direction_grid(n: int, count: int = 64, seed: int = 0) -> np.ndarray:
    """``count`` unit vectors in ``R^n``: a Fibonacci lattice for n = 3."""
    if n == 3:
        k = np.arange(count) + 0.5
        z = 1 - 2 * k / count
        phi = math.pi * (1 + 5 ** 0.5) * k
        r = np.sqrt(1 - z * z)
        return np.stack([z, r * np.cos(phi), r * np.sin(phi)], axis=1)
    v = np.random.default_rng(seed).normal(size=(count, n))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def ellipticity_scan(kind: str, directions, Fs=(1.0,), *, restricted: bool = True,
                     radii=(0.0, 0.5, 1.0, 2.0), alpha: float = 0.5, order: int | None = None,
                     chi: CutoffProfile | None = None) -> SymbolReport:
    """Smallest eigenvalue of each equatorial integral.

    Fiber kinds use each direction as ``(xi, eta)``; base kinds use every
    ``radius * direction`` as ``(xi_F, eta_F)`` and each ``F`` in ``Fs``.
    With ``restricted`` the (1,1) kinds are compressed to the solenoidal
    trace-free subspace.
    """
    directions = np.atleast_2d(np.asarray(directions, dtype=float))
    report = SymbolReport(kind, restricted and kind.startswith("L11"))
    fiber = kind.endswith("FIBER")
    points = [(d, 0.0) for d in directions] if fiber else \
        [(r * d, F) for F in Fs for r in radii for d in (directions if r else directions[:1])]
    for freq, F in points:
        xi, eta = float(freq[0]), freq[1:]
        res = equatorial_integral(kind, xi, eta, F, order, alpha=alpha, chi=chi)
        A = res.matrix
        dim = A.shape[0]
        if report.restricted:
            B = solenoidal_tracefree_basis("fiber" if fiber else "base", xi, eta)
            A = B.conj().T @ A @ B
            dim = B.shape[1]
        lo = float(np.linalg.eigvalsh(0.5 * (A + A.conj().T))[0])
        report.rows.append({"kind": kind, "xi": xi, "eta": [float(e) for e in eta], "F": float(F),
                            "min_eig": lo, "anti_part": res.anti_part, "dim": int(dim),
                            "pass": lo > 0})
    return report


def kernel_system(rho: float, n: int) -> np.ndarray:
    """The ``n x n`` block system whose regularity closes the fiber kernel argument."""
    if n < 3 or rho < 0:
        raise ValueError("need n >= 3 and rho >= 0")
    m = n - 2
    A = np.zeros((n, n))
    A[0] = 1.0
    A[1, 0] = -(rho + 1)
    A[1, 2:] = rho
    A[2:, 1] = rho + 1
    A[2:, 2:] = -np.eye(m)
    return A


def kernel_system_check(rho: float, n: int = 3) -> float:
    return float(np.linalg.det(kernel_system(rho, n)))


# ---------------------------------------------------------------------------
# gauge symbols (Christoffel term a = 0)

def _c(xi, eta, F):
    return np.concatenate([[xi + 1j * F], np.asarray(eta, dtype=float)])


def sigma_d(xi, eta, F) -> np.ndarray:
    """Symbol of ``d^B_F / i``: ``v -> B(v c^T)``, shape (n*n, n)."""
    c = _c(xi, eta, F)
    n = c.size
    outer = np.kron(np.eye(n), c[:, None])
    return (np.eye(n * n) - np.outer(np.eye(n).ravel(), np.eye(n).ravel()) / n) @ outer


def sigma_delta(xi, eta, F) -> np.ndarray:
    """Symbol of ``delta^B_F / i``: ``f -> (B f) conj(c)``, shape (n, n*n)."""
    c = _c(xi, eta, F)
    n = c.size
    B = np.eye(n * n) - np.outer(np.eye(n).ravel(), np.eye(n).ravel()) / n
    return _lambda(c.conj()) @ B


def sigma_minus_laplacian(xi, eta, F) -> np.ndarray:
    """``|c|^2 I - (1/n) conj(c) c^T`` as displayed for the weighted Laplacian."""
    c = _c(xi, eta, F)
    n = c.size
    return np.vdot(c, c).real * np.eye(n) - np.outer(c.conj(), c) / n


def gauge_M(xi, eta, F) -> np.ndarray:
    c = _c(xi, eta, F)
    return 2 * np.vdot(c, c).real * np.eye(c.size) - np.outer(c.conj(), c)


def decomposition_terms(xi, eta, F) -> dict[str, np.ndarray]:
    """Symbols of the operator groups in the weighted-Laplacian decomposition."""
    eta = np.asarray(eta, dtype=float)
    n = eta.size + 1
    e2 = float(eta @ eta)
    q = xi * xi + F * F
    D12 = np.diag(np.concatenate([[e2], np.full(n - 1, q)])).astype(complex)
    d3 = np.concatenate([[xi - 1j * F], -eta])
    D3 = np.outer(d3, d3.conj())
    D45 = np.zeros((n, n), dtype=complex)
    D45[1:, 1:] = e2 * np.eye(n - 1) - np.outer(eta, eta)
    rough = (xi * xi + F * F + e2) * np.eye(n)
    return {"rough": rough, "D12": D12, "D3": D3, "D45": D45}


def decomposition_residual(xi, eta, F, coefficient_12: float | None = None) -> float:
    """``|sigma(-Delta) - [(n-2)/n rough + k D12 + D3/n + 2/n D45]|``.

    ``coefficient_12`` defaults to ``2/n``, the value that makes the
    identity hold; any other value leaves a residual of order ``|c|^2``.
    """
    n = len(np.atleast_1d(eta)) + 1
    k = 2.0 / n if coefficient_12 is None else coefficient_12
    t = decomposition_terms(xi, eta, F)
    rhs = (n - 2) / n * t["rough"] + k * t["D12"] + t["D3"] / n + 2.0 / n * t["D45"]
    return float(np.abs(sigma_minus_laplacian(xi, eta, F) - rhs).max())


def m_inequality_chain(xi, eta, F, fx: complex, fy: np.ndarray) -> tuple[float, float]:
    """The quadratic form of ``M - 2 diag(|eta|^2, xi^2 + F^2)`` and its lower bound."""
    eta = np.asarray(eta, dtype=float)
    q = xi * xi + F * F
    ef = complex(eta @ fy)
    form = (q * abs(fx) ** 2 - 2 * ((xi - 1j * F) * np.conj(fx) * ef).real
            + 2 * float(eta @ eta) * float(np.vdot(fy, fy).real) - abs(ef) ** 2)
    bound = q * abs(fx) ** 2 - abs(xi - 1j * F) ** 2 * abs(fx) ** 2 - 2 * abs(ef) ** 2 \
        + 2 * float(eta @ eta) * float(np.vdot(fy, fy).real)
    return float(form), float(bound)


def gauge_symbol_check(xi, eta, F, n: int | None = None) -> dict:
    eta = np.atleast_1d(np.asarray(eta, dtype=float))
    n = n or eta.size + 1
    if eta.size != n - 1:
        raise ValueError("eta must have n - 1 components")
    comp = sigma_delta(xi, eta, F) @ sigma_d(xi, eta, F) - sigma_minus_laplacian(xi, eta, F)
    lap = sigma_minus_laplacian(xi, eta, F)
    size = xi * xi + float(eta @ eta) + F * F
    lap_min = float(np.linalg.eigvalsh(lap)[0])
    return {
        "composition": float(np.abs(comp).max()),
        "decomposition": decomposition_residual(xi, eta, F),
        "decomposition_half_12": decomposition_residual(xi, eta, F, 1.0 / n),
        "M_min_eig": float(np.linalg.eigvalsh(gauge_M(xi, eta, F))[0]),
        "laplacian_min_eig": lap_min,
        "ellipticity_constant": lap_min / size if size else float("nan"),
        "hermitian": float(np.abs(lap - lap.conj().T).max()),
    }


def extension_coefficients() -> tuple[Fraction, Fraction, Fraction]:
    """Exact solution of the 3 x 3 derivative-matching system."""
    A = [[Fraction(-1), Fraction(-1, 2), Fraction(-1, 3)],
         [Fraction(1), Fraction(1), Fraction(1)],
         [Fraction(-1), Fraction(-2), Fraction(-3)]]
    b = [Fraction(1)] * 3
    # Gauss-Jordan elimination in exact arithmetic
    M = [row[:] + [v] for row, v in zip(A, b)]
    for col in range(3):
        piv = next(r for r in range(col, 3) if M[r][col] != 0)
        M[col], M[piv] = M[piv], M[col]
        M[col] = [v / M[col][col] for v in M[col]]
        for r in range(3):
            if r != col and M[r][col] != 0:
                M[r] = [a - M[r][col] * p for a, p in zip(M[r], M[col])]
    return tuple(M[r][3] for r in range(3))
