"""Oblique projections, the transverse transform T1 and the mixed transform L11."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .geometry import (DEFAULT_STEP, GeometryError, MetricChart, RayHalf, parallel_transport,
                       shoot_geodesic, trace_half)
from .tensors import TRACE_TOL

PAIRING_TOL = 1e-12
ALONG_RAY_PAIRING_TOL = 1e-8
EXPONENT_CLAMP = 700.0
EXPONENT_WARN = 50.0
KINDS = ("T1", "L11")


class DegeneratePairingError(ValueError):
    pass


def oblique_projection(w, v) -> np.ndarray:
    """``p = I - w v^T / <w, v>``: kills ``w``, fixes the kernel of ``v``."""
    w = np.asarray(w, dtype=float)
    v = np.asarray(v, dtype=float)
    pair = np.einsum("...i,...i->...", w, v)
    if np.any(np.abs(pair) < PAIRING_TOL):
        raise DegeneratePairingError("vector and covector pair to (almost) zero")
    n = w.shape[-1]
    return np.eye(n) - w[..., :, None] * v[..., None, :] / pair[..., None, None]


@dataclass
class RaySpec:
    z: np.ndarray
    zeta: np.ndarray
    theta: np.ndarray
    eta0: np.ndarray | None = None

    def __post_init__(self):
        self.z = np.asarray(self.z, dtype=float)
        self.zeta = np.asarray(self.zeta, dtype=float)
        self.theta = np.asarray(self.theta, dtype=float)
        if abs(self.theta @ self.zeta) < ALONG_RAY_PAIRING_TOL:
            raise DegeneratePairingError("reference covector annihilates the direction")
        if self.eta0 is not None:
            self.eta0 = np.asarray(self.eta0, dtype=float)
            if abs(self.eta0 @ self.zeta) > 1e-10:
                raise GeometryError("eta0 is not conormal to the ray")


def weight_exponent(F: float, x_path: np.ndarray, x_ref) -> tuple[np.ndarray, float]:
    """``F (1/x(gamma) - 1/x_ref)`` clamped to +-700, plus its largest magnitude."""
    if F == 0:
        return np.zeros_like(x_path), 0.0
    with np.errstate(divide="ignore"):
        e = F * (1.0 / x_path - 1.0 / np.asarray(x_ref)[..., None])
    e = np.nan_to_num(e, nan=EXPONENT_CLAMP, posinf=EXPONENT_CLAMP, neginf=-EXPONENT_CLAMP)
    peak = float(np.max(np.abs(e))) if e.size else 0.0
    return np.clip(e, -EXPONENT_CLAMP, EXPONENT_CLAMP), peak


@dataclass
class RayBatch:
    """Both halves of a batch of rays with their transported dual frames."""

    halves: tuple[RayHalf, RayHalf]
    theta0: np.ndarray

    def samples(self):
        """Yield per half: mask, weights, positions, velocities, frames, theta(t)."""
        for half in self.halves:
            K = half.t.shape[1]
            mask = np.arange(K)[None, :] < half.count[:, None]
            theta = np.einsum("ra,rkan->rkn", self.theta0, half.covectors)
            yield mask, half.weights, half.pos, half.vel, half.covectors, theta


def trace_batch(chart: MetricChart, z, zeta, theta, step: float = DEFAULT_STEP) -> RayBatch:
    z = np.atleast_2d(z)
    frames = np.broadcast_to(np.eye(chart.n), (z.shape[0], chart.n, chart.n))
    halves = tuple(trace_half(chart, z, zeta, step=step, sign=s, covectors=frames) for s in (-1.0, 1.0))
    return RayBatch(halves, np.atleast_2d(np.asarray(theta, dtype=float)))


def projectors_along(vel: np.ndarray, theta: np.ndarray) -> np.ndarray:
    pair = np.einsum("...i,...i->...", vel, theta)
    if np.any(np.abs(pair) < ALONG_RAY_PAIRING_TOL):
        raise DegeneratePairingError("degenerate pairing <theta(t), gamma'(t)> along the ray")
    n = vel.shape[-1]
    return np.eye(n) - vel[..., :, None] * theta[..., None, :] / pair[..., None, None]


def integrate_batch(chart: MetricChart, batch: RayBatch, field, kind: str, F: float = 0.0,
                    x_ref=None) -> tuple[np.ndarray, float]:
    """Forward transform of ``field`` along every ray of ``batch``.

    ``field`` maps points ``(..., n)`` to vectors (T1) or (1,1) tensors
    (L11).  The weight ``exp(F (1/x(gamma) - 1/x_ref))`` is folded into the
    integrand.  Returns ``(values (N, n), peak exponent)``.
    """
    if kind not in KINDS:
        raise ValueError(f"unknown transform kind {kind!r}")
    N = batch.theta0.shape[0]
    out = np.zeros((N, chart.n))
    peak = 0.0
    for mask, w, pos, vel, frame, theta in batch.samples():
        p = projectors_along(vel[mask], theta[mask])
        fval = np.asarray(field(pos[mask]), dtype=float)
        if kind == "T1":
            q = np.einsum("sij,sj->si", p, fval)
        else:
            q = np.einsum("sij,sjk,sk->si", p, fval, vel[mask])
        back = np.einsum("sij,sj->si", frame[mask], q)
        e, pk = weight_exponent(F, chart.bdf(pos), x_ref if x_ref is not None else np.zeros(N))
        peak = max(peak, pk)
        scale = (w * np.exp(e))[mask]
        rows = np.nonzero(mask)[0]
        np.add.at(out, rows, back * scale[:, None])
    return out, peak


def _single(chart, f, ray: RaySpec, kind, step, F, x_ref):
    chart.check_inside(ray.z)
    speed = float(chart.norm(ray.z, ray.zeta))
    if abs(speed - 1.0) > 1e-10:
        raise GeometryError("ray direction must be unit speed")
    batch = trace_batch(chart, ray.z[None], ray.zeta[None], ray.theta[None], step)
    xr = None if F == 0 else np.array([chart.bdf(ray.z) if x_ref is None else x_ref])
    val, peak = integrate_batch(chart, batch, f, kind, F, xr)
    if peak > EXPONENT_WARN:
        warnings.warn(f"weight exponent reached {peak:.1f}", RuntimeWarning, stacklevel=3)
    return val[0]


def transverse_T1(chart: MetricChart, f, ray: RaySpec, *, step: float = DEFAULT_STEP,
                  F: float = 0.0, x_ref: float | None = None) -> np.ndarray:
    """Transverse transform of a vector field, returned as a vector at ``ray.z``."""
    return _single(chart, f, ray, "T1", step, F, x_ref)


def mixed_L11(chart: MetricChart, f, ray: RaySpec, *, step: float = DEFAULT_STEP,
              F: float = 0.0, x_ref: float | None = None, check_trace_at=None) -> np.ndarray:
    """Mixed transform of a trace-free (1,1) field, returned as a vector at ``ray.z``."""
    if check_trace_at is not None:
        tr = np.trace(np.asarray(f(np.asarray(check_trace_at))), axis1=-2, axis2=-1)
        if np.max(np.abs(tr)) > TRACE_TOL:
            raise ValueError("mixed_L11 expects a trace-free field")
    return _single(chart, f, ray, "L11", step, F, x_ref)


def mixed_classic(chart: MetricChart, f, z, zeta, eta0, *, step: float = DEFAULT_STEP) -> float:
    """``int f^i_j(gamma) eta_i gamma'^j dt`` with ``eta`` the parallel transport of ``eta0``.

    Coded independently of :func:`mixed_L11`: the covector is integrated
    on its own and no projector or frame is involved.
    """
    eta0 = np.asarray(eta0, dtype=float)
    zeta = np.asarray(zeta, dtype=float)
    if abs(eta0 @ zeta) > 1e-10:
        raise GeometryError("eta0 is not conormal to the ray")
    path = shoot_geodesic(chart, z, zeta, step=step)
    eta = parallel_transport(chart, path, eta0, covector=True)
    fv = np.asarray(f(path.points), dtype=float)
    integrand = np.einsum("ki,kij,kj->k", eta, fv, path.velocities)
    return float(path.weights @ integrand)


def conormal_unit(chart: MetricChart, z, zeta, rng: np.random.Generator) -> np.ndarray:
    """Random covector ``eta`` with ``eta(zeta) = 0`` and ``|eta|_g = 1``."""
    ginv = np.linalg.inv(chart.metric(np.asarray(z)))
    c = rng.normal(size=len(zeta))
    c -= (c @ zeta) / (zeta @ zeta) * zeta
    return c / math.sqrt(c @ ginv @ c)


def forward_batch(chart: MetricChart, f, z, zeta, theta, kind: str, *,
                  step: float = DEFAULT_STEP, F: float = 0.0, x_ref=None) -> np.ndarray:
    """Vectorised :func:`transverse_T1` / :func:`mixed_L11` over many rays."""
    z = np.atleast_2d(np.asarray(z, dtype=float))
    zeta = np.atleast_2d(np.asarray(zeta, dtype=float))
    chart.check_inside(z)
    if np.max(np.abs(chart.norm(z, zeta) - 1.0)) > 1e-10:
        raise GeometryError("ray directions must be unit speed")
    batch = trace_batch(chart, z, zeta, theta, step)
    if F and x_ref is None:
        x_ref = chart.bdf(z)
    val, peak = integrate_batch(chart, batch, f, kind, F, x_ref)
    if peak > EXPONENT_WARN:
        warnings.warn(f"weight exponent reached {peak:.1f}", RuntimeWarning, stacklevel=2)
    return val


def mixed_classic_batch(chart: MetricChart, f, z, zeta, eta0, *,
                        step: float = DEFAULT_STEP) -> np.ndarray:
    """Vectorised :func:`mixed_classic`; each covector is transported on its own."""
    z = np.atleast_2d(np.asarray(z, dtype=float))
    zeta = np.atleast_2d(np.asarray(zeta, dtype=float))
    eta0 = np.atleast_2d(np.asarray(eta0, dtype=float))
    if np.max(np.abs(np.einsum("ri,ri->r", eta0, zeta))) > 1e-10:
        raise GeometryError("eta0 is not conormal to the ray")
    total = np.zeros(z.shape[0])
    for sign in (-1.0, 1.0):
        half = trace_half(chart, z, zeta, step=step, sign=sign, covectors=eta0[:, None, :])
        K = half.t.shape[1]
        mask = np.arange(K)[None, :] < half.count[:, None]
        eta = half.covectors[:, :, 0, :][mask]
        fv = np.asarray(f(half.pos[mask]), dtype=float)
        integrand = np.einsum("si,sij,sj->s", eta, fv, half.vel[mask])
        np.add.at(total, np.nonzero(mask)[0], half.weights[mask] * integrand)
    return total
