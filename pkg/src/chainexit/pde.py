"""Backward equation for the exit probability of a two-subsystem scalar chain.

The regularised operator

    v_t + f1 v_x1 + f2 v_x2 + (eps/2) a v_x1x1 + (delta2/2) v_x2x2 = 0

is solved backward from ``t = T`` on ``[c - R, c + R] x D`` with Lie-split
alternating-direction implicit Euler steps (x1 lines, then x2 lines) and
first-order upwinding, so each line system is an M-matrix and the discrete
maximum principle holds.  Outflow nodes of the x2 boundary carry the
Dirichlet value; inflow and tangential boundary nodes and the x1 truncation
use homogeneous Neumann conditions (ghost-node reflection).
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace

import numpy as np

from ._backend import get_kernels
from .montecarlo import ExitProblem

__all__ = ["PdeGrid", "PdeSolution", "ResidualReport", "Bump", "solve_bvp", "weak_residual",
           "default_bumps", "mollifier_study", "truncation_check", "mollified_terminal",
           "default_radius"]

VIOLATION_TOL = 1e-8


@dataclass(frozen=True)
class PdeGrid:
    """``K_t`` time steps, ``K1`` x1 nodes on ``[c-R, c+R]``, ``K2`` x2 nodes on the closed domain.

    ``R = None`` selects :func:`default_radius`; ``k`` is the mollification
    index of the terminal data.
    """

    K_t: int = 128
    K1: int = 128
    K2: int = 128
    R: float | None = None
    k: float = 100.0

    def __post_init__(self):
        if min(self.K_t, self.K1, self.K2) < 8:
            raise ValueError("K_t, K1 and K2 must be >= 8")
        if self.k <= 0:
            raise ValueError("mollification index must be positive")

    def refined(self) -> "PdeGrid":
        """Every spacing halved (node sets nested)."""
        return replace(self, K_t=2 * self.K_t, K1=2 * self.K1 - 1, K2=2 * self.K2 - 1)


def default_radius(problem: ExitProblem, eps: float) -> float:
    """``4 sqrt(eps (T-s)) |sigma| + (T-s) max|f1|`` over a neighbourhood of the start."""
    s, T = problem.horizon
    m = problem.model
    c = problem.init[0]
    span = T - s
    ts = np.linspace(s, T, 5)
    R = 1.0
    for _ in range(2):
        xs = np.linspace(c - R, c + R, 33)
        tt, xx = np.meshgrid(ts, xs, indexing="ij")
        sig = m.sigma_at(tt.ravel(), xx.reshape(-1, 1))
        snorm = float(np.max(np.linalg.norm(sig, ord=2, axis=(-2, -1))))
        f1 = float(np.max(np.abs(m.drift(1, tt.ravel(), xx.reshape(-1, 1)))))
        R = 4.0 * math.sqrt(eps * span) * snorm + span * f1
    return max(R, 1e-3)


def mollified_terminal(k: float, lo: float, hi: float):
    """``psi_k(x2) = max(0, 1 - k dist(x2, boundary))``."""
    def psi(x1, x2):
        dist = np.minimum(x2 - lo, hi - x2)
        return np.maximum(0.0, 1.0 - k * dist) + 0.0 * x1
    return psi


@dataclass
class PdeSolution:
    v: np.ndarray
    t: np.ndarray
    x1: np.ndarray
    x2: np.ndarray
    outflow: np.ndarray
    eps: float
    delta2: float
    grid: PdeGrid
    R: float
    violations: int
    min_value: float
    max_value: float
    scheme: str = "lie-adi implicit euler, upwind drift"
    residual: dict | None = None

    def probe(self, t, x1, x2) -> np.ndarray:
        """Trilinear interpolation of ``v``."""
        from scipy.interpolate import RegularGridInterpolator

        f = RegularGridInterpolator((self.t, self.x1, self.x2), self.v)
        pts = np.stack(np.broadcast_arrays(np.asarray(t, float), np.asarray(x1, float),
                                           np.asarray(x2, float)), axis=-1)
        return f(pts)

    def metadata(self) -> dict:
        return {"shape": list(self.v.shape), "order": "t,x1,x2 row-major", "dtype": "<f8",
                "t": [float(self.t[0]), float(self.t[-1])],
                "x1": [float(self.x1[0]), float(self.x1[-1])],
                "x2": [float(self.x2[0]), float(self.x2[-1])],
                "eps": self.eps, "delta2": self.delta2, "k": self.grid.k, "R": self.R,
                "K_t": self.grid.K_t, "K1": self.grid.K1, "K2": self.grid.K2,
                "violations": self.violations, "min": self.min_value, "max": self.max_value,
                "scheme": self.scheme, "residual": self.residual}

    def save(self, path) -> None:
        """Flat little-endian float64 array plus ``<path>.json`` sidecar."""
        np.ascontiguousarray(self.v, dtype="<f8").tofile(path)
        with open(f"{path}.json", "w", encoding="utf-8") as fh:
            json.dump(self.metadata(), fh, indent=2, sort_keys=True)


def _line_system(diff, drift, h, dt, dirichlet, value):
    """Tridiagonal rows of ``I - dt (diff d2/dx2 + upwind drift d/dx)`` along the last axis.

    ``diff`` and ``drift`` broadcast to ``(B, n)``; Neumann ghost reflection
    at both ends; rows flagged in ``dirichlet`` become identities.
    """
    B, n = dirichlet.shape
    D = np.broadcast_to(diff, (B, n)) / (h * h)
    fp = np.maximum(np.broadcast_to(drift, (B, n)), 0.0) / h
    fm = np.maximum(-np.broadcast_to(drift, (B, n)), 0.0) / h
    lower = -dt * (D + fm)
    upper = -dt * (D + fp)
    diag = 1.0 + dt * (2.0 * D + fp + fm)
    # ghost reflection: v_{-1} = v_1, v_n = v_{n-2}; outward advection drops out
    upper[:, 0] = -dt * (2.0 * D[:, 0] + fp[:, 0])
    diag[:, 0] = 1.0 + dt * (2.0 * D[:, 0] + fp[:, 0])
    lower[:, -1] = -dt * (2.0 * D[:, -1] + fm[:, -1])
    diag[:, -1] = 1.0 + dt * (2.0 * D[:, -1] + fm[:, -1])
    lower[dirichlet] = 0.0
    upper[dirichlet] = 0.0
    diag[dirichlet] = 1.0
    return (np.ascontiguousarray(lower), np.ascontiguousarray(diag), np.ascontiguousarray(upper))


def solve_bvp(problem: ExitProblem, eps: float, delta2: float = 1e-3, grid: PdeGrid | None = None,
              terminal=None, boundary_value: float = 1.0, tol: float = 1e-6,
              backend: str | None = None) -> PdeSolution:
    """Exit probability ``v(t, x1, x2)`` for ``ell = 2``, ``d = 1``.

    ``terminal`` is a callable ``psi(x1, x2)``, a constant, or ``None`` for the
    mollified data ``psi_k``; ``boundary_value`` is imposed on outflow nodes.
    """
    m = problem.model
    if problem.ell != 2 or m.d != 1:
        raise ValueError("PDE solver supports ell = 2 and d = 1 only")
    if problem.domain.kind != "box":
        raise ValueError("PDE solver needs an interval domain")
    if not eps > 0 or not delta2 > 0:
        raise ValueError("eps and delta2 must be positive")
    grid = grid or PdeGrid()
    tri = get_kernels(backend).tridiag_solve
    s, T = problem.horizon
    lo, hi = problem.domain.a[0], problem.domain.b[0]
    R = grid.R if grid.R is not None else default_radius(problem, eps)
    c = problem.init[0]
    t = np.linspace(s, T, grid.K_t + 1)
    x1 = np.linspace(c - R, c + R, grid.K1)
    x2 = np.linspace(lo, hi, grid.K2)
    h1, h2 = x1[1] - x1[0], x2[1] - x2[0]
    X1, X2 = np.meshgrid(x1, x2, indexing="ij")
    XX = np.stack([X1.ravel(), X2.ravel()], axis=1)

    if terminal is None:
        terminal = mollified_terminal(grid.k, lo, hi)
    psi = np.broadcast_to(terminal(X1, X2) if callable(terminal) else float(terminal),
                          X1.shape).astype(float)
    v = np.empty((t.size,) + X1.shape)
    outflow = np.zeros((t.size, grid.K1, 2), dtype=bool)

    def coeffs(tn):
        f1 = m.drift(1, tn, x1[:, None])[:, 0]
        a = m.diffusion_matrix(tn, x1[:, None])[:, 0, 0]
        f2 = m.drift(2, tn, XX)[:, 0].reshape(X1.shape)
        return f1, a, f2

    def dirichlet_mask(f2):
        mask = np.zeros(X1.shape, dtype=bool)
        mask[:, 0] = -f2[:, 0] > tol
        mask[:, -1] = f2[:, -1] > tol
        return mask

    f1, a, f2 = coeffs(T)
    mask = dirichlet_mask(f2)
    outflow[-1] = mask[:, [0, -1]]
    cur = np.where(mask, boundary_value, psi)
    v[-1] = cur
    for n in range(grid.K_t - 1, -1, -1):
        dt = t[n + 1] - t[n]
        f1, a, f2 = coeffs(t[n])
        mask = dirichlet_mask(f2)
        outflow[n] = mask[:, [0, -1]]
        # x1 lines: one system per x2 node
        mT = np.ascontiguousarray(mask.T)
        lw, dg, up = _line_system(0.5 * eps * a[None, :], f1[None, :], h1, dt, mT, boundary_value)
        rhs = np.where(mT, boundary_value, cur.T)
        cur = tri(lw, dg, up, np.ascontiguousarray(rhs)).T
        # x2 lines: one system per x1 node
        lw, dg, up = _line_system(0.5 * delta2, f2, h2, dt, mask, boundary_value)
        rhs = np.where(mask, boundary_value, cur)
        cur = tri(lw, dg, up, np.ascontiguousarray(rhs))
        v[n] = cur
    lo_v, hi_v = float(v.min()), float(v.max())
    bound = max(abs(boundary_value), float(np.max(np.abs(psi))), 1.0)
    viol = int(np.count_nonzero((v < -VIOLATION_TOL) | (v > bound + VIOLATION_TOL)))
    return PdeSolution(v=v, t=t, x1=x1, x2=x2, outflow=outflow, eps=eps, delta2=delta2, grid=grid,
                       R=R, violations=viol, min_value=lo_v, max_value=hi_v)


# ---------------------------------------------------------------- weak residual

def _bump_1d(r):
    """``b(r) = (1-r^2)^3`` on ``|r| < 1`` with first and second derivatives."""
    inside = np.abs(r) < 1
    q = np.where(inside, 1.0 - r * r, 0.0)
    b = q ** 3
    b1 = np.where(inside, -6.0 * r * q * q, 0.0)
    b2 = np.where(inside, -6.0 * q * q + 24.0 * r * r * q, 0.0)
    return b, b1, b2


@dataclass(frozen=True)
class Bump:
    """Product bump centred at ``(t, x1, x2)`` with half-widths ``(wt, w1, w2)``."""

    center: tuple
    width: tuple

    def parts(self, T, X1, X2):
        out = []
        for y, c, w in zip((T, X1, X2), self.center, self.width):
            b, b1, b2 = _bump_1d((y - c) / w)
            out.append((b, b1 / w, b2 / (w * w)))
        return out


def default_bumps(sol: PdeSolution) -> list[Bump]:
    """Eight bumps covering the interior of the space-time box."""
    t0, t1 = sol.t[0], sol.t[-1]
    a, b = sol.x2[0], sol.x2[-1]
    c1 = 0.5 * (sol.x1[0] + sol.x1[-1])
    R = 0.5 * (sol.x1[-1] - sol.x1[0])
    wt = 0.22 * (t1 - t0)
    w1 = 0.35 * R
    w2 = 0.22 * (b - a)
    bumps = []
    for ft in (0.3, 0.7):
        for f1 in (-0.4, 0.4):
            for f2 in (0.35, 0.65):
                bumps.append(Bump((t0 + ft * (t1 - t0), c1 + f1 * R, a + f2 * (b - a)), (wt, w1, w2)))
    return bumps


@dataclass
class ResidualReport:
    max_abs: float
    residuals: list
    bumps: list

    def to_json(self) -> dict:
        return {"max_abs": self.max_abs, "residuals": self.residuals,
                "bumps": [{"center": list(b.center), "width": list(b.width)} for b in self.bumps]}


def _fd(fn, x, h):
    """Central first and second differences of ``fn`` in its argument."""
    fp, f0, fm = fn(x + h), fn(x), fn(x - h)
    return f0, (fp - fm) / (2 * h), (fp - 2 * f0 + fm) / (h * h)


def weak_residual(sol: PdeSolution, model, eps: float, bumps=None, fd_step: float = 1e-4,
                  min_nodes: int = 5) -> ResidualReport:
    """Quadrature of ``v (-phi_t + L* phi)`` for each bump, divided by ``|phi|_1``.

    ``L* phi = -(f1 phi)_x1 - (f2 phi)_x2 + (eps/2) (a phi)_x1x1 + (delta2/2) phi_x2x2``;
    bump derivatives are exact, coefficient derivatives are central differences.
    """
    bumps = default_bumps(sol) if bumps is None else list(bumps)
    t, x1, x2 = sol.t, sol.x1, sol.x2
    dV = (t[1] - t[0]) * (x1[1] - x1[0]) * (x2[1] - x2[0])
    out = []
    for bmp in bumps:
        lo = [c - w for c, w in zip(bmp.center, bmp.width)]
        hi = [c + w for c, w in zip(bmp.center, bmp.width)]
        axes = (t, x1, x2)
        if any(l < ax[0] or h > ax[-1] for l, h, ax in zip(lo, hi, axes)):
            raise ValueError(f"bump support {lo}..{hi} leaves the grid")
        sel = [np.flatnonzero((ax > l) & (ax < h)) for ax, l, h in zip(axes, lo, hi)]
        if any(s_.size < min_nodes for s_ in sel):
            raise ValueError(f"bump support holds fewer than {min_nodes} nodes per axis")
        tt, y1, y2 = (ax[s_] for ax, s_ in zip(axes, sel))
        TT, Y1, Y2 = np.meshgrid(tt, y1, y2, indexing="ij")
        (bt, bt1, _), (b1, b11, b12), (b2, b21, b22) = bmp.parts(TT, Y1, Y2)
        phi = bt * b1 * b2
        phi_t = bt1 * b1 * b2
        phi_1 = bt * b11 * b2
        phi_11 = bt * b12 * b2
        phi_2 = bt * b1 * b21
        phi_22 = bt * b1 * b22
        tf, y1f = TT.ravel(), Y1.ravel()
        Xf = np.stack([y1f, Y2.ravel()], axis=1)

        def f1_of(z):
            return model.drift(1, tf, z[:, None])[:, 0]

        def a_of(z):
            return model.diffusion_matrix(tf, z[:, None])[:, 0, 0]

        def f2_of_x2(z):
            return model.drift(2, tf, np.stack([y1f, z], axis=1))[:, 0]

        f1, f1_x, _ = _fd(f1_of, y1f, fd_step)
        a, a_x, a_xx = _fd(a_of, y1f, fd_step)
        f2, f2_x2, _ = _fd(f2_of_x2, Xf[:, 1], fd_step)
        shp = phi.shape
        f1, f1_x, a, a_x, a_xx, f2, f2_x2 = (q.reshape(shp) for q in (f1, f1_x, a, a_x, a_xx, f2, f2_x2))
        Lstar = (-(f1_x * phi + f1 * phi_1) - (f2_x2 * phi + f2 * phi_2)
                 + 0.5 * eps * (a_xx * phi + 2 * a_x * phi_1 + a * phi_11)
                 + 0.5 * sol.delta2 * phi_22)
        integrand = sol.v[np.ix_(*sel)] * (-phi_t + Lstar)
        norm = float(np.sum(np.abs(phi)) * dV)
        out.append(float(np.sum(integrand) * dV / norm))
    return ResidualReport(max_abs=float(np.max(np.abs(out))), residuals=out, bumps=bumps)


# ---------------------------------------------------------------- studies

def mollifier_study(problem: ExitProblem, eps: float, delta2: float, grid: PdeGrid, k_schedule,
                    probes) -> list[dict]:
    """``v_k`` at probe points for each ``k`` and the gap to the next ``k``."""
    ks = [float(k) for k in k_schedule]
    if any(b <= a for a, b in zip(ks, ks[1:])):
        raise ValueError("k schedule must be increasing")
    probes = np.asarray(probes, dtype=float).reshape(-1, 3)
    vals = []
    for k in ks:
        sol = solve_bvp(problem, eps, delta2, replace(grid, k=k))
        vals.append(sol.probe(probes[:, 0], probes[:, 1], probes[:, 2]))
    rows = []
    for i, k in enumerate(ks):
        gap = float(np.max(np.abs(vals[i + 1] - vals[i]))) if i + 1 < len(ks) else None
        rows.append({"k": k, "values": [float(v) for v in vals[i]], "gap_to_next": gap})
    return rows


def truncation_check(problem: ExitProblem, eps: float, delta2: float, grid: PdeGrid, probes) -> float:
    """Largest relative change at the probes when the x1 half-width at least doubles.

    The axis is extended by whole cells so the original nodes are kept and the
    change reflects truncation rather than interpolation.
    """
    R = grid.R if grid.R is not None else default_radius(problem, eps)
    probes = np.asarray(probes, dtype=float).reshape(-1, 3)
    h = 2 * R / (grid.K1 - 1)
    extra = grid.K1 // 2
    a = solve_bvp(problem, eps, delta2, replace(grid, R=R)).probe(*probes.T)
    b = solve_bvp(problem, eps, delta2,
                  replace(grid, R=R + extra * h, K1=grid.K1 + 2 * extra)).probe(*probes.T)
    return float(np.max(np.abs(b - a) / np.maximum(np.abs(a), 1e-300)))
