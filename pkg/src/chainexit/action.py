"""Control Hamiltonian and Lagrangian, Legendre duality, minimum-action paths
and a dynamic-programming oracle for the deterministic exit cost."""
from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize

from .montecarlo import ExitProblem
from .sde import classify

__all__ = ["SingularDiffusionError", "hamiltonian", "lagrangian", "hamiltonian_batch",
           "lagrangian_batch", "legendre_gaps", "legendre_check", "GapReport", "ActionPath",
           "NoFeasiblePathError", "minimize_action", "confinement_action", "DPGrid", "DPTable",
           "dp_self_convergence",
           "dp_oracle"]


class SingularDiffusionError(ArithmeticError):
    pass


def _coeffs(model, s, x1):
    x1 = np.atleast_1d(np.asarray(x1, dtype=float))
    f = model.drift(1, s, x1)
    a = model.diffusion_matrix(s, x1)
    return f, a


def _check_spd(a):
    w = np.linalg.eigvalsh(a)
    if not np.all(w[..., 0] > 0):
        raise SingularDiffusionError("diffusion matrix sigma sigma^T is singular")


# H(p) = f.p - p.a p / 2 and L(u) = (f-u).a^{-1}(f-u) / 2 are Legendre duals:
# sup_p {H(p) - p.u} = L(u) at p* = a^{-1}(f-u); inf_u {L(u) + p.u} = H(p) at u* = f - a p.

def hamiltonian_batch(f, a, p):
    f, a, p = (np.asarray(v, dtype=float) for v in (f, a, p))
    ap = np.einsum("...ij,...j->...i", a, p)
    return np.einsum("...i,...i->...", f, p) - 0.5 * np.einsum("...i,...i->...", p, ap)


def lagrangian_batch(f, a, u):
    f, a, u = (np.asarray(v, dtype=float) for v in (f, a, u))
    r = f - u
    y = np.linalg.solve(a, r[..., None])[..., 0]
    return 0.5 * np.einsum("...i,...i->...", r, y)


def hamiltonian(model, s, x1, p) -> float:
    """``H(s, x1, p) = f1.p - p.a p / 2`` with ``a = sigma sigma^T``."""
    f, a = _coeffs(model, s, x1)
    _check_spd(a)
    return float(hamiltonian_batch(f, a, np.atleast_1d(np.asarray(p, dtype=float))))


def lagrangian(model, s, x1, u_hat) -> float:
    """``L(s, x1, u) = (f1 - u).a^{-1}(f1 - u) / 2``."""
    f, a = _coeffs(model, s, x1)
    _check_spd(a)
    return float(lagrangian_batch(f, a, np.atleast_1d(np.asarray(u_hat, dtype=float))))


def _polish(grad, hess_bound, z, steps=3):
    """A few gradient steps of length ``1/hess_bound`` (a no-op at a stationary point)."""
    for _ in range(steps):
        z = z - grad(z) / hess_bound[..., None]
    return z


def legendre_gaps(f, a, u, p, box=None):
    """Both duality gaps at each point; returns ``(gap_sup, gap_inf, p_star, u_star)``.

    ``box`` is a half-width: stationary points must lie in ``[-box, box]``;
    the box doubles once if needed, after which a ``ValueError`` is raised.
    """
    f, a, u, p = (np.asarray(v, dtype=float) for v in (f, a, u, p))
    p_star = np.linalg.solve(a, (f - u)[..., None])[..., 0]
    u_star = f - np.einsum("...ij,...j->...i", a, p)
    ev = np.linalg.eigvalsh(a)
    lam_max, lam_min = ev[..., -1], ev[..., 0]
    # ascent on H(p) - p.u has gradient f - u - a p; descent on L(u) + p.u has gradient p - a^{-1}(f-u)
    p_star = _polish(lambda q: -(f - u - np.einsum("...ij,...j->...i", a, q)), lam_max, p_star)
    u_star = _polish(lambda v: p - np.linalg.solve(a, (f - v)[..., None])[..., 0], 1.0 / lam_min, u_star)
    if box is not None:
        reach = max(float(np.max(np.abs(p_star))), float(np.max(np.abs(u_star))))
        if reach > box:
            box *= 2.0
            if reach > box:
                raise ValueError(f"stationary point at |.| = {reach:.3g} lies outside the search box")
    L = lagrangian_batch(f, a, u)
    H = hamiltonian_batch(f, a, p)
    sup_val = hamiltonian_batch(f, a, p_star) - np.einsum("...i,...i->...", p_star, u)
    inf_val = lagrangian_batch(f, a, u_star) + np.einsum("...i,...i->...", p, u_star)
    return np.abs(sup_val - L), np.abs(inf_val - H), p_star, u_star


@dataclass
class GapReport:
    max_gap_sup: float
    max_gap_inf: float
    count: int
    worst_index: int

    @property
    def max_gap(self) -> float:
        return max(self.max_gap_sup, self.max_gap_inf)

    def passed(self, tol: float = 1e-8) -> bool:
        return self.max_gap <= tol

    def to_json(self) -> dict:
        return {"max_gap_sup": self.max_gap_sup, "max_gap_inf": self.max_gap_inf,
                "count": self.count, "worst_index": self.worst_index}


def legendre_check(model, points, search_box: float = 1e3) -> GapReport:
    """Duality gaps at ``points``: rows ``(s, x1..., u..., p...)`` with ``d`` entries each."""
    d = model.d
    P = np.asarray(points, dtype=float).reshape(-1, 1 + 3 * d)
    s, x1, u, p = P[:, 0], P[:, 1:1 + d], P[:, 1 + d:1 + 2 * d], P[:, 1 + 2 * d:]
    f, a = _coeffs(model, s, x1)
    _check_spd(a)
    g1, g2, _, _ = legendre_gaps(f, a, u, p, search_box)
    worst = int(np.argmax(np.maximum(g1, g2)))
    return GapReport(float(np.max(g1)), float(np.max(g2)), len(P), worst)


# ---------------------------------------------------------------- minimum action

class NoFeasiblePathError(RuntimeError):
    def __init__(self, msg: str, best=None):
        super().__init__(msg)
        self.best = best


@dataclass
class ActionPath:
    t: np.ndarray
    u: np.ndarray
    states: np.ndarray
    theta: float
    action: float
    feasible: bool
    residuals: dict
    boundary_class: str
    transversality: float
    restarts: list = field(default_factory=list)

    def to_json(self) -> dict:
        return {"action": self.action, "theta": self.theta, "feasible": self.feasible,
                "residuals": self.residuals, "class": self.boundary_class,
                "transversality": self.transversality, "M": len(self.t) - 1,
                "restart_actions": self.restarts}

    def to_csv(self, path, d: int) -> None:
        ell = self.states.shape[1] // d
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["t"] + [f"u_{k}" for k in range(d)]
                       + [f"x{i}_{k}" for i in range(1, ell + 1) for k in range(d)])
            for tk, uk, xk in zip(self.t, self.u, self.states):
                w.writerow([repr(float(tk))] + [repr(float(v)) for v in uk] + [repr(float(v)) for v in xk])

    def save(self, stem, d: int) -> None:
        self.to_csv(f"{stem}.csv", d)
        with open(f"{stem}.json", "w", encoding="utf-8") as fh:
            json.dump(self.to_json(), fh, indent=2, sort_keys=True)


class _Transcription:
    """Piecewise-linear control on ``M+1`` nodes over the rescaled interval ``[0, 1]``.

    Decision vector ``z = (u_0, ..., u_M, rho)``; physical time is
    ``t = s + tau * rho * (T - s)``.  States follow RK4 on ``M * sub`` steps and
    the action is Simpson's rule on the same nodes.
    """

    def __init__(self, problem: ExitProblem, M: int, sub: int = 2):
        self.p = problem
        self.model = problem.model
        self.d = problem.model.d
        self.ell = problem.ell
        self.M = M
        self.sub = sub
        self.n = M * sub
        self.s, self.T = problem.horizon
        self.x0 = np.asarray(problem.init, dtype=float)
        self.dom = problem.domain
        tau = np.linspace(0.0, 1.0, self.n + 1)
        self.tau = tau
        # linear interpolation weights of nodes onto RK grid and stage midpoints
        self.W = self._interp(tau)
        self.Wm = self._interp(tau[:-1] + 0.5 / self.n)

    def _interp(self, tau):
        pos = tau * self.M
        i = np.minimum(np.floor(pos).astype(int), self.M - 1)
        w = pos - i
        W = np.zeros((tau.size, self.M + 1))
        W[np.arange(tau.size), i] = 1 - w
        W[np.arange(tau.size), i + 1] += w
        return W

    def unpack(self, Z):
        Z = np.atleast_2d(Z)
        B = Z.shape[0]
        U = Z[:, :-1].reshape(B, self.M + 1, self.d)
        return U, Z[:, -1]

    def _rhs(self, t, X, u):
        d = self.d
        out = np.empty_like(X)
        out[:, :d] = u
        for j in range(2, self.ell + 1):
            out[:, (j - 1) * d:j * d] = self.model.drift(j, t, X)
        return out

    def trajectory(self, Z):
        """States on the RK grid ``(B, n+1, ell*d)``, controls there, times and step."""
        U, rho = self.unpack(Z)
        B = U.shape[0]
        span = rho * (self.T - self.s)
        h = span / self.n
        Ug = np.einsum("kj,bjd->bkd", self.W, U)
        Um = np.einsum("kj,bjd->bkd", self.Wm, U)
        X = np.empty((B, self.n + 1, self.x0.size))
        x = np.broadcast_to(self.x0, (B, self.x0.size)).copy()
        X[:, 0] = x
        times = self.s + np.outer(span, self.tau)
        hc = h[:, None]
        for k in range(self.n):
            t = times[:, k]
            k1 = self._rhs(t, x, Ug[:, k])
            k2 = self._rhs(t + h / 2, x + hc / 2 * k1, Um[:, k])
            k3 = self._rhs(t + h / 2, x + hc / 2 * k2, Um[:, k])
            k4 = self._rhs(t + h, x + hc * k3, Ug[:, k + 1])
            x = x + hc / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
            X[:, k + 1] = x
        return X, Ug, times, h

    def action(self, X, Ug, times, h):
        d = self.d
        B = X.shape[0]
        Xf = X[:, :, :d].reshape(-1, d)
        tf = times.ravel()
        f = self.model.drift(1, tf, Xf)
        a = self.model.diffusion_matrix(tf, Xf)
        L = lagrangian_batch(f, a, Ug.reshape(-1, d)).reshape(B, self.n + 1)
        w = np.ones(self.n + 1)
        w[1:-1:2] = 4.0
        w[2:-1:2] = 2.0
        return h / 3.0 * (L @ w)

    def constraints(self, X, times):
        """Boundary miss, interior signed distances (nodes 1..n-1) and transversality."""
        d, ell = self.d, self.ell
        xl = X[:, :, (ell - 1) * d:ell * d]
        sd = self.dom.signed_distance(xl)
        miss = sd[:, -1]
        interior = sd[:, 1:-1]
        end = X[:, -1]
        n = self.dom.normal(end[:, (ell - 1) * d:])
        tr = np.sum(self.model.drift(ell, times[:, -1], end) * n, axis=1)
        return miss, interior, tr


def _drift_following(tr: _Transcription):
    """Nodes of the zero-action control along the uncontrolled flow over ``[s, T]``."""
    from .sde import integrate_deterministic

    n = tr.M * 8
    traj = integrate_deterministic(tr.model, tr.x0, (tr.s, tr.T), (tr.T - tr.s) / n, ell=tr.ell)
    idx = np.arange(0, n + 1, 8)
    f = tr.model.drift(1, traj.t[idx], traj.states[idx])
    return traj, f


def _flow_exit(tr: _Transcription, tol: float):
    """Exit fraction of the uncontrolled flow through the outflow boundary, or ``None``."""
    from .sde import detect_exit, integrate_deterministic

    traj = integrate_deterministic(tr.model, tr.x0, (tr.s, tr.T), (tr.T - tr.s) / (tr.M * 64), ell=tr.ell)
    ev = detect_exit(traj, tr.dom, tr.ell, tr.model, tol)
    if ev.boundary_class != "gamma_plus":
        return None
    return (ev.theta - tr.s) / (tr.T - tr.s)


def _zero_action_path(tr: _Transcription, rho0: float, tol: float):
    """Drift-following controls with ``rho`` tuned so the path ends on the boundary."""
    def nodes_for(rho):
        # closed-loop path: u = f1 along the flow, sampled at the rescaled node times
        from .sde import integrate_deterministic
        span = rho * (tr.T - tr.s)
        traj = integrate_deterministic(tr.model, tr.x0, (tr.s, tr.s + span), span / (tr.M * 8), ell=tr.ell)
        idx = np.arange(0, tr.M * 8 + 1, 8)
        f = tr.model.drift(1, traj.t[idx], traj.states[idx])
        return np.concatenate([f.ravel(), [rho]])

    def miss(rho):
        Z = nodes_for(rho)
        X, _, times, _ = tr.trajectory(Z)
        return tr.constraints(X, times)[0][0]

    lo, hi = rho0 * (1 - 1e-3), min(1.0, rho0 * (1 + 1e-3))
    try:
        rho = optimize.brentq(miss, lo, hi, xtol=1e-14)
    except ValueError:
        rho = rho0
    return nodes_for(rho)


class _Objective:
    """Augmented-Lagrangian objective with batched central-difference gradients."""

    def __init__(self, tr: _Transcription, margin: float, free_theta: bool, require_exit: bool,
                 interior_margin: float = 0.0):
        self.tr = tr
        self.margin = margin
        self.free_theta = free_theta
        self.require_exit = require_exit
        self.imargin = interior_margin
        self.w = 10.0
        self.lam = 0.0
        self.mu_int = np.zeros(tr.n - 1 + (0 if require_exit else 1))
        self.mu_tr = 0.0

    def _parts(self, Z):
        tr = self.tr
        X, Ug, times, h = tr.trajectory(Z)
        act = tr.action(X, Ug, times, h)
        miss, interior, trv = tr.constraints(X, times)
        if not self.require_exit:
            sd_end = miss[:, None]
            interior = np.concatenate([interior, sd_end], axis=1)
        return act, miss, interior + self.imargin, trv

    def values(self, Z):
        act, miss, interior, trv = self._parts(Z)
        w = self.w
        val = act.copy()
        if self.require_exit:
            val += self.lam * miss + 0.5 * w * miss ** 2
            g = self.margin - trv
            val += (np.maximum(0.0, self.mu_tr + w * g) ** 2 - self.mu_tr ** 2) / (2 * w)
        val += np.sum(np.maximum(0.0, self.mu_int + w * interior) ** 2 - self.mu_int ** 2, axis=1) / (2 * w)
        return val

    def fun_grad(self, z):
        n = z.size
        hstep = 1e-6 * np.maximum(1.0, np.abs(z))
        if not self.free_theta:
            hstep[-1] = 0.0
        Z = np.vstack([z, z + np.diag(hstep), z - np.diag(hstep)])
        v = self.values(Z)
        g = np.zeros(n)
        nz = hstep > 0
        g[nz] = (v[1:n + 1][nz] - v[n + 1:][nz]) / (2 * hstep[nz])
        return float(v[0]), g

    def update(self, z):
        act, miss, interior, trv = self._parts(z[None, :])
        w = self.w
        if self.require_exit:
            self.lam += w * float(miss[0])
            self.mu_tr = max(0.0, self.mu_tr + w * float(self.margin - trv[0]))
        self.mu_int = np.maximum(0.0, self.mu_int + w * interior[0])

    def residuals(self, z):
        act, miss, interior, trv = self._parts(z[None, :])
        r = {"interior": float(max(0.0, np.max(interior[0]))) if interior.shape[1] else 0.0}
        if self.require_exit:
            r["boundary"] = float(abs(miss[0]))
            r["transversality"] = float(max(0.0, self.margin - trv[0]))
        return float(act[0]), r


def _solve_restart(tr, z0, margin, free_theta, require_exit, rounds, max_rounds, res_tol, maxiter,
                   interior_margin=0.0):
    obj = _Objective(tr, margin, free_theta, require_exit, interior_margin)
    bounds = [(None, None)] * (z0.size - 1) + [(1e-3, 1.0) if free_theta else (1.0, 1.0)]
    z = z0.copy()
    for r in range(max_rounds):
        res = optimize.minimize(obj.fun_grad, z, jac=True, method="L-BFGS-B", bounds=bounds,
                                options={"maxiter": maxiter, "ftol": 1e-15, "gtol": 1e-10,
                                         "maxcor": 20})
        z = res.x
        act, resid = obj.residuals(z)
        if r + 1 >= rounds and max(resid.values()) <= res_tol:
            break
        obj.update(z)
        if r + 1 < rounds:
            obj.w *= 2.0
    act, resid = obj.residuals(z)
    return z, act, resid


def _build_path(tr: _Transcription, z, act, resid, tol, res_tol, restarts) -> ActionPath:
    X, Ug, times, h = tr.trajectory(z[None, :])
    idx = np.arange(0, tr.n + 1, tr.sub)
    U, rho = tr.unpack(z[None, :])
    end = X[0, -1]
    d, ell = tr.d, tr.ell
    n = tr.dom.normal(end[(ell - 1) * d:])
    trv = float(tr.model.drift(ell, times[0, -1], end[None, :])[0] @ n)
    return ActionPath(t=times[0, idx], u=U[0], states=X[0, idx], theta=float(times[0, -1]),
                      action=float(act), feasible=max(resid.values()) <= res_tol,
                      residuals=resid, boundary_class=classify(trv, tol), transversality=trv,
                      restarts=restarts)


def minimize_action(problem: ExitProblem, M: int = 16, restarts: int = 16, seed: int = 0,
                    margin: float = 1e-3, rounds: int = 8, max_rounds: int = 40,
                    res_tol: float = 1e-6, maxiter: int = 400, sub: int = 2, tol: float = 1e-6,
                    threads: int | None = None) -> ActionPath:
    """Minimum of the action over controls that drive ``x^ell`` out through the outflow boundary by ``T``.

    If the uncontrolled flow already leaves through the outflow boundary the
    zero-action drift-following path is returned.  Otherwise each restart runs
    L-BFGS-B on an augmented-Lagrangian objective whose penalty weight doubles
    over ``rounds`` continuation rounds; further multiplier updates continue
    until every residual is below ``res_tol``.
    """
    if M < 4:
        raise ValueError("need M >= 4 control nodes")
    if problem.ell < 2:
        raise ValueError("minimum action needs a chain target ell >= 2")
    tr = _Transcription(problem, M, sub)
    rho_exit = _flow_exit(tr, tol)
    if rho_exit is not None:
        z = _zero_action_path(tr, rho_exit, tol)
        obj = _Objective(tr, margin, True, True)
        act, resid = obj.residuals(z)
        return _build_path(tr, z, act, resid, tol, res_tol, [act])

    _, f_nodes = _drift_following(tr)
    half = (np.asarray(tr.dom.b) - np.asarray(tr.dom.a)) / 2 if tr.dom.kind == "box" else np.full(tr.d, tr.dom.b[0])
    scale = max(1.0, float(np.max(np.abs(f_nodes))), float(np.max(half)) / (tr.T - tr.s))

    def one(r):
        rng = np.random.default_rng([seed, r])
        pert = rng.normal(0.0, scale * (0.5 + r / max(restarts, 1)), tr.d) * np.ones((M + 1, tr.d))
        pert += rng.normal(0.0, 0.3 * scale, (M + 1, tr.d))
        rho0 = 1.0 if r == 0 else float(rng.uniform(0.5, 1.0))
        z0 = np.concatenate([(f_nodes + pert).ravel(), [rho0]])
        return _solve_restart(tr, z0, margin, True, True, rounds, max_rounds, res_tol, maxiter)

    if threads and threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(one, range(restarts)))
    else:
        results = [one(r) for r in range(restarts)]
    feas = [(a, i) for i, (z, a, res) in enumerate(results) if max(res.values()) <= res_tol]
    pick = min(feas)[1] if feas else min(range(restarts), key=lambda i: max(results[i][2].values()))
    z, act, resid = results[pick]
    path = _build_path(tr, z, act, resid, tol, res_tol, [float(r[1]) for r in results])
    if not feas:
        raise NoFeasiblePathError(f"no restart met the residual tolerance {res_tol:g}; "
                                  f"best residuals {resid}", best=path)
    return path


def confinement_action(problem: ExitProblem, horizons, M: int = 16, restarts: int = 4, seed: int = 0,
                       margin: float = 1e-3, res_tol: float = 1e-6) -> list[dict]:
    """Least action keeping ``x^ell`` inside the domain on the whole horizon ``[s, T]``.

    Evaluated for each ``T`` in ``horizons``; the exit time is pinned at ``T``.
    """
    rows = []
    s = problem.horizon[0]
    for T in horizons:
        pb = problem.with_(horizon=(s, float(T)))
        tr = _Transcription(pb, M)
        _, f_nodes = _drift_following(tr)
        best = None
        for r in range(restarts):
            rng = np.random.default_rng([seed, r])
            z0 = np.concatenate([(f_nodes + rng.normal(0, 0.5, f_nodes.shape) * (r > 0)).ravel(), [1.0]])
            z, act, resid = _solve_restart(tr, z0, margin, False, False, 8, 40, res_tol, 400,
                                           interior_margin=margin)
            ok = max(resid.values()) <= res_tol
            if ok and (best is None or act < best[0]):
                best = (act, resid)
        rows.append({"T": float(T), "action": None if best is None else best[0],
                     "feasible": best is not None})
    return rows


# ---------------------------------------------------------------- DP oracle

@dataclass(frozen=True)
class DPGrid:
    """DP grid.  The time step is deliberately coarser than the space steps:
    each semi-Lagrangian step smears the table by an interpolation error of
    order ``h^2``, so many short steps accumulate more error than a few long ones.
    """

    K_t: int = 8
    K1: int = 64
    K2: int = 64
    n_u: int = 33
    u_span: float | None = None
    R: float | None = None
    cap: float = 1e3

    def __post_init__(self):
        if max(self.K_t, self.K1, self.K2) > 256 or min(self.K_t, self.K1, self.K2) < 4:
            raise ValueError("DP grid sizes must lie in 4..256")

    def doubled(self) -> "DPGrid":
        from dataclasses import replace
        return replace(self, K_t=2 * self.K_t, K1=2 * self.K1, K2=2 * self.K2)


@dataclass
class DPTable:
    I: np.ndarray
    t: np.ndarray
    x1: np.ndarray
    x2: np.ndarray
    cap: float
    u_lattice: np.ndarray
    lattice_change: float | None = None

    @property
    def lattice_flag(self) -> bool:
        return self.lattice_change is not None and self.lattice_change > 0.05

    def probe(self, t, x1, x2) -> np.ndarray:
        from scipy.interpolate import RegularGridInterpolator

        f = RegularGridInterpolator((self.t, self.x1, self.x2), self.I)
        pts = np.stack(np.broadcast_arrays(np.asarray(t, float), np.asarray(x1, float),
                                           np.asarray(x2, float)), axis=-1)
        return f(pts)

    def metadata(self) -> dict:
        return {"shape": list(self.I.shape), "order": "t,x1,x2 row-major", "dtype": "<f8",
                "t": [float(self.t[0]), float(self.t[-1])],
                "x1": [float(self.x1[0]), float(self.x1[-1])],
                "x2": [float(self.x2[0]), float(self.x2[-1])],
                "cap": self.cap, "n_u": int(self.u_lattice.size),
                "u_span": float(self.u_lattice[-1]), "lattice_change": self.lattice_change,
                "lattice_flag": self.lattice_flag}

    def save(self, path) -> None:
        np.ascontiguousarray(self.I, dtype="<f8").tofile(path)
        with open(f"{path}.json", "w", encoding="utf-8") as fh:
            json.dump(self.metadata(), fh, indent=2, sort_keys=True)


def _interp2(V, x1, x2, q1, q2):
    """Bilinear interpolation of ``V`` on the grid, clamped at the edges."""
    h1, h2 = x1[1] - x1[0], x2[1] - x2[0]
    p1 = np.clip((q1 - x1[0]) / h1, 0.0, x1.size - 1.0)
    p2 = np.clip((q2 - x2[0]) / h2, 0.0, x2.size - 1.0)
    i = np.minimum(p1.astype(int), x1.size - 2)
    j = np.minimum(p2.astype(int), x2.size - 2)
    w1 = p1 - i
    w2 = p2 - j
    return ((1 - w1) * (1 - w2) * V[i, j] + w1 * (1 - w2) * V[i + 1, j]
            + (1 - w1) * w2 * V[i, j + 1] + w1 * w2 * V[i + 1, j + 1])


def _dp_sweep(problem: ExitProblem, grid: DPGrid, tol: float) -> DPTable:
    m = problem.model
    s, T = problem.horizon
    lo, hi = problem.domain.a[0], problem.domain.b[0]
    c = problem.init[0]
    span_t = T - s
    tt, xx = np.meshgrid(np.linspace(s, T, 9), c + np.linspace(-1, 1, 9), indexing="ij")
    f1_scale = float(np.max(np.abs(m.drift(1, tt, xx[..., None]))))
    u_span = grid.u_span if grid.u_span is not None else 5.0 * max(1.0, f1_scale)
    R = grid.R if grid.R is not None else max(1.0, 0.5 * u_span * span_t)
    t = np.linspace(s, T, grid.K_t + 1)
    x1 = np.linspace(c - R, c + R, grid.K1)
    x2 = np.linspace(lo, hi, grid.K2)
    lat = np.linspace(-u_span, u_span, grid.n_u)
    X1, X2, UU = np.meshgrid(x1, x2, lat, indexing="ij")
    I = np.empty((t.size, grid.K1, grid.K2))
    cap = grid.cap
    XX = np.stack([X1[:, :, 0].ravel(), X2[:, :, 0].ravel()], axis=1)

    def outflow_mask(tn):
        f2 = m.drift(2, tn, XX)[:, 0].reshape(grid.K1, grid.K2)
        mask = np.zeros((grid.K1, grid.K2), dtype=bool)
        mask[:, 0] = -f2[:, 0] > tol
        mask[:, -1] = f2[:, -1] > tol
        return mask

    last = np.full((grid.K1, grid.K2), cap)
    last[outflow_mask(T)] = 0.0
    I[-1] = last
    for n in range(grid.K_t - 1, -1, -1):
        tn, dt = t[n], t[n + 1] - t[n]
        f1 = m.drift(1, tn, X1[..., None])[..., 0]
        a = m.diffusion_matrix(tn, X1[..., None])[..., 0, 0]
        L = 0.5 * (f1 - UU) ** 2 / a
        # explicit midpoint for x2 along the controlled x1 motion
        x1m = X1 + 0.5 * dt * UU
        k1 = m.drift(2, tn, np.stack([X1, X2], axis=-1))[..., 0]
        k2 = m.drift(2, tn + 0.5 * dt, np.stack([x1m, X2 + 0.5 * dt * k1], axis=-1))[..., 0]
        x2n = X2 + dt * k2
        x1n = X1 + dt * UU
        up = x2n >= hi
        down = x2n <= lo
        frac = np.ones_like(x2n)
        with np.errstate(divide="ignore", invalid="ignore"):
            frac = np.where(up, (hi - X2) / (x2n - X2), frac)
            frac = np.where(down, (lo - X2) / (x2n - X2), frac)
        frac = np.clip(np.nan_to_num(frac, nan=0.0), 0.0, 1.0)
        cont = _interp2(I[n + 1], x1, x2, x1n, np.clip(x2n, lo, hi))
        cand = np.where(up | down, L * dt * frac, L * dt + cont)
        V = np.minimum(np.min(cand, axis=-1), cap)
        V[outflow_mask(tn)] = 0.0
        I[n] = V
    return DPTable(I=I, t=t, x1=x1, x2=x2, cap=cap, u_lattice=lat)


def dp_oracle(problem: ExitProblem, grid: DPGrid | None = None, tol: float = 1e-6,
              check_lattice: bool = True) -> DPTable:
    """Backward semi-Lagrangian dynamic programming for the exit cost (``ell = 2``, ``d = 1``).

    ``I(t, x) = min_u {L dt + I(t + dt, x + flow dt)}`` over a uniform control
    lattice with bilinear interpolation; steps that cross the boundary are
    charged for the fraction of the step spent inside.  ``I = 0`` on outflow
    boundary nodes and the cap at ``t = T`` elsewhere.  With ``check_lattice``
    the sweep is repeated on a lattice of ``2 n_u - 1`` controls and the
    relative change at the initial state is stored in ``lattice_change``.
    """
    from dataclasses import replace

    if problem.ell != 2 or problem.model.d != 1:
        raise ValueError("DP oracle supports ell = 2 and d = 1 only")
    if problem.domain.kind != "box":
        raise ValueError("DP oracle needs an interval domain")
    grid = grid or DPGrid()
    tab = _dp_sweep(problem, grid, tol)
    if check_lattice:
        fine = _dp_sweep(problem, replace(grid, n_u=2 * grid.n_u - 1), tol)
        s = problem.horizon[0]
        a = float(tab.probe(s, *problem.init)[0])
        b = float(fine.probe(s, *problem.init)[0])
        tab.lattice_change = abs(a - b) / max(abs(b), 1e-300)
    return tab


def dp_self_convergence(problem: ExitProblem, grid: DPGrid | None = None, tol: float = 1e-6) -> dict:
    """DP value at the initial state on ``grid`` and on its doubling, with the relative change."""
    grid = grid or DPGrid()
    s = problem.horizon[0]
    coarse = dp_oracle(problem, grid, tol, check_lattice=False)
    fine = dp_oracle(problem, grid.doubled(), tol)
    a = float(coarse.probe(s, *problem.init)[0])
    b = float(fine.probe(s, *problem.init)[0])
    return {"coarse": a, "fine": b, "change": abs(b - a) / max(abs(b), 1e-300),
            "lattice_change": fine.lattice_change, "table": fine}
