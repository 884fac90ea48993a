"""Deterministic and stochastic integration of the chain, and exit detection."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import rng
from .domain import Domain
from .expr import EvaluationError
from .model import ChainModel

__all__ = ["Trajectory", "ExitEvent", "BlowUpError", "time_grid", "integrate_deterministic",
           "simulate_chain", "detect_exit", "CLASS_NAMES", "noise_slots"]

CLASS_NAMES = {0: "censored", 1: "gamma_plus", 2: "gamma_zero", 3: "gamma_minus", -1: "failed"}


class BlowUpError(ArithmeticError):
    """Non-finite state during integration; ``step`` is the first bad step."""

    def __init__(self, msg: str, step: int):
        super().__init__(msg)
        self.step = step


def time_grid(s: float, T: float, dt: float) -> np.ndarray:
    """``s, s+dt, ..., T``; the last step is short when ``dt`` does not divide ``T-s``."""
    from ._pykernels import n_steps

    K = n_steps(s, T, dt)
    t = s + dt * np.arange(K + 1, dtype=float)
    t[-1] = T
    return t


def noise_slots(m: int, d: int, ell: int, eps: float, deltas) -> int:
    """Normals drawn per step: ``m`` for ``W`` then ``d`` per regularised subsystem."""
    if any(float(v) > 0 for v in list(deltas)[1:]):
        return m + (ell - 1) * d
    return m if eps > 0 else 0


@dataclass
class Trajectory:
    """Sampled path of subsystems ``1..ell``.

    ``states[k]`` is the stacked state at ``t[k]``; ``noise[k]`` holds the
    Wiener increments used on step ``k`` (empty for deterministic runs).
    """

    t: np.ndarray
    states: np.ndarray
    d: int
    ell: int
    noise: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))
    eps: float = 0.0
    deltas: tuple = ()
    seed: int | None = None
    stream: int | None = None

    @property
    def short_last_step(self) -> bool:
        if len(self.t) < 3:
            return False
        return not math.isclose(self.t[-1] - self.t[-2], self.t[1] - self.t[0], rel_tol=1e-9)

    def subsystem(self, i: int) -> np.ndarray:
        return self.states[:, (i - 1) * self.d:i * self.d]

    def header(self) -> list[str]:
        return ["t"] + [f"x{i}_{k}" for i in range(1, self.ell + 1) for k in range(self.d)]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(self.header())
            for tk, xk in zip(self.t, self.states):
                w.writerow([repr(float(tk))] + [repr(float(v)) for v in xk])


@dataclass(frozen=True)
class ExitEvent:
    theta: float
    exit_point: tuple
    boundary_class: str
    transversality: float
    state: tuple = ()

    @property
    def exited(self) -> bool:
        return self.boundary_class not in ("censored", "failed")

    def to_json(self) -> dict:
        return {"theta": self.theta, "exit_point": list(self.exit_point),
                "class": self.boundary_class, "transversality": self.transversality}

    def dumps(self) -> str:
        return json.dumps(self.to_json(), sort_keys=True)


def _check_init(model: ChainModel, init, ell: int) -> np.ndarray:
    init = np.asarray(init, dtype=float).ravel()
    if init.size != ell * model.d:
        raise ValueError(f"init has {init.size} entries, expected ell*d = {ell * model.d}")
    if not 1 <= ell <= model.n:
        raise ValueError(f"ell must be in 1..{model.n}")
    return init


def _rhs(model, ell, t, x, step):
    try:
        return model.drift_stack(ell, t, x)
    except EvaluationError as err:
        raise BlowUpError(f"drift evaluation failed at step {step}: {err}", step) from None


def integrate_deterministic(model: ChainModel, init, horizon, dt: float, ell: int | None = None) -> Trajectory:
    """Classical RK4 for the closed-loop deterministic chain of subsystems ``1..ell``."""
    s, T = map(float, horizon)
    if not dt > 0 or dt > T - s:
        raise ValueError("need 0 < dt <= T - s")
    ell = model.n if ell is None else ell
    x = _check_init(model, init, ell)
    t = time_grid(s, T, dt)
    out = np.empty((t.size, x.size))
    out[0] = x
    for k in range(t.size - 1):
        tk, h = t[k], t[k + 1] - t[k]
        k1 = _rhs(model, ell, tk, x, k)
        k2 = _rhs(model, ell, tk + h / 2, x + h / 2 * k1, k)
        k3 = _rhs(model, ell, tk + h / 2, x + h / 2 * k2, k)
        k4 = _rhs(model, ell, tk + h, x + h * k3, k)
        x = x + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
        if not np.all(np.isfinite(x)):
            raise BlowUpError(f"non-finite state at step {k + 1}", k + 1)
        out[k + 1] = x
    return Trajectory(t=t, states=out, d=model.d, ell=ell)


def simulate_chain(model: ChainModel, eps: float, deltas, init, horizon, dt: float,
                   seed: int = 0, stream: int = 0, ell: int | None = None) -> Trajectory:
    """Euler-Maruyama path of the (optionally regularised) chain.

    ``deltas[j-1]`` is the noise intensity added to subsystem ``j >= 2``
    (``deltas[0]`` is ignored).  Normals come from :mod:`chainexit.rng`
    with counter ``(slot, step, stream)``, the same draws the Monte Carlo
    kernels use for path number ``stream``.
    """
    s, T = map(float, horizon)
    if eps < 0:
        raise ValueError("eps must be >= 0")
    if not dt > 0:
        raise ValueError("dt must be positive")
    if stream < 0 or stream >= 2 ** 64:
        raise ValueError("stream id must fit in 64 bits")
    ell = model.n if ell is None else ell
    x = _check_init(model, init, ell)
    deltas = tuple(float(v) for v in (deltas if deltas is not None else ()))
    deltas = (deltas + (0.0,) * ell)[:ell]
    if any(v < 0 for v in deltas):
        raise ValueError("deltas must be >= 0")
    d, m = model.d, model.m
    t = time_grid(s, T, dt)
    nslots = noise_slots(m, d, ell, eps, deltas)
    states = np.empty((t.size, x.size))
    states[0] = x
    noise = np.zeros((t.size - 1, nslots))
    sq_eps = math.sqrt(eps)
    Z = rng.path_normals(nslots, t.size - 1, stream, seed) if nslots else None
    for k in range(t.size - 1):
        tk, h = t[k], t[k + 1] - t[k]
        F = _rhs(model, ell, tk, x, k)
        xn = x + F * h
        if nslots:
            z = Z[k]
            noise[k] = z * math.sqrt(h)
        if eps > 0:
            try:
                S = model.sigma_at(tk, x[:d])
            except EvaluationError as err:
                raise BlowUpError(f"sigma evaluation failed at step {k}: {err}", k) from None
            sh = sq_eps * math.sqrt(h)
            for r in range(d):
                acc = S[r, 0] * z[0]
                for c in range(1, m):
                    acc = acc + S[r, c] * z[c]
                xn[r] += sh * acc
        for j in range(2, ell + 1):
            if deltas[j - 1] > 0:
                sh = math.sqrt(deltas[j - 1]) * math.sqrt(h)
                base = m + (j - 2) * d
                xn[(j - 1) * d:j * d] += sh * z[base:base + d]
        if not np.all(np.isfinite(xn)):
            raise BlowUpError(f"non-finite state at step {k + 1}", k + 1)
        x = xn
        states[k + 1] = x
    return Trajectory(t=t, states=states, d=d, ell=ell, noise=noise, eps=eps, deltas=deltas,
                      seed=seed, stream=stream)


def classify(transversality: float, tol: float) -> str:
    if transversality > tol:
        return "gamma_plus"
    if transversality < -tol:
        return "gamma_minus"
    return "gamma_zero"


def detect_exit(traj: Trajectory, domain: Domain, ell: int, model: ChainModel, tol: float = 1e-6) -> ExitEvent:
    """First crossing of ``x^ell`` through the boundary of ``domain``.

    The crossing time is refined by linear interpolation of the signed
    distance; the full state is interpolated to that time and the exit point
    is projected onto the boundary before the transversality ``f_ell . n`` is
    evaluated.
    """
    if ell > traj.ell:
        raise ValueError(f"trajectory has {traj.ell} subsystems, need {ell}")
    sd = domain.signed_distance(traj.subsystem(ell))
    if not sd[0] < 0:
        raise ValueError("initial point is not strictly inside the domain")
    hits = np.flatnonzero(sd >= 0)
    if hits.size == 0:
        return ExitEvent(theta=float(traj.t[-1]), exit_point=tuple(traj.subsystem(ell)[-1]),
                         boundary_class="censored", transversality=0.0,
                         state=tuple(traj.states[-1]))
    k = int(hits[0])
    frac = min(max(sd[k - 1] / (sd[k - 1] - sd[k]), 0.0), 1.0)
    theta = traj.t[k - 1] + frac * (traj.t[k] - traj.t[k - 1])
    xs = traj.states[k - 1] + frac * (traj.states[k] - traj.states[k - 1])
    sl = slice((ell - 1) * traj.d, ell * traj.d)
    pt = xs[sl]
    xs[sl] = domain.project(pt)
    n = domain.normal(pt)
    tr = float(model.drift(ell, theta, xs) @ n)
    return ExitEvent(theta=float(theta), exit_point=tuple(float(v) for v in xs[sl]),
                     boundary_class=classify(tr, tol), transversality=tr,
                     state=tuple(float(v) for v in xs))
