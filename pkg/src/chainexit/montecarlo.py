"""Monte Carlo estimators: exit probability, delta-regularisation study,
Feynman-Kac terminal-penalty functional and the exit-time ordering diagnostic."""
from __future__ import annotations

import csv
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import stats

from . import expr as ex
from ._backend import get_kernels
from .domain import Domain
from .model import ChainModel
from .sde import BlowUpError

__all__ = ["ExitProblem", "ExitEstimate", "PenaltySpec", "FeynmanKacResult", "DeltaStudy",
           "OrderingReport", "run_ensemble", "estimate_exit_probability", "delta_convergence_study",
           "feynman_kac_penalty", "default_penalty", "exit_time_ordering_check", "BLOCK_SIZE"]

BLOCK_SIZE = 8192
MAX_FAILED_FRACTION = 1e-3


@dataclass(frozen=True)
class ExitProblem:
    """Model, target subsystem ``ell``, domain for ``x^ell``, horizon and initial state.

    ``ell = 1`` (exit of the noise-driven subsystem itself) is accepted as well
    as the chain targets ``2..n``.
    """

    model: ChainModel
    ell: int
    domain: Domain
    horizon: tuple
    init: tuple

    def __post_init__(self):
        s, T = map(float, self.horizon)
        object.__setattr__(self, "horizon", (s, T))
        object.__setattr__(self, "init", tuple(float(v) for v in self.init))
        if not 1 <= self.ell <= self.model.n:
            raise ValueError(f"ell must be in 1..{self.model.n}, got {self.ell}")
        if self.domain.dim != self.model.d:
            raise ValueError(f"domain has dimension {self.domain.dim}, model has d={self.model.d}")
        if len(self.init) != self.ell * self.model.d:
            raise ValueError(f"init needs ell*d = {self.ell * self.model.d} entries, got {len(self.init)}")
        if not (0 <= s <= T):
            raise ValueError("horizon must satisfy 0 <= s <= T")
        if not self.domain.signed_distance(self.target_init) < 0:
            raise ValueError("initial state of the target subsystem must be strictly inside the domain")

    @property
    def target_init(self) -> np.ndarray:
        d = self.model.d
        return np.asarray(self.init[(self.ell - 1) * d:self.ell * d])

    @classmethod
    def from_model(cls, model: ChainModel, **overrides) -> "ExitProblem":
        """Problem stored with the model (``"problem"`` config key), with overrides."""
        cfg = dict(model.problem or {})
        ell = overrides.pop("ell", cfg.get("ell", 2))
        dom = overrides.pop("domain", None)
        if dom is None:
            if "domain" not in cfg:
                raise ValueError("model carries no problem definition; pass domain=")
            dom = Domain.from_json(cfg["domain"])
        horizon = overrides.pop("horizon", cfg.get("horizon", (0.0, 1.0)))
        init = overrides.pop("init", cfg.get("init"))
        if init is None:
            init = (0.0,) * (ell * model.d)
        elif len(init) != ell * model.d:
            init = tuple(init[:ell * model.d]) if len(init) > ell * model.d else \
                tuple(init) + (0.0,) * (ell * model.d - len(init))
        if overrides:
            raise TypeError(f"unknown overrides {sorted(overrides)}")
        return cls(model=model, ell=ell, domain=dom, horizon=tuple(horizon), init=tuple(init))

    def with_(self, **kw) -> "ExitProblem":
        return replace(self, **kw)

    def to_json(self) -> dict:
        return {"model": self.model.name, "ell": self.ell, "domain": self.domain.to_json(),
                "horizon": list(self.horizon), "init": list(self.init)}


def _deltas(problem: ExitProblem, deltas) -> np.ndarray:
    """Per-subsystem regularisation vector of length ``ell`` (entry 0 unused)."""
    ell = problem.ell
    if deltas is None:
        return np.zeros(ell)
    if np.isscalar(deltas):
        out = np.full(ell, float(deltas))
        out[0] = 0.0
        return out
    v = np.asarray(deltas, dtype=float).ravel()
    if v.size == ell - 1:
        v = np.concatenate([[0.0], v])
    if v.size != ell:
        raise ValueError(f"deltas needs {ell - 1} entries (subsystems 2..{ell})")
    if np.any(v < 0):
        raise ValueError("deltas must be >= 0")
    v = v.copy()
    v[0] = 0.0
    return v


def _tables(model: ChainModel, ell: int):
    code, starts, lens, consts, stack = model.kernel_tables(ell)
    if consts.size == 0:
        consts = np.zeros(1)
    return code, starts, lens, consts, stack


def run_ensemble(problem: ExitProblem, eps: float, deltas=None, N: int = 100_000, dt: float = 1e-3,
                 seed: int = 0, threads: int | None = None, tol: float = 1e-6, bridge: bool = True,
                 monitor_all: bool = False, domains=None, first_path: int = 0,
                 backend: str | None = None, block: int = BLOCK_SIZE) -> dict:
    """Simulate paths ``first_path .. first_path+N-1`` and return per-path arrays.

    Paths are split into fixed blocks run on a thread pool and reassembled in
    path order, so every output is independent of ``threads``.  ``domains``
    optionally gives one domain per subsystem (for the ordering diagnostic).
    """
    if N < 1:
        raise ValueError("empty ensemble: N must be >= 1")
    if eps < 0:
        raise ValueError("eps must be >= 0")
    if not dt > 0:
        raise ValueError("dt must be positive")
    k = get_kernels(backend)
    model, ell, d = problem.model, problem.ell, problem.model.d
    tables = _tables(model, ell)
    dv = _deltas(problem, deltas)
    if domains is None:
        params = np.tile(problem.domain.params(), (ell, 1))
        kind = problem.domain.kind_code
    else:
        if len(domains) != ell or len({dm.kind for dm in domains}) != 1:
            raise ValueError("need ell domains of a single kind")
        params = np.vstack([dm.params() for dm in domains])
        kind = domains[0].kind_code
    init = np.asarray(problem.init, dtype=float)
    s, T = problem.horizon
    seed = int(seed) & 0xFFFFFFFFFFFFFFFF

    def work(start: int):
        n = min(block, N - start)
        return k.run_paths(tables, d, model.m, ell, init, s, T, dt, float(eps), dv, seed,
                           first_path + start, n, kind, params, problem.ell, tol,
                           monitor_all, bridge)

    starts = list(range(0, N, block))
    threads = threads or os.cpu_count() or 1
    if threads > 1 and len(starts) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(work, starts))
    else:
        parts = [work(st) for st in starts]
    return {key: np.concatenate([p[key] for p in parts]) for key in parts[0]}


@dataclass
class ExitEstimate:
    q_hat: float
    stderr: float
    ci95: tuple
    N: int
    eps: float
    deltas: tuple
    dt: float
    seed: int
    exits: int
    gamma_zero_count: int
    gamma_minus_count: int = 0
    failed_count: int = 0
    cp_upper: float | None = None

    @property
    def I_eps(self) -> float:
        """``-eps log q_hat``; ``inf`` when no path exited."""
        if self.q_hat <= 0:
            return math.inf
        return -self.eps * math.log(self.q_hat)

    @property
    def I_eps_defined(self) -> bool:
        return self.q_hat > 0

    @property
    def I_eps_lower(self) -> float | None:
        """Lower bound on ``I_eps`` from the Clopper-Pearson upper bound when ``q_hat = 0``."""
        if self.cp_upper is None:
            return None
        return -self.eps * math.log(self.cp_upper)

    def to_json(self) -> dict:
        return {"q_hat": self.q_hat, "stderr": self.stderr, "ci95": list(self.ci95), "N": self.N,
                "eps": self.eps, "deltas": list(self.deltas), "dt": self.dt, "seed": self.seed,
                "exits": self.exits, "I_eps": self.I_eps if self.I_eps_defined else None,
                "I_eps_defined": self.I_eps_defined, "I_eps_lower": self.I_eps_lower,
                "cp_upper": self.cp_upper, "gamma_zero_count": self.gamma_zero_count,
                "gamma_minus_count": self.gamma_minus_count, "failed_count": self.failed_count}


def _summarise(cls: np.ndarray, eps, deltas, dt, seed) -> ExitEstimate:
    N = int(cls.size)
    failed = int(np.count_nonzero(cls < 0))
    if failed > MAX_FAILED_FRACTION * N:
        raise BlowUpError(f"{failed} of {N} paths blew up (limit {MAX_FAILED_FRACTION:.1%})",
                          step=-1)
    n_ok = N - failed
    exits = int(np.count_nonzero(cls > 0))
    q = exits / n_ok
    se = math.sqrt(q * (1 - q) / n_ok)
    ci = (max(0.0, q - 1.96 * se), min(1.0, q + 1.96 * se))
    cp = float(stats.beta.ppf(0.975, 1, n_ok)) if exits == 0 else None
    return ExitEstimate(q_hat=q, stderr=se, ci95=ci, N=n_ok, eps=float(eps),
                        deltas=tuple(float(v) for v in deltas[1:]), dt=dt, seed=seed, exits=exits,
                        gamma_zero_count=int(np.count_nonzero(cls == 2)),
                        gamma_minus_count=int(np.count_nonzero(cls == 3)),
                        failed_count=failed, cp_upper=cp)


def estimate_exit_probability(problem: ExitProblem, eps: float, deltas=None, N: int = 100_000,
                              dt: float = 1e-3, seed: int = 0, threads: int | None = None,
                              tol: float = 1e-6, bridge: bool = True,
                              backend: str | None = None) -> ExitEstimate:
    """Fraction of paths whose target subsystem leaves the domain before ``T``.

    Tangential (``gamma_zero``) hits count as exits and are reported
    separately.  With no noise at all a single path is integrated and its
    outcome replicated.
    """
    dv = _deltas(problem, deltas)
    noiseless = eps == 0 and not np.any(dv > 0)
    if N < 1:
        raise ValueError("empty ensemble: N must be >= 1")
    out = run_ensemble(problem, eps, dv, 1 if noiseless else N, dt, seed, threads, tol, bridge,
                       backend=backend)
    cls = np.repeat(out["cls"], N) if noiseless else out["cls"]
    return _summarise(cls, eps, dv, dt, seed)


@dataclass
class DeltaStudy:
    deltas: list
    estimates: list

    @property
    def gaps(self) -> list:
        q0 = self.estimates[-1].q_hat
        return [abs(e.q_hat - q0) for e in self.estimates]

    def rows(self):
        return [{"delta": dl, "q_hat": e.q_hat, "stderr": e.stderr, "gap_to_delta0": g}
                for dl, e, g in zip(self.deltas, self.estimates, self.gaps)]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["delta", "q_hat", "stderr", "gap_to_delta0"])
            for r in self.rows():
                w.writerow([repr(float(r[k])) for k in ("delta", "q_hat", "stderr", "gap_to_delta0")])


def delta_convergence_study(problem: ExitProblem, eps: float, delta_schedule, N: int = 100_000,
                            dt: float = 1e-3, seed: int = 0, threads: int | None = None,
                            backend: str | None = None) -> DeltaStudy:
    """Estimates for each regularisation level on common random numbers.

    Every row reuses the same seed, so the ``W`` increments of path ``p`` are
    shared; each delta applies to all subsystems ``2..ell``.  The schedule must
    be non-increasing, non-negative and end at 0.
    """
    sched = [float(v) for v in delta_schedule]
    if not sched or sched[-1] != 0.0:
        raise ValueError("delta schedule must end with 0")
    if any(v < 0 for v in sched) or any(b > a for a, b in zip(sched, sched[1:])):
        raise ValueError("delta schedule must be non-increasing and non-negative")
    ests = [estimate_exit_probability(problem, eps, dl, N, dt, seed, threads, backend=backend)
            for dl in sched]
    return DeltaStudy(deltas=sched, estimates=ests)


@dataclass(frozen=True)
class PenaltySpec:
    """Terminal penalty ``Phi_M = M * base(t, x^2..x^ell)``.

    ``base`` must vanish on the outflow boundary and be non-negative on the
    closed domain.
    """

    base: object
    M: float = 1.0

    def __post_init__(self):
        e = ex.parse(self.base) if isinstance(self.base, str) else self.base
        for v in ex.variables(e):
            if isinstance(v, ex.Control):
                raise ex.UnknownVariableError("penalty may not reference controls")
            if isinstance(v, ex.State) and v.sub < 2:
                raise ex.UnknownVariableError("penalty depends on t and x2.. only")
        object.__setattr__(self, "base", e)
        if self.M < 0:
            raise ValueError("M must be >= 0")

    def scaled(self, M: float) -> "PenaltySpec":
        return PenaltySpec(self.base, M)

    def evaluate(self, t, X, d: int) -> np.ndarray:
        """``Phi_M`` at times ``t`` and stacked states ``X`` (shape ``(P, k*d)``)."""
        prog = ex.compile_expr(self.base, d)
        X = np.asarray(X, dtype=float)
        slots = [np.broadcast_to(np.asarray(t, dtype=float), X.shape[:1])] + \
            [X[:, j] for j in range(X.shape[1])]
        return self.M * np.broadcast_to(prog.evaluate(slots), X.shape[:1])

    def check_outflow_zero(self, problem: ExitProblem, count: int = 256, tol: float = 1e-6,
                           atol: float = 1e-12, seed: int = 0) -> bool:
        """``Phi = 0`` at sampled boundary points where the drift of ``x^ell`` points outward."""
        r = np.random.default_rng(seed)
        d, ell, dom = problem.model.d, problem.ell, problem.domain
        s, T = problem.horizon
        t = r.uniform(s, T, count)
        X = r.uniform(-2.0, 2.0, (count, ell * d))
        if dom.kind == "box":
            lo, hi = np.asarray(dom.a), np.asarray(dom.b)
            pts = r.uniform(lo, hi, (count, d))
            ax = r.integers(0, d, count)
            side = r.integers(0, 2, count)
            pts[np.arange(count), ax] = np.where(side == 1, hi[ax], lo[ax])
        else:
            v = r.normal(size=(count, d))
            pts = np.asarray(dom.a) + dom.b[0] * v / np.linalg.norm(v, axis=1, keepdims=True)
        X[:, (ell - 1) * d:] = pts
        n = dom.normal(pts)
        tr = np.sum(problem.model.drift(ell, t, X) * n, axis=1)
        phi = self.evaluate(t, X, d)
        out = tr > tol
        return bool(np.all(np.abs(phi[out]) <= atol))


def default_penalty(problem: ExitProblem, M: float = 1.0) -> PenaltySpec:
    """``M`` times the distance of ``x^ell`` to the boundary (zero on the boundary)."""
    dom, ell, d = problem.domain, problem.ell, problem.model.d
    if ell < 2:
        raise ValueError("penalty needs ell >= 2")
    if dom.kind == "box":
        terms = [f"min(x{ell}[{k}] - ({lo!r}), ({hi!r}) - x{ell}[{k}])"
                 for k, (lo, hi) in enumerate(zip(dom.a, dom.b))]
        body = terms[0]
        for t in terms[1:]:
            body = f"min({body}, {t})"
    else:
        sq = " + ".join(f"(x{ell}[{k}] - ({c!r}))^2" for k, c in enumerate(dom.a))
        body = f"({dom.b[0]!r}) - sqrt({sq})"
    return PenaltySpec(f"max(0, {body})", M)


@dataclass
class FeynmanKacResult:
    g_hat: float
    J_hat: float
    log_g: float
    stderr_J: float
    M: float
    N: int
    eps: float
    underflow: bool = False

    def to_json(self) -> dict:
        return {"g_hat": self.g_hat, "J_hat": self.J_hat, "log_g": self.log_g,
                "stderr_J": self.stderr_J, "M": self.M, "N": self.N, "eps": self.eps,
                "underflow": self.underflow}


def log_mean_exp(a: np.ndarray) -> tuple[float, float]:
    """``log(mean(exp(a)))`` and the relative standard error of that mean.

    Uses a shifted, compensated sum so the result is exact to rounding and
    independent of summation order.
    """
    a = np.asarray(a, dtype=float)
    mx = float(np.max(a))
    if mx == -math.inf:
        return -math.inf, math.inf
    w = np.exp(a - mx)
    n = a.size
    mean = math.fsum(w) / n
    var = max(math.fsum((w - mean) ** 2) / max(n - 1, 1), 0.0)
    return mx + math.log(mean), math.sqrt(var / n) / mean


def feynman_kac_penalty(problem: ExitProblem, penalty: PenaltySpec, eps: float, deltas=None,
                        N: int = 100_000, dt: float = 1e-3, seed: int = 0,
                        threads: int | None = None, backend: str | None = None,
                        ensemble: dict | None = None) -> FeynmanKacResult:
    """``g = E exp(-Phi(theta, x^2..x^ell(theta)) / eps)`` at ``theta = tau ^ T``.

    ``J = -eps log g``.  A precomputed ``ensemble`` (from :func:`run_ensemble`)
    may be passed to evaluate several penalties on the same paths.
    """
    if not eps > 0:
        raise ValueError("eps must be positive")
    if ensemble is None:
        ensemble = run_ensemble(problem, eps, deltas, N, dt, seed, threads, backend=backend)
    ok = ensemble["cls"] >= 0
    if np.count_nonzero(~ok) > MAX_FAILED_FRACTION * ok.size:
        raise BlowUpError("too many paths blew up", step=-1)
    phi = penalty.evaluate(ensemble["theta"][ok], ensemble["xexit"][ok], problem.model.d)
    lg, rel = log_mean_exp(-phi / eps)
    g = math.exp(lg) if lg > -745 else 0.0
    return FeynmanKacResult(g_hat=g, J_hat=-eps * lg, log_g=lg, stderr_J=eps * rel,
                            M=penalty.M, N=int(np.count_nonzero(ok)), eps=eps,
                            underflow=lg < math.log(np.finfo(float).tiny))


@dataclass
class OrderingReport:
    N: int
    violation_rate: float
    pair_violations: list
    exit_fraction: list
    time_tol: float

    def to_json(self) -> dict:
        return {"N": self.N, "violation_rate": self.violation_rate,
                "pair_violations": self.pair_violations, "exit_fraction": self.exit_fraction,
                "time_tol": self.time_tol}


def exit_time_ordering_check(model: ChainModel, domain, eps: float, N: int = 10_000,
                             dt: float = 1e-3, seed: int = 0, horizon=(0.0, 1.0), init=None,
                             ell: int | None = None, time_tol: float | None = None,
                             threads: int | None = None, bridge: bool = False) -> OrderingReport:
    """Frequency of violations of ``tau^1 >= tau^2 >= ... >= tau^ell``.

    ``domain`` is one domain shared by every subsystem or a list with one per
    subsystem.  Exit times are capped at ``T``; pair ``(j, j+1)`` is violated
    when ``tau^{j+1} > tau^j + time_tol`` (default ``time_tol = dt``).
    """
    if N < 1:
        raise ValueError("empty ensemble: N must be >= 1")
    ell = model.n if ell is None else ell
    doms = list(domain) if isinstance(domain, (list, tuple)) else [domain] * ell
    init = tuple(init) if init is not None else (0.0,) * (ell * model.d)
    problem = ExitProblem(model, ell, doms[-1], tuple(horizon), init)
    out = run_ensemble(problem, eps, None, N, dt, seed, threads, bridge=bridge, monitor_all=True,
                       domains=doms)
    T = problem.horizon[1]
    tau = np.minimum(out["sub_tau"], T)
    tol = dt if time_tol is None else time_tol
    viol = tau[:, 1:] > tau[:, :-1] + tol
    return OrderingReport(N=N, violation_rate=float(np.mean(np.any(viol, axis=1))),
                          pair_violations=[int(v) for v in viol.sum(axis=0)],
                          exit_fraction=[float(v) for v in np.isfinite(out["sub_tau"]).mean(axis=0)],
                          time_tol=tol)
