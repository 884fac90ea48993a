"""Small-noise sweeps: ``I_eps = -eps log q_eps`` against the minimum action,
bound checks and the terminal-penalty family."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .montecarlo import (ExitProblem, PenaltySpec, default_penalty, estimate_exit_probability,
                         feynman_kac_penalty, run_ensemble, _summarise, _deltas)

__all__ = ["SweepRow", "SweepResult", "SweepError", "BoundsReport", "PenaltyRow", "PenaltySweep",
           "epsilon_sweep", "bounds_check", "penalty_sweep", "row_seed", "reference_action",
           "SWEEP_COLUMNS"]

SWEEP_COLUMNS = ["eps", "N", "q_hat", "stderr", "I_eps", "ci_lo", "ci_hi", "I0", "gap", "usable"]
MIN_EXITS = 50
Z95 = 1.959963984540054


class SweepError(RuntimeError):
    pass


def row_seed(seed: int, *path: int) -> int:
    """Independent 64-bit seed for a sweep row derived from the master seed."""
    w = np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, *path]).generate_state(2, dtype=np.uint32)
    return int(w[0]) | (int(w[1]) << 32)


@dataclass
class SweepRow:
    eps: float
    N: int
    q_hat: float
    stderr: float
    I0: float
    usable: bool
    pilot_q: float | None = None

    @property
    def I_eps(self) -> float:
        return -self.eps * math.log(self.q_hat) if self.q_hat > 0 else math.inf

    @property
    def half_width(self) -> float:
        """First-order (delta-method) 95% half-width of ``I_eps``."""
        return self.eps * Z95 * self.stderr / self.q_hat if self.q_hat > 0 else math.inf

    @property
    def ci(self) -> tuple:
        return (self.I_eps - self.half_width, self.I_eps + self.half_width)

    @property
    def unreliable(self) -> bool:
        return not self.q_hat > 0 or self.stderr / self.q_hat > 0.2

    @property
    def gap(self) -> float:
        return abs(self.I_eps - self.I0)

    def as_dict(self) -> dict:
        lo, hi = self.ci
        return {"eps": self.eps, "N": self.N, "q_hat": self.q_hat, "stderr": self.stderr,
                "I_eps": self.I_eps, "ci_lo": lo, "ci_hi": hi, "I0": self.I0, "gap": self.gap,
                "usable": self.usable}


@dataclass
class SweepResult:
    rows: list
    I0: float
    I0_dp: float | None = None
    I0_dp_gap: float | None = None

    @property
    def usable_rows(self) -> list:
        return [r for r in self.rows if r.usable]

    def with_I0(self, I0: float) -> "SweepResult":
        rows = [SweepRow(r.eps, r.N, r.q_hat, r.stderr, I0, r.usable, r.pilot_q) for r in self.rows]
        return SweepResult(rows, I0, self.I0_dp, self.I0_dp_gap)

    def gaps_strictly_decreasing(self) -> bool:
        """Consecutive usable gaps separated by more than their summed half-widths."""
        rows = self.usable_rows
        return len(rows) >= 2 and all(a.gap - a.half_width > b.gap + b.half_width
                                      for a, b in zip(rows, rows[1:]))

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(SWEEP_COLUMNS)
            for r in self.rows:
                d = r.as_dict()
                w.writerow([repr(d[c]) if isinstance(d[c], float) else str(int(d[c])) if isinstance(d[c], bool) else str(d[c])
                            for c in SWEEP_COLUMNS])

    @classmethod
    def from_csv(cls, path) -> "SweepResult":
        rows = []
        with open(path, encoding="utf-8") as fh:
            for rec in csv.DictReader(fh):
                rows.append(SweepRow(eps=float(rec["eps"]), N=int(rec["N"]), q_hat=float(rec["q_hat"]),
                                     stderr=float(rec["stderr"]), I0=float(rec["I0"]),
                                     usable=rec["usable"] in ("1", "True", "true")))
        if not rows:
            raise SweepError(f"{path}: no rows")
        return cls(rows, rows[0].I0)


def reference_action(problem: ExitProblem, restarts: int = 16, seed: int = 0, M: int = 16) -> tuple:
    """``I0`` from the path optimiser and, for scalar two-subsystem problems, the DP value."""
    from .action import dp_self_convergence, minimize_action

    I0 = minimize_action(problem, M=M, restarts=restarts, seed=seed).action
    dp = gap = None
    if problem.ell == 2 and problem.model.d == 1 and problem.domain.kind == "box":
        sc = dp_self_convergence(problem)
        dp, gap = sc["fine"], sc["change"]
    return I0, dp, gap


def epsilon_sweep(problem: ExitProblem, eps_schedule, N_min: int = 100_000, N_max: int = 1_000_000,
                  deltas=None, dt: float = 1e-3, seed: int = 0, I0: float | None = None,
                  threads: int | None = None, restarts: int = 16, target_exits: int = 1000,
                  backend: str | None = None) -> SweepResult:
    """Exit-probability estimates along a decreasing noise schedule.

    A pilot with ``N_max // 10`` paths sizes each row to about
    ``target_exits`` exits, clamped to ``[N_min, N_max]``; rows with fewer
    than 50 exits are marked unusable.  ``I0`` defaults to the minimum action.
    """
    eps_list = [float(e) for e in eps_schedule]
    if not eps_list or any(b >= a for a, b in zip(eps_list, eps_list[1:])) or eps_list[-1] <= 0:
        raise ValueError("eps schedule must be positive and strictly decreasing")
    if I0 is None:
        I0, I0_dp, dp_gap = reference_action(problem, restarts=restarts, seed=seed)
    else:
        I0_dp = dp_gap = None
    rows = []
    n_pilot = max(1, N_max // 10)
    for i, eps in enumerate(eps_list):
        pilot = estimate_exit_probability(problem, eps, deltas, n_pilot, dt, row_seed(seed, i, 1),
                                          threads, backend=backend)
        if pilot.q_hat > 0:
            N = min(N_max, max(N_min, math.ceil(target_exits / pilot.q_hat)))
        else:
            N = N_max
        est = estimate_exit_probability(problem, eps, deltas, N, dt, row_seed(seed, i), threads,
                                        backend=backend)
        rows.append(SweepRow(eps=eps, N=est.N, q_hat=est.q_hat, stderr=est.stderr, I0=I0,
                             usable=est.exits >= MIN_EXITS, pilot_q=pilot.q_hat))
    if not any(r.usable for r in rows):
        raise SweepError("no row reached 50 exits; raise N_max or drop the smallest eps values")
    return SweepResult(rows, I0, I0_dp, dp_gap)


@dataclass
class BoundsReport:
    verdict: str
    values: list
    signs: list
    decreasing: bool
    final_ratio: float
    I0: float

    def to_json(self) -> dict:
        return {"verdict": self.verdict, "values": self.values, "signs": self.signs,
                "decreasing": self.decreasing, "final_ratio": self.final_ratio, "I0": self.I0}


def bounds_check(sweep: SweepResult, I0: float | None = None) -> BoundsReport:
    """PASS when ``|eps log q + I0|`` decreases strictly over the usable rows and
    the last value is at most ``0.3 I0``."""
    I0 = sweep.I0 if I0 is None else float(I0)
    rows = sweep.usable_rows
    if len(rows) < 3:
        raise SweepError(f"bounds check needs at least 3 usable rows, got {len(rows)}")
    vals = [r.eps * math.log(r.q_hat) + I0 for r in rows]
    mags = [abs(v) for v in vals]
    dec = all(b < a for a, b in zip(mags, mags[1:]))
    ratio = mags[-1] / I0 if I0 > 0 else math.inf
    ok = dec and mags[-1] <= 0.3 * I0
    return BoundsReport(verdict="PASS" if ok else "FAIL", values=vals,
                        signs=["+" if v > 0 else "-" if v < 0 else "0" for v in vals],
                        decreasing=dec, final_ratio=ratio, I0=I0)


@dataclass
class PenaltyRow:
    M: float
    J_hat: float
    stderr_J: float
    underflow: bool


@dataclass
class PenaltySweep:
    rows: list
    I_eps: float
    I_eps_half_width: float
    q_hat: float
    eps: float
    outflow_zero: bool

    def monotone_within_error(self) -> bool:
        """``J`` non-decreasing in ``M`` up to twice the combined standard error."""
        return all(b.J_hat >= a.J_hat - 2.0 * math.hypot(a.stderr_J, b.stderr_J)
                   for a, b in zip(self.rows, self.rows[1:]))

    def final_above_I_eps(self) -> bool:
        return self.rows[-1].J_hat >= self.I_eps - 2.0 * self.I_eps_half_width

    def to_json(self) -> dict:
        return {"rows": [{"M": r.M, "J_hat": r.J_hat, "stderr_J": r.stderr_J, "underflow": r.underflow}
                         for r in self.rows],
                "I_eps": self.I_eps, "I_eps_half_width": self.I_eps_half_width, "q_hat": self.q_hat,
                "eps": self.eps, "outflow_zero": self.outflow_zero,
                "monotone": self.monotone_within_error(), "final_above_I_eps": self.final_above_I_eps()}


def penalty_sweep(problem: ExitProblem, eps: float, M_schedule, N: int = 100_000, dt: float = 1e-3,
                  seed: int = 0, penalty: PenaltySpec | None = None, deltas=None,
                  threads: int | None = None, backend: str | None = None) -> PenaltySweep:
    """``J_M = -eps log E exp(-Phi_M / eps)`` for each ``M`` on one shared ensemble,
    alongside ``I_eps`` from the same paths."""
    Ms = [float(M) for M in M_schedule]
    if any(b <= a for a, b in zip(Ms, Ms[1:])):
        raise ValueError("M schedule must be increasing")
    base = penalty or default_penalty(problem, 1.0)
    ok = base.check_outflow_zero(problem)
    if not ok:
        raise ValueError("penalty does not vanish on sampled outflow boundary points")
    ens = run_ensemble(problem, eps, deltas, N, dt, seed, threads, backend=backend)
    est = _summarise(ens["cls"], eps, _deltas(problem, deltas), dt, seed)
    rows = []
    for M in Ms:
        r = feynman_kac_penalty(problem, base.scaled(M), eps, ensemble=ens)
        rows.append(PenaltyRow(M=M, J_hat=r.J_hat, stderr_J=r.stderr_J, underflow=r.underflow))
    hw = eps * Z95 * est.stderr / est.q_hat if est.q_hat > 0 else math.inf
    return PenaltySweep(rows=rows, I_eps=est.I_eps, I_eps_half_width=hw, q_hat=est.q_hat, eps=eps,
                        outflow_zero=ok)
