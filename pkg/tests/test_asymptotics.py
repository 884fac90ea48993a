import math

import pytest
from hypothesis import given, strategies as st

from chainexit.asymptotics import (MIN_EXITS, Z95, SweepError, SweepResult, SweepRow, bounds_check,
                                   epsilon_sweep, penalty_sweep, reference_action, row_seed)
from chainexit.montecarlo import PenaltySpec, estimate_exit_probability
from oracles import lin2_action

# I_eps observed for LIN2 at eps = 1, 0.5, 0.25 (dt = 1e-3, N up to 1e6)
LIN2_I = {1.0: 2.47, 0.5: 2.10, 0.25: 1.86}


def synthetic_sweep(I_of_eps, I0, N=10**6):
    rows = []
    for eps, I in I_of_eps.items():
        q = math.exp(-I / eps)
        rows.append(SweepRow(eps=eps, N=N, q_hat=q, stderr=math.sqrt(q * (1 - q) / N), I0=I0, usable=True))
    return SweepResult(rows, I0)


# ---------------------------------------------------------------- seeds and rows

def test_row_seed_is_deterministic_and_distinct():
    seeds = {row_seed(7, i, j) for i in range(50) for j in range(2)}
    assert len(seeds) == 100
    assert row_seed(7, 3) == row_seed(7, 3)
    assert all(0 <= s < 2 ** 64 for s in seeds)


@given(q=st.floats(1e-6, 1.0), rel=st.floats(0.0, 1.0), eps=st.floats(0.01, 2.0))
def test_row_interval_is_delta_method(q, rel, eps):
    row = SweepRow(eps=eps, N=1000, q_hat=q, stderr=rel * q, I0=1.0, usable=True)
    lo, hi = row.ci
    assert row.half_width == pytest.approx(Z95 * eps * rel, rel=1e-12, abs=1e-300)
    assert lo <= row.I_eps <= hi
    assert row.unreliable == (rel > 0.2)


def test_zero_estimate_row():
    row = SweepRow(eps=0.5, N=1000, q_hat=0.0, stderr=0.0, I0=1.0, usable=False)
    assert row.I_eps == math.inf and row.unreliable


def test_sweep_csv_round_trip(tmp_path):
    sw = synthetic_sweep(LIN2_I, 1.5)
    sw.rows[-1].usable = False
    sw.to_csv(tmp_path / "sweep.csv")
    header = (tmp_path / "sweep.csv").read_text().splitlines()[0]
    assert header == "eps,N,q_hat,stderr,I_eps,ci_lo,ci_hi,I0,gap,usable"
    back = SweepResult.from_csv(tmp_path / "sweep.csv")
    assert back.I0 == sw.I0
    for a, b in zip(sw.rows, back.rows):
        assert (a.eps, a.N, a.q_hat, a.stderr, a.usable) == (b.eps, b.N, b.q_hat, b.stderr, b.usable)


def test_schedule_must_decrease(lin2_problem):
    for sched in ([0.5, 1.0], [1.0, 1.0], [], [1.0, 0.0]):
        with pytest.raises(ValueError):
            epsilon_sweep(lin2_problem, sched, N_min=10, N_max=100, I0=1.5)


def test_all_rows_unusable_raises(lin2_problem):
    with pytest.raises(SweepError, match="raise N_max"):
        epsilon_sweep(lin2_problem, [0.05], N_min=100, N_max=1000, dt=1e-2, I0=1.5)


# ---------------------------------------------------------------- bounds check

def test_bounds_check_accepts_converging_sweep():
    rep = bounds_check(synthetic_sweep(LIN2_I, 1.5))
    assert rep.verdict == "PASS"
    assert rep.signs == ["-", "-", "-"]
    assert rep.final_ratio <= 0.3


@pytest.mark.parametrize("factor", [2.0, 1.5, 0.5])
def test_bounds_check_rejects_wrong_reference(factor):
    sw = synthetic_sweep(LIN2_I, 1.5)
    assert bounds_check(sw, I0=factor * 1.5).verdict == "FAIL"
    assert bounds_check(sw.with_I0(factor * 1.5)).verdict == "FAIL"


def test_bounds_check_needs_three_usable_rows():
    sw = synthetic_sweep({1.0: 2.47}, 1.5)
    with pytest.raises(SweepError):
        bounds_check(sw)
    sw = synthetic_sweep(LIN2_I, 1.5)
    sw.rows[0].usable = False
    with pytest.raises(SweepError):
        bounds_check(sw)


def test_gap_decrease_respects_interval_widths():
    sw = synthetic_sweep(LIN2_I, 1.5)
    assert sw.gaps_strictly_decreasing()
    wide = SweepResult([SweepRow(r.eps, 2000, r.q_hat, r.q_hat * 0.5, r.I0, True) for r in sw.rows], 1.5)
    assert not wide.gaps_strictly_decreasing()


# ---------------------------------------------------------------- sweeps

def test_deterministic_exit_sweep(det_exit_problem):
    sw = epsilon_sweep(det_exit_problem, [0.5, 0.25, 0.1], N_min=2000, N_max=4000, dt=1e-2, seed=3)
    assert sw.I0 == 0.0
    qs = [r.q_hat for r in sw.rows]
    assert all(r.usable for r in sw.rows)
    assert qs[-1] == 1.0 and all(b >= a for a, b in zip(qs, qs[1:]))
    assert all(r.I_eps <= 0.05 for r in sw.rows)


def test_sweep_sizes_rows_from_pilot(lin2_problem):
    sw = epsilon_sweep(lin2_problem, [1.0, 0.5], N_min=2000, N_max=50_000, dt=1e-2, seed=1, I0=1.5,
                       target_exits=200)
    for r in sw.rows:
        assert 2000 <= r.N <= 50_000
        assert r.N == min(50_000, max(2000, math.ceil(200 / r.pilot_q)))
        assert r.usable == (round(r.q_hat * r.N) >= MIN_EXITS)


def test_sweep_is_reproducible(lin2_problem):
    kw = dict(N_min=1000, N_max=5000, dt=1e-2, seed=9, I0=1.5)
    a = epsilon_sweep(lin2_problem, [1.0, 0.5], threads=1, **kw)
    b = epsilon_sweep(lin2_problem, [1.0, 0.5], threads=4, **kw)
    assert [r.as_dict() for r in a.rows] == [r.as_dict() for r in b.rows]


def _row(problem, eps, N, seed, dt=1e-2):
    est = estimate_exit_probability(problem, eps, N=N, dt=dt, seed=seed)
    return SweepRow(eps=eps, N=N, q_hat=est.q_hat, stderr=est.stderr, I0=0.0, usable=True)


def test_interval_self_consistency_over_seed_pairs(lin2_problem):
    agree = 0
    for k in range(20):
        a = _row(lin2_problem, 1.0, 5000, row_seed(100, k, 0))
        b = _row(lin2_problem, 1.0, 5000, row_seed(100, k, 1))
        agree += abs(a.I_eps - b.I_eps) < a.half_width + b.half_width
    assert agree >= 19


def test_interval_coverage(lin2_problem):
    ref = _row(lin2_problem, 1.0, 400_000, 12345)
    covered = sum(lo <= ref.I_eps <= hi
                  for lo, hi in (_row(lin2_problem, 1.0, 5000, row_seed(200, k)).ci for k in range(20)))
    assert covered >= 18


def test_reference_action_agrees_with_dp(lin2_problem):
    I0, dp, gap = reference_action(lin2_problem, restarts=2)
    assert I0 == pytest.approx(lin2_action(1.0, 1.0), rel=1e-3)
    assert abs(I0 - dp) <= gap * dp


# ---------------------------------------------------------------- penalty family

def test_zero_penalty_gives_zero(lin2_problem):
    ps = penalty_sweep(lin2_problem, 0.5, [0.0, 10.0], N=4000, dt=1e-2, seed=2)
    assert ps.rows[0].J_hat == 0.0 and ps.rows[0].stderr_J == 0.0
    assert ps.rows[1].J_hat > 0.0


def test_penalty_family_monotone_lin2(lin2_problem):
    ps = penalty_sweep(lin2_problem, 0.5, [10.0, 50.0, 100.0], N=20_000, dt=1e-3, seed=4)
    assert ps.outflow_zero
    assert ps.monotone_within_error()
    assert ps.final_above_I_eps()
    js = ps.to_json()
    assert js["monotone"] and js["final_above_I_eps"] and len(js["rows"]) == 3


def test_penalty_sweep_preconditions(lin2_problem):
    with pytest.raises(ValueError):
        penalty_sweep(lin2_problem, 0.5, [50.0, 10.0], N=100)
    with pytest.raises(ValueError, match="outflow"):
        penalty_sweep(lin2_problem, 0.5, [1.0], N=100, penalty=PenaltySpec("1 + x2[0]^2"))
