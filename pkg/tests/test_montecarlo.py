import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from chainexit import builtin_model, interval, parse_model
from chainexit.montecarlo import (ExitProblem, PenaltySpec, default_penalty, delta_convergence_study,
                                  estimate_exit_probability, exit_time_ordering_check,
                                  feynman_kac_penalty, log_mean_exp, run_ensemble)
from chainexit.sde import BlowUpError
from oracles import brownian_exit_images


def model(f1, f2, sigma="1"):
    return parse_model(json.dumps({"n": 2, "d": 1, "m": 1, "lambda_floor": 1.0, "drifts": [f1, f2],
                                   "controls": [None, None], "sigma": sigma}))


def brownian_problem():
    return ExitProblem(model("0", "x1[0]"), 1, interval(-1, 1), (0, 1), (0.0,))


def test_problem_validation(lin2):
    with pytest.raises(ValueError):
        ExitProblem(lin2, 3, interval(-1, 1), (0, 1), (0, 0, 0))
    with pytest.raises(ValueError):
        ExitProblem(lin2, 2, interval(-1, 1), (0, 1), (0, 1.0))
    with pytest.raises(ValueError):
        ExitProblem(lin2, 2, interval(-1, 1), (1, 0), (0, 0))
    with pytest.raises(ValueError):
        ExitProblem(lin2, 2, interval(-1, 1), (0, 1), (0,))


def test_zero_horizon_gives_zero(lin2_problem):
    est = estimate_exit_probability(lin2_problem.with_(horizon=(0.0, 0.0)), 1.0, N=1000, seed=1)
    assert est.q_hat == 0.0 and not est.I_eps_defined and math.isinf(est.I_eps)


def test_noiseless_deterministic_exit(det_exit_problem):
    est = estimate_exit_probability(det_exit_problem, 0.0, N=10)
    assert est.q_hat == 1.0 and est.N == 10 and est.stderr == 0.0 and est.I_eps == 0.0


def test_brownian_exit_matches_reflection_series():
    q_ref = brownian_exit_images(1.0, 1.0)
    est = estimate_exit_probability(brownian_problem(), 1.0, N=20_000, dt=1e-3, seed=3)
    assert abs(est.q_hat - q_ref) <= 3 * est.stderr


def test_stderr_and_interval(lin2_problem):
    est = estimate_exit_probability(lin2_problem, 1.0, N=5000, dt=1e-2, seed=2)
    assert est.stderr == pytest.approx(math.sqrt(est.q_hat * (1 - est.q_hat) / est.N))
    assert est.ci95[0] <= est.q_hat <= est.ci95[1]
    assert est.I_eps == pytest.approx(-math.log(est.q_hat))


def test_zero_count_reports_clopper_pearson_bound(lin2_problem):
    est = estimate_exit_probability(lin2_problem, 0.02, N=1000, dt=1e-2, seed=1)
    assert est.q_hat == 0 and est.exits == 0
    assert est.cp_upper == pytest.approx(1 - 0.025 ** (1 / 1000))
    assert est.I_eps_lower == pytest.approx(-0.02 * math.log(est.cp_upper))
    assert json.loads(json.dumps(est.to_json()))["I_eps"] is None


def test_tangential_hits_count_as_exits():
    # one Euler step of length 0.5 lands on x2 = 1 exactly, where f2 = 2 - 4t vanishes
    m = model("0", "2 - 4 * t")
    pb = ExitProblem(m, 2, interval(-1, 1), (0, 1.5), (0.0, 0.0))
    est = estimate_exit_probability(pb, 0.0, N=4, dt=0.5)
    assert est.q_hat == 1.0 and est.gamma_zero_count == 4


def test_blow_up_fails_the_run():
    m = model("x1[0]^3", "x1[0]")
    pb = ExitProblem(m, 2, interval(-1e300, 1e300), (0, 1), (0.0, 0.0))
    with pytest.raises(BlowUpError):
        estimate_exit_probability(pb, 25.0, N=500, dt=0.05, seed=2)


def test_empty_ensemble_rejected(lin2_problem):
    with pytest.raises(ValueError):
        estimate_exit_probability(lin2_problem, 1.0, N=0)


def test_disjoint_blocks_pool_to_the_same_count(lin2_problem):
    N = 10_000
    pooled = estimate_exit_probability(lin2_problem, 1.0, N=N, dt=1e-2, seed=6)
    blocks = [np.mean(run_ensemble(lin2_problem, 1.0, N=N // 10, dt=1e-2, seed=6,
                                   first_path=b * N // 10)["cls"] > 0) for b in range(10)]
    assert math.fsum(blocks) / 10 == pooled.q_hat


def test_confidence_interval_calibration():
    q_ref = brownian_exit_images(1.0, 1.0)
    pb = brownian_problem()
    cover = 0
    for r in range(100):
        est = estimate_exit_probability(pb, 1.0, N=2000, dt=1e-2, seed=1000 + r)
        cover += est.ci95[0] <= q_ref <= est.ci95[1]
    assert cover >= 90


def test_worker_count_invariance(lin2_problem):
    qs = {t: estimate_exit_probability(lin2_problem, 0.5, N=30_000, dt=1e-2, seed=8, threads=t).q_hat
          for t in (1, 4, 16)}
    assert qs[1] == qs[4] == qs[16]


@settings(max_examples=10)
@given(st.integers(0, 2 ** 63))
def test_probability_grows_with_horizon(seed):
    pb = ExitProblem.from_model(builtin_model("lin2"))
    q1 = estimate_exit_probability(pb.with_(horizon=(0.0, 0.5)), 1.0, N=3000, dt=1e-2, seed=seed)
    q2 = estimate_exit_probability(pb, 1.0, N=3000, dt=1e-2, seed=seed)
    assert q1.exits <= q2.exits


def test_delta_only_noise_vanishes_with_delta(lin2_problem):
    st_ = delta_convergence_study(lin2_problem, 0.0, [0.5, 0.2, 0.1, 0.0], N=4000, dt=1e-2, seed=1)
    q = [e.q_hat for e in st_.estimates]
    assert q[0] > q[1] > q[2] >= q[3] == 0.0


def test_repeated_schedule_entries_are_identical(lin2_problem):
    st_ = delta_convergence_study(lin2_problem, 0.5, [0.0, 0.0], N=5000, dt=1e-2, seed=3)
    assert st_.estimates[0] == st_.estimates[1]
    assert st_.gaps == [0.0, 0.0]


def test_delta_study_csv(tmp_path, lin2_problem):
    st_ = delta_convergence_study(lin2_problem, 1.0, [0.1, 0.0], N=2000, dt=1e-2, seed=3)
    st_.to_csv(tmp_path / "d.csv")
    lines = (tmp_path / "d.csv").read_text().splitlines()
    assert lines[0] == "delta,q_hat,stderr,gap_to_delta0" and len(lines) == 3


@pytest.mark.parametrize("sched", [[0.1, 0.01], [0.01, 0.1, 0.0], [-1.0, 0.0], []])
def test_delta_schedule_validation(lin2_problem, sched):
    with pytest.raises(ValueError):
        delta_convergence_study(lin2_problem, 1.0, sched, N=10)


def test_zero_penalty_gives_zero_functional(lin2_problem):
    r = feynman_kac_penalty(lin2_problem, PenaltySpec("0", 1.0), 0.5, N=2000, dt=1e-2, seed=1)
    assert r.g_hat == 1.0 and r.J_hat == 0.0


def test_large_penalty_recovers_exit_probability(lin2_problem):
    ens = run_ensemble(lin2_problem, 0.5, N=100_000, dt=1e-2, seed=5)
    q = np.mean(ens["cls"] > 0)
    base = default_penalty(lin2_problem)
    gaps = [feynman_kac_penalty(lin2_problem, base.scaled(M), 0.5, ensemble=ens).g_hat - q
            for M in (10, 50, 100)]
    assert all(g >= 0 for g in gaps) and gaps[0] > gaps[1] > gaps[2]
    assert gaps[2] < 0.05 * q


def test_penalty_functional_monotone_in_M(lin2_problem):
    ens = run_ensemble(lin2_problem, 0.5, N=50_000, dt=1e-2, seed=9)
    base = default_penalty(lin2_problem)
    a = feynman_kac_penalty(lin2_problem, base.scaled(10), 0.5, ensemble=ens)
    b = feynman_kac_penalty(lin2_problem, base.scaled(100), 0.5, ensemble=ens)
    assert a.J_hat <= b.J_hat + 2 * math.hypot(a.stderr_J, b.stderr_J)


def test_penalty_validation(lin2_problem):
    with pytest.raises(Exception):
        PenaltySpec("x1[0]")
    with pytest.raises(Exception):
        PenaltySpec("u[0]")
    with pytest.raises(ValueError):
        PenaltySpec("0", -1)
    assert default_penalty(lin2_problem).check_outflow_zero(lin2_problem)
    assert not PenaltySpec("1").check_outflow_zero(lin2_problem)
    with pytest.raises(ValueError):
        feynman_kac_penalty(lin2_problem, PenaltySpec("0"), 0.0)


def test_penalty_underflow_is_flagged(lin2_problem):
    ens = run_ensemble(lin2_problem, 0.01, N=200, dt=1e-2, seed=1)
    r = feynman_kac_penalty(lin2_problem, default_penalty(lin2_problem, 1e4), 0.01, ensemble=ens)
    assert r.underflow and r.g_hat == 0.0 and math.isfinite(r.J_hat)


@given(st.lists(st.floats(-800, 5), min_size=1, max_size=40))
def test_log_mean_exp_is_order_independent(a):
    v, _ = log_mean_exp(np.array(a))
    w, _ = log_mean_exp(np.array(a[::-1]))
    assert v == w
    if max(a) > -700:
        assert v == pytest.approx(math.log(np.mean(np.exp(a))), rel=1e-12, abs=1e-12)


def test_ordering_report_and_errors():
    m = builtin_model("lin2")
    rep = exit_time_ordering_check(m, [interval(-5, 5), interval(-0.2, 0.2)], 1.0, N=500, dt=1e-2, seed=1)
    assert rep.N == 500 and len(rep.pair_violations) == 1 and 0 <= rep.violation_rate <= 1
    with pytest.raises(ValueError):
        exit_time_ordering_check(m, interval(-1, 1), 1.0, N=0)


def test_coupled_copy_removes_ordering_violations():
    """x2 relaxes to x1 at rate ``gain``; at ``gain * dt = 1`` the Euler step copies x1 with one step of lag."""
    rates = []
    for gain in (10, 1000):
        m = model("0", f"{gain} * (x1[0] - x2[0])")
        rep = exit_time_ordering_check(m, interval(-0.5, 0.5), 1.0, N=2000, dt=1e-3, seed=2,
                                       time_tol=2e-3)
        rates.append(rep.violation_rate)
    assert rates[0] > 0.5 and rates[1] <= 0.01
