import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from chainexit import builtin_model, interval, parse_model
from chainexit.montecarlo import ExitProblem, run_ensemble
from chainexit.sde import (BlowUpError, detect_exit, integrate_deterministic, simulate_chain,
                           time_grid)


def model(f1, f2, sigma="1"):
    return parse_model(json.dumps({"n": 2, "d": 1, "m": 1, "lambda_floor": 1.0, "drifts": [f1, f2],
                                   "controls": [None, None], "sigma": sigma}))


D = interval(-1, 1)


def test_time_grid_short_last_step():
    t = time_grid(0.0, 1.0, 0.3)
    assert t[0] == 0.0 and t[-1] == 1.0 and len(t) == 5
    assert time_grid(0.0, 1.0, 0.25).tolist() == [0, 0.25, 0.5, 0.75, 1.0]


def test_rk4_integrates_constant():
    tr = integrate_deterministic(model("0", "x1[0]"), [1.0, 0.0], (0, 1), 1e-3)
    assert abs(tr.states[-1, 1] - 1.0) <= 1e-9
    assert not tr.short_last_step


def test_rk4_constant_trajectory():
    tr = integrate_deterministic(model("0", "0"), [0.3, -0.2], (0, 1), 0.1)
    assert np.all(tr.states == [0.3, -0.2])


def test_rk4_exponential_decay():
    tr = integrate_deterministic(model("-x1[0]", "x1[0]"), [1.0, 0.0], (0, 1), 1e-3)
    assert abs(tr.states[-1, 0] - math.exp(-1)) <= 1e-8


def test_rk4_is_bit_reproducible():
    m = builtin_model("ou2")
    a = integrate_deterministic(m, [0.5, 0.1], (0, 1), 1e-2)
    b = integrate_deterministic(m, [0.5, 0.1], (0, 1), 1e-2)
    assert np.array_equal(a.states, b.states)


def test_blow_up_reports_step():
    with pytest.raises(BlowUpError) as info:
        integrate_deterministic(model("x1[0]^2", "0"), [1.0, 0.0], (0, 2), 1e-2)
    assert 90 <= info.value.step <= 200
    with pytest.raises(BlowUpError):
        simulate_chain(model("x1[0]^3", "0"), 0.1, None, [1.0, 0.0], (0, 2), 1e-2)


def test_noise_free_simulation_matches_rk4_to_first_order():
    m = builtin_model("ou2")
    errs = []
    for dt in (1e-2, 5e-3):
        a = simulate_chain(m, 0.0, None, [1.0, 0.0], (0, 1), dt)
        b = integrate_deterministic(m, [1.0, 0.0], (0, 1), dt)
        errs.append(np.max(np.abs(a.states - b.states)))
    assert errs[0] < 1e-2 and 1.7 < errs[0] / errs[1] < 2.3


def test_simulation_is_deterministic_per_stream():
    m = builtin_model("lin2")
    a = simulate_chain(m, 0.5, [0, 1e-3], [0, 0], (0, 1), 1e-2, seed=7, stream=3)
    b = simulate_chain(m, 0.5, [0, 1e-3], [0, 0], (0, 1), 1e-2, seed=7, stream=3)
    c = simulate_chain(m, 0.5, [0, 1e-3], [0, 0], (0, 1), 1e-2, seed=7, stream=4)
    assert np.array_equal(a.states, b.states) and not np.array_equal(a.states, c.states)
    assert a.noise.shape == (100, 2)


def test_invalid_inputs():
    m = builtin_model("lin2")
    with pytest.raises(ValueError):
        simulate_chain(m, -1, None, [0, 0], (0, 1), 1e-2)
    with pytest.raises(ValueError):
        simulate_chain(m, 1, None, [0, 0], (0, 1), 1e-2, stream=-1)
    with pytest.raises(ValueError):
        simulate_chain(m, 1, [0, -1], [0, 0], (0, 1), 1e-2)
    with pytest.raises(ValueError):
        integrate_deterministic(m, [0, 0, 0], (0, 1), 1e-2)


def test_brownian_variance_at_one():
    """Var x1(1) = 1 for f1 = 0, sigma = 1, eps = 1 (Brownian motion)."""
    m = model("0", "x1[0]")
    pb = ExitProblem(m, 1, interval(-1e3, 1e3), (0, 1), (0.0,))
    x = run_ensemble(pb, 1.0, N=100_000, dt=1e-2, seed=5)["xexit"][:, 0]
    n = x.size
    var = x.var(ddof=1)
    se = math.sqrt((np.mean((x - x.mean()) ** 4) - var ** 2) / n)
    assert abs(var - 1.0) <= 3 * se


def test_regularised_gap_obeys_gronwall_bound():
    """Shared W: sup |x2^delta - x2| <= e^{L T} sqrt(delta) max |W2| with L = 1."""
    m = model("0", "sin(x2[0]) + x1[0]")
    delta = 1e-4
    for p in range(300):
        a = simulate_chain(m, 1.0, [0, delta], [0, 0], (0, 1), 1e-2, seed=11, stream=p)
        b = simulate_chain(m, 1.0, [0, 0.0], [0, 0], (0, 1), 1e-2, seed=11, stream=p)
        assert np.array_equal(a.states[:, 0], b.states[:, 0])
        W2 = np.concatenate([[0.0], np.cumsum(a.noise[:, 1])])
        gap = np.max(np.abs(a.states[:, 1] - b.states[:, 1]))
        assert gap <= math.e * math.sqrt(delta) * np.max(np.abs(W2)) * (1 + 1e-9)


def test_regularised_paths_converge_as_delta_shrinks():
    m = builtin_model("lin2")
    pb_init = [0.0, 0.0]
    thetas, gaps = {}, {}
    for delta in (1e-2, 1e-4, 1e-6, 0.0):
        th, gp = [], []
        for p in range(100):
            a = simulate_chain(m, 2.0, [0, delta], pb_init, (0, 1), 1e-2, seed=2, stream=p)
            b = simulate_chain(m, 2.0, [0, 0.0], pb_init, (0, 1), 1e-2, seed=2, stream=p)
            gp.append(np.max(np.abs(a.states - b.states)))
            th.append(abs(detect_exit(a, D, 2, m).theta - detect_exit(b, D, 2, m).theta))
        thetas[delta], gaps[delta] = np.mean(th), max(gp)
    assert gaps[1e-2] > gaps[1e-4] > gaps[1e-6] > gaps[0.0] == 0.0
    assert thetas[1e-6] <= thetas[1e-2] and thetas[0.0] == 0.0


def test_strong_order_for_additive_noise():
    """Mean pathwise error of EM halves with dt (order one for additive noise)."""
    m = model("-x1[0]", "x1[0]")
    fine = 1 / 1024
    errs = {32: [], 64: []}
    for p in range(120):
        ref = simulate_chain(m, 1.0, None, [1.0, 0.0], (0, 1), fine, seed=4, stream=p)
        dW = ref.noise[:, 0]
        for n in errs:
            r = len(dW) // n
            x, h = 1.0, 1.0 / n
            for j in range(n):
                x = x - x * h + dW[j * r:(j + 1) * r].sum()
            errs[n].append(abs(x - ref.states[-1, 0]))
    ratio = np.mean(errs[64]) / np.mean(errs[32])
    assert 0.35 <= ratio <= 0.65


def test_straight_line_exit_is_exact():
    m = model("0", "1")
    tr = integrate_deterministic(m, [0.0, 0.0], (0, 2), 1e-3)
    ev = detect_exit(tr, D, 2, m)
    assert ev.theta == pytest.approx(1.0, abs=1e-12)
    assert ev.boundary_class == "gamma_plus" and ev.exit_point == (1.0,) and ev.transversality == 1.0


def test_censored_path():
    m = model("0", "0")
    tr = integrate_deterministic(m, [0.0, 0.0], (0, 1), 1e-2)
    ev = detect_exit(tr, D, 2, m)
    assert ev.boundary_class == "censored" and ev.theta == 1.0 and not ev.exited


def test_tangential_touch_is_gamma_zero():
    m = model("0", "2 * (1 - t)")
    tr = integrate_deterministic(m, [0.0, 0.0], (0, 1.5), 0.25)
    ev = detect_exit(tr, D, 2, m)
    assert ev.theta == 1.0 and ev.boundary_class == "gamma_zero" and ev.transversality == 0.0


def test_inflow_exit_is_gamma_minus():
    m = model("0", "-1")
    tr = integrate_deterministic(m, [0.0, 0.9], (0, 1), 0.05)
    ev = detect_exit(tr, interval(-1, 2), 2, m)
    assert ev.boundary_class == "censored"
    tr = simulate_chain(m, 0.0, [0, 0], [0.0, 0.95], (0, 1), 0.05)
    with pytest.raises(ValueError):
        detect_exit(tr, interval(-1, 0.5), 2, m)


def test_exit_event_json_and_csv(tmp_path):
    m = builtin_model("det-exit")
    tr = integrate_deterministic(m, [0.0, 0.0], (0, 1), 0.1)
    ev = detect_exit(tr, D, 2, m)
    assert json.loads(ev.dumps()) == {"theta": ev.theta, "exit_point": [1.0],
                                      "class": "gamma_plus", "transversality": 2.0}
    tr.to_csv(tmp_path / "tr.csv")
    lines = (tmp_path / "tr.csv").read_text().splitlines()
    assert lines[0] == "t,x1_0,x2_0" and len(lines) == 12


@settings(max_examples=30)
@given(st.integers(0, 10 ** 6), st.floats(1.05, 3.0))
def test_enlarging_domain_never_shortens_exit(stream, factor):
    m = builtin_model("lin2")
    tr = simulate_chain(m, 1.0, None, [0.0, 0.0], (0, 1), 1e-2, seed=1, stream=stream)
    small = detect_exit(tr, interval(-0.2, 0.2), 2, m)
    big = detect_exit(tr, interval(-0.2 * factor, 0.2 * factor), 2, m)
    assert big.theta >= small.theta
