import math
import random

import numpy as np
import pytest
from hypothesis import given, strategies as st

from chainexit import expr as ex
from exprgen import random_expr


def _slots(t, x, n, d):
    return [np.asarray(t)] + [np.asarray(x[i][k]) for i in range(1, n + 1) for k in range(d)]


def _both(e, t, x, n, d):
    """(reference value or None, program value or None); None marks an evaluation error."""
    try:
        ref = ex.reference_eval(e, t, x)
    except ex.EvaluationError:
        ref = None
    try:
        got = float(ex.compile_expr(e, d).evaluate(_slots(t, x, n, d)))
    except ex.EvaluationError:
        got = None
    return ref, got


def test_spec_example_evaluates_to_minus_two():
    e = ex.parse("-x1[0] + sin(t)")
    assert ex.depth(e) == 3
    assert ex.reference_eval(e, 0.0, {1: [2.0]}) == -2.0
    assert float(ex.compile_expr(e, 1).evaluate([np.array(0.0), np.array(2.0)])) == -2.0


def test_power_is_right_associative():
    assert ex.reference_eval(ex.parse("2^3^2")) == 512.0


def test_precedence_and_unary_minus():
    assert ex.reference_eval(ex.parse("-2^2")) == -4.0
    assert ex.reference_eval(ex.parse("1 - 2 - 3")) == -4.0
    assert ex.reference_eval(ex.parse("8 / 2 / 2")) == 2.0


def test_syntax_error_reports_position():
    with pytest.raises(ex.ExprSyntaxError) as info:
        ex.parse("x1[0] + * 2")
    assert info.value.line == 1 and info.value.col == 9


def test_unknown_function_and_variable():
    with pytest.raises(ex.ExprError):
        ex.parse("foo(x1[0])")
    with pytest.raises(ex.ExprError):
        ex.parse("y[0]")


@pytest.mark.parametrize("text", ["log(0 * t)", "sqrt(-1 - t*t)", "1 / (t - t)", "exp(1000 + t)"])
def test_out_of_domain_math_raises(text):
    e = ex.parse(text)
    with pytest.raises(ex.EvaluationError):
        ex.reference_eval(e, 0.5)
    with pytest.raises(ex.EvaluationError):
        ex.compile_expr(e, 1).evaluate([np.array([0.5])])


def test_evaluator_matches_reference_on_ten_thousand_pairs():
    rng = random.Random(12345)
    prng = np.random.default_rng(7)
    n, d = 3, 2
    compared = 0
    for _ in range(500):
        e = random_expr(rng, n, d, depth=5)
        for _ in range(20):
            t = float(prng.uniform(0, 2))
            x = {i: prng.uniform(-2, 2, d).tolist() for i in range(1, n + 1)}
            ref, got = _both(e, t, x, n, d)
            assert (ref is None) == (got is None), ex.to_string(e)
            if ref is not None:
                assert math.isclose(ref, got, rel_tol=1e-12, abs_tol=1e-12), (ex.to_string(e), ref, got)
            compared += 1
    assert compared == 10_000


@st.composite
def expressions(draw):
    return random_expr(random.Random(draw(st.integers(0, 2 ** 32))), 2, 2, depth=4, controls=True)


@given(expressions())
def test_print_parse_round_trip(e):
    back = ex.parse(ex.to_string(e))
    assert back == e or ex.to_string(back) == ex.to_string(e)
    rng = np.random.default_rng(0)
    for _ in range(5):
        t = float(rng.uniform(0, 1))
        x = {i: rng.uniform(-2, 2, 2).tolist() for i in (1, 2)}
        u = rng.uniform(-1, 1, 1).tolist()
        try:
            a = ex.reference_eval(e, t, x, u)
        except ex.EvaluationError:
            a = None
        try:
            b = ex.reference_eval(back, t, x, u)
        except ex.EvaluationError:
            b = None
        assert a == b


@given(expressions())
def test_parse_is_deterministic(e):
    text = ex.to_string(e)
    assert ex.parse(text) == ex.parse(text)


@given(st.floats(-1e6, 1e6, allow_nan=False), st.floats(0.1, 10))
def test_literal_round_trip(v, w):
    e = ex.BinOp("*", ex.Num(v), ex.Num(w))
    assert ex.reference_eval(ex.parse(ex.to_string(e))) == v * w


def test_substitute_controls():
    e = ex.parse("x1[0] + u[0]")
    k = (ex.parse("-2 * x1[0]"),)
    assert ex.reference_eval(ex.substitute_controls(e, k), 0, {1: [3.0]}) == -3.0
    with pytest.raises(ex.UnknownVariableError):
        ex.substitute_controls(e, None)
