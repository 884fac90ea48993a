import math

from oracles import brownian_exit_eigen, brownian_exit_images, lin2_action


def test_two_brownian_series_agree():
    for T in (0.25, 1.0, 3.0):
        assert math.isclose(brownian_exit_images(1.0, T), brownian_exit_eigen(1.0, T), abs_tol=1e-12)


def test_brownian_reference_value():
    assert abs(brownian_exit_images(1.0, 1.0) - 0.6292) < 1e-4


def test_lin2_action_unit_box():
    assert lin2_action(1.0, 1.0) == 1.5
